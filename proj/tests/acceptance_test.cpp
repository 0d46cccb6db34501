// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hydra/analysis.hpp"
#include "hydra/clustering.hpp"
#include "hydra/experiments.hpp"
#include "hydra/toy_model.hpp"

using namespace hydra;
namespace fs = std::filesystem;

namespace {

// Pinned gates.
constexpr double kGradTol = 1e-6;
constexpr double kGradEps = 1e-6;
constexpr double kGateTol = 1e-12;
constexpr double kMergeTol = 1e-12;
constexpr double kSseSlack = 1e-9;
constexpr double kCostTarget = 0.500;
constexpr double kCostTol = 0.005;
constexpr double kHydra10Target = 0.341;
constexpr double kHydra10Tol = 0.002;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome parameter_accounting() {
  const std::uint64_t base = 6'738'000'000;
  auto pct = [&](Scheme s, std::uint64_t r, std::uint64_t n) {
    return param_count(s, ParamShape{4096, 4096, r, n, 2, 32}, base);
  };
  std::vector<std::string> bad;
  auto expect = [&](const char* what, double got, double want) {
    if (std::abs(got - want) > 1e-12) bad.push_back(std::string(what) + "=" + fmt("%.3f", got));
  };
  expect("lora8", pct(Scheme::Lora, 8, 1).percent, 0.062);
  expect("lora16", pct(Scheme::Lora, 16, 1).percent, 0.124);
  expect("lora32", pct(Scheme::Lora, 32, 1).percent, 0.248);
  expect("hydra8x3", pct(Scheme::Hydra, 8, 3).percent, 0.124);
  const double h10 = pct(Scheme::Hydra, 8, 10).percent_exact;
  if (std::abs(h10 - kHydra10Target) > kHydra10Tol) bad.push_back("hydra8x10=" + fmt("%.4f", h10));
  const auto split = pct(Scheme::Split, 8, 4).trainable;
  const auto lora32 = pct(Scheme::Lora, 32, 1).trainable;
  if (split != lora32) bad.push_back("split8x4 != lora32");
  std::string detail = "lora 0.062/0.124/0.248, hydra N=3 0.124, N=10 " + fmt("%.4f", h10) + ", split 8x4 = " +
                       std::to_string(split);
  for (const auto& b : bad) detail += " MISMATCH " + b;
  return {bad.empty(), detail};
}

Outcome zero_init() {
  SeededRng rng(101);
  double worst = 0.0;
  for (int scheme = 0; scheme < 3; ++scheme) {
    for (int i = 0; i < 1000; ++i) {
      const std::size_t d = 1 + rng.index(12), k = 1 + rng.index(12);
      const std::size_t r = 1 + rng.index(std::min(d, k)), n = 1 + rng.index(5);
      const Matrix w0 = gaussian(d, k, rng);
      Vector x(k);
      for (auto& v : x) v = rng.normal();
      Adapter ad = scheme == 0   ? Adapter{LoraAdapter::create(d, k, r, rng)}
                   : scheme == 1 ? Adapter{SplitAdapter::create(d, k, r, n, rng)}
                                 : Adapter{HydraAdapter::create(d, k, r, n, rng)};
      const Vector y = adapter_forward(x, w0, ad);
      const Vector base = matvec(w0, x);
      for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(y[j] - base[j]));
    }
  }
  return {worst == 0.0, "3000 instances, max |adapted - base| = " + fmt("%g", worst)};
}

Outcome gradient_fidelity() {
  SeededRng rng(202);
  double worst = 0.0;
  std::size_t coords = 0;
  for (int c = 0; c < 20; ++c) {
    ModelConfig mc;
    mc.input = InputKind::Tokens;
    mc.d_model = 3 + rng.index(5);
    mc.vocab = 5 + rng.index(6);
    mc.classes = 2 + rng.index(3);
    mc.blocks = 1 + rng.index(2);
    mc.mlp = rng.index(2) == 1;
    mc.mlp_hidden = 4;
    ToyModel model = ToyModel::create(mc, rng);
    AdapterConfig ac{Scheme::Hydra, 1 + rng.index(std::min<std::size_t>(3, mc.d_model)), 1 + rng.index(4)};
    model.attach("q_proj", ac, rng);
    model.attach("v_proj", ac, rng);
    for (auto& [name, m] : model.trainable_tensors())
      if (name.find("proj") != std::string::npos) *m = gaussian(m->rows(), m->cols(), rng, 0.5);
    Batch b;
    const std::size_t rows = 2 + rng.index(3);
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<std::size_t> seq(1 + rng.index(4));
      for (auto& t : seq) t = rng.index(mc.vocab);
      b.tokens.push_back(seq);
      b.labels.push_back(rng.index(mc.classes));
    }
    ad::Tape tape;
    const auto g = model.build(tape, b);
    const auto rep = ad::grad_check(tape, g.loss, rng, kGradEps);
    worst = std::max(worst, rep.max_rel_error);
    for (const auto& p : rep.params) coords += p.coords_checked;
  }
  return {worst <= kGradTol, "20 configs, " + std::to_string(coords) + " coords, max rel error " + fmt("%.3e", worst)};
}

Outcome gates_and_merge() {
  SeededRng rng(303);
  double gate_worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const std::size_t r = 1 + rng.index(8), n = 1 + rng.index(8);
    const Matrix router = gaussian(r, n, rng, 1.0 + 4.0 * rng.uniform01());
    Vector z(r);
    for (auto& v : z) v = 3.0 * rng.normal();
    double s = 0.0;
    for (double w : route(z, router).weights) s += w;
    gate_worst = std::max(gate_worst, std::abs(s - 1.0));
  }
  double merge_worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t d = 1 + rng.index(10), k = 1 + rng.index(10);
    const std::size_t r = 1 + rng.index(std::min(d, k)), n = 1 + rng.index(6);
    auto h = HydraAdapter::create(d, k, r, n, rng);
    for (auto& e : h.experts) e = gaussian(d, r, rng);
    h.router = gaussian(r, n, rng);
    const Matrix w0 = gaussian(d, k, rng);
    Vector x(k);
    for (auto& v : x) v = rng.normal();
    const auto moe = hydra_forward(x, w0, h).y;
    const auto merged = merge_infer(x, w0, h);
    for (std::size_t j = 0; j < d; ++j) merge_worst = std::max(merge_worst, std::abs(moe[j] - merged[j]));
  }
  return {gate_worst <= kGateTol && merge_worst <= kMergeTol,
          "gate |sum-1| max " + fmt("%.2e", gate_worst) + " over 1e5, merge diff max " + fmt("%.2e", merge_worst) +
              " over 1000"};
}

Outcome clustering_pipeline() {
  std::size_t hits = 0, iterations = 0, rises = 0;
  std::string picks;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synth_corpus({3, 50, 0.8, seed});
    const auto init = init_hydra_from_corpus(s.corpus, 8, seed);
    hits += init.n == 3;
    picks += std::to_string(init.n);
    // Lloyd histories for every k on the curve.
    const auto vectors = tfidf_transform(tfidf_fit(s.corpus), s.corpus);
    for (std::size_t k = 1; k <= 8; ++k) {
      for (const auto& h : kmeans(vectors, k, seed + k).sse_history) {
        for (std::size_t i = 1; i < h.size(); ++i) {
          ++iterations;
          rises += h[i] > h[i - 1] + kSseSlack;
        }
      }
    }
  }
  return {hits >= 19 && rises == 0, "k=3 in " + std::to_string(hits) + "/20 seeds (" + picks + "), SSE rose in " +
                                        std::to_string(rises) + "/" + std::to_string(iterations) + " Lloyd iterations"};
}

std::vector<std::uint64_t> ten_seeds() { return {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}; }

Outcome observation1() {
  const auto rep = run_observation1(ten_seeds(), Observation1Options{});
  double lora = 0, split = 0;
  for (const auto& r : rep.rows) {
    lora += r.lora_loss / 10;
    split += r.split_loss / 10;
  }
  return {rep.split_wins >= 8, "split(4x2) beat lora(8) in " + std::to_string(rep.split_wins) +
                                   "/10 seeds at " + std::to_string(rep.split_params) + " params each; mean eval mse " +
                                   fmt("%.4g", lora) + " vs " + fmt("%.4g", split)};
}

Outcome observation2() {
  const auto rep = run_observation2(ten_seeds(), Observation2Options{});
  double lo = INFINITY, hi = 0;
  for (const auto& r : rep.rows) {
    lo = std::min(lo, r.ratio);
    hi = std::max(hi, r.ratio);
  }
  return {rep.b_wins >= 8, "D_B/D_A > 1 in " + std::to_string(rep.b_wins) + "/10 seeds, range [" + fmt("%.3f", lo) +
                               ", " + fmt("%.3f", hi) + "]"};
}

Outcome heterogeneity() {
  std::size_t wins = 0;
  double first = 0, last = 0;
  for (auto seed : ten_seeds()) {
    const auto rows = run_heterogeneity(seed, HeterogeneityOptions{});
    wins += rows.back().gap > rows.front().gap;
    first += rows.front().gap / 10;
    last += rows.back().gap / 10;
  }
  return {wins >= 8, "gap(level 8) > gap(level 1) in " + std::to_string(wins) + "/10 seeds; mean gaps " +
                         fmt("%.4f", first) + " -> " + fmt("%.4f", last)};
}

Outcome cost_proxy() {
  const auto lora = cost(Scheme::Lora, ParamShape{4096, 4096, 32, 1, 2, 32}, 1);
  const auto hyd = cost(Scheme::Hydra, ParamShape{4096, 4096, 8, 3, 2, 32}, lora.params);
  return {std::abs(hyd.ratio - kCostTarget) <= kCostTol,
          "hydra(8,3)/lora(32) trainable ratio " + fmt("%.4f", hyd.ratio) + " (" + std::to_string(hyd.params) + "/" +
              std::to_string(lora.params) + ")"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "hydra_peft_acceptance";
  fs::remove_all(root);
  const std::string cli = HYDRA_PEFT_CLI;
  auto pipeline = [&](const fs::path& dir) {
    fs::create_directories(dir);
    const std::string d = dir.string();
    std::ofstream(dir / "train.cfg") << "scheme = hydra\nrank = 4\nexperts_from = cluster.json\nlearning_rate = 0.05\n"
                                        "steps = 40\nbatch_size = 8\nseed = 3\noptimizer = adam\ndata = train.jsonl\n"
                                        "eval_interval = 10\n";
    std::ofstream(dir / "train2.cfg") << "scheme = hydra\nrank = 4\nexperts_from = cluster.json\nlearning_rate = 0.05\n"
                                         "steps = 40\nbatch_size = 8\nseed = 4\noptimizer = adam\ndata = train.jsonl\n";
    const std::vector<std::string> cmds{
        "synth-corpus --seed 7 --docs 20 --tasks --out " + d + "/train.jsonl",
        "cluster --corpus " + d + "/train.jsonl --seed 7 --out " + d + "/cluster.json > " + d + "/cluster.txt",
        "train --config " + d + "/train.cfg --out " + d + "/run > " + d + "/train.txt",
        "train --config " + d + "/train2.cfg --out " + d + "/run2 > " + d + "/train2.txt",
        "analyze --checkpoint " + d + "/run/checkpoint.txt --checkpoint " + d + "/run2/checkpoint.txt --out " + d +
            "/analysis --svg > " + d + "/analyze.txt",
        "merge-infer --checkpoint " + d + "/run/checkpoint.txt > " + d + "/merge.txt",
        "bench --suite obs2 --seeds 2 --steps 30 --out " + d + "/obs2.csv > " + d + "/obs2.json",
    };
    for (const auto& c : cmds) {
      const std::string full = "\"" + cli + "\" " + c + " 2>/dev/null";
      if (std::system(full.c_str()) != 0) return "command failed: " + c;
    }
    return std::string();
  };
  for (const auto* run : {"a", "b"}) {
    if (auto err = pipeline(root / run); !err.empty()) return {false, err};
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ++files;
    if (slurp(e.path()) != slurp(root / "b" / rel)) return {false, "differs: " + rel.string()};
  }
  fs::remove_all(root);
  return {files > 10, std::to_string(files) + " output files byte-identical across reruns"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"parameter accounting", parameter_accounting},
      {"zero-init contract", zero_init},
      {"gradient fidelity", gradient_fidelity},
      {"gate and merge properties", gates_and_merge},
      {"clustering pipeline", clustering_pipeline},
      {"observation I analog", observation1},
      {"observation II analog", observation2},
      {"heterogeneity gap", heterogeneity},
      {"cost proxy", cost_proxy},
      {"determinism", cli_determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("criterion %2zu %-26s %s  %s [%.2fs]\n", i + 1, criteria[i].name, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
