// hydra-peft: command-line front end.
//
// Exit codes: 0 ok, 1 usage, 2 runtime (I/O, parse), 3 invariant violation.
// Machine-readable output goes to stdout, commentary to stderr.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hydra/analysis.hpp"
#include "hydra/clustering.hpp"
#include "hydra/corpus.hpp"
#include "hydra/experiments.hpp"
#include "hydra/trainer.hpp"

namespace fs = std::filesystem;
using namespace hydra;
using nlohmann::ordered_json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Worker count for bench: HYDRA_PEFT_THREADS if set, else the core count.
std::size_t thread_cap() {
  if (const char* env = std::getenv("HYDRA_PEFT_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError("HYDRA_PEFT_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn over every seed on up to thread_cap() workers; results keep seed order.
template <class Row, class Fn>
std::vector<Row> over_seeds(const std::vector<std::uint64_t>& seeds, Fn fn) {
  std::vector<Row> rows(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < seeds.size();) {
      try {
        rows[i] = fn(seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(seeds.size(), thread_cap());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

// ---------------------------------------------------------------------------

struct ClusterArgs {
  std::string corpus, out;
  std::size_t k_max = 8;
  std::uint64_t seed = 0;
  std::optional<std::size_t> k;
};

int cmd_cluster(const ClusterArgs& a) {
  const Corpus corpus = read_corpus(a.corpus);
  const auto init = init_hydra_from_corpus(corpus, a.k_max, a.seed, a.k);
  ordered_json j;
  j["k_selected"] = init.n;
  j["sse_curve"] = ordered_json::array();
  for (const auto& [k, sse] : init.curve.points) j["sse_curve"].push_back({k, sse});
  j["assignments"] = ordered_json::object();
  for (std::size_t i = 0; i < corpus.size(); ++i) j["assignments"][corpus[i].id] = init.assignments[i];
  if (!a.out.empty()) write_file(a.out, j.dump(2) + "\n");
  std::cout << "k_selected: " << init.n << "\n";
  std::cerr << corpus.size() << " documents, " << init.n << " clusters";
  if (!init.curve.points.empty()) std::cerr << " (elbow over k=1.." << init.curve.points.back().first << ")";
  std::cerr << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, out;
};

int cmd_train(const TrainArgs& a) {
  const fs::path cfg_path(a.config);
  auto run = prepare_run(load_train_config(cfg_path), cfg_path.parent_path());
  const auto res = train(run.model, run.data.train, run.data.eval, run.config);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "checkpoint.txt", serialize_checkpoint(res.checkpoint));
  std::ostringstream csv;
  write_report_csv(csv, res.report);
  write_file(dir / "report.csv", csv.str());
  const std::string summary = report_json(res.report);
  write_file(dir / "report.json", summary);
  std::cout << summary;
  std::cerr << "trained " << res.report.scheme << " for " << res.report.steps << " steps: loss "
            << res.report.initial_loss << " -> " << res.report.final_loss << ", accuracy " << res.report.final_accuracy
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string config, checkpoint, data;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path cfg_path(a.config);
  auto run = prepare_run(load_train_config(cfg_path), cfg_path.parent_path());
  run.model.detach_all();
  restore_checkpoint(run.model, load_checkpoint(a.checkpoint));
  const Batch batch = a.data.empty() ? run.data.eval : encode_documents(run.data, read_corpus(a.data));
  const auto r = run.model.forward(batch);
  ordered_json j;
  j["examples"] = batch.size();
  j["loss"] = r.loss;
  j["accuracy"] = r.accuracy;
  j["gate_usage"] = r.gate_usage;
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct MergeArgs {
  std::string checkpoint, input;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

int cmd_merge_infer(const MergeArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  std::optional<Vector> fixed;
  if (!a.input.empty()) {
    fixed.emplace();
    std::stringstream ss(a.input);
    for (std::string item; std::getline(ss, item, ',');) {
      try {
        std::size_t used = 0;
        fixed->push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw UsageError("--input: '" + item + "' is not a number");
      }
    }
  }
  double worst = 0.0;
  std::size_t adapters = 0;
  SeededRng rng(a.seed);
  for (const auto& [name, adapter] : ck.adapters) {
    const auto* h = std::get_if<HydraAdapter>(&adapter);
    if (!h) continue;
    ++adapters;
    // W0 cancels in merge - moe, so a zero base isolates the adapter paths.
    const Matrix w0(h->out_dim(), h->in_dim());
    const std::size_t n = fixed ? 1 : a.samples;
    for (std::size_t s = 0; s < n; ++s) {
      Vector x = fixed ? *fixed : Vector(h->in_dim());
      if (x.size() != h->in_dim()) {
        throw UsageError("--input has " + std::to_string(x.size()) + " values but adapter " + name + " expects " +
                         std::to_string(h->in_dim()));
      }
      if (!fixed)
        for (auto& v : x) v = rng.normal();
      const auto moe = hydra_forward(x, w0, *h).y;
      const auto merged = merge_infer(x, w0, *h);
      for (std::size_t i = 0; i < moe.size(); ++i) worst = std::max(worst, std::abs(merged[i] - moe[i]));
    }
  }
  if (adapters == 0) throw UsageError("checkpoint holds no hydra adapters");
  std::cout << "max_abs_diff: " << fmt(worst) << "\n";
  std::cerr << adapters << " hydra adapter(s) checked\n";
  if (!(worst <= 1e-12)) throw ContractError("merged inference drifted from expert mixing by " + fmt(worst));
  return 0;
}

struct AnalyzeArgs {
  std::vector<std::string> checkpoints;
  std::string out;
  bool svg = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
  if (a.checkpoints.size() < 2) throw UsageError("analyze needs at least 2 checkpoints");
  std::vector<std::pair<std::string, Checkpoint>> cks;
  for (const auto& p : a.checkpoints) {
    std::string id = fs::path(p).stem().string();
    if (id == "checkpoint") id = fs::path(p).parent_path().filename().string();
    const bool taken = std::any_of(cks.begin(), cks.end(), [&](const auto& c) { return c.first == id; });
    cks.emplace_back(taken || id.empty() ? p : id, load_checkpoint(p));
  }
  const auto rep = breakdown(cks);
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    std::ostringstream d, e;
    write_distance_csv(d, rep);
    write_embedding_csv(e, rep);
    write_file(dir / "distances.csv", d.str());
    write_file(dir / "embedding.csv", e.str());
    if (a.svg) {
      std::ostringstream s;
      write_embedding_svg(s, rep);
      write_file(dir / "embedding.svg", s.str());
    }
  }
  ordered_json j;
  j["submodules"] = rep.labels.size();
  j["d_a"] = rep.d_a;
  j["d_b"] = rep.d_b;
  if (std::isinf(rep.ratio)) j["ratio"] = "inf";
  else j["ratio"] = rep.ratio;
  j["ratio_flag"] = rep.ratio_flag;
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct ParamsArgs {
  std::string scheme;
  std::uint64_t rank = 0, experts = 1, heads = 1, d = 0, k = 0, layers = 1, mpl = 1, base = 0;
};

int cmd_params(const ParamsArgs& a) {
  const Scheme s = parse_scheme(a.scheme);
  if (s != Scheme::Full && a.rank < 1) throw UsageError("--rank must be >= 1");
  if (a.d < 1 || a.k < 1) throw UsageError("--d and --k must be >= 1");
  const std::uint64_t count = s == Scheme::Hydra ? a.experts : s == Scheme::Split ? a.heads : 1;
  if (count < 1) throw UsageError("expert/head count must be >= 1");
  const auto c = param_count(s, ParamShape{a.d, a.k, a.rank, count, a.mpl, a.layers}, a.base);
  std::cout << format_param_count(c) << "\n";
  return 0;
}

struct BenchArgs {
  std::string suite, out;
  std::size_t seeds = 10;
  std::uint64_t first_seed = 0;
  std::optional<std::size_t> steps;
};

int cmd_bench(const BenchArgs& a) {
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.first_seed + i);
  ordered_json j;
  j["suite"] = a.suite;
  j["seeds"] = a.seeds;
  std::ostringstream csv;

  if (a.suite == "obs1") {
    Observation1Options opt;
    if (a.steps) opt.run.steps = *a.steps;
    run_observation1({}, opt);  // budget check before any work
    const auto rows = over_seeds<Observation1Row>(seeds, [&](std::uint64_t s) { return observation1_seed(s, opt); });
    std::size_t wins = 0;
    csv << "seed,lora_loss,split_loss\n";
    for (const auto& r : rows) {
      wins += r.split_loss < r.lora_loss;
      csv << r.seed << ',' << fmt(r.lora_loss) << ',' << fmt(r.split_loss) << '\n';
      j["rows"].push_back({{"seed", r.seed}, {"lora_loss", r.lora_loss}, {"split_loss", r.split_loss}});
    }
    j["split_wins"] = wins;
    std::cerr << "split(r=" << opt.split_rank << ",n=" << opt.heads << ") beat lora(r=" << opt.lora_rank << ") in " << wins
              << "/" << rows.size() << " seeds\n";
  } else if (a.suite == "obs2") {
    Observation2Options opt;
    if (a.steps) opt.run.steps = *a.steps;
    if (seeds.size() < 2) throw UsageError("obs2 needs at least 2 seeds");
    const auto rows = over_seeds<Observation2Row>(seeds, [&](std::uint64_t s) { return observation2_seed(s, opt); });
    std::size_t wins = 0;
    csv << "seed,d_a,d_b,ratio\n";
    std::cerr << "seed        D_A        D_B   D_B/D_A\n";
    for (const auto& r : rows) {
      wins += r.ratio > 1.0;
      csv << r.seed << ',' << fmt(r.d_a) << ',' << fmt(r.d_b) << ',' << fmt(r.ratio) << '\n';
      j["rows"].push_back({{"seed", r.seed}, {"d_a", r.d_a}, {"d_b", r.d_b}, {"ratio", r.ratio}});
      char line[96];
      std::snprintf(line, sizeof line, "%4llu %10.5f %10.5f %9.3f\n", static_cast<unsigned long long>(r.seed), r.d_a,
                    r.d_b, r.ratio);
      std::cerr << line;
    }
    j["b_wins"] = wins;
    std::cerr << "D_B/D_A > 1 in " << wins << "/" << rows.size() << " seeds\n";
  } else if (a.suite == "het") {
    HeterogeneityOptions opt;
    if (a.steps) opt.run.steps = *a.steps;
    const auto curves =
        over_seeds<std::vector<HeterogeneityRow>>(seeds, [&](std::uint64_t s) { return run_heterogeneity(s, opt); });
    std::size_t wins = 0;
    csv << "seed,level,fft,peft,gap\n";
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& c = curves[i];
      wins += c.back().gap > c.front().gap;
      for (const auto& r : c) {
        csv << seeds[i] << ',' << r.level << ',' << fmt(r.fft) << ',' << fmt(r.peft) << ',' << fmt(r.gap) << '\n';
        j["rows"].push_back(
            {{"seed", seeds[i]}, {"level", r.level}, {"fft", r.fft}, {"peft", r.peft}, {"gap", r.gap}});
      }
    }
    j["gap_widens"] = wins;
    std::cerr << "gap at level " << opt.levels.back() << " exceeded level " << opt.levels.front() << " in " << wins << "/"
              << seeds.size() << " seeds\n";
  } else if (a.suite == "cost") {
    const ParamShape lora32{4096, 4096, 32, 1, 2, 32};
    const auto reference = cost(Scheme::Lora, lora32, 1).params;
    std::vector<CostReport> rows{cost(Scheme::Lora, lora32, reference),
                                 cost(Scheme::Lora, ParamShape{4096, 4096, 8, 1, 2, 32}, reference),
                                 cost(Scheme::Split, ParamShape{4096, 4096, 8, 4, 2, 32}, reference),
                                 cost(Scheme::Hydra, ParamShape{4096, 4096, 8, 3, 2, 32}, reference)};
    write_cost_csv(csv, rows);
    for (const auto& r : rows)
      j["rows"].push_back({{"scheme", r.scheme}, {"params", r.params}, {"macs_fwd", r.macs_fwd}, {"ratio", r.ratio}});
    std::cerr << "hydra(r=8,N=3) / lora(r=32) trainable ratio " << rows.back().ratio << "\n";
  } else {
    throw UsageError("unknown suite '" + a.suite + "' (obs1, obs2, het, cost)");
  }
  if (!a.out.empty()) write_file(a.out, csv.str());
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct SynthArgs {
  std::size_t clusters = 3, docs = 50, pool = 20, length = 30;
  double disjointness = 0.8;
  std::uint64_t seed = 0;
  bool tasks = false;
  std::string out, labels;
};

int cmd_synth(const SynthArgs& a) {
  auto s = synth_corpus(SynthSpec{a.clusters, a.docs, a.disjointness, a.seed, a.pool, a.length});
  if (a.tasks)
    for (std::size_t i = 0; i < s.corpus.size(); ++i) s.corpus[i].task = "c" + std::to_string(s.labels[i]);
  std::ostringstream body;
  write_corpus(body, s.corpus);
  if (a.out.empty()) std::cout << body.str();
  else write_file(a.out, body.str());
  if (!a.labels.empty()) {
    std::ostringstream lab;
    lab << "id,label\n";
    for (std::size_t i = 0; i < s.corpus.size(); ++i) lab << s.corpus[i].id << ',' << s.labels[i] << '\n';
    write_file(a.labels, lab.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hydra-style asymmetric LoRA toolkit"};
  app.require_subcommand(1);

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "Pick the expert count N by k-means elbow over TF-IDF");
  cluster->add_option("--corpus", ca.corpus, "JSONL corpus")->required();
  cluster->add_option("--k-max", ca.k_max, "Largest k on the SSE curve")->capture_default_str();
  cluster->add_option("--seed", ca.seed)->capture_default_str();
  cluster->add_option("--k", ca.k, "Developer-specified N (skips the elbow)");
  cluster->add_option("--out", ca.out, "Clustering JSON output");

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Fine-tune adapters from a config file");
  trainc->add_option("--config", ta.config)->required();
  trainc->add_option("--out", ta.out, "Output directory")->required();

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  evalc->add_option("--config", ea.config)->required();
  evalc->add_option("--checkpoint", ea.checkpoint)->required();
  evalc->add_option("--data", ea.data, "JSONL corpus (default: held-out split of the config data)");

  MergeArgs ma;
  auto* merge = app.add_subcommand("merge-infer", "Compare merged inference with expert mixing");
  merge->add_option("--checkpoint", ma.checkpoint)->required();
  merge->add_option("--input", ma.input, "Comma-separated input vector");
  merge->add_option("--samples", ma.samples, "Random inputs when --input is absent")->capture_default_str();
  merge->add_option("--seed", ma.seed)->capture_default_str();

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Distances and PCA embedding of A/B submodules");
  analyze->add_option("--checkpoint", aa.checkpoints, "Checkpoint file (repeat)")->required();
  analyze->add_option("--out", aa.out, "Directory for CSV outputs");
  analyze->add_flag("--svg", aa.svg, "Also write embedding.svg");

  ParamsArgs pa;
  auto* params = app.add_subcommand("params", "Trainable parameter count and %Param");
  params->add_option("--scheme", pa.scheme)->required();
  params->add_option("--rank", pa.rank);
  params->add_option("--experts", pa.experts)->capture_default_str();
  params->add_option("--heads", pa.heads)->capture_default_str();
  params->add_option("--d", pa.d)->required();
  params->add_option("--k", pa.k)->required();
  params->add_option("--layers", pa.layers)->capture_default_str();
  params->add_option("--matrices-per-layer", pa.mpl)->capture_default_str();
  params->add_option("--base-total", pa.base)->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Run an experiment harness over seeds");
  bench->add_option("--suite", ba.suite, "obs1, obs2, het or cost")->required();
  bench->add_option("--seeds", ba.seeds, "Number of seeds")->capture_default_str();
  bench->add_option("--first-seed", ba.first_seed)->capture_default_str();
  bench->add_option("--steps", ba.steps, "Override training steps");
  bench->add_option("--out", ba.out, "CSV output");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-corpus", "Write a planted synthetic corpus");
  synth->add_option("--clusters", sa.clusters)->capture_default_str();
  synth->add_option("--docs", sa.docs, "Documents per cluster")->capture_default_str();
  synth->add_option("--disjointness", sa.disjointness)->capture_default_str();
  synth->add_option("--pool", sa.pool, "Terms per pool")->capture_default_str();
  synth->add_option("--length", sa.length, "Tokens per document")->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_flag("--tasks", sa.tasks, "Label documents with their planted component");
  synth->add_option("--out", sa.out, "JSONL output (default stdout)");
  synth->add_option("--labels", sa.labels, "CSV of planted labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*cluster) return cmd_cluster(ca);
    if (*trainc) return cmd_train(ta);
    if (*evalc) return cmd_eval(ea);
    if (*merge) return cmd_merge_infer(ma);
    if (*analyze) return cmd_analyze(aa);
    if (*params) return cmd_params(pa);
    if (*bench) return cmd_bench(ba);
    if (*synth) return cmd_synth(sa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "invariant violated: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "invariant violated: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
