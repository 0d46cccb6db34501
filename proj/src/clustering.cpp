#include "hydra/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hydra {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

std::size_t distinct_count(std::span<const Vector> points) {
  std::vector<const Vector*> p;
  for (const auto& v : points) p.push_back(&v);
  std::sort(p.begin(), p.end(), [](auto* a, auto* b) { return *a < *b; });
  return static_cast<std::size_t>(
      std::unique(p.begin(), p.end(), [](auto* a, auto* b) { return *a == *b; }) - p.begin());
}

namespace {

void check_points(std::span<const Vector> points) {
  if (points.empty()) throw UsageError("k-means needs at least one point");
  for (const auto& v : points) {
    if (v.size() != points.front().size()) throw ShapeError("k-means points have differing dimensions");
  }
}

struct Run {
  std::vector<Vector> centers;
  std::vector<std::size_t> assignments;
  double sse = 0.0;
  std::size_t iterations = 0;
  std::vector<double> history;
};

// Nearest center for every point; lowest index wins ties. Returns whether any
// assignment changed.
bool assign(std::span<const Vector> points, const std::vector<Vector>& centers,
            std::vector<std::size_t>& assignments, std::vector<double>& dist) {
  bool changed = false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::size_t best = 0;
    double best_d = squared_distance(points[i], centers[0]);
    for (std::size_t j = 1; j < centers.size(); ++j) {
      const double d = squared_distance(points[i], centers[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    if (assignments[i] != best) changed = true;
    assignments[i] = best;
    dist[i] = best_d;
  }
  return changed;
}

void update(std::span<const Vector> points, std::vector<Vector>& centers,
            std::vector<std::size_t>& assignments, std::vector<double>& dist) {
  const std::size_t k = centers.size();
  std::vector<std::size_t> counts(k, 0);
  for (auto a : assignments) ++counts[a];
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] != 0) continue;
    std::size_t far = 0;
    for (std::size_t i = 1; i < points.size(); ++i)
      if (dist[i] > dist[far]) far = i;
    --counts[assignments[far]];
    assignments[far] = j;
    counts[j] = 1;
    dist[far] = 0.0;
  }
  for (auto& c : centers) std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) add_in_place(centers[assignments[i]], points[i]);
  for (std::size_t j = 0; j < k; ++j)
    for (auto& x : centers[j]) x /= static_cast<double>(counts[j]);
}

double total(const std::vector<double>& dist) {
  double s = 0.0;
  for (double d : dist) s += d;
  return s;
}

Run lloyd(std::span<const Vector> points, std::vector<Vector> centers, std::size_t max_iter) {
  Run run;
  run.assignments.assign(points.size(), std::numeric_limits<std::size_t>::max());
  std::vector<double> dist(points.size());
  assign(points, centers, run.assignments, dist);
  run.history.push_back(total(dist));
  for (std::size_t it = 1; it <= max_iter; ++it) {
    update(points, centers, run.assignments, dist);
    const bool changed = assign(points, centers, run.assignments, dist);
    run.history.push_back(total(dist));
    run.iterations = it;
    if (!changed) break;
  }
  run.sse = run.history.back();
  run.centers = std::move(centers);
  return run;
}

std::vector<Vector> plus_plus_seed(std::span<const Vector> points, std::size_t k, SeededRng& rng) {
  std::vector<Vector> centers{points[rng.index(points.size())]};
  std::vector<double> d2(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) d2[i] = squared_distance(points[i], centers[0]);
  while (centers.size() < k) {
    const double sum = total(d2);
    std::size_t pick = 0;
    double u = rng.uniform01() * sum;
    for (; pick + 1 < points.size(); ++pick) {
      if (d2[pick] > 0.0 && u < d2[pick]) break;
      u -= d2[pick];
    }
    // Rounding can walk off the end onto a point already chosen.
    if (d2[pick] == 0.0) pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    centers.push_back(points[pick]);
    for (std::size_t i = 0; i < points.size(); ++i)
      d2[i] = std::min(d2[i], squared_distance(points[i], centers.back()));
  }
  return centers;
}

KMeansResult to_result(Run run, std::vector<std::vector<double>> histories) {
  KMeansResult r;
  r.k = run.centers.size();
  r.centers = std::move(run.centers);
  r.assignments = std::move(run.assignments);
  r.sse = run.sse;
  r.iterations = run.iterations;
  r.sse_history = std::move(histories);
  return r;
}

}  // namespace

KMeansResult kmeans(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter, std::size_t restarts) {
  check_points(points);
  if (k == 0) throw UsageError("k must be >= 1");
  if (restarts == 0) throw UsageError("restarts must be >= 1");
  const auto distinct = distinct_count(points);
  if (k > distinct) {
    throw UsageError("k=" + std::to_string(k) + " exceeds the " + std::to_string(distinct) +
                     " distinct points");
  }
  SeededRng rng(seed);
  std::optional<Run> best;
  std::vector<std::vector<double>> histories;
  for (std::size_t r = 0; r < restarts; ++r) {
    SeededRng local(rng.fork());
    Run run = lloyd(points, plus_plus_seed(points, k, local), max_iter);
    histories.push_back(run.history);
    if (!best || run.sse < best->sse) best = std::move(run);
  }
  return to_result(std::move(*best), std::move(histories));
}

SseCurve sse_curve(std::span<const Vector> points, std::size_t k_max, std::uint64_t seed,
                   std::size_t max_iter, std::size_t restarts) {
  check_points(points);
  if (k_max < 2) throw UsageError("k_max must be >= 2");
  const auto distinct = distinct_count(points);
  SseCurve curve;
  std::vector<Vector> prev;
  for (std::size_t k = 1; k <= k_max; ++k) {
    if (k > distinct) {
      curve.points.emplace_back(k, 0.0);
      continue;
    }
    auto res = kmeans(points, k, seed + k, max_iter, restarts);
    if (!prev.empty()) {
      // Warm start: previous centers plus the point worst served by them.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& c : prev) d = std::min(d, squared_distance(points[i], c));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      auto init = prev;
      init.push_back(points[far]);
      Run warm = lloyd(points, std::move(init), max_iter);
      if (warm.sse < res.sse) {
        res.centers = std::move(warm.centers);
        res.sse = warm.sse;
      }
    }
    curve.points.emplace_back(k, res.sse);
    prev = std::move(res.centers);
  }
  return curve;
}

std::size_t elbow_select(const SseCurve& curve) {
  const auto& p = curve.points;
  if (p.size() < 3) throw UsageError("elbow selection needs at least 3 curve points");
  double lo = p.front().second, hi = p.front().second;
  for (const auto& [k, s] : p) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  const double k0 = static_cast<double>(p.front().first);
  const double k1 = static_cast<double>(p.back().first);
  if (!(hi > lo) || !(k1 > k0)) return 1;
  const double y0 = (p.front().second - lo) / (hi - lo);
  const double y1 = (p.back().second - lo) / (hi - lo);
  std::size_t best_k = 1;
  double best = 1e-12;
  for (const auto& [k, s] : p) {
    const double x = (static_cast<double>(k) - k0) / (k1 - k0);
    const double y = (s - lo) / (hi - lo);
    const double gap = y0 + (y1 - y0) * x - y;
    if (gap > best + 1e-12) {
      best = gap;
      best_k = k;
    }
  }
  return best_k;
}

ClusterInit init_hydra_from_corpus(const Corpus& corpus, std::size_t k_max, std::uint64_t seed,
                                   std::optional<std::size_t> override_k) {
  if (corpus.empty()) throw UsageError("cannot cluster an empty corpus");
  const auto model = tfidf_fit(corpus);
  const auto vectors = tfidf_transform(model, corpus);
  ClusterInit out;
  if (override_k) {
    if (*override_k < 1) throw UsageError("expert count override must be >= 1");
    out.n = *override_k;
  } else {
    if (k_max < 3) throw UsageError("k_max must be >= 3 for elbow selection");
    out.curve = sse_curve(vectors, k_max, seed);
    out.n = elbow_select(out.curve);
  }
  const std::size_t k = std::min(out.n, distinct_count(vectors));
  out.assignments = kmeans(vectors, k, seed, kDefaultMaxIter, kDefaultRestarts).assignments;
  return out;
}

}  // namespace hydra
