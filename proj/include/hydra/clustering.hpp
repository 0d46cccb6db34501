#pragma once

// k-means over dense feature vectors and elbow selection of the expert count.
//
// Lloyd iterations alternate nearest-center assignment with mean updates. A
// cluster that empties out is reseeded at the point lying farthest from its
// own center. Seeding is k-means++; the best of several restarts is kept.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "hydra/corpus.hpp"
#include "hydra/linalg.hpp"

namespace hydra {

struct KMeansResult {
  std::size_t k = 0;
  std::vector<Vector> centers;
  std::vector<std::size_t> assignments;
  double sse = 0.0;
  std::size_t iterations = 0;
  // SSE after every assignment step, one list per restart (best restart
  // included). Each list should be non-increasing.
  std::vector<std::vector<double>> sse_history;
};

inline constexpr std::size_t kDefaultRestarts = 8;
inline constexpr std::size_t kDefaultMaxIter = 100;

// Throws UsageError when k is 0 or exceeds the number of distinct points, and
// ShapeError on ragged input.
KMeansResult kmeans(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = kDefaultMaxIter, std::size_t restarts = kDefaultRestarts);

std::size_t distinct_count(std::span<const Vector> points);
double squared_distance(std::span<const double> a, std::span<const double> b);

struct SseCurve {
  std::vector<std::pair<std::size_t, double>> points;  // (k, sse), k = 1..k_max
};

// Each k also gets a warm start from the best k-1 centers plus the farthest
// point, so the curve never rises. k beyond the number of distinct points
// scores 0 (every distinct point can hold its own center).
SseCurve sse_curve(std::span<const Vector> points, std::size_t k_max, std::uint64_t seed,
                   std::size_t max_iter = kDefaultMaxIter, std::size_t restarts = kDefaultRestarts);

// Knee of the curve: after min-max scaling both axes, the k whose SSE lies
// farthest below the chord joining the endpoints. Flat or knee-free curves
// give 1. Ties go to the smaller k.
std::size_t elbow_select(const SseCurve& curve);

struct ClusterInit {
  std::size_t n = 1;
  std::vector<std::size_t> assignments;  // diagnostics only
  SseCurve curve;                        // empty when the count was overridden
};

ClusterInit init_hydra_from_corpus(const Corpus& corpus, std::size_t k_max, std::uint64_t seed,
                                   std::optional<std::size_t> override_k = std::nullopt);

}  // namespace hydra
