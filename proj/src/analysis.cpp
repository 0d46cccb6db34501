#include "hydra/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "hydra/experiments.hpp"

namespace hydra {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Slot {
  std::string adapter;  // "0.v_proj"
  std::string tensor;
  std::size_t rows = 0, cols = 0;
};

std::vector<Slot> slots_of(const Checkpoint& ck) {
  std::vector<Slot> out;
  for (const auto& [name, adapter] : ck.adapters) {
    for (const auto& [tname, m] : named_tensors(adapter)) {
      if (tname.empty() || (tname[0] != 'A' && tname[0] != 'B')) continue;
      out.push_back({name, tname, m->rows(), m->cols()});
    }
  }
  return out;
}

const Matrix& tensor_of(const Checkpoint& ck, const Slot& s) {
  for (const auto& [tname, m] : named_tensors(*ck.find_adapter(s.adapter)))
    if (tname == s.tensor) return *m;
  throw ContractError("missing tensor " + s.adapter + "." + s.tensor);
}

void normalize_sign(Vector& v) {
  std::size_t big = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[big])) big = i;
  if (v[big] < 0)
    for (auto& x : v) x = -x;
}

double row_distance2(const Matrix& m, std::size_t a, std::size_t b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) {
    const double d = m(a, j) - m(b, j);
    acc += d * d;
  }
  return acc;
}

}  // namespace

std::string SubmoduleLabel::id() const {
  return checkpoint + "/" + std::to_string(layer) + "." + projection + "." + tensor;
}

Matrix pca_scores(const Matrix& x, std::size_t components, double tol) {
  const std::size_t n = x.rows(), dim = x.cols();
  Matrix xc = x;
  for (std::size_t j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) xc(i, j) -= mean;
  }
  // Covariance-vector product without forming the dim x dim matrix.
  auto cov_times = [&](const Vector& v) {
    Vector proj = matvec(xc, v);
    Vector out(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j) out[j] += xc(i, j) * proj[i];
    for (auto& o : out) o /= static_cast<double>(n);
    return out;
  };
  std::vector<Vector> axes;
  std::vector<double> values;
  SeededRng rng(0x5eed);
  for (std::size_t c = 0; c < components; ++c) {
    Vector v(dim);
    for (auto& e : v) e = rng.normal();
    auto deflate = [&](Vector& w) {
      for (const auto& a : axes) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dim; ++j) dot += a[j] * w[j];
        for (std::size_t j = 0; j < dim; ++j) w[j] -= dot * a[j];
      }
    };
    auto unit = [&](Vector& w) {
      double nrm = 0.0;
      for (double e : w) nrm += e * e;
      nrm = std::sqrt(nrm);
      if (nrm == 0.0) return false;
      for (auto& e : w) e /= nrm;
      return true;
    };
    deflate(v);
    bool live = unit(v);
    for (int it = 0; live && it < 20000; ++it) {
      Vector w = cov_times(v);
      deflate(w);
      if (!unit(w)) {
        live = false;
        break;
      }
      normalize_sign(w);
      double diff = 0.0;
      for (std::size_t j = 0; j < dim; ++j) diff = std::max(diff, std::abs(w[j] - v[j]));
      v = std::move(w);
      if (diff < tol) break;
    }
    if (!live) std::fill(v.begin(), v.end(), 0.0);  // no variance left
    axes.push_back(v);
  }
  Matrix scores(n, components);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < components; ++c)
      for (std::size_t j = 0; j < dim; ++j) scores(i, c) += xc(i, j) * axes[c][j];
  return scores;
}

EmbeddingReport breakdown(std::span<const std::pair<std::string, Checkpoint>> checkpoints) {
  if (checkpoints.size() < 2) throw UsageError("breakdown needs at least 2 checkpoints");
  const auto slots = slots_of(checkpoints.front().second);
  if (slots.empty()) throw UsageError("checkpoint '" + checkpoints.front().first + "' holds no adapters");
  for (const auto& [id, ck] : checkpoints) {
    const auto other = slots_of(ck);
    bool same = other.size() == slots.size();
    for (std::size_t i = 0; same && i < slots.size(); ++i) {
      same = other[i].adapter == slots[i].adapter && other[i].tensor == slots[i].tensor &&
             other[i].rows == slots[i].rows && other[i].cols == slots[i].cols;
    }
    if (!same) {
      throw UsageError("checkpoint '" + id + "' does not match the adapter shapes of '" + checkpoints.front().first + "'");
    }
  }

  EmbeddingReport rep;
  std::vector<const Matrix*> mats;
  for (const auto& [id, ck] : checkpoints) {
    for (const auto& s : slots) {
      SubmoduleLabel l;
      l.checkpoint = id;
      l.role = s.tensor[0];
      const auto dot = s.adapter.find('.');
      l.layer = std::stoul(s.adapter.substr(0, dot));
      l.projection = s.adapter.substr(dot + 1);
      l.tensor = s.tensor;
      rep.labels.push_back(l);
      mats.push_back(&tensor_of(ck, s));
    }
  }

  std::map<char, double> role_norm;
  std::map<char, std::size_t> role_count;
  std::size_t width = 0;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    role_norm[rep.labels[i].role] += frobenius_norm(*mats[i]);
    ++role_count[rep.labels[i].role];
    width = std::max(width, mats[i]->size());
  }
  const std::size_t n = mats.size();
  Matrix flat(n, width);
  for (std::size_t i = 0; i < n; ++i) {
    const char role = rep.labels[i].role;
    const double mean = role_norm[role] / static_cast<double>(role_count[role]);
    const double s = mean > 0.0 ? 1.0 / mean : 1.0;
    auto src = mats[i]->data();
    for (std::size_t j = 0; j < src.size(); ++j) flat(i, j) = src[j] * s;
  }
  rep.distances = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      rep.distances(i, j) = rep.distances(j, i) = std::sqrt(row_distance2(flat, i, j));
    }
  }
  rep.coords = pca_scores(flat, 2);

  double sum_a = 0.0, sum_b = 0.0;
  std::size_t cnt_a = 0, cnt_b = 0;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    std::vector<Matrix> group;
    for (const auto& [id, ck] : checkpoints) group.push_back(tensor_of(ck, slots[s]));
    const double spread = normalized_spread(group);
    if (slots[s].tensor[0] == 'A') {
      sum_a += spread;
      ++cnt_a;
    } else {
      sum_b += spread;
      ++cnt_b;
    }
  }
  rep.d_a = cnt_a ? sum_a / static_cast<double>(cnt_a) : 0.0;
  rep.d_b = cnt_b ? sum_b / static_cast<double>(cnt_b) : 0.0;
  rep.ratio = spread_ratio(rep.d_a, rep.d_b);
  if (rep.d_a == 0.0) rep.ratio_flag = rep.d_b == 0.0 ? "undefined" : "infinite";
  return rep;
}

void write_distance_csv(std::ostream& out, const EmbeddingReport& report) {
  out << "id_a,id_b,dist\n";
  for (std::size_t i = 0; i < report.labels.size(); ++i)
    for (std::size_t j = 0; j < report.labels.size(); ++j)
      out << report.labels[i].id() << ',' << report.labels[j].id() << ',' << fmt(report.distances(i, j)) << '\n';
}

void write_embedding_csv(std::ostream& out, const EmbeddingReport& report) {
  out << "id,role,layer,x,y\n";
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    const auto& l = report.labels[i];
    out << l.id() << ',' << l.role << ',' << l.layer << ',' << fmt(report.coords(i, 0)) << ','
        << fmt(report.coords(i, 1)) << '\n';
  }
}

void write_embedding_svg(std::ostream& out, const EmbeddingReport& report) {
  constexpr double size = 400.0, pad = 30.0;
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  for (std::size_t i = 0; i < report.coords.rows(); ++i) {
    lo_x = std::min(lo_x, report.coords(i, 0));
    hi_x = std::max(hi_x, report.coords(i, 0));
    lo_y = std::min(lo_y, report.coords(i, 1));
    hi_y = std::max(hi_y, report.coords(i, 1));
  }
  const double span_x = hi_x > lo_x ? hi_x - lo_x : 1.0;
  const double span_y = hi_y > lo_y ? hi_y - lo_y : 1.0;
  char buf[256];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\">\n";
  out << "<rect width=\"400\" height=\"400\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    const double px = pad + (report.coords(i, 0) - lo_x) / span_x * (size - 2 * pad);
    const double py = size - pad - (report.coords(i, 1) - lo_y) / span_y * (size - 2 * pad);
    const bool is_a = report.labels[i].role == 'A';
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"5\" fill=\"%s\"><title>%s</title></circle>\n",
                  px, py, is_a ? "#1f77b4" : "#d62728", report.labels[i].id().c_str());
    out << buf;
  }
  out << "</svg>\n";
}

std::uint64_t macs_per_matrix(Scheme scheme, const ParamShape& s) {
  switch (scheme) {
    case Scheme::Lora:
      return s.rank * (s.k + s.d);
    case Scheme::Split:
      return s.count * s.rank * (s.k + s.d);
    case Scheme::Hydra:
      return s.rank * s.k + s.count * s.d * s.rank + s.rank * s.count;
    case Scheme::Full:
      return s.d * s.k;
  }
  return 0;
}

CostReport cost(Scheme scheme, const ParamShape& shape, std::uint64_t reference_params) {
  if (reference_params == 0) throw UsageError("reference parameter count must be > 0");
  CostReport r;
  r.scheme = std::string(scheme_string(scheme));
  const std::uint64_t sites = shape.matrices_per_layer * shape.layers;
  r.params = params_per_matrix(scheme, shape) * sites;
  r.macs_fwd = macs_per_matrix(scheme, shape) * sites;
  r.macs_bwd = 2 * r.macs_fwd;
  r.ratio = static_cast<double>(r.params) / static_cast<double>(reference_params);
  return r;
}

void write_cost_csv(std::ostream& out, std::span<const CostReport> rows) {
  out << "scheme,params,macs_fwd,ratio\n";
  for (const auto& r : rows) out << r.scheme << ',' << r.params << ',' << r.macs_fwd << ',' << fmt(r.ratio) << '\n';
}

}  // namespace hydra
