#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "fmtl/error.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/rng.hpp"

namespace fmtl {

/// Σ q_t ℓ_t / Σ q_t (the inner average of the per-client objective).
inline double combine_losses(std::span<const double> losses, std::span<const double> q) {
  if (losses.size() != q.size()) throw ArgumentError("combine_losses: length mismatch");
  double qs = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] < 0.0) throw ArgumentError("combine_losses: negative task weight");
    qs += q[i];
    acc += q[i] * losses[i];
  }
  if (!(qs > 0.0)) throw ArgumentError("combine_losses: task weights sum to zero");
  return acc / qs;
}

/// A client's accumulated update θ_global − θ_local; the server treats it as
/// a descent direction.
inline std::vector<double> pseudo_gradient(const SegmentedParams& global, const SegmentedParams& local) {
  require_compatible(global.layout(), local.layout());
  std::vector<double> d(global.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = global.values()[i] - local.values()[i];
  return d;
}

using GradientSet = std::vector<std::vector<double>>;

inline void check_gradient_set(const GradientSet& grads, const char* who) {
  if (grads.empty()) throw ArgumentError(std::string(who) + ": empty gradient set");
  for (const auto& g : grads) {
    if (g.size() != grads.front().size()) throw ShapeError(std::string(who) + ": gradients differ in length");
  }
}

inline std::vector<double> mean_gradient(const GradientSet& grads) {
  check_gradient_set(grads, "mean_gradient");
  std::vector<double> m(grads.front().size(), 0.0);
  for (const auto& g : grads) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += g[i];
  }
  const double inv = 1.0 / static_cast<double>(grads.size());
  for (auto& v : m) v *= inv;
  return m;
}

struct PcgradTrace {
  GradientSet surgered;
  /// Index of the last gradient each g_i was projected against, -1 if none.
  std::vector<int> last_projected;
  std::vector<double> combined;
};

/// Gradient surgery: each g_i is projected off the normal plane of every
/// conflicting g_j (g_i·g_j < 0), visiting the others in a seeded random
/// order; projections use the original g_j. Output is the mean.
inline PcgradTrace pcgrad_trace(const GradientSet& grads, RngStream rng) {
  check_gradient_set(grads, "pcgrad");
  const std::size_t k = grads.size();
  PcgradTrace tr;
  tr.surgered = grads;
  tr.last_projected.assign(k, -1);
  std::vector<double> sq(k);
  for (std::size_t j = 0; j < k; ++j) sq[j] = dot(grads[j], grads[j]);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != i) order.push_back(j);
    }
    rng.shuffle(std::span<std::size_t>(order));
    auto& gi = tr.surgered[i];
    for (std::size_t j : order) {
      if (sq[j] == 0.0) continue;
      const double d = dot(gi, grads[j]);
      if (d < 0.0) {
        const double c = d / sq[j];
        for (std::size_t n = 0; n < gi.size(); ++n) gi[n] -= c * grads[j][n];
        tr.last_projected[i] = static_cast<int>(j);
      }
    }
  }
  tr.combined = mean_gradient(tr.surgered);
  return tr;
}

inline std::vector<double> pcgrad(const GradientSet& grads, RngStream rng) {
  return pcgrad_trace(grads, rng).combined;
}

struct CagradConfig {
  double c = 0.5;
  int iterations = 50;
  double step = 0.1;
};

/// Euclidean projection onto the probability simplex (sort-based).
inline std::vector<double> project_to_simplex(std::span<const double> v) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    css += u[i];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = std::max(v[i] - theta, 0.0);
  return w;
}

struct CagradTrace {
  std::vector<double> weights;
  std::vector<double> objective;  // F(w) at init and after every iteration
  std::vector<double> direction;
};

/// Conflict-averse direction. Minimizes F(w) = g_w·g0 + c‖g0‖‖g_w‖ over the
/// simplex (g_w = Σ w_i g_i, g0 = mean) by projected gradient descent from the
/// uniform point, then returns d = g0 + (c‖g0‖/‖g_w‖) g_w. The solver works
/// on the Gram matrix scaled by the mean squared norm (F scales uniformly, the
/// minimizer does not move); a step is taken only if F does not increase.
inline CagradTrace cagrad_trace(const GradientSet& grads, const CagradConfig& cfg) {
  check_gradient_set(grads, "cagrad");
  if (cfg.c < 0.0) throw ArgumentError("cagrad: c must be >= 0");
  const std::size_t k = grads.size();
  CagradTrace tr;
  const auto g0 = mean_gradient(grads);
  tr.direction = g0;
  tr.weights.assign(k, 1.0 / static_cast<double>(k));
  if (cfg.c == 0.0) return tr;

  std::vector<double> gram(k * k);
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) gram[i * k + j] = dot(grads[i], grads[j]);
    mean_sq += gram[i * k + i];
  }
  mean_sq /= static_cast<double>(k);
  if (!(mean_sq > 0.0)) return tr;
  for (auto& v : gram) v /= mean_sq;

  // g_i·g0 = (1/k) Σ_j G_ij,  ‖g0‖² = (1/k²) Σ G_ij,  ‖g_w‖² = wᵀGw
  std::vector<double> b(k, 0.0);
  double g0sq = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) b[i] += gram[i * k + j];
    b[i] /= static_cast<double>(k);
    g0sq += b[i];
  }
  g0sq /= static_cast<double>(k);
  const double g0n = std::sqrt(std::max(g0sq, 0.0));

  auto gw_sq = [&](const std::vector<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) s += w[i] * gram[i * k + j] * w[j];
    }
    return std::max(s, 0.0);
  };
  auto objective = [&](const std::vector<double>& w) {
    double lin = 0.0;
    for (std::size_t i = 0; i < k; ++i) lin += w[i] * b[i];
    return lin + cfg.c * g0n * std::sqrt(gw_sq(w));
  };

  std::vector<double> w = tr.weights;
  double f = objective(w);
  tr.objective.push_back(f);
  for (int it = 0; it < cfg.iterations; ++it) {
    const double nw = std::sqrt(gw_sq(w));
    std::vector<double> grad(k);
    for (std::size_t i = 0; i < k; ++i) {
      double gwi = 0.0;
      for (std::size_t j = 0; j < k; ++j) gwi += gram[i * k + j] * w[j];
      grad[i] = b[i] + (nw > 1e-12 ? cfg.c * g0n * gwi / nw : 0.0);
    }
    double step = cfg.step;
    for (int tries = 0; tries < 20; ++tries, step *= 0.5) {
      std::vector<double> trial(k);
      for (std::size_t i = 0; i < k; ++i) trial[i] = w[i] - step * grad[i];
      trial = project_to_simplex(trial);
      const double ft = objective(trial);
      if (ft <= f) {
        w = std::move(trial);
        f = ft;
        break;
      }
    }
    tr.objective.push_back(f);
  }
  tr.weights = w;

  std::vector<double> gw(g0.size(), 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t n = 0; n < gw.size(); ++n) gw[n] += w[i] * grads[i][n];
  }
  const double gwn = norm(gw);
  if (gwn < 1e-12) return tr;
  const double scale = cfg.c * norm(g0) / gwn;
  for (std::size_t n = 0; n < gw.size(); ++n) tr.direction[n] = g0[n] + scale * gw[n];
  return tr;
}

inline std::vector<double> cagrad(const GradientSet& grads, const CagradConfig& cfg = {}) {
  return cagrad_trace(grads, cfg).direction;
}

}  // namespace fmtl
