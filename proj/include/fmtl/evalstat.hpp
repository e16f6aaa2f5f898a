#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "fmtl/error.hpp"
#include "fmtl/models.hpp"
#include "fmtl/synthdata.hpp"

namespace fmtl {

enum class EvalSplit { G, P };

inline char split_char(EvalSplit s) { return s == EvalSplit::G ? 'G' : 'P'; }

struct MetricRecord {
  std::string baseline_id;
  std::uint64_t seed = 0;
  int client_id = -1;  // -1: GLOBAL
  std::string task;    // task key, e.g. "A.depth_like"
  std::string metric_name;
  double value = 0.0;
  bool lower_is_better = true;
  EvalSplit split = EvalSplit::G;

  bool operator==(const MetricRecord&) const = default;
};

inline double macro_accuracy_from_counts(std::span<const double> hits, std::span<const double> counts) {
  double acc = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0.0) {
      acc += hits[c] / counts[c];
      ++present;
    }
  }
  return present ? acc / present : 0.0;
}

/// Metric of one task over a set of samples.
///   rmse                    sqrt(mean (ŷ − y)²)
///   weighted_bce_loss       mean of the training BCE (0.8/0.2 weights)
///   mean_angular_error_deg  mean arccos(clamp(ŷ/‖ŷ‖ · y)) in degrees
///   macro_accuracy          mean per-class recall over classes present
inline double task_metric(ArchKind arch, const SegmentedParams& params, std::span<const Sample> data, TaskKind t) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  const auto& info = task_info(t);
  switch (info.metric) {
    case MetricKind::rmse: {
      double se = 0.0;
      for (const auto& s : data) {
        const double d = predict(arch, params, s, t)[0] - s.label(t)[0];
        se += d * d;
      }
      return std::sqrt(se / static_cast<double>(data.size()));
    }
    case MetricKind::weighted_bce_loss: {
      double acc = 0.0;
      for (const auto& s : data) acc += task_loss(t, predict(arch, params, s, t), s.label(t));
      return acc / static_cast<double>(data.size());
    }
    case MetricKind::mean_angular_error_deg: {
      double acc = 0.0;
      for (const auto& s : data) {
        const auto p = predict(arch, params, s, t);
        const auto y = s.label(t);
        const double pn = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        double c = pn > 0.0 ? (p[0] * y[0] + p[1] * y[1] + p[2] * y[2]) / pn : 0.0;
        c = std::clamp(c, -1.0, 1.0);
        acc += std::acos(c) * 180.0 / std::numbers::pi;
      }
      return acc / static_cast<double>(data.size());
    }
    case MetricKind::macro_accuracy: {
      const std::size_t k = info.output_dim;
      std::vector<double> hits(k, 0.0), counts(k, 0.0);
      for (const auto& s : data) {
        const auto p = predict(arch, params, s, t);
        const auto pred = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        const auto y = class_index(t, s.label(t)[0]);
        counts[y] += 1.0;
        if (pred == y) hits[y] += 1.0;
      }
      return macro_accuracy_from_counts(hits, counts);
    }
  }
  return 0.0;
}

/// Macro accuracy of hard class predictions against labels.
inline double macro_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                             std::size_t classes) {
  if (predicted.size() != labels.size() || labels.empty()) throw ArgumentError("macro_accuracy: bad input");
  std::vector<double> hits(classes, 0.0), counts(classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    counts[labels[i]] += 1.0;
    if (predicted[i] == labels[i]) hits[labels[i]] += 1.0;
  }
  return macro_accuracy_from_counts(hits, counts);
}

/// Evaluates every task in `tasks` on `data`. G-FL passes the withheld
/// domain pool, P-FL the client's local test split.
inline std::vector<MetricRecord> evaluate(ArchKind arch, const SegmentedParams& params, std::span<const Sample> data,
                                          Domain domain, std::span<const TaskKind> tasks, EvalSplit split,
                                          int client_id = -1) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  std::vector<MetricRecord> out;
  for (auto t : tasks) {
    MetricRecord r;
    r.client_id = client_id;
    r.task = task_key(domain, t);
    r.metric_name = std::string(metric_name(task_info(t).metric));
    r.value = task_metric(arch, params, data, t);
    r.lower_is_better = task_info(t).lower_is_better;
    r.split = split;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Average per-task improvement

struct TaskImprovement {
  std::string task;
  double fed = 0.0;
  double target = 0.0;
  bool lower_is_better = true;
  double weight = 1.0;
};

/// Δ% = (1/Σw) Σ (−1)^l w (M_fed − M_target)/M_target · 100.
inline double delta_percent(std::span<const TaskImprovement> items) {
  if (items.empty()) throw ArgumentError("delta_percent: no tasks");
  double wsum = 0.0, acc = 0.0;
  for (const auto& it : items) {
    if (it.target == 0.0) throw DomainError("delta_percent: zero target metric for task '" + it.task + "'");
    const double sign = it.lower_is_better ? -1.0 : 1.0;
    acc += sign * it.weight * (it.fed - it.target) / it.target;
    wsum += it.weight;
  }
  if (!(wsum > 0.0)) throw ArgumentError("delta_percent: weights sum to zero");
  return acc / wsum * 100.0;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

struct WilcoxonResult {
  double statistic = 0.0;  // W+ of d = y − x
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_value = 1.0;    // two-sided
  std::size_t n = 0;       // non-zero differences
  bool exact = true;
  bool degenerate = false;
};

/// Average ranks (1-based) of |values|, ties sharing the mean rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
    i = j + 1;
  }
  return ranks;
}

inline constexpr std::size_t kWilcoxonExactMax = 25;

/// Zero differences are dropped, ties get average ranks. Exact two-sided p
/// (null distribution of W+ counted over all 2^n sign patterns by dynamic
/// programming on doubled ranks) for n ≤ 25, else a normal approximation with
/// continuity and tie corrections.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = y[i] - x[i];
    if (v != 0.0) d.push_back(v);
  }
  WilcoxonResult r;
  r.n = d.size();
  if (d.empty()) {
    r.degenerate = true;
    r.p_value = 1.0;
    return r;
  }
  std::vector<double> mag(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) mag[i] = std::abs(d[i]);
  const auto ranks = average_ranks(mag);
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.statistic = r.w_plus;
  const std::size_t n = d.size();

  if (n <= kWilcoxonExactMax) {
    std::vector<long> doubled(n);
    long total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      doubled[i] = std::lround(2.0 * ranks[i]);
      total += doubled[i];
    }
    // counts[s] = number of sign patterns with doubled W+ = s
    std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
    counts[0] = 1.0;
    long reach = 0;
    for (long rk : doubled) {
      for (long s = reach; s >= 0; --s) {
        if (counts[static_cast<std::size_t>(s)] != 0.0) counts[static_cast<std::size_t>(s + rk)] += counts[static_cast<std::size_t>(s)];
      }
      reach += rk;
    }
    const long obs = std::lround(2.0 * r.w_plus);
    double lower = 0.0, upper = 0.0, all = 0.0;
    for (long s = 0; s <= total; ++s) {
      const double c = counts[static_cast<std::size_t>(s)];
      all += c;
      if (s <= obs) lower += c;
      if (s >= obs) upper += c;
    }
    r.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    r.exact = true;
    return r;
  }

  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
  std::map<double, int> ties;
  for (double rk : ranks) ties[rk] += 1;
  for (const auto& [rk, t] : ties) {
    if (t > 1) var -= (static_cast<double>(t) * t * t - t) / 48.0;
  }
  const double diff = std::abs(r.w_plus - mean);
  const double z = std::max(diff - 0.5, 0.0) / std::sqrt(var);
  boost::math::normal_distribution<double> norm01;
  r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(norm01, z)));
  r.exact = false;
  return r;
}

/// min(1, p·m).
inline std::vector<double> bonferroni(std::span<const double> raw_p, std::size_t m) {
  if (m == 0) throw ArgumentError("bonferroni: m must be > 0");
  std::vector<double> out(raw_p.size());
  for (std::size_t i = 0; i < raw_p.size(); ++i) out[i] = std::min(1.0, raw_p[i] * static_cast<double>(m));
  return out;
}

struct StatTestResult {
  std::string baseline_a;
  std::string baseline_b;
  double raw_p = 1.0;
  double adjusted_p = 1.0;
  double statistic = 0.0;
  std::size_t n = 0;
};

/// All pairwise Wilcoxon tests with Bonferroni over m = k(k−1)/2 pairs.
/// `observations[b]` are paired samples (same order across baselines).
inline std::vector<StatTestResult> pairwise_wilcoxon(const std::vector<std::string>& names,
                                                     const std::vector<std::vector<double>>& observations) {
  if (names.size() != observations.size()) throw ArgumentError("pairwise_wilcoxon: names/observations mismatch");
  std::vector<StatTestResult> out;
  for (std::size_t a = 0; a < names.size(); ++a) {
    for (std::size_t b = a + 1; b < names.size(); ++b) {
      const auto w = wilcoxon_signed_rank(observations[a], observations[b]);
      out.push_back({names[a], names[b], w.p_value, w.p_value, w.statistic, w.n});
    }
  }
  std::vector<double> raw;
  for (const auto& r : out) raw.push_back(r.raw_p);
  const auto adj = bonferroni(raw, std::max<std::size_t>(out.size(), 1));
  for (std::size_t i = 0; i < out.size(); ++i) out[i].adjusted_p = adj[i];
  return out;
}

// ---------------------------------------------------------------------------
// Friedman + Nemenyi

/// Nemenyi critical values q_α (studentized range / √2, infinite df).
/// k = 2..10 from the standard table of Demšar (JMLR 2006); k = 11..20 from
/// the studentized-range quantile.
inline constexpr std::array<double, 19> kNemenyiQ005 = {1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031,
                                                        3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391,
                                                        3.426, 3.458, 3.489, 3.517, 3.544};
inline constexpr std::array<double, 19> kNemenyiQ010 = {1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780,
                                                        2.855, 2.920, 2.978, 3.030, 3.077, 3.120, 3.159,
                                                        3.196, 3.230, 3.261, 3.291, 3.319};

inline double nemenyi_q(std::size_t k, double alpha) {
  if (k < 2 || k > 20) throw ConfigError("Nemenyi table covers k = 2..20, got k = " + std::to_string(k));
  if (std::abs(alpha - 0.05) < 1e-12) return kNemenyiQ005[k - 2];
  if (std::abs(alpha - 0.10) < 1e-12) return kNemenyiQ010[k - 2];
  throw ConfigError("Nemenyi table covers alpha 0.05 and 0.10 only");
}

inline double nemenyi_cd(std::size_t k, std::size_t n_blocks, double alpha = 0.05) {
  return nemenyi_q(k, alpha) * std::sqrt(static_cast<double>(k * (k + 1)) / (6.0 * static_cast<double>(n_blocks)));
}

struct CDReport {
  std::vector<std::string> baselines;
  std::vector<double> average_ranks;
  std::size_t n_blocks = 0;
  std::size_t k = 0;
  double friedman_chi2 = 0.0;
  double friedman_p = 1.0;
  double alpha = 0.05;
  double cd = 0.0;
  std::vector<std::vector<std::string>> cliques;
};

/// Ranks within one block; rank 1 = best. `higher_is_better` flips the order.
inline std::vector<double> block_ranks(std::span<const double> scores, bool higher_is_better) {
  std::vector<double> keyed(scores.begin(), scores.end());
  if (higher_is_better) {
    for (auto& v : keyed) v = -v;
  }
  return average_ranks(keyed);
}

/// scores[block][baseline]; `higher_is_better[block]` gives each block's
/// direction (e.g. false for an rmse block).
inline CDReport friedman_nemenyi(const std::vector<std::string>& baselines,
                                 const std::vector<std::vector<double>>& scores,
                                 const std::vector<bool>& higher_is_better, double alpha = 0.05) {
  const std::size_t k = baselines.size();
  const std::size_t n = scores.size();
  if (n < 2 || k < 2) throw ArgumentError("friedman_nemenyi: need N >= 2 blocks and k >= 2 baselines");
  if (higher_is_better.size() != n) throw ArgumentError("friedman_nemenyi: direction flags per block required");
  CDReport rep;
  rep.baselines = baselines;
  rep.k = k;
  rep.n_blocks = n;
  rep.alpha = alpha;
  rep.cd = nemenyi_cd(k, n, alpha);
  rep.average_ranks.assign(k, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    if (scores[b].size() != k) throw ArgumentError("friedman_nemenyi: ragged score matrix");
    const auto r = block_ranks(scores[b], higher_is_better[b]);
    for (std::size_t j = 0; j < k; ++j) rep.average_ranks[j] += r[j];
  }
  for (auto& r : rep.average_ranks) r /= static_cast<double>(n);
  double sum_sq = 0.0;
  for (double r : rep.average_ranks) sum_sq += r * r;
  const double kd = static_cast<double>(k);
  rep.friedman_chi2 = 12.0 * static_cast<double>(n) / (kd * (kd + 1.0)) * (sum_sq - kd * (kd + 1.0) * (kd + 1.0) / 4.0);
  if (std::abs(rep.friedman_chi2) < 1e-12) rep.friedman_chi2 = 0.0;
  boost::math::chi_squared_distribution<double> chi(kd - 1.0);
  rep.friedman_p = rep.friedman_chi2 <= 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(chi, rep.friedman_chi2));

  // maximal contiguous runs (in rank order) whose rank span is within CD
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rep.average_ranks[a] < rep.average_ranks[b]; });
  std::size_t last_end = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k && rep.average_ranks[order[j + 1]] - rep.average_ranks[order[i]] <= rep.cd) ++j;
    if (i == 0 || j + 1 > last_end) {
      std::vector<std::string> clique;
      for (std::size_t m = i; m <= j; ++m) clique.push_back(baselines[order[m]]);
      rep.cliques.push_back(std::move(clique));
      last_end = j + 1;
    }
  }
  return rep;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Population mean ± std.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

}  // namespace fmtl
