// Randomized properties across modules. Each TEST draws its fixtures from a
// fixed RngStream so failures replay exactly.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "fmtl/checkpoint.hpp"
#include "fmtl/evalstat.hpp"
#include "fmtl/fedcore.hpp"
#include "fmtl/models.hpp"
#include "fmtl/mtlopt.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/rng.hpp"

using namespace fmtl;

namespace {

constexpr int kTrials = 200;

std::vector<double> normals(RngStream& r, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& e : v) e = scale * r.normal();
  return v;
}

Layout random_layout(RngStream& r) {
  std::vector<std::pair<std::string, std::size_t>> parts;
  const std::size_t segs = 1 + r.uniform_int(5);
  for (std::size_t s = 0; s < segs; ++s) parts.emplace_back("seg" + std::to_string(s), 1 + r.uniform_int(40));
  return Layout::from_lengths(parts);
}

std::vector<double> dirichlet_like(RngStream& r, std::size_t k) {
  std::vector<double> w(k);
  double s = 0.0;
  for (auto& e : w) s += (e = -std::log(1.0 - r.uniform()));
  for (auto& e : w) e /= s;
  return w;
}

}  // namespace

TEST(Property, WeightedSumIsConvexAndLinear) {
  RngStream r(11, 0);
  for (int t = 0; t < kTrials; ++t) {
    const auto layout = random_layout(r);
    const std::size_t k = 1 + r.uniform_int(6);
    std::vector<SegmentedParams> ps;
    for (std::size_t i = 0; i < k; ++i) ps.emplace_back(layout, normals(r, layout.size()));
    const auto w = dirichlet_like(r, k);
    const auto out = weighted_sum(ps, w);
    for (std::size_t j = 0; j < layout.size(); ++j) {
      double lo = ps[0].values()[j], hi = lo, naive = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        lo = std::min(lo, ps[i].values()[j]);
        hi = std::max(hi, ps[i].values()[j]);
        naive += w[i] * ps[i].values()[j];
      }
      EXPECT_GE(out.values()[j], lo - 1e-12);
      EXPECT_LE(out.values()[j], hi + 1e-12);
      EXPECT_NEAR(out.values()[j], naive, 1e-12);
    }
    std::vector<SegmentedParams> same(k, ps[0]);
    EXPECT_EQ(weighted_sum(same, w), ps[0]);
  }
}

TEST(Property, CosineScheduleShape) {
  RngStream r(12, 0);
  for (int t = 0; t < kTrials; ++t) {
    const int total = 2 + static_cast<int>(r.uniform_int(150));
    const int warm = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(total)));
    const double base = 1e-5 + r.uniform();
    double prev = 0.0;
    for (int i = 0; i < total; ++i) {
      const double lr = cosine_warmup_lr(i, total, base, warm);
      EXPECT_GT(lr, 0.0);
      EXPECT_LE(lr, base * (1 + 1e-15));
      if (i < warm) {
        EXPECT_GT(lr, prev);
      } else if (i > warm) {
        EXPECT_LE(lr, prev);
      }
      prev = lr;
    }
  }
}

TEST(Property, AdamWMaskFreezesCoordinates) {
  RngStream r(13, 0);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + r.uniform_int(64);
    auto params = normals(r, n);
    const auto before = params;
    std::vector<bool> trainable(n);
    for (std::size_t i = 0; i < n; ++i) trainable[i] = r.uniform() < 0.5;
    AdamWState st(n, AdamWConfig{});
    for (int s = 0; s < 5; ++s) adamw_step(params, normals(r, n), st, 1e-2, &trainable);
    for (std::size_t i = 0; i < n; ++i) {
      if (!trainable[i]) {
        EXPECT_EQ(params[i], before[i]);
      } else {
        // Adam's per-step move is about lr, plus decay
        EXPECT_LE(std::abs(params[i] - before[i]), 5 * 1e-2 * (1 + 1e-4 * std::abs(before[i])) + 1e-12);
      }
    }
  }
}

TEST(Property, SimplexProjection) {
  RngStream r(14, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t k = 1 + r.uniform_int(8);
    const auto v = normals(r, k, 2.0);
    const auto w = project_to_simplex(v);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double e : w) EXPECT_GE(e, 0.0);
    const auto again = project_to_simplex(w);
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(again[i], w[i], 1e-12);
    // no random simplex point is closer to v
    const double best = squared_distance(v, w);
    for (int s = 0; s < 20; ++s) EXPECT_GE(squared_distance(v, dirichlet_like(r, k)), best - 1e-12);
  }
}

TEST(Property, PcgradPairNeverOpposesEitherInput) {
  RngStream r(15, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t d = 2 + r.uniform_int(10);
    const GradientSet g = {normals(r, d), normals(r, d)};
    const auto out = pcgrad(g, r.fork(static_cast<std::uint64_t>(t)));
    const double scale = norm(g[0]) * norm(g[1]) + dot(g[0], g[0]) + dot(g[1], g[1]);
    EXPECT_GE(dot(out, g[0]), -1e-12 * scale);
    EXPECT_GE(dot(out, g[1]), -1e-12 * scale);
    if (dot(g[0], g[1]) >= 0) {
      const auto m = mean_gradient(g);
      for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(out[i], m[i]);
    }
  }
}

TEST(Property, CagradWeightsOnSimplexAndCZeroIsMean) {
  RngStream r(16, 0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 2 + r.uniform_int(4), d = 3 + r.uniform_int(8);
    GradientSet g;
    for (std::size_t i = 0; i < k; ++i) g.push_back(normals(r, d));
    const auto tr = cagrad_trace(g, CagradConfig{});
    EXPECT_NEAR(std::accumulate(tr.weights.begin(), tr.weights.end(), 0.0), 1.0, 1e-12);
    for (double w : tr.weights) EXPECT_GE(w, 0.0);
    for (std::size_t i = 1; i < tr.objective.size(); ++i) EXPECT_LE(tr.objective[i], tr.objective[i - 1]);
    const auto zero = cagrad(g, CagradConfig{0.0, 50, 0.1});
    const auto m = mean_gradient(g);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(zero[i], m[i], 1e-15 * (1 + std::abs(m[i])));
  }
}

TEST(Property, LossesAreNonNegativeAndGradientsFinite) {
  RngStream r(17, 0);
  for (int t = 0; t < kTrials; ++t) {
    for (auto kind : kAllTasks) {
      const std::size_t od = task_info(kind).output_dim;
      const auto pred = normals(r, od, 1 + 20 * r.uniform());
      std::vector<double> label;
      switch (kind) {
        case TaskKind::depth_like: label = {r.normal()}; break;
        case TaskKind::edge_like: label = {static_cast<double>(r.uniform_int(2))}; break;
        case TaskKind::normals_like: label = normals(r, 3); break;
        default: label = {static_cast<double>(r.uniform_int(od))}; break;
      }
      std::vector<double> grad(od);
      const double l = task_loss(kind, pred, label, grad);
      EXPECT_GE(l, 0.0) << task_name(kind);
      EXPECT_TRUE(std::isfinite(l));
      for (double gv : grad) EXPECT_TRUE(std::isfinite(gv));
      if (kind == TaskKind::normals_like) {
        EXPECT_LE(l, 2.0 + 1e-12);
      }
    }
  }
}

TEST(Property, DeltaPercentIgnoresOrderAndWeightScale) {
  RngStream r(18, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = 1 + r.uniform_int(6);
    std::vector<TaskImprovement> items;
    for (std::size_t i = 0; i < n; ++i) {
      items.push_back({"t" + std::to_string(i), 0.1 + r.uniform(), 0.1 + r.uniform(), r.uniform() < 0.5,
                       0.1 + r.uniform()});
    }
    const double base = delta_percent(items);
    auto rev = items;
    std::reverse(rev.begin(), rev.end());
    EXPECT_NEAR(delta_percent(rev), base, 1e-12);
    auto scaled = items;
    for (auto& it : scaled) it.weight *= 7.5;
    EXPECT_NEAR(delta_percent(scaled), base, 1e-12);
  }
}

TEST(Property, WilcoxonRankSumsAndSymmetry) {
  RngStream r(19, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = 1 + r.uniform_int(40);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(4 * r.normal()) / 4;
      y[i] = std::round(4 * r.normal()) / 4;
    }
    const auto a = wilcoxon_signed_rank(x, y);
    const auto b = wilcoxon_signed_rank(y, x);
    EXPECT_GE(a.p_value, 0.0);
    EXPECT_LE(a.p_value, 1.0);
    EXPECT_EQ(a.p_value, b.p_value);
    const double m = static_cast<double>(a.n);
    EXPECT_DOUBLE_EQ(a.w_plus + a.w_minus, m * (m + 1) / 2);
  }
}

TEST(Property, BlockRanksReverseWithDirection) {
  RngStream r(20, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t k = 2 + r.uniform_int(10);
    std::vector<double> s(k);
    for (auto& v : s) v = static_cast<double>(r.uniform_int(4));
    const auto hi = block_ranks(s, true), lo = block_ranks(s, false);
    for (std::size_t i = 0; i < k; ++i) EXPECT_DOUBLE_EQ(hi[i] + lo[i], static_cast<double>(k + 1));
  }
}

TEST(Property, CheckpointBytesRoundTrip) {
  RngStream r(21, 0);
  const double specials[] = {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(),
                             -std::numeric_limits<double>::infinity()};
  for (int t = 0; t < 50; ++t) {
    const auto layout = random_layout(r);
    auto v = normals(r, layout.size());
    v[r.uniform_int(v.size())] = specials[t % 4];
    const SegmentedParams p(layout, v);
    const auto back = decode_checkpoint(encode_checkpoint(p, {{"trial", t}}));
    EXPECT_EQ(back.params.layout(), layout);
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.params.values()[i]), std::bit_cast<std::uint64_t>(v[i]));
    }
    EXPECT_EQ(back.meta["trial"], t);
  }
}

TEST(Property, RngDrawsInRangeAndForksIgnorePosition) {
  RngStream r(22, 0);
  for (int t = 0; t < kTrials; ++t) {
    auto s = RngStream::for_purpose(r.next_u64(), static_cast<std::int64_t>(r.uniform_int(9)) - 1, "prop");
    const auto fork_before = s.fork("child").next_u64();
    const std::uint64_t n = 1 + r.uniform_int(1000);
    for (int i = 0; i < 20; ++i) {
      const double u = s.uniform();
      EXPECT_GE(u, 0.0);
      EXPECT_LT(u, 1.0);
      EXPECT_LT(s.uniform_int(n), n);
    }
    EXPECT_EQ(s.fork("child").next_u64(), fork_before);
    std::vector<int> perm(1 + r.uniform_int(30));
    std::iota(perm.begin(), perm.end(), 0);
    s.shuffle(std::span<int>(perm));
    std::set<int> seen(perm.begin(), perm.end());
    EXPECT_EQ(seen.size(), perm.size());
  }
}

TEST(Property, LedgerIdentitiesForAnyShape) {
  RngStream r(23, 0);
  for (int t = 0; t < kTrials; ++t) {
    const std::uint64_t k = 1 + r.uniform_int(10), enc = 1 + r.uniform_int(1000000);
    const std::uint64_t total = enc + r.uniform_int(3000000);
    const auto avg = round_bytes(parse_strategy("fedavg"), k, enc, total).total();
    EXPECT_EQ(round_bytes(parse_strategy("fedmtl"), k, enc, total).total(), k * avg);
    EXPECT_EQ(round_bytes(parse_strategy("fedavg", true), k, enc, total).total() * total, avg * enc);
    EXPECT_EQ(round_bytes(parse_strategy("local"), k, enc, total).total(), 0u);
  }
}

TEST(Property, PersonalizationWeightRowsAreStochastic) {
  RngStream r(24, 0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 2 + r.uniform_int(6), d = 1 + r.uniform_int(30);
    std::vector<SegmentedParams> ps;
    for (std::size_t i = 0; i < k; ++i) ps.emplace_back(Layout::from_lengths({{"encoder", d}}), normals(r, d, 0.1));
    for (const auto& xi : {fedamp_weights(ps, 0.9 * r.uniform(), 0.5 + r.uniform()),
                           matfl_weights(ps, 0.5 + r.uniform(), 0.5 + r.uniform())}) {
      ASSERT_EQ(xi.size(), k);
      for (const auto& row : xi) {
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
        for (double w : row) EXPECT_GE(w, 0.0);
      }
    }
  }
}

TEST(Property, ForwardBackwardIsPureAndLayoutSized) {
  RngStream r(25, 0);
  std::vector<Sample> samples(6);
  for (auto& s : samples) {
    for (auto& v : s.x) v = r.normal();
    s.y = {r.normal(), 1.0, 0.0, 0.6, 0.8, 2.0, 1.0};
  }
  for (int t = 0; t < 20; ++t) {
    std::vector<TaskKind> tasks;
    for (auto kind : kAllTasks) {
      if (r.uniform() < 0.5) tasks.push_back(kind);
    }
    if (tasks.empty()) tasks.push_back(TaskKind::depth_like);
    for (auto arch : {ArchKind::MD, ArchKind::TC}) {
      const auto p = init_params(arch, tasks, r.fork(static_cast<std::uint64_t>(t)));
      Batch b{{}, tasks};
      for (const auto& s : samples) b.samples.push_back(&s);
      const auto q = dirichlet_like(r, tasks.size());
      const auto one = forward_backward(arch, p, b, q);
      const auto two = forward_backward(arch, p, b, q);
      EXPECT_EQ(one.grad, two.grad);
      EXPECT_EQ(one.combined, two.combined);
      EXPECT_EQ(one.grad.size(), p.size());
    }
  }
}
