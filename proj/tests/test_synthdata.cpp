#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "fmtl/evalstat.hpp"
#include "fmtl/models.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/synthdata.hpp"

using namespace fmtl;

namespace {

using XKey = std::array<double, kInputDim>;

ScenarioData scenario(ScenarioId id, std::uint64_t seed = 0) {
  ScenarioSpec s;
  s.scenario_id = id;
  s.seed = seed;
  return make_scenario(s);
}

std::size_t total_count(const ClientDataset& c) { return c.train.size() + c.local_test.size(); }

}  // namespace

TEST(World, SameSeedAndDomainGiveIdenticalWeights) {
  const auto a = build_world(7, Domain::A);
  const auto b = build_world(7, Domain::A);
  EXPECT_EQ(a.w1, b.w1);
  EXPECT_EQ(a.semseg_head, b.semseg_head);
  EXPECT_EQ(a.edge_threshold, b.edge_threshold);
  const auto c = build_world(7, Domain::B);
  EXPECT_NE(a.w1, c.w1);
  const auto d = build_world(8, Domain::A);
  EXPECT_NE(a.w1, d.w1);
}

TEST(World, DomainBInputsAreShifted) {
  const auto wa = build_world(2024, Domain::A);
  const auto wb = build_world(2024, Domain::B);
  RngStream ra(1, 1), rb(1, 2);
  double ma = 0.0, mb = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const auto sa = wa.sample(ra);
    const auto sb = wb.sample(rb);
    for (std::size_t j = 0; j < kInputDim; ++j) {
      ma += sa.x[j];
      mb += sb.x[j];
    }
  }
  ma /= n * static_cast<double>(kInputDim);
  mb /= n * static_cast<double>(kInputDim);
  EXPECT_NEAR(ma, 0.0, 0.02);
  EXPECT_NEAR(mb, 1.5, 0.02);
}

TEST(World, NormalsLabelsAreUnitVectors) {
  const auto w = build_world(2024, Domain::A);
  RngStream r(3, 3);
  for (int i = 0; i < 2000; ++i) {
    const auto s = w.sample(r);
    const auto n = s.label(TaskKind::normals_like);
    EXPECT_NEAR(std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]), 1.0, 1e-12);
  }
}

TEST(World, ClassHistogramsAndEdgeRateAreCalibrated) {
  for (Domain d : {Domain::A, Domain::B}) {
    const auto w = build_world(2024, d);
    RngStream r(5, d == Domain::A ? 0 : 1);
    std::array<int, 8> sem{};
    std::array<int, 6> parts{};
    int edges = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto s = w.sample(r);
      ++sem[static_cast<std::size_t>(s.y[5])];
      ++parts[static_cast<std::size_t>(s.y[6])];
      edges += s.y[1] > 0.5 ? 1 : 0;
    }
    for (int c : sem) {
      EXPECT_GT(c / double(n), 1.0 / 80.0);
      EXPECT_LT(c / double(n), 1.0);
    }
    for (int c : parts) {
      EXPECT_GT(c / double(n), 1.0 / 60.0);
      EXPECT_LT(c / double(n), 1.0);
    }
    EXPECT_NEAR(edges / double(n), kEdgePositiveRate, 0.03);
  }
}

TEST(Scenario, Iid1SplitsPoolEvenlyWithNineToOne) {
  const auto data = scenario(ScenarioId::IID1);
  ASSERT_EQ(data.clients.size(), 4u);
  for (const auto& c : data.clients) {
    EXPECT_EQ(c.train.size(), 450u);
    EXPECT_EQ(c.local_test.size(), 50u);
    EXPECT_EQ(c.provenance.tasks.size(), 4u);
    EXPECT_EQ(c.provenance.domain, Domain::A);
  }
  EXPECT_EQ(data.global_test.at(Domain::A).size(), 800u);
  EXPECT_EQ(data.global_test.count(Domain::B), 0u);
}

TEST(Scenario, Niid2HasEachDomainATaskExactlyOnce) {
  const auto data = scenario(ScenarioId::NIID2);
  ASSERT_EQ(data.clients.size(), 4u);
  std::multiset<TaskKind> seen;
  for (const auto& c : data.clients) {
    ASSERT_EQ(c.provenance.tasks.size(), 1u);
    seen.insert(c.provenance.tasks[0]);
  }
  EXPECT_EQ(seen, std::multiset<TaskKind>(kDomainATasks.begin(), kDomainATasks.end()));
}

TEST(Scenario, Niid3CombinesMultiAndSingleTaskClients) {
  const auto data = scenario(ScenarioId::NIID3);
  ASSERT_EQ(data.clients.size(), 8u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(data.clients[i].provenance.tasks.size(), 4u);
  for (int i = 4; i < 8; ++i) EXPECT_EQ(data.clients[i].provenance.tasks.size(), 1u);
  for (const auto& c : data.clients) EXPECT_EQ(total_count(c), 250u);
}

TEST(Scenario, UnbalancedSharesFollowGeometricRatio) {
  ScenarioSpec s;
  s.scenario_id = ScenarioId::NIID4;
  s.pool_a = 1500;
  const auto r = resolve_scenario(s);
  ASSERT_EQ(r.clients.size(), 4u);
  const std::vector<std::size_t> expect = {800, 400, 200, 100};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.clients[i].train_count, expect[i]);

  s.scenario_id = ScenarioId::NIID5;
  const auto r5 = resolve_scenario(s);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r5.clients[i].train_count, expect[i]);
    EXPECT_EQ(r5.clients[i].tasks.size(), 1u);
  }
}

TEST(Scenario, CrossDomainScenarios) {
  const auto d6 = scenario(ScenarioId::NIID6);
  ASSERT_EQ(d6.clients.size(), 5u);
  const auto& b = d6.clients[4].provenance;
  EXPECT_EQ(b.domain, Domain::B);
  EXPECT_EQ(b.tasks, (std::vector<TaskKind>{TaskKind::normals_like, TaskKind::parts_like}));
  EXPECT_GT(b.train_count, d6.clients[0].provenance.train_count);
  EXPECT_EQ(d6.global_test.at(Domain::B).size(), 1000u);

  const auto d7 = scenario(ScenarioId::NIID7);
  ASSERT_EQ(d7.clients.size(), 6u);
  EXPECT_EQ(d7.clients[4].provenance.tasks, std::vector<TaskKind>{TaskKind::parts_like});
  EXPECT_EQ(d7.clients[5].provenance.tasks, std::vector<TaskKind>{TaskKind::normals_like});
  EXPECT_EQ(d7.clients[5].provenance.domain, Domain::B);
}

TEST(Scenario, SharesSumToPoolAndSetsAreDisjoint) {
  for (std::size_t id = 0; id < kScenarioNames.size(); ++id) {
    const auto data = scenario(static_cast<ScenarioId>(id), 3);
    std::map<Domain, std::size_t> totals;
    std::map<Domain, std::set<XKey>> seen;
    for (const auto& c : data.clients) {
      totals[c.provenance.domain] += total_count(c);
      EXPECT_EQ(c.local_test.size(), local_test_count(total_count(c)));
      auto& s = seen[c.provenance.domain];
      for (const auto& x : c.train) EXPECT_TRUE(s.insert(x.x).second) << kScenarioNames[id];
      for (const auto& x : c.local_test) EXPECT_TRUE(s.insert(x.x).second) << kScenarioNames[id];
    }
    for (const auto& [d, n] : totals) EXPECT_EQ(n, data.spec.pool_size(d)) << kScenarioNames[id];
    for (const auto& [d, pool] : data.global_test) {
      for (const auto& x : pool) EXPECT_EQ(seen[d].count(x.x), 0u);
    }
  }
}

TEST(Scenario, RegenerationIsBitIdentical) {
  const auto a = scenario(ScenarioId::NIID7, 11);
  const auto b = scenario(ScenarioId::NIID7, 11);
  ASSERT_EQ(a.clients.size(), b.clients.size());
  for (std::size_t i = 0; i < a.clients.size(); ++i) {
    EXPECT_EQ(a.clients[i].train, b.clients[i].train);
    EXPECT_EQ(a.clients[i].local_test, b.clients[i].local_test);
  }
  EXPECT_EQ(a.global_test, b.global_test);
  const auto c = scenario(ScenarioId::NIID7, 12);
  EXPECT_NE(a.clients[0].train, c.clients[0].train);
}

TEST(Scenario, ConfigErrors) {
  EXPECT_THROW(parse_scenario("NIID-9"), ConfigError);
  EXPECT_EQ(parse_scenario("niid6"), ScenarioId::NIID6);
  EXPECT_EQ(parse_scenario("IID_1"), ScenarioId::IID1);
  ScenarioSpec s;
  s.scenario_id = ScenarioId::NIID2;
  s.client_count = 3;
  EXPECT_THROW(resolve_scenario(s), ConfigError);
  s.scenario_id = ScenarioId::IID1;
  s.client_count = 7;
  EXPECT_EQ(resolve_scenario(s).clients.size(), 7u);
  s.client_count.reset();
  s.unbalance_ratio = 0.0;
  EXPECT_THROW(resolve_scenario(s), ConfigError);
}

TEST(Apportion, LargestRemainderIsExact) {
  RngStream r(9, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + r.uniform_int(9);
    std::vector<double> w(k);
    for (auto& e : w) e = r.uniform() + 1e-3;
    const std::size_t total = r.uniform_int(5000);
    const auto out = apportion(total, w);
    std::size_t s = 0;
    double ws = 0.0;
    for (double e : w) ws += e;
    for (std::size_t i = 0; i < k; ++i) {
      s += out[i];
      EXPECT_LE(std::abs(static_cast<double>(out[i]) - total * w[i] / ws), 1.0);
    }
    EXPECT_EQ(s, total);
  }
}

TEST(PretrainPool, DisjointDeterministicAndSized) {
  ScenarioSpec s;
  const auto p1 = pretrain_pool(s, 600);
  const auto p2 = pretrain_pool(s, 600);
  EXPECT_EQ(p1.train, p2.train);
  EXPECT_EQ(total_count(p1), 600u);
  std::set<XKey> pool;
  for (const auto& x : p1.train) pool.insert(x.x);
  for (const auto& x : p1.local_test) pool.insert(x.x);
  for (std::size_t id = 0; id < kScenarioNames.size(); ++id) {
    s.scenario_id = static_cast<ScenarioId>(id);
    const auto data = make_scenario(s);
    for (const auto& c : data.clients) {
      for (const auto& x : c.train) EXPECT_EQ(pool.count(x.x), 0u);
    }
  }
}

namespace {

struct Trivial {
  double depth_rmse, edge_bce, normals_deg;
};

Trivial trivial_scores(std::span<const Sample> test) {
  Trivial t{};
  double mean = 0.0, pos = 0.0;
  std::array<double, 3> dir{};
  for (const auto& s : test) {
    mean += s.y[0];
    pos += s.y[1];
    for (int i = 0; i < 3; ++i) dir[i] += s.y[2 + i];
  }
  const double n = static_cast<double>(test.size());
  mean /= n;
  const double pi = pos / n;
  double se = 0.0;
  for (const auto& s : test) se += (s.y[0] - mean) * (s.y[0] - mean);
  t.depth_rmse = std::sqrt(se / n);
  // best constant prediction under the weighted BCE
  const double p = 0.8 * pi / (0.8 * pi + 0.2 * (1 - pi));
  t.edge_bce = -(0.8 * pi * std::log(p) + 0.2 * (1 - pi) * std::log(1 - p));
  const double dn = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  double ang = 0.0;
  for (const auto& s : test) {
    const double c = (dir[0] * s.y[2] + dir[1] * s.y[3] + dir[2] * s.y[4]) / dn;
    ang += std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi;
  }
  t.normals_deg = ang / n;
  return t;
}

SegmentedParams train_central(const std::vector<Sample>& data, std::vector<TaskKind> tasks) {
  auto p = init_params(ArchKind::MD, tasks, RngStream(1, 1));
  AdamWState st(p.size(), AdamWConfig{});
  RngStream r(2, 2);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::vector<double> q(tasks.size(), 1.0 / tasks.size());
  for (int epoch = 0; epoch < 30; ++epoch) {
    r.shuffle(std::span<std::size_t>(order));
    for (std::size_t b = 0; b < order.size(); b += 16) {
      Batch batch;
      batch.tasks = tasks;
      for (std::size_t i = b; i < std::min(order.size(), b + 16); ++i) batch.samples.push_back(&data[order[i]]);
      const auto lg = forward_backward(ArchKind::MD, p, batch, q);
      adamw_step(p.raw(), lg.grad, st, 2e-3);
    }
  }
  return p;
}

}  // namespace

TEST(Calibration, CentralModelBeatsTrivialPredictorOnEveryTask) {
  for (Domain d : {Domain::A, Domain::B}) {
    const auto world = build_world(2024, d);
    RngStream r(77, d == Domain::A ? 0 : 1);
    std::vector<Sample> train, test;
    for (int i = 0; i < 2000; ++i) train.push_back(world.sample(r));
    for (int i = 0; i < 1000; ++i) test.push_back(world.sample(r));
    const std::vector<TaskKind> tasks =
        d == Domain::A ? std::vector<TaskKind>(kDomainATasks.begin(), kDomainATasks.end())
                       : std::vector<TaskKind>{TaskKind::depth_like, TaskKind::edge_like, TaskKind::normals_like,
                                               TaskKind::parts_like};
    const auto p = train_central(train, tasks);
    const auto triv = trivial_scores(test);
    for (auto t : tasks) {
      const double m = task_metric(ArchKind::MD, p, test, t);
      switch (t) {
        case TaskKind::depth_like: EXPECT_LT(m, triv.depth_rmse) << domain_char(d); break;
        case TaskKind::edge_like: EXPECT_LT(m, triv.edge_bce) << domain_char(d); break;
        case TaskKind::normals_like: EXPECT_LT(m, triv.normals_deg) << domain_char(d); break;
        default: EXPECT_GT(m, 1.0 / static_cast<double>(task_info(t).output_dim)) << task_name(t);
      }
    }
  }
}
