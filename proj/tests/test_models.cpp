#include <gtest/gtest.h>

#include <cmath>

#include "fmtl/models.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/synthdata.hpp"
#include "gradcheck.hpp"

using namespace fmtl;

namespace {

const std::vector<TaskKind> kFourA(kDomainATasks.begin(), kDomainATasks.end());

std::vector<Sample> mixed_samples(std::uint64_t seed, int n) {
  const auto wa = build_world(2024, Domain::A);
  const auto wb = build_world(2024, Domain::B);
  RngStream r(seed, 0);
  std::vector<Sample> s;
  for (int i = 0; i < n; ++i) s.push_back(i % 2 ? wb.sample(r) : wa.sample(r));
  return s;
}

Batch make_batch(const std::vector<Sample>& s, std::vector<TaskKind> tasks) {
  Batch b;
  b.tasks = std::move(tasks);
  for (const auto& x : s) b.samples.push_back(&x);
  return b;
}

std::vector<double> uniform_q(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

}  // namespace

TEST(Layout, MdHasEncoderPlusOneDecoderPerTask) {
  const auto l = make_layout(ArchKind::MD, kFourA);
  ASSERT_EQ(l.segments().size(), 5u);
  EXPECT_EQ(l.segments()[0].name, "encoder");
  EXPECT_EQ(l.segments()[1].name, "decoder:depth_like");
  EXPECT_EQ(l.at("encoder").length, 3168u);
  EXPECT_EQ(l.at("decoder:normals_like").length, 32u * 32 + 32 + 32 * 3 + 3);
}

TEST(Layout, TcHasSharedDecoderAndTaskConditioning) {
  const auto l = make_layout(ArchKind::TC, kFourA);
  ASSERT_EQ(l.segments().size(), 6u);
  EXPECT_EQ(l.segments()[1].name, "decoder:shared");
  EXPECT_EQ(l.at("decoder:shared").length, 40u * 32 + 32 + 32 * 16 + 16);
  EXPECT_EQ(l.at("taskcond:semseg_like").length, 8u + 16 * 8 + 8);
  for (const auto& s : l.segments()) {
    if (s.name.rfind("taskcond:", 0) == 0) {
      EXPECT_LT(s.length, l.at("decoder:shared").length / 5);
    }
  }
}

TEST(Layout, TcBodyIsIdenticalAcrossTaskSetsWhileMdDiffers) {
  const std::vector<TaskKind> one = {TaskKind::edge_like};
  const std::vector<TaskKind> two = {TaskKind::normals_like, TaskKind::parts_like};
  const auto a = init_params(ArchKind::TC, kFourA, RngStream(4, 4));
  const auto b = init_params(ArchKind::TC, two, RngStream(4, 4));
  EXPECT_TRUE(std::ranges::equal(a.segment("encoder"), b.segment("encoder")));
  EXPECT_TRUE(std::ranges::equal(a.segment("decoder:shared"), b.segment("decoder:shared")));
  EXPECT_FALSE(make_layout(ArchKind::MD, kFourA).compatible_with(make_layout(ArchKind::MD, two)));
  EXPECT_FALSE(make_layout(ArchKind::MD, one).compatible_with(make_layout(ArchKind::MD, two)));
}

TEST(Layout, EmptyTaskSetIsConfigError) {
  EXPECT_THROW(make_layout(ArchKind::MD, std::vector<TaskKind>{}), ConfigError);
  EXPECT_THROW(init_params(ArchKind::TC, std::vector<TaskKind>{}, RngStream(1, 1)), ConfigError);
}

TEST(Init, SameStreamGivesIdenticalParams) {
  const auto a = init_params(ArchKind::MD, kFourA, RngStream(9, 1));
  const auto b = init_params(ArchKind::MD, kFourA, RngStream(9, 1));
  EXPECT_EQ(a, b);
  const auto c = init_params(ArchKind::MD, kFourA, RngStream(9, 2));
  EXPECT_NE(a, c);
}

TEST(Init, FanInScaledWeightsAndZeroBiases) {
  const auto p = init_params(ArchKind::MD, kFourA, RngStream(1, 0));
  const auto enc = p.segment("encoder");
  double s2 = 0.0;
  for (std::size_t i = 0; i < 16 * 64; ++i) s2 += enc[i] * enc[i];
  EXPECT_NEAR(s2 / (16 * 64), 2.0 / 16.0, 0.02);
  for (std::size_t i = 16 * 64; i < 16 * 64 + 64; ++i) EXPECT_EQ(enc[i], 0.0);
}

TEST(ParamReport, CountsAndFractions) {
  const auto md = param_report(ArchKind::MD, kFourA);
  const auto tc = param_report(ArchKind::TC, kFourA);
  EXPECT_EQ(md.encoder, 3168u);
  EXPECT_EQ(md.segments.size(), 5u);
  EXPECT_DOUBLE_EQ(md.encoder_fraction, 3168.0 / static_cast<double>(md.total));
  EXPECT_GT(tc.encoder_fraction, md.encoder_fraction);
  EXPECT_LT(tc.total, md.total);
  const std::vector<TaskKind> three = {TaskKind::depth_like, TaskKind::edge_like, TaskKind::normals_like};
  EXPECT_EQ(md.total - param_report(ArchKind::MD, three).total, md_decoder_count(8));
}

TEST(TaskLoss, DocumentedExamples) {
  const std::vector<double> y1 = {2.5};
  EXPECT_EQ(task_loss(TaskKind::depth_like, y1, y1), 0.0);
  const std::vector<double> n = {0.0, 0.6, 0.8}, par = {0.0, 3.0, 4.0}, anti = {0.0, -1.2, -1.6};
  EXPECT_NEAR(task_loss(TaskKind::normals_like, par, n), 0.0, 1e-15);
  EXPECT_NEAR(task_loss(TaskKind::normals_like, anti, n), 2.0, 1e-15);
  const std::vector<double> logit0 = {0.0}, pos = {1.0}, neg = {0.0};
  EXPECT_NEAR(task_loss(TaskKind::edge_like, logit0, pos), 0.8 * std::log(2.0), 1e-15);
  EXPECT_NEAR(task_loss(TaskKind::edge_like, logit0, pos), 0.5545, 5e-5);
  EXPECT_NEAR(task_loss(TaskKind::edge_like, logit0, neg), 0.2 * std::log(2.0), 1e-15);
  const std::vector<double> uniform8(8, 0.3), cls3 = {3.0};
  EXPECT_NEAR(task_loss(TaskKind::semseg_like, uniform8, cls3), std::log(8.0), 1e-14);
}

TEST(TaskLoss, DimensionMismatchThrows) {
  const std::vector<double> two = {1.0, 2.0}, one = {1.0};
  EXPECT_THROW(task_loss(TaskKind::depth_like, two, one), ShapeError);
  EXPECT_THROW(task_loss(TaskKind::normals_like, one, one), ShapeError);
  const std::vector<double> logits(6, 0.0), bad = {6.0};
  EXPECT_THROW(task_loss(TaskKind::parts_like, logits, bad), ShapeError);
}

TEST(TaskLoss, EdgeLossIsStableForLargeLogits) {
  const std::vector<double> big = {800.0}, small = {-800.0}, pos = {1.0}, neg = {0.0};
  EXPECT_NEAR(task_loss(TaskKind::edge_like, small, pos), 0.8 * 800.0, 1e-9);
  EXPECT_NEAR(task_loss(TaskKind::edge_like, big, neg), 0.2 * 800.0, 1e-9);
  EXPECT_EQ(task_loss(TaskKind::edge_like, big, pos), 0.0);
}

TEST(ForwardBackward, CombinedLossIsWeightedTaskAverage) {
  const auto s = mixed_samples(1, 8);
  for (auto arch : {ArchKind::MD, ArchKind::TC}) {
    const auto p = init_params(arch, kFourA, RngStream(2, 2));
    const auto b = make_batch(s, kFourA);
    const auto r = forward_backward(arch, p, b, uniform_q(4));
    double avg = 0.0;
    for (double l : r.task_losses) avg += l / 4.0;
    EXPECT_NEAR(r.combined, avg, 1e-14);
    const std::vector<double> q = {1.0, 0.0, 0.0, 3.0};
    const auto w = forward_backward(arch, p, b, q);
    EXPECT_NEAR(w.combined, (w.task_losses[0] + 3 * w.task_losses[3]) / 4.0, 1e-14);
  }
}

TEST(ForwardBackward, SingleTaskLossEqualsThatTask) {
  const auto s = mixed_samples(3, 8);
  for (auto arch : {ArchKind::MD, ArchKind::TC}) {
    const std::vector<TaskKind> t = {TaskKind::normals_like};
    const auto p = init_params(arch, t, RngStream(5, 5));
    const auto r = forward_backward(arch, p, make_batch(s, t), std::vector<double>{1.0});
    ASSERT_EQ(r.task_losses.size(), 1u);
    EXPECT_EQ(r.combined, r.task_losses[0]);
  }
}

TEST(ForwardBackward, TaskAbsentFromLayoutIsTaskMismatch) {
  const auto s = mixed_samples(3, 4);
  const std::vector<TaskKind> held = {TaskKind::depth_like, TaskKind::edge_like};
  const std::vector<TaskKind> asked = {TaskKind::depth_like, TaskKind::parts_like};
  for (auto arch : {ArchKind::MD, ArchKind::TC}) {
    const auto p = init_params(arch, held, RngStream(5, 5));
    EXPECT_THROW(forward_backward(arch, p, make_batch(s, asked), uniform_q(2)), TaskMismatch);
  }
  const auto sd = init_params(ArchKind::MD, std::vector<TaskKind>{TaskKind::depth_like}, RngStream(1, 1));
  EXPECT_THROW(forward_backward(ArchKind::MD, sd, make_batch(s, held), uniform_q(2)), TaskMismatch);
}

TEST(ForwardBackward, DeterministicAndMatchesPredict) {
  const auto s = mixed_samples(4, 8);
  const auto p = init_params(ArchKind::TC, kFourA, RngStream(6, 6));
  const auto b = make_batch(s, kFourA);
  const auto r1 = forward_backward(ArchKind::TC, p, b, uniform_q(4));
  const auto r2 = forward_backward(ArchKind::TC, p, b, uniform_q(4));
  EXPECT_EQ(r1.grad, r2.grad);
  EXPECT_EQ(r1.task_losses, r2.task_losses);
  double depth = 0.0;
  for (const auto& x : s) depth += std::abs(predict(ArchKind::TC, p, x, TaskKind::depth_like)[0] - x.y[0]);
  EXPECT_NEAR(r1.task_losses[0], depth / 8.0, 1e-13);
}

// Central differences from an independent long-double forward pass.
class GradientCheck : public ::testing::TestWithParam<std::tuple<ArchKind, int>> {};

TEST_P(GradientCheck, AnalyticMatchesFiniteDifferences) {
  const auto [arch, which] = GetParam();
  std::vector<TaskKind> tasks;
  if (which < 5) {
    tasks = {kAllTasks[static_cast<std::size_t>(which)]};
  } else {
    tasks.assign(kAllTasks.begin(), kAllTasks.end());
  }
  const auto s = mixed_samples(10 + static_cast<std::uint64_t>(which), 8);
  const auto p = init_params(arch, tasks, RngStream(20, static_cast<std::uint64_t>(which)));
  std::vector<double> q(tasks.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = 0.5 + static_cast<double>(i);
  const auto rep = gradcheck::probe_gradient(arch, p, make_batch(s, tasks), q, 120,
                                           RngStream(30, static_cast<std::uint64_t>(which)));
  EXPECT_LT(rep.forward_gap, 1e-12);
  ASSERT_EQ(rep.probes.size(), 120u);
  EXPECT_LT(rep.redrawn, 120u);
  for (const auto& pr : rep.probes) {
    EXPECT_LT(pr.rel_error, 1e-6) << "coordinate " << pr.index << " analytic " << pr.analytic << " numeric "
                                  << pr.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllArchitecturesAndLosses, GradientCheck,
                         ::testing::Combine(::testing::Values(ArchKind::MD, ArchKind::TC),
                                            ::testing::Range(0, 6)),
                         [](const auto& info) {
                           const int w = std::get<1>(info.param);
                           return std::string(arch_name(std::get<0>(info.param))) + "_" +
                                  (w < 5 ? std::string(task_name(kAllTasks[static_cast<std::size_t>(w)]))
                                         : std::string("all_tasks"));
                         });

TEST(Learnability, SingleTaskLossDecreasesWithin50Steps) {
  const auto world = build_world(2024, Domain::A);
  RngStream r(8, 8);
  std::vector<Sample> data;
  for (int i = 0; i < 32; ++i) data.push_back(world.sample(r));
  for (auto arch : {ArchKind::MD, ArchKind::TC}) {
    for (auto t : kDomainATasks) {
      const std::vector<TaskKind> tasks = {t};
      auto p = init_params(arch, tasks, RngStream(3, 3));
      AdamWState st(p.size(), AdamWConfig{});
      const auto b = make_batch(data, tasks);
      const double first = forward_backward(arch, p, b, std::vector<double>{1.0}).combined;
      double last = first;
      for (int step = 0; step < 50; ++step) {
        const auto lg = forward_backward(arch, p, b, std::vector<double>{1.0});
        ASSERT_TRUE(std::isfinite(lg.combined));
        adamw_step(p.raw(), lg.grad, st, 3e-3);
        last = lg.combined;
      }
      last = forward_backward(arch, p, b, std::vector<double>{1.0}).combined;
      EXPECT_LT(last, first) << arch_name(arch) << " " << task_name(t);
    }
  }
}
