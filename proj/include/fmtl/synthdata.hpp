#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmtl/error.hpp"
#include "fmtl/rng.hpp"

namespace fmtl {

enum class TaskKind { depth_like, edge_like, normals_like, semseg_like, parts_like };
enum class MetricKind { rmse, weighted_bce_loss, mean_angular_error_deg, macro_accuracy };
enum class Domain { A, B };

struct TaskInfo {
  TaskKind kind;
  std::string_view name;
  std::size_t output_dim;   // network outputs (class logits for segmentation analogues)
  std::size_t label_dim;    // stored label width (class index for segmentation analogues)
  std::size_t label_offset; // offset into Sample::y
  MetricKind metric;
  bool lower_is_better;
};

inline constexpr std::array<TaskInfo, 5> kTaskTable = {{
    {TaskKind::depth_like, "depth_like", 1, 1, 0, MetricKind::rmse, true},
    {TaskKind::edge_like, "edge_like", 1, 1, 1, MetricKind::weighted_bce_loss, true},
    {TaskKind::normals_like, "normals_like", 3, 3, 2, MetricKind::mean_angular_error_deg, true},
    {TaskKind::semseg_like, "semseg_like", 8, 1, 5, MetricKind::macro_accuracy, false},
    {TaskKind::parts_like, "parts_like", 6, 1, 6, MetricKind::macro_accuracy, false},
}};

inline constexpr std::array<TaskKind, 5> kAllTasks = {TaskKind::depth_like, TaskKind::edge_like,
                                                      TaskKind::normals_like, TaskKind::semseg_like,
                                                      TaskKind::parts_like};
inline constexpr std::array<TaskKind, 4> kDomainATasks = {TaskKind::depth_like, TaskKind::edge_like,
                                                          TaskKind::normals_like, TaskKind::semseg_like};

inline const TaskInfo& task_info(TaskKind kind) { return kTaskTable[static_cast<std::size_t>(kind)]; }
inline std::string_view task_name(TaskKind kind) { return task_info(kind).name; }

inline TaskKind parse_task(std::string_view name) {
  for (const auto& t : kTaskTable) {
    if (t.name == name) return t.kind;
  }
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

inline std::string_view metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::rmse: return "rmse";
    case MetricKind::weighted_bce_loss: return "weighted_bce_loss";
    case MetricKind::mean_angular_error_deg: return "mean_angular_error_deg";
    case MetricKind::macro_accuracy: return "macro_accuracy";
  }
  return "?";
}

inline char domain_char(Domain d) { return d == Domain::A ? 'A' : 'B'; }

/// "<domain>.<task>", the key used in metric tables.
inline std::string task_key(Domain d, TaskKind t) {
  return std::string(1, domain_char(d)) + "." + std::string(task_name(t));
}

inline constexpr std::size_t kInputDim = 16;
inline constexpr std::size_t kWorldHidden = 32;
inline constexpr std::size_t kLabelWidth = 7;
inline constexpr double kEdgePositiveRate = 0.2;

/// One input with labels for every task kind; clients only see the labels
/// of their own task set. y = [depth, edge, nx, ny, nz, semseg class, parts class].
struct Sample {
  std::array<double, kInputDim> x{};
  std::array<double, kLabelWidth> y{};

  std::span<const double> label(TaskKind kind) const {
    const auto& info = task_info(kind);
    return std::span<const double>(y).subspan(info.label_offset, info.label_dim);
  }
  bool operator==(const Sample&) const = default;
};

struct NoiseConfig {
  double regression_sigma = 0.1;  // fraction of the clean label std
  double label_flip = 0.02;
};

/// Fixed random teacher: x → h(x) ∈ R^32 through two tanh layers, then
/// per-task heads. Labels are standardized on a calibration sample so class
/// frequencies stay balanced and the edge positive rate sits near 20%.
struct WorldModel {
  Domain domain = Domain::A;
  std::uint64_t seed = 0;
  double input_shift = 0.0;
  NoiseConfig noise;

  std::vector<double> w1, b1;  // 32 x 16
  std::vector<double> w2, b2;  // 32 x 32
  std::vector<double> depth_head;    // 32
  std::vector<double> edge_head;     // 32
  std::vector<double> normals_head;  // 3 x 32
  std::vector<double> semseg_head;   // 8 x 32
  std::vector<double> parts_head;    // 6 x 32

  // standardization: raw head output r → (r − mean) / std
  std::array<double, 1> depth_mean{}, depth_std{};
  double edge_threshold = 0.0;
  std::array<double, 3> normals_mean{}, normals_std{};
  std::array<double, 8> semseg_mean{}, semseg_std{};
  std::array<double, 6> parts_mean{}, parts_std{};

  std::array<double, kWorldHidden> hidden(std::span<const double> x) const {
    std::array<double, kWorldHidden> h1{}, h{};
    const double s1 = 1.5 / std::sqrt(static_cast<double>(kInputDim));
    for (std::size_t i = 0; i < kWorldHidden; ++i) {
      double a = b1[i];
      for (std::size_t j = 0; j < kInputDim; ++j) a += w1[i * kInputDim + j] * x[j];
      h1[i] = std::tanh(s1 * a);
    }
    const double s2 = 1.5 / std::sqrt(static_cast<double>(kWorldHidden));
    for (std::size_t i = 0; i < kWorldHidden; ++i) {
      double a = b2[i];
      for (std::size_t j = 0; j < kWorldHidden; ++j) a += w2[i * kWorldHidden + j] * h1[j];
      h[i] = std::tanh(s2 * a);
    }
    return h;
  }

  static void head_apply(const std::vector<double>& head, std::size_t rows,
                         const std::array<double, kWorldHidden>& h, double* out) {
    for (std::size_t r = 0; r < rows; ++r) {
      double a = 0.0;
      for (std::size_t j = 0; j < kWorldHidden; ++j) a += head[r * kWorldHidden + j] * h[j];
      out[r] = a;
    }
  }

  /// Draws one labelled sample. Every call consumes a fixed number of draws.
  Sample sample(RngStream& rng) const {
    Sample s;
    for (auto& v : s.x) v = rng.normal(input_shift, 1.0);
    const auto h = hidden(s.x);

    double depth_raw = 0.0;
    head_apply(depth_head, 1, h, &depth_raw);
    const double depth_clean = 3.0 + (depth_raw - depth_mean[0]) / depth_std[0];
    s.y[0] = depth_clean + noise.regression_sigma * rng.normal();

    double edge_raw = 0.0;
    head_apply(edge_head, 1, h, &edge_raw);
    double edge = edge_raw > edge_threshold ? 1.0 : 0.0;
    if (rng.uniform() < noise.label_flip) edge = 1.0 - edge;
    s.y[1] = edge;

    std::array<double, 3> n{};
    head_apply(normals_head, 3, h, n.data());
    double nn = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      n[i] = (n[i] - normals_mean[i]) / normals_std[i] + noise.regression_sigma * rng.normal();
      nn += n[i] * n[i];
    }
    nn = std::sqrt(nn);
    if (nn < 1e-12) {
      n = {0.0, 0.0, 1.0};
      nn = 1.0;
    }
    for (std::size_t i = 0; i < 3; ++i) s.y[2 + i] = n[i] / nn;

    s.y[5] = class_label(semseg_head, semseg_mean, semseg_std, h, rng);
    s.y[6] = class_label(parts_head, parts_mean, parts_std, h, rng);
    return s;
  }

 private:
  template <std::size_t C>
  double class_label(const std::vector<double>& head, const std::array<double, C>& mean,
                     const std::array<double, C>& sd, const std::array<double, kWorldHidden>& h,
                     RngStream& rng) const {
    std::array<double, C> logits{};
    head_apply(head, C, h, logits.data());
    std::size_t best = 0;
    for (std::size_t c = 0; c < C; ++c) {
      logits[c] = (logits[c] - mean[c]) / sd[c];
      if (logits[c] > logits[best]) best = c;
    }
    const double u = rng.uniform();
    const auto random_class = rng.uniform_int(C);
    if (u < noise.label_flip) best = static_cast<std::size_t>(random_class);
    return static_cast<double>(best);
  }
};

namespace detail {

template <std::size_t N>
inline void standardize_stats(const std::vector<std::array<double, N>>& rows, std::array<double, N>& mean,
                              std::array<double, N>& sd) {
  for (std::size_t c = 0; c < N; ++c) {
    double m = 0.0;
    for (const auto& r : rows) m += r[c];
    m /= static_cast<double>(rows.size());
    double v = 0.0;
    for (const auto& r : rows) v += (r[c] - m) * (r[c] - m);
    v /= static_cast<double>(rows.size());
    mean[c] = m;
    sd[c] = std::sqrt(std::max(v, 1e-24));
  }
}

inline std::vector<double> normal_matrix(RngStream& rng, std::size_t n) {
  std::vector<double> m(n);
  for (auto& v : m) v = rng.normal();
  return m;
}

}  // namespace detail

inline constexpr std::size_t kWorldCalibrationSamples = 4000;

inline WorldModel build_world(std::uint64_t seed, Domain domain, NoiseConfig noise = {}) {
  WorldModel w;
  w.domain = domain;
  w.seed = seed;
  w.noise = noise;
  w.input_shift = domain == Domain::A ? 0.0 : 1.5;
  auto rng = RngStream::for_purpose(seed, domain == Domain::A ? 0 : 1,
                                    domain == Domain::A ? "world/A" : "world/B");
  w.w1 = detail::normal_matrix(rng, kWorldHidden * kInputDim);
  w.b1 = detail::normal_matrix(rng, kWorldHidden);
  w.w2 = detail::normal_matrix(rng, kWorldHidden * kWorldHidden);
  w.b2 = detail::normal_matrix(rng, kWorldHidden);
  w.depth_head = detail::normal_matrix(rng, kWorldHidden);
  w.edge_head = detail::normal_matrix(rng, kWorldHidden);
  w.normals_head = detail::normal_matrix(rng, 3 * kWorldHidden);
  w.semseg_head = detail::normal_matrix(rng, 8 * kWorldHidden);
  w.parts_head = detail::normal_matrix(rng, 6 * kWorldHidden);
  if (domain == Domain::A) {
    // keep the first-layer bias modest so domain-A inputs sit in tanh's active range
    for (auto& b : w.b1) b *= 0.5;
  }

  auto calib = rng.fork("calibration");
  std::vector<std::array<double, 1>> depth_rows;
  std::vector<double> edge_raw;
  std::vector<std::array<double, 3>> normal_rows;
  std::vector<std::array<double, 8>> sem_rows;
  std::vector<std::array<double, 6>> part_rows;
  for (std::size_t i = 0; i < kWorldCalibrationSamples; ++i) {
    std::array<double, kInputDim> x{};
    for (auto& v : x) v = calib.normal(w.input_shift, 1.0);
    const auto h = w.hidden(x);
    std::array<double, 1> d{};
    WorldModel::head_apply(w.depth_head, 1, h, d.data());
    depth_rows.push_back(d);
    double e = 0.0;
    WorldModel::head_apply(w.edge_head, 1, h, &e);
    edge_raw.push_back(e);
    std::array<double, 3> n{};
    WorldModel::head_apply(w.normals_head, 3, h, n.data());
    normal_rows.push_back(n);
    std::array<double, 8> s{};
    WorldModel::head_apply(w.semseg_head, 8, h, s.data());
    sem_rows.push_back(s);
    std::array<double, 6> p{};
    WorldModel::head_apply(w.parts_head, 6, h, p.data());
    part_rows.push_back(p);
  }
  detail::standardize_stats(depth_rows, w.depth_mean, w.depth_std);
  detail::standardize_stats(normal_rows, w.normals_mean, w.normals_std);
  detail::standardize_stats(sem_rows, w.semseg_mean, w.semseg_std);
  detail::standardize_stats(part_rows, w.parts_mean, w.parts_std);
  std::sort(edge_raw.begin(), edge_raw.end());
  w.edge_threshold = edge_raw[static_cast<std::size_t>((1.0 - kEdgePositiveRate) *
                                                       static_cast<double>(edge_raw.size()))];
  return w;
}

// ---------------------------------------------------------------------------
// Scenarios

enum class ScenarioId { IID1, NIID2, NIID3, NIID4, NIID5, NIID6, NIID7 };

inline constexpr std::array<std::string_view, 7> kScenarioNames = {"IID-1",  "NIID-2", "NIID-3", "NIID-4",
                                                                   "NIID-5", "NIID-6", "NIID-7"};

inline std::string_view scenario_name(ScenarioId id) { return kScenarioNames[static_cast<std::size_t>(id)]; }

/// Accepts "IID-1", "iid1", "niid-6", "NIID6", ...
inline ScenarioId parse_scenario(std::string_view text) {
  std::string norm;
  for (char c : text) {
    if (c == '-' || c == '_') continue;
    norm.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  for (std::size_t i = 0; i < kScenarioNames.size(); ++i) {
    std::string cand;
    for (char c : kScenarioNames[i]) {
      if (c != '-') cand.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (cand == norm) return static_cast<ScenarioId>(i);
  }
  throw ConfigError("unknown scenario '" + std::string(text) + "'");
}

struct ClientSpec {
  int client_id = 0;
  Domain domain = Domain::A;
  std::vector<TaskKind> tasks;  // canonical task order
  std::size_t train_count = 0;  // the client's share, before the 9:1 local split
};

struct ScenarioSpec {
  ScenarioId scenario_id = ScenarioId::IID1;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 2024;
  std::size_t pool_a = 2000;
  std::size_t test_a = 800;
  std::size_t pool_b = 4000;
  std::size_t test_b = 1000;
  double unbalance_ratio = 2.0;
  std::optional<int> client_count;  // IID-1 only: K clients evenly (scale study)
  NoiseConfig noise;
  std::vector<ClientSpec> clients;  // filled by resolve_scenario

  std::size_t pool_size(Domain d) const { return d == Domain::A ? pool_a : pool_b; }
  std::size_t test_size(Domain d) const { return d == Domain::A ? test_a : test_b; }

  bool uses_domain(Domain d) const {
    return std::any_of(clients.begin(), clients.end(), [d](const ClientSpec& c) { return c.domain == d; });
  }

  /// p_k, default 1/K.
  std::vector<double> client_weights() const {
    return std::vector<double>(clients.size(), 1.0 / static_cast<double>(clients.size()));
  }
};

/// Largest-remainder apportionment of `total` by nonnegative weights.
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (weights.empty() || !(wsum > 0.0)) throw ArgumentError("apportion: weights must have positive sum");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) out[remainders[r % remainders.size()].second] += 1;
  return out;
}

inline std::vector<double> geometric_weights(std::size_t k, double ratio) {
  std::vector<double> w(k);
  for (std::size_t i = 0; i < k; ++i) w[i] = std::pow(ratio, static_cast<double>(k - 1 - i));
  return w;
}

/// Fills spec.clients according to the scenario's structural pattern.
inline ScenarioSpec resolve_scenario(ScenarioSpec spec) {
  spec.clients.clear();
  if (spec.client_count && spec.scenario_id != ScenarioId::IID1) {
    throw ConfigError("client_count override is only supported for IID-1");
  }
  if (spec.unbalance_ratio <= 0.0) throw ConfigError("unbalance_ratio must be > 0");
  const std::vector<TaskKind> all_a(kDomainATasks.begin(), kDomainATasks.end());

  auto add = [&spec](Domain d, std::vector<TaskKind> tasks, std::size_t share) {
    ClientSpec c;
    c.client_id = static_cast<int>(spec.clients.size());
    c.domain = d;
    c.tasks = std::move(tasks);
    c.train_count = share;
    spec.clients.push_back(std::move(c));
  };
  auto equal_shares = [](std::size_t total, std::size_t k) {
    return apportion(total, std::vector<double>(k, 1.0));
  };

  switch (spec.scenario_id) {
    case ScenarioId::IID1: {
      const std::size_t k = spec.client_count ? static_cast<std::size_t>(*spec.client_count) : 4;
      if (k < 1) throw ConfigError("client_count must be >= 1");
      const auto shares = equal_shares(spec.pool_a, k);
      for (std::size_t i = 0; i < k; ++i) add(Domain::A, all_a, shares[i]);
      break;
    }
    case ScenarioId::NIID2: {
      const auto shares = equal_shares(spec.pool_a, 4);
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, {kDomainATasks[i]}, shares[i]);
      break;
    }
    case ScenarioId::NIID3: {
      const auto shares = equal_shares(spec.pool_a, 8);
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, all_a, shares[i]);
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, {kDomainATasks[i]}, shares[4 + i]);
      break;
    }
    case ScenarioId::NIID4: {
      const auto shares = apportion(spec.pool_a, geometric_weights(4, spec.unbalance_ratio));
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, all_a, shares[i]);
      break;
    }
    case ScenarioId::NIID5: {
      const auto shares = apportion(spec.pool_a, geometric_weights(4, spec.unbalance_ratio));
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, {kDomainATasks[i]}, shares[i]);
      break;
    }
    case ScenarioId::NIID6: {
      const auto shares = equal_shares(spec.pool_a, 4);
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, all_a, shares[i]);
      add(Domain::B, {TaskKind::normals_like, TaskKind::parts_like}, spec.pool_b);
      break;
    }
    case ScenarioId::NIID7: {
      const auto shares = equal_shares(spec.pool_a, 4);
      for (std::size_t i = 0; i < 4; ++i) add(Domain::A, {kDomainATasks[i]}, shares[i]);
      const auto b_shares = equal_shares(spec.pool_b, 2);
      add(Domain::B, {TaskKind::parts_like}, b_shares[0]);
      add(Domain::B, {TaskKind::normals_like}, b_shares[1]);
      break;
    }
  }
  for (const auto& c : spec.clients) {
    if (c.train_count == 0) throw ConfigError("client " + std::to_string(c.client_id) + " received no data");
  }
  return spec;
}

struct ClientDataset {
  ClientSpec provenance;
  std::vector<Sample> train;
  std::vector<Sample> local_test;
};

struct ScenarioData {
  ScenarioSpec spec;
  std::vector<ClientDataset> clients;
  std::map<Domain, std::vector<Sample>> global_test;
};

/// |local_test| = round(n / 10).
inline std::size_t local_test_count(std::size_t n) { return (n + 5) / 10; }

/// Deterministic domain pool: train pool then global test pool, drawn in one
/// sequence so the two are disjoint by construction.
inline std::pair<std::vector<Sample>, std::vector<Sample>> draw_domain_pool(const ScenarioSpec& spec,
                                                                            const WorldModel& world) {
  auto rng = RngStream::for_purpose(spec.seed, world.domain == Domain::A ? 0 : 1, "pool");
  std::vector<Sample> train, test;
  train.reserve(spec.pool_size(world.domain));
  test.reserve(spec.test_size(world.domain));
  for (std::size_t i = 0; i < spec.pool_size(world.domain); ++i) train.push_back(world.sample(rng));
  for (std::size_t i = 0; i < spec.test_size(world.domain); ++i) test.push_back(world.sample(rng));
  return {std::move(train), std::move(test)};
}

inline ScenarioData make_scenario(const ScenarioSpec& unresolved) {
  ScenarioData data;
  data.spec = unresolved.clients.empty() ? resolve_scenario(unresolved) : unresolved;
  const auto& spec = data.spec;
  data.clients.resize(spec.clients.size());
  for (Domain d : {Domain::A, Domain::B}) {
    if (!spec.uses_domain(d)) continue;
    const auto world = build_world(spec.world_seed, d, spec.noise);
    auto [pool, test] = draw_domain_pool(spec, world);
    data.global_test[d] = std::move(test);

    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto perm_rng = RngStream::for_purpose(spec.seed, d == Domain::A ? 0 : 1, "partition");
    perm_rng.shuffle(std::span<std::size_t>(order));

    std::size_t cursor = 0;
    for (const auto& c : spec.clients) {
      if (c.domain != d) continue;
      if (cursor + c.train_count > pool.size()) throw ConfigError("client shares exceed the domain pool");
      auto& ds = data.clients[static_cast<std::size_t>(c.client_id)];
      ds.provenance = c;
      const std::size_t n_test = local_test_count(c.train_count);
      const std::size_t n_train = c.train_count - n_test;
      for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(pool[order[cursor + i]]);
      for (std::size_t i = 0; i < n_test; ++i) ds.local_test.push_back(pool[order[cursor + n_train + i]]);
      cursor += c.train_count;
    }
  }
  return data;
}

inline constexpr std::size_t kDefaultPretrainCount = 2000;

/// Pooled domain-A data for warm-start checkpoints, drawn from a stream no
/// scenario uses.
inline ClientDataset pretrain_pool(const ScenarioSpec& spec, std::size_t count = kDefaultPretrainCount) {
  const auto world = build_world(spec.world_seed, Domain::A, spec.noise);
  auto rng = RngStream::for_purpose(spec.seed, -1, "pretrain");
  ClientDataset ds;
  ds.provenance.client_id = -1;
  ds.provenance.domain = Domain::A;
  ds.provenance.tasks.assign(kDomainATasks.begin(), kDomainATasks.end());
  ds.provenance.train_count = count;
  const std::size_t n_test = local_test_count(count);
  for (std::size_t i = 0; i < count - n_test; ++i) ds.train.push_back(world.sample(rng));
  for (std::size_t i = 0; i < n_test; ++i) ds.local_test.push_back(world.sample(rng));
  return ds;
}

}  // namespace fmtl
