#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fmtl/error.hpp"
#include "fmtl/evalstat.hpp"
#include "fmtl/models.hpp"
#include "fmtl/mtlopt.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/rng.hpp"
#include "fmtl/synthdata.hpp"

namespace fmtl {

enum class Strategy { local, fedavg, fedprox, fedamp, fedrep, matfl, fedmtl, pcgrad, cagrad };

inline constexpr std::array<std::string_view, 9> kStrategyKeys = {
    "local", "fedavg", "fedprox", "fedamp", "fedrep", "matfl", "fedmtl", "pcgrad", "cagrad"};
inline constexpr std::array<std::string_view, 9> kStrategyLabels = {
    "Local", "FedAvg", "FedProx", "FedAMP", "FedRep", "MaT-FL", "FedMTL", "PCGrad", "CAGrad"};

/// A strategy plus the "-E" flag (transmit/combine the encoder segment only).
struct StrategyId {
  Strategy kind = Strategy::fedavg;
  bool decoupled = false;

  StrategyId() = default;
  StrategyId(Strategy k, bool d = false) : kind(k), decoupled(d) { normalize(); }

  void normalize() {
    if (kind == Strategy::local) decoupled = false;
    if (kind == Strategy::matfl || kind == Strategy::fedrep) decoupled = true;
  }

  std::string key() const { return std::string(kStrategyKeys[static_cast<std::size_t>(kind)]); }

  /// "FedAvg", "FedProx-E", "MaT-FL" (decoupled by definition, no suffix).
  std::string label() const {
    std::string s(kStrategyLabels[static_cast<std::size_t>(kind)]);
    const bool intrinsic = kind == Strategy::matfl || kind == Strategy::fedrep;
    if (decoupled && !intrinsic) s += "-E";
    return s;
  }

  bool operator==(const StrategyId&) const = default;
};

/// Accepts "fedavg", "FedAvg", "fedprox-e", "MaT-FL", ...
inline StrategyId parse_strategy(std::string_view text, bool decoupled = false) {
  std::string norm;
  for (char c : text) norm.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (norm.size() > 2 && norm.ends_with("-e")) {
    decoupled = true;
    norm.resize(norm.size() - 2);
  }
  std::erase(norm, '-');
  std::erase(norm, '_');
  for (std::size_t i = 0; i < kStrategyKeys.size(); ++i) {
    if (norm == kStrategyKeys[i]) return StrategyId(static_cast<Strategy>(i), decoupled);
  }
  throw ConfigError("unknown strategy '" + std::string(text) + "'");
}

/// Strategy hyperparameters.
struct StrategyParams {
  double prox_mu = 0.01;
  double amp_alpha = 0.1;
  double amp_sigma = 1.0;
  double amp_lambda = 1.0;
  double matfl_tau = 1.0;
  double matfl_sigma = 1.0;
  double mtl_lambda = 0.1;
  CagradConfig cagrad;
  double server_lr = 1.0;
};

// ---------------------------------------------------------------------------
// Communication ledger

inline constexpr std::size_t kBytesPerReal = 8;

struct CommBytes {
  std::uint64_t up = 0;
  std::uint64_t down = 0;
  std::uint64_t total() const { return up + down; }
};

/// Bytes moved in one round by K clients. The payload is the encoder for
/// decoupled strategies and the full vector otherwise. FedMTL relays every
/// client's vector to all K clients, counted on both legs, so its total is
/// K times the FedAvg total.
inline CommBytes round_bytes(StrategyId s, std::uint64_t k, std::uint64_t encoder_count, std::uint64_t total_count) {
  s.normalize();
  if (s.kind == Strategy::local) return {};
  const std::uint64_t payload = (s.decoupled ? encoder_count : total_count) * kBytesPerReal;
  const std::uint64_t fan = s.kind == Strategy::fedmtl ? k : 1;
  return {fan * k * payload, fan * k * payload};
}

struct LedgerEntry {
  int round = 0;
  std::string strategy;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
};

class CommLedger {
 public:
  void record(int round, const std::string& strategy, CommBytes b) {
    entries_.push_back({round, strategy, b.up, b.down});
    up_ += b.up;
    down_ += b.down;
  }
  const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
  std::uint64_t total_up() const noexcept { return up_; }
  std::uint64_t total_down() const noexcept { return down_; }
  std::uint64_t total() const noexcept { return up_ + down_; }

 private:
  std::vector<LedgerEntry> entries_;
  std::uint64_t up_ = 0;
  std::uint64_t down_ = 0;
};

// ---------------------------------------------------------------------------
// Clients

/// Quadratic pull (strength/2)‖θ[offset:offset+n] − anchor‖².
struct ProxTerm {
  double strength = 0.0;
  std::size_t offset = 0;
  std::vector<double> anchor;
};

enum class FreezeMode { none, encoder_frozen, head_frozen };

struct LocalTrainOptions {
  std::optional<ProxTerm> prox;  // FedProx
  std::optional<ProxTerm> amp;   // FedAMP, anchor = cloud model u_k
  std::optional<ProxTerm> mtl;   // FedMTL, anchor = mean of all clients
  bool fedrep_schedule = false;  // head epochs (encoder frozen), then one encoder epoch
};

struct TrainConfig {
  int rounds = 100;
  int local_epochs = 4;
  std::size_t batch_size = 8;
  double base_lr = 1e-4;
  int warmup_rounds = 5;
  AdamWConfig adamw;
};

struct ClientState {
  int client_id = 0;
  const ClientDataset* data = nullptr;
  ArchKind arch = ArchKind::MD;
  std::vector<TaskKind> tasks;
  std::vector<double> q;  // q_{k,t}, default 1/|T_k|
  SegmentedParams params;
  AdamWState optimizer;
  RngStream rng;
  std::optional<std::vector<double>> amp_cloud;   // u_k (payload coordinates)
  std::optional<std::vector<double>> mtl_center;  // θ̄ (payload coordinates)
};

namespace detail {

inline void add_prox_grad(const ProxTerm& p, std::span<const double> params, std::vector<double>& grad) {
  if (p.strength == 0.0) return;
  for (std::size_t i = 0; i < p.anchor.size(); ++i) {
    grad[p.offset + i] += p.strength * (params[p.offset + i] - p.anchor[i]);
  }
}

inline std::vector<bool> freeze_mask(const SegmentedParams& params, FreezeMode mode) {
  std::vector<bool> mask(params.size(), true);
  if (mode == FreezeMode::none) return mask;
  const auto& enc = params.layout().at(kEncoderSegment);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool in_encoder = i >= enc.offset && i < enc.offset + enc.length;
    mask[i] = mode == FreezeMode::encoder_frozen ? !in_encoder : in_encoder;
  }
  return mask;
}

inline void run_epoch(ClientState& c, double lr, std::size_t batch_size, const LocalTrainOptions& opt,
                      FreezeMode freeze) {
  const auto& train = c.data->train;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  c.rng.shuffle(std::span<std::size_t>(order));
  const auto mask = freeze_mask(c.params, freeze);
  const std::vector<bool>* mask_ptr = freeze == FreezeMode::none ? nullptr : &mask;
  Batch batch;
  batch.tasks = c.tasks;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    batch.samples.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      batch.samples.push_back(&train[order[i]]);
    }
    auto fb = forward_backward(c.arch, c.params, batch, c.q);
    if (opt.prox) add_prox_grad(*opt.prox, c.params.values(), fb.grad);
    if (opt.amp) add_prox_grad(*opt.amp, c.params.values(), fb.grad);
    if (opt.mtl) add_prox_grad(*opt.mtl, c.params.values(), fb.grad);
    adamw_step(c.params.values(), fb.grad, c.optimizer, lr, mask_ptr);
  }
}

}  // namespace detail

/// `epochs` passes over the client's train split in seeded shuffled batches;
/// one AdamW step per batch on the combined task loss plus any proximal terms.
inline ClientState local_train(ClientState client, double lr, int epochs, std::size_t batch_size,
                               const LocalTrainOptions& opt = {}) {
  if (epochs < 1) throw ArgumentError("local_train: epochs must be >= 1");
  if (client.data == nullptr || client.data->train.empty()) throw ArgumentError("local_train: client has no data");
  if (opt.fedrep_schedule) {
    const int head_epochs = std::max(epochs - 1, 1);
    for (int e = 0; e < head_epochs; ++e) detail::run_epoch(client, lr, batch_size, opt, FreezeMode::encoder_frozen);
    detail::run_epoch(client, lr, batch_size, opt, FreezeMode::head_frozen);
  } else {
    for (int e = 0; e < epochs; ++e) detail::run_epoch(client, lr, batch_size, opt, FreezeMode::none);
  }
  return client;
}

// ---------------------------------------------------------------------------
// Aggregation

inline bool is_taskcond_segment(std::string_view name) { return name.starts_with("taskcond:"); }

/// Segment names a client transmits: the encoder for decoupled strategies,
/// everything otherwise.
inline std::vector<std::string> payload_segments(const ClientState& c, bool decoupled) {
  if (decoupled) return {kEncoderSegment};
  std::vector<std::string> names;
  for (const auto& seg : c.params.layout().segments()) names.push_back(seg.name);
  return names;
}

/// Payload coordinates are one contiguous range of the client's vector.
inline std::pair<std::size_t, std::size_t> payload_range(const ClientState& c, bool decoupled) {
  if (!decoupled) return {0, c.params.size()};
  const auto& enc = c.params.layout().at(kEncoderSegment);
  return {enc.offset, enc.length};
}

/// Full-model strategies need identical shared bodies (every segment except
/// task conditioning); task-conditioning segments are pooled per task among
/// the clients holding it. Decoupled strategies only need matching encoders.
/// Throws LayoutMismatch otherwise.
inline void check_aggregatable(StrategyId s, const std::vector<ClientState>& clients) {
  s.normalize();
  if (s.kind == Strategy::local || clients.empty()) return;
  if (s.decoupled) {
    const auto& a = clients[0].params.layout().at(kEncoderSegment);
    for (std::size_t k = 1; k < clients.size(); ++k) {
      if (clients[k].params.layout().at(kEncoderSegment).length != a.length) {
        throw LayoutMismatch("encoder segments differ between clients");
      }
    }
    return;
  }
  auto body = [](const Layout& l) {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& seg : l.segments()) {
      if (!is_taskcond_segment(seg.name)) out.emplace_back(seg.name, seg.length);
    }
    return out;
  };
  const auto ref = body(clients[0].params.layout());
  std::map<std::string, std::size_t> cond_len;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& layout = clients[k].params.layout();
    if (body(layout) != ref) {
      throw LayoutMismatch("client " + std::to_string(clients[k].client_id) + " layout [" + layout.describe() +
                           "] differs from client " + std::to_string(clients[0].client_id) + " [" +
                           clients[0].params.layout().describe() + "]");
    }
    for (const auto& seg : layout.segments()) {
      if (!is_taskcond_segment(seg.name)) continue;
      auto [it, fresh] = cond_len.emplace(seg.name, seg.length);
      if (!fresh && it->second != seg.length) throw LayoutMismatch("segment " + seg.name + " differs in length");
    }
  }
}

/// Segments sharing one holder set, combined as one vector.
struct AggregationBlock {
  std::vector<std::string> segments;
  std::vector<std::size_t> holders;  // ascending client index
};

inline std::vector<AggregationBlock> aggregation_blocks(const std::vector<ClientState>& clients, bool decoupled) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> holders;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    for (auto& name : payload_segments(clients[k], decoupled)) {
      auto& h = holders[name];
      if (h.empty()) order.push_back(name);
      h.push_back(k);
    }
  }
  std::vector<AggregationBlock> blocks;
  for (const auto& name : order) {
    const auto& h = holders.at(name);
    auto it = std::find_if(blocks.begin(), blocks.end(), [&](const AggregationBlock& b) { return b.holders == h; });
    if (it == blocks.end()) {
      blocks.push_back({{name}, h});
    } else {
      it->segments.push_back(name);
    }
  }
  return blocks;
}

inline SegmentedParams gather_block(const SegmentedParams& params, const std::vector<std::string>& names) {
  Layout layout;
  for (const auto& n : names) layout.append(n, params.layout().at(n).length);
  SegmentedParams out(layout);
  for (const auto& n : names) out.assign_segment(n, params.segment(n));
  return out;
}

inline void scatter_block(SegmentedParams& params, const SegmentedParams& block) {
  for (const auto& seg : block.layout().segments()) params.assign_segment(seg.name, block.segment(seg.name));
}

/// Server copy of every transmitted segment (the union across clients).
struct ServerState {
  std::map<std::string, std::vector<double>> segments;

  static ServerState from_clients(const std::vector<ClientState>& clients, bool decoupled) {
    ServerState s;
    for (const auto& c : clients) {
      for (const auto& n : payload_segments(c, decoupled)) {
        if (!s.segments.count(n)) {
          const auto v = c.params.segment(n);
          s.segments.emplace(n, std::vector<double>(v.begin(), v.end()));
        }
      }
    }
    return s;
  }

  SegmentedParams gather(const std::vector<std::string>& names) const {
    Layout layout;
    for (const auto& n : names) layout.append(n, segments.at(n).size());
    SegmentedParams out(layout);
    for (const auto& n : names) out.assign_segment(n, segments.at(n));
    return out;
  }

  void scatter(const SegmentedParams& block) {
    for (const auto& seg : block.layout().segments()) {
      const auto v = block.segment(seg.name);
      segments[seg.name].assign(v.begin(), v.end());
    }
  }
};

/// FedAMP attention row weights ξ_{k,·}: α·exp(−‖θ_k − θ_j‖²/(σP)) off the
/// diagonal, 1 − Σ on it; if that goes negative the off-diagonal part is
/// rescaled to 1 − ε.
inline std::vector<std::vector<double>> fedamp_weights(const std::vector<SegmentedParams>& payloads, double alpha,
                                                       double sigma) {
  constexpr double kEps = 1e-6;
  const std::size_t k = payloads.size();
  const double p = static_cast<double>(payloads.front().size());
  std::vector<std::vector<double>> xi(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a) {
    double off = 0.0;
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      xi[a][b] = alpha * std::exp(-squared_distance(payloads[a].values(), payloads[b].values()) / (sigma * p));
      off += xi[a][b];
    }
    if (1.0 - off < 0.0) {
      const double scale = (1.0 - kEps) / off;
      for (std::size_t b = 0; b < k; ++b) {
        if (a != b) xi[a][b] *= scale;
      }
      xi[a][a] = kEps;
    } else {
      xi[a][a] = 1.0 - off;
    }
  }
  return xi;
}

/// MaT-FL interpretation: softmax over −‖E_k − E_j‖²/(σP_E) at temperature τ.
inline std::vector<std::vector<double>> matfl_weights(const std::vector<SegmentedParams>& encoders, double tau,
                                                      double sigma) {
  const std::size_t k = encoders.size();
  const double p = static_cast<double>(encoders.front().size());
  std::vector<std::vector<double>> w(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<double> logits(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < k; ++b) {
      logits[b] = -squared_distance(encoders[a].values(), encoders[b].values()) / (sigma * p) / tau;
      mx = std::max(mx, logits[b]);
    }
    double z = 0.0;
    for (std::size_t b = 0; b < k; ++b) z += (w[a][b] = std::exp(logits[b] - mx));
    for (std::size_t b = 0; b < k; ++b) w[a][b] /= z;
  }
  return w;
}

/// Bytes for one round given each client's payload length.
inline CommBytes round_bytes(StrategyId s, std::span<const std::uint64_t> payload_counts) {
  s.normalize();
  if (s.kind == Strategy::local) return {};
  std::uint64_t sum = 0;
  for (auto n : payload_counts) sum += n * kBytesPerReal;
  const std::uint64_t fan = s.kind == Strategy::fedmtl ? payload_counts.size() : 1;
  return {fan * sum, fan * sum};
}

struct AggregateContext {
  int round = 0;
  std::uint64_t seed = 0;
  std::vector<double> client_weights;  // p_k
  StrategyParams hp;
};

namespace detail {

inline std::vector<double> holder_weights(const std::vector<double>& p, const std::vector<std::size_t>& holders) {
  std::vector<double> w;
  for (auto k : holders) w.push_back(p[k]);
  if (holders.size() == p.size()) return w;
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

}  // namespace detail

/// Applies one aggregation barrier. Updates client params, per-client anchors
/// and the server copy in place; returns the bytes moved.
inline CommBytes aggregate(StrategyId s, std::vector<ClientState>& clients, ServerState& server,
                           const AggregateContext& ctx) {
  s.normalize();
  if (s.kind == Strategy::local) return {};
  check_aggregatable(s, clients);
  const std::size_t k_all = clients.size();
  const bool dec = s.decoupled;
  std::vector<double> p = ctx.client_weights;
  if (p.size() != k_all) p.assign(k_all, 1.0 / static_cast<double>(k_all));

  if (s.kind == Strategy::fedmtl) {
    for (auto& c : clients) c.mtl_center = std::vector<double>(payload_range(c, dec).second, 0.0);
  }
  const auto blocks = aggregation_blocks(clients, dec);
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& block = blocks[bi];
    const std::size_t k = block.holders.size();
    std::vector<SegmentedParams> parts;
    for (auto h : block.holders) parts.push_back(gather_block(clients[h].params, block.segments));
    const auto w = detail::holder_weights(p, block.holders);

    switch (s.kind) {
      case Strategy::local:
        break;
      case Strategy::fedavg:
      case Strategy::fedprox:
      case Strategy::fedrep: {
        const auto merged = weighted_sum(parts, w);
        server.scatter(merged);
        for (auto h : block.holders) scatter_block(clients[h].params, merged);
        break;
      }
      case Strategy::fedamp: {
        const auto xi = fedamp_weights(parts, ctx.hp.amp_alpha, ctx.hp.amp_sigma);
        std::vector<SegmentedParams> clouds;
        for (std::size_t a = 0; a < k; ++a) clouds.push_back(weighted_sum(parts, xi[a]));
        for (std::size_t a = 0; a < k; ++a) scatter_block(clients[block.holders[a]].params, clouds[a]);
        break;
      }
      case Strategy::matfl: {
        const auto mw = matfl_weights(parts, ctx.hp.matfl_tau, ctx.hp.matfl_sigma);
        std::vector<SegmentedParams> personal;
        for (std::size_t a = 0; a < k; ++a) personal.push_back(weighted_sum(parts, mw[a]));
        for (std::size_t a = 0; a < k; ++a) scatter_block(clients[block.holders[a]].params, personal[a]);
        break;
      }
      case Strategy::fedmtl: {
        const std::vector<double> uniform(k, 1.0 / static_cast<double>(k));
        const auto center = weighted_sum(parts, uniform);
        for (auto h : block.holders) {
          auto& c = clients[h];
          const std::size_t off = payload_range(c, dec).first;
          for (const auto& seg : center.layout().segments()) {
            const auto& mine = c.params.layout().at(seg.name);
            const auto src = center.segment(seg.name);
            std::copy(src.begin(), src.end(), c.mtl_center->begin() + static_cast<std::ptrdiff_t>(mine.offset - off));
          }
        }
        break;
      }
      case Strategy::pcgrad:
      case Strategy::cagrad: {
        auto global = server.gather(block.segments);
        GradientSet grads;
        for (const auto& part : parts) grads.push_back(pseudo_gradient(global, part));
        std::vector<double> d;
        if (s.kind == Strategy::pcgrad) {
          d = pcgrad(grads, RngStream::for_purpose(ctx.seed, -1, "pcgrad")
                                .fork(static_cast<std::uint64_t>(ctx.round))
                                .fork(static_cast<std::uint64_t>(bi)));
        } else {
          d = cagrad(grads, ctx.hp.cagrad);
        }
        auto g = global.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= ctx.hp.server_lr * d[i];
        server.scatter(global);
        for (auto h : block.holders) scatter_block(clients[h].params, global);
        break;
      }
    }
  }
  if (s.kind == Strategy::fedamp) {
    for (auto& c : clients) {
      const auto [off, n] = payload_range(c, dec);
      c.amp_cloud = std::vector<double>(c.params.raw().begin() + static_cast<std::ptrdiff_t>(off),
                                        c.params.raw().begin() + static_cast<std::ptrdiff_t>(off + n));
    }
  }
  std::vector<std::uint64_t> counts;
  for (const auto& c : clients) counts.push_back(payload_range(c, dec).second);
  return round_bytes(s, counts);
}

/// Local-training options for the coming round. The FedProx anchor is the
/// model the client just received, i.e. its own starting point.
inline LocalTrainOptions round_options(StrategyId s, const ClientState& c, const StrategyParams& hp) {
  LocalTrainOptions opt;
  const auto [off, n] = payload_range(c, s.decoupled);
  switch (s.kind) {
    case Strategy::fedprox:
      if (hp.prox_mu != 0.0) {
        opt.prox = ProxTerm{hp.prox_mu, off,
                            std::vector<double>(c.params.raw().begin() + static_cast<std::ptrdiff_t>(off),
                                                c.params.raw().begin() + static_cast<std::ptrdiff_t>(off + n))};
      }
      break;
    case Strategy::fedamp:
      if (c.amp_cloud) opt.amp = ProxTerm{hp.amp_lambda, off, *c.amp_cloud};
      break;
    case Strategy::fedmtl:
      if (c.mtl_center) opt.mtl = ProxTerm{hp.mtl_lambda, off, *c.mtl_center};
      break;
    case Strategy::fedrep:
      opt.fedrep_schedule = true;
      break;
    default:
      break;
  }
  return opt;
}

// ---------------------------------------------------------------------------
// Experiment loop

struct RunSpec {
  ScenarioSpec scenario;
  ArchKind arch = ArchKind::MD;
  StrategyId strategy;
  StrategyParams hp;
  TrainConfig train;
  std::uint64_t seed = 0;
  int eval_interval = 2;
  bool parallel_clients = false;
  std::optional<SegmentedParams> warm_start;
};

enum class RunStatus { done, null_baseline };

inline std::string_view status_name(RunStatus s) { return s == RunStatus::done ? "done" : "null_baseline"; }

struct RoundRecord {
  int round = 0;
  int client_id = 0;
  std::string task;
  EvalSplit split = EvalSplit::G;
  std::string metric_name;
  double value = 0.0;
  bool lower_is_better = true;
};

struct RunResult {
  RunStatus status = RunStatus::done;
  std::string null_reason;
  std::vector<RoundRecord> records;
  CommLedger ledger;
  std::vector<SegmentedParams> final_params;
  std::vector<int> eval_rounds;
};

/// Copies every checkpoint segment whose (name, length) matches.
inline std::size_t apply_warm_start(SegmentedParams& params, const SegmentedParams& ckpt) {
  std::size_t copied = 0;
  for (const auto& seg : ckpt.layout().segments()) {
    const auto* mine = params.layout().find(seg.name);
    if (mine == nullptr || mine->length != seg.length) continue;
    params.assign_segment(seg.name, ckpt.segment(seg.name));
    ++copied;
  }
  return copied;
}

inline std::vector<ClientState> make_clients(const ScenarioData& data, const RunSpec& spec) {
  std::vector<ClientState> clients;
  const auto init_rng = RngStream::for_purpose(spec.seed, -1, "init");
  for (const auto& ds : data.clients) {
    ClientState c;
    c.client_id = ds.provenance.client_id;
    c.data = &ds;
    c.arch = spec.arch;
    c.tasks = ds.provenance.tasks;
    c.q.assign(c.tasks.size(), 1.0 / static_cast<double>(c.tasks.size()));
    c.params = init_params(spec.arch, c.tasks, init_rng);
    if (spec.warm_start) apply_warm_start(c.params, *spec.warm_start);
    c.optimizer = AdamWState(c.params.size(), spec.train.adamw);
    c.rng = RngStream::for_purpose(spec.seed, c.client_id, "local-train");
    clients.push_back(std::move(c));
  }
  return clients;
}

inline void evaluate_clients(const ScenarioData& data, const std::vector<ClientState>& clients, int round,
                             std::vector<RoundRecord>& out) {
  for (const auto& c : clients) {
    const auto domain = c.data->provenance.domain;
    for (auto split : {EvalSplit::G, EvalSplit::P}) {
      const auto& samples = split == EvalSplit::G ? data.global_test.at(domain) : c.data->local_test;
      if (samples.empty()) continue;
      for (const auto& m : evaluate(c.arch, c.params, samples, domain, c.tasks, split, c.client_id)) {
        out.push_back({round, c.client_id, m.task, split, m.metric_name, m.value, m.lower_is_better});
      }
    }
  }
}

/// Full round loop. A strategy that cannot combine the clients' layouts
/// yields status null_baseline instead of throwing.
inline RunResult run_experiment(const RunSpec& spec, const ScenarioData& data) {
  RunResult result;
  auto clients = make_clients(data, spec);
  try {
    check_aggregatable(spec.strategy, clients);
  } catch (const LayoutMismatch& e) {
    result.status = RunStatus::null_baseline;
    result.null_reason = e.what();
    return result;
  }

  auto server = ServerState::from_clients(clients, spec.strategy.decoupled);
  AggregateContext ctx;
  ctx.seed = spec.seed;
  ctx.client_weights = data.spec.client_weights();
  ctx.hp = spec.hp;

  const int rounds = spec.train.rounds;
  const int warmup = std::min(spec.train.warmup_rounds, std::max(rounds - 1, 0));
  evaluate_clients(data, clients, 0, result.records);
  result.eval_rounds.push_back(0);
  for (int r = 0; r < rounds; ++r) {
    const double lr = cosine_warmup_lr(r, rounds, spec.train.base_lr, warmup);
    std::vector<LocalTrainOptions> opts;
    for (const auto& c : clients) opts.push_back(round_options(spec.strategy, c, spec.hp));
    if (spec.parallel_clients && clients.size() > 1) {
      std::vector<ClientState> next(clients.size());
      std::vector<std::thread> workers;
      for (std::size_t i = 0; i < clients.size(); ++i) {
        workers.emplace_back([&, i] {
          next[i] = local_train(clients[i], lr, spec.train.local_epochs, spec.train.batch_size, opts[i]);
        });
      }
      for (auto& w : workers) w.join();
      clients = std::move(next);
    } else {
      for (std::size_t i = 0; i < clients.size(); ++i) {
        clients[i] = local_train(std::move(clients[i]), lr, spec.train.local_epochs, spec.train.batch_size, opts[i]);
      }
    }
    ctx.round = r;
    const auto bytes = aggregate(spec.strategy, clients, server, ctx);
    result.ledger.record(r + 1, spec.strategy.label(), bytes);
    const int done_rounds = r + 1;
    if (done_rounds % std::max(spec.eval_interval, 1) == 0 || done_rounds == rounds) {
      evaluate_clients(data, clients, done_rounds, result.records);
      result.eval_rounds.push_back(done_rounds);
    }
  }
  for (const auto& c : clients) result.final_params.push_back(c.params);
  return result;
}

// ---------------------------------------------------------------------------
// Summaries

struct TaskSummary {
  std::string metric_name;
  bool lower_is_better = true;
  MeanStd stats;  // across clients holding the task
};

using TaskTable = std::map<std::string, TaskSummary>;  // task key → summary

/// Mean ± std over clients of each task's metric at `round`, for one split.
inline TaskTable summarize(const std::vector<RoundRecord>& records, int round, EvalSplit split) {
  std::map<std::string, std::vector<double>> values;
  TaskTable table;
  for (const auto& r : records) {
    if (r.round != round || r.split != split) continue;
    values[r.task].push_back(r.value);
    auto& t = table[r.task];
    t.metric_name = r.metric_name;
    t.lower_is_better = r.lower_is_better;
  }
  for (auto& [task, v] : values) table[task].stats = mean_std(v);
  return table;
}

/// Δ% of `fed` against `target` with equal task weights. Throws
/// ArgumentError listing tasks missing on either side.
inline double table_delta(const TaskTable& fed, const TaskTable& target) {
  std::string missing;
  for (const auto& [task, _] : target) {
    if (!fed.count(task)) missing += (missing.empty() ? "" : ", ") + task;
  }
  for (const auto& [task, _] : fed) {
    if (!target.count(task)) missing += (missing.empty() ? "" : ", ") + task;
  }
  if (!missing.empty()) throw ArgumentError("task sets differ; missing on one side: " + missing);
  std::vector<TaskImprovement> items;
  for (const auto& [task, f] : fed) {
    items.push_back({task, f.stats.mean, target.at(task).stats.mean, f.lower_is_better, 1.0});
  }
  return delta_percent(items);
}

}  // namespace fmtl
