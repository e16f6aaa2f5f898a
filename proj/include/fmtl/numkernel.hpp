#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fmtl/error.hpp"
#include "fmtl/rng.hpp"

namespace fmtl {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const Segment&) const = default;
};

inline constexpr const char* kEncoderSegment = "encoder";
inline constexpr const char* kSharedDecoderSegment = "decoder:shared";

inline std::string decoder_segment(std::string_view task) { return "decoder:" + std::string(task); }
inline std::string taskcond_segment(std::string_view task) { return "taskcond:" + std::string(task); }

/// Ordered, contiguous, non-overlapping segments covering [0, size()).
class Layout {
 public:
  Layout() = default;

  /// Builds a layout from (name, length) pairs laid out back to back.
  static Layout from_lengths(const std::vector<std::pair<std::string, std::size_t>>& parts) {
    Layout layout;
    for (const auto& [name, length] : parts) layout.append(name, length);
    return layout;
  }

  void append(std::string name, std::size_t length) {
    for (const auto& s : segments_) {
      if (s.name == name) throw ShapeError("duplicate segment name '" + name + "'");
    }
    segments_.push_back(Segment{std::move(name), size_, length});
    size_ += length;
  }

  std::size_t size() const noexcept { return size_; }
  const std::vector<Segment>& segments() const noexcept { return segments_; }

  const Segment* find(std::string_view name) const noexcept {
    for (const auto& s : segments_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  const Segment& at(std::string_view name) const {
    if (const auto* s = find(name)) return *s;
    throw ShapeError("layout has no segment '" + std::string(name) + "'");
  }

  /// Identical (name, length) sequences.
  bool compatible_with(const Layout& other) const noexcept {
    if (segments_.size() != other.segments_.size()) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (segments_[i].name != other.segments_[i].name ||
          segments_[i].length != other.segments_[i].length) {
        return false;
      }
    }
    return true;
  }

  std::string describe() const {
    std::string out = "[";
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (i) out += ", ";
      out += segments_[i].name + ":" + std::to_string(segments_[i].length);
    }
    return out + "]";
  }

  bool operator==(const Layout&) const = default;

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

/// Flat parameter vector with a named-segment layout. Houses encoder
/// (shared part u) and decoder/task-condition segments (personal part v_k).
class SegmentedParams {
 public:
  SegmentedParams() = default;
  explicit SegmentedParams(Layout layout)
      : layout_(std::move(layout)), values_(layout_.size(), 0.0) {}
  SegmentedParams(Layout layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_.size()) {
      throw ShapeError("value count " + std::to_string(values_.size()) +
                       " does not match layout size " + std::to_string(layout_.size()));
    }
  }

  const Layout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& raw() noexcept { return values_; }
  const std::vector<double>& raw() const noexcept { return values_; }

  std::span<double> segment(std::string_view name) {
    const auto& s = layout_.at(name);
    return std::span<double>(values_).subspan(s.offset, s.length);
  }
  std::span<const double> segment(std::string_view name) const {
    const auto& s = layout_.at(name);
    return std::span<const double>(values_).subspan(s.offset, s.length);
  }

  bool has_segment(std::string_view name) const noexcept { return layout_.find(name) != nullptr; }

  /// Sub-vector holding only the named segment, with a one-segment layout.
  SegmentedParams extract(std::string_view name) const {
    auto view = segment(name);
    Layout l;
    l.append(std::string(name), view.size());
    return SegmentedParams(std::move(l), std::vector<double>(view.begin(), view.end()));
  }

  void assign_segment(std::string_view name, std::span<const double> src) {
    auto dst = segment(name);
    if (dst.size() != src.size()) {
      throw ShapeError("segment '" + std::string(name) + "' length " + std::to_string(dst.size()) +
                       " != source length " + std::to_string(src.size()));
    }
    std::copy(src.begin(), src.end(), dst.begin());
  }

  bool operator==(const SegmentedParams&) const = default;

 private:
  Layout layout_;
  std::vector<double> values_;
};

inline void require_compatible(const Layout& a, const Layout& b) {
  if (!a.compatible_with(b)) {
    throw LayoutMismatch("incompatible layouts " + a.describe() + " vs " + b.describe());
  }
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  AdamWConfig config;
  std::size_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;

  AdamWState() = default;
  AdamWState(std::size_t n, AdamWConfig cfg)
      : config(cfg), first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One decoupled-weight-decay Adam step, in place. Decay is applied first
/// (θ ← θ − lr·wd·θ), then the bias-corrected Adam update. Coordinates
/// flagged false in `mask` (if given) are left untouched, moments included.
inline void adamw_step(std::span<double> params, std::span<const double> grads,
                       AdamWState& state, double lr,
                       const std::vector<bool>* mask = nullptr) {
  if (grads.size() != params.size()) {
    throw ShapeError("adamw_step: gradient length " + std::to_string(grads.size()) +
                     " != parameter length " + std::to_string(params.size()));
  }
  if (!(lr >= 0.0)) throw ArgumentError("adamw_step: learning rate must be >= 0");
  if (state.first_moment.empty() && state.step_count == 0) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state length does not match parameters");
  }
  const auto& c = state.config;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask != nullptr && !(*mask)[i]) continue;
    params[i] -= decay * params[i];
    const double g = grads[i];
    state.first_moment[i] = c.beta1 * state.first_moment[i] + (1.0 - c.beta1) * g;
    state.second_moment[i] = c.beta2 * state.second_moment[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.first_moment[i] / bc1;
    const double v_hat = state.second_moment[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

/// Value-returning form.
inline SegmentedParams adamw_step(const SegmentedParams& params, std::span<const double> grads,
                                  AdamWState& state, double lr) {
  SegmentedParams out = params;
  adamw_step(out.values(), grads, state, lr);
  return out;
}

/// Linear warmup over the first `warmup_rounds` rounds, then half-cosine
/// decay to zero at `total_rounds`.
inline double cosine_warmup_lr(int round, int total_rounds, double base_lr, int warmup_rounds) {
  if (total_rounds <= 0 || round < 0 || round >= total_rounds) {
    throw ArgumentError("cosine_warmup_lr: round " + std::to_string(round) + " outside [0, " +
                        std::to_string(total_rounds) + ")");
  }
  if (warmup_rounds < 0 || warmup_rounds >= total_rounds) {
    throw ArgumentError("cosine_warmup_lr: warmup_rounds must be in [0, total_rounds)");
  }
  if (round < warmup_rounds) {
    return base_lr * static_cast<double>(round + 1) / static_cast<double>(warmup_rounds);
  }
  const double progress = static_cast<double>(round - warmup_rounds) /
                          static_cast<double>(total_rounds - warmup_rounds);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Σ w_k θ_k over compatible layouts, summed in list (ascending client id)
/// order. Evaluated as s·θ_0 + Σ_k w_k (θ_k − θ_0) with s = Σ w so that a
/// common fixed point survives bit-exactly when the weights sum to one.
inline SegmentedParams weighted_sum(std::span<const SegmentedParams* const> params_list,
                                    std::span<const double> weights) {
  if (params_list.empty()) throw ArgumentError("weighted_sum: empty input");
  if (params_list.size() != weights.size()) {
    throw ArgumentError("weighted_sum: " + std::to_string(params_list.size()) + " vectors but " +
                        std::to_string(weights.size()) + " weights");
  }
  const SegmentedParams& first = *params_list[0];
  for (std::size_t k = 1; k < params_list.size(); ++k) {
    require_compatible(first.layout(), params_list[k]->layout());
  }
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) <= 8.0 * std::numeric_limits<double>::epsilon()) total = 1.0;

  SegmentedParams out = first;
  auto dst = out.values();
  const auto base = first.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    double acc = total == 1.0 ? base[i] : total * base[i];
    for (std::size_t k = 1; k < params_list.size(); ++k) {
      acc += weights[k] * (params_list[k]->values()[i] - base[i]);
    }
    dst[i] = acc;
  }
  return out;
}

inline SegmentedParams weighted_sum(const std::vector<SegmentedParams>& params_list,
                                    std::span<const double> weights) {
  std::vector<const SegmentedParams*> ptrs;
  ptrs.reserve(params_list.size());
  for (const auto& p : params_list) ptrs.push_back(&p);
  return weighted_sum(std::span<const SegmentedParams* const>(ptrs), weights);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace fmtl
