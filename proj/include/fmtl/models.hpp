#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fmtl/error.hpp"
#include "fmtl/mtlopt.hpp"
#include "fmtl/numkernel.hpp"
#include "fmtl/rng.hpp"
#include "fmtl/synthdata.hpp"

namespace fmtl {

enum class ArchKind { MD, TC };

inline std::string_view arch_name(ArchKind a) { return a == ArchKind::MD ? "MD" : "TC"; }

inline ArchKind parse_arch(std::string_view s) {
  if (s == "MD" || s == "md") return ArchKind::MD;
  if (s == "TC" || s == "tc") return ArchKind::TC;
  throw ConfigError("unknown architecture '" + std::string(s) + "' (expected MD or TC)");
}

// Topology.
inline constexpr std::size_t kEncHidden = 64;
inline constexpr std::size_t kEncOut = 32;
inline constexpr std::size_t kMdHidden = 32;
inline constexpr std::size_t kTcEmbed = 8;
inline constexpr std::size_t kTcHidden = 32;
inline constexpr std::size_t kTcOut = 16;
/// Output width of the single-task MD ("SD") decoder: wide enough for any
/// task; a task reads its first output_dim units.
inline constexpr std::size_t kSdOutputs = 8;

inline constexpr double kEdgePositiveWeight = 0.8;
inline constexpr double kEdgeNegativeWeight = 0.2;

constexpr std::size_t dense_count(std::size_t in, std::size_t out) { return in * out + out; }

inline std::size_t encoder_count() { return dense_count(kInputDim, kEncHidden) + dense_count(kEncHidden, kEncOut); }
inline std::size_t md_decoder_count(std::size_t out) { return dense_count(kEncOut, kMdHidden) + dense_count(kMdHidden, out); }
inline std::size_t sd_decoder_count() { return md_decoder_count(kSdOutputs); }
inline std::size_t tc_shared_count() {
  return dense_count(kEncOut + kTcEmbed, kTcHidden) + dense_count(kTcHidden, kTcOut);
}
inline std::size_t tc_taskcond_count(std::size_t out) { return kTcEmbed + dense_count(kTcOut, out); }

/// A single-task MD client uses the SD form (encoder + one shared-shape decoder).
inline bool uses_single_decoder(ArchKind arch, std::span<const TaskKind> tasks) {
  return arch == ArchKind::MD && tasks.size() == 1;
}

inline Layout make_layout(ArchKind arch, std::span<const TaskKind> tasks) {
  if (tasks.empty()) throw ConfigError("model needs at least one task");
  Layout layout;
  layout.append(kEncoderSegment, encoder_count());
  if (arch == ArchKind::MD) {
    if (uses_single_decoder(arch, tasks)) {
      layout.append(kSharedDecoderSegment, sd_decoder_count());
    } else {
      for (auto t : tasks) layout.append(decoder_segment(task_name(t)), md_decoder_count(task_info(t).output_dim));
    }
  } else {
    layout.append(kSharedDecoderSegment, tc_shared_count());
    for (auto t : tasks) layout.append(taskcond_segment(task_name(t)), tc_taskcond_count(task_info(t).output_dim));
  }
  return layout;
}

namespace detail {

inline void init_dense(std::span<double> seg, std::size_t offset, std::size_t in, std::size_t out, RngStream& rng) {
  const double scale = std::sqrt(2.0 / static_cast<double>(in));
  for (std::size_t i = 0; i < in * out; ++i) seg[offset + i] = scale * rng.normal();
  for (std::size_t i = 0; i < out; ++i) seg[offset + in * out + i] = 0.0;
}

}  // namespace detail

/// Kaiming (fan-in) normal weights, zero biases, N(0,1) task embeddings.
/// Segments are drawn from per-segment forks of `rng`, so the encoder and
/// shared decoder are identical across clients built from the same stream
/// regardless of their task sets.
inline SegmentedParams init_params(ArchKind arch, std::span<const TaskKind> tasks, const RngStream& rng) {
  SegmentedParams p(make_layout(arch, tasks));
  {
    auto r = rng.fork(kEncoderSegment);
    auto seg = p.segment(kEncoderSegment);
    detail::init_dense(seg, 0, kInputDim, kEncHidden, r);
    detail::init_dense(seg, dense_count(kInputDim, kEncHidden), kEncHidden, kEncOut, r);
  }
  if (arch == ArchKind::MD) {
    if (uses_single_decoder(arch, tasks)) {
      auto r = rng.fork(std::string("decoder:sd"));
      auto seg = p.segment(kSharedDecoderSegment);
      detail::init_dense(seg, 0, kEncOut, kMdHidden, r);
      detail::init_dense(seg, dense_count(kEncOut, kMdHidden), kMdHidden, kSdOutputs, r);
    } else {
      for (auto t : tasks) {
        const auto name = decoder_segment(task_name(t));
        auto r = rng.fork(name);
        auto seg = p.segment(name);
        detail::init_dense(seg, 0, kEncOut, kMdHidden, r);
        detail::init_dense(seg, dense_count(kEncOut, kMdHidden), kMdHidden, task_info(t).output_dim, r);
      }
    }
  } else {
    {
      auto r = rng.fork(kSharedDecoderSegment);
      auto seg = p.segment(kSharedDecoderSegment);
      detail::init_dense(seg, 0, kEncOut + kTcEmbed, kTcHidden, r);
      detail::init_dense(seg, dense_count(kEncOut + kTcEmbed, kTcHidden), kTcHidden, kTcOut, r);
    }
    for (auto t : tasks) {
      const auto name = taskcond_segment(task_name(t));
      auto r = rng.fork(name);
      auto seg = p.segment(name);
      for (std::size_t i = 0; i < kTcEmbed; ++i) seg[i] = r.normal();
      detail::init_dense(seg, kTcEmbed, kTcOut, task_info(t).output_dim, r);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Losses

inline void check_dims(TaskKind kind, std::span<const double> pred, std::span<const double> label) {
  const auto& info = task_info(kind);
  if (pred.size() != info.output_dim || label.size() != info.label_dim) {
    throw ShapeError("task " + std::string(info.name) + ": prediction/label widths " + std::to_string(pred.size()) +
                     "/" + std::to_string(label.size()) + ", expected " + std::to_string(info.output_dim) + "/" +
                     std::to_string(info.label_dim));
  }
}

inline double log_sigmoid(double s) { return s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s)); }
inline double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

inline std::size_t class_index(TaskKind kind, double label) {
  const auto c = static_cast<long long>(std::llround(label));
  if (c < 0 || static_cast<std::size_t>(c) >= task_info(kind).output_dim) {
    throw ShapeError("class label " + std::to_string(label) + " out of range for " + std::string(task_name(kind)));
  }
  return static_cast<std::size_t>(c);
}

/// Per-sample training loss. Writes d loss / d prediction into `grad` when
/// non-empty (same width as `pred`).
///   depth_like   L1
///   edge_like    BCE on a logit, weights 0.8 (positive) / 0.2 (negative)
///   normals_like 1 − cos(pred, label)
///   semseg/parts cross-entropy over class logits
inline double task_loss(TaskKind kind, std::span<const double> pred, std::span<const double> label,
                        std::span<double> grad = {}) {
  check_dims(kind, pred, label);
  const bool want_grad = !grad.empty();
  switch (kind) {
    case TaskKind::depth_like: {
      const double d = pred[0] - label[0];
      if (want_grad) grad[0] = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      return std::abs(d);
    }
    case TaskKind::edge_like: {
      const double y = label[0];
      const double s = pred[0];
      if (want_grad) {
        const double p = sigmoid(s);
        grad[0] = -kEdgePositiveWeight * y * (1.0 - p) + kEdgeNegativeWeight * (1.0 - y) * p;
      }
      return -(kEdgePositiveWeight * y * log_sigmoid(s) + kEdgeNegativeWeight * (1.0 - y) * log_sigmoid(-s));
    }
    case TaskKind::normals_like: {
      double pp = 0.0, py = 0.0, yy = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        pp += pred[i] * pred[i];
        py += pred[i] * label[i];
        yy += label[i] * label[i];
      }
      const double pn = std::sqrt(std::max(pp, 1e-24));
      const double yn = std::sqrt(std::max(yy, 1e-24));
      const double cosv = py / (pn * yn);
      if (want_grad) {
        for (std::size_t i = 0; i < 3; ++i) {
          grad[i] = -(label[i] / (pn * yn) - cosv * pred[i] / (pn * pn));
        }
      }
      return 1.0 - cosv;
    }
    case TaskKind::semseg_like:
    case TaskKind::parts_like: {
      const std::size_t c = class_index(kind, label[0]);
      const double mx = *std::max_element(pred.begin(), pred.end());
      double z = 0.0;
      for (double v : pred) z += std::exp(v - mx);
      const double lse = mx + std::log(z);
      if (want_grad) {
        for (std::size_t i = 0; i < pred.size(); ++i) grad[i] = std::exp(pred[i] - lse) - (i == c ? 1.0 : 0.0);
      }
      return lse - pred[c];
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct Batch {
  std::vector<const Sample*> samples;
  std::vector<TaskKind> tasks;  // tasks whose labels are used
};

struct LossAndGrad {
  std::vector<double> task_losses;  // aligned with Batch::tasks
  double combined = 0.0;
  std::vector<double> grad;         // d combined / d params
};

namespace detail {

// y = W x + b with W row-major [out][in]; optional ReLU.
inline void dense_fwd(const double* w, std::size_t in, std::size_t out, const double* x, double* y, bool relu) {
  const double* b = w + in * out;
  for (std::size_t o = 0; o < out; ++o) {
    double a = b[o];
    const double* row = w + o * in;
    for (std::size_t i = 0; i < in; ++i) a += row[i] * x[i];
    y[o] = relu && a < 0.0 ? 0.0 : a;
  }
}

// Accumulates dW, db; writes dx (if non-null). dy must already be masked by
// the activation derivative.
inline void dense_bwd(const double* w, std::size_t in, std::size_t out, const double* x, const double* dy,
                      double* dw, double* dx) {
  double* db = dw + in * out;
  if (dx != nullptr) std::fill(dx, dx + in, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    db[o] += g;
    const double* row = w + o * in;
    double* drow = dw + o * in;
    for (std::size_t i = 0; i < in; ++i) {
      drow[i] += g * x[i];
      if (dx != nullptr) dx[i] += g * row[i];
    }
  }
}

inline void relu_mask(const double* act, double* grad, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (act[i] <= 0.0) grad[i] = 0.0;
  }
}

struct EncoderCache {
  std::array<double, kEncHidden> h1{};
  std::array<double, kEncOut> z{};
};

inline void encoder_fwd(std::span<const double> enc, const Sample& s, EncoderCache& c) {
  dense_fwd(enc.data(), kInputDim, kEncHidden, s.x.data(), c.h1.data(), true);
  dense_fwd(enc.data() + dense_count(kInputDim, kEncHidden), kEncHidden, kEncOut, c.h1.data(), c.z.data(), true);
}

inline void encoder_bwd(std::span<const double> enc, std::span<double> denc, const Sample& s, const EncoderCache& c,
                        std::array<double, kEncOut> dz) {
  relu_mask(c.z.data(), dz.data(), kEncOut);
  std::array<double, kEncHidden> dh1{};
  const std::size_t off2 = dense_count(kInputDim, kEncHidden);
  dense_bwd(enc.data() + off2, kEncHidden, kEncOut, c.h1.data(), dz.data(), denc.data() + off2, dh1.data());
  relu_mask(c.h1.data(), dh1.data(), kEncHidden);
  dense_bwd(enc.data(), kInputDim, kEncHidden, s.x.data(), dh1.data(), denc.data(), nullptr);
}

inline std::span<const double> segment_of(const SegmentedParams& p, const std::string& name, TaskKind t) {
  if (!p.has_segment(name)) {
    throw TaskMismatch("task " + std::string(task_name(t)) + " has no segment '" + name + "' in layout " +
                       p.layout().describe());
  }
  return p.segment(name);
}

inline void check_batch(const Batch& batch, std::span<const double> q) {
  if (batch.tasks.empty()) throw TaskMismatch("batch has no tasks");
  if (q.size() != batch.tasks.size()) throw ArgumentError("task weight count does not match batch tasks");
  if (batch.samples.empty()) throw ArgumentError("empty batch");
}

}  // namespace detail

/// MD: one encoder pass per sample, every task decoder on top of it.
/// SD (single-task MD) routes the task through decoder:shared.
inline LossAndGrad forward_backward_md(const SegmentedParams& params, const Batch& batch, std::span<const double> q) {
  using namespace detail;
  check_batch(batch, q);
  const bool sd = params.has_segment(kSharedDecoderSegment);
  if (sd && batch.tasks.size() != 1) throw TaskMismatch("single-decoder MD layout serves exactly one task");

  const auto enc = params.segment(kEncoderSegment);
  std::vector<std::span<const double>> decs;
  std::vector<std::size_t> dec_offsets, outs, widths;
  for (auto t : batch.tasks) {
    const std::string name = sd ? std::string(kSharedDecoderSegment) : decoder_segment(task_name(t));
    decs.push_back(segment_of(params, name, t));
    dec_offsets.push_back(params.layout().at(name).offset);
    outs.push_back(sd ? kSdOutputs : task_info(t).output_dim);
    widths.push_back(task_info(t).output_dim);
  }

  double qs = 0.0;
  for (double v : q) qs += v;
  if (!(qs > 0.0)) throw ArgumentError("task weights sum to zero");

  LossAndGrad r;
  r.task_losses.assign(batch.tasks.size(), 0.0);
  r.grad.assign(params.size(), 0.0);
  std::span<double> g(r.grad);
  auto genc = g.subspan(params.layout().at(kEncoderSegment).offset, enc.size());
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());

  EncoderCache ec;
  std::array<double, kMdHidden> d1{}, dd1{};
  std::array<double, kSdOutputs> out{}, dout{};
  for (const Sample* s : batch.samples) {
    encoder_fwd(enc, *s, ec);
    std::array<double, kEncOut> dz{};
    for (std::size_t ti = 0; ti < batch.tasks.size(); ++ti) {
      const auto t = batch.tasks[ti];
      const auto& dec = decs[ti];
      dense_fwd(dec.data(), kEncOut, kMdHidden, ec.z.data(), d1.data(), true);
      const std::size_t off2 = dense_count(kEncOut, kMdHidden);
      dense_fwd(dec.data() + off2, kMdHidden, outs[ti], d1.data(), out.data(), false);
      std::fill(dout.begin(), dout.end(), 0.0);
      const double loss = task_loss(t, std::span<const double>(out.data(), widths[ti]), s->label(t),
                                    std::span<double>(dout.data(), widths[ti]));
      r.task_losses[ti] += loss * inv_b;
      const double scale = q[ti] / qs * inv_b;
      if (scale == 0.0) continue;
      for (std::size_t o = 0; o < outs[ti]; ++o) dout[o] *= scale;
      auto gdec = g.subspan(dec_offsets[ti], dec.size());
      dense_bwd(dec.data() + off2, kMdHidden, outs[ti], d1.data(), dout.data(), gdec.data() + off2, dd1.data());
      relu_mask(d1.data(), dd1.data(), kMdHidden);
      std::array<double, kEncOut> dzt{};
      dense_bwd(dec.data(), kEncOut, kMdHidden, ec.z.data(), dd1.data(), gdec.data(), dzt.data());
      for (std::size_t i = 0; i < kEncOut; ++i) dz[i] += dzt[i];
    }
    encoder_bwd(enc, genc, *s, ec, dz);
  }
  r.combined = combine_losses(r.task_losses, q);
  return r;
}

/// TC: one shared-decoder pass per task, conditioned by concatenating the
/// task embedding to the encoder output; per-task readout on top.
inline LossAndGrad forward_backward_tc(const SegmentedParams& params, const Batch& batch, std::span<const double> q) {
  using namespace detail;
  check_batch(batch, q);
  if (!params.has_segment(kSharedDecoderSegment)) throw TaskMismatch("TC layout requires decoder:shared");
  const auto enc = params.segment(kEncoderSegment);
  const auto shared = params.segment(kSharedDecoderSegment);
  const std::size_t shared_off = params.layout().at(kSharedDecoderSegment).offset;

  std::vector<std::span<const double>> conds;
  std::vector<std::size_t> cond_offsets;
  for (auto t : batch.tasks) {
    const auto name = taskcond_segment(task_name(t));
    conds.push_back(segment_of(params, name, t));
    cond_offsets.push_back(params.layout().at(name).offset);
  }
  double qs = 0.0;
  for (double v : q) qs += v;
  if (!(qs > 0.0)) throw ArgumentError("task weights sum to zero");

  LossAndGrad r;
  r.task_losses.assign(batch.tasks.size(), 0.0);
  r.grad.assign(params.size(), 0.0);
  std::span<double> g(r.grad);
  auto genc = g.subspan(params.layout().at(kEncoderSegment).offset, enc.size());
  auto gshared = g.subspan(shared_off, shared.size());
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());
  const std::size_t off_s2 = dense_count(kEncOut + kTcEmbed, kTcHidden);

  EncoderCache ec;
  std::array<double, kEncOut + kTcEmbed> in{}, din{};
  std::array<double, kTcHidden> s1{}, ds1{};
  std::array<double, kTcOut> s2{}, ds2{};
  std::array<double, 8> out{}, dout{};
  for (const Sample* s : batch.samples) {
    encoder_fwd(enc, *s, ec);
    std::array<double, kEncOut> dz{};
    std::copy(ec.z.begin(), ec.z.end(), in.begin());
    for (std::size_t ti = 0; ti < batch.tasks.size(); ++ti) {
      const auto t = batch.tasks[ti];
      const std::size_t od = task_info(t).output_dim;
      const auto& cond = conds[ti];
      std::copy(cond.begin(), cond.begin() + kTcEmbed, in.begin() + kEncOut);
      dense_fwd(shared.data(), kEncOut + kTcEmbed, kTcHidden, in.data(), s1.data(), true);
      dense_fwd(shared.data() + off_s2, kTcHidden, kTcOut, s1.data(), s2.data(), true);
      dense_fwd(cond.data() + kTcEmbed, kTcOut, od, s2.data(), out.data(), false);
      std::fill(dout.begin(), dout.end(), 0.0);
      const double loss = task_loss(t, std::span<const double>(out.data(), od), s->label(t),
                                    std::span<double>(dout.data(), od));
      r.task_losses[ti] += loss * inv_b;
      const double scale = q[ti] / qs * inv_b;
      if (scale == 0.0) continue;
      for (std::size_t o = 0; o < od; ++o) dout[o] *= scale;
      auto gcond = g.subspan(cond_offsets[ti], cond.size());
      dense_bwd(cond.data() + kTcEmbed, kTcOut, od, s2.data(), dout.data(), gcond.data() + kTcEmbed, ds2.data());
      relu_mask(s2.data(), ds2.data(), kTcOut);
      dense_bwd(shared.data() + off_s2, kTcHidden, kTcOut, s1.data(), ds2.data(), gshared.data() + off_s2,
                ds1.data());
      relu_mask(s1.data(), ds1.data(), kTcHidden);
      dense_bwd(shared.data(), kEncOut + kTcEmbed, kTcHidden, in.data(), ds1.data(), gshared.data(), din.data());
      for (std::size_t i = 0; i < kEncOut; ++i) dz[i] += din[i];
      for (std::size_t i = 0; i < kTcEmbed; ++i) gcond[i] += din[kEncOut + i];
    }
    encoder_bwd(enc, genc, *s, ec, dz);
  }
  r.combined = combine_losses(r.task_losses, q);
  return r;
}

inline LossAndGrad forward_backward(ArchKind arch, const SegmentedParams& params, const Batch& batch,
                                    std::span<const double> q) {
  return arch == ArchKind::MD ? forward_backward_md(params, batch, q) : forward_backward_tc(params, batch, q);
}

/// Network output for one task on one input (logits for class tasks).
inline std::vector<double> predict(ArchKind arch, const SegmentedParams& params, const Sample& s, TaskKind t) {
  using namespace detail;
  const auto enc = params.segment(kEncoderSegment);
  EncoderCache ec;
  encoder_fwd(enc, s, ec);
  const std::size_t od = task_info(t).output_dim;
  std::vector<double> out(od);
  if (arch == ArchKind::MD) {
    const bool sd = params.has_segment(kSharedDecoderSegment);
    const std::string name = sd ? std::string(kSharedDecoderSegment) : decoder_segment(task_name(t));
    const auto dec = segment_of(params, name, t);
    const std::size_t width = sd ? kSdOutputs : od;
    std::array<double, kMdHidden> d1{};
    std::array<double, kSdOutputs> full{};
    dense_fwd(dec.data(), kEncOut, kMdHidden, ec.z.data(), d1.data(), true);
    dense_fwd(dec.data() + dense_count(kEncOut, kMdHidden), kMdHidden, width, d1.data(), full.data(), false);
    std::copy(full.begin(), full.begin() + od, out.begin());
  } else {
    const auto shared = params.segment(kSharedDecoderSegment);
    const auto cond = segment_of(params, taskcond_segment(task_name(t)), t);
    std::array<double, kEncOut + kTcEmbed> in{};
    std::copy(ec.z.begin(), ec.z.end(), in.begin());
    std::copy(cond.begin(), cond.begin() + kTcEmbed, in.begin() + kEncOut);
    std::array<double, kTcHidden> s1{};
    std::array<double, kTcOut> s2{};
    dense_fwd(shared.data(), kEncOut + kTcEmbed, kTcHidden, in.data(), s1.data(), true);
    dense_fwd(shared.data() + dense_count(kEncOut + kTcEmbed, kTcHidden), kTcHidden, kTcOut, s1.data(), s2.data(),
              true);
    dense_fwd(cond.data() + kTcEmbed, kTcOut, od, s2.data(), out.data(), false);
  }
  return out;
}

struct ParamReport {
  std::vector<std::pair<std::string, std::size_t>> segments;
  std::size_t encoder = 0;
  std::size_t total = 0;
  double encoder_fraction = 0.0;
};

inline ParamReport param_report(ArchKind arch, std::span<const TaskKind> tasks) {
  const auto layout = make_layout(arch, tasks);
  ParamReport r;
  for (const auto& s : layout.segments()) r.segments.emplace_back(s.name, s.length);
  r.encoder = layout.at(kEncoderSegment).length;
  r.total = layout.size();
  r.encoder_fraction = static_cast<double>(r.encoder) / static_cast<double>(r.total);
  return r;
}

}  // namespace fmtl
