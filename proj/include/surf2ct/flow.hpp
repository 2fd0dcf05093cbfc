#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nn.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace surf2ct {

struct FlowConfig {
  std::string alpha = "linear";
  std::string time_sampling = "uniform";
  std::size_t batch_size = 16;
  std::size_t total_steps = 20000;

  void validate() const {
    if (alpha != "linear") throw std::invalid_argument("flow: unknown alpha schedule '" + alpha + "'");
    if (time_sampling != "uniform") throw std::invalid_argument("flow: unknown time sampling '" + time_sampling + "'");
    if (batch_size < 1) throw std::invalid_argument("flow: batch_size must be >= 1");
    if (total_steps < 1) throw std::invalid_argument("flow: total_steps must be >= 1");
  }
  double alpha_at(double t) const { return t; }
};

inline void to_json(nlohmann::json& j, const FlowConfig& c) {
  j = {{"alpha", c.alpha}, {"time_sampling", c.time_sampling}, {"batch_size", c.batch_size}, {"total_steps", c.total_steps}};
}
inline void from_json(const nlohmann::json& j, FlowConfig& c) {
  c.alpha = j.at("alpha");
  c.time_sampling = j.at("time_sampling");
  c.batch_size = j.at("batch_size");
  c.total_steps = j.at("total_steps");
}

namespace detail {
template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
inline void require_unit_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("time " + std::to_string(t) + " outside [0,1]");
}
}  // namespace detail

// x_t = (1 - a) eta + a x1 with a = alpha(t). Endpoints return exact copies.
template <class T>
Tensor<T> interpolate(const Tensor<T>& x1, const Tensor<T>& eta, double t, const FlowConfig& cfg = {}) {
  detail::require_same_shape(x1, eta, "interpolate");
  detail::require_unit_time(t);
  if (t == 0.0) return eta.clone();
  if (t == 1.0) return x1.clone();
  const T a = static_cast<T>(cfg.alpha_at(t)), b = T{1} - a;
  Tensor<T> out(x1.shape());
  const T* p1 = x1.ptr();
  const T* pe = eta.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = b * pe[i] + a * p1[i];
  return out;
}

// Per-sample times along the leading (batch) axis.
template <class T>
Tensor<T> interpolate_batch(const Tensor<T>& x1, const Tensor<T>& eta, const std::vector<double>& t,
                            const FlowConfig& cfg = {}) {
  detail::require_same_shape(x1, eta, "interpolate_batch");
  if (x1.rank() < 1 || x1.dim(0) != t.size()) throw ShapeError("interpolate_batch: need one time per sample");
  const std::size_t per = x1.numel() / t.size();
  Tensor<T> out(x1.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    detail::require_unit_time(t[b]);
    const T* p1 = x1.ptr() + b * per;
    const T* pe = eta.ptr() + b * per;
    T* po = out.ptr() + b * per;
    if (t[b] == 0.0) {
      std::copy(pe, pe + per, po);
    } else if (t[b] == 1.0) {
      std::copy(p1, p1 + per, po);
    } else {
      const T a = static_cast<T>(cfg.alpha_at(t[b])), c = T{1} - a;
      for (std::size_t i = 0; i < per; ++i) po[i] = c * pe[i] + a * p1[i];
    }
  }
  return out;
}

template <class T>
Tensor<T> target_velocity(const Tensor<T>& x1, const Tensor<T>& eta) {
  detail::require_same_shape(x1, eta, "target_velocity");
  Tensor<T> out(x1.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = x1.ptr()[i] - eta.ptr()[i];
  return out;
}

// Network input [B, 1 + C + 2, ...]: state, static conditioning channels, then
// sin(2 pi t) and cos(2 pi t).
template <class T>
Tensor<T> assemble_input(const Tensor<T>& x_t, const Tensor<T>& condition, const std::vector<double>& t) {
  if (x_t.rank() < 2 || x_t.dim(1) != 1) throw ShapeError("assemble_input: state must be [B, 1, ...]");
  if (condition.rank() != x_t.rank() || condition.dim(0) != x_t.dim(0))
    throw ShapeError("assemble_input: condition " + shape_str(condition.shape()) + " does not match state " +
                     shape_str(x_t.shape()));
  for (std::size_t d = 2; d < x_t.rank(); ++d)
    if (condition.dim(d) != x_t.dim(d)) throw ShapeError("assemble_input: spatial extents differ");
  const std::size_t B = x_t.dim(0), C = condition.dim(1), vox = x_t.numel() / B;
  if (t.size() != B) throw ShapeError("assemble_input: need one time per sample");
  Shape shape = x_t.shape();
  shape[1] = 1 + C + 2;
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < B; ++b) {
    T* dst = out.ptr() + b * shape[1] * vox;
    std::copy_n(x_t.ptr() + b * vox, vox, dst);
    std::copy_n(condition.ptr() + b * C * vox, C * vox, dst + vox);
    const double ang = 2.0 * M_PI * t[b];
    std::fill_n(dst + (1 + C) * vox, vox, static_cast<T>(std::sin(ang)));
    std::fill_n(dst + (2 + C) * vox, vox, static_cast<T>(std::cos(ang)));
  }
  return out;
}

template <class T>
struct TrainingBatch {
  Tensor<T> x1;         // [B, 1, ...]
  Tensor<T> eta;        // [B, 1, ...]
  Tensor<T> condition;  // [B, C, ...]
  std::vector<double> t;
};

// Mean over voxels of (v(x_t) - (x1 - eta))^2.
template <class T, class Model>
Tensor<T> fm_loss(const Model& model, const TrainingBatch<T>& batch, const FlowConfig& cfg = {}) {
  if constexpr (requires { model.config().in_channels; }) {
    const std::size_t need = model.config().in_channels;
    if (batch.condition.rank() < 2 || batch.condition.dim(1) + 3 != need)
      throw ShapeError("fm_loss: model expects " + std::to_string(need) + " input channels, batch provides " +
                       std::to_string(batch.condition.rank() < 2 ? 0 : batch.condition.dim(1) + 3));
  }
  const Tensor<T> x_t = interpolate_batch(batch.x1, batch.eta, batch.t, cfg);
  const Tensor<T> pred = model(assemble_input(x_t, batch.condition, batch.t));
  return mse_loss(pred, target_velocity(batch.x1, batch.eta));
}

// ---- training loop ------------------------------------------------------------------

// One training example: target [1, ...] and static conditioning [C, ...] sharing the
// spatial extents.
struct StageExample {
  Tensor<float> target;
  Tensor<float> condition;
};

// Draws an example using only the supplied stream.
using ExampleProvider = std::function<StageExample(Rng&)>;

// Per-sample streams are keyed by (seed, step, sample), so assembly order and thread
// count do not change the batch.
inline TrainingBatch<float> make_batch(const ExampleProvider& provider, std::uint64_t seed, std::size_t step,
                                       std::size_t batch_size) {
  std::vector<StageExample> ex(batch_size);
  std::vector<double> t(batch_size);
  std::vector<std::vector<float>> noise(batch_size);
  parallel_for(batch_size, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      Rng rng = make_rng(seed, "train.sample", {step, b});
      ex[b] = provider(rng);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      t[b] = u(rng);
      std::normal_distribution<float> n(0.0f, 1.0f);
      noise[b].resize(ex[b].target.numel());
      for (auto& v : noise[b]) v = n(rng);
    }
  });
  const Shape& ts = ex[0].target.shape();
  const Shape& cs = ex[0].condition.shape();
  for (const auto& e : ex)
    if (e.target.shape() != ts || e.condition.shape() != cs) throw ShapeError("make_batch: examples differ in shape");
  Shape bt{batch_size}, bc{batch_size};
  bt.insert(bt.end(), ts.begin(), ts.end());
  bc.insert(bc.end(), cs.begin(), cs.end());
  TrainingBatch<float> batch{Tensor<float>(bt), Tensor<float>(bt), Tensor<float>(bc), t};
  const std::size_t nt = ex[0].target.numel(), nc = ex[0].condition.numel();
  for (std::size_t b = 0; b < batch_size; ++b) {
    std::copy_n(ex[b].target.ptr(), nt, batch.x1.ptr() + b * nt);
    std::copy_n(noise[b].data(), nt, batch.eta.ptr() + b * nt);
    std::copy_n(ex[b].condition.ptr(), nc, batch.condition.ptr() + b * nc);
  }
  return batch;
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossRow {
  std::size_t step;
  double lr, loss, grad_norm, wall_ms;
};

inline constexpr const char* kLossCsvHeader = "step,lr,loss,grad_norm,wall_ms";

inline void write_loss_row(std::ostream& os, const LossRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.3f\n", r.step, r.lr, r.loss, r.grad_norm, r.wall_ms);
  os << buf;
}

struct TrainStageOptions {
  FlowConfig flow;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::string checkpoint_path;       // empty: no checkpoint files
  nlohmann::json meta = nlohmann::json::object();
  std::size_t stop_after = 0;  // stop once this step count is reached (0: run to total_steps)
  std::function<void(const LossRow&)> on_log;
};

struct TrainOutcome {
  std::vector<LossRow> curve;
  std::size_t rejected_steps = 0;
  std::size_t final_step = 0;
};

inline void save_checkpoint_atomic(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, ck);
  std::filesystem::rename(tmp, path);
}

// Continues from the optimizer's step count, so a restored state resumes exactly.
inline TrainOutcome train_stage(TrainState& st, const ExampleProvider& provider, const TrainStageOptions& opt) {
  opt.flow.validate();
  TrainOutcome out;
  nlohmann::json meta = opt.meta;
  meta["flow"] = opt.flow;
  const std::size_t end = opt.stop_after ? std::min(opt.stop_after, opt.flow.total_steps) : opt.flow.total_steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = st.optimizer.step_count(); step < end; ++step) {
    TrainingBatch<float> batch = make_batch(provider, st.seed, step, opt.flow.batch_size);
    st.model.zero_grad();
    Tape<float> tape;
    double loss_value;
    {
      Recording<float> rec(tape);
      Tensor<float> loss = fm_loss(st.model, batch, opt.flow);
      loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw TrainingError("non-finite loss at step " + std::to_string(step + 1) + "; last checkpoint kept");
      tape.backward(loss);
    }
    const StepResult res = st.optimizer.step(st.model.parameters());
    if (res.accepted) {
      st.ema.update(st.model.parameters());
    } else {
      // Parameters untouched; keep the schedule (and resume point) advancing.
      ++out.rejected_steps;
      st.optimizer.set_step_count(step + 1);
    }
    const std::size_t done = step + 1;
    if (done == 1 || done % opt.log_every == 0 || done == end) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      LossRow row{done, res.lr, loss_value, res.grad_norm, ms};
      out.curve.push_back(row);
      if (opt.on_log) opt.on_log(row);
    }
    if (!opt.checkpoint_path.empty() && opt.checkpoint_every && done % opt.checkpoint_every == 0 && done != end)
      save_checkpoint_atomic(opt.checkpoint_path, make_checkpoint(st, meta));
  }
  out.final_step = st.optimizer.step_count();
  if (!opt.checkpoint_path.empty()) save_checkpoint_atomic(opt.checkpoint_path, make_checkpoint(st, meta));
  return out;
}

}  // namespace surf2ct
