#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rng.hpp"
#include "snapshot.hpp"
#include "tensor.hpp"

namespace surf2ct {

struct UNetConfig {
  std::size_t in_channels = 8;
  std::size_t base_channels = 32;
  std::size_t levels = 2;
  std::size_t groups = 4;
  std::size_t out_channels = 1;

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("unet: channel counts must be positive");
    if (levels < 1) throw std::invalid_argument("unet: levels must be >= 1");
    if (groups == 0 || base_channels % groups != 0)
      throw std::invalid_argument("unet: base_channels " + std::to_string(base_channels) +
                                  " not divisible by groups " + std::to_string(groups));
  }
  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t divisor() const { return std::size_t{1} << levels; }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"base_channels", c.base_channels},
       {"levels", c.levels},
       {"groups", c.groups},
       {"out_channels", c.out_channels}};
}

inline void from_json(const nlohmann::json& j, UNetConfig& c) {
  c.in_channels = j.at("in_channels");
  c.base_channels = j.at("base_channels");
  c.levels = j.at("levels");
  c.groups = j.at("groups");
  c.out_channels = j.at("out_channels");
}

// Named parameter list; order is the registration order and is part of the
// checkpoint layout.
template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Small 3D U-Net: per level two (conv3 -> GroupNorm -> SiLU) stages, stride-2 conv
// downsampling, a bottleneck, nearest-x2 + conv upsampling with skip concatenation,
// and a zero-initialized 1^3 output projection.
template <class T = float>
class UNet {
 public:
  UNet() = default;
  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 5) throw ShapeError("unet: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
    if (x.dim(1) != cfg_.in_channels)
      throw ShapeError("unet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                       shape_str(x.shape()));
    const std::size_t div = cfg_.divisor();
    for (std::size_t a = 2; a < 5; ++a)
      if (x.dim(a) % div != 0)
        throw ShapeError("unet: spatial extents of " + shape_str(x.shape()) + " must be divisible by " +
                         std::to_string(div));
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    std::size_t p = 0;
    for (std::size_t l = 0; l < cfg_.levels; ++l) {
      h = block(h, p);
      skips.push_back(h);
      h = conv(h, p, 2, 1);
    }
    h = block(h, p);
    for (std::size_t l = cfg_.levels; l-- > 0;) {
      h = conv(upsample_nearest(h, 2), p, 1, 1);
      h = concat_channels<T>({h, skips[l]});
      h = block(h, p);
    }
    return conv(h, p, 1, 0);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return forward(x); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Copies parameter values (not gradients) from another model of equal layout.
  void copy_values_from(const std::vector<Tensor<T>>& values) {
    if (values.size() != params_.size()) throw ShapeError("unet: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].shape() != params_[i].tensor.shape())
        throw ShapeError("unet: shape mismatch for " + params_[i].name);
      std::copy(values[i].data().begin(), values[i].data().end(), params_[i].tensor.data().begin());
    }
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

 private:
  // Forward consumes parameters in registration order.
  Tensor<T> conv(const Tensor<T>& x, std::size_t& p, std::size_t stride, std::size_t pad) const {
    const auto& w = params_[p++].tensor;
    const auto& b = params_[p++].tensor;
    return conv3d(x, w, b, stride, pad);
  }

  Tensor<T> conv_norm_act(const Tensor<T>& x, std::size_t& p) const {
    Tensor<T> h = conv(x, p, 1, 1);
    const auto& g = params_[p++].tensor;
    const auto& s = params_[p++].tensor;
    return silu(group_norm(h, cfg_.groups, g, s, T(1e-5)));
  }

  Tensor<T> block(const Tensor<T>& x, std::size_t& p) const {
    Tensor<T> h = conv_norm_act(x, p);
    return conv_norm_act(h, p);
  }

  void add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
                bool zero = false) {
    Tensor<T> w(Shape{cout, cin, k, k, k});
    if (!zero) {
      const double sd = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
      std::normal_distribution<double> nd(0.0, sd);
      for (auto& v : w.data()) v = static_cast<T>(nd(rng));
    }
    params_.push_back({name + ".weight", w.set_requires_grad(true)});
    params_.push_back({name + ".bias", Tensor<T>(Shape{cout}).set_requires_grad(true)});
  }

  void add_norm(const std::string& name, std::size_t c) {
    params_.push_back({name + ".gain", Tensor<T>(Shape{c}, T{1}).set_requires_grad(true)});
    params_.push_back({name + ".shift", Tensor<T>(Shape{c}).set_requires_grad(true)});
  }

  void add_block(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
    add_conv(name + ".conv0", cin, cout, 3, rng);
    add_norm(name + ".norm0", cout);
    add_conv(name + ".conv1", cout, cout, 3, rng);
    add_norm(name + ".norm1", cout);
  }

  void build(std::uint64_t seed) {
    Rng rng = make_rng(seed, "unet.init");
    params_.clear();
    std::size_t cin = cfg_.in_channels;
    for (std::size_t l = 0; l < cfg_.levels; ++l) {
      const std::size_t c = cfg_.channels_at(l);
      add_block("enc" + std::to_string(l), cin, c, rng);
      add_conv("down" + std::to_string(l), c, cfg_.channels_at(l + 1), 3, rng);
      cin = cfg_.channels_at(l + 1);
    }
    add_block("mid", cin, cin, rng);
    for (std::size_t l = cfg_.levels; l-- > 0;) {
      const std::size_t c = cfg_.channels_at(l);
      add_conv("up" + std::to_string(l), cfg_.channels_at(l + 1), c, 3, rng);
      add_block("dec" + std::to_string(l), 2 * c, c, rng);
    }
    add_conv("out", cfg_.channels_at(0), cfg_.out_channels, 1, rng, /*zero=*/true);
  }

  UNetConfig cfg_;
  std::vector<NamedParam<T>> params_;
};

// Returns the global L2 norm of all gradients before clipping; rescales them so the
// post-clip norm is at most max_norm (no-op when max_norm <= 0).
template <class T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params)
    for (T g : p.tensor.grad_buffer()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.tensor.grad_buffer()) g *= s;
  }
  return norm;
}

struct AdamWConfig {
  double lr = 1e-4;
  std::size_t total_steps = 10000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr},           {"total_steps", c.total_steps},   {"beta1", c.beta1},
       {"beta2", c.beta2},     {"eps", c.eps},                   {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm}, {"schedule", "linear"}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.lr = j.at("lr");
  c.total_steps = j.at("total_steps");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.weight_decay = j.at("weight_decay");
  c.clip_norm = j.at("clip_norm");
}

struct StepResult {
  bool accepted = false;
  double grad_norm = 0;  // before clipping
  double lr = 0;
};

// AdamW with decoupled weight decay, global-norm clipping and a linear learning-rate
// decay to zero over total_steps.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<NamedParam<T>>& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.shape());
      v_.emplace_back(p.tensor.shape());
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }

  double lr_at(std::size_t s) const {
    if (cfg_.total_steps == 0) return 0.0;
    const double frac = 1.0 - static_cast<double>(s) / static_cast<double>(cfg_.total_steps);
    return cfg_.lr * std::max(0.0, frac);
  }

  // Rejects the step (nothing modified) if any gradient is non-finite.
  StepResult step(std::vector<NamedParam<T>>& params) {
    if (params.size() != m_.size()) throw ShapeError("adamw: parameter count mismatch");
    StepResult r;
    r.lr = lr_at(step_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].tensor.shape() != m_[i].shape())
        throw ShapeError("adamw: moment shape mismatch for " + params[i].name);
      const auto g = params[i].tensor.grad_buffer();
      if (!all_finite<T>(g)) {
        r.grad_norm = std::nan("");
        return r;
      }
    }
    r.grad_norm = clip_grad_norm(params, cfg_.clip_norm);
    const double t = static_cast<double>(step_ + 1);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    const double lr = r.lr;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    const T step_scale = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      T* p = params[i].tensor.ptr();
      const T* g = params[i].tensor.grad_buffer().data();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      const std::size_t n = params[i].tensor.numel();
      for (std::size_t k = 0; k < n; ++k) {
        m[k] = b1 * m[k] + (T{1} - b1) * g[k];
        v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
        p[k] *= decay;
        p[k] -= step_scale * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
      }
    }
    ++step_;
    r.accepted = true;
    return r;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t step_ = 0;
};

// Exponential moving average of parameter values: shadow <- d*shadow + (1-d)*live.
template <class T>
class Ema {
 public:
  Ema() = default;
  Ema(const std::vector<NamedParam<T>>& params, double decay) : decay_(decay) {
    for (const auto& p : params) shadow_.push_back(p.tensor.clone());
  }

  double decay() const { return decay_; }
  std::vector<Tensor<T>>& shadow() { return shadow_; }
  const std::vector<Tensor<T>>& shadow() const { return shadow_; }

  void update(const std::vector<NamedParam<T>>& params) {
    if (params.size() != shadow_.size()) throw ShapeError("ema: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].tensor.shape() != shadow_[i].shape())
        throw ShapeError("ema: shape mismatch for " + params[i].name);
    const T d = static_cast<T>(decay_);
    const T one_minus = static_cast<T>(1.0 - decay_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      T* s = shadow_[i].ptr();
      const T* p = params[i].tensor.ptr();
      for (std::size_t k = 0; k < shadow_[i].numel(); ++k) s[k] = d * s[k] + one_minus * p[k];
    }
  }

 private:
  double decay_ = 0.999;
  std::vector<Tensor<T>> shadow_;
};

// Checkpoint file: "S2CK", u32 version, u64 header length, JSON header, u32 snapshot
// count, tensor snapshots (live/, ema/, adam_m/, adam_v/ prefixes).
struct Checkpoint {
  nlohmann::json header;
  std::vector<Snapshot<float>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& s : tensors)
      if (s.name == name) return &s.tensor;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[4] = {'S', '2', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  io::put_bytes(os, kCheckpointMagic, 4);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = ck.header.dump();
  io::put<std::uint64_t>(os, header.size());
  io::put_bytes(os, header.data(), header.size());
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& s : ck.tensors) write_snapshot(os, s.name, s.tensor);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  io::get_bytes(is, magic, 4);
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint file");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = io::get<std::uint64_t>(is);
  if (len > (1ull << 30)) throw FormatError("checkpoint header too large");
  std::string header(len, '\0');
  io::get_bytes(is, header.data(), len);
  Checkpoint ck;
  ck.header = nlohmann::json::parse(header);
  const auto n = io::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) ck.tensors.push_back(read_snapshot<float>(is));
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(os, ck);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

// Training state bundle persisted at checkpoints.
struct TrainState {
  UNet<float> model;
  AdamW<float> optimizer;
  Ema<float> ema;
  std::uint64_t seed = 0;

  TrainState() = default;
  TrainState(UNetConfig cfg, AdamWConfig opt, double ema_decay, std::uint64_t seed_)
      : model(cfg, seed_), optimizer(model.parameters(), opt), ema(model.parameters(), ema_decay), seed(seed_) {}

  // Fresh parameter storage: copying a UNet would alias the live tensors.
  UNet<float> ema_model() const {
    UNet<float> out(model.config(), seed);
    out.copy_values_from(ema.shadow());
    return out;
  }
};

inline Checkpoint make_checkpoint(TrainState& st, nlohmann::json extra) {
  Checkpoint ck;
  auto& h = ck.header;
  h["format"] = "surf2ct-checkpoint";
  h["unet"] = st.model.config();
  h["step"] = st.optimizer.step_count();
  h["optimizer"] = st.optimizer.config();
  h["ema_decay"] = st.ema.decay();
  h["seed"] = st.seed;
  h["meta"] = std::move(extra);
  auto& params = st.model.parameters();
  auto& opt = st.optimizer;
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.push_back({"live/" + params[i].name, params[i].tensor});
  for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.push_back({"ema/" + params[i].name, st.ema.shadow()[i]});
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.tensors.push_back({"adam_m/" + params[i].name, opt.first_moments()[i]});
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.tensors.push_back({"adam_v/" + params[i].name, opt.second_moments()[i]});
  return ck;
}

inline TrainState restore_train_state(const Checkpoint& ck) {
  const auto& h = ck.header;
  TrainState st(h.at("unet").get<UNetConfig>(), h.at("optimizer").get<AdamWConfig>(),
                h.at("ema_decay").get<double>(), h.at("seed").get<std::uint64_t>());
  auto& params = st.model.parameters();
  auto fetch = [&](const std::string& prefix, std::size_t i) -> const Tensor<float>& {
    const Tensor<float>* t = ck.find(prefix + params[i].name);
    if (!t) throw FormatError("checkpoint missing tensor " + prefix + params[i].name);
    if (t->shape() != params[i].tensor.shape())
      throw FormatError("checkpoint tensor " + prefix + params[i].name + " has shape " + shape_str(t->shape()));
    return *t;
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto copy_into = [](const Tensor<float>& src, Tensor<float>& dst) {
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    };
    copy_into(fetch("live/", i), params[i].tensor);
    copy_into(fetch("ema/", i), st.ema.shadow()[i]);
    copy_into(fetch("adam_m/", i), st.optimizer.first_moments()[i]);
    copy_into(fetch("adam_v/", i), st.optimizer.second_moments()[i]);
  }
  st.optimizer.set_step_count(h.at("step").get<std::size_t>());
  return st;
}

// EMA weights only, for sampling.
inline UNet<float> ema_model_from(const Checkpoint& ck) {
  const auto& h = ck.header;
  UNet<float> m(h.at("unet").get<UNetConfig>(), h.at("seed").get<std::uint64_t>());
  std::vector<Tensor<float>> values;
  for (const auto& p : m.parameters()) {
    const Tensor<float>* t = ck.find("ema/" + p.name);
    if (!t) throw FormatError("checkpoint missing tensor ema/" + p.name);
    values.push_back(*t);
  }
  m.copy_values_from(values);
  return m;
}

}  // namespace surf2ct
