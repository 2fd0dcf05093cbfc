#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "flow.hpp"
#include "json.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace surf2ct {

enum class SolverKind { euler, heun, dopri5 };

inline const char* solver_name(SolverKind k) {
  switch (k) {
    case SolverKind::euler: return "euler";
    case SolverKind::heun: return "heun";
    case SolverKind::dopri5: return "dopri5";
  }
  return "unknown";
}

inline SolverKind parse_solver(const std::string& s) {
  if (s == "euler") return SolverKind::euler;
  if (s == "heun") return SolverKind::heun;
  if (s == "dopri5") return SolverKind::dopri5;
  throw std::invalid_argument("unknown solver '" + s + "' (expected euler, heun or dopri5)");
}

struct SamplerConfig {
  SolverKind solver = SolverKind::dopri5;
  std::size_t steps = 200;
  double sigma_max = 80.0;
  double sigma_min = 0.002;
  double rho = 7.0;
  double atol = 1e-5;
  double rtol = 1e-5;
  std::size_t max_steps = 100000;

  void validate() const {
    if (!(sigma_max > sigma_min && sigma_min > 0)) throw std::invalid_argument("sampler: need sigma_max > sigma_min > 0");
    if (steps < 2) throw std::invalid_argument("sampler: steps must be >= 2");
    if (!(atol > 0 && rtol > 0)) throw std::invalid_argument("sampler: tolerances must be positive");
    if (!(rho > 0)) throw std::invalid_argument("sampler: rho must be positive");
    if (max_steps < 1) throw std::invalid_argument("sampler: max_steps must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"solver", solver_name(c.solver)}, {"steps", c.steps}, {"sigma_max", c.sigma_max}, {"sigma_min", c.sigma_min},
       {"rho", c.rho},   {"atol", c.atol},   {"rtol", c.rtol},   {"max_steps", c.max_steps}};
}
inline void from_json(const nlohmann::json& j, SamplerConfig& c) {
  c.solver = parse_solver(j.at("solver"));
  c.steps = j.at("steps");
  c.sigma_max = j.at("sigma_max");
  c.sigma_min = j.at("sigma_min");
  c.rho = j.at("rho");
  c.atol = j.at("atol");
  c.rtol = j.at("rtol");
  c.max_steps = j.at("max_steps");
}

// sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho; the
// endpoints are assigned directly so they are exact.
inline std::vector<double> sigma_schedule(const SamplerConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.steps;
  const double a = std::pow(cfg.sigma_max, 1.0 / cfg.rho), b = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = std::pow(a + static_cast<double>(i) / (n - 1) * (b - a), cfg.rho);
  s.front() = cfg.sigma_max;
  s.back() = cfg.sigma_min;
  return s;
}

inline double time_of_sigma(double sigma) { return 1.0 / (1.0 + sigma); }

// 0, 1/(1+sigma_i)..., 1; strictly increasing.
inline std::vector<double> time_grid(const SamplerConfig& cfg) {
  std::vector<double> g{0.0};
  for (double s : sigma_schedule(cfg)) {
    const double t = time_of_sigma(s);
    if (t > g.back() && t < 1.0) g.push_back(t);
  }
  g.push_back(1.0);
  return g;
}

struct SolverStats {
  std::size_t nfe = 0, accepted = 0, rejected = 0;
  double min_dt = std::numeric_limits<double>::infinity();
  double max_dt = 0;

  void note_step(double dt) {
    ++accepted;
    min_dt = std::min(min_dt, dt);
    max_dt = std::max(max_dt, dt);
  }
  nlohmann::json to_json() const {
    return {{"nfe", nfe}, {"accepted", accepted}, {"rejected", rejected}, {"min_dt", min_dt}, {"max_dt", max_dt}};
  }
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
using VelocityField = std::function<void(double t, const std::vector<T>& x, std::vector<T>& dx)>;

namespace detail {

template <class T>
void require_finite_state(const std::vector<T>& x, double t, std::size_t step) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]))
      throw SolverError("non-finite state at t=" + std::to_string(t) + " (step " + std::to_string(step) + ", element " +
                        std::to_string(i) + ")");
}

// Dormand-Prince 5(4) tableau.
struct Dopri {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // b - b*, the embedded error weights.
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

// Integrates dx/dt = v(t, x) over the grid. Fixed-step solvers step exactly on the
// nodes; dopri5 adapts its step and lands on every node.
template <class T>
std::vector<T> integrate(const VelocityField<T>& v, std::vector<T> x, const std::vector<double>& grid,
                         const SamplerConfig& cfg, SolverStats* stats_out = nullptr) {
  cfg.validate();
  if (grid.size() < 2) throw std::invalid_argument("integrate: grid needs at least two nodes");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw std::invalid_argument("integrate: grid must be strictly increasing");
  detail::require_finite_state(x, grid.front(), 0);
  SolverStats st;
  const std::size_t n = x.size();
  std::vector<T> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), y5(n);
  auto eval = [&](double t, const std::vector<T>& s, std::vector<T>& out) {
    v(t, s, out);
    ++st.nfe;
  };
  auto axpy = [&](std::vector<T>& out, std::initializer_list<std::pair<double, const std::vector<T>*>> terms, double h) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      for (const auto& [c, k] : terms) acc += c * static_cast<double>((*k)[i]);
      out[i] = static_cast<T>(static_cast<double>(x[i]) + h * acc);
    }
  };

  if (cfg.solver == SolverKind::euler || cfg.solver == SolverKind::heun) {
    for (std::size_t s = 0; s + 1 < grid.size(); ++s) {
      const double t = grid[s], h = grid[s + 1] - t;
      eval(t, x, k1);
      if (cfg.solver == SolverKind::euler) {
        axpy(x, {{1.0, &k1}}, h);
      } else {
        axpy(tmp, {{1.0, &k1}}, h);
        eval(grid[s + 1], tmp, k2);
        axpy(x, {{0.5, &k1}, {0.5, &k2}}, h);
      }
      st.note_step(h);
      detail::require_finite_state(x, grid[s + 1], s + 1);
    }
  } else {
    using D = detail::Dopri;
    constexpr double kSafety = 0.9, kAlpha = 0.7 / 5, kBeta = 0.4 / 5, kMinFac = 0.2, kMaxFac = 10.0;
    double t = grid.front();
    double h = grid[1] - grid[0];
    double err_prev = 1e-4;
    std::size_t node = 1, attempts = 0;
    eval(t, x, k1);
    while (node < grid.size()) {
      if (++attempts > cfg.max_steps)
        throw SolverError("dopri5: step budget of " + std::to_string(cfg.max_steps) + " exceeded at t=" + std::to_string(t));
      const double target = grid[node];
      bool hits_node = t + h >= target * (1 - 1e-12);
      const double step = hits_node ? target - t : h;
      axpy(tmp, {{D::a21, &k1}}, step);
      eval(t + D::c2 * step, tmp, k2);
      axpy(tmp, {{D::a31, &k1}, {D::a32, &k2}}, step);
      eval(t + D::c3 * step, tmp, k3);
      axpy(tmp, {{D::a41, &k1}, {D::a42, &k2}, {D::a43, &k3}}, step);
      eval(t + D::c4 * step, tmp, k4);
      axpy(tmp, {{D::a51, &k1}, {D::a52, &k2}, {D::a53, &k3}, {D::a54, &k4}}, step);
      eval(t + D::c5 * step, tmp, k5);
      axpy(tmp, {{D::a61, &k1}, {D::a62, &k2}, {D::a63, &k3}, {D::a64, &k4}, {D::a65, &k5}}, step);
      eval(t + step, tmp, k6);
      axpy(y5, {{D::b1, &k1}, {D::b3, &k3}, {D::b4, &k4}, {D::b5, &k5}, {D::b6, &k6}}, step);
      const double t_new = hits_node ? target : t + step;
      eval(t_new, y5, k7);
      double sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = step * (D::e1 * k1[i] + D::e3 * k3[i] + D::e4 * k4[i] + D::e5 * k5[i] + D::e6 * k6[i] +
                                 D::e7 * k7[i]);
        const double scale = cfg.atol + cfg.rtol * std::max(std::fabs(double(x[i])), std::fabs(double(y5[i])));
        sq += (e / scale) * (e / scale);
      }
      const double err = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
      if (!std::isfinite(err)) throw SolverError("dopri5: non-finite error estimate at t=" + std::to_string(t));
      if (err <= 1.0) {
        const double e = std::max(err, 1e-10);
        const double fac = std::clamp(kSafety * std::pow(e, -kAlpha) * std::pow(err_prev, kBeta), kMinFac, kMaxFac);
        err_prev = e;
        st.note_step(step);
        x.swap(y5);
        k1.swap(k7);  // first-same-as-last
        t = t_new;
        detail::require_finite_state(x, t, st.accepted);
        if (hits_node) ++node;
        // A step shortened to land on a node does not shrink the proposal.
        h *= fac;
      } else {
        ++st.rejected;
        h = step * std::max(kMinFac, kSafety * std::pow(err, -1.0 / 5));
      }
    }
  }
  if (stats_out) *stats_out = st;
  return x;
}

// Generative sampling with a velocity network. `condition` is [C, ...] for a single
// subject or patch; the noise comes from the named stream of `seed`.
template <class Model>
Tensor<float> sample(const Model& model, const Tensor<float>& condition, std::uint64_t seed, std::string_view stream,
                     std::initializer_list<std::uint64_t> keys, const SamplerConfig& cfg, SolverStats* stats = nullptr) {
  if (condition.rank() < 2) throw ShapeError("sample: condition must be [C, ...]");
  Shape state_shape{1, 1}, cond_shape{1};
  for (std::size_t d = 1; d < condition.rank(); ++d) state_shape.push_back(condition.dim(d));
  cond_shape.insert(cond_shape.end(), condition.shape().begin(), condition.shape().end());
  const Tensor<float> cond(cond_shape, condition.storage());
  if constexpr (requires { model.config().in_channels; }) {
    if (condition.dim(0) + 3 != model.config().in_channels)
      throw ShapeError("sample: model expects " + std::to_string(model.config().in_channels) +
                       " input channels, conditioning gives " + std::to_string(condition.dim(0) + 3));
  }
  Rng rng = make_rng(seed, stream, keys);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> x0(shape_numel(state_shape));
  for (auto& v : x0) v = nd(rng);
  VelocityField<float> field = [&](double t, const std::vector<float>& x, std::vector<float>& dx) {
    const Tensor<float> state(state_shape, x);
    const Tensor<float> out = model(assemble_input(state, cond, {t}));
    if (out.shape() != state_shape) throw ShapeError("sample: model output shape " + shape_str(out.shape()));
    dx.assign(out.data().begin(), out.data().end());
  };
  return Tensor<float>(state_shape, integrate(field, std::move(x0), time_grid(cfg), cfg, stats));
}

}  // namespace surf2ct
