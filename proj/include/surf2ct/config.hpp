#pragma once

#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cascade.hpp"
#include "flow.hpp"
#include "json.hpp"
#include "nn.hpp"
#include "phantom.hpp"
#include "sampler.hpp"

namespace surf2ct {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StageTrainConfig {
  UNetConfig unet;
  AdamWConfig optimizer;
  FlowConfig flow;
  double ema_decay = 0.999;
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 1000;
};

struct RunConfig {
  std::uint64_t seed = 1234;
  std::size_t threads = 0;  // 0: available cores
  CohortConfig cohort;      // cohort.seed follows `seed`
  std::array<StageTrainConfig, 3> stages;
  SamplerConfig sampler;
  Extent3 patch{16, 16, 24}, stride{8, 8, 12};

  RunConfig() {
    for (std::size_t s = 0; s < 3; ++s) {
      stages[s].unet.in_channels = s == 2 ? kStage3Channels : kStage12Channels;
      stages[s].flow.total_steps = stages[s].optimizer.total_steps = 20000;
    }
  }

  const PhantomGrid& grid() const { return cohort.grid; }
  Extent3 coarse_extents() const {
    const auto& g = cohort.grid;
    return {g.nx / g.factor, g.ny / g.factor, g.nz / g.factor};
  }
  Extent3 high_extents() const { return {cohort.grid.nx, cohort.grid.ny, cohort.grid.nz}; }

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.sampler1 = p.sampler2 = p.sampler3 = sampler;
    p.factor = cohort.grid.factor;
    p.patch = patch;
    p.stride = stride;
    return p;
  }

  std::uint64_t stage_seed(int stage) const { return derive_seed(seed, "stage" + std::to_string(stage)); }

  void validate() const;
};

namespace config_detail {

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* b = v.data();
  const char* e = b + v.size();
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = static_cast<T>(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  } else {
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

// Shortest text that parses back to the same value.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Binding {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T, class Access>
Binding num(Access access) {
  return {[access](const RunConfig& c) {
            const T v = access(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return format_double(v);
            else return std::to_string(v);
          },
          [access](RunConfig& c, const std::string& v) { access(c) = parse_number<T>("", v); }};
}

// Ordered table of every key; defaults are printed from a default-constructed RunConfig.
inline const std::vector<std::pair<std::string, Binding>>& bindings() {
  static const auto table = [] {
    std::vector<std::pair<std::string, Binding>> t;
    t.emplace_back("run.seed", num<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    t.emplace_back("run.threads", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.threads; }));
    t.emplace_back("grid.nx", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.grid.nx; }));
    t.emplace_back("grid.ny", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.grid.ny; }));
    t.emplace_back("grid.nz", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.grid.nz; }));
    t.emplace_back("grid.spacing_mm", num<float>([](RunConfig& c) -> float& { return c.cohort.grid.spacing; }));
    t.emplace_back("grid.factor", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.grid.factor; }));
    t.emplace_back("cohort.n_train", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.n_train; }));
    t.emplace_back("cohort.n_test", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.cohort.n_test; }));
    t.emplace_back("cohort.male_fraction",
                   num<double>([](RunConfig& c) -> double& { return c.cohort.male_fraction; }));
    for (const char* sex : {"male", "female"}) {
      const bool m = std::string(sex) == "male";
      auto p = [m](RunConfig& c) -> SexParams& { return m ? c.cohort.male : c.cohort.female; };
      const std::string pre = std::string("cohort.") + sex + ".";
      t.emplace_back(pre + "age_mean", num<double>([p](RunConfig& c) -> double& { return p(c).age_mean; }));
      t.emplace_back(pre + "age_sd", num<double>([p](RunConfig& c) -> double& { return p(c).age_sd; }));
      t.emplace_back(pre + "height_mean", num<double>([p](RunConfig& c) -> double& { return p(c).height_mean; }));
      t.emplace_back(pre + "height_sd", num<double>([p](RunConfig& c) -> double& { return p(c).height_sd; }));
      t.emplace_back(pre + "weight_mean", num<double>([p](RunConfig& c) -> double& { return p(c).weight_mean; }));
      t.emplace_back(pre + "weight_sd", num<double>([p](RunConfig& c) -> double& { return p(c).weight_sd; }));
    }
    for (int s = 0; s < 3; ++s) {
      const std::string pre = "stage" + std::to_string(s + 1) + ".";
      auto st = [s](RunConfig& c) -> StageTrainConfig& { return c.stages[s]; };
      t.emplace_back(pre + "unet.base_channels",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).unet.base_channels; }));
      t.emplace_back(pre + "unet.levels",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).unet.levels; }));
      t.emplace_back(pre + "unet.groups",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).unet.groups; }));
      // Steps drive both the loop length and the learning-rate decay.
      t.emplace_back(pre + "train.steps",
                     Binding{[st](const RunConfig& c) { return std::to_string(st(const_cast<RunConfig&>(c)).flow.total_steps); },
                             [st](RunConfig& c, const std::string& v) {
                               st(c).flow.total_steps = st(c).optimizer.total_steps = parse_number<std::size_t>("", v);
                             }});
      t.emplace_back(pre + "train.batch_size",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).flow.batch_size; }));
      t.emplace_back(pre + "train.lr", num<double>([st](RunConfig& c) -> double& { return st(c).optimizer.lr; }));
      t.emplace_back(pre + "train.beta1", num<double>([st](RunConfig& c) -> double& { return st(c).optimizer.beta1; }));
      t.emplace_back(pre + "train.beta2", num<double>([st](RunConfig& c) -> double& { return st(c).optimizer.beta2; }));
      t.emplace_back(pre + "train.weight_decay",
                     num<double>([st](RunConfig& c) -> double& { return st(c).optimizer.weight_decay; }));
      t.emplace_back(pre + "train.clip_norm",
                     num<double>([st](RunConfig& c) -> double& { return st(c).optimizer.clip_norm; }));
      t.emplace_back(pre + "train.ema_decay", num<double>([st](RunConfig& c) -> double& { return st(c).ema_decay; }));
      t.emplace_back(pre + "train.log_every",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).log_every; }));
      t.emplace_back(pre + "train.checkpoint_every",
                     num<std::size_t>([st](RunConfig& c) -> std::size_t& { return st(c).checkpoint_every; }));
      t.emplace_back(pre + "train.alpha",
                     Binding{[st](const RunConfig& c) { return st(const_cast<RunConfig&>(c)).flow.alpha; },
                             [st](RunConfig& c, const std::string& v) { st(c).flow.alpha = v; }});
      t.emplace_back(pre + "train.time_sampling",
                     Binding{[st](const RunConfig& c) { return st(const_cast<RunConfig&>(c)).flow.time_sampling; },
                             [st](RunConfig& c, const std::string& v) { st(c).flow.time_sampling = v; }});
    }
    const char* axes[3] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
      t.emplace_back(std::string("stage3.patch_") + axes[a],
                     num<std::size_t>([a](RunConfig& c) -> std::size_t& { return c.patch[a]; }));
      t.emplace_back(std::string("stage3.stride_") + axes[a],
                     num<std::size_t>([a](RunConfig& c) -> std::size_t& { return c.stride[a]; }));
    }
    t.emplace_back("sampler.solver",
                   Binding{[](const RunConfig& c) { return std::string(solver_name(c.sampler.solver)); },
                           [](RunConfig& c, const std::string& v) { c.sampler.solver = parse_solver(v); }});
    t.emplace_back("sampler.steps", num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.sampler.steps; }));
    t.emplace_back("sampler.sigma_max", num<double>([](RunConfig& c) -> double& { return c.sampler.sigma_max; }));
    t.emplace_back("sampler.sigma_min", num<double>([](RunConfig& c) -> double& { return c.sampler.sigma_min; }));
    t.emplace_back("sampler.rho", num<double>([](RunConfig& c) -> double& { return c.sampler.rho; }));
    t.emplace_back("sampler.atol", num<double>([](RunConfig& c) -> double& { return c.sampler.atol; }));
    t.emplace_back("sampler.rtol", num<double>([](RunConfig& c) -> double& { return c.sampler.rtol; }));
    t.emplace_back("sampler.max_steps",
                   num<std::size_t>([](RunConfig& c) -> std::size_t& { return c.sampler.max_steps; }));
    return t;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace config_detail

// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, b] : config_detail::bindings())
    if (k == key) {
      try {
        b.set(c, value);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(key + ": " + e.what());
      }
      c.cohort.seed = c.seed;
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

// `key = value` lines; `[section]` headers prefix the keys that follow; `#` starts a comment.
inline RunConfig parse_config(std::istream& is, const std::string& source = "config") {
  RunConfig c;
  std::string line, section;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    auto where = [&] { return source + ":" + std::to_string(lineno) + ": "; };
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where() + "expected 'key = value'");
    std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where() + "empty key or value");
    if (!section.empty()) key = section + "." + key;
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where() + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_config(is, path);
}

inline std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& [k, b] : config_detail::bindings()) {
    const std::string s = k.substr(0, k.find('.'));
    if (s != section) {
      if (!section.empty()) os << "\n";
      os << "[" << s << "]\n";
      section = s;
    }
    os << k.substr(k.find('.') + 1) << " = " << b.get(c) << "\n";
  }
  return os.str();
}

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, b] : config_detail::bindings()) j[k] = b.get(c);
  return j;
}

inline void RunConfig::validate() const {
  try {
    cohort.grid.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cohort.n_train + cohort.n_test == 0) throw ConfigError("cohort: no subjects");
  if (!(cohort.male_fraction >= 0 && cohort.male_fraction <= 1)) throw ConfigError("cohort.male_fraction must be in [0, 1]");
  const Extent3 coarse = coarse_extents(), high = high_extents();
  for (int s = 0; s < 3; ++s) {
    const auto& st = stages[s];
    const std::string name = "stage" + std::to_string(s + 1);
    try {
      st.unet.validate();
      st.flow.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(name + ": " + e.what());
    }
    if (st.flow.batch_size == 0) throw ConfigError(name + ".train.batch_size must be >= 1");
    if (!(st.optimizer.lr > 0)) throw ConfigError(name + ".train.lr must be positive");
    if (!(st.ema_decay >= 0 && st.ema_decay < 1)) throw ConfigError(name + ".train.ema_decay must be in [0, 1)");
    if (st.log_every == 0) throw ConfigError(name + ".train.log_every must be >= 1");
    const std::size_t div = std::size_t{1} << st.unet.levels;
    const Extent3& ext = s == 2 ? patch : coarse;
    for (int a = 0; a < 3; ++a)
      if (ext[a] % div)
        throw ConfigError(name + ": " + (s == 2 ? "patch" : "coarse grid") + " extent " + std::to_string(ext[a]) +
                          " not divisible by 2^levels = " + std::to_string(div));
  }
  for (int a = 0; a < 3; ++a) {
    if (patch[a] == 0 || patch[a] > high[a]) throw ConfigError("stage3: patch must fit inside the high-resolution grid");
    if (stride[a] == 0 || stride[a] > patch[a]) throw ConfigError("stage3: stride must be in [1, patch]");
  }
  try {
    sampler.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
}

}  // namespace surf2ct
