#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "flow.hpp"
#include "geometry.hpp"
#include "json.hpp"
#include "nn.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "sampler.hpp"

namespace surf2ct {

inline constexpr std::size_t kDemoChannels = 4;
inline constexpr std::size_t kPosChannels = 12;
inline constexpr std::size_t kTimeChannels = 2;

// Network input channel counts: state + condition + demographics (+ position) + time.
inline constexpr std::size_t kStage12Channels = 1 + 1 + kDemoChannels + kTimeChannels;
inline constexpr std::size_t kStage3Channels = 1 + 1 + kDemoChannels + kPosChannels + kTimeChannels;

// Channel order written into checkpoints so a mismatched model is detectable.
inline nlohmann::json channel_layout(int stage) {
  nlohmann::json j = {"x_t", stage == 1 ? "sdf_partial" : stage == 2 ? "sdf_full" : "coarse_upsampled",
                      "age", "sex", "height", "weight"};
  if (stage == 3)
    for (const char* a : {"x", "y", "z"})
      for (int k = 0; k < 2; ++k) {
        j.push_back(std::string("sin_") + a + std::to_string(k));
        j.push_back(std::string("cos_") + a + std::to_string(k));
      }
  j.push_back("sin_2pi_t");
  j.push_back("cos_2pi_t");
  return j;
}

// ---- demographics -----------------------------------------------------------------

struct DemoStats {
  std::array<double, 4> mean{}, sd{1, 1, 1, 1};

  std::array<float, 4> zscore(const Demographics& d) const {
    const auto a = d.as_array();
    std::array<float, 4> z;
    for (int i = 0; i < 4; ++i) z[i] = static_cast<float>((a[i] - mean[i]) / sd[i]);
    return z;
  }
};

inline void to_json(nlohmann::json& j, const DemoStats& s) { j = {{"mean", s.mean}, {"sd", s.sd}}; }
inline void from_json(const nlohmann::json& j, DemoStats& s) {
  s.mean = j.at("mean");
  s.sd = j.at("sd");
}

// Sample statistics; a degenerate column keeps sd 1 so z-scores stay finite.
inline DemoStats compute_demo_stats(const std::vector<Demographics>& demos) {
  if (demos.empty()) throw std::invalid_argument("demographic statistics need at least one subject");
  DemoStats s;
  const double n = static_cast<double>(demos.size());
  for (const auto& d : demos)
    for (int i = 0; i < 4; ++i) s.mean[i] += d.as_array()[i] / n;
  for (int i = 0; i < 4; ++i) {
    double v = 0;
    for (const auto& d : demos) v += (d.as_array()[i] - s.mean[i]) * (d.as_array()[i] - s.mean[i]);
    const double sd = demos.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0;
    s.sd[i] = sd > 0 ? sd : 1.0;
  }
  return s;
}

// ---- tensors and volumes ------------------------------------------------------------

using Extent3 = std::array<std::size_t, 3>;  // x, y, z

inline Extent3 extents_of(const Volume3& v) { return {v.nx, v.ny, v.nz}; }

// Volume3 (x fastest) maps onto [.., z, y, x] without reordering.
inline Tensor<float> to_tensor(const Volume3& v) { return Tensor<float>({1, v.nz, v.ny, v.nx}, v.values); }

inline Volume3 from_tensor(const Tensor<float>& t, const Volume3& like) {
  if (t.numel() != like.size()) throw ShapeError("tensor of " + shape_str(t.shape()) + " does not fit the grid");
  Volume3 out = Volume3::like(like);
  std::copy(t.data().begin(), t.data().end(), out.values.begin());
  return out;
}

// Copies the box [o, o + e) of v into channel `c` of a [C, ez, ey, ex] tensor.
inline void write_crop(const Volume3& v, const Extent3& o, const Extent3& e, Tensor<float>& dst, std::size_t c) {
  float* out = dst.ptr() + c * e[0] * e[1] * e[2];
  for (std::size_t k = 0; k < e[2]; ++k)
    for (std::size_t j = 0; j < e[1]; ++j) {
      const float* src = &v.values[v.index(o[0], o[1] + j, o[2] + k)];
      std::copy_n(src, e[0], out + (k * e[1] + j) * e[0]);
    }
}

inline void fill_channel(Tensor<float>& dst, std::size_t c, float value) {
  const std::size_t vox = dst.numel() / dst.dim(0);
  std::fill_n(dst.ptr() + c * vox, vox, value);
}

// Trilinear upsampling with cell-centre alignment; samples beyond the outer
// centres clamp to the edge.
inline Volume3 upsample_trilinear(const Volume3& v, std::size_t f) {
  if (f < 1) throw GridError("upsample: factor must be >= 1");
  if (f == 1) return v;
  Volume3 out(v.nx * f, v.ny * f, v.nz * f, v.spacing / static_cast<float>(f), v.origin);
  struct Tap {
    std::size_t i0, i1;
    double w;
  };
  auto taps = [&](std::size_t n_in, std::size_t n_out) {
    std::vector<Tap> t(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) / static_cast<double>(f) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, n_in - 1);
      t[i] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto tx = taps(v.nx, out.nx), ty = taps(v.ny, out.ny), tz = taps(v.nz, out.nz);
  parallel_for(out.nz, [&](std::size_t k0, std::size_t k1) {
    for (std::size_t k = k0; k < k1; ++k)
      for (std::size_t j = 0; j < out.ny; ++j)
        for (std::size_t i = 0; i < out.nx; ++i) {
          const Tap &a = tx[i], &b = ty[j], &c = tz[k];
          auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return static_cast<double>(v.at(x, y, z)); };
          const double c00 = at(a.i0, b.i0, c.i0) * (1 - a.w) + at(a.i1, b.i0, c.i0) * a.w;
          const double c10 = at(a.i0, b.i1, c.i0) * (1 - a.w) + at(a.i1, b.i1, c.i0) * a.w;
          const double c01 = at(a.i0, b.i0, c.i1) * (1 - a.w) + at(a.i1, b.i0, c.i1) * a.w;
          const double c11 = at(a.i0, b.i1, c.i1) * (1 - a.w) + at(a.i1, b.i1, c.i1) * a.w;
          const double c0 = c00 * (1 - b.w) + c10 * b.w, c1 = c01 * (1 - b.w) + c11 * b.w;
          out.at(i, j, k) = static_cast<float>(c0 * (1 - c.w) + c1 * c.w);
        }
  });
  return out;
}

// ---- positional encoding and patches -------------------------------------------------

// Per axis (x, y, z) and k in {0, 1}: sin(2 pi 2^k c), cos(2 pi 2^k c), with c the
// voxel's global index divided by (n - 1).
inline Tensor<float> positional_encoding(const Extent3& origin, const Extent3& patch, const Extent3& grid) {
  for (int a = 0; a < 3; ++a)
    if (origin[a] + patch[a] > grid[a]) throw GridError("positional encoding: patch outside the grid");
  Tensor<float> out({kPosChannels, patch[2], patch[1], patch[0]});
  const std::size_t vox = patch[0] * patch[1] * patch[2];
  for (int a = 0; a < 3; ++a)
    for (int k = 0; k < 2; ++k) {
      float* s = out.ptr() + (a * 4 + k * 2) * vox;
      float* c = s + vox;
      for (std::size_t z = 0; z < patch[2]; ++z)
        for (std::size_t y = 0; y < patch[1]; ++y)
          for (std::size_t x = 0; x < patch[0]; ++x) {
            const std::size_t local[3] = {x, y, z};
            const std::size_t g = origin[a] + local[a];
            const double coord = grid[a] > 1 ? static_cast<double>(g) / static_cast<double>(grid[a] - 1) : 0.0;
            const double ang = 2.0 * M_PI * std::ldexp(1.0, k) * coord;
            const std::size_t idx = (z * patch[1] + y) * patch[0] + x;
            s[idx] = static_cast<float>(std::sin(ang));
            c[idx] = static_cast<float>(std::cos(ang));
          }
    }
  return out;
}

struct PatchLayout {
  Extent3 grid{}, patch{}, stride{};
  std::vector<Extent3> origins;  // z-major, then y, then x
};

// Origins step by `stride`; the last one per axis is shifted inward to end at the
// grid edge.
inline PatchLayout make_patch_layout(const Extent3& grid, const Extent3& patch, const Extent3& stride) {
  PatchLayout L{grid, patch, stride, {}};
  std::array<std::vector<std::size_t>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 1 || patch[a] > grid[a]) throw GridError("patch layout: patch extent must be in [1, grid]");
    if (stride[a] < 1 || stride[a] > patch[a]) throw GridError("patch layout: stride must be in [1, patch] to cover the grid");
    for (std::size_t o = 0;; o += stride[a]) {
      if (o + patch[a] >= grid[a]) {
        axis[a].push_back(grid[a] - patch[a]);
        break;
      }
      axis[a].push_back(o);
    }
  }
  for (auto z : axis[2])
    for (auto y : axis[1])
      for (auto x : axis[0]) L.origins.push_back({x, y, z});
  return L;
}

// Separable Hann window sin^2(pi (i + 1/2) / p); strictly positive at every voxel.
inline std::vector<double> blend_window(const Extent3& patch) {
  std::array<std::vector<double>, 3> w;
  for (int a = 0; a < 3; ++a) {
    w[a].resize(patch[a]);
    for (std::size_t i = 0; i < patch[a]; ++i) {
      const double s = std::sin(M_PI * (static_cast<double>(i) + 0.5) / static_cast<double>(patch[a]));
      w[a][i] = s * s;
    }
  }
  std::vector<double> out(patch[0] * patch[1] * patch[2]);
  for (std::size_t z = 0; z < patch[2]; ++z)
    for (std::size_t y = 0; y < patch[1]; ++y)
      for (std::size_t x = 0; x < patch[0]; ++x) out[(z * patch[1] + y) * patch[0] + x] = w[0][x] * w[1][y] * w[2][z];
  return out;
}

// Sum of window weights over all patches, per voxel of the grid.
inline std::vector<double> window_total(const PatchLayout& L) {
  const auto w = blend_window(L.patch);
  std::vector<double> total(L.grid[0] * L.grid[1] * L.grid[2], 0.0);
  for (const auto& o : L.origins)
    for (std::size_t z = 0; z < L.patch[2]; ++z)
      for (std::size_t y = 0; y < L.patch[1]; ++y)
        for (std::size_t x = 0; x < L.patch[0]; ++x)
          total[((o[2] + z) * L.grid[1] + o[1] + y) * L.grid[0] + o[0] + x] +=
              w[(z * L.patch[1] + y) * L.patch[0] + x];
  return total;
}

// Per-voxel sum of normalized blend weights; 1 everywhere for a valid layout.
inline std::vector<double> blend_weight_sum(const PatchLayout& L) {
  const auto w = blend_window(L.patch);
  const auto total = window_total(L);
  std::vector<double> sum(total.size(), 0.0);
  for (const auto& o : L.origins)
    for (std::size_t z = 0; z < L.patch[2]; ++z)
      for (std::size_t y = 0; y < L.patch[1]; ++y)
        for (std::size_t x = 0; x < L.patch[0]; ++x) {
          const std::size_t g = ((o[2] + z) * L.grid[1] + o[1] + y) * L.grid[0] + o[0] + x;
          sum[g] += w[(z * L.patch[1] + y) * L.patch[0] + x] / total[g];
        }
  return sum;
}

// Weighted average of patches in layout order. `patches[p]` holds the values of
// patch p (x fastest). Voxels covered once reproduce that patch exactly.
inline std::vector<float> blend_patches(const PatchLayout& L, const std::vector<std::vector<float>>& patches) {
  if (patches.size() != L.origins.size()) throw std::invalid_argument("blend: one patch per origin required");
  const auto w = blend_window(L.patch);
  const auto total = window_total(L);
  std::vector<double> acc(total.size(), 0.0), wsum(total.size(), 0.0);
  for (std::size_t p = 0; p < patches.size(); ++p) {
    const auto& o = L.origins[p];
    if (patches[p].size() != w.size()) throw std::invalid_argument("blend: patch has the wrong size");
    for (std::size_t z = 0; z < L.patch[2]; ++z)
      for (std::size_t y = 0; y < L.patch[1]; ++y)
        for (std::size_t x = 0; x < L.patch[0]; ++x) {
          const std::size_t l = (z * L.patch[1] + y) * L.patch[0] + x;
          const std::size_t g = ((o[2] + z) * L.grid[1] + o[1] + y) * L.grid[0] + o[0] + x;
          const double weight = w[l] / total[g];
          acc[g] += weight * static_cast<double>(patches[p][l]);
          wsum[g] += weight;
        }
  }
  std::vector<float> out(acc.size());
  for (std::size_t g = 0; g < acc.size(); ++g) {
    if (std::fabs(wsum[g] - 1.0) > 1e-6)
      throw std::logic_error("blend: weights sum to " + std::to_string(wsum[g]) + " at voxel " + std::to_string(g));
    out[g] = static_cast<float>(acc[g]);
  }
  return out;
}

// ---- conditioning --------------------------------------------------------------------

// [1 + 4, ...]: the stage input SDF (normalized by tau) and the demographic channels.
inline Tensor<float> stage12_condition(const SdfGrid& sdf, const std::array<float, 4>& demo_z) {
  const Volume3 norm = sdf_to_normalized(sdf);
  Tensor<float> c({1 + kDemoChannels, norm.nz, norm.ny, norm.nx});
  write_crop(norm, {0, 0, 0}, extents_of(norm), c, 0);
  for (std::size_t i = 0; i < kDemoChannels; ++i) fill_channel(c, 1 + i, demo_z[i]);
  return c;
}

// [1 + 4 + 12, patch]: upsampled coarse crop, demographics, positional encoding.
inline Tensor<float> stage3_condition(const Volume3& upsampled, const Extent3& origin, const Extent3& patch,
                                      const std::array<float, 4>& demo_z) {
  Tensor<float> c({1 + kDemoChannels + kPosChannels, patch[2], patch[1], patch[0]});
  write_crop(upsampled, origin, patch, c, 0);
  for (std::size_t i = 0; i < kDemoChannels; ++i) fill_channel(c, 1 + i, demo_z[i]);
  const Tensor<float> pe = positional_encoding(origin, patch, extents_of(upsampled));
  std::copy(pe.data().begin(), pe.data().end(), c.ptr() + (1 + kDemoChannels) * pe.numel() / kPosChannels);
  return c;
}

// ---- stage runners ------------------------------------------------------------------

struct StageSeeds {
  std::uint64_t seed = 0;
  std::uint64_t subject = 0;
};

// Restored full SDF on the coarse grid, same tau as the partial input.
template <class Model>
SdfGrid run_stage1(const SdfGrid& partial, const std::array<float, 4>& demo_z, const Model& model,
                   const SamplerConfig& cfg, StageSeeds s, SolverStats* stats = nullptr) {
  const Tensor<float> out = sample(model, stage12_condition(partial, demo_z), s.seed, "sampling.stage1", {s.subject},
                                   cfg, stats);
  return sdf_from_normalized(from_tensor(out, partial.vol), partial.tau);
}

// Coarse density in HU.
template <class Model>
Volume3 run_stage2(const SdfGrid& full, const std::array<float, 4>& demo_z, const Model& model,
                   const SamplerConfig& cfg, StageSeeds s, SolverStats* stats = nullptr) {
  const Tensor<float> out = sample(model, stage12_condition(full, demo_z), s.seed, "sampling.stage2", {s.subject},
                                   cfg, stats);
  return denormalize_hu(from_tensor(out, full.vol));
}

// Produces one patch (x fastest, normalized intensity) from its conditioning.
using PatchGenerator = std::function<std::vector<float>(const Tensor<float>& condition, const Extent3& origin)>;

template <class Model>
PatchGenerator model_patch_generator(const Model& model, const SamplerConfig& cfg, StageSeeds s) {
  return [&model, cfg, s](const Tensor<float>& cond, const Extent3& o) {
    const Tensor<float> out = sample(model, cond, s.seed, "sampling.stage3", {s.subject, o[0], o[1], o[2]}, cfg);
    return std::vector<float>(out.data().begin(), out.data().end());
  };
}

// Patch-wise super-resolution of a coarse HU volume. Returns normalized intensity on
// the high-resolution grid; patches are generated independently and blended in
// layout order.
inline Volume3 run_stage3(const Volume3& coarse_hu, const std::array<float, 4>& demo_z, const PatchGenerator& gen,
                          const PatchLayout& layout, std::size_t factor) {
  const Volume3 up = upsample_trilinear(normalize_hu(coarse_hu), factor);
  if (extents_of(up) != layout.grid) throw GridError("stage 3: layout grid does not match the upsampled volume");
  std::vector<std::vector<float>> patches(layout.origins.size());
  parallel_for(layout.origins.size(), [&](std::size_t p0, std::size_t p1) {
    for (std::size_t p = p0; p < p1; ++p)
      patches[p] = gen(stage3_condition(up, layout.origins[p], layout.patch, demo_z), layout.origins[p]);
  });
  Volume3 out = Volume3::like(up);
  out.values = blend_patches(layout, patches);
  return out;
}

// ---- training data --------------------------------------------------------------------

// Normalized per-subject tensors shared by the three stage providers.
struct StageData {
  std::array<float, 4> demo_z{};
  Tensor<float> partial, full;  // [1, coarse]
  Tensor<float> coarse;         // [1, coarse], normalized HU
  Volume3 up_coarse;            // high-res, normalized HU
  Volume3 high;                 // high-res, normalized HU
};

inline StageData prepare_stage_data(const PhantomRecord& r, const DemoStats& stats, std::size_t factor) {
  StageData d;
  d.demo_z = stats.zscore(r.demo);
  d.partial = to_tensor(sdf_to_normalized(r.sdf_partial));
  d.full = to_tensor(sdf_to_normalized(r.sdf_full));
  const Volume3 coarse = normalize_hu(r.coarse_density);
  d.coarse = to_tensor(coarse);
  d.up_coarse = upsample_trilinear(coarse, factor);
  d.high = normalize_hu(r.density);
  return d;
}

namespace detail {
inline std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

inline Tensor<float> stack_with_demo(const Tensor<float>& cond, const std::array<float, 4>& demo_z) {
  Tensor<float> c({1 + kDemoChannels, cond.dim(1), cond.dim(2), cond.dim(3)});
  std::copy(cond.data().begin(), cond.data().end(), c.ptr());
  for (std::size_t i = 0; i < kDemoChannels; ++i) fill_channel(c, 1 + i, demo_z[i]);
  return c;
}
}  // namespace detail

inline ExampleProvider stage_provider(int stage, const std::vector<StageData>& data, const Extent3& patch = {}) {
  if (data.empty()) throw std::invalid_argument("training cohort is empty");
  switch (stage) {
    case 1:
      return [&data](Rng& rng) {
        const auto& d = data[detail::pick(rng, data.size())];
        return StageExample{d.full, detail::stack_with_demo(d.partial, d.demo_z)};
      };
    case 2:
      return [&data](Rng& rng) {
        const auto& d = data[detail::pick(rng, data.size())];
        return StageExample{d.coarse, detail::stack_with_demo(d.full, d.demo_z)};
      };
    case 3:
      return [&data, patch](Rng& rng) {
        const auto& d = data[detail::pick(rng, data.size())];
        const Extent3 g = extents_of(d.high);
        Extent3 o;
        for (int a = 0; a < 3; ++a) {
          if (patch[a] < 1 || patch[a] > g[a]) throw GridError("stage 3 patch does not fit the grid");
          o[a] = detail::pick(rng, g[a] - patch[a] + 1);
        }
        Tensor<float> target({1, patch[2], patch[1], patch[0]});
        write_crop(d.high, o, patch, target, 0);
        return StageExample{target, stage3_condition(d.up_coarse, o, patch, d.demo_z)};
      };
    default:
      throw std::invalid_argument("stage must be 1, 2 or 3");
  }
}

// ---- pipeline -------------------------------------------------------------------------

struct PipelineConfig {
  SamplerConfig sampler1, sampler2, sampler3;
  std::size_t factor = 2;
  Extent3 patch{16, 16, 24}, stride{8, 8, 12};
};

struct PipelineResult {
  SdfGrid restored;   // stage 1, coarse grid
  Volume3 coarse_hu;  // stage 2
  Volume3 high_hu;    // stage 3, denormalized
  nlohmann::json stats;
};

template <class Model>
PipelineResult run_pipeline(const SdfGrid& partial, const std::array<float, 4>& demo_z, const Model& m1,
                            const Model& m2, const Model& m3, const PipelineConfig& cfg, StageSeeds seeds) {
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t) {
    return std::chrono::duration<double, std::milli>(clock::now() - t).count();
  };
  PipelineResult r;
  int stage = 1;
  try {
    SolverStats s1, s2;
    auto t = clock::now();
    r.restored = run_stage1(partial, demo_z, m1, cfg.sampler1, seeds, &s1);
    r.stats["stage1"] = {{"solver", s1.to_json()}, {"wall_ms", ms_since(t)}};
    stage = 2;
    t = clock::now();
    r.coarse_hu = run_stage2(r.restored, demo_z, m2, cfg.sampler2, seeds, &s2);
    r.stats["stage2"] = {{"solver", s2.to_json()}, {"wall_ms", ms_since(t)}};
    stage = 3;
    t = clock::now();
    const auto layout = make_patch_layout(
        {partial.vol.nx * cfg.factor, partial.vol.ny * cfg.factor, partial.vol.nz * cfg.factor}, cfg.patch, cfg.stride);
    const Volume3 norm = run_stage3(r.coarse_hu, demo_z, model_patch_generator(m3, cfg.sampler3, seeds), layout,
                                    cfg.factor);
    r.high_hu = denormalize_hu(norm);
    r.stats["stage3"] = {{"patches", layout.origins.size()}, {"wall_ms", ms_since(t)}};
  } catch (const std::exception& e) {
    throw std::runtime_error("stage " + std::to_string(stage) + " failed: " + e.what());
  }
  return r;
}

}  // namespace surf2ct
