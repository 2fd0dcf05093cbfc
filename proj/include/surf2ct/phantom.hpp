#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "json.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace surf2ct {

struct Demographics {
  double age = 50;     // years
  int sex = 0;         // 0 female, 1 male
  double height = 170;  // cm
  double weight = 75;   // kg

  void validate() const {
    if (!(age >= 18 && age <= 95)) throw std::invalid_argument("demographics: age " + std::to_string(age) + " outside [18,95]");
    if (sex != 0 && sex != 1) throw std::invalid_argument("demographics: sex must be 0 or 1");
    if (!(height >= 140 && height <= 200))
      throw std::invalid_argument("demographics: height " + std::to_string(height) + " outside [140,200]");
    if (!(weight >= 40 && weight <= 150))
      throw std::invalid_argument("demographics: weight " + std::to_string(weight) + " outside [40,150]");
  }
  double bmi() const { return weight / ((height / 100.0) * (height / 100.0)); }
  std::array<double, 4> as_array() const { return {age, static_cast<double>(sex), height, weight}; }
};

// Tissue labels. Cavity is the soft-tissue background inside the muscle wall.
enum class Tissue : std::uint8_t {
  air = 0,
  lung = 1,
  heart = 2,
  liver = 3,
  kidney = 4,
  muscle = 5,
  subcutaneous_fat = 6,
  visceral_fat = 7,
  bone = 8,
  cavity = 9,
};

inline constexpr std::array<Tissue, 8> kOrganTissues = {Tissue::lung,   Tissue::heart,           Tissue::liver,
                                                        Tissue::kidney, Tissue::muscle,          Tissue::subcutaneous_fat,
                                                        Tissue::visceral_fat, Tissue::bone};

inline const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::air: return "air";
    case Tissue::lung: return "lung";
    case Tissue::heart: return "heart";
    case Tissue::liver: return "liver";
    case Tissue::kidney: return "kidney";
    case Tissue::muscle: return "muscle";
    case Tissue::subcutaneous_fat: return "subcutaneous_fat";
    case Tissue::visceral_fat: return "visceral_fat";
    case Tissue::bone: return "bone";
    case Tissue::cavity: return "cavity";
  }
  return "unknown";
}

struct HuBand {
  double lo, hi;
  bool contains(double v) const { return v >= lo && v <= hi; }
  double centre() const { return 0.5 * (lo + hi); }
};

// Non-overlapping bands; heart and kidney share one and are told apart by height.
namespace bands {
inline constexpr double kAir = -500;
inline constexpr HuBand lung{-450, -350};
inline constexpr HuBand fat{-150, -50};
inline constexpr HuBand muscle{20, 60};
inline constexpr HuBand heart_kidney{61, 79};
inline constexpr HuBand liver{80, 120};
inline constexpr HuBand bone{300, 500};
inline constexpr double kBodyThreshold = -475;  // HU above this is body
inline constexpr double kCavity = 0;
// Heart/kidney split: fraction of the top body height.
inline constexpr double kHeartKidneySplit = 0.37;
}  // namespace bands

inline HuBand band_of(Tissue t) {
  switch (t) {
    case Tissue::lung: return bands::lung;
    case Tissue::heart:
    case Tissue::kidney: return bands::heart_kidney;
    case Tissue::liver: return bands::liver;
    case Tissue::muscle: return bands::muscle;
    case Tissue::subcutaneous_fat:
    case Tissue::visceral_fat: return bands::fat;
    case Tissue::bone: return bands::bone;
    case Tissue::air: return {bands::kAir, bands::kAir};
    case Tissue::cavity: return {bands::kCavity, bands::kCavity};
  }
  return {0, 0};
}

struct PhantomGrid {
  std::size_t nx = 32, ny = 32, nz = 48;
  float spacing = 4.0f;
  std::size_t factor = 2;  // high-res to coarse

  void validate() const {
    if (factor < 1) throw std::invalid_argument("phantom grid: factor must be >= 1");
    if (nx % factor || ny % factor || nz % factor)
      throw std::invalid_argument("phantom grid: extents must be divisible by the coarse factor");
    if (!(spacing > 0)) throw std::invalid_argument("phantom grid: spacing must be positive");
  }
  Volume3 high() const { return Volume3(nx, ny, nz, spacing); }
  Volume3 coarse() const { return Volume3(nx / factor, ny / factor, nz / factor, spacing * static_cast<float>(factor)); }
};

struct PhantomRecord {
  std::string id;
  std::uint64_t seed = 0;
  Demographics demo;
  Volume3 density;          // HU, high-res
  Volume3 labels;           // Tissue codes, high-res
  Volume3 coarse_density;   // HU, block mean of density
  SdfGrid sdf_full;         // coarse grid
  SdfGrid sdf_partial;      // coarse grid
  std::vector<std::string> warnings;

  Volume3 mask(Tissue t) const {
    Volume3 m = Volume3::like(labels);
    for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] == static_cast<float>(t) ? 1.0f : 0.0f;
    return m;
  }
  Volume3 body_mask() const {
    Volume3 m = Volume3::like(labels);
    for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] != 0.0f ? 1.0f : 0.0f;
    return m;
  }
};

// Block-mean pooling; spacing scales by the factor, origin is kept.
inline Volume3 downsample(const Volume3& v, std::size_t f) {
  if (f < 1) throw GridError("downsample: factor must be >= 1");
  if (v.nx % f || v.ny % f || v.nz % f)
    throw GridError("downsample: extents " + std::to_string(v.nx) + "x" + std::to_string(v.ny) + "x" +
                    std::to_string(v.nz) + " not divisible by " + std::to_string(f));
  Volume3 out(v.nx / f, v.ny / f, v.nz / f, v.spacing * static_cast<float>(f), v.origin);
  const double inv = 1.0 / static_cast<double>(f * f * f);
  for (std::size_t k = 0; k < out.nz; ++k)
    for (std::size_t j = 0; j < out.ny; ++j)
      for (std::size_t i = 0; i < out.nx; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < f; ++c)
          for (std::size_t b = 0; b < f; ++b)
            for (std::size_t a = 0; a < f; ++a) s += v.at(i * f + a, j * f + b, k * f + c);
        out.at(i, j, k) = static_cast<float>(s * inv);
      }
  return out;
}

namespace phantom_detail {

inline double clamp(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

// Body envelope parameters in mm, all deterministic in the demographics.
struct BodyFrame {
  double cx, cy;          // axis position
  double half_width;      // lateral semi-axis at z = 0
  double depth_ant;       // anterior semi-axis (towards -y)
  double depth_post;      // posterior semi-axis (towards +y)
  double length;          // vertical extent from the grid floor
  double fat;             // subcutaneous layer thickness
  double muscle;          // muscle layer thickness
  static constexpr double p = 2.6;  // cross-section superellipse exponent
  static constexpr double q = 6.0;  // vertical exponent (flat shoulders)

  double taper(double z) const { return 1.0 - 0.18 * clamp(z / length, 0.0, 1.0); }

  // Implicit superellipsoid; <= 1 inside.
  double level(double x, double y, double z) const {
    if (z < 0 || z > length) return 2.0;
    const double t = taper(z);
    const double a = half_width * t;
    const double b = (y < cy ? depth_ant : depth_post) * t;
    const double r = std::pow(std::pow(std::abs(x - cx) / a, p) + std::pow(std::abs(y - cy) / b, p), q / p);
    return r + std::pow(z / length, q);
  }

  // Cavity half-extents at height z (approximate inset of the envelope).
  double cavity_scale(double z) const { return std::pow(std::max(0.0, 1.0 - std::pow(z / length, q)), 1.0 / q) * taper(z); }
  double cav_a(double z) const { return std::max(1.0, half_width * cavity_scale(z) - fat - muscle); }
  double cav_b(double z, bool anterior) const {
    return std::max(1.0, (anterior ? depth_ant : depth_post) * cavity_scale(z) - fat - muscle);
  }
};

inline BodyFrame body_frame(const Demographics& d, const PhantomGrid& g) {
  BodyFrame f;
  const double X = g.nx * g.spacing, Y = g.ny * g.spacing, Z = g.nz * g.spacing;
  const double bmi = d.bmi();
  f.half_width = X * clamp(0.40 + 0.004 * (bmi - 25) + 0.015 * d.sex, 0.30, 0.46);
  f.depth_ant = Y * clamp(0.33 + 0.004 * (bmi - 25) + 0.01 * d.sex, 0.24, 0.40);
  f.depth_post = 0.85 * f.depth_ant;
  f.length = Z * clamp(0.5 + 0.4 * (d.height - 140) / 60, 0.45, 0.92);
  f.fat = clamp(4 + 0.1 * (d.weight - 80) + 1.5 * (1 - d.sex), 4.0, 10.0);
  f.muscle = clamp(4.5 + 0.05 * (d.height - 170) + 1.0 * d.sex - 0.02 * (d.age - 50), 4.0, 7.0);
  // Each layer must be at least one voxel thick so the shells stay closed.
  f.fat = std::max<double>(f.fat, g.spacing);
  f.muscle = std::max<double>(f.muscle, g.spacing);
  f.cx = X / 2;
  f.cy = Y / 2 + 0.5 * (f.depth_ant - f.depth_post);
  return f;
}

struct OrganSpec {
  Tissue tissue;
  double u, v, w;             // centre: lateral, anterior(-)/posterior(+) fraction of cavity, height fraction
  double su, sv, sw;          // semi-axes as fractions of cavity half-width, cavity depth, body length
  double ah, aw, as;          // affine size sensitivity to height, weight, sex
};

// Painting order matters: later organs only claim unassigned cavity voxels.
inline const std::vector<OrganSpec>& organ_specs() {
  static const std::vector<OrganSpec> specs = {
      {Tissue::lung, -0.48, 0.05, 0.72, 0.38, 0.6, 0.16, 0.06, -0.02, 0.06},
      {Tissue::lung, 0.48, 0.05, 0.72, 0.38, 0.6, 0.16, 0.06, -0.02, 0.06},
      {Tissue::heart, 0.15, -0.35, 0.54, 0.30, 0.40, 0.08, 0.03, 0.04, 0.05},
      {Tissue::liver, -0.25, -0.15, 0.35, 0.55, 0.6, 0.14, 0.05, 0.07, 0.04},
      {Tissue::kidney, -0.55, 0.45, 0.22, 0.16, 0.25, 0.07, 0.03, 0.03, 0.04},
      {Tissue::kidney, 0.55, 0.45, 0.22, 0.16, 0.25, 0.07, 0.03, 0.03, 0.04},
  };
  return specs;
}

inline double size_factor(const OrganSpec& s, const Demographics& d) {
  return clamp(1 + s.ah * (d.height - 170) / 10 + s.aw * (d.weight - 80) / 15 + s.as * (d.sex - 0.5), 0.7, 1.3);
}

struct Ellipsoid {
  double x, y, z, rx, ry, rz;
  bool contains(double px, double py, double pz) const {
    const double a = (px - x) / rx, b = (py - y) / ry, c = (pz - z) / rz;
    return a * a + b * b + c * c <= 1.0;
  }
};

inline Ellipsoid place(const OrganSpec& s, const BodyFrame& f, const Demographics& d, const std::array<double, 3>& jitter) {
  const double zc = s.w * f.length;
  const double ac = f.cav_a(zc);
  const double bc = f.cav_b(zc, s.v < 0);
  const double k = size_factor(s, d);
  Ellipsoid e;
  e.x = f.cx + s.u * ac;
  e.y = f.cy + s.v * bc;
  e.z = zc;
  e.rx = s.su * ac * k * (1 + 0.05 * jitter[0]);
  e.ry = s.sv * bc * k * (1 + 0.05 * jitter[1]);
  e.rz = s.sw * f.length * k * (1 + 0.05 * jitter[2]);
  return e;
}

inline void fill_hu(Volume3& density, const Volume3& labels, Tissue t, double hu) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels.values[i] == static_cast<float>(t)) density.values[i] = static_cast<float>(hu);
}

}  // namespace phantom_detail

// Procedural torso: tapered superellipsoid body, subcutaneous fat and muscle shells by
// depth, a bony spine and ellipsoidal organs in the cavity, visceral fat blobs.
inline PhantomRecord generate_phantom(std::uint64_t seed, const Demographics& demo, const PhantomGrid& grid = {},
                                      std::string id = "") {
  using namespace phantom_detail;
  demo.validate();
  grid.validate();
  PhantomRecord r;
  r.id = std::move(id);
  r.seed = seed;
  r.demo = demo;
  Rng rng = make_rng(seed, "phantom");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  const BodyFrame f = body_frame(demo, grid);
  Volume3 labels = grid.high();
  const std::size_t nx = grid.nx, ny = grid.ny, nz = grid.nz;

  // Body envelope.
  Volume3 body = grid.high();
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const auto p = body.world(i, j, k);
        if (f.level(p[0], p[1], p[2]) <= 1.0) body.at(i, j, k) = 1;
      }

  // Depth below the skin; shells by thickness.
  const double big_tau = 1e6;
  const SdfGrid depth = compute_sdf(body, big_tau);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (body.values[n] < 0.5f) continue;
    const double d = depth.vol.values[n];
    Tissue t = Tissue::cavity;
    if (d <= f.fat) t = Tissue::subcutaneous_fat;
    else if (d <= f.fat + f.muscle) t = Tissue::muscle;
    labels.values[n] = static_cast<float>(t);
  }
  auto label_at = [&](std::size_t i, std::size_t j, std::size_t k) { return static_cast<Tissue>(labels.at(i, j, k)); };

  // Spine: vertical cylinder in the posterior cavity.
  {
    const double r_sp = 0.18 * std::min(f.cav_a(0), f.cav_b(0, false));
    const double yc = f.cy + 0.6 * f.cav_b(0, false);
    for (std::size_t k = 0; k < nz; ++k)
      for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t i = 0; i < nx; ++i) {
          const auto p = labels.world(i, j, k);
          if (p[2] > 0.85 * f.length) continue;
          const double dx = p[0] - f.cx, dy = p[1] - yc;
          if (dx * dx + dy * dy <= r_sp * r_sp && label_at(i, j, k) == Tissue::cavity)
            labels.at(i, j, k) = static_cast<float>(Tissue::bone);
        }
  }

  auto paint = [&](const Ellipsoid& e, Tissue t, bool check_only, bool& clipped) {
    clipped = false;
    const auto lo = [&](double c, double r, std::size_t n) {
      return static_cast<std::size_t>(clamp(std::floor((c - r) / grid.spacing - 0.5), 0, double(n - 1)));
    };
    const auto hi = [&](double c, double r, std::size_t n) {
      return static_cast<std::size_t>(clamp(std::ceil((c + r) / grid.spacing - 0.5), 0, double(n - 1)));
    };
    for (std::size_t k = lo(e.z, e.rz, nz); k <= hi(e.z, e.rz, nz); ++k)
      for (std::size_t j = lo(e.y, e.ry, ny); j <= hi(e.y, e.ry, ny); ++j)
        for (std::size_t i = lo(e.x, e.rx, nx); i <= hi(e.x, e.rx, nx); ++i) {
          const auto p = labels.world(i, j, k);
          if (!e.contains(p[0], p[1], p[2])) continue;
          const Tissue cur = label_at(i, j, k);
          const bool in_cavity = cur == Tissue::cavity || cur == Tissue::bone || cur == Tissue::lung ||
                                 cur == Tissue::heart || cur == Tissue::liver || cur == Tissue::kidney ||
                                 cur == Tissue::visceral_fat;
          if (!in_cavity) clipped = true;
          if (!check_only && cur == Tissue::cavity) labels.at(i, j, k) = static_cast<float>(t);
        }
    // Ellipsoid poking outside the grid also counts as leaving the envelope.
    if (e.x - e.rx < 0 || e.y - e.ry < 0 || e.z - e.rz < 0 || e.x + e.rx > nx * grid.spacing ||
        e.y + e.ry > ny * grid.spacing || e.z + e.rz > nz * grid.spacing)
      clipped = true;
  };

  const auto& specs = organ_specs();
  for (std::size_t o = 0; o < specs.size(); ++o) {
    const auto& s = specs[o];
    std::array<double, 3> jit{normal(rng), normal(rng), normal(rng)};
    Ellipsoid e = place(s, f, demo, jit);
    bool clipped = false;
    paint(e, s.tissue, true, clipped);
    if (clipped) {
      for (auto& j : jit) j = clamp(j, -1, 1);
      e = place(s, f, demo, jit);
      paint(e, s.tissue, true, clipped);
      r.warnings.push_back(std::string(tissue_name(s.tissue)) + " #" + std::to_string(o) +
                           " exceeded the body envelope; regenerated with jitter clamped to 1 sd" +
                           (clipped ? " (still clipped, painted inside the cavity only)" : ""));
    }
    paint(e, s.tissue, false, clipped);
  }

  // Visceral fat blobs in the lower abdomen; size grows with weight.
  {
    const double growth = clamp(1 + 0.5 * (demo.weight - 80) / 17, 0.5, 2.0);
    const std::array<std::array<double, 2>, 3> pos = {{{-0.35, -0.55}, {0.35, -0.55}, {0.0, -0.7}}};
    for (const auto& uv : pos) {
      const double zc = 0.12 * f.length;
      const double ac = f.cav_a(zc), bc = f.cav_b(zc, true);
      Ellipsoid e{f.cx + uv[0] * ac, f.cy + uv[1] * bc, zc, 0.16 * ac * growth * (1 + 0.05 * normal(rng)),
                  0.16 * bc * growth * (1 + 0.05 * normal(rng)), 0.07 * f.length * std::sqrt(growth) * (1 + 0.05 * normal(rng))};
      bool clipped = false;
      paint(e, Tissue::visceral_fat, false, clipped);
    }
  }

  // One HU value per tissue, drawn from the inner half of its band.
  Volume3 density = grid.high();
  std::fill(density.values.begin(), density.values.end(), static_cast<float>(bands::kAir));
  fill_hu(density, labels, Tissue::cavity, bands::kCavity);
  for (Tissue t : kOrganTissues) {
    const HuBand b = band_of(t);
    const double hu = b.centre() + 0.25 * (b.hi - b.lo) * unit(rng);
    fill_hu(density, labels, t, hu);
  }

  r.labels = std::move(labels);
  r.density = std::move(density);
  r.coarse_density = downsample(r.density, grid.factor);
  Volume3 coarse_body = downsample(body, grid.factor);
  for (auto& v : coarse_body.values) v = v >= 0.5f ? 1.0f : 0.0f;
  r.sdf_full = compute_sdf(coarse_body, default_tau(coarse_body));
  r.sdf_partial = make_partial(r.sdf_full, coarse_body);
  return r;
}

// ---- cohort -----------------------------------------------------------------------

struct SexParams {
  double age_mean, age_sd, height_mean, height_sd, weight_mean, weight_sd;
};

struct CohortConfig {
  std::size_t n_train = 200;
  std::size_t n_test = 32;
  std::uint64_t seed = 1234;
  double male_fraction = 0.5;
  SexParams male{69, 10, 175, 9, 90, 17};
  SexParams female{58, 17, 164, 7, 71, 16};
  PhantomGrid grid;
};

struct CohortEntry {
  std::string id;
  std::uint64_t seed;
  Demographics demo;
  bool train;
};

inline std::string subject_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", i);
  return buf;
}

inline Demographics sample_demographics(const CohortConfig& cfg, std::size_t index) {
  Rng rng = make_rng(cfg.seed, "cohort.demographics", {index});
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 1);
  Demographics d;
  d.sex = u(rng) < cfg.male_fraction ? 1 : 0;
  const SexParams& p = d.sex ? cfg.male : cfg.female;
  d.age = std::clamp(p.age_mean + p.age_sd * n(rng), 18.0, 95.0);
  d.height = std::clamp(p.height_mean + p.height_sd * n(rng), 140.0, 200.0);
  d.weight = std::clamp(p.weight_mean + p.weight_sd * n(rng), 40.0, 150.0);
  return d;
}

// Subjects 0..n_train-1 form the training split, the rest the test split.
inline std::vector<CohortEntry> plan_cohort(const CohortConfig& cfg) {
  const std::size_t n = cfg.n_train + cfg.n_test;
  if (n < 1) throw std::invalid_argument("cohort: n must be >= 1");
  std::vector<CohortEntry> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({subject_id(i), derive_seed(cfg.seed, "phantom", {i}), sample_demographics(cfg, i), i < cfg.n_train});
  return out;
}

inline std::vector<PhantomRecord> generate_cohort(const CohortConfig& cfg) {
  const auto plan = plan_cohort(cfg);
  std::vector<PhantomRecord> recs(plan.size());
  parallel_for(plan.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) recs[i] = generate_phantom(plan[i].seed, plan[i].demo, cfg.grid, plan[i].id);
  });
  return recs;
}

inline nlohmann::json demographics_json(const Demographics& d) {
  return {{"age", d.age}, {"sex", d.sex}, {"height_cm", d.height}, {"weight_kg", d.weight}};
}

inline Demographics demographics_from_json(const nlohmann::json& j) {
  Demographics d;
  d.age = j.at("age");
  d.sex = j.at("sex");
  d.height = j.at("height_cm");
  d.weight = j.at("weight_kg");
  d.validate();
  return d;
}

}  // namespace surf2ct
