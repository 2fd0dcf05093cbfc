#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "snapshot.hpp"

namespace surf2ct {

class GridError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense scalar grid, z-major: index = (k*ny + j)*nx + i. Voxel (i,j,k) is centred at
// origin + spacing*(i+1/2, j+1/2, k+1/2) in mm.
struct Volume3 {
  std::size_t nx = 0, ny = 0, nz = 0;
  float spacing = 1.0f;
  std::array<float, 3> origin{0, 0, 0};
  std::vector<float> values;

  Volume3() = default;
  Volume3(std::size_t nx_, std::size_t ny_, std::size_t nz_, float spacing_, std::array<float, 3> origin_ = {0, 0, 0},
          float fill = 0.0f)
      : nx(nx_), ny(ny_), nz(nz_), spacing(spacing_), origin(origin_), values(nx_ * ny_ * nz_, fill) {
    if (nx == 0 || ny == 0 || nz == 0) throw GridError("volume extents must be >= 1");
    if (!(spacing > 0)) throw GridError("volume spacing must be positive");
  }

  static Volume3 like(const Volume3& g, float fill = 0.0f) { return Volume3(g.nx, g.ny, g.nz, g.spacing, g.origin, fill); }

  std::size_t size() const { return values.size(); }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (k * ny + j) * nx + i; }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return values[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return values[index(i, j, k)]; }

  std::array<double, 3> world(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin[0] + spacing * (i + 0.5), origin[1] + spacing * (j + 0.5), origin[2] + spacing * (k + 0.5)};
  }

  std::array<std::size_t, 3> extents() const { return {nx, ny, nz}; }

  bool same_grid(const Volume3& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz && spacing == o.spacing && origin == o.origin;
  }

  double min_physical_extent() const { return spacing * static_cast<double>(std::min({nx, ny, nz})); }
};

inline void require_same_grid(const Volume3& a, const Volume3& b, const char* what) {
  if (!a.same_grid(b))
    throw GridError(std::string(what) + ": grid mismatch (" + std::to_string(a.nx) + "x" + std::to_string(a.ny) + "x" +
                    std::to_string(a.nz) + " vs " + std::to_string(b.nx) + "x" + std::to_string(b.ny) + "x" +
                    std::to_string(b.nz) + ")");
}

// Truncated signed distance in mm, positive inside.
struct SdfGrid {
  Volume3 vol;
  double tau = 0;
};

// Quarter of the smallest physical extent.
inline double default_tau(const Volume3& g) { return 0.25 * g.min_physical_extent(); }

enum class PayloadKind : std::uint32_t { density_hu = 0, density_normalized = 1, sdf_mm = 2, sdf_normalized = 3, mask = 4 };

inline const char* payload_name(PayloadKind k) {
  switch (k) {
    case PayloadKind::density_hu: return "density-HU";
    case PayloadKind::density_normalized: return "density-normalized";
    case PayloadKind::sdf_mm: return "sdf-mm";
    case PayloadKind::sdf_normalized: return "sdf-normalized";
    case PayloadKind::mask: return "mask";
  }
  return "unknown";
}

inline constexpr std::uint32_t kVol3Version = 1;

inline void write_vol3(std::ostream& os, const Volume3& v, PayloadKind kind) {
  io::put_bytes(os, "VOL3", 4);
  io::put<std::uint32_t>(os, kVol3Version);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.nx));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.ny));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.nz));
  io::put<float>(os, v.spacing);
  for (float o : v.origin) io::put<float>(os, o);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(kind));
  io::put_bytes(os, v.values.data(), v.values.size() * sizeof(float));
}

struct Vol3File {
  Volume3 vol;
  PayloadKind kind;
};

inline Vol3File read_vol3(std::istream& is) {
  char magic[4];
  io::get_bytes(is, magic, 4);
  if (std::string(magic, 4) != "VOL3") throw FormatError("not a VOL3 file");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kVol3Version) throw FormatError("unsupported VOL3 version " + std::to_string(version));
  const auto nx = io::get<std::uint32_t>(is), ny = io::get<std::uint32_t>(is), nz = io::get<std::uint32_t>(is);
  if (std::uint64_t(nx) * ny * nz > (1ull << 31)) throw FormatError("VOL3 extents implausibly large");
  const float spacing = io::get<float>(is);
  std::array<float, 3> origin;
  for (auto& o : origin) o = io::get<float>(is);
  const auto kind = io::get<std::uint32_t>(is);
  if (kind > 4) throw FormatError("VOL3 payload kind " + std::to_string(kind) + " unknown");
  Vol3File f{Volume3(nx, ny, nz, spacing, origin), static_cast<PayloadKind>(kind)};
  io::get_bytes(is, f.vol.values.data(), f.vol.values.size() * sizeof(float));
  return f;
}

inline void save_vol3(const std::string& path, const Volume3& v, PayloadKind kind) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_vol3(os, v, kind);
  if (!os) throw std::runtime_error("failed writing " + path);
}

inline Vol3File load_vol3(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_vol3(is);
}

// ---- intensity normalization -------------------------------------------------------

inline constexpr double kHuLow = -500.0;
inline constexpr double kHuHigh = 500.0;

inline float normalize_hu(float hu) {
  const double c = std::clamp(static_cast<double>(hu), kHuLow, kHuHigh);
  return static_cast<float>((c - kHuLow) / (kHuHigh - kHuLow));
}

inline float denormalize_hu(float v) { return static_cast<float>(kHuLow + static_cast<double>(v) * (kHuHigh - kHuLow)); }

inline Volume3 normalize_hu(const Volume3& v) {
  Volume3 out = v;
  for (auto& x : out.values) x = normalize_hu(x);
  return out;
}

inline Volume3 denormalize_hu(const Volume3& v) {
  Volume3 out = v;
  for (auto& x : out.values) x = denormalize_hu(x);
  return out;
}

// ---- distance transforms -----------------------------------------------------------

namespace detail {

inline constexpr double kEdtInf = 1e30;

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher) on one strided line.
// Infinite sites are skipped so rows without any seed stay infinite.
inline void edt_line(double* f, std::size_t n, std::size_t stride, std::vector<double>& buf_d,
                     std::vector<std::size_t>& v, std::vector<double>& z) {
  buf_d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq >= kEdtInf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -std::numeric_limits<double>::infinity();
      z[1] = std::numeric_limits<double>::infinity();
      k = 0;
      any = true;
      continue;
    }
    const double qd = static_cast<double>(q);
    double s;
    for (;;) {
      const double vd = static_cast<double>(v[k]);
      s = ((fq + qd * qd) - (f[v[k] * stride] + vd * vd)) / (2.0 * qd - 2.0 * vd);
      if (k > 0 && s <= z[k]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  if (!any) return;
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[j + 1] < qd) ++j;
    const double dv = qd - static_cast<double>(v[j]);
    buf_d[q] = dv * dv + f[v[j] * stride];
  }
  for (std::size_t q = 0; q < n; ++q) f[q * stride] = buf_d[q];
}

}  // namespace detail

// Exact squared Euclidean distance (in voxel units) from every voxel centre to the
// nearest seed centre; kEdtInf where no seed exists.
inline std::vector<double> squared_edt(const std::vector<std::uint8_t>& seeds, std::size_t nx, std::size_t ny,
                                       std::size_t nz) {
  std::vector<double> d(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) d[i] = seeds[i] ? 0.0 : detail::kEdtInf;
  auto pass = [&](std::size_t lines, auto line_ptr, std::size_t n, std::size_t stride) {
    parallel_for(lines, [&](std::size_t b, std::size_t e) {
      std::vector<double> buf;
      std::vector<std::size_t> v;
      std::vector<double> z;
      for (std::size_t l = b; l < e; ++l) detail::edt_line(line_ptr(l), n, stride, buf, v, z);
    });
  };
  pass(ny * nz, [&](std::size_t l) { return d.data() + l * nx; }, nx, 1);
  pass(nx * nz, [&](std::size_t l) { return d.data() + (l / nx) * nx * ny + (l % nx); }, ny, nx);
  pass(nx * ny, [&](std::size_t l) { return d.data() + l; }, nz, nx * ny);
  return d;
}

inline std::vector<std::uint8_t> mask_bits(const Volume3& m) {
  std::vector<std::uint8_t> b(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) b[i] = m.values[i] > 0.5f ? 1 : 0;
  return b;
}

inline Volume3 occupancy(const Volume3& sdf) {
  Volume3 m = Volume3::like(sdf);
  for (std::size_t i = 0; i < sdf.size(); ++i) m.values[i] = sdf.values[i] > 0 ? 1.0f : 0.0f;
  return m;
}

inline Volume3 occupancy(const SdfGrid& sdf) { return occupancy(sdf.vol); }

namespace detail {

// Signed value for a voxel given squared voxel-unit distance to the nearest
// opposite-label centre: the boundary sits half a voxel before that centre.
inline float signed_value(bool inside, double d2, double spacing, double tau) {
  if (d2 >= kEdtInf) return static_cast<float>(inside ? tau : -tau);
  const double d = spacing * std::sqrt(d2) - 0.5 * spacing;
  const double c = std::min(d, tau);
  return static_cast<float>(inside ? c : -c);
}

}  // namespace detail

// Truncated SDF of a binary mask. Inside voxels carry the distance to the nearest
// outside voxel centre minus half a voxel; outside voxels the negated counterpart.
inline SdfGrid compute_sdf(const Volume3& mask, double tau) {
  if (!(tau > 0)) throw GridError("compute_sdf: tau must be positive");
  const auto in = mask_bits(mask);
  std::size_t count = 0;
  for (auto b : in) count += b;
  if (count == 0) throw GridError("compute_sdf: mask is empty, no boundary exists");
  if (count == in.size()) throw GridError("compute_sdf: mask is full, no boundary exists");
  std::vector<std::uint8_t> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = 1 - in[i];
  const auto d_to_out = squared_edt(out, mask.nx, mask.ny, mask.nz);
  const auto d_to_in = squared_edt(in, mask.nx, mask.ny, mask.nz);
  SdfGrid s{Volume3::like(mask), tau};
  for (std::size_t i = 0; i < in.size(); ++i)
    s.vol.values[i] = detail::signed_value(in[i], in[i] ? d_to_out[i] : d_to_in[i], mask.spacing, tau);
  return s;
}

inline SdfGrid compute_sdf(const Volume3& mask) { return compute_sdf(mask, default_tau(mask)); }

// Voxels with a 6-neighbour of the opposite label; out-of-grid neighbours never count.
inline std::vector<std::uint8_t> boundary_bits(const std::vector<std::uint8_t>& in, std::size_t nx, std::size_t ny,
                                               std::size_t nz) {
  std::vector<std::uint8_t> b(in.size(), 0);
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t id = (k * ny + j) * nx + i;
        const auto lab = in[id];
        auto differs = [&](std::size_t o) { return in[o] != lab; };
        if ((i > 0 && differs(id - 1)) || (i + 1 < nx && differs(id + 1)) || (j > 0 && differs(id - nx)) ||
            (j + 1 < ny && differs(id + nx)) || (k > 0 && differs(id - nx * ny)) ||
            (k + 1 < nz && differs(id + nx * ny)))
          b[id] = 1;
      }
  return b;
}

// Lower median of the y indices of occupied voxels; the cut between anterior
// (y <= median) and posterior (y > median).
inline std::size_t median_occupied_y(const Volume3& mask) {
  std::vector<std::size_t> ys;
  for (std::size_t k = 0; k < mask.nz; ++k)
    for (std::size_t j = 0; j < mask.ny; ++j)
      for (std::size_t i = 0; i < mask.nx; ++i)
        if (mask.at(i, j, k) > 0.5f) ys.push_back(j);
  if (ys.empty()) throw GridError("make_partial: occupancy is empty");
  const std::size_t mid = (ys.size() - 1) / 2;
  std::nth_element(ys.begin(), ys.begin() + static_cast<std::ptrdiff_t>(mid), ys.end());
  return ys[mid];
}

// Frontal-only capture: surface voxels behind the median plane are dropped. Anterior
// voxels get the distance to the remaining surface signed by occupancy; posterior
// voxels are filled with -tau.
inline SdfGrid make_partial(const SdfGrid& full, const Volume3& occ) {
  require_same_grid(full.vol, occ, "make_partial");
  const std::size_t nx = occ.nx, ny = occ.ny, nz = occ.nz;
  const std::size_t median = median_occupied_y(occ);
  const auto in = mask_bits(occ);
  const auto shell = boundary_bits(in, nx, ny, nz);
  std::vector<std::uint8_t> seed_out(in.size(), 0), seed_in(in.size(), 0);
  std::size_t n_out = 0, n_in = 0;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j <= median && j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t id = occ.index(i, j, k);
        if (!shell[id]) continue;
        if (in[id]) {
          seed_in[id] = 1;
          ++n_in;
        } else {
          seed_out[id] = 1;
          ++n_out;
        }
      }
  if (n_in == 0 || n_out == 0) throw GridError("make_partial: anterior surface set is empty");
  const auto d_to_out = squared_edt(seed_out, nx, ny, nz);
  const auto d_to_in = squared_edt(seed_in, nx, ny, nz);
  SdfGrid p{Volume3::like(occ), full.tau};
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t id = occ.index(i, j, k);
        if (j > median) {
          p.vol.values[id] = static_cast<float>(-full.tau);
        } else {
          p.vol.values[id] = detail::signed_value(in[id], in[id] ? d_to_out[id] : d_to_in[id], occ.spacing, full.tau);
        }
      }
  return p;
}

using Point3 = std::array<double, 3>;

// Centres of voxels whose 6-neighbourhood contains a sign change (value > 0 versus
// value <= 0), in index order.
inline std::vector<Point3> extract_surface_points(const Volume3& sdf) {
  std::vector<std::uint8_t> pos(sdf.size());
  std::size_t npos = 0;
  for (std::size_t i = 0; i < sdf.size(); ++i) npos += pos[i] = sdf.values[i] > 0 ? 1 : 0;
  if (npos == 0 || npos == sdf.size()) throw GridError("extract_surface_points: grid has a single sign");
  const auto b = boundary_bits(pos, sdf.nx, sdf.ny, sdf.nz);
  std::vector<Point3> pts;
  for (std::size_t k = 0; k < sdf.nz; ++k)
    for (std::size_t j = 0; j < sdf.ny; ++j)
      for (std::size_t i = 0; i < sdf.nx; ++i)
        if (b[sdf.index(i, j, k)]) pts.push_back(sdf.world(i, j, k));
  return pts;
}

inline std::vector<Point3> extract_surface_points(const SdfGrid& sdf) { return extract_surface_points(sdf.vol); }

namespace detail {

inline double dist(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Uniform grid over the bounding box of a point set; nearest-neighbour queries
// search Chebyshev rings of cells outward until no closer point can exist.
class PointHash {
 public:
  explicit PointHash(const std::vector<Point3>& pts) : pts_(pts) {
    lo_ = hi_ = pts.front();
    for (const auto& p : pts)
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], p[a]);
        hi_[a] = std::max(hi_[a], p[a]);
      }
    double ext = 0;
    for (int a = 0; a < 3; ++a) ext = std::max(ext, hi_[a] - lo_[a]);
    const double cells_per_axis = std::max(1.0, std::cbrt(static_cast<double>(pts.size()) / 2.0));
    cell_ = ext > 0 ? ext / cells_per_axis : 1.0;
    for (int a = 0; a < 3; ++a) n_[a] = static_cast<long>(std::floor((hi_[a] - lo_[a]) / cell_)) + 1;
    start_.assign(static_cast<std::size_t>(n_[0] * n_[1] * n_[2]) + 1, 0);
    std::vector<std::size_t> cell_of(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      cell_of[i] = flat(cell_coord(pts[i]));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    order_.resize(pts.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) order_[fill[cell_of[i]]++] = i;
  }

  double nearest(const Point3& q) const {
    std::array<long, 3> c;
    for (int a = 0; a < 3; ++a) c[a] = static_cast<long>(std::floor((q[a] - lo_[a]) / cell_));
    // Rings closer than the grid box are empty.
    long r0 = 0;
    for (int a = 0; a < 3; ++a) r0 = std::max({r0, -c[a], c[a] - (n_[a] - 1)});
    long rmax = r0;
    for (int a = 0; a < 3; ++a) rmax = std::max({rmax, std::abs(c[a]), std::abs(c[a] - (n_[a] - 1))});
    double best = std::numeric_limits<double>::infinity();
    for (long r = r0; r <= rmax; ++r) {
      for (long z = std::max(0L, c[2] - r); z <= std::min(n_[2] - 1, c[2] + r); ++z)
        for (long y = std::max(0L, c[1] - r); y <= std::min(n_[1] - 1, c[1] + r); ++y)
          for (long x = std::max(0L, c[0] - r); x <= std::min(n_[0] - 1, c[0] + r); ++x) {
            if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
            const std::size_t cell = static_cast<std::size_t>((z * n_[1] + y) * n_[0] + x);
            for (std::size_t s = start_[cell]; s < start_[cell + 1]; ++s) best = std::min(best, dist(q, pts_[order_[s]]));
          }
      // Any point in ring r+1 or beyond is at least r cells away along some axis.
      if (best < (static_cast<double>(r) - 1e-6) * cell_) break;
    }
    return best;
  }

 private:
  std::array<long, 3> cell_coord(const Point3& p) const {
    std::array<long, 3> c;
    for (int a = 0; a < 3; ++a) c[a] = std::clamp(static_cast<long>(std::floor((p[a] - lo_[a]) / cell_)), 0L, n_[a] - 1);
    return c;
  }
  std::size_t flat(const std::array<long, 3>& c) const {
    return static_cast<std::size_t>((c[2] * n_[1] + c[1]) * n_[0] + c[0]);
  }

  const std::vector<Point3>& pts_;
  Point3 lo_, hi_;
  double cell_ = 1;
  std::array<long, 3> n_{1, 1, 1};
  std::vector<std::size_t> start_, order_;
};

inline double mean_nearest(const std::vector<Point3>& from, const std::vector<Point3>& to) {
  const PointHash hash(to);
  std::vector<double> d(from.size());
  parallel_for(from.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) d[i] = hash.nearest(from[i]);
  });
  double s = 0;
  for (double x : d) s += x;
  return s / static_cast<double>(from.size());
}

}  // namespace detail

// Symmetric Chamfer distance in mm: half the sum of both directed mean nearest distances.
inline double chamfer(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: point sets must be nonempty");
  return 0.5 * (detail::mean_nearest(a, b) + detail::mean_nearest(b, a));
}

inline double iou(const Volume3& a, const Volume3& b) {
  require_same_grid(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values[i] > 0.5f, y = b.values[i] > 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Mean absolute SDF error over the reference dynamic range 2*tau.
inline double nmae(const SdfGrid& a, const SdfGrid& ref) {
  require_same_grid(a.vol, ref.vol, "nmae");
  double s = 0;
  for (std::size_t i = 0; i < a.vol.size(); ++i)
    s += std::abs(static_cast<double>(a.vol.values[i]) - static_cast<double>(ref.vol.values[i]));
  return s / static_cast<double>(a.vol.size()) / (2.0 * ref.tau);
}

// SDF rescaled to [-1, 1] for network input, and back.
inline Volume3 sdf_to_normalized(const SdfGrid& s) {
  Volume3 v = s.vol;
  for (auto& x : v.values) x = static_cast<float>(x / s.tau);
  return v;
}

inline SdfGrid sdf_from_normalized(const Volume3& v, double tau) {
  SdfGrid s{v, tau};
  for (auto& x : s.vol.values) x = static_cast<float>(std::clamp(static_cast<double>(x), -1.0, 1.0) * tau);
  return s;
}

}  // namespace surf2ct
