#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "json.hpp"
#include "phantom.hpp"

namespace surf2ct {

class StatsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- segmentation ---------------------------------------------------------------

struct Segmentation {
  Volume3 labels;  // Tissue codes
  double volume_ml(Tissue t) const {
    std::size_t n = 0;
    for (float v : labels.values) n += v == static_cast<float>(t);
    const double s = labels.spacing;
    return static_cast<double>(n) * s * s * s / 1000.0;
  }
};

// Highest k containing a body voxel, or nullopt.
inline std::optional<std::size_t> top_body_slice(const Volume3& hu) {
  for (std::size_t k = hu.nz; k-- > 0;)
    for (std::size_t j = 0; j < hu.ny; ++j)
      for (std::size_t i = 0; i < hu.nx; ++i)
        if (hu.at(i, j, k) > bands::kBodyThreshold) return k;
  return std::nullopt;
}

// Threshold segmentation. Heart and kidney share a band and are split by height
// relative to the top body slice; fat components touching the exterior are
// subcutaneous, the rest visceral.
inline Segmentation segment_by_bands(const Volume3& hu) {
  Segmentation s{Volume3::like(hu)};
  auto& lab = s.labels;
  const auto top = top_body_slice(hu);
  const double split_z =
      top ? bands::kHeartKidneySplit * (hu.origin[2] + hu.spacing * (static_cast<double>(*top) + 0.5)) : 0.0;
  std::vector<std::uint8_t> fat(hu.size(), 0);
  for (std::size_t k = 0; k < hu.nz; ++k) {
    const double z = hu.origin[2] + hu.spacing * (k + 0.5);
    for (std::size_t j = 0; j < hu.ny; ++j)
      for (std::size_t i = 0; i < hu.nx; ++i) {
        const std::size_t id = hu.index(i, j, k);
        const double v = hu.values[id];
        Tissue t = v > bands::kBodyThreshold ? Tissue::cavity : Tissue::air;
        if (bands::lung.contains(v)) t = Tissue::lung;
        else if (bands::fat.contains(v)) {
          t = Tissue::visceral_fat;
          fat[id] = 1;
        } else if (bands::muscle.contains(v)) t = Tissue::muscle;
        else if (bands::heart_kidney.contains(v)) t = z >= split_z ? Tissue::heart : Tissue::kidney;
        else if (bands::liver.contains(v)) t = Tissue::liver;
        else if (bands::bone.contains(v)) t = Tissue::bone;
        lab.values[id] = static_cast<float>(t);
      }
  }
  // Flood fat components from voxels adjacent to the exterior.
  std::vector<std::size_t> stack;
  std::vector<std::uint8_t> reached(hu.size(), 0);
  const std::size_t nx = hu.nx, ny = hu.ny, nz = hu.nz;
  auto for_neighbours = [&](std::size_t id, auto&& fn) {
    const std::size_t i = id % nx, j = (id / nx) % ny, k = id / (nx * ny);
    if (i > 0) fn(id - 1);
    if (i + 1 < nx) fn(id + 1);
    if (j > 0) fn(id - nx);
    if (j + 1 < ny) fn(id + nx);
    if (k > 0) fn(id - nx * ny);
    if (k + 1 < nz) fn(id + nx * ny);
  };
  for (std::size_t id = 0; id < hu.size(); ++id) {
    if (!fat[id] || reached[id]) continue;
    bool touches = false;
    for_neighbours(id, [&](std::size_t o) { touches |= lab.values[o] == static_cast<float>(Tissue::air); });
    if (!touches) continue;
    reached[id] = 1;
    stack.push_back(id);
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      lab.values[c] = static_cast<float>(Tissue::subcutaneous_fat);
      for_neighbours(c, [&](std::size_t o) {
        if (fat[o] && !reached[o]) {
          reached[o] = 1;
          stack.push_back(o);
        }
      });
    }
  }
  return s;
}

// Shoulder apex (top body slice) minus lowest lung-band slice, in mm.
inline double lung_localization(const Volume3& hu) {
  const auto top = top_body_slice(hu);
  if (!top) throw StatsError("lung localization: no body voxels");
  for (std::size_t k = 0; k < hu.nz; ++k)
    for (std::size_t j = 0; j < hu.ny; ++j)
      for (std::size_t i = 0; i < hu.nx; ++i)
        if (bands::lung.contains(hu.at(i, j, k)))
          return hu.spacing * (static_cast<double>(*top) - static_cast<double>(k));
  throw StatsError("lung localization: no lung voxels");
}

// ---- statistics ------------------------------------------------------------------

struct PairedSeries {
  std::vector<double> original, generated;
  std::string label, units;

  std::size_t size() const { return original.size(); }
  void validate(std::size_t min_n) const {
    if (original.size() != generated.size()) throw StatsError(label + ": series lengths differ");
    if (original.size() < min_n)
      throw StatsError(label + ": need at least " + std::to_string(min_n) + " pairs, have " + std::to_string(original.size()));
    for (std::size_t i = 0; i < original.size(); ++i)
      if (!std::isfinite(original[i]) || !std::isfinite(generated[i])) throw StatsError(label + ": non-finite value");
  }
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n-1).
inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct DiffPercent {
  double value;
  std::size_t used, excluded;
};

inline DiffPercent diff_percent(const PairedSeries& s) {
  s.validate(1);
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.original[i] == 0) continue;
    acc += (s.generated[i] - s.original[i]) / s.original[i] * 100.0;
    ++used;
  }
  return {used ? acc / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN(), used, s.size() - used};
}

struct OlsFit {
  double slope, intercept, r2;
};

// Generated regressed on original; R^2 is the squared Pearson correlation.
inline OlsFit ols_slope_r2(const PairedSeries& s) {
  s.validate(3);
  const double mx = mean_of(s.original), my = mean_of(s.generated);
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double dx = s.original[i] - mx, dy = s.generated[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0) throw StatsError(s.label + ": zero variance in original values");
  const double slope = sxy / sxx;
  const double r2 = syy == 0 ? 0.0 : (sxy * sxy) / (sxx * syy);
  return {slope, my - slope * mx, r2};
}

struct BlandAltman {
  double bias, sd, loa_low, loa_high;
};

inline BlandAltman bland_altman(const PairedSeries& s) {
  s.validate(2);
  std::vector<double> d(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = s.generated[i] - s.original[i];
  const double bias = mean_of(d), sd = sd_of(d);
  return {bias, sd, bias - 1.96 * sd, bias + 1.96 * sd};
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < kEps) return h;
  }
  return h;
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x < 0 || x > 1) throw StatsError("incomplete beta: x outside [0,1]");
  if (x == 0 || x == 1) return x;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1) / (a + b + 2)) return bt * detail::betacf(a, b, x) / a;
  return 1 - bt * detail::betacf(b, a, 1 - x) / b;
}

// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct TTest {
  double t, p, df;
};

inline TTest paired_t_test(const PairedSeries& s) {
  s.validate(2);
  std::vector<double> d(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = s.generated[i] - s.original[i];
  const double sd = sd_of(d);
  if (!(sd > 0)) throw StatsError(s.label + ": paired differences have zero variance");
  const double n = static_cast<double>(s.size());
  const double t = mean_of(d) / (sd / std::sqrt(n));
  return {t, student_t_two_sided_p(t, n - 1), n - 1};
}

struct StatsSummary {
  std::size_t n = 0;
  double mean_orig, sd_orig, mean_gen, sd_gen, diff_pct, slope, r2, bias, loa_low, loa_high, t_stat, p_value;
};

// Every statistic of a series at once; requires n >= 3 and non-degenerate variance.
inline StatsSummary summarize_stats(const PairedSeries& s) {
  s.validate(3);
  const auto fit = ols_slope_r2(s);
  const auto ba = bland_altman(s);
  const auto tt = paired_t_test(s);
  return {s.size(), mean_of(s.original), sd_of(s.original), mean_of(s.generated), sd_of(s.generated),
          diff_percent(s).value, fit.slope, fit.r2, ba.bias, ba.loa_low, ba.loa_high, tt.t, tt.p};
}

// ---- cohort report ---------------------------------------------------------------

enum class ReportClass { muscle, subcutaneous_fat, visceral_fat, muscle_fat_ratio, lung, heart, liver, kidney };

inline constexpr std::array<ReportClass, 8> kReportClasses = {
    ReportClass::muscle, ReportClass::subcutaneous_fat, ReportClass::visceral_fat, ReportClass::muscle_fat_ratio,
    ReportClass::lung,   ReportClass::heart,            ReportClass::liver,        ReportClass::kidney};

inline const char* class_name(ReportClass c) {
  switch (c) {
    case ReportClass::muscle: return "skeletal_muscle";
    case ReportClass::subcutaneous_fat: return "subcutaneous_fat";
    case ReportClass::visceral_fat: return "visceral_fat";
    case ReportClass::muscle_fat_ratio: return "muscle_fat_ratio";
    case ReportClass::lung: return "lung";
    case ReportClass::heart: return "heart";
    case ReportClass::liver: return "liver";
    case ReportClass::kidney: return "kidney";
  }
  return "unknown";
}

// Per-subject measurements: volumes in mL (ratio dimensionless) and lung
// localization in mm (NaN when no lung is present).
struct SubjectMeasures {
  std::array<double, 8> values{};
  double lung_loc_mm = std::numeric_limits<double>::quiet_NaN();
};

inline SubjectMeasures measure(const Volume3& hu) {
  const Segmentation seg = segment_by_bands(hu);
  SubjectMeasures m;
  const double mus = seg.volume_ml(Tissue::muscle);
  const double scf = seg.volume_ml(Tissue::subcutaneous_fat);
  const double vf = seg.volume_ml(Tissue::visceral_fat);
  m.values[0] = mus;
  m.values[1] = scf;
  m.values[2] = vf;
  m.values[3] = (scf + vf) > 0 ? mus / (scf + vf) : std::numeric_limits<double>::quiet_NaN();
  m.values[4] = seg.volume_ml(Tissue::lung);
  m.values[5] = seg.volume_ml(Tissue::heart);
  m.values[6] = seg.volume_ml(Tissue::liver);
  m.values[7] = seg.volume_ml(Tissue::kidney);
  try {
    m.lung_loc_mm = lung_localization(hu);
  } catch (const StatsError&) {
  }
  return m;
}

struct SubjectEval {
  std::string id;
  Demographics demo;
  Volume3 original_hu;   // high-res ground truth
  Volume3 generated_hu;  // high-res pipeline output
  SdfGrid sdf_gt, sdf_partial;
  std::optional<SdfGrid> sdf_restored;
  // Coarse ground truth and the second-stage output, compared by body occupancy.
  std::optional<Volume3> original_coarse_hu, generated_coarse_hu;
};

inline Volume3 body_occupancy(const Volume3& hu) {
  Volume3 m = Volume3::like(hu);
  for (std::size_t i = 0; i < hu.size(); ++i) m.values[i] = hu.values[i] > bands::kBodyThreshold ? 1.0f : 0.0f;
  return m;
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ClassRow {
  std::string cohort, sex, cls;
  std::size_t n = 0;
  double mean_orig = kNaN, sd_orig = kNaN, mean_gen = kNaN, sd_gen = kNaN, diff_pct = kNaN, slope = kNaN, r2 = kNaN,
         t = kNaN, p = kNaN;
};

struct SurfaceRow {
  std::string comparison, metric;
  std::size_t n = 0;
  double mean = kNaN, sd = kNaN;
};

struct AgreementRow {
  std::string cohort, sex, quantity;
  std::size_t n = 0;
  double bias = kNaN, loa_low = kNaN, loa_high = kNaN, slope = kNaN, r2 = kNaN, t = kNaN, p = kNaN;
};

struct SubjectRow {
  std::string id, sex, quantity;
  double original = kNaN, generated = kNaN;
};

struct MetricsReport {
  std::vector<ClassRow> classes;
  std::vector<SurfaceRow> surface;
  std::vector<AgreementRow> agreement;
  std::vector<SubjectRow> subjects;
  std::vector<std::string> missing;
  std::vector<std::string> notes;
};

inline const char* sex_name(int sex) { return sex ? "male" : "female"; }

// Fills every statistic that is defined for the series; undefined ones stay NaN.
inline ClassRow summarize(const PairedSeries& s, std::string cohort, std::string sex, std::string cls) {
  ClassRow r{std::move(cohort), std::move(sex), std::move(cls)};
  r.n = s.size();
  if (s.size() == 0) return r;
  r.mean_orig = mean_of(s.original);
  r.mean_gen = mean_of(s.generated);
  r.sd_orig = sd_of(s.original);
  r.sd_gen = sd_of(s.generated);
  r.diff_pct = diff_percent(s).value;
  try {
    const auto f = ols_slope_r2(s);
    r.slope = f.slope;
    r.r2 = f.r2;
  } catch (const StatsError&) {
  }
  try {
    const auto t = paired_t_test(s);
    r.t = t.t;
    r.p = t.p;
  } catch (const StatsError&) {
  }
  return r;
}

inline AgreementRow agreement(const PairedSeries& s, std::string cohort, std::string sex, std::string quantity) {
  AgreementRow r{std::move(cohort), std::move(sex), std::move(quantity)};
  r.n = s.size();
  try {
    const auto ba = bland_altman(s);
    r.bias = ba.bias;
    r.loa_low = ba.loa_low;
    r.loa_high = ba.loa_high;
  } catch (const StatsError&) {
  }
  try {
    const auto f = ols_slope_r2(s);
    r.slope = f.slope;
    r.r2 = f.r2;
  } catch (const StatsError&) {
  }
  try {
    const auto t = paired_t_test(s);
    r.t = t.t;
    r.p = t.p;
  } catch (const StatsError&) {
  }
  return r;
}

// Volumes, composition, lung localization and surface quality for a test cohort.
// Subjects without a generated volume are listed in `missing`.
inline MetricsReport evaluate_cohort(const std::vector<SubjectEval>& subjects, const std::string& cohort = "test") {
  MetricsReport rep;
  rep.notes.push_back("organ and tissue volumes segmented by fixed HU bands; heart and kidney split by height");
  std::vector<const SubjectEval*> ok;
  for (const auto& s : subjects) {
    if (s.generated_hu.size() == 0 || !s.generated_hu.same_grid(s.original_hu)) rep.missing.push_back(s.id);
    else ok.push_back(&s);
  }
  std::vector<SubjectMeasures> orig(ok.size()), gen(ok.size());
  parallel_for(ok.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      orig[i] = measure(ok[i]->original_hu);
      gen[i] = measure(ok[i]->generated_hu);
    }
  });
  for (std::size_t i = 0; i < ok.size(); ++i) {
    const char* sx = sex_name(ok[i]->demo.sex);
    for (std::size_t c = 0; c < kReportClasses.size(); ++c)
      rep.subjects.push_back({ok[i]->id, sx, class_name(kReportClasses[c]), orig[i].values[c], gen[i].values[c]});
    rep.subjects.push_back({ok[i]->id, sx, "lung_localization_mm", orig[i].lung_loc_mm, gen[i].lung_loc_mm});
  }
  for (int sex : {1, 0}) {
    for (std::size_t c = 0; c < kReportClasses.size(); ++c) {
      PairedSeries s;
      s.label = std::string(sex_name(sex)) + " " + class_name(kReportClasses[c]);
      for (std::size_t i = 0; i < ok.size(); ++i) {
        if (ok[i]->demo.sex != sex) continue;
        if (!std::isfinite(orig[i].values[c]) || !std::isfinite(gen[i].values[c])) continue;
        s.original.push_back(orig[i].values[c]);
        s.generated.push_back(gen[i].values[c]);
      }
      rep.classes.push_back(summarize(s, cohort, sex_name(sex), class_name(kReportClasses[c])));
    }
  }
  for (const char* sx : {"male", "female", "all"}) {
    PairedSeries s;
    s.label = std::string(sx) + " lung localization";
    for (std::size_t i = 0; i < ok.size(); ++i) {
      if (std::string(sx) != "all" && sex_name(ok[i]->demo.sex) != std::string(sx)) continue;
      if (!std::isfinite(orig[i].lung_loc_mm) || !std::isfinite(gen[i].lung_loc_mm)) continue;
      s.original.push_back(orig[i].lung_loc_mm);
      s.generated.push_back(gen[i].lung_loc_mm);
    }
    rep.agreement.push_back(agreement(s, cohort, sx, "lung_localization_mm"));
  }
  // Surface quality on the coarse SDF grid.
  auto surface_rows = [&](const char* comparison, auto get) {
    std::vector<double> cd, io, nm;
    for (const auto& s : subjects) {
      const SdfGrid* a = get(s);
      if (!a) continue;
      cd.push_back(chamfer(extract_surface_points(*a), extract_surface_points(s.sdf_gt)));
      io.push_back(iou(occupancy(*a), occupancy(s.sdf_gt)));
      nm.push_back(nmae(*a, s.sdf_gt));
    }
    for (auto [name, v] : {std::pair<const char*, std::vector<double>*>{"chamfer_mm", &cd}, {"iou", &io}, {"nmae", &nm}}) {
      SurfaceRow r{comparison, name, v->size()};
      if (!v->empty()) {
        r.mean = mean_of(*v);
        r.sd = sd_of(*v);
      }
      rep.surface.push_back(r);
    }
  };
  surface_rows("partial_vs_gt", [](const SubjectEval& s) -> const SdfGrid* { return &s.sdf_partial; });
  surface_rows("restored_vs_gt",
               [](const SubjectEval& s) -> const SdfGrid* { return s.sdf_restored ? &*s.sdf_restored : nullptr; });
  std::vector<double> body;
  for (const auto& s : subjects)
    if (s.original_coarse_hu && s.generated_coarse_hu && s.generated_coarse_hu->same_grid(*s.original_coarse_hu))
      body.push_back(iou(body_occupancy(*s.generated_coarse_hu), body_occupancy(*s.original_coarse_hu)));
  SurfaceRow br{"coarse_density_vs_gt", "body_iou", body.size()};
  if (!body.empty()) {
    br.mean = mean_of(body);
    br.sd = sd_of(body);
  }
  rep.surface.push_back(br);
  return rep;
}

inline const ClassRow* find_row(const MetricsReport& r, const std::string& sex, const std::string& cls) {
  for (const auto& row : r.classes)
    if (row.sex == sex && row.cls == cls) return &row;
  return nullptr;
}

inline const SurfaceRow* find_surface(const MetricsReport& r, const std::string& comparison, const std::string& metric) {
  for (const auto& row : r.surface)
    if (row.comparison == comparison && row.metric == metric) return &row;
  return nullptr;
}

// ---- serialization -----------------------------------------------------------------

namespace csv {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_num(const std::string& s) {
  if (s == "nan") return kNaN;
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw FormatError("bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace csv

inline constexpr const char* kClassCsvHeader = "cohort,sex,class,n,mean_orig,sd_orig,mean_gen,sd_gen,diff_pct,slope,r2,t,p";

inline void write_class_csv(std::ostream& os, const std::vector<ClassRow>& rows) {
  os << kClassCsvHeader << '\n';
  for (const auto& r : rows)
    os << r.cohort << ',' << r.sex << ',' << r.cls << ',' << r.n << ',' << csv::num(r.mean_orig) << ','
       << csv::num(r.sd_orig) << ',' << csv::num(r.mean_gen) << ',' << csv::num(r.sd_gen) << ','
       << csv::num(r.diff_pct) << ',' << csv::num(r.slope) << ',' << csv::num(r.r2) << ',' << csv::num(r.t) << ','
       << csv::num(r.p) << '\n';
}

inline std::vector<ClassRow> read_class_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kClassCsvHeader) throw FormatError("class CSV: unexpected header");
  std::vector<ClassRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != 13) throw FormatError("class CSV: expected 13 fields, got " + std::to_string(f.size()));
    ClassRow r{f[0], f[1], f[2]};
    r.n = std::stoul(f[3]);
    double* dst[] = {&r.mean_orig, &r.sd_orig, &r.mean_gen, &r.sd_gen, &r.diff_pct, &r.slope, &r.r2, &r.t, &r.p};
    for (int i = 0; i < 9; ++i) *dst[i] = csv::parse_num(f[4 + i]);
    rows.push_back(r);
  }
  return rows;
}

inline void write_surface_csv(std::ostream& os, const std::vector<SurfaceRow>& rows) {
  os << "comparison,metric,n,mean,sd\n";
  for (const auto& r : rows)
    os << r.comparison << ',' << r.metric << ',' << r.n << ',' << csv::num(r.mean) << ',' << csv::num(r.sd) << '\n';
}

inline void write_agreement_csv(std::ostream& os, const std::vector<AgreementRow>& rows) {
  os << "cohort,sex,quantity,n,bias,loa_low,loa_high,slope,r2,t,p\n";
  for (const auto& r : rows)
    os << r.cohort << ',' << r.sex << ',' << r.quantity << ',' << r.n << ',' << csv::num(r.bias) << ','
       << csv::num(r.loa_low) << ',' << csv::num(r.loa_high) << ',' << csv::num(r.slope) << ',' << csv::num(r.r2)
       << ',' << csv::num(r.t) << ',' << csv::num(r.p) << '\n';
}

inline void write_subject_csv(std::ostream& os, const std::vector<SubjectRow>& rows) {
  os << "id,sex,quantity,original,generated\n";
  for (const auto& r : rows)
    os << r.id << ',' << r.sex << ',' << r.quantity << ',' << csv::num(r.original) << ',' << csv::num(r.generated)
       << '\n';
}

inline nlohmann::json json_num(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["notes"] = r.notes;
  j["missing"] = r.missing;
  for (const auto& c : r.classes)
    j["classes"].push_back({{"cohort", c.cohort}, {"sex", c.sex}, {"class", c.cls}, {"n", c.n},
                            {"mean_orig", json_num(c.mean_orig)}, {"sd_orig", json_num(c.sd_orig)},
                            {"mean_gen", json_num(c.mean_gen)}, {"sd_gen", json_num(c.sd_gen)},
                            {"diff_pct", json_num(c.diff_pct)}, {"slope", json_num(c.slope)}, {"r2", json_num(c.r2)},
                            {"t", json_num(c.t)}, {"p", json_num(c.p)}});
  for (const auto& s : r.surface)
    j["surface"].push_back({{"comparison", s.comparison}, {"metric", s.metric}, {"n", s.n}, {"mean", json_num(s.mean)},
                            {"sd", json_num(s.sd)}});
  for (const auto& a : r.agreement)
    j["agreement"].push_back({{"cohort", a.cohort}, {"sex", a.sex}, {"quantity", a.quantity}, {"n", a.n},
                              {"bias", json_num(a.bias)}, {"loa_low", json_num(a.loa_low)},
                              {"loa_high", json_num(a.loa_high)}, {"slope", json_num(a.slope)}, {"r2", json_num(a.r2)},
                              {"t", json_num(a.t)}, {"p", json_num(a.p)}});
  return j;
}

inline void write_report(const std::string& dir, const MetricsReport& r) {
  auto open = [&](const std::string& name) {
    std::ofstream os(dir + "/" + name);
    if (!os) throw std::runtime_error("cannot write " + dir + "/" + name);
    return os;
  };
  {
    auto os = open("report.csv");
    write_class_csv(os, r.classes);
  }
  {
    auto os = open("surface.csv");
    write_surface_csv(os, r.surface);
  }
  {
    auto os = open("agreement.csv");
    write_agreement_csv(os, r.agreement);
  }
  {
    auto os = open("subjects.csv");
    write_subject_csv(os, r.subjects);
  }
  {
    auto os = open("report.json");
    os << report_json(r).dump(2) << '\n';
  }
}

// True when every class row and surface row carries finite statistics.
inline bool report_fully_populated(const MetricsReport& r, std::string* why = nullptr) {
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  if (r.classes.size() != 2 * kReportClasses.size()) return fail("expected one row per (sex, class)");
  for (const auto& c : r.classes)
    for (double v : {c.mean_orig, c.sd_orig, c.mean_gen, c.sd_gen, c.diff_pct, c.slope, c.r2, c.t, c.p})
      if (!std::isfinite(v)) return fail(c.sex + " " + c.cls + " has an undefined statistic");
  for (const auto& s : r.surface)
    if (!std::isfinite(s.mean)) return fail(s.comparison + " " + s.metric + " undefined");
  return true;
}

}  // namespace surf2ct
