#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>
#include <set>

#include "surf2ct/phantom.hpp"

using namespace surf2ct;

namespace {

Demographics demo(double age, int sex, double h, double w) { return Demographics{age, sex, h, w}; }

double volume_ml(const PhantomRecord& r, Tissue t) {
  std::size_t n = 0;
  for (float v : r.labels.values) n += v == static_cast<float>(t);
  const double s = r.labels.spacing;
  return n * s * s * s / 1000.0;
}

std::size_t top_z(const PhantomRecord& r) {
  std::size_t top = 0;
  for (std::size_t k = 0; k < r.labels.nz; ++k)
    for (std::size_t j = 0; j < r.labels.ny; ++j)
      for (std::size_t i = 0; i < r.labels.nx; ++i)
        if (r.labels.at(i, j, k) != 0) top = k;
  return top;
}

// R^2 of an ordinary least squares fit y ~ 1 + X, by Gaussian elimination on the
// normal equations.
double ols_r2(const std::vector<std::array<double, 4>>& x, const std::vector<double>& y) {
  constexpr int p = 5;
  double a[p][p + 1] = {};
  for (std::size_t n = 0; n < y.size(); ++n) {
    const double row[p] = {1, x[n][0], x[n][1], x[n][2], x[n][3]};
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < p; ++j) a[i][j] += row[i] * row[j];
      a[i][p] += row[i] * y[n];
    }
  }
  for (int c = 0; c < p; ++c) {
    int piv = c;
    for (int r = c + 1; r < p; ++r)
      if (std::fabs(a[r][c]) > std::fabs(a[piv][c])) piv = r;
    for (int j = 0; j <= p; ++j) std::swap(a[c][j], a[piv][j]);
    for (int r = 0; r < p; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (int j = c; j <= p; ++j) a[r][j] -= f * a[c][j];
    }
  }
  double mean = 0;
  for (double v : y) mean += v;
  mean /= y.size();
  double ss_res = 0, ss_tot = 0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    const double row[p] = {1, x[n][0], x[n][1], x[n][2], x[n][3]};
    double fit = 0;
    for (int i = 0; i < p; ++i) fit += row[i] * a[i][p] / a[i][i];
    ss_res += (y[n] - fit) * (y[n] - fit);
    ss_tot += (y[n] - mean) * (y[n] - mean);
  }
  return 1 - ss_res / ss_tot;
}

}  // namespace

TEST(Demographics, ValidationRejectsOutOfRange) {
  EXPECT_NO_THROW(demo(50, 1, 170, 80).validate());
  EXPECT_THROW(demo(10, 1, 170, 80).validate(), std::invalid_argument);
  EXPECT_THROW(demo(50, 2, 170, 80).validate(), std::invalid_argument);
  EXPECT_THROW(demo(50, 0, 230, 80).validate(), std::invalid_argument);
  EXPECT_THROW(demo(50, 0, 170, 10).validate(), std::invalid_argument);
  EXPECT_THROW(generate_phantom(1, demo(50, 0, 170, 10)), std::invalid_argument);
}

TEST(Demographics, JsonRoundTrip) {
  const auto d = demo(61.5, 0, 158.25, 66.125);
  const auto e = demographics_from_json(demographics_json(d));
  EXPECT_EQ(e.age, d.age);
  EXPECT_EQ(e.sex, d.sex);
  EXPECT_EQ(e.height, d.height);
  EXPECT_EQ(e.weight, d.weight);
}

TEST(Downsample, ConstantStaysConstant) {
  Volume3 v(4, 6, 8, 1.5f, {1, 2, 3});
  std::fill(v.values.begin(), v.values.end(), 7.25f);
  const auto d = downsample(v, 2);
  EXPECT_EQ(d.nx, 2u);
  EXPECT_EQ(d.ny, 3u);
  EXPECT_EQ(d.nz, 4u);
  EXPECT_FLOAT_EQ(d.spacing, 3.0f);
  EXPECT_EQ(d.origin, v.origin);
  for (float x : d.values) EXPECT_EQ(x, 7.25f);
}

TEST(Downsample, FactorOneIsIdentity) {
  Volume3 v(3, 3, 3, 2.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v.values[i] = static_cast<float>(i);
  EXPECT_EQ(downsample(v, 1).values, v.values);
}

TEST(Downsample, BlockMeanMatchesHandComputation) {
  Volume3 v(2, 2, 2, 1.0f);
  for (std::size_t i = 0; i < 8; ++i) v.values[i] = static_cast<float>(i);
  const auto d = downsample(v, 2);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_FLOAT_EQ(d.values[0], 3.5f);
}

TEST(Downsample, RejectsIndivisibleExtent) {
  EXPECT_THROW(downsample(Volume3(4, 5, 4, 1.0f), 2), GridError);
}

TEST(Phantom, DeterministicInSeed) {
  const auto d = demo(55, 1, 178, 85);
  const auto a = generate_phantom(42, d), b = generate_phantom(42, d);
  EXPECT_EQ(a.density.values, b.density.values);
  EXPECT_EQ(a.labels.values, b.labels.values);
  EXPECT_EQ(a.sdf_full.vol.values, b.sdf_full.vol.values);
  EXPECT_EQ(a.sdf_partial.vol.values, b.sdf_partial.vol.values);
  const auto c = generate_phantom(43, d);
  EXPECT_NE(a.density.values, c.density.values);
}

TEST(Phantom, TallerSubjectOccupiesMoreSlices) {
  const auto tall = generate_phantom(3, demo(50, 1, 180, 80));
  const auto short_ = generate_phantom(3, demo(50, 1, 150, 80));
  EXPECT_GT(top_z(tall), top_z(short_));
}

class PhantomInvariants : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    CohortConfig cfg;
    cfg.n_train = 100;
    cfg.n_test = 0;
    cfg.seed = 99;
    records_ = new std::vector<PhantomRecord>(generate_cohort(cfg));
  }
  static void TearDownTestSuite() {
    delete records_;
    records_ = nullptr;
  }
  static std::vector<PhantomRecord>* records_;
};
std::vector<PhantomRecord>* PhantomInvariants::records_ = nullptr;

TEST_F(PhantomInvariants, DensityInsideEveryTissueLiesInItsBand) {
  for (const auto& r : *records_)
    for (std::size_t n = 0; n < r.labels.size(); ++n) {
      const auto t = static_cast<Tissue>(r.labels.values[n]);
      const HuBand b = band_of(t);
      ASSERT_TRUE(b.contains(r.density.values[n])) << r.id << " " << tissue_name(t) << " " << r.density.values[n];
      if (t == Tissue::air) ASSERT_LE(r.density.values[n], bands::kBodyThreshold);
      else ASSERT_GT(r.density.values[n], bands::kBodyThreshold);
    }
}

TEST_F(PhantomInvariants, EveryOrganPresent) {
  for (const auto& r : *records_)
    for (Tissue t : kOrganTissues) EXPECT_GT(volume_ml(r, t), 0.0) << r.id << " " << tissue_name(t);
}

TEST_F(PhantomInvariants, HeartAboveAndKidneyBelowTheSplitHeight) {
  for (const auto& r : *records_) {
    const auto& l = r.labels;
    const double split = bands::kHeartKidneySplit * l.spacing * (top_z(r) + 0.5);
    for (std::size_t k = 0; k < l.nz; ++k) {
      const double z = l.spacing * (k + 0.5);
      for (std::size_t j = 0; j < l.ny; ++j)
        for (std::size_t i = 0; i < l.nx; ++i) {
          const auto t = static_cast<Tissue>(l.at(i, j, k));
          if (t == Tissue::heart) {
            ASSERT_GE(z, split) << r.id;
          }
          if (t == Tissue::kidney) {
            ASSERT_LT(z, split) << r.id;
          }
        }
    }
  }
}

TEST_F(PhantomInvariants, CoarseSdfMatchesCoarseBody) {
  for (const auto& r : *records_) {
    Volume3 body = downsample(r.body_mask(), 2);
    for (auto& v : body.values) v = v >= 0.5f ? 1.0f : 0.0f;
    EXPECT_EQ(occupancy(r.sdf_full).values, body.values) << r.id;
    EXPECT_EQ(r.sdf_full.tau, default_tau(body));
    const std::size_t med = median_occupied_y(body);
    const auto& p = r.sdf_partial.vol;
    for (std::size_t k = 0; k < p.nz; ++k)
      for (std::size_t j = med + 1; j < p.ny; ++j)
        for (std::size_t i = 0; i < p.nx; ++i) ASSERT_EQ(p.at(i, j, k), static_cast<float>(-r.sdf_partial.tau));
  }
}

TEST_F(PhantomInvariants, CoarseDensityIsBlockMean) {
  for (const auto& r : *records_) EXPECT_EQ(r.coarse_density.values, downsample(r.density, 2).values);
}

TEST(Phantom, SubcutaneousFatGrowsWithWeight) {
  double prev = -1;
  for (double w = 50; w <= 130; w += 10) {
    const double v = volume_ml(generate_phantom(5, demo(50, 0, 165, w)), Tissue::subcutaneous_fat);
    EXPECT_GT(v, prev) << "weight " << w;
    prev = v;
  }
}

TEST(Phantom, MuscleGrowsWithHeightAndMaleSex) {
  double prev = -1;
  for (double h = 150; h <= 195; h += 15) {
    const double v = volume_ml(generate_phantom(5, demo(50, 1, h, 80)), Tissue::muscle);
    EXPECT_GT(v, prev) << "height " << h;
    prev = v;
  }
  EXPECT_GT(volume_ml(generate_phantom(5, demo(50, 1, 170, 75)), Tissue::muscle),
            volume_ml(generate_phantom(5, demo(50, 0, 170, 75)), Tissue::muscle));
}

TEST(Phantom, LiverVolumeIsLinearlyPredictableFromDemographics) {
  CohortConfig cfg;
  cfg.n_train = 200;
  cfg.n_test = 0;
  cfg.seed = 2024;
  const auto recs = generate_cohort(cfg);
  std::vector<std::array<double, 4>> x;
  std::vector<double> y;
  for (const auto& r : recs) {
    x.push_back(r.demo.as_array());
    y.push_back(volume_ml(r, Tissue::liver));
  }
  EXPECT_GE(ols_r2(x, y), 0.9);
}

TEST(Cohort, IdsUniqueAndSplitByIndex) {
  CohortConfig cfg;
  cfg.n_train = 7;
  cfg.n_test = 3;
  const auto plan = plan_cohort(cfg);
  ASSERT_EQ(plan.size(), 10u);
  std::set<std::string> ids;
  std::set<std::uint64_t> seeds;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    ids.insert(plan[i].id);
    seeds.insert(plan[i].seed);
    EXPECT_EQ(plan[i].train, i < 7);
  }
  EXPECT_EQ(ids.size(), 10u);
  EXPECT_EQ(seeds.size(), 10u);
  EXPECT_EQ(plan[0].id, "s00000");
}

TEST(Cohort, PlanIsDeterministic) {
  CohortConfig cfg;
  cfg.n_train = 20;
  const auto a = plan_cohort(cfg), b = plan_cohort(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].demo.height, b[i].demo.height);
    EXPECT_EQ(a[i].demo.sex, b[i].demo.sex);
  }
}

TEST(Cohort, MaleHeightMeanWithinSamplingError) {
  CohortConfig cfg;
  cfg.n_train = 20000;
  cfg.n_test = 0;
  double sum = 0;
  std::size_t n = 0, males = 0;
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    const auto d = sample_demographics(cfg, i);
    EXPECT_NO_THROW(d.validate());
    if (!d.sex) continue;
    sum += d.height;
    ++n;
  }
  males = n;
  EXPECT_NEAR(sum / n, 175.0, 3 * 9.0 / std::sqrt(double(n)));
  EXPECT_NEAR(double(males) / cfg.n_train, 0.5, 3 * 0.5 / std::sqrt(double(cfg.n_train)));
}
