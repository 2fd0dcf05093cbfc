#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "support/gradcheck.hpp"
#include "surf2ct/snapshot.hpp"
#include "surf2ct/tensor.hpp"

using namespace surf2ct;
using surf2ct::testing::gradcheck;

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

}  // namespace

TEST(Elementwise, AddComponentwise) {
  Tensor<float> a({2}, {1, 2}), b({2}, {3, 4});
  auto c = add(a, b);
  EXPECT_EQ(c.data()[0], 4);
  EXPECT_EQ(c.data()[1], 6);
}

TEST(Elementwise, MulByOnesIsIdentity) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({3, 4, 5}, rng);
  auto y = mul(x, Tensor<float>::ones_like(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Elementwise, SiluAtZero) {
  Tensor<double> x = Tensor<double>::scalar(0.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  Recording<double> rec(tape);
  auto y = silu(x);
  EXPECT_EQ(y.item(), 0.0);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.5);
}

TEST(Elementwise, TrailingBroadcast) {
  Tensor<float> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<float> b({3}, {10, 20, 30});
  auto c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c.data()[4], 25);
  Tensor<float> col({2, 1}, {100, 200});
  auto d = add(a, col);
  EXPECT_EQ(d.data()[5], 206);
}

TEST(Elementwise, BroadcastGradientReduces) {
  std::mt19937_64 rng(5);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto b = random_tensor<double>({3, 1}, rng);
  auto r = gradcheck({a, b}, [&] { return sum(square(mul(a, b))); });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Elementwise, MismatchNamesBothShapes) {
  Tensor<float> a({2, 3}), b({4});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

TEST(Elementwise, AllKindsPassGradcheck) {
  std::mt19937_64 rng(11);
  auto a = random_tensor<double>({5, 4}, rng);
  auto b = random_tensor<double>({5, 4}, rng);
  for (auto& v : b.data()) v = 1.5 + std::abs(v);  // keep division well conditioned
  for (OpKind k : {OpKind::add, OpKind::sub, OpKind::mul, OpKind::div}) {
    auto r = gradcheck({a, b}, [&] { return sum(square(elementwise(k, a, b))); });
    EXPECT_LT(r.max_rel_error, 1e-5) << op_name(k);
  }
  for (OpKind k : {OpKind::neg, OpKind::silu, OpKind::square, OpKind::sigmoid}) {
    auto r = gradcheck({a}, [&] { return sum(square(elementwise(k, a))); });
    EXPECT_LT(r.max_rel_error, 1e-5) << op_name(k);
  }
}

TEST(Conv3d, OnesKernelSumsNeighbourhood) {
  Tensor<float> x = Tensor<float>::ones({1, 1, 3, 3, 3});
  Tensor<float> w = Tensor<float>::ones({1, 1, 3, 3, 3});
  Tensor<float> b({1}, 0.0f);
  auto y = conv3d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3, 3}));
  EXPECT_EQ(y.data()[13], 27.0f);
  EXPECT_EQ(y.data()[0], 8.0f);
}

TEST(Conv3d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({2, 1, 4, 5, 6}, rng);
  Tensor<float> w({1, 1, 3, 3, 3}, 0.0f);
  w.data()[13] = 1.0f;
  auto y = conv3d(x, w, Tensor<float>{}, 1, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv3d, MatchesDirectLoop) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({2, 3, 5, 4, 6}, rng);
  auto w = random_tensor<double>({4, 3, 3, 3, 3}, rng);
  auto b = random_tensor<double>({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto y = conv3d(x, w, b, stride, 1);
    const std::size_t OD = y.dim(2), OH = y.dim(3), OW = y.dim(4);
    double max_err = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t od = 0; od < OD; ++od)
          for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
              double acc = b.data()[k];
              for (std::size_t c = 0; c < 3; ++c)
                for (int kd = 0; kd < 3; ++kd)
                  for (int kh = 0; kh < 3; ++kh)
                    for (int kw = 0; kw < 3; ++kw) {
                      const long d = long(od * stride) + kd - 1, h = long(oh * stride) + kh - 1,
                                 ww = long(ow * stride) + kw - 1;
                      if (d < 0 || d >= 5 || h < 0 || h >= 4 || ww < 0 || ww >= 6) continue;
                      acc += x.data()[(((n * 3 + c) * 5 + d) * 4 + h) * 6 + ww] *
                             w.data()[(((k * 3 + c) * 3 + kd) * 3 + kh) * 3 + kw];
                    }
              const double got = y.data()[(((n * 4 + k) * OD + od) * OH + oh) * OW + ow];
              max_err = std::max(max_err, std::abs(got - acc));
            }
    EXPECT_LT(max_err, 1e-12) << "stride " << stride;
  }
}

TEST(Conv3d, GradcheckRandom) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3, 3}, rng, 0.3);
    auto b = random_tensor<double>({3}, rng);
    auto r = gradcheck({x, w, b}, [&] { return sum(square(conv3d(x, w, b, 1, 1))); });
    EXPECT_LT(r.max_rel_error, 1e-3) << "seed " << seed;
    auto r2 = gradcheck({x, w, b}, [&] { return sum(square(conv3d(x, w, b, 2, 1))); });
    EXPECT_LT(r2.max_rel_error, 1e-3) << "stride 2 seed " << seed;
  }
}

TEST(Conv3d, PointwiseGradcheck) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({2, 3, 2, 3, 4}, rng);
  auto w = random_tensor<double>({2, 3, 1, 1, 1}, rng);
  auto b = random_tensor<double>({2}, rng);
  auto r = gradcheck({x, w, b}, [&] { return sum(square(conv3d(x, w, b, 1, 0))); });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Conv3d, RejectsBadShapes) {
  Tensor<float> x({1, 2, 4, 4, 4});
  EXPECT_THROW(conv3d(x, Tensor<float>({1, 3, 3, 3, 3}), Tensor<float>{}, 1, 1), ShapeError);
  Tensor<float> tiny({1, 1, 1, 1, 1});
  EXPECT_THROW(conv3d(tiny, Tensor<float>({1, 1, 3, 3, 3}), Tensor<float>{}, 1, 0), ShapeError);
}

TEST(GroupNorm, ConstantInputIsZero) {
  Tensor<float> x({2, 4, 3, 3, 3}, 7.5f);
  auto y = group_norm(x, 2, Tensor<float>::ones({4}), Tensor<float>::zeros({4}), 1e-5f);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(GroupNorm, StandardizedInputUnchanged) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({1, 4, 4, 4, 4}, rng);
  // Standardize each group of 2 channels exactly.
  const std::size_t m = 2 * 64;
  for (std::size_t g = 0; g < 2; ++g) {
    double* p = x.ptr() + g * m;
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < m; ++i) mu += p[i];
    mu /= m;
    for (std::size_t i = 0; i < m; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= m;
    for (std::size_t i = 0; i < m; ++i) p[i] = (p[i] - mu) / std::sqrt(var);
  }
  const double eps = 1e-5;
  auto y = group_norm(x, 2, Tensor<double>::ones({4}), Tensor<double>::zeros({4}), eps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], std::sqrt(eps));
}

TEST(GroupNorm, Gradcheck) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({2, 4, 3, 2, 3}, rng);
  auto gain = random_tensor<double>({4}, rng);
  auto shift = random_tensor<double>({4}, rng);
  auto target = random_tensor<double>({2, 4, 3, 2, 3}, rng);
  auto r = gradcheck({x, gain, shift},
                     [&] { return mse_loss(group_norm(x, 2, gain, shift, 1e-5), target); });
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GroupNorm, RejectsIndivisibleChannels) {
  Tensor<float> x({1, 6, 2, 2, 2});
  EXPECT_THROW(group_norm(x, 4, Tensor<float>::ones({6}), Tensor<float>::zeros({6})), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tensor<float> x({4}, {1, -2, 3, 0.5});
  x.set_requires_grad(true);
  Tape<float> tape;
  Recording<float> rec(tape);
  tape.backward(sum(x));
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, SumOfSquares) {
  Tensor<float> x({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<float> tape;
  Recording<float> rec(tape);
  tape.backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 2.0f);
  EXPECT_EQ(x.grad()[1], 4.0f);
}

TEST(Backward, SecondCallDoublesLeafGradients) {
  Tensor<double> x({3}, {0.5, -1.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Recording<double> rec(tape);
  auto loss = sum(silu(mul(x, x)));
  tape.backward(loss);
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * once[i]);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor<float> x({3}, 1.0f);
  x.set_requires_grad(true);
  Tape<float> tape;
  Recording<float> rec(tape);
  auto y = square(x);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, RejectsEmptyTape) {
  Tape<float> tape;
  EXPECT_THROW(tape.backward(Tensor<float>::scalar(1.0f)), std::logic_error);
}

TEST(Backward, NoRecordingWithoutGrad) {
  Tensor<float> x({3}, 1.0f);
  Tape<float> tape;
  Recording<float> rec(tape);
  auto y = square(x);
  EXPECT_TRUE(tape.empty());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, ComposedGraphGradcheck) {
  std::mt19937_64 rng(21);
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
  auto w = random_tensor<double>({4, 2, 3, 3, 3}, rng, 0.3);
  auto b = random_tensor<double>({4}, rng);
  auto gain = random_tensor<double>({4}, rng);
  auto shift = random_tensor<double>({4}, rng);
  auto target = random_tensor<double>({1, 4, 4, 4, 4}, rng);
  auto r = gradcheck({x, w, b, gain, shift}, [&] {
    return mse_loss(silu(group_norm(conv3d(x, w, b, 1, 1), 2, gain, shift, 1e-5)), target);
  });
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Structural, ConcatAndUpsampleGradcheck) {
  std::mt19937_64 rng(31);
  auto a = random_tensor<double>({2, 1, 2, 2, 3}, rng);
  auto b = random_tensor<double>({2, 3, 2, 2, 3}, rng);
  auto target = random_tensor<double>({2, 4, 4, 4, 6}, rng);
  auto r = gradcheck({a, b}, [&] {
    return mse_loss(upsample_nearest(concat_channels<double>({a, b}), 2), target);
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Determinism, ForwardIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = random_tensor<float>({2, 3, 8, 8, 8}, rng);
    auto w = random_tensor<float>({5, 3, 3, 3, 3}, rng);
    auto g = Tensor<float>::ones({5});
    auto s = Tensor<float>::zeros({5});
    return silu(group_norm(conv3d(x, w, Tensor<float>{}, 1, 1), 5, g, s));
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(0, std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)));
}

TEST(Snapshot, RoundTripIsExact) {
  std::mt19937_64 rng(5);
  auto t = random_tensor<float>({2, 3, 4}, rng);
  std::stringstream ss;
  write_snapshot(ss, "enc.0.weight", t);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.size(), 4 + 12 + 4 + 4 + 3 * 4 + 24 * 4);
  auto back = read_snapshot<float>(ss);
  EXPECT_EQ(back.name, "enc.0.weight");
  EXPECT_EQ(back.tensor.shape(), t.shape());
  EXPECT_EQ(0, std::memcmp(back.tensor.ptr(), t.ptr(), t.numel() * sizeof(float)));
  std::stringstream again;
  write_snapshot(again, back.name, back.tensor);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Snapshot, RejectsWrongDtype) {
  std::stringstream ss;
  write_snapshot(ss, "x", Tensor<double>({2}, 1.0));
  EXPECT_THROW(read_snapshot<float>(ss), FormatError);
}
