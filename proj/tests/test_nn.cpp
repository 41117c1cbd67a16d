// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"
#include "xda/nn.hpp"

namespace xda {
namespace {

using test::gradcheck_dir;
using test::gradcheck_h;
using test::gradcheck_tol;
using test::random_param;
using test::random_tensor;
using test::weighted_sum;

template <typename T>
class NnTyped : public ::testing::Test {};
using Real = ::testing::Types<float, double>;
TYPED_TEST_SUITE(NnTyped, Real);

// Reference convolution: per output element, one fma chain ascending over
// (ic, ky, kx), bias added after the chain. Mirrors the production kernel's
// accumulation order exactly, so comparisons can demand bit equality.
template <typename T>
std::vector<T> conv2d_oracle(const std::vector<T>& x, const std::vector<T>& w,
                             const std::vector<T>& b, int n, int ic, int h, int wd, int oc, int k,
                             int pad, int stride, int oh, int ow) {
  std::vector<T> out(static_cast<size_t>(n) * oc * oh * ow);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < oc; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int c = 0; c < ic; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                T xv = T(0);
                if (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                  xv = x[((static_cast<size_t>(i) * ic + c) * h + iy) * wd + ix];
                acc = std::fma(w[((static_cast<size_t>(o) * ic + c) * k + ky) * k + kx], xv, acc);
              }
          out[((static_cast<size_t>(i) * oc + o) * oh + oy) * ow + ox] = acc + b[o];
        }
  return out;
}

TYPED_TEST(NnTyped, ConvBitExactAgainstOracle) {
  using T = TypeParam;
  Rng rng(21);
  struct Case {
    int n, ic, h, w, oc, k, pad, stride;
  };
  for (auto cs : {Case{2, 3, 8, 8, 5, 5, 2, 1}, Case{1, 4, 7, 9, 3, 3, 1, 1},
                  Case{2, 2, 8, 8, 4, 5, 2, 2}, Case{1, 1, 5, 5, 2, 5, 0, 1}}) {
    auto x = random_tensor<T>(rng, {cs.n, cs.ic, cs.h, cs.w});
    auto w = random_tensor<T>(rng, {cs.oc, cs.ic, cs.k, cs.k});
    auto b = random_tensor<T>(rng, {cs.oc});
    auto y = conv2d(x, w, b, cs.stride, cs.pad);
    const int oh = (cs.h + 2 * cs.pad - cs.k) / cs.stride + 1;
    const int ow = (cs.w + 2 * cs.pad - cs.k) / cs.stride + 1;
    ASSERT_EQ(y.shape(), (Shape{cs.n, cs.oc, oh, ow}));
    auto want = conv2d_oracle(x.values(), w.values(), b.values(), cs.n, cs.ic, cs.h, cs.w, cs.oc,
                              cs.k, cs.pad, cs.stride, oh, ow);
    for (size_t i = 0; i < want.size(); ++i) ASSERT_EQ(y.values()[i], want[i]) << "elem " << i;
  }
}

TEST(Conv, ShapeErrors) {
  Rng rng(22);
  auto x = random_tensor<float>(rng, {1, 3, 8, 8});
  auto w = random_tensor<float>(rng, {4, 2, 5, 5});
  auto b = random_tensor<float>(rng, {4});
  EXPECT_THROW(conv2d(x, w, b, 1, 2), ShapeError);
  auto w2 = random_tensor<float>(rng, {4, 3, 5, 5});
  EXPECT_THROW(conv2d(x, w2, random_tensor<float>(rng, {3}), 1, 2), ShapeError);
  EXPECT_THROW(conv2d(x, w2, b, 0, 2), ShapeError);
}

TYPED_TEST(NnTyped, ConvGradcheck) {
  using T = TypeParam;
  Rng rng(23);
  for (int inst = 0; inst < 4; ++inst) {
    auto x = random_param<T>(rng, {2, 3, 6, 6});
    auto w = random_param<T>(rng, {4, 3, 5, 5}, -0.3, 0.3);
    auto b = random_param<T>(rng, {4}, -0.3, 0.3);
    Rng wr(30 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(31);
          return weighted_sum(conv2d(x, w, b, 1, 2), wsum);
        },
        {&x, &w, &b}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TEST(MaxPool, ForwardAndTies) {
  Tensor x(Shape{1, 1, 4, 4},
           {1, 2, 5, 5, 3, 4, 5, 5, -1, -1, 0, 9, -1, -1, 8, 7});
  auto y = maxpool2x2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.values(), (std::vector<float>{4, 5, -1, 9}));
  EXPECT_THROW(maxpool2x2(Tensor::zeros({1, 1, 3, 4})), ShapeError);
  EXPECT_THROW(maxpool2x2(Tensor::zeros({3, 4})), ShapeError);

  // Tie gradient goes to the first element in scan order.
  Tensor t(Shape{1, 1, 2, 2}, {2, 2, 2, 2});
  t.requires_grad();
  {
    Tape tape;
    tape.backward(sum(maxpool2x2(t)));
  }
  EXPECT_EQ(t.grad(), (std::vector<float>{1, 0, 0, 0}));
}

TYPED_TEST(NnTyped, MaxPoolGradcheck) {
  using T = TypeParam;
  Rng rng(24);
  for (int inst = 0; inst < 4; ++inst) {
    // Distinct entries keep the argmax stable under the finite-difference step.
    std::vector<T> v(2 * 3 * 4 * 4);
    std::vector<int> order(v.size());
    for (size_t i = 0; i < v.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    for (size_t i = 0; i < v.size(); ++i) v[i] = T(0.02) * static_cast<T>(order[i]);
    TensorT<T> x(Shape{2, 3, 4, 4}, std::move(v));
    x.requires_grad();
    Rng wr(40 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(41);
          return weighted_sum(maxpool2x2(x), wsum);
        },
        {&x}, wr, std::is_same_v<T, float> ? T(1e-3) : T(1e-5));
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TEST(BatchStats, BiasedVarianceOracle) {
  Rng rng(25);
  auto x = random_tensor<double>(rng, {3, 2, 4, 4});
  auto s = batch_stats(x);
  const size_t hw = 16, m = 3 * hw;
  for (int c = 0; c < 2; ++c) {
    double mu = 0, var = 0;
    for (int i = 0; i < 3; ++i)
      for (size_t j = 0; j < hw; ++j) mu += x.values()[(i * 2 + c) * hw + j];
    mu /= static_cast<double>(m);
    for (int i = 0; i < 3; ++i)
      for (size_t j = 0; j < hw; ++j) {
        double d = x.values()[(i * 2 + c) * hw + j] - mu;
        var += d * d;
      }
    var /= static_cast<double>(m);
    EXPECT_NEAR(s.mean[static_cast<size_t>(c)], mu, 1e-12);
    EXPECT_NEAR(s.var[static_cast<size_t>(c)], var, 1e-12);
  }
}

TYPED_TEST(NnTyped, BatchNormTrainNormalizesAndGradchecks) {
  using T = TypeParam;
  Rng rng(26);
  auto x = random_param<T>(rng, {4, 3, 4, 4});
  auto gamma = random_param<T>(rng, {3}, 0.5, 1.5);
  auto beta = random_param<T>(rng, {3}, -0.5, 0.5);

  BatchStats<T> cap;
  auto y = batchnorm_train(x, gamma, beta, T(1e-5), &cap);
  // With gamma=1, beta=0 the output has (nearly) zero mean and unit variance;
  // with affine params, undo them and check the normalized stats.
  auto ys = batch_stats(y);
  for (int c = 0; c < 3; ++c) {
    const double g = gamma.values()[static_cast<size_t>(c)];
    const double b = beta.values()[static_cast<size_t>(c)];
    EXPECT_NEAR(ys.mean[static_cast<size_t>(c)], b, 2e-5);
    EXPECT_NEAR(std::sqrt(static_cast<double>(ys.var[static_cast<size_t>(c)])), std::fabs(g),
                5e-3);
  }
  EXPECT_EQ(cap.mean.size(), 3u);

  for (int inst = 0; inst < 4; ++inst) {
    Rng wr(50 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(51);
          return weighted_sum(batchnorm_train(x, gamma, beta, T(1e-5)), wsum);
        },
        {&x, &gamma, &beta}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TYPED_TEST(NnTyped, BatchNormEvalUsesConstantStats) {
  using T = TypeParam;
  Rng rng(27);
  auto x = random_param<T>(rng, {2, 3, 4, 4});
  auto gamma = random_param<T>(rng, {3}, 0.5, 1.5);
  auto beta = random_param<T>(rng, {3}, -0.5, 0.5);
  std::vector<T> mean{T(0.1), T(-0.2), T(0.05)};
  std::vector<T> var{T(0.9), T(1.3), T(0.4)};

  auto y = batchnorm_eval(x, gamma, beta, mean, var, T(1e-5));
  size_t idx = 0;
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < 16; ++j, ++idx) {
        const double want =
            (static_cast<double>(x.values()[idx]) - mean[static_cast<size_t>(c)]) /
                std::sqrt(static_cast<double>(var[static_cast<size_t>(c)]) + 1e-5) *
                gamma.values()[static_cast<size_t>(c)] +
            beta.values()[static_cast<size_t>(c)];
        EXPECT_NEAR(static_cast<double>(y.values()[idx]), want,
                    (std::is_same_v<T, float> ? 1e-5 : 1e-12));
      }

  for (int inst = 0; inst < 4; ++inst) {
    Rng wr(60 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(61);
          return weighted_sum(batchnorm_eval(x, gamma, beta, mean, var, T(1e-5)), wsum);
        },
        {&x, &gamma, &beta}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TYPED_TEST(NnTyped, BatchNormStatsMatchesEvalAndGradchecks) {
  using T = TypeParam;
  Rng rng(29);
  auto x = random_param<T>(rng, {2, 3, 4, 4});
  auto gamma = random_param<T>(rng, {3}, 0.5, 1.5);
  auto beta = random_param<T>(rng, {3}, -0.5, 0.5);
  auto mean = random_param<T>(rng, {3}, -0.5, 0.5);
  auto var = random_param<T>(rng, {3}, 0.5, 2.0);

  auto y = batchnorm_stats(x, gamma, beta, mean, var, T(1e-5));
  auto want = batchnorm_eval(x, gamma, beta, mean.values(), var.values(), T(1e-5));
  EXPECT_EQ(y.values(), want.values());

  for (int inst = 0; inst < 4; ++inst) {
    Rng wr(64 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(65);
          return weighted_sum(batchnorm_stats(x, gamma, beta, mean, var, T(1e-5)), wsum);
        },
        {&x, &gamma, &beta, &mean, &var}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TYPED_TEST(NnTyped, SnapshotStatsCarryCrossBatchGradients) {
  using T = TypeParam;
  Rng rng(31);
  auto xs = random_param<T>(rng, {4, 3, 4, 4});
  auto xq = random_param<T>(rng, {2, 3, 4, 4});
  BatchNorm2dT<T> bn;
  bn.gamma = random_param<T>(rng, {3}, 0.5, 1.5);
  bn.beta = random_param<T>(rng, {3}, -0.5, 0.5);

  // normalizing one batch by another's captured statistics must differentiate
  // through the statistics back into the source batch
  for (int inst = 0; inst < 4; ++inst) {
    Rng wr(70 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          BatchStats<T> snap;
          auto ys = bn.forward_train(xs, &snap, false);
          auto yq = bn.forward_with(xq, snap);
          Rng wsum(71);
          return add(weighted_sum(ys, wsum), weighted_sum(yq, wsum));
        },
        {&xs, &xq, &bn.gamma, &bn.beta}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }

  // without a tape the captured statistics stay plain values
  BatchStats<T> snap;
  bn.forward_train(xs, &snap, false);
  EXPECT_FALSE(snap.mean_t.has_value());
  EXPECT_FALSE(snap.var_t.has_value());
}

TEST(BatchNormLayer, RunningUpdateAndClamp) {
  Rng rng(28);
  auto bn = BatchNorm2d::make(3);
  EXPECT_EQ(bn.running_mean, (std::vector<float>(3, 0.f)));
  EXPECT_EQ(bn.running_var, (std::vector<float>(3, 1.f)));

  auto x = test::random_tensor<float>(rng, {4, 3, 4, 4});
  auto s = batch_stats(x);
  BatchStats<float> cap;
  bn.forward_train(x, &cap, true);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(bn.running_mean[static_cast<size_t>(c)], 0.1f * s.mean[static_cast<size_t>(c)],
                1e-6f);
    EXPECT_NEAR(bn.running_var[static_cast<size_t>(c)],
                0.9f * 1.0f + 0.1f * s.var[static_cast<size_t>(c)], 1e-6f);
    EXPECT_FLOAT_EQ(cap.mean[static_cast<size_t>(c)], s.mean[static_cast<size_t>(c)]);
  }

  // Constant input has zero batch variance; the absorbed value is clamped.
  auto bn2 = BatchNorm2d::make(1);
  bn2.forward_train(Tensor::full({4, 1, 2, 2}, 3.0f), nullptr, true);
  EXPECT_GE(bn2.running_var[0], 0.9f * 1.0f + 0.1f * bn2.eps - 1e-9f);

  // forward_batch leaves the running buffers untouched.
  auto bn3 = BatchNorm2d::make(3);
  bn3.forward_batch(x, nullptr);
  EXPECT_EQ(bn3.running_mean, (std::vector<float>(3, 0.f)));
  EXPECT_EQ(bn3.running_var, (std::vector<float>(3, 1.f)));
}

TYPED_TEST(NnTyped, LayerNormNormalizesRowsAndGradchecks) {
  using T = TypeParam;
  Rng rng(29);
  auto x = random_param<T>(rng, {4, 6});
  auto gamma = random_param<T>(rng, {6}, 0.5, 1.5);
  auto beta = random_param<T>(rng, {6}, -0.5, 0.5);

  auto ones = TensorT<T>::full({6}, T(1));
  auto zeros = TensorT<T>::zeros({6});
  auto yn = layernorm(x, ones, zeros, T(1e-5));
  for (int r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 6; ++c) mu += yn.values()[static_cast<size_t>(r) * 6 + c];
    mu /= 6.0;
    for (int c = 0; c < 6; ++c) {
      double d = yn.values()[static_cast<size_t>(r) * 6 + c] - mu;
      var += d * d;
    }
    var /= 6.0;
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
  EXPECT_THROW(layernorm(x, random_tensor<T>(rng, {5}), zeros, T(1e-5)), ShapeError);

  for (int inst = 0; inst < 4; ++inst) {
    Rng wr(70 + inst);
    double err = gradcheck_dir<T>(
        [&] {
          Rng wsum(71);
          return weighted_sum(layernorm(x, gamma, beta, T(1e-5)), wsum);
        },
        {&x, &gamma, &beta}, wr, gradcheck_h<T>());
    EXPECT_LT(err, gradcheck_tol<T>());
  }
}

TEST(Init, UniformFanInBounds) {
  Rng rng(31);
  const int fan_in = 3 * 5 * 5;
  auto w = init_uniform<float>(rng, {8, 3, 5, 5}, fan_in);
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  float mn = 1e9f, mx = -1e9f;
  for (float v : w.values()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  EXPECT_GE(mn, -bound);
  EXPECT_LE(mx, bound);
  EXPECT_LT(mn, -0.5f * bound);
  EXPECT_GT(mx, 0.5f * bound);
  EXPECT_TRUE(w.is_param());
}

TEST(FeatureExtractor, ShapesAndStatModes) {
  Rng rng(32);
  auto f = FeatureExtractor::make(rng, 3, 8, 2, 8);
  EXPECT_EQ(f.feature_dim(), 8 * 2 * 2);

  auto x = test::random_tensor<float>(rng, {5, 3, 8, 8});
  BnSnapshot<float> snap;
  auto zb = f.forward_batch(x, &snap);
  EXPECT_EQ(zb.shape(), (Shape{5, 32}));
  ASSERT_EQ(snap.blocks.size(), 2u);

  // Same batch statistics math as forward_train.
  auto f2 = f;
  auto zt = f2.forward_train(x, nullptr, true);
  EXPECT_EQ(zb.values(), zt.values());

  // forward_batch left running buffers at init; forward_train moved them.
  EXPECT_EQ(f.bns[0].running_mean, (std::vector<float>(8, 0.f)));
  EXPECT_NE(f2.bns[0].running_mean, (std::vector<float>(8, 0.f)));

  // forward_with(support snapshot) equals the support-stat eval path.
  auto ze = f.forward_with(x, snap);
  auto f3 = bn_update_stats(f, x);
  auto ze2 = f3.forward_eval(x);
  ASSERT_EQ(ze.shape(), ze2.shape());
  for (size_t i = 0; i < ze.values().size(); ++i)
    EXPECT_NEAR(ze.values()[i], ze2.values()[i], 2e-5f);

}

TEST(FeatureExtractor, BnUpdateStatsContract) {
  Rng rng(33);
  auto f = FeatureExtractor::make(rng, 3, 8, 2, 8);
  auto one = test::random_tensor<float>(rng, {1, 3, 8, 8});
  EXPECT_THROW(bn_update_stats(f, one), ContractError);
  EXPECT_THROW(bn_update_stats(f, test::random_tensor<float>(rng, {4, 8, 8})), ShapeError);

  auto sup = test::random_tensor<float>(rng, {6, 3, 8, 8});
  auto before = f.bns[0].running_mean;
  auto g = bn_update_stats(f, sup);
  EXPECT_EQ(f.bns[0].running_mean, before);
  EXPECT_NE(g.bns[0].running_mean, before);
  for (float v : g.bns[0].running_var) EXPECT_GE(v, g.bns[0].eps);

  // Adapted copy's running stats equal the support batch statistics block 0.
  BnSnapshot<float> snap;
  f.forward_batch(sup, &snap);
  EXPECT_EQ(g.bns[0].running_mean, snap.blocks[0].mean);
}

TEST(Classifier, ForwardAndWidthCheck) {
  Rng rng(34);
  auto clf = Classifier::make(rng, 32, 10, 4);
  auto z = test::random_tensor<float>(rng, {3, 32});
  auto y = clf.forward(z);
  EXPECT_EQ(y.shape(), (Shape{3, 4}));
  EXPECT_THROW(clf.forward(test::random_tensor<float>(rng, {3, 16})), ShapeError);
}

TEST(ContextNet, OutputKeepsImageShape) {
  Rng rng(35);
  auto ctx = ContextNet::make(rng, 3, 6);
  auto x = test::random_tensor<float>(rng, {4, 3, 8, 8});
  auto y = ctx.forward_eval(x);
  EXPECT_EQ(y.shape(), (Shape{4, 3, 8, 8}));
  auto ctx2 = ctx;
  auto yt = ctx2.forward_train(x, true);
  EXPECT_EQ(yt.shape(), (Shape{4, 3, 8, 8}));
}

}  // namespace
}  // namespace xda
