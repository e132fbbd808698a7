#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/matrix.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"
#include "test_util.hpp"

namespace {

using dmc::Mat;
using dmc::MatF;

// Naive triple loop, written independently of the engine's loop order.
template <typename T>
Mat<T> naive_matmul(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i)
    for (size_t j = 0; j < b.cols; ++j) {
      T acc = 0;
      for (size_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  return c;
}

TEST(Matrix, MatmulMatchesNaive) {
  dmc::Rng rng(7);
  for (auto [m, k, n] : {std::tuple<size_t, size_t, size_t>{3, 4, 5},
                         {1, 1, 1},
                         {17, 9, 23},
                         {64, 33, 8}}) {
    Mat<double> a(m, k), b(k, n);
    for (auto& x : a.data) x = rng.normal();
    for (auto& x : b.data) x = rng.normal();
    Mat<double> c;
    dmc::matmul(a, b, c);
    auto ref = naive_matmul(a, b);
    for (size_t i = 0; i < c.data.size(); ++i)
      EXPECT_NEAR(c.data[i], ref.data[i], 1e-12);
  }
}

TEST(Matrix, TransposedVariantsMatchExplicitTranspose) {
  dmc::Rng rng(11);
  Mat<double> a(13, 7), b(19, 7), d(13, 5);
  for (auto& x : a.data) x = rng.normal();
  for (auto& x : b.data) x = rng.normal();
  for (auto& x : d.data) x = rng.normal();

  Mat<double> nt, nt_ref;
  dmc::matmul_nt(a, b, nt);  // a @ b^T
  dmc::matmul(a, dmc::transpose(b), nt_ref);
  ASSERT_EQ(nt.rows, nt_ref.rows);
  ASSERT_EQ(nt.cols, nt_ref.cols);
  for (size_t i = 0; i < nt.data.size(); ++i)
    EXPECT_NEAR(nt.data[i], nt_ref.data[i], 1e-12);

  Mat<double> tn, tn_ref;
  dmc::matmul_tn(a, d, tn);  // a^T @ d
  dmc::matmul(dmc::transpose(a), d, tn_ref);
  ASSERT_EQ(tn.rows, tn_ref.rows);
  ASSERT_EQ(tn.cols, tn_ref.cols);
  for (size_t i = 0; i < tn.data.size(); ++i)
    EXPECT_NEAR(tn.data[i], tn_ref.data[i], 1e-12);
}

TEST(Matrix, ShapeMismatchRejected) {
  Mat<float> a(2, 3), b(4, 2), c;
  EXPECT_THROW(dmc::matmul(a, b, c), std::invalid_argument);
}

TEST(Mlp, IdentityForward) {
  dmc::Mlp<float> m;
  m.layer_sizes = {2, 2};
  MatF w(2, 2), b(1, 2);
  w.at(0, 0) = 1.0f;
  w.at(1, 1) = 1.0f;
  m.weights.push_back(w);
  m.biases.push_back(b);
  MatF in(1, 2);
  in.at(0, 0) = 1.0f;
  in.at(0, 1) = 2.0f;
  auto out = dmc::mlp_forward(m, in);
  EXPECT_FLOAT_EQ(out.at(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(out.at(0, 1), 2.0f);
}

TEST(Mlp, ReluClampsNegativePreactivation) {
  // weights [[1],[1]], bias [0], input [-3, 1]: pre-activation -2. A single
  // layer is the output layer (linear), so stack an identity second layer to
  // place ReLU on the hidden step.
  dmc::Mlp<float> m;
  m.layer_sizes = {2, 1, 1};
  MatF w0(2, 1), b0(1, 1), w1(1, 1), b1(1, 1);
  w0.at(0, 0) = 1.0f;
  w0.at(1, 0) = 1.0f;
  w1.at(0, 0) = 1.0f;
  m.weights = {w0, w1};
  m.biases = {b0, b1};
  MatF in(1, 2);
  in.at(0, 0) = -3.0f;
  in.at(0, 1) = 1.0f;
  auto out = dmc::mlp_forward(m, in);
  EXPECT_FLOAT_EQ(out.at(0, 0), 0.0f);
}

// Reference forward pass: per-sample scalar loops, no shared code with the
// engine's matmul path.
std::vector<double> reference_forward(const dmc::Mlp<double>& m,
                                      const std::vector<double>& x) {
  std::vector<double> cur = x;
  for (size_t l = 0; l < m.n_layers(); ++l) {
    const size_t in = m.layer_sizes[l], out = m.layer_sizes[l + 1];
    std::vector<double> next(out, 0.0);
    for (size_t j = 0; j < out; ++j) {
      double acc = m.biases[l].at(0, j);
      for (size_t i = 0; i < in; ++i) acc += cur[i] * m.weights[l].at(i, j);
      next[j] = acc;
    }
    if (l + 1 < m.n_layers())
      for (auto& v : next) v = v > 0 ? v : 0.0;
    cur = next;
  }
  return cur;
}

TEST(Mlp, RandomTwoLayerMatchesReference) {
  dmc::Rng rng(42);
  auto m = dmc::make_mlp<double>({5, 16, 3}, rng);
  Mat<double> in(4, 5);
  for (auto& v : in.data) v = rng.normal();
  auto out = dmc::mlp_forward(m, in);
  for (size_t r = 0; r < in.rows; ++r) {
    std::vector<double> x(in.row(r), in.row(r) + in.cols);
    auto ref = reference_forward(m, x);
    for (size_t j = 0; j < ref.size(); ++j)
      EXPECT_NEAR(out.at(r, j), ref[j], 1e-6);
  }
}

TEST(Mlp, InputDimMismatchNamesBothShapes) {
  dmc::Rng rng(1);
  auto m = dmc::make_mlp<float>({5, 8, 3}, rng);
  MatF in(2, 4);
  try {
    dmc::mlp_forward(m, in);
    FAIL() << "expected ValidationError";
  } catch (const dmc::ValidationError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find('4'), std::string::npos);
    EXPECT_NE(msg.find('5'), std::string::npos);
  }
}

TEST(Mlp, BackwardLinearProductRule) {
  // y = w * x, x = 3, upstream 1 -> dL/dw = 3.
  dmc::Mlp<float> m;
  m.layer_sizes = {1, 1};
  MatF w(1, 1), b(1, 1);
  w.at(0, 0) = 2.0f;
  m.weights = {w};
  m.biases = {b};
  MatF in(1, 1);
  in.at(0, 0) = 3.0f;
  dmc::MlpCache<float> cache;
  dmc::mlp_forward(m, in, &cache);
  MatF up(1, 1);
  up.at(0, 0) = 1.0f;
  auto g = dmc::mlp_backward(m, cache, up);
  EXPECT_FLOAT_EQ(g.dw[0].at(0, 0), 3.0f);
  EXPECT_FLOAT_EQ(g.db[0].at(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(g.dinput.at(0, 0), 2.0f);
}

TEST(Mlp, BiasGradientIsColumnSumOfUpstream) {
  dmc::Rng rng(3);
  auto m = dmc::make_mlp<float>({3, 2}, rng);
  MatF in(5, 3);
  for (auto& v : in.data) v = static_cast<float>(rng.normal());
  dmc::MlpCache<float> cache;
  dmc::mlp_forward(m, in, &cache);
  MatF up(5, 2);
  for (auto& v : up.data) v = static_cast<float>(rng.normal());
  auto g = dmc::mlp_backward(m, cache, up);
  for (size_t j = 0; j < 2; ++j) {
    float want = 0;
    for (size_t i = 0; i < 5; ++i) want += up.at(i, j);
    EXPECT_FLOAT_EQ(g.db[0].at(0, j), want);
  }
}

TEST(Mlp, GradCheckSmallArchitectures) {
  for (auto sizes : std::vector<std::vector<size_t>>{
           {4, 16, 16, 2}, {7, 32, 1}, {3, 8, 8, 8, 5}}) {
    auto res = testutil::grad_check(sizes, 4, 99);
    EXPECT_GE(res.pass_fraction(), 0.99)
        << "worst rel err " << res.worst_rel_err;
  }
}

TEST(Mlp, NonFiniteForwardRejected) {
  dmc::Rng rng(5);
  auto m = dmc::make_mlp<float>({2, 4, 1}, rng);
  m.weights[0].at(0, 0) = std::numeric_limits<float>::infinity();
  MatF in(1, 2);
  in.at(0, 0) = 1.0f;
  in.at(0, 1) = 1.0f;
  EXPECT_THROW(dmc::mlp_forward(m, in), dmc::NumericError);
}

TEST(Adam, ZeroGradLeavesParamsFixed) {
  std::vector<float> p = {1.0f, -2.0f};
  std::vector<float> g = {0.0f, 0.0f};
  auto st = dmc::AdamState<float>::shaped({2}, {});
  dmc::adam_step<float>({{p.data(), g.data(), 2}}, st);
  EXPECT_FLOAT_EQ(p[0], 1.0f);
  EXPECT_FLOAT_EQ(p[1], -2.0f);
  EXPECT_EQ(st.step, 1u);

  // Nonzero moments decay toward zero under zero gradients.
  std::vector<float> g1 = {1.0f, -1.0f};
  dmc::adam_step<float>({{p.data(), g1.data(), 2}}, st);
  const float m_after_kick = std::fabs(st.m[0][0]);
  for (int i = 0; i < 5; ++i) dmc::adam_step<float>({{p.data(), g.data(), 2}}, st);
  EXPECT_LT(std::fabs(st.m[0][0]), m_after_kick);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  std::vector<float> p = {0.5f};
  std::vector<float> g = {-3.7f};
  dmc::AdamConfig cfg;
  cfg.lr = 0.01;
  auto st = dmc::AdamState<float>::shaped({1}, cfg);
  dmc::adam_step<float>({{p.data(), g.data(), 1}}, st);
  EXPECT_NEAR(p[0], 0.5f + 0.01f, 1e-6);
}

TEST(Adam, QuadraticConvergesAndMatchesScalarRecurrence) {
  // Independent scalar recurrence for f(w) = (w-2)^2, lr 0.1.
  double m = 0, v = 0, w_ref = 0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 100; ++t) {
    const double grad = 2.0 * (w_ref - 2.0);
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w_ref -= lr * mh / (std::sqrt(vh) + eps);
  }
  EXPECT_NEAR(w_ref, 2.0, 0.05);

  std::vector<float> p = {0.0f};
  dmc::AdamConfig cfg;
  cfg.lr = 0.1;
  auto st = dmc::AdamState<float>::shaped({1}, cfg);
  for (int t = 0; t < 100; ++t) {
    std::vector<float> g = {2.0f * (p[0] - 2.0f)};
    dmc::adam_step<float>({{p.data(), g.data(), 1}}, st);
  }
  EXPECT_NEAR(p[0], w_ref, 1e-3);
  EXPECT_NEAR(p[0], 2.0, 0.05);
}

TEST(Adam, NonFiniteGradientRejectedWithIndex) {
  std::vector<float> p = {1.0f, 1.0f, 1.0f};
  std::vector<float> g = {0.0f, std::nanf(""), 0.0f};
  auto st = dmc::AdamState<float>::shaped({3}, {});
  try {
    dmc::adam_step<float>({{p.data(), g.data(), 3}}, st);
    FAIL() << "expected NumericError";
  } catch (const dmc::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
  EXPECT_EQ(st.step, 0u);  // state untouched on rejection
  EXPECT_FLOAT_EQ(p[1], 1.0f);
}

TEST(Checkpoint, RoundTripBitExact) {
  dmc::Rng rng(1234);
  auto m = dmc::make_mlp<float>({6, 32, 32, 2}, rng);
  std::ostringstream os(std::ios::binary);
  dmc::write_mlp(os, m);
  std::istringstream is(os.str(), std::ios::binary);
  auto m2 = dmc::read_mlp(is);
  ASSERT_EQ(m2.layer_sizes, m.layer_sizes);
  for (size_t l = 0; l < m.n_layers(); ++l) {
    ASSERT_EQ(0, std::memcmp(m.weights[l].data.data(),
                             m2.weights[l].data.data(),
                             m.weights[l].size() * sizeof(float)));
    ASSERT_EQ(0, std::memcmp(m.biases[l].data.data(),
                             m2.biases[l].data.data(),
                             m.biases[l].size() * sizeof(float)));
  }

  // Second serialization of the reloaded model is byte-identical.
  std::ostringstream os2(std::ios::binary);
  dmc::write_mlp(os2, m2);
  EXPECT_EQ(os.str(), os2.str());
}

TEST(Checkpoint, MultiRecordFileRoundTrip) {
  dmc::Rng rng(77);
  auto a = dmc::make_mlp<float>({3, 8, 1}, rng);
  auto b = dmc::make_mlp<float>({5, 4, 4, 2}, rng);
  const std::string path = ::testing::TempDir() + "/multi.dmcw";
  dmc::write_mlp_file(path, {&a, &b});
  auto models = dmc::read_mlp_file(path);
  ASSERT_EQ(models.size(), 2u);
  EXPECT_EQ(models[0].layer_sizes, a.layer_sizes);
  EXPECT_EQ(models[1].layer_sizes, b.layer_sizes);
  EXPECT_EQ(models[1].weights[2].data, b.weights[2].data);
}

TEST(Checkpoint, BadMagicRejected) {
  std::istringstream is("XXXX????", std::ios::binary);
  EXPECT_THROW(dmc::read_mlp(is), dmc::IoError);
}

TEST(Determinism, SameSeedSameParamsSameTraining) {
  auto run = [] {
    dmc::Rng rng(2024);
    auto m = dmc::make_mlp<float>({4, 16, 2}, rng);
    auto st = dmc::AdamState<float>::shaped(dmc::mlp_param_sizes(m), {});
    MatF in(8, 4), up(8, 2);
    dmc::Rng data_rng(55);
    for (auto& v : in.data) v = static_cast<float>(data_rng.normal());
    for (auto& v : up.data) v = static_cast<float>(data_rng.normal());
    for (int step = 0; step < 10; ++step) {
      dmc::MlpCache<float> cache;
      dmc::mlp_forward(m, in, &cache);
      auto g = dmc::mlp_backward(m, cache, up);
      dmc::adam_step(dmc::mlp_param_refs(m, g), st);
    }
    std::ostringstream os(std::ios::binary);
    dmc::write_mlp(os, m);
    return os.str();
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
