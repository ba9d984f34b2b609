// Each layer kernel against central finite differences of L = sum(R .* y).
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "fetalsleep/error.hpp"
#include "fetalsleep/layers.hpp"

using fsn::layers::Mat;
namespace L = fsn::layers;

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6}); }

// Perturbs every entry of `param` and compares dL/dparam with `analytic`.
void expect_fd(Mat& param, const Mat& analytic, const std::function<double()>& loss, const char* what) {
  ASSERT_EQ(param.rows(), analytic.rows()) << what;
  ASSERT_EQ(param.cols(), analytic.cols()) << what;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double keep = param.data()[i];
    param.data()[i] = keep + kStep;
    const double up = loss();
    param.data()[i] = keep - kStep;
    const double down = loss();
    param.data()[i] = keep;
    worst = std::max(worst, rel_err((up - down) / (2 * kStep), analytic.data()[i]));
  }
  EXPECT_LT(worst, kTol) << what;
}

double dot(const Mat& a, const Mat& b) { return a.cwiseProduct(b).sum(); }

}  // namespace

TEST(Layers, SamePaddingMatchesReferenceGeometry) {
  const auto g1 = L::same_padding(3000, 50, 25);
  EXPECT_EQ(g1.out_len(3000), 120u);
  EXPECT_EQ(g1.pad_left, 12u);
  EXPECT_EQ(g1.pad_right, 13u);
  const auto g2 = L::same_padding(15, 8, 1);
  EXPECT_EQ(g2.out_len(15), 15u);
  EXPECT_EQ(g2.pad_left + g2.pad_right, 7u);
}

TEST(Layers, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(1);
  const std::size_t batch = 2, len = 11, cin = 3, cout = 4;
  const L::ConvGeometry g{5, 2, 1, 2};
  Mat x = randn(batch * len, cin, rng), w = randn(5 * cin, cout, rng), b = randn(1, cout, rng);
  const Mat y = L::conv1d_forward(x, batch, len, w, b, g, nullptr);
  const std::size_t lout = g.out_len(len);
  ASSERT_EQ(static_cast<std::size_t>(y.rows()), batch * lout);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b(0, o);
        for (std::size_t k = 0; k < 5; ++k) {
          const long src = static_cast<long>(t * 2 + k) - 1;
          if (src < 0 || src >= static_cast<long>(len)) continue;
          for (std::size_t c = 0; c < cin; ++c) acc += x(bi * len + src, c) * w(k * cin + c, o);
        }
        EXPECT_NEAR(y(bi * lout + t, o), acc, 1e-12);
      }
}

TEST(Layers, ConvGradients) {
  std::mt19937_64 rng(2);
  const std::size_t batch = 2, len = 13;
  const L::ConvGeometry g{4, 3, 1, 2};
  Mat x = randn(batch * len, 2, rng), w = randn(8, 3, rng), b = randn(1, 3, rng);
  const Mat r = randn(batch * g.out_len(len), 3, rng);
  L::ConvCache cache;
  L::conv1d_forward(x, batch, len, w, b, g, &cache);
  Mat dw, db;
  const Mat dx = L::conv1d_backward(r, w, cache, &dw, &db, true);
  auto loss = [&] { return dot(r, L::conv1d_forward(x, batch, len, w, b, g, nullptr)); };
  expect_fd(w, dw, loss, "conv weight");
  expect_fd(b, db, loss, "conv bias");
  expect_fd(x, dx, loss, "conv input");
}

TEST(Layers, MaxPoolGradientsAndPartialWindow) {
  std::mt19937_64 rng(3);
  Mat x = randn(2 * 15, 3, rng);
  L::PoolCache cache;
  const Mat y = L::maxpool_forward(x, 2, 15, 4, &cache);
  ASSERT_EQ(y.rows(), 2 * 4);
  // Last window of each sequence covers rows 12..14 only.
  EXPECT_DOUBLE_EQ(y(3, 0), x.block(12, 0, 3, 1).maxCoeff());
  const Mat r = randn(y.rows(), y.cols(), rng);
  const Mat dx = L::maxpool_backward(r, cache);
  expect_fd(x, dx, [&] { return dot(r, L::maxpool_forward(x, 2, 15, 4, nullptr)); }, "pool input");
}

TEST(Layers, ReluGradient) {
  std::mt19937_64 rng(4);
  Mat x = randn(6, 5, rng);
  const Mat y = L::relu_forward(x);
  const Mat r = randn(6, 5, rng);
  expect_fd(x, L::relu_backward(r, y), [&] { return dot(r, L::relu_forward(x)); }, "relu");
}

TEST(Layers, LinearGradients) {
  std::mt19937_64 rng(5);
  Mat x = randn(4, 6, rng), w = randn(6, 3, rng), b = randn(1, 3, rng);
  const Mat r = randn(4, 3, rng);
  Mat dw, db;
  const Mat dx = L::linear_backward(r, x, w, &dw, &db, true);
  auto loss = [&] { return dot(r, L::linear_forward(x, w, b)); };
  expect_fd(w, dw, loss, "fc weight");
  expect_fd(b, db, loss, "fc bias");
  expect_fd(x, dx, loss, "fc input");
}

TEST(Layers, DropoutEvalIsIdentityAndTrainMaskGradient) {
  std::mt19937_64 rng(6);
  Mat x = randn(5, 4, rng);
  Mat mask;
  EXPECT_EQ(L::dropout_forward(x, 0.5, nullptr, &mask), x);
  EXPECT_EQ(mask.size(), 0);
  const Mat r = randn(5, 4, rng);
  expect_fd(x, L::dropout_backward(r, mask), [&] { return dot(r, L::dropout_forward(x, 0.5, nullptr, nullptr)); },
            "dropout eval");
  // Train mode with a replayed mask.
  auto run = [&] {
    std::mt19937_64 g(99);
    return L::dropout_forward(x, 0.3, &g, &mask);
  };
  run();
  const Mat fixed_mask = mask;
  for (Eigen::Index i = 0; i < fixed_mask.size(); ++i) {
    const double v = fixed_mask.data()[i];
    EXPECT_TRUE(v == 0.0 || std::fabs(v - 1.0 / 0.7) < 1e-15);
  }
  expect_fd(x, L::dropout_backward(r, fixed_mask), [&] { return dot(r, run()); }, "dropout train");
}

TEST(Layers, LstmGradients) {
  std::mt19937_64 rng(7);
  const Eigen::Index B = 2, D = 3, H = 4, T = 5;
  std::vector<Mat> xs;
  for (int t = 0; t < T; ++t) xs.push_back(randn(B, D, rng));
  Mat w_ih = randn(D, 4 * H, rng, 0.5), w_hh = randn(H, 4 * H, rng, 0.5), bias = randn(1, 4 * H, rng, 0.5);
  const Mat h0 = randn(B, H, rng, 0.5), c0 = randn(B, H, rng, 0.5);
  std::vector<Mat> rs;
  for (int t = 0; t < T; ++t) rs.push_back(randn(B, H, rng));
  auto loss = [&] {
    Mat h = h0, c = c0;
    const auto hs = L::lstm_forward(xs, w_ih, w_hh, bias, h, c, nullptr);
    double s = 0;
    for (int t = 0; t < T; ++t) s += dot(rs[t], hs[t]);
    return s;
  };
  Mat h = h0, c = c0;
  L::LstmCache cache;
  L::lstm_forward(xs, w_ih, w_hh, bias, h, c, &cache);
  Mat dw_ih, dw_hh, db;
  const auto dxs = L::lstm_backward(rs, cache, w_ih, w_hh, &dw_ih, &dw_hh, &db, true);
  expect_fd(w_ih, dw_ih, loss, "lstm w_ih");
  expect_fd(w_hh, dw_hh, loss, "lstm w_hh");
  expect_fd(bias, db, loss, "lstm bias");
  for (int t = 0; t < T; ++t) expect_fd(xs[t], dxs[t], loss, "lstm input");
}

TEST(Layers, LstmCarriesState) {
  std::mt19937_64 rng(8);
  std::vector<Mat> xs;
  for (int t = 0; t < 6; ++t) xs.push_back(randn(1, 2, rng));
  const Mat w_ih = randn(2, 12, rng), w_hh = randn(3, 12, rng), bias = randn(1, 12, rng);
  Mat h = Mat::Zero(1, 3), c = Mat::Zero(1, 3);
  const auto whole = L::lstm_forward(xs, w_ih, w_hh, bias, h, c, nullptr);
  Mat h2 = Mat::Zero(1, 3), c2 = Mat::Zero(1, 3);
  auto first = L::lstm_forward({xs.begin(), xs.begin() + 3}, w_ih, w_hh, bias, h2, c2, nullptr);
  auto second = L::lstm_forward({xs.begin() + 3, xs.end()}, w_ih, w_hh, bias, h2, c2, nullptr);
  for (int t = 0; t < 3; ++t) {
    EXPECT_EQ(first[t], whole[t]);
    EXPECT_EQ(second[t], whole[t + 3]);
  }
}

TEST(Layers, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(9);
  const Mat p = L::softmax(randn(7, 5, rng, 30.0));
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
}

TEST(Layers, ShapeMismatchThrows) {
  Mat x = Mat::Zero(10, 2), w = Mat::Zero(9, 1), b = Mat::Zero(1, 1);
  EXPECT_THROW(L::conv1d_forward(x, 1, 10, w, b, {3, 1, 0, 0}, nullptr), fsn::ShapeError);
  EXPECT_THROW(L::conv1d_forward(x, 2, 10, Mat::Zero(6, 1), b, {3, 1, 0, 0}, nullptr), fsn::ShapeError);
}
