#pragma once

// Layer kernels with explicit forward caches and backward passes. Activations
// are row-major matrices; a batch of B sequences of length L is stacked as
// B*L rows (row b*L + t), one column per channel.

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "fetalsleep/random.hpp"

namespace fsn::layers {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using fsn::uniform01;

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;

  std::size_t out_len(std::size_t in_len) const { return (in_len + pad_left + pad_right - kernel) / stride + 1; }
};

/// Output length ceil(L/stride) with the padding split left-light.
ConvGeometry same_padding(std::size_t in_len, std::size_t kernel, std::size_t stride);

struct ConvCache {
  Mat cols;  // im2col, (B*Lout) x (K*Cin)
  std::size_t batch = 0, in_len = 0, out_len = 0, in_channels = 0;
  ConvGeometry geom;
};

/// w: (K*Cin) x Cout with row k*Cin + c; b: 1 x Cout.
Mat conv1d_forward(const Mat& x, std::size_t batch, std::size_t len, const Mat& w, const Mat& b,
                   const ConvGeometry& geom, ConvCache* cache);
/// Accumulates nothing: writes dw, db when non-null; returns dx when need_dx.
Mat conv1d_backward(const Mat& dy, const Mat& w, const ConvCache& cache, Mat* dw, Mat* db, bool need_dx);

Mat relu_forward(const Mat& x);
Mat relu_backward(const Mat& dy, const Mat& y);

struct PoolCache {
  std::vector<std::uint32_t> argmax;  // input row per output element
  std::size_t batch = 0, in_len = 0, out_len = 0, channels = 0;
};

/// Non-overlapping max pool of width `size`, last partial window kept.
Mat maxpool_forward(const Mat& x, std::size_t batch, std::size_t len, std::size_t size, PoolCache* cache);
Mat maxpool_backward(const Mat& dy, const PoolCache& cache);

/// Inverted dropout. With rng == nullptr (evaluation) this is the identity and
/// `mask` is left empty.
Mat dropout_forward(const Mat& x, double p, std::mt19937_64* rng, Mat* mask);
Mat dropout_backward(const Mat& dy, const Mat& mask);

/// y = x w + b; w: in x out, b: 1 x out.
Mat linear_forward(const Mat& x, const Mat& w, const Mat& b);
Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat* dw, Mat* db, bool need_dx);

struct LstmCache {
  std::vector<Mat> x, h_prev, c_prev, i, f, g, o, c;
};

/// One LSTM layer over T steps (xs[t]: B x D). w_ih: D x 4H, w_hh: H x 4H,
/// bias: 1 x 4H, gate blocks ordered i, f, g, o. h and c (B x H) are read as
/// the initial state and overwritten with the final one.
std::vector<Mat> lstm_forward(const std::vector<Mat>& xs, const Mat& w_ih, const Mat& w_hh, const Mat& bias,
                              Mat& h, Mat& c, LstmCache* cache);
/// Backprop through time from dhs (per-step output gradients). Gradients
/// into the initial state are dropped. Returns dxs when need_dx.
std::vector<Mat> lstm_backward(const std::vector<Mat>& dhs, const LstmCache& cache, const Mat& w_ih,
                               const Mat& w_hh, Mat* dw_ih, Mat* dw_hh, Mat* dbias, bool need_dx);

/// Row-wise softmax.
Mat softmax(const Mat& logits);

}  // namespace fsn::layers
