#include "fetalsleep/layers.hpp"

#include <cmath>
#include <limits>

#include "fetalsleep/error.hpp"

namespace fsn::layers {

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

ConvGeometry same_padding(std::size_t in_len, std::size_t kernel, std::size_t stride) {
  ConvGeometry g{kernel, stride, 0, 0};
  const std::size_t out = (in_len + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > in_len ? needed - in_len : 0;
  g.pad_left = total / 2;
  g.pad_right = total - g.pad_left;
  return g;
}

Mat conv1d_forward(const Mat& x, std::size_t batch, std::size_t len, const Mat& w, const Mat& b,
                   const ConvGeometry& geom, ConvCache* cache) {
  const auto cin = static_cast<std::size_t>(x.cols());
  if (static_cast<std::size_t>(x.rows()) != batch * len)
    throw ShapeError("conv input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(batch * len));
  if (static_cast<std::size_t>(w.rows()) != geom.kernel * cin || b.rows() != 1 || b.cols() != w.cols())
    throw ShapeError("conv weight shape does not match input channels");
  if (len + geom.pad_left + geom.pad_right < geom.kernel) throw ShapeError("conv input shorter than kernel");
  const std::size_t lout = geom.out_len(len);

  Mat cols = Mat::Zero(static_cast<Eigen::Index>(batch * lout), static_cast<Eigen::Index>(geom.kernel * cin));
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t t = 0; t < lout; ++t) {
      double* row = cols.row(static_cast<Eigen::Index>(bi * lout + t)).data();
      for (std::size_t k = 0; k < geom.kernel; ++k) {
        const auto src = static_cast<std::ptrdiff_t>(t * geom.stride + k) - static_cast<std::ptrdiff_t>(geom.pad_left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* in = x.row(static_cast<Eigen::Index>(bi * len + src)).data();
        for (std::size_t c = 0; c < cin; ++c) row[k * cin + c] = in[c];
      }
    }
  Mat y = cols * w;
  y.rowwise() += b.row(0);
  if (cache) {
    cache->cols = std::move(cols);
    cache->batch = batch;
    cache->in_len = len;
    cache->out_len = lout;
    cache->in_channels = cin;
    cache->geom = geom;
  }
  return y;
}

Mat conv1d_backward(const Mat& dy, const Mat& w, const ConvCache& cache, Mat* dw, Mat* db, bool need_dx) {
  if (dw) *dw = cache.cols.transpose() * dy;
  if (db) *db = dy.colwise().sum();
  if (!need_dx) return {};
  const Mat dcols = dy * w.transpose();
  const auto& g = cache.geom;
  const std::size_t cin = cache.in_channels;
  Mat dx = Mat::Zero(static_cast<Eigen::Index>(cache.batch * cache.in_len), static_cast<Eigen::Index>(cin));
  for (std::size_t bi = 0; bi < cache.batch; ++bi)
    for (std::size_t t = 0; t < cache.out_len; ++t) {
      const double* row = dcols.row(static_cast<Eigen::Index>(bi * cache.out_len + t)).data();
      for (std::size_t k = 0; k < g.kernel; ++k) {
        const auto src = static_cast<std::ptrdiff_t>(t * g.stride + k) - static_cast<std::ptrdiff_t>(g.pad_left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(cache.in_len)) continue;
        double* out = dx.row(static_cast<Eigen::Index>(bi * cache.in_len + src)).data();
        for (std::size_t c = 0; c < cin; ++c) out[c] += row[k * cin + c];
      }
    }
  return dx;
}

Mat relu_forward(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_backward(const Mat& dy, const Mat& y) {
  return dy.cwiseProduct((y.array() > 0.0).cast<double>().matrix());
}

Mat maxpool_forward(const Mat& x, std::size_t batch, std::size_t len, std::size_t size, PoolCache* cache) {
  if (size == 0) throw ShapeError("pool size must be positive");
  if (static_cast<std::size_t>(x.rows()) != batch * len) throw ShapeError("pool input row count mismatch");
  const std::size_t ch = static_cast<std::size_t>(x.cols());
  const std::size_t lout = (len + size - 1) / size;
  Mat y(static_cast<Eigen::Index>(batch * lout), static_cast<Eigen::Index>(ch));
  std::vector<std::uint32_t> arg(batch * lout * ch);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t c = 0; c < ch; ++c) {
        std::size_t best = bi * len + t * size;
        for (std::size_t k = t * size + 1; k < std::min(len, (t + 1) * size); ++k)
          if (x(static_cast<Eigen::Index>(bi * len + k), static_cast<Eigen::Index>(c)) >
              x(static_cast<Eigen::Index>(best), static_cast<Eigen::Index>(c)))
            best = bi * len + k;
        const std::size_t o = bi * lout + t;
        y(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c)) =
            x(static_cast<Eigen::Index>(best), static_cast<Eigen::Index>(c));
        arg[o * ch + c] = static_cast<std::uint32_t>(best);
      }
  if (cache) *cache = {std::move(arg), batch, len, lout, ch};
  return y;
}

Mat maxpool_backward(const Mat& dy, const PoolCache& cache) {
  Mat dx = Mat::Zero(static_cast<Eigen::Index>(cache.batch * cache.in_len), static_cast<Eigen::Index>(cache.channels));
  for (std::size_t o = 0; o < cache.batch * cache.out_len; ++o)
    for (std::size_t c = 0; c < cache.channels; ++c)
      dx(static_cast<Eigen::Index>(cache.argmax[o * cache.channels + c]), static_cast<Eigen::Index>(c)) +=
          dy(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c));
  return dx;
}

Mat dropout_forward(const Mat& x, double p, std::mt19937_64* rng, Mat* mask) {
  if (!rng || p <= 0.0) {
    if (mask) mask->resize(0, 0);
    return x;
  }
  if (p >= 1.0) throw ArgumentError("dropout probability must be below 1");
  const double scale = 1.0 / (1.0 - p);
  Mat m(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(*rng) >= p ? scale : 0.0;
  Mat y = x.cwiseProduct(m);
  if (mask) *mask = std::move(m);
  return y;
}

Mat dropout_backward(const Mat& dy, const Mat& mask) {
  if (mask.size() == 0) return dy;
  return dy.cwiseProduct(mask);
}

Mat linear_forward(const Mat& x, const Mat& w, const Mat& b) {
  if (x.cols() != w.rows() || b.cols() != w.cols()) throw ShapeError("linear layer shape mismatch");
  Mat y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat* dw, Mat* db, bool need_dx) {
  if (dw) *dw = x.transpose() * dy;
  if (db) *db = dy.colwise().sum();
  if (!need_dx) return {};
  return dy * w.transpose();
}

std::vector<Mat> lstm_forward(const std::vector<Mat>& xs, const Mat& w_ih, const Mat& w_hh, const Mat& bias,
                              Mat& h, Mat& c, LstmCache* cache) {
  const Eigen::Index hidden = w_hh.rows();
  if (w_hh.cols() != 4 * hidden || w_ih.cols() != 4 * hidden || bias.cols() != 4 * hidden)
    throw ShapeError("LSTM weight shapes inconsistent with hidden size " + std::to_string(hidden));
  if (h.cols() != hidden || c.cols() != hidden || h.rows() != c.rows())
    throw ShapeError("LSTM state shape mismatch");
  std::vector<Mat> hs;
  hs.reserve(xs.size());
  if (cache) *cache = {};
  for (const auto& x : xs) {
    if (x.cols() != w_ih.rows() || x.rows() != h.rows()) throw ShapeError("LSTM input shape mismatch");
    Mat z = x * w_ih + h * w_hh;
    z.rowwise() += bias.row(0);
    Mat i = z.leftCols(hidden).unaryExpr(&sigmoid);
    Mat f = z.middleCols(hidden, hidden).unaryExpr(&sigmoid);
    Mat g = z.middleCols(2 * hidden, hidden).array().tanh().matrix();
    Mat o = z.rightCols(hidden).unaryExpr(&sigmoid);
    Mat c_new = f.cwiseProduct(c) + i.cwiseProduct(g);
    Mat h_new = o.cwiseProduct(c_new.array().tanh().matrix());
    if (cache) {
      cache->x.push_back(x);
      cache->h_prev.push_back(h);
      cache->c_prev.push_back(c);
      cache->i.push_back(std::move(i));
      cache->f.push_back(std::move(f));
      cache->g.push_back(std::move(g));
      cache->o.push_back(std::move(o));
      cache->c.push_back(c_new);
    }
    c = std::move(c_new);
    h = h_new;
    hs.push_back(std::move(h_new));
  }
  return hs;
}

std::vector<Mat> lstm_backward(const std::vector<Mat>& dhs, const LstmCache& cache, const Mat& w_ih,
                               const Mat& w_hh, Mat* dw_ih, Mat* dw_hh, Mat* dbias, bool need_dx) {
  const std::size_t steps = cache.x.size();
  if (dhs.size() != steps) throw ShapeError("LSTM gradient length mismatch");
  const Eigen::Index hidden = w_hh.rows();
  Mat gw_ih = Mat::Zero(w_ih.rows(), w_ih.cols());
  Mat gw_hh = Mat::Zero(w_hh.rows(), w_hh.cols());
  Mat gb = Mat::Zero(1, 4 * hidden);
  std::vector<Mat> dxs(need_dx ? steps : 0);
  const Eigen::Index rows = steps ? cache.x.front().rows() : 0;
  Mat dh_next = Mat::Zero(rows, hidden);
  Mat dc_next = Mat::Zero(rows, hidden);
  Mat dz(rows, 4 * hidden);
  for (std::size_t s = steps; s-- > 0;) {
    const Mat dh = dhs[s] + dh_next;
    const Mat tc = cache.c[s].array().tanh().matrix();
    const auto& i = cache.i[s];
    const auto& f = cache.f[s];
    const auto& g = cache.g[s];
    const auto& o = cache.o[s];
    const Mat dc = dc_next + dh.cwiseProduct(o).cwiseProduct((1.0 - tc.array().square()).matrix());
    dz.leftCols(hidden) = dc.cwiseProduct(g).cwiseProduct(i.cwiseProduct((1.0 - i.array()).matrix()));
    dz.middleCols(hidden, hidden) =
        dc.cwiseProduct(cache.c_prev[s]).cwiseProduct(f.cwiseProduct((1.0 - f.array()).matrix()));
    dz.middleCols(2 * hidden, hidden) = dc.cwiseProduct(i).cwiseProduct((1.0 - g.array().square()).matrix());
    dz.rightCols(hidden) = dh.cwiseProduct(tc).cwiseProduct(o.cwiseProduct((1.0 - o.array()).matrix()));
    gw_ih.noalias() += cache.x[s].transpose() * dz;
    gw_hh.noalias() += cache.h_prev[s].transpose() * dz;
    gb += dz.colwise().sum();
    if (need_dx) dxs[s] = dz * w_ih.transpose();
    dh_next = dz * w_hh.transpose();
    dc_next = dc.cwiseProduct(f);
  }
  if (dw_ih) *dw_ih = std::move(gw_ih);
  if (dw_hh) *dw_hh = std::move(gw_hh);
  if (dbias) *dbias = std::move(gb);
  return dxs;
}

Mat softmax(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace fsn::layers
