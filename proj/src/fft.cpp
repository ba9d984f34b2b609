#include "fetalsleep/fft.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fetalsleep/error.hpp"

namespace fsn::dsp {

namespace {

void radix2(std::vector<Complex>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  // Twiddles for the largest stage; smaller stages stride through it.
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<Complex> tw(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = {std::cos(angle), std::sin(angle)};
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * tw[k * stride];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

void bluestein(std::vector<Complex>& a, bool inverse) {
  const std::size_t n = a.size();
  const std::size_t m = next_pow2(2 * n - 1);
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<Complex> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small for long transforms.
    const auto k2 = static_cast<double>((static_cast<unsigned long long>(k) * k) % (2 * n));
    const double angle = sign * std::numbers::pi * k2 / static_cast<double>(n);
    chirp[k] = {std::cos(angle), std::sin(angle)};
  }
  std::vector<Complex> x(m), y(m);
  for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
  y[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) y[k] = y[m - k] = std::conj(chirp[k]);
  radix2(x, false);
  radix2(y, false);
  for (std::size_t k = 0; k < m; ++k) x[k] *= y[k];
  radix2(x, true);
  for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k] / static_cast<double>(m);
}

}  // namespace

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void fft_inplace(std::vector<Complex>& data, bool inverse) {
  const std::size_t n = data.size();
  if (n <= 1) return;
  if (is_pow2(n))
    radix2(data, inverse);
  else
    bluestein(data, inverse);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& v : data) v *= scale;
  }
}

std::vector<Complex> rfft(std::span<const double> signal, std::size_t n) {
  std::vector<Complex> data(n);
  const std::size_t m = std::min(n, signal.size());
  for (std::size_t i = 0; i < m; ++i) data[i] = signal[i];
  fft_inplace(data, false);
  return data;
}

std::vector<Complex> fft(std::vector<Complex> data) {
  fft_inplace(data, false);
  return data;
}

std::vector<Complex> ifft(std::vector<Complex> spectrum) {
  fft_inplace(spectrum, true);
  return spectrum;
}

std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h) {
  if (x.empty() || h.empty()) return {};
  const std::size_t out_len = x.size() + h.size() - 1;
  std::vector<double> out(out_len, 0.0);
  // Block length so each FFT is a few times the kernel length.
  const std::size_t nfft = next_pow2(std::max<std::size_t>(4 * h.size(), 1024));
  const std::size_t block = nfft - h.size() + 1;
  const auto hf = rfft(h, nfft);
  std::vector<Complex> buf(nfft);
  for (std::size_t start = 0; start < x.size(); start += block) {
    const std::size_t len = std::min(block, x.size() - start);
    std::fill(buf.begin(), buf.end(), Complex{});
    for (std::size_t i = 0; i < len; ++i) buf[i] = x[start + i];
    fft_inplace(buf, false);
    for (std::size_t k = 0; k < nfft; ++k) buf[k] *= hf[k];
    fft_inplace(buf, true);
    const std::size_t valid = std::min(nfft, out_len - start);
    for (std::size_t i = 0; i < valid; ++i) out[start + i] += buf[i].real();
  }
  return out;
}

}  // namespace fsn::dsp
