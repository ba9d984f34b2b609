#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace fsn::dsp {

using Complex = std::complex<double>;

std::size_t next_pow2(std::size_t n);
bool is_pow2(std::size_t n);

/// In-place DFT, X[k] = sum_n x[n] e^{-2 pi i k n / N}. Powers of two use an
/// iterative radix-2 transform; other lengths go through Bluestein's chirp-z.
/// The inverse includes the 1/N factor.
void fft_inplace(std::vector<Complex>& data, bool inverse = false);

/// DFT of a real signal zero-padded (or truncated) to `n` points.
std::vector<Complex> rfft(std::span<const double> signal, std::size_t n);
std::vector<Complex> fft(std::vector<Complex> data);
std::vector<Complex> ifft(std::vector<Complex> spectrum);

/// Linear convolution (length x.size() + h.size() - 1) by FFT overlap-add.
std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h);

}  // namespace fsn::dsp
