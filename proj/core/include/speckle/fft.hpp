#pragma once

#include <complex>
#include <vector>

namespace speckle {

// 2D DFT on an n*n grid, row major. Forward uses the negative-exponent
// convention and is unnormalized; inverse applies the 1/n^2 factor, so
// ifft2d(fft2d(x)) == x up to roundoff. Thread safe.
std::vector<std::complex<double>> fft2d(const std::vector<std::complex<double>>& in, int n);
std::vector<std::complex<double>> ifft2d(const std::vector<std::complex<double>>& in, int n);

}  // namespace speckle
