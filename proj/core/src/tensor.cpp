#include "speckle/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace speckle {

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    if (shape.empty() || shape.size() > 4) {
        throw std::invalid_argument("tensor: rank must be 1..4");
    }
    data.assign(static_cast<std::size_t>(shape_size(shape)), 0.0);
}

double& Tensor::at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
}

double Tensor::at4(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace speckle
