#pragma once

#include <cstdint>
#include <vector>

namespace speckle {

// Dense real array, row major, up to 4 dimensions (batch, channels,
// height, width).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[i]; }
    int rank() const { return static_cast<int>(shape.size()); }

    double& at4(int n, int c, int h, int w);
    double at4(int n, int c, int h, int w) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::int64_t shape_size(const std::vector<int>& shape);

}  // namespace speckle
