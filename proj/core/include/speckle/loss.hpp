#pragma once

#include <array>

#include "speckle/nn.hpp"
#include "speckle/tensor.hpp"

namespace speckle {

// Training objective: summed-square error plus a signed edge-energy term
// (positive balance_lambda favors smooth output, negative favors sharp)
// plus L2 weight decay.
struct LossConfig {
    double balance_lambda = 0.0;
    double l2_sigma = 1e-4;

    static constexpr std::array<std::array<int, 3>, 3> kSobel{
        {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}};
    static constexpr std::array<std::array<int, 3>, 3> kLaplacian{
        {{0, 1, 0}, {1, -4, 1}, {0, 1, 0}}};
};

struct LossResult {
    double value = 0.0;
    Tensor grad;  // w.r.t. the network output
};

// Sum of squared differences over all pixels, averaged over the batch.
LossResult mse_loss(const Tensor& output, const Tensor& target);

// lambda * (||sobel*y||^2 + ||sobel^T*y||^2 + ||laplacian*y||^2), valid
// region only, averaged over the batch.
LossResult balance_loss(const Tensor& output, const LossConfig& cfg);

// sigma * sum w^2 over trainable conv/fc weights (biases and batch-norm
// affine parameters excluded).
double l2_loss(const TrainState& state, const NetworkSpec& spec, double sigma);

// Adds the 2*sigma*w term to the weight gradients of trainable layers,
// creating entries as needed.
void add_l2_gradients(GradSet& grads, const TrainState& state, const NetworkSpec& spec,
                      double sigma);

struct TotalLoss {
    double total = 0.0;
    double mse = 0.0;
    double balance = 0.0;
    double l2 = 0.0;
    Tensor grad_output;
};

TotalLoss total_loss(const Tensor& output, const Tensor& target, const TrainState& state,
                     const NetworkSpec& spec, const LossConfig& cfg);

// Raw edge responses, exposed for output-texture analysis: sum over the
// valid region of squared Sobel (both orientations) or Laplacian taps,
// averaged over the batch.
double sobel_energy(const Tensor& images);
double laplacian_energy(const Tensor& images);

}  // namespace speckle
