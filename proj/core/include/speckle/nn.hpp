#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "speckle/digest.hpp"
#include "speckle/tensor.hpp"

namespace speckle {

enum class LayerKind {
    conv,
    transposed_conv,
    batch_norm,
    relu,
    sigmoid,
    fully_connected,
    concat_skip,
    flatten,
};

struct LayerSpec {
    LayerKind kind{};
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    int output_padding = 0;
    int in_features = 0;   // fully_connected
    int out_features = 0;  // fully_connected
    int skip_from = -1;    // concat_skip: index of the source layer
    bool trainable = true;
};

// Ordered layer chain; concat_skip layers additionally read the output
// of an earlier layer. Shapes are per sample (C, H, W).
struct NetworkSpec {
    std::vector<LayerSpec> layers;
    std::vector<int> input_shape;
    std::vector<int> output_shape;

    // Shape-checks the whole chain, including skip spatial compatibility.
    // Returns the per-layer output shapes.
    std::vector<std::vector<int>> validate() const;
};

// Digest of the architecture (trainable flags excluded, so a frozen
// variant accepts the same weight files).
Digest spec_digest(const NetworkSpec& spec);

// Small U-shaped encoder/decoder pair. Both share a 16/32/64 contracting
// path with two skip connections; the first ends in a 1x1 convolution,
// the second in a fully connected layer over the 16-channel feature map.
NetworkSpec build_lismu_fcn(int crop_size);
NetworkSpec build_lismu_ocn(int crop_size);

int parameterized_layer_count(const NetworkSpec& spec);

// Marks the k parameterized layers nearest the output (conv /
// transposed_conv / fully_connected) trainable and freezes the rest.
// A batch_norm inherits the status of the layer it follows.
NetworkSpec freeze_all_but_last_k(NetworkSpec spec, int k);

struct LayerParams {
    Tensor weight, bias;                 // conv/transposed_conv/fc
    Tensor gamma, beta;                  // batch_norm
    Tensor running_mean, running_var;    // batch_norm
    Tensor vel_weight, vel_bias, vel_gamma, vel_beta;
};

struct TrainState {
    std::vector<LayerParams> params;  // parallel to spec.layers
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
};

// He-uniform init for hidden conv/fc weights, Xavier-uniform for the
// output layer, all drawn from the portable generator and quantized to
// 32-bit-float resolution so a fresh state round-trips through the
// weight file exactly.
TrainState init_state(const NetworkSpec& spec, std::uint64_t seed);

enum class Mode { train, eval };

struct ForwardCache {
    Tensor input;
    std::vector<Tensor> activations;      // output of every layer
    std::vector<Tensor> bn_xhat;          // batch_norm normalized input
    std::vector<std::vector<double>> bn_invstd;
    std::vector<bool> bn_used_batch_stats;
    std::uint64_t step = 0;
    bool train_mode = false;
};

// Train mode uses batch statistics in every trainable batch_norm and
// updates its running stats; frozen batch_norms behave as in eval mode.
// Requires batch >= 2 in train mode.
Tensor forward(TrainState& state, const NetworkSpec& spec, const Tensor& batch, Mode mode,
               ForwardCache* cache = nullptr);

// Pure function of (state, batch); never mutates state.
Tensor eval_forward(const TrainState& state, const NetworkSpec& spec, const Tensor& batch);

struct LayerGrads {
    Tensor weight, bias;  // conv/transposed_conv/fc
    Tensor gamma, beta;   // batch_norm
};

// Gradients for trainable layers only; frozen layers have no entry.
struct GradSet {
    std::vector<std::optional<LayerGrads>> layers;
};

GradSet backward(const TrainState& state, const NetworkSpec& spec, const ForwardCache& cache,
                 const Tensor& loss_gradient);

// velocity = momentum * velocity + gradient; parameter -= lr * velocity.
// Rejects non-finite gradients ("divergence").
void sgd_step(TrainState& state, const NetworkSpec& spec, const GradSet& grads,
              double learning_rate, double momentum);

// LSMW weight file: parameters and batch-norm running statistics as
// little-endian 32-bit floats in spec order, plus step counter and seed.
void save_weights(const TrainState& state, const NetworkSpec& spec,
                  const std::filesystem::path& path);
TrainState load_weights(const NetworkSpec& spec, const std::filesystem::path& path);

}  // namespace speckle
