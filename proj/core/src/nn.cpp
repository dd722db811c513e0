#include "speckle/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "speckle/io.hpp"
#include "speckle/rng.hpp"

namespace speckle {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

constexpr double kBnEpsilon = 1e-5;
constexpr double kBnMomentum = 0.9;  // running = m*running + (1-m)*batch
constexpr std::uint16_t kLsmwVersion = 1;
constexpr char kLsmwMagic[4] = {'L', 'S', 'M', 'W'};

bool is_parameterized(LayerKind k) {
    return k == LayerKind::conv || k == LayerKind::transposed_conv ||
           k == LayerKind::fully_connected;
}

int conv_out_size(int in, int kernel, int stride, int padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

// Patch matrix for a kernel/stride/padding geometry: column (b, ph, pw)
// holds the K*K*C window of x centered on patch position (ph, pw);
// out-of-bounds taps are zero. col is (C*K*K) x (B*HP*WP).
void im2col(const Tensor& x, int channels, int height, int width, int kernel, int stride,
            int padding, int hp, int wp, Eigen::MatrixXd& col) {
    const int batch = x.shape[0];
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    col.setZero(static_cast<std::int64_t>(channels) * kernel * kernel,
                static_cast<std::int64_t>(batch) * hp * wp);
    for (int b = 0; b < batch; ++b) {
        const double* xb = x.data.data() + static_cast<std::int64_t>(b) * channels * plane;
        for (int ph = 0; ph < hp; ++ph) {
            for (int pw = 0; pw < wp; ++pw) {
                double* dst = col.col((static_cast<std::int64_t>(b) * hp + ph) * wp + pw).data();
                for (int c = 0; c < channels; ++c) {
                    const double* xc = xb + static_cast<std::int64_t>(c) * plane;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int y = ph * stride - padding + ky;
                        if (y < 0 || y >= height) {
                            dst += kernel;
                            continue;
                        }
                        const double* row = xc + static_cast<std::int64_t>(y) * width;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int xx = pw * stride - padding + kx;
                            *dst++ = (xx >= 0 && xx < width) ? row[xx] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into x.
void col2im(const Eigen::MatrixXd& col, int channels, int height, int width, int kernel,
            int stride, int padding, int hp, int wp, Tensor& x) {
    const int batch = x.shape[0];
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    for (int b = 0; b < batch; ++b) {
        double* xb = x.data.data() + static_cast<std::int64_t>(b) * channels * plane;
        for (int ph = 0; ph < hp; ++ph) {
            for (int pw = 0; pw < wp; ++pw) {
                const double* src = col.col((static_cast<std::int64_t>(b) * hp + ph) * wp + pw).data();
                for (int c = 0; c < channels; ++c) {
                    double* xc = xb + static_cast<std::int64_t>(c) * plane;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int y = ph * stride - padding + ky;
                        if (y < 0 || y >= height) {
                            src += kernel;
                            continue;
                        }
                        double* row = xc + static_cast<std::int64_t>(y) * width;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int xx = pw * stride - padding + kx;
                            if (xx >= 0 && xx < width) row[xx] += *src;
                            ++src;
                        }
                    }
                }
            }
        }
    }
}

std::string kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::transposed_conv: return "transposed_conv";
        case LayerKind::batch_norm: return "batch_norm";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::fully_connected: return "fully_connected";
        case LayerKind::concat_skip: return "concat_skip";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

}  // namespace

std::vector<std::vector<int>> NetworkSpec::validate() const {
    if (layers.empty()) throw std::invalid_argument("network: no layers");
    if (input_shape.size() != 3 || output_shape.size() != 3) {
        throw std::invalid_argument("network: input/output shapes must be (C,H,W)");
    }
    std::vector<std::vector<int>> shapes;
    shapes.reserve(layers.size());
    std::vector<int> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        auto fail = [&](const std::string& msg) {
            throw std::invalid_argument("layer " + std::to_string(i) + " (" + kind_name(l.kind) +
                                        "): " + msg);
        };
        switch (l.kind) {
            case LayerKind::conv: {
                if (cur.size() != 3) fail("expects (C,H,W) input");
                if (cur[0] != l.in_channels) fail("channel mismatch");
                if (l.kernel < 1 || l.stride < 1 || l.padding < 0) fail("bad geometry");
                const int ho = conv_out_size(cur[1], l.kernel, l.stride, l.padding);
                const int wo = conv_out_size(cur[2], l.kernel, l.stride, l.padding);
                if (ho < 1 || wo < 1) fail("output collapses to zero size");
                cur = {l.out_channels, ho, wo};
                break;
            }
            case LayerKind::transposed_conv: {
                if (cur.size() != 3) fail("expects (C,H,W) input");
                if (cur[0] != l.in_channels) fail("channel mismatch");
                if (l.kernel < 1 || l.stride < 1 || l.padding < 0 || l.output_padding < 0 ||
                    l.output_padding >= l.stride) {
                    fail("bad geometry");
                }
                const int ho = (cur[1] - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding;
                const int wo = (cur[2] - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding;
                if (ho < 1 || wo < 1) fail("output collapses to zero size");
                if (conv_out_size(ho, l.kernel, l.stride, l.padding) != cur[1] ||
                    conv_out_size(wo, l.kernel, l.stride, l.padding) != cur[2]) {
                    fail("geometry is not the adjoint of a convolution");
                }
                cur = {l.out_channels, ho, wo};
                break;
            }
            case LayerKind::batch_norm:
                if (cur.size() != 3) fail("expects (C,H,W) input");
                if (cur[0] != l.out_channels) fail("channel mismatch");
                break;
            case LayerKind::relu:
            case LayerKind::sigmoid:
                break;
            case LayerKind::flatten: {
                std::int64_t n = shape_size(cur);
                cur = {static_cast<int>(n)};
                break;
            }
            case LayerKind::fully_connected: {
                if (cur.size() != 1) fail("expects flattened input");
                if (cur[0] != l.in_features) fail("feature width mismatch");
                cur = {l.out_features};
                break;
            }
            case LayerKind::concat_skip: {
                if (l.skip_from < 0 || l.skip_from >= static_cast<int>(i)) {
                    fail("skip source out of range");
                }
                const auto& src = shapes[l.skip_from];
                if (cur.size() != 3 || src.size() != 3) fail("concat expects (C,H,W) inputs");
                if (cur[1] != src[1] || cur[2] != src[2]) {
                    fail("skip source spatial size does not match");
                }
                cur = {cur[0] + src[0], cur[1], cur[2]};
                break;
            }
        }
        shapes.push_back(cur);
    }
    if (shape_size(cur) != shape_size(output_shape)) {
        throw std::invalid_argument("network: final layer size does not match output shape");
    }
    return shapes;
}

Digest spec_digest(const NetworkSpec& spec) {
    ByteWriter w;
    w.raw("SPEC", 4);
    w.u16(1);
    auto dims = [&](const std::vector<int>& s) {
        w.u8(static_cast<std::uint8_t>(s.size()));
        for (int d : s) w.u32(static_cast<std::uint32_t>(d));
    };
    dims(spec.input_shape);
    dims(spec.output_shape);
    w.u32(static_cast<std::uint32_t>(spec.layers.size()));
    for (const auto& l : spec.layers) {
        w.u8(static_cast<std::uint8_t>(l.kind));
        w.u32(static_cast<std::uint32_t>(l.in_channels));
        w.u32(static_cast<std::uint32_t>(l.out_channels));
        w.u32(static_cast<std::uint32_t>(l.kernel));
        w.u32(static_cast<std::uint32_t>(l.stride));
        w.u32(static_cast<std::uint32_t>(l.padding));
        w.u32(static_cast<std::uint32_t>(l.output_padding));
        w.u32(static_cast<std::uint32_t>(l.in_features));
        w.u32(static_cast<std::uint32_t>(l.out_features));
        w.u32(static_cast<std::uint32_t>(l.skip_from));
    }
    return sha256(std::span<const std::uint8_t>(w.bytes().data(), w.bytes().size()));
}

namespace {

LayerSpec conv(int cin, int cout, int kernel, int stride, int padding) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.in_channels = cin;
    l.out_channels = cout;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
}

LayerSpec tconv(int cin, int cout, int kernel, int stride, int padding, int output_padding) {
    LayerSpec l;
    l.kind = LayerKind::transposed_conv;
    l.in_channels = cin;
    l.out_channels = cout;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.output_padding = output_padding;
    return l;
}

LayerSpec bn(int channels) {
    LayerSpec l;
    l.kind = LayerKind::batch_norm;
    l.in_channels = channels;
    l.out_channels = channels;
    return l;
}

LayerSpec activation(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
}

LayerSpec concat(int from) {
    LayerSpec l;
    l.kind = LayerKind::concat_skip;
    l.skip_from = from;
    return l;
}

LayerSpec fc(int in_features, int out_features) {
    LayerSpec l;
    l.kind = LayerKind::fully_connected;
    l.in_features = in_features;
    l.out_features = out_features;
    return l;
}

// Shared 16/32/64 U-shaped trunk; ends with the 16-channel full-size
// feature map (after the second decoder stage's ReLU at index 15).
std::vector<LayerSpec> lismu_trunk() {
    std::vector<LayerSpec> layers;
    layers.push_back(conv(1, 16, 3, 1, 1));    // 0
    layers.push_back(bn(16));                  // 1
    layers.push_back(activation(LayerKind::relu));  // 2  <- skip A
    layers.push_back(conv(16, 32, 3, 2, 1));   // 3
    layers.push_back(bn(32));                  // 4
    layers.push_back(activation(LayerKind::relu));  // 5  <- skip B
    layers.push_back(conv(32, 64, 3, 2, 1));   // 6
    layers.push_back(bn(64));                  // 7
    layers.push_back(activation(LayerKind::relu));  // 8
    layers.push_back(tconv(64, 32, 3, 2, 1, 1));    // 9
    layers.push_back(bn(32));                  // 10
    layers.push_back(activation(LayerKind::relu));  // 11
    layers.push_back(concat(5));               // 12: 32 + 32 channels
    layers.push_back(tconv(64, 16, 3, 2, 1, 1));    // 13
    layers.push_back(bn(16));                  // 14
    layers.push_back(activation(LayerKind::relu));  // 15
    return layers;
}

NetworkSpec finish_spec(std::vector<LayerSpec> layers, int crop_size) {
    NetworkSpec spec;
    spec.layers = std::move(layers);
    spec.input_shape = {1, crop_size, crop_size};
    spec.output_shape = {1, crop_size, crop_size};
    spec.validate();
    return spec;
}

void check_crop(int crop_size) {
    if (crop_size < 4 || crop_size % 4 != 0) {
        throw std::invalid_argument("crop_size must be divisible by 4");
    }
}

}  // namespace

NetworkSpec build_lismu_fcn(int crop_size) {
    check_crop(crop_size);
    auto layers = lismu_trunk();
    layers.push_back(concat(2));  // 16: 16 + 16 channels
    layers.push_back(conv(32, 1, 1, 1, 0));
    layers.push_back(activation(LayerKind::sigmoid));
    return finish_spec(std::move(layers), crop_size);
}

NetworkSpec build_lismu_ocn(int crop_size) {
    check_crop(crop_size);
    auto layers = lismu_trunk();
    layers.push_back(activation(LayerKind::flatten));
    layers.push_back(fc(16 * crop_size * crop_size, crop_size * crop_size));
    layers.push_back(activation(LayerKind::sigmoid));
    return finish_spec(std::move(layers), crop_size);
}

int parameterized_layer_count(const NetworkSpec& spec) {
    int n = 0;
    for (const auto& l : spec.layers) {
        if (is_parameterized(l.kind)) ++n;
    }
    return n;
}

NetworkSpec freeze_all_but_last_k(NetworkSpec spec, int k) {
    const int total = parameterized_layer_count(spec);
    if (k < 1 || k > total) {
        throw std::invalid_argument("freeze_all_but_last_k: k out of range (1.." +
                                    std::to_string(total) + ")");
    }
    int remaining = total - k;
    bool last_param_trainable = false;
    for (auto& l : spec.layers) {
        if (is_parameterized(l.kind)) {
            l.trainable = remaining <= 0;
            --remaining;
            last_param_trainable = l.trainable;
        } else if (l.kind == LayerKind::batch_norm) {
            l.trainable = last_param_trainable;
        } else {
            l.trainable = true;
        }
    }
    return spec;
}

TrainState init_state(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    TrainState state;
    state.seed = seed;
    state.params.resize(spec.layers.size());
    Rng rng(seed);

    int last_param = -1;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (is_parameterized(spec.layers[i].kind)) last_param = static_cast<int>(i);
    }

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        LayerParams& p = state.params[i];
        auto draw = [&](Tensor& t, double bound) {
            for (double& v : t.data) {
                // quantized so a fresh state survives the 32-bit weight file
                v = static_cast<double>(static_cast<float>(bound * (2.0 * rng.uniform01() - 1.0)));
            }
        };
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::transposed_conv: {
                const int fan_in = l.in_channels * l.kernel * l.kernel;
                const int fan_out = l.out_channels * l.kernel * l.kernel;
                p.weight = l.kind == LayerKind::conv
                               ? Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel})
                               : Tensor({l.in_channels, l.out_channels, l.kernel, l.kernel});
                p.bias = Tensor({l.out_channels});
                const double bound = static_cast<int>(i) == last_param
                                         ? std::sqrt(6.0 / (fan_in + fan_out))
                                         : std::sqrt(6.0 / fan_in);
                draw(p.weight, bound);
                p.vel_weight = Tensor(p.weight.shape);
                p.vel_bias = Tensor(p.bias.shape);
                break;
            }
            case LayerKind::fully_connected: {
                p.weight = Tensor({l.out_features, l.in_features});
                p.bias = Tensor({l.out_features});
                const double bound = static_cast<int>(i) == last_param
                                         ? std::sqrt(6.0 / (l.in_features + l.out_features))
                                         : std::sqrt(6.0 / l.in_features);
                draw(p.weight, bound);
                p.vel_weight = Tensor(p.weight.shape);
                p.vel_bias = Tensor(p.bias.shape);
                break;
            }
            case LayerKind::batch_norm: {
                p.gamma = Tensor({l.out_channels});
                std::fill(p.gamma.data.begin(), p.gamma.data.end(), 1.0);
                p.beta = Tensor({l.out_channels});
                p.running_mean = Tensor({l.out_channels});
                p.running_var = Tensor({l.out_channels});
                std::fill(p.running_var.data.begin(), p.running_var.data.end(), 1.0);
                p.vel_gamma = Tensor(p.gamma.shape);
                p.vel_beta = Tensor(p.beta.shape);
                break;
            }
            default:
                break;
        }
    }
    return state;
}

namespace {

Tensor forward_impl(const NetworkSpec& spec, const std::vector<LayerParams>& params,
                    std::vector<LayerParams>* mutable_params, const Tensor& batch, Mode mode,
                    ForwardCache* cache) {
    const auto shapes = spec.validate();
    if (params.size() != spec.layers.size()) {
        throw std::invalid_argument("forward: state does not match network");
    }
    if (batch.rank() != 4 || batch.shape[1] != spec.input_shape[0] ||
        batch.shape[2] != spec.input_shape[1] || batch.shape[3] != spec.input_shape[2]) {
        throw std::invalid_argument("forward: batch shape mismatch");
    }
    const int b = batch.shape[0];
    if (mode == Mode::train && b < 2) {
        throw std::invalid_argument("forward: train mode needs batch >= 2 for batch norm");
    }

    const std::size_t n_layers = spec.layers.size();
    std::vector<Tensor> acts(n_layers);
    std::vector<Tensor> bn_xhat(n_layers);
    std::vector<std::vector<double>> bn_invstd(n_layers);
    std::vector<bool> bn_batch(n_layers, false);

    auto batch_shape = [&](const std::vector<int>& per_sample) {
        std::vector<int> s;
        s.push_back(b);
        s.insert(s.end(), per_sample.begin(), per_sample.end());
        return s;
    };

    for (std::size_t i = 0; i < n_layers; ++i) {
        const LayerSpec& l = spec.layers[i];
        const Tensor& x = i == 0 ? batch : acts[i - 1];
        const std::vector<int> in_shape = i == 0 ? spec.input_shape : shapes[i - 1];

        switch (l.kind) {
            case LayerKind::conv: {
                const int ci = in_shape[0], h = in_shape[1], w = in_shape[2];
                const int ho = shapes[i][1], wo = shapes[i][2];
                const int co = l.out_channels;
                Eigen::MatrixXd col;
                im2col(x, ci, h, w, l.kernel, l.stride, l.padding, ho, wo, col);
                ConstMapRM wmat(params[i].weight.data.data(), co,
                                static_cast<std::int64_t>(ci) * l.kernel * l.kernel);
                Eigen::MatrixXd y = wmat * col;  // (co, b*ho*wo)
                Tensor out(batch_shape(shapes[i]));
                const std::int64_t spatial = static_cast<std::int64_t>(ho) * wo;
                for (int bb = 0; bb < b; ++bb) {
                    for (std::int64_t s = 0; s < spatial; ++s) {
                        const double* ycol = y.col(bb * spatial + s).data();
                        double* dst = out.data.data() + (static_cast<std::int64_t>(bb) * co) * spatial + s;
                        for (int c = 0; c < co; ++c) dst[c * spatial] = ycol[c] + params[i].bias.data[c];
                    }
                }
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::transposed_conv: {
                const int ci = in_shape[0], hi = in_shape[1], wi = in_shape[2];
                const int co = l.out_channels;
                const int ho = shapes[i][1], wo = shapes[i][2];
                const std::int64_t si = static_cast<std::int64_t>(hi) * wi;
                Eigen::MatrixXd xmat(ci, static_cast<std::int64_t>(b) * si);
                for (int bb = 0; bb < b; ++bb) {
                    for (std::int64_t s = 0; s < si; ++s) {
                        double* dst = xmat.col(bb * si + s).data();
                        const double* src = x.data.data() + (static_cast<std::int64_t>(bb) * ci) * si + s;
                        for (int c = 0; c < ci; ++c) dst[c] = src[c * si];
                    }
                }
                ConstMapRM vmat(params[i].weight.data.data(), ci,
                                static_cast<std::int64_t>(co) * l.kernel * l.kernel);
                Eigen::MatrixXd coly = vmat.transpose() * xmat;  // (co*K*K, b*si)
                Tensor out(batch_shape(shapes[i]));
                col2im(coly, co, ho, wo, l.kernel, l.stride, l.padding, hi, wi, out);
                const std::int64_t so = static_cast<std::int64_t>(ho) * wo;
                for (int bb = 0; bb < b; ++bb) {
                    for (int c = 0; c < co; ++c) {
                        double* plane = out.data.data() + (static_cast<std::int64_t>(bb) * co + c) * so;
                        const double bias = params[i].bias.data[c];
                        for (std::int64_t s = 0; s < so; ++s) plane[s] += bias;
                    }
                }
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::batch_norm: {
                const int c = in_shape[0];
                const std::int64_t plane = static_cast<std::int64_t>(in_shape[1]) * in_shape[2];
                const std::int64_t n_per_c = static_cast<std::int64_t>(b) * plane;
                const bool use_batch = mode == Mode::train && l.trainable;
                Tensor out(batch_shape(shapes[i]));
                Tensor xhat(out.shape);
                std::vector<double> invstd(c);
                for (int ch = 0; ch < c; ++ch) {
                    double mean, var;
                    if (use_batch) {
                        double sum = 0.0;
                        for (int bb = 0; bb < b; ++bb) {
                            const double* p = x.data.data() + (static_cast<std::int64_t>(bb) * c + ch) * plane;
                            for (std::int64_t s = 0; s < plane; ++s) sum += p[s];
                        }
                        mean = sum / static_cast<double>(n_per_c);
                        double sq = 0.0;
                        for (int bb = 0; bb < b; ++bb) {
                            const double* p = x.data.data() + (static_cast<std::int64_t>(bb) * c + ch) * plane;
                            for (std::int64_t s = 0; s < plane; ++s) sq += (p[s] - mean) * (p[s] - mean);
                        }
                        var = sq / static_cast<double>(n_per_c);
                        if (mutable_params != nullptr) {
                            auto& mp = (*mutable_params)[i];
                            mp.running_mean.data[ch] =
                                kBnMomentum * mp.running_mean.data[ch] + (1.0 - kBnMomentum) * mean;
                            mp.running_var.data[ch] =
                                kBnMomentum * mp.running_var.data[ch] + (1.0 - kBnMomentum) * var;
                        }
                    } else {
                        mean = params[i].running_mean.data[ch];
                        var = params[i].running_var.data[ch];
                    }
                    const double is = 1.0 / std::sqrt(var + kBnEpsilon);
                    invstd[ch] = is;
                    const double gamma = params[i].gamma.data[ch];
                    const double beta = params[i].beta.data[ch];
                    for (int bb = 0; bb < b; ++bb) {
                        const std::int64_t base = (static_cast<std::int64_t>(bb) * c + ch) * plane;
                        const double* p = x.data.data() + base;
                        double* xh = xhat.data.data() + base;
                        double* o = out.data.data() + base;
                        for (std::int64_t s = 0; s < plane; ++s) {
                            xh[s] = (p[s] - mean) * is;
                            o[s] = gamma * xh[s] + beta;
                        }
                    }
                }
                bn_xhat[i] = std::move(xhat);
                bn_invstd[i] = std::move(invstd);
                bn_batch[i] = use_batch;
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::relu: {
                Tensor out = x;
                for (double& v : out.data) v = v > 0.0 ? v : 0.0;
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::sigmoid: {
                Tensor out = x;
                for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::flatten: {
                Tensor out = x;
                out.shape = batch_shape(shapes[i]);
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::fully_connected: {
                const int in_f = l.in_features, out_f = l.out_features;
                ConstMapRM xm(x.data.data(), b, in_f);
                ConstMapRM wm(params[i].weight.data.data(), out_f, in_f);
                Tensor out(batch_shape(shapes[i]));
                MapRM ym(out.data.data(), b, out_f);
                ym.noalias() = xm * wm.transpose();
                Eigen::Map<const Eigen::VectorXd> bias(params[i].bias.data.data(), out_f);
                ym.rowwise() += bias.transpose();
                acts[i] = std::move(out);
                break;
            }
            case LayerKind::concat_skip: {
                const Tensor& skip = acts[l.skip_from];
                const int c1 = in_shape[0];
                const int c2 = shapes[l.skip_from][0];
                const std::int64_t plane = static_cast<std::int64_t>(in_shape[1]) * in_shape[2];
                Tensor out(batch_shape(shapes[i]));
                for (int bb = 0; bb < b; ++bb) {
                    std::memcpy(out.data.data() + static_cast<std::int64_t>(bb) * (c1 + c2) * plane,
                                x.data.data() + static_cast<std::int64_t>(bb) * c1 * plane,
                                sizeof(double) * c1 * plane);
                    std::memcpy(out.data.data() +
                                    (static_cast<std::int64_t>(bb) * (c1 + c2) + c1) * plane,
                                skip.data.data() + static_cast<std::int64_t>(bb) * c2 * plane,
                                sizeof(double) * c2 * plane);
                }
                acts[i] = std::move(out);
                break;
            }
        }
    }

    Tensor output = acts.back();
    output.shape = batch_shape(spec.output_shape);

    if (cache != nullptr) {
        cache->input = batch;
        cache->activations = std::move(acts);
        cache->bn_xhat = std::move(bn_xhat);
        cache->bn_invstd = std::move(bn_invstd);
        cache->bn_used_batch_stats = std::move(bn_batch);
        cache->train_mode = mode == Mode::train;
    }
    return output;
}

}  // namespace

Tensor forward(TrainState& state, const NetworkSpec& spec, const Tensor& batch, Mode mode,
               ForwardCache* cache) {
    Tensor out = forward_impl(spec, state.params, mode == Mode::train ? &state.params : nullptr,
                              batch, mode, cache);
    if (cache != nullptr) cache->step = state.step;
    return out;
}

Tensor eval_forward(const TrainState& state, const NetworkSpec& spec, const Tensor& batch) {
    return forward_impl(spec, state.params, nullptr, batch, Mode::eval, nullptr);
}

GradSet backward(const TrainState& state, const NetworkSpec& spec, const ForwardCache& cache,
                 const Tensor& loss_gradient) {
    const auto shapes = spec.validate();
    const std::size_t n_layers = spec.layers.size();
    if (cache.activations.size() != n_layers) {
        throw std::invalid_argument("backward: cache does not match network");
    }
    if (cache.step != state.step) {
        throw std::runtime_error("backward: stale forward cache (step counter mismatch)");
    }
    if (loss_gradient.size() != cache.activations.back().size()) {
        throw std::invalid_argument("backward: loss gradient shape mismatch");
    }
    const int b = cache.input.shape[0];

    GradSet grads;
    grads.layers.resize(n_layers);

    std::vector<Tensor> grad_at(n_layers);
    grad_at.back() = loss_gradient;
    grad_at.back().shape = cache.activations.back().shape;

    auto accumulate = [](Tensor& slot, const Tensor& g, const std::vector<int>& shape) {
        if (slot.data.empty()) {
            slot = g;
            slot.shape = shape;
        } else {
            for (std::size_t k = 0; k < slot.data.size(); ++k) slot.data[k] += g.data[k];
        }
    };

    for (std::size_t ii = n_layers; ii-- > 0;) {
        const LayerSpec& l = spec.layers[ii];
        if (grad_at[ii].data.empty()) {
            // output unused downstream (possible for frozen side branches)
            continue;
        }
        const Tensor& dy = grad_at[ii];
        const Tensor& x = ii == 0 ? cache.input : cache.activations[ii - 1];
        const std::vector<int> in_shape = ii == 0 ? spec.input_shape : shapes[ii - 1];
        const bool want_param_grads = l.trainable;
        const bool want_input_grad = ii > 0;

        switch (l.kind) {
            case LayerKind::conv: {
                const int ci = in_shape[0], h = in_shape[1], w = in_shape[2];
                const int ho = shapes[ii][1], wo = shapes[ii][2];
                const int co = l.out_channels;
                const std::int64_t spatial = static_cast<std::int64_t>(ho) * wo;
                Eigen::MatrixXd dymat(co, static_cast<std::int64_t>(b) * spatial);
                for (int bb = 0; bb < b; ++bb) {
                    for (std::int64_t s = 0; s < spatial; ++s) {
                        double* dst = dymat.col(bb * spatial + s).data();
                        const double* src =
                            dy.data.data() + (static_cast<std::int64_t>(bb) * co) * spatial + s;
                        for (int c = 0; c < co; ++c) dst[c] = src[c * spatial];
                    }
                }
                const std::int64_t ckk = static_cast<std::int64_t>(ci) * l.kernel * l.kernel;
                if (want_param_grads) {
                    Eigen::MatrixXd col;
                    im2col(x, ci, h, w, l.kernel, l.stride, l.padding, ho, wo, col);
                    LayerGrads lg;
                    lg.weight = Tensor(state.params[ii].weight.shape);
                    lg.bias = Tensor(state.params[ii].bias.shape);
                    MapRM dwm(lg.weight.data.data(), co, ckk);
                    dwm.noalias() = dymat * col.transpose();
                    for (int c = 0; c < co; ++c) lg.bias.data[c] = dymat.row(c).sum();
                    grads.layers[ii] = std::move(lg);
                }
                if (want_input_grad) {
                    ConstMapRM wmat(state.params[ii].weight.data.data(), co, ckk);
                    Eigen::MatrixXd dcol = wmat.transpose() * dymat;
                    Tensor dx(x.shape);
                    col2im(dcol, ci, h, w, l.kernel, l.stride, l.padding, ho, wo, dx);
                    accumulate(grad_at[ii - 1], dx, x.shape);
                }
                break;
            }
            case LayerKind::transposed_conv: {
                const int ci = in_shape[0], hi = in_shape[1], wi = in_shape[2];
                const int co = l.out_channels;
                const int ho = shapes[ii][1], wo = shapes[ii][2];
                const std::int64_t si = static_cast<std::int64_t>(hi) * wi;
                Eigen::MatrixXd coly;
                im2col(dy, co, ho, wo, l.kernel, l.stride, l.padding, hi, wi, coly);
                const std::int64_t ckk = static_cast<std::int64_t>(co) * l.kernel * l.kernel;
                if (want_param_grads) {
                    Eigen::MatrixXd xmat(ci, static_cast<std::int64_t>(b) * si);
                    for (int bb = 0; bb < b; ++bb) {
                        for (std::int64_t s = 0; s < si; ++s) {
                            double* dst = xmat.col(bb * si + s).data();
                            const double* src =
                                x.data.data() + (static_cast<std::int64_t>(bb) * ci) * si + s;
                            for (int c = 0; c < ci; ++c) dst[c] = src[c * si];
                        }
                    }
                    LayerGrads lg;
                    lg.weight = Tensor(state.params[ii].weight.shape);
                    lg.bias = Tensor(state.params[ii].bias.shape);
                    MapRM dvm(lg.weight.data.data(), ci, ckk);
                    dvm.noalias() = xmat * coly.transpose();
                    const std::int64_t so = static_cast<std::int64_t>(ho) * wo;
                    for (int c = 0; c < co; ++c) {
                        double sum = 0.0;
                        for (int bb = 0; bb < b; ++bb) {
                            const double* plane =
                                dy.data.data() + (static_cast<std::int64_t>(bb) * co + c) * so;
                            for (std::int64_t s = 0; s < so; ++s) sum += plane[s];
                        }
                        lg.bias.data[c] = sum;
                    }
                    grads.layers[ii] = std::move(lg);
                }
                if (want_input_grad) {
                    ConstMapRM vmat(state.params[ii].weight.data.data(), ci, ckk);
                    Eigen::MatrixXd dxm = vmat * coly;  // (ci, b*si)
                    Tensor dx(x.shape);
                    for (int bb = 0; bb < b; ++bb) {
                        for (std::int64_t s = 0; s < si; ++s) {
                            const double* src = dxm.col(bb * si + s).data();
                            double* dst =
                                dx.data.data() + (static_cast<std::int64_t>(bb) * ci) * si + s;
                            for (int c = 0; c < ci; ++c) dst[c * si] = src[c];
                        }
                    }
                    accumulate(grad_at[ii - 1], dx, x.shape);
                }
                break;
            }
            case LayerKind::batch_norm: {
                const int c = in_shape[0];
                const std::int64_t plane = static_cast<std::int64_t>(in_shape[1]) * in_shape[2];
                const std::int64_t n_per_c = static_cast<std::int64_t>(b) * plane;
                const Tensor& xhat = cache.bn_xhat[ii];
                const auto& invstd = cache.bn_invstd[ii];
                const bool used_batch = cache.bn_used_batch_stats[ii];
                Tensor dx(x.shape);
                LayerGrads lg;
                if (want_param_grads) {
                    lg.gamma = Tensor(state.params[ii].gamma.shape);
                    lg.beta = Tensor(state.params[ii].beta.shape);
                }
                for (int ch = 0; ch < c; ++ch) {
                    const double gamma = state.params[ii].gamma.data[ch];
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int bb = 0; bb < b; ++bb) {
                        const std::int64_t base = (static_cast<std::int64_t>(bb) * c + ch) * plane;
                        const double* pdy = dy.data.data() + base;
                        const double* pxh = xhat.data.data() + base;
                        for (std::int64_t s = 0; s < plane; ++s) {
                            sum_dy += pdy[s];
                            sum_dy_xhat += pdy[s] * pxh[s];
                        }
                    }
                    if (want_param_grads) {
                        lg.gamma.data[ch] = sum_dy_xhat;
                        lg.beta.data[ch] = sum_dy;
                    }
                    const double k = gamma * invstd[ch];
                    const double mean_dy = sum_dy / static_cast<double>(n_per_c);
                    const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(n_per_c);
                    for (int bb = 0; bb < b; ++bb) {
                        const std::int64_t base = (static_cast<std::int64_t>(bb) * c + ch) * plane;
                        const double* pdy = dy.data.data() + base;
                        const double* pxh = xhat.data.data() + base;
                        double* pdx = dx.data.data() + base;
                        if (used_batch) {
                            for (std::int64_t s = 0; s < plane; ++s) {
                                pdx[s] = k * (pdy[s] - mean_dy - pxh[s] * mean_dy_xhat);
                            }
                        } else {
                            for (std::int64_t s = 0; s < plane; ++s) pdx[s] = k * pdy[s];
                        }
                    }
                }
                if (want_param_grads) grads.layers[ii] = std::move(lg);
                if (want_input_grad) accumulate(grad_at[ii - 1], dx, x.shape);
                break;
            }
            case LayerKind::relu: {
                if (!want_input_grad) break;
                Tensor dx = dy;
                const Tensor& y = cache.activations[ii];
                for (std::size_t k = 0; k < dx.data.size(); ++k) {
                    if (y.data[k] <= 0.0) dx.data[k] = 0.0;
                }
                accumulate(grad_at[ii - 1], dx, x.shape);
                break;
            }
            case LayerKind::sigmoid: {
                if (!want_input_grad) break;
                Tensor dx = dy;
                const Tensor& y = cache.activations[ii];
                for (std::size_t k = 0; k < dx.data.size(); ++k) {
                    dx.data[k] *= y.data[k] * (1.0 - y.data[k]);
                }
                accumulate(grad_at[ii - 1], dx, x.shape);
                break;
            }
            case LayerKind::flatten: {
                if (!want_input_grad) break;
                Tensor dx = dy;
                dx.shape = x.shape;
                accumulate(grad_at[ii - 1], dx, x.shape);
                break;
            }
            case LayerKind::fully_connected: {
                const int in_f = l.in_features, out_f = l.out_features;
                ConstMapRM dym(dy.data.data(), b, out_f);
                if (want_param_grads) {
                    ConstMapRM xm(x.data.data(), b, in_f);
                    LayerGrads lg;
                    lg.weight = Tensor(state.params[ii].weight.shape);
                    lg.bias = Tensor(state.params[ii].bias.shape);
                    MapRM dwm(lg.weight.data.data(), out_f, in_f);
                    dwm.noalias() = dym.transpose() * xm;
                    Eigen::Map<Eigen::VectorXd> dbm(lg.bias.data.data(), out_f);
                    dbm = dym.colwise().sum().transpose();
                    grads.layers[ii] = std::move(lg);
                }
                if (want_input_grad) {
                    ConstMapRM wm(state.params[ii].weight.data.data(), out_f, in_f);
                    Tensor dx(x.shape);
                    MapRM dxm(dx.data.data(), b, in_f);
                    dxm.noalias() = dym * wm;
                    accumulate(grad_at[ii - 1], dx, x.shape);
                }
                break;
            }
            case LayerKind::concat_skip: {
                const int c1 = in_shape[0];
                const int c2 = shapes[l.skip_from][0];
                const std::int64_t plane = static_cast<std::int64_t>(in_shape[1]) * in_shape[2];
                if (want_input_grad) {
                    Tensor dx(x.shape);
                    for (int bb = 0; bb < b; ++bb) {
                        std::memcpy(dx.data.data() + static_cast<std::int64_t>(bb) * c1 * plane,
                                    dy.data.data() + static_cast<std::int64_t>(bb) * (c1 + c2) * plane,
                                    sizeof(double) * c1 * plane);
                    }
                    accumulate(grad_at[ii - 1], dx, x.shape);
                }
                Tensor dskip(cache.activations[l.skip_from].shape);
                for (int bb = 0; bb < b; ++bb) {
                    std::memcpy(dskip.data.data() + static_cast<std::int64_t>(bb) * c2 * plane,
                                dy.data.data() +
                                    (static_cast<std::int64_t>(bb) * (c1 + c2) + c1) * plane,
                                sizeof(double) * c2 * plane);
                }
                accumulate(grad_at[l.skip_from], dskip, dskip.shape);
                break;
            }
        }
    }
    return grads;
}

void sgd_step(TrainState& state, const NetworkSpec& spec, const GradSet& grads,
              double learning_rate, double momentum) {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_step: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw std::invalid_argument("sgd_step: momentum must be in [0,1)");
    }
    if (grads.layers.size() != spec.layers.size()) {
        throw std::invalid_argument("sgd_step: gradient set does not match network");
    }
    auto apply = [&](Tensor& param, Tensor& vel, const Tensor& grad) {
        if (grad.data.empty()) return;
        if (!grad.all_finite()) throw std::runtime_error("sgd_step: divergence (non-finite gradient)");
        for (std::size_t k = 0; k < param.data.size(); ++k) {
            vel.data[k] = momentum * vel.data[k] + grad.data[k];
            param.data[k] -= learning_rate * vel.data[k];
        }
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (!grads.layers[i].has_value()) continue;
        if (!spec.layers[i].trainable) {
            throw std::invalid_argument("sgd_step: gradient present for frozen layer " +
                                        std::to_string(i));
        }
        const LayerGrads& g = *grads.layers[i];
        LayerParams& p = state.params[i];
        apply(p.weight, p.vel_weight, g.weight);
        apply(p.bias, p.vel_bias, g.bias);
        apply(p.gamma, p.vel_gamma, g.gamma);
        apply(p.beta, p.vel_beta, g.beta);
    }
    ++state.step;
}

void save_weights(const TrainState& state, const NetworkSpec& spec,
                  const std::filesystem::path& path) {
    if (state.params.size() != spec.layers.size()) {
        throw std::invalid_argument("save_weights: state does not match network");
    }
    ByteWriter w;
    w.raw(kLsmwMagic, 4);
    w.u16(kLsmwVersion);
    const Digest d = spec_digest(spec);
    w.raw(d.data(), d.size());
    w.u64(state.step);
    w.u64(state.seed);
    auto blob = [&](const Tensor& t) {
        for (double v : t.data) w.f32(static_cast<float>(v));
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerParams& p = state.params[i];
        switch (spec.layers[i].kind) {
            case LayerKind::conv:
            case LayerKind::transposed_conv:
            case LayerKind::fully_connected:
                blob(p.weight);
                blob(p.bias);
                break;
            case LayerKind::batch_norm:
                blob(p.gamma);
                blob(p.beta);
                blob(p.running_mean);
                blob(p.running_var);
                break;
            default:
                break;
        }
    }
    atomic_write(path, w.bytes());
}

TrainState load_weights(const NetworkSpec& spec, const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    const std::uint8_t* magic = r.take(4);
    if (std::memcmp(magic, kLsmwMagic, 4) != 0) {
        throw std::runtime_error("bad weight file: " + path.string());
    }
    const std::uint16_t version = r.u16();
    if (version != kLsmwVersion) {
        throw std::runtime_error("bad weight file: unsupported version " + std::to_string(version));
    }
    Digest d{};
    std::memcpy(d.data(), r.take(32), 32);
    if (d != spec_digest(spec)) {
        throw std::runtime_error("shape mismatch: weight file was written for a different network");
    }

    TrainState state = init_state(spec, 0);
    state.step = r.u64();
    state.seed = r.u64();
    auto blob = [&](Tensor& t) {
        for (double& v : t.data) v = static_cast<double>(r.f32());
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerParams& p = state.params[i];
        switch (spec.layers[i].kind) {
            case LayerKind::conv:
            case LayerKind::transposed_conv:
            case LayerKind::fully_connected:
                blob(p.weight);
                blob(p.bias);
                std::fill(p.vel_weight.data.begin(), p.vel_weight.data.end(), 0.0);
                std::fill(p.vel_bias.data.begin(), p.vel_bias.data.end(), 0.0);
                break;
            case LayerKind::batch_norm:
                blob(p.gamma);
                blob(p.beta);
                blob(p.running_mean);
                blob(p.running_var);
                std::fill(p.vel_gamma.data.begin(), p.vel_gamma.data.end(), 0.0);
                std::fill(p.vel_beta.data.begin(), p.vel_beta.data.end(), 0.0);
                break;
            default:
                break;
        }
    }
    if (r.remaining() != 0) throw std::runtime_error("bad weight file: trailing bytes");
    return state;
}

}  // namespace speckle
