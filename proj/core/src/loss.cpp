#include "speckle/loss.hpp"

#include <stdexcept>

namespace speckle {

namespace {

bool is_weighted(LayerKind k) {
    return k == LayerKind::conv || k == LayerKind::transposed_conv ||
           k == LayerKind::fully_connected;
}

struct Kernel3 {
    double k[3][3];
};

Kernel3 as_kernel(const std::array<std::array<int, 3>, 3>& m, bool transpose) {
    Kernel3 out;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            out.k[i][j] = transpose ? m[j][i] : m[i][j];
        }
    }
    return out;
}

// Valid-region cross-correlation responses of one image plane.
void respond(const double* img, int h, int w, const Kernel3& ker, double* resp) {
    for (int y = 0; y + 2 < h; ++y) {
        for (int x = 0; x + 2 < w; ++x) {
            double acc = 0.0;
            for (int u = 0; u < 3; ++u) {
                const double* row = img + static_cast<std::size_t>(y + u) * w + x;
                acc += ker.k[u][0] * row[0] + ker.k[u][1] * row[1] + ker.k[u][2] * row[2];
            }
            resp[static_cast<std::size_t>(y) * (w - 2) + x] = acc;
        }
    }
}

// Adjoint of respond: scatter 2*resp back through each kernel tap.
void respond_adjoint(const double* resp, int h, int w, const Kernel3& ker, double scale,
                     double* grad) {
    for (int y = 0; y + 2 < h; ++y) {
        for (int x = 0; x + 2 < w; ++x) {
            const double r = scale * resp[static_cast<std::size_t>(y) * (w - 2) + x];
            for (int u = 0; u < 3; ++u) {
                double* row = grad + static_cast<std::size_t>(y + u) * w + x;
                row[0] += ker.k[u][0] * r;
                row[1] += ker.k[u][1] * r;
                row[2] += ker.k[u][2] * r;
            }
        }
    }
}

void check_images(const Tensor& t, const char* who) {
    if (t.rank() != 4) throw std::invalid_argument(std::string(who) + ": expects (B,C,H,W)");
    if (t.shape[2] < 3 || t.shape[3] < 3) {
        throw std::invalid_argument(std::string(who) + ": spatial size must be at least 3x3");
    }
}

double edge_energy(const Tensor& images, bool sobel_part, bool laplacian_part) {
    check_images(images, "edge_energy");
    const int b = images.shape[0], c = images.shape[1];
    const int h = images.shape[2], w = images.shape[3];
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t vsize = static_cast<std::size_t>(h - 2) * (w - 2);
    const Kernel3 kh = as_kernel(LossConfig::kSobel, false);
    const Kernel3 kht = as_kernel(LossConfig::kSobel, true);
    const Kernel3 kl = as_kernel(LossConfig::kLaplacian, false);
    std::vector<double> resp(vsize);
    double total = 0.0;
    for (int i = 0; i < b * c; ++i) {
        const double* img = images.data.data() + i * plane;
        auto add = [&](const Kernel3& ker) {
            respond(img, h, w, ker, resp.data());
            for (double r : resp) total += r * r;
        };
        if (sobel_part) {
            add(kh);
            add(kht);
        }
        if (laplacian_part) add(kl);
    }
    return total / b;
}

}  // namespace

LossResult mse_loss(const Tensor& output, const Tensor& target) {
    if (!output.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
    if (output.rank() < 1 || output.shape[0] < 1) throw std::invalid_argument("mse_loss: empty batch");
    const double b = output.shape[0];
    LossResult res;
    res.grad = Tensor(output.shape);
    double sum = 0.0;
    for (std::size_t i = 0; i < output.data.size(); ++i) {
        const double d = output.data[i] - target.data[i];
        sum += d * d;
        res.grad.data[i] = 2.0 * d / b;
    }
    res.value = sum / b;
    return res;
}

LossResult balance_loss(const Tensor& output, const LossConfig& cfg) {
    check_images(output, "balance_loss");
    const int b = output.shape[0], c = output.shape[1];
    const int h = output.shape[2], w = output.shape[3];
    LossResult res;
    res.grad = Tensor(output.shape);
    if (cfg.balance_lambda == 0.0) return res;

    const Kernel3 kernels[3] = {
        as_kernel(LossConfig::kSobel, false),
        as_kernel(LossConfig::kSobel, true),
        as_kernel(LossConfig::kLaplacian, false),
    };
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t vsize = static_cast<std::size_t>(h - 2) * (w - 2);
    std::vector<double> resp(vsize);
    double energy = 0.0;
    for (int i = 0; i < b * c; ++i) {
        const double* img = output.data.data() + i * plane;
        double* grad = res.grad.data.data() + i * plane;
        for (const Kernel3& ker : kernels) {
            respond(img, h, w, ker, resp.data());
            for (double r : resp) energy += r * r;
            respond_adjoint(resp.data(), h, w, ker, 2.0 * cfg.balance_lambda / b, grad);
        }
    }
    res.value = cfg.balance_lambda * energy / b;
    return res;
}

double l2_loss(const TrainState& state, const NetworkSpec& spec, double sigma) {
    if (sigma < 0) throw std::invalid_argument("l2_loss: sigma must be >= 0");
    if (sigma == 0.0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (!is_weighted(spec.layers[i].kind) || !spec.layers[i].trainable) continue;
        for (double v : state.params[i].weight.data) sum += v * v;
    }
    return sigma * sum;
}

void add_l2_gradients(GradSet& grads, const TrainState& state, const NetworkSpec& spec,
                      double sigma) {
    if (sigma < 0) throw std::invalid_argument("add_l2_gradients: sigma must be >= 0");
    if (sigma == 0.0) return;
    if (grads.layers.empty()) grads.layers.resize(spec.layers.size());
    if (grads.layers.size() != spec.layers.size()) {
        throw std::invalid_argument("add_l2_gradients: gradient set does not match network");
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (!is_weighted(spec.layers[i].kind) || !spec.layers[i].trainable) continue;
        if (!grads.layers[i].has_value()) {
            LayerGrads lg;
            lg.weight = Tensor(state.params[i].weight.shape);
            lg.bias = Tensor(state.params[i].bias.shape);
            grads.layers[i] = std::move(lg);
        }
        auto& wgrad = grads.layers[i]->weight;
        const auto& w = state.params[i].weight;
        for (std::size_t k = 0; k < w.data.size(); ++k) wgrad.data[k] += 2.0 * sigma * w.data[k];
    }
}

TotalLoss total_loss(const Tensor& output, const Tensor& target, const TrainState& state,
                     const NetworkSpec& spec, const LossConfig& cfg) {
    TotalLoss out;
    LossResult m = mse_loss(output, target);
    LossResult bal = balance_loss(output, cfg);
    out.mse = m.value;
    out.balance = bal.value;
    out.l2 = l2_loss(state, spec, cfg.l2_sigma);
    out.total = out.mse + out.balance + out.l2;
    out.grad_output = std::move(m.grad);
    for (std::size_t i = 0; i < out.grad_output.data.size(); ++i) {
        out.grad_output.data[i] += bal.grad.data[i];
    }
    return out;
}

double sobel_energy(const Tensor& images) { return edge_energy(images, true, false); }

double laplacian_energy(const Tensor& images) { return edge_energy(images, false, true); }

}  // namespace speckle
