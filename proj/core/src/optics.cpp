#include "speckle/optics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "speckle/fft.hpp"
#include "speckle/io.hpp"
#include "speckle/rng.hpp"

namespace speckle {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void append_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

void OpticalConfig::validate() const {
    if (wavelength_m <= 0 || z1_m <= 0 || z2_m <= 0 || pixel_pitch_m <= 0) {
        throw std::invalid_argument("optical config: lengths must be strictly positive");
    }
    if (delta_n <= 0) throw std::invalid_argument("optical config: delta_n must be positive");
    if (crop_size <= 0 || display_size < crop_size || grid_size < display_size) {
        throw std::invalid_argument("optical config: need grid_size >= display_size >= crop_size > 0");
    }
    if (grid_size % 2 != 0) throw std::invalid_argument("optical config: grid_size must be even");
}

Digest config_digest(const OpticalConfig& cfg) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(64);
    append_f64(bytes, cfg.wavelength_m);
    append_f64(bytes, cfg.delta_n);
    append_f64(bytes, cfg.z1_m);
    append_f64(bytes, cfg.z2_m);
    append_f64(bytes, cfg.pixel_pitch_m);
    append_u32(bytes, static_cast<std::uint32_t>(cfg.grid_size));
    append_u32(bytes, static_cast<std::uint32_t>(cfg.display_size));
    append_u32(bytes, static_cast<std::uint32_t>(cfg.crop_size));
    bytes.push_back(cfg.literal_ordering ? 1 : 0);
    bytes.push_back(cfg.height_map_mode ? 1 : 0);
    return sha256(bytes);
}

DiffuserScreen make_diffuser(const OpticalConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t n = static_cast<std::size_t>(cfg.grid_size) * cfg.grid_size;
    DiffuserScreen screen;
    screen.grid_size = cfg.grid_size;
    screen.seed = seed;
    screen.amplitude.resize(n);
    screen.phase.resize(n);

    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) screen.amplitude[i] = rng.uniform01f();
    if (cfg.height_map_mode) {
        // Surface height D uniform on [0, lambda/delta_n), so the induced
        // phase (2*pi*delta_n/lambda)*D is uniform on [0, 2*pi).
        const double height_range = cfg.wavelength_m / cfg.delta_n;
        const double phase_per_height = kTwoPi * cfg.delta_n / cfg.wavelength_m;
        for (std::size_t i = 0; i < n; ++i) {
            const double height = static_cast<double>(rng.uniform01f()) * height_range;
            screen.phase[i] = static_cast<float>(std::fmod(phase_per_height * height, kTwoPi));
        }
    } else {
        // The 24-bit uniform keeps the float product strictly below 2*pi.
        for (std::size_t i = 0; i < n; ++i) {
            screen.phase[i] = rng.uniform01f() * static_cast<float>(kTwoPi);
        }
    }
    return screen;
}

namespace {
constexpr std::uint16_t kLsdsVersion = 1;
constexpr char kLsdsMagic[4] = {'L', 'S', 'D', 'S'};
}  // namespace

void write_lsds(const DiffuserScreen& screen, const std::filesystem::path& path) {
    ByteWriter w;
    w.raw(kLsdsMagic, 4);
    w.u16(kLsdsVersion);
    w.u32(static_cast<std::uint32_t>(screen.grid_size));
    w.u64(screen.seed);
    for (float v : screen.amplitude) w.f32(v);
    for (float v : screen.phase) w.f32(v);
    atomic_write(path, w.bytes());
}

DiffuserScreen read_lsds(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    const std::uint8_t* magic = r.take(4);
    if (std::memcmp(magic, kLsdsMagic, 4) != 0) {
        throw std::runtime_error("not an LSDS diffuser file: " + path.string());
    }
    const std::uint16_t version = r.u16();
    if (version != kLsdsVersion) {
        throw std::runtime_error("unsupported LSDS version " + std::to_string(version));
    }
    DiffuserScreen screen;
    screen.grid_size = static_cast<int>(r.u32());
    screen.seed = r.u64();
    if (screen.grid_size <= 0) throw std::runtime_error("bad LSDS grid size");
    const std::size_t n = static_cast<std::size_t>(screen.grid_size) * screen.grid_size;
    screen.amplitude.resize(n);
    for (auto& v : screen.amplitude) v = r.f32();
    screen.phase.resize(n);
    for (auto& v : screen.phase) v = r.f32();
    if (r.remaining() != 0) throw std::runtime_error("bad LSDS file: trailing bytes");
    return screen;
}

ComplexField transmittance(const DiffuserScreen& screen, double pitch_m) {
    if (screen.grid_size <= 0 ||
        screen.amplitude.size() != static_cast<std::size_t>(screen.grid_size) * screen.grid_size ||
        screen.phase.size() != screen.amplitude.size()) {
        throw std::invalid_argument("transmittance: malformed diffuser screen");
    }
    ComplexField field;
    field.grid_size = screen.grid_size;
    field.pitch_m = pitch_m;
    field.values.resize(screen.amplitude.size());
    for (std::size_t i = 0; i < field.values.size(); ++i) {
        const double a = screen.amplitude[i];
        const double p = screen.phase[i];
        field.values[i] = std::complex<double>(a * std::cos(p), a * std::sin(p));
    }
    return field;
}

ComplexField asm_propagate(const ComplexField& field, double distance_m, double wavelength_m) {
    if (distance_m < 0) throw std::invalid_argument("asm_propagate: negative distance");
    if (wavelength_m <= 0) throw std::invalid_argument("asm_propagate: bad wavelength");
    const int n = field.grid_size;
    if (n <= 0 || field.values.size() != static_cast<std::size_t>(n) * n) {
        throw std::invalid_argument("asm_propagate: grid size mismatch");
    }
    if (field.pitch_m <= 0) throw std::invalid_argument("asm_propagate: bad pixel pitch");

    auto spectrum = fft2d(field.values, n);

    const double df = 1.0 / (n * field.pitch_m);
    const double inv_lambda2 = 1.0 / (wavelength_m * wavelength_m);
    for (int j = 0; j < n; ++j) {
        const int kj = j < n / 2 ? j : j - n;
        const double fy = kj * df;
        for (int i = 0; i < n; ++i) {
            const int ki = i < n / 2 ? i : i - n;
            const double fx = ki * df;
            const double arg = inv_lambda2 - fx * fx - fy * fy;
            std::complex<double> h;
            if (arg >= 0) {
                const double phase = kTwoPi * distance_m * std::sqrt(arg);
                h = std::complex<double>(std::cos(phase), std::sin(phase));
            } else {
                // evanescent: exp(2*pi*i*z * i*sqrt(-arg)) decays
                h = std::exp(-kTwoPi * distance_m * std::sqrt(-arg));
            }
            spectrum[static_cast<std::size_t>(j) * n + i] *= h;
        }
    }

    ComplexField out;
    out.grid_size = n;
    out.pitch_m = field.pitch_m;
    out.values = ifft2d(spectrum, n);
    return out;
}

SpeckleImage forward_speckle(const GrayImage& target, const DiffuserScreen& screen,
                             const OpticalConfig& cfg) {
    cfg.validate();
    if (target.height != cfg.crop_size || target.width != cfg.crop_size) {
        throw std::invalid_argument("forward_speckle: target must be crop_size x crop_size");
    }
    if (screen.grid_size != cfg.grid_size) {
        throw std::invalid_argument("forward_speckle: diffuser grid does not match config");
    }
    if (std::all_of(target.pixels.begin(), target.pixels.end(),
                    [](std::uint8_t p) { return p == 0; })) {
        throw std::runtime_error("forward_speckle: degenerate zero field");
    }

    // gray -> amplitude in [0,1]
    std::vector<double> g(target.pixels.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = target.pixels[i] / 255.0;
    const auto display =
        resize_bilinear(g, cfg.crop_size, cfg.crop_size, cfg.display_size, cfg.display_size);

    const int n = cfg.grid_size;
    ComplexField field;
    field.grid_size = n;
    field.pitch_m = cfg.pixel_pitch_m;
    field.values.assign(static_cast<std::size_t>(n) * n, {0.0, 0.0});
    const int off = (n - cfg.display_size) / 2;
    for (int y = 0; y < cfg.display_size; ++y) {
        for (int x = 0; x < cfg.display_size; ++x) {
            field.values[static_cast<std::size_t>(y + off) * n + (x + off)] =
                display[static_cast<std::size_t>(y) * cfg.display_size + x];
        }
    }

    const ComplexField t = transmittance(screen, cfg.pixel_pitch_m);
    auto apply_screen = [&](ComplexField& u) {
        for (std::size_t i = 0; i < u.values.size(); ++i) u.values[i] *= t.values[i];
    };

    if (cfg.literal_ordering) {
        apply_screen(field);
        field = asm_propagate(field, cfg.z1_m, cfg.wavelength_m);
    } else {
        field = asm_propagate(field, cfg.z1_m, cfg.wavelength_m);
        apply_screen(field);
    }
    field = asm_propagate(field, cfg.z2_m, cfg.wavelength_m);

    const int crop = cfg.crop_size;
    const int coff = (n - crop) / 2;
    std::vector<double> intensity(static_cast<std::size_t>(crop) * crop);
    double peak = 0.0;
    for (int y = 0; y < crop; ++y) {
        for (int x = 0; x < crop; ++x) {
            const auto v = field.values[static_cast<std::size_t>(y + coff) * n + (x + coff)];
            const double val = std::norm(v);
            intensity[static_cast<std::size_t>(y) * crop + x] = val;
            peak = std::max(peak, val);
        }
    }
    if (!(peak > 0.0)) throw std::runtime_error("forward_speckle: degenerate zero field");

    SpeckleImage out;
    out.crop_size = crop;
    out.scale = static_cast<float>(peak);
    out.intensity.resize(intensity.size());
    for (std::size_t i = 0; i < intensity.size(); ++i) {
        out.intensity[i] = static_cast<float>(intensity[i] / peak);
    }
    return out;
}

}  // namespace speckle
