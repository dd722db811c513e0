#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "speckle/image.hpp"
#include "speckle/optics.hpp"
#include "speckle/rng.hpp"
#include "synthetic.hpp"

using namespace speckle;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

OpticalConfig small_config(int grid = 64) {
    OpticalConfig cfg;
    cfg.grid_size = grid;
    cfg.display_size = 45;
    cfg.crop_size = 32;
    return cfg;
}

ComplexField random_field(int n, double pitch, std::uint64_t seed) {
    Rng rng(seed);
    ComplexField f;
    f.grid_size = n;
    f.pitch_m = pitch;
    f.values.resize(static_cast<std::size_t>(n) * n);
    for (auto& v : f.values) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    return f;
}

double total_energy(const ComplexField& f) {
    double e = 0.0;
    for (const auto& v : f.values) e += std::norm(v);
    return e;
}

double max_abs_diff(const ComplexField& a, const ComplexField& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        m = std::max(m, std::abs(a.values[i] - b.values[i]));
    }
    return m;
}

// Independent oracle: quartic-cost DFT evaluation of the propagation
// integral, sharing no code with asm_propagate.
ComplexField dft_propagate_oracle(const ComplexField& in, double z, double lambda) {
    const int n = in.grid_size;
    std::vector<std::complex<double>> spectrum(in.values.size());
    for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
            std::complex<double> acc = 0.0;
            for (int y = 0; y < n; ++y) {
                for (int x = 0; x < n; ++x) {
                    const double angle = -kTwoPi * (double(u) * y + double(v) * x) / n;
                    acc += in.values[static_cast<std::size_t>(y) * n + x] *
                           std::complex<double>(std::cos(angle), std::sin(angle));
                }
            }
            spectrum[static_cast<std::size_t>(u) * n + v] = acc;
        }
    }
    for (int u = 0; u < n; ++u) {
        const double fy = ((u < n / 2) ? u : u - n) / (n * in.pitch_m);
        for (int v = 0; v < n; ++v) {
            const double fx = ((v < n / 2) ? v : v - n) / (n * in.pitch_m);
            const double arg = 1.0 / (lambda * lambda) - fx * fx - fy * fy;
            std::complex<double> h;
            if (arg >= 0.0) {
                h = std::exp(std::complex<double>(0.0, kTwoPi * z * std::sqrt(arg)));
            } else {
                h = std::exp(-kTwoPi * z * std::sqrt(-arg));
            }
            spectrum[static_cast<std::size_t>(u) * n + v] *= h;
        }
    }
    ComplexField out;
    out.grid_size = n;
    out.pitch_m = in.pitch_m;
    out.values.resize(in.values.size());
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            std::complex<double> acc = 0.0;
            for (int u = 0; u < n; ++u) {
                for (int v = 0; v < n; ++v) {
                    const double angle = kTwoPi * (double(u) * y + double(v) * x) / n;
                    acc += spectrum[static_cast<std::size_t>(u) * n + v] *
                           std::complex<double>(std::cos(angle), std::sin(angle));
                }
            }
            out.values[static_cast<std::size_t>(y) * n + x] = acc / double(n * n);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("optical config invariants") {
    OpticalConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.grid_size = 801;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = OpticalConfig{};
    cfg.display_size = cfg.grid_size + 2;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = OpticalConfig{};
    cfg.crop_size = cfg.display_size + 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = OpticalConfig{};
    cfg.wavelength_m = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config digest changes with any field") {
    const OpticalConfig base;
    OpticalConfig other = base;
    CHECK(config_digest(base) == config_digest(other));
    other.literal_ordering = true;
    CHECK(config_digest(base) != config_digest(other));
    other = base;
    other.z1_m += 1e-6;
    CHECK(config_digest(base) != config_digest(other));
}

TEST_CASE("make_diffuser is deterministic and uniform") {
    OpticalConfig cfg;  // grid 800
    const auto a = make_diffuser(cfg, 42);
    const auto b = make_diffuser(cfg, 42);
    CHECK(a.amplitude == b.amplitude);
    CHECK(a.phase == b.phase);

    double mean = 0.0;
    for (float v : a.amplitude) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
        mean += v;
    }
    mean /= a.amplitude.size();
    CHECK(std::abs(mean - 0.5) < 0.01);

    for (float v : a.phase) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v < static_cast<float>(kTwoPi));
    }

    const auto c = make_diffuser(cfg, 43);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.amplitude.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(double(a.amplitude[i]) - c.amplitude[i]));
    }
    CHECK(max_diff > 0.0);
}

TEST_CASE("height-map mode produces an equivalent phase distribution") {
    OpticalConfig cfg = small_config();
    cfg.height_map_mode = true;
    const auto a = make_diffuser(cfg, 1);
    const auto b = make_diffuser(cfg, 1);
    CHECK(a.phase == b.phase);
    double mean = 0.0;
    for (float v : a.phase) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v < static_cast<float>(kTwoPi));
        mean += v;
    }
    mean /= a.phase.size();
    CHECK(std::abs(mean - std::numbers::pi) < 0.05);
}

TEST_CASE("lsds files round-trip") {
    const auto screen = make_diffuser(small_config(), 77);
    const auto path = std::filesystem::temp_directory_path() / "speckle_test.lsds";
    write_lsds(screen, path);
    const auto loaded = read_lsds(path);
    CHECK(loaded.grid_size == screen.grid_size);
    CHECK(loaded.seed == screen.seed);
    CHECK(loaded.amplitude == screen.amplitude);
    CHECK(loaded.phase == screen.phase);
    std::filesystem::remove(path);
}

TEST_CASE("transmittance realizes amplitude and phase") {
    DiffuserScreen screen;
    screen.grid_size = 2;
    screen.seed = 0;

    SUBCASE("transparent plate") {
        screen.amplitude = {1, 1, 1, 1};
        screen.phase = {0, 0, 0, 0};
        const auto t = transmittance(screen, 8e-6);
        for (const auto& v : t.values) {
            CHECK(v.real() == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(v.imag() == doctest::Approx(0.0).epsilon(1e-12));
        }
    }

    SUBCASE("half-amplitude pi plate") {
        screen.amplitude = {0.5f, 0.5f, 0.5f, 0.5f};
        screen.phase = {static_cast<float>(std::numbers::pi), static_cast<float>(std::numbers::pi),
                        static_cast<float>(std::numbers::pi), static_cast<float>(std::numbers::pi)};
        const auto t = transmittance(screen, 8e-6);
        for (const auto& v : t.values) {
            CHECK(v.real() == doctest::Approx(-0.5).epsilon(1e-6));
            CHECK(std::abs(v.imag()) < 1e-6);
        }
    }

    SUBCASE("modulus equals amplitude") {
        const auto s = make_diffuser(small_config(16), 5);
        const auto t = transmittance(s, 8e-6);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            CHECK(std::abs(std::abs(t.values[i]) - s.amplitude[i]) < 1e-12);
        }
    }
}

TEST_CASE("asm_propagate identity at z=0") {
    const auto f = random_field(64, 8e-6, 21);
    const auto out = asm_propagate(f, 0.0, 633e-9);
    CHECK(max_abs_diff(f, out) < 1e-9);
}

TEST_CASE("asm_propagate on-axis plane wave phase") {
    ComplexField f;
    f.grid_size = 64;
    f.pitch_m = 8e-6;
    f.values.assign(64 * 64, {1.0, 0.0});
    const double z = 20e-3, lambda = 633e-9;
    const auto out = asm_propagate(f, z, lambda);
    const auto expected = std::exp(std::complex<double>(0.0, kTwoPi * z / lambda));
    for (const auto& v : out.values) {
        REQUIRE(std::abs(v - expected) < 1e-6);
    }
}

TEST_CASE("asm_propagate conserves propagating-band energy") {
    // at 8 um pitch every representable frequency propagates at 633 nm
    const auto f = random_field(64, 8e-6, 33);
    const auto out = asm_propagate(f, 15e-3, 633e-9);
    const double ein = total_energy(f);
    const double eout = total_energy(out);
    CHECK(std::abs(eout - ein) / ein < 1e-6);
}

TEST_CASE("asm_propagate attenuates evanescent components") {
    // coarse sampling: pitch ~ lambda/2 puts grid corners past the cutoff
    const double lambda = 633e-9;
    const auto f = random_field(32, lambda * 0.51, 44);
    const auto out = asm_propagate(f, 5e-6, lambda);
    const double ein = total_energy(f);
    const double eout = total_energy(out);
    CHECK(eout < ein * (1.0 - 1e-6));
    for (const auto& v : out.values) REQUIRE(std::isfinite(std::abs(v)));
}

TEST_CASE("asm_propagate semigroup property") {
    for (double pitch : {8e-6, 633e-9 * 0.51}) {
        const auto f = random_field(48, pitch, 55);
        const auto two_hop = asm_propagate(asm_propagate(f, 7e-3, 633e-9), 3e-3, 633e-9);
        const auto one_hop = asm_propagate(f, 10e-3, 633e-9);
        double norm = std::sqrt(total_energy(one_hop) / one_hop.values.size());
        CHECK(max_abs_diff(two_hop, one_hop) / norm < 1e-6);
    }
}

TEST_CASE("asm_propagate is linear") {
    const auto u = random_field(32, 8e-6, 66);
    const auto v = random_field(32, 8e-6, 67);
    const std::complex<double> alpha(0.7, -1.3), beta(-0.2, 0.45);
    ComplexField mix = u;
    for (std::size_t i = 0; i < mix.values.size(); ++i) {
        mix.values[i] = alpha * u.values[i] + beta * v.values[i];
    }
    const auto lhs = asm_propagate(mix, 5e-3, 633e-9);
    const auto pu = asm_propagate(u, 5e-3, 633e-9);
    const auto pv = asm_propagate(v, 5e-3, 633e-9);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < lhs.values.size(); ++i) {
        max_diff = std::max(max_diff,
                            std::abs(lhs.values[i] - (alpha * pu.values[i] + beta * pv.values[i])));
    }
    CHECK(max_diff < 1e-9);
}

TEST_CASE("asm_propagate matches the direct DFT oracle on 16x16 grids") {
    for (double pitch : {8e-6, 633e-9 * 0.51}) {
        const auto f = random_field(16, pitch, 88);
        const auto fast = asm_propagate(f, 10e-3, 633e-9);
        const auto slow = dft_propagate_oracle(f, 10e-3, 633e-9);
        CHECK(max_abs_diff(fast, slow) < 1e-9);
    }
}

TEST_CASE("asm_propagate rejects bad inputs") {
    auto f = random_field(16, 8e-6, 9);
    CHECK_THROWS_AS(asm_propagate(f, -1e-3, 633e-9), std::invalid_argument);
    f.values.pop_back();
    CHECK_THROWS_AS(asm_propagate(f, 1e-3, 633e-9), std::invalid_argument);
}

TEST_CASE("forward_speckle rejects degenerate and malformed targets") {
    const auto cfg = small_config();
    const auto screen = make_diffuser(cfg, 42);
    GrayImage zero(32, 32, 0);
    CHECK_THROWS_WITH_AS(forward_speckle(zero, screen, cfg),
                         doctest::Contains("degenerate zero field"), std::runtime_error);
    GrayImage wrong(16, 16, 10);
    CHECK_THROWS_AS(forward_speckle(wrong, screen, cfg), std::invalid_argument);
}

TEST_CASE("forward_speckle is deterministic and normalized") {
    const auto cfg = small_config();
    const auto screen = make_diffuser(cfg, 42);
    const auto target = to_target(testsupport::make_cifar_like(1, 1)[0], 32);
    const auto a = forward_speckle(target, screen, cfg);
    const auto b = forward_speckle(target, screen, cfg);
    CHECK(a.intensity == b.intensity);
    CHECK(a.scale == b.scale);
    CHECK(a.scale > 0.0f);
    float peak = 0.0f;
    for (float v : a.intensity) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
        peak = std::max(peak, v);
    }
    CHECK(peak == 1.0f);
}

TEST_CASE("forward_speckle output decorrelates from the target") {
    OpticalConfig cfg;
    cfg.grid_size = 256;
    cfg.display_size = 45;
    cfg.crop_size = 32;
    const auto screen = make_diffuser(cfg, 42);
    const auto target = to_target(testsupport::make_cifar_like(1, 2)[0], 32);
    const auto speckle = forward_speckle(target, screen, cfg);

    // direct correlation statistic as the oracle
    const std::size_t n = speckle.intensity.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += speckle.intensity[i];
        mb += target.pixels[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = speckle.intensity[i] - ma;
        const double db = target.pixels[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    const double ncc = cov / std::sqrt(va * vb);
    CHECK(std::abs(ncc) < 0.3);
}

TEST_CASE("forward intensity is invariant under a global input phase") {
    const auto cfg = small_config();
    const auto screen = make_diffuser(cfg, 13);
    const auto target = to_target(testsupport::make_cifar_like(1, 3)[0], 32);

    auto run_pipeline = [&](std::complex<double> phase_factor) {
        std::vector<double> g(target.pixels.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = target.pixels[i] / 255.0;
        const auto disp = resize_bilinear(g, 32, 32, cfg.display_size, cfg.display_size);
        ComplexField field;
        field.grid_size = cfg.grid_size;
        field.pitch_m = cfg.pixel_pitch_m;
        field.values.assign(static_cast<std::size_t>(cfg.grid_size) * cfg.grid_size, {0, 0});
        const int off = (cfg.grid_size - cfg.display_size) / 2;
        for (int y = 0; y < cfg.display_size; ++y) {
            for (int x = 0; x < cfg.display_size; ++x) {
                field.values[static_cast<std::size_t>(y + off) * cfg.grid_size + x + off] =
                    phase_factor * disp[static_cast<std::size_t>(y) * cfg.display_size + x];
            }
        }
        field = asm_propagate(field, cfg.z1_m, cfg.wavelength_m);
        const auto t = transmittance(screen, cfg.pixel_pitch_m);
        for (std::size_t i = 0; i < field.values.size(); ++i) field.values[i] *= t.values[i];
        field = asm_propagate(field, cfg.z2_m, cfg.wavelength_m);
        const int coff = (cfg.grid_size - cfg.crop_size) / 2;
        std::vector<double> intensity;
        for (int y = 0; y < cfg.crop_size; ++y) {
            for (int x = 0; x < cfg.crop_size; ++x) {
                intensity.push_back(std::norm(
                    field.values[static_cast<std::size_t>(y + coff) * cfg.grid_size + x + coff]));
            }
        }
        return intensity;
    };

    const auto base = run_pipeline({1.0, 0.0});
    const auto rotated = run_pipeline(std::exp(std::complex<double>(0.0, 1.234)));
    double peak = 0.0;
    for (double v : base) peak = std::max(peak, v);
    for (std::size_t i = 0; i < base.size(); ++i) {
        REQUIRE(std::abs(base[i] - rotated[i]) < 1e-9 * peak);
    }
}

TEST_CASE("literal operator ordering is a distinct mode") {
    auto cfg = small_config();
    const auto screen = make_diffuser(cfg, 4);
    const auto target = to_target(testsupport::make_cifar_like(1, 4)[0], 32);
    const auto physical = forward_speckle(target, screen, cfg);
    cfg.literal_ordering = true;
    const auto literal = forward_speckle(target, screen, cfg);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < physical.intensity.size(); ++i) {
        max_diff = std::max(max_diff,
                            std::abs(double(physical.intensity[i]) - literal.intensity[i]));
    }
    CHECK(max_diff > 0.0);
}
