#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "speckle/digest.hpp"
#include "speckle/image.hpp"

namespace speckle {

// Physical parameters of the simulated bench. Distances in meters.
struct OpticalConfig {
    double wavelength_m = 633e-9;
    double delta_n = 0.52;
    double z1_m = 20e-3;   // target plane -> diffuser
    double z2_m = 10e-3;   // diffuser -> detector
    double pixel_pitch_m = 8e-6;
    int grid_size = 800;
    int display_size = 140;
    int crop_size = 32;
    // Apply the transmittance at the object plane instead of after the
    // first propagation step.
    bool literal_ordering = false;
    // Sample a surface height map and derive the phase from it instead
    // of sampling the phase directly.
    bool height_map_mode = false;

    void validate() const;  // throws std::invalid_argument
    bool operator==(const OpticalConfig&) const = default;
};

// Digest over a canonical little-endian serialization of every field.
Digest config_digest(const OpticalConfig& cfg);

// Scalar field sampled on a square grid with a physical pixel pitch.
struct ComplexField {
    int grid_size = 0;
    double pitch_m = 0.0;
    std::vector<std::complex<double>> values;  // row major, grid_size^2
};

// Thin random screen: per-pixel amplitude in [0,1] and phase in [0,2pi).
// Stored as 32-bit floats so the in-memory screen and the on-disk form
// are identical. Regeneration from (seed, grid_size) is bit-identical.
struct DiffuserScreen {
    int grid_size = 0;
    std::uint64_t seed = 0;
    std::vector<float> amplitude;
    std::vector<float> phase;
};

// Detector-plane intensity, center crop, max-normalized to [0,1].
struct SpeckleImage {
    int crop_size = 0;
    float scale = 0.0f;  // pre-normalization maximum
    std::vector<float> intensity;
    std::string source_id;
};

DiffuserScreen make_diffuser(const OpticalConfig& cfg, std::uint64_t seed);

// LSDS diffuser file: magic, version, grid, seed, then amplitude and
// phase planes as little-endian 32-bit floats.
void write_lsds(const DiffuserScreen& screen, const std::filesystem::path& path);
DiffuserScreen read_lsds(const std::filesystem::path& path);

// t(x,y) = A(x,y) * exp(i * phase(x,y))
ComplexField transmittance(const DiffuserScreen& screen, double pitch_m);

// Angular-spectrum free-space propagation over distance_m. Evanescent
// components (fx^2 + fy^2 > 1/lambda^2) decay exponentially.
ComplexField asm_propagate(const ComplexField& field, double distance_m, double wavelength_m);

// Full forward model: gray target -> normalized speckle intensity crop.
SpeckleImage forward_speckle(const GrayImage& target, const DiffuserScreen& screen,
                             const OpticalConfig& cfg);

}  // namespace speckle
