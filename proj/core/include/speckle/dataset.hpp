#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "speckle/digest.hpp"
#include "speckle/image.hpp"
#include "speckle/optics.hpp"

namespace speckle {

struct SpeckleRecord {
    SpeckleImage speckle;
    GrayImage target;
    bool operator==(const SpeckleRecord& o) const {
        return speckle.crop_size == o.speckle.crop_size && speckle.scale == o.speckle.scale &&
               speckle.intensity == o.speckle.intensity && target == o.target;
    }
};

// Paired (speckle, ground truth) samples plus the provenance needed to
// refuse cross-diffuser evaluation.
struct SpeckleDataset {
    std::vector<SpeckleRecord> records;
    std::uint64_t screen_seed = 0;
    Digest config_digest{};
    std::uint16_t crop_size = 0;
    std::string source_name;
};

struct LsmdHeader {
    std::uint16_t version = 0;
    std::uint16_t crop_size = 0;
    std::uint32_t record_count = 0;
    std::uint64_t screen_seed = 0;
    Digest config_digest{};
};

// Runs the forward model over every target, order preserved. Targets are
// validated up front; a bad sample is reported with its index. `threads`
// parallelizes across samples without changing the output.
SpeckleDataset generate_dataset(const std::vector<GrayImage>& targets,
                                const DiffuserScreen& screen, const OpticalConfig& cfg,
                                int threads = 1);

void write_lsmd(const SpeckleDataset& ds, const std::filesystem::path& path);
SpeckleDataset read_lsmd(const std::filesystem::path& path);
LsmdHeader read_lsmd_header(const std::filesystem::path& path);

struct DistributionReport {
    std::array<double, 256> gray_histogram{};              // sums to 1
    std::vector<std::pair<double, double>> per_image_stats;  // (mean, population variance)
};

DistributionReport analyze_distribution(const std::vector<GrayImage>& targets);
double histogram_entropy(const std::array<double, 256>& histogram);  // bits

// CSV columns: "gray_value,probability" and "image_index,mean,variance".
std::string histogram_csv(const DistributionReport& report);
std::string mean_variance_csv(const DistributionReport& report);

}  // namespace speckle
