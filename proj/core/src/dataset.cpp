#include "speckle/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "speckle/io.hpp"

namespace speckle {

namespace {

constexpr std::uint16_t kLsmdVersion = 1;
constexpr char kLsmdMagic[4] = {'L', 'S', 'M', 'D'};

}  // namespace

SpeckleDataset generate_dataset(const std::vector<GrayImage>& targets,
                                const DiffuserScreen& screen, const OpticalConfig& cfg,
                                int threads) {
    cfg.validate();
    if (threads < 1) threads = 1;

    // Validate everything first so the parallel region cannot fail.
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& t = targets[i];
        if (t.height != cfg.crop_size || t.width != cfg.crop_size) {
            throw std::invalid_argument("sample " + std::to_string(i) +
                                        ": target must be crop_size x crop_size");
        }
        if (std::all_of(t.pixels.begin(), t.pixels.end(),
                        [](std::uint8_t p) { return p == 0; })) {
            throw std::runtime_error("sample " + std::to_string(i) +
                                     ": degenerate zero field");
        }
    }

    SpeckleDataset ds;
    ds.screen_seed = screen.seed;
    ds.config_digest = config_digest(cfg);
    ds.crop_size = static_cast<std::uint16_t>(cfg.crop_size);
    ds.records.resize(targets.size());

    const std::int64_t n = static_cast<std::int64_t>(targets.size());
#pragma omp parallel for num_threads(threads) schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        SpeckleRecord rec;
        rec.speckle = forward_speckle(targets[i], screen, cfg);
        rec.speckle.source_id = std::to_string(i);
        rec.target = targets[i];
        ds.records[i] = std::move(rec);
    }
    return ds;
}

void write_lsmd(const SpeckleDataset& ds, const std::filesystem::path& path) {
    ByteWriter w;
    w.raw(kLsmdMagic, 4);
    w.u16(kLsmdVersion);
    w.u16(ds.crop_size);
    w.u32(static_cast<std::uint32_t>(ds.records.size()));
    w.u64(ds.screen_seed);
    w.raw(ds.config_digest.data(), ds.config_digest.size());
    const std::size_t pixels = static_cast<std::size_t>(ds.crop_size) * ds.crop_size;
    for (const auto& rec : ds.records) {
        if (rec.speckle.intensity.size() != pixels || rec.target.pixels.size() != pixels) {
            throw std::invalid_argument("write_lsmd: record does not match crop_size");
        }
        for (float v : rec.speckle.intensity) w.f32(v);
        w.f32(rec.speckle.scale);
        w.raw(rec.target.pixels.data(), pixels);
    }
    atomic_write(path, w.bytes());
}

namespace {

LsmdHeader parse_header(ByteReader& r, const std::filesystem::path& path) {
    const std::uint8_t* magic = r.take(4);
    if (std::memcmp(magic, kLsmdMagic, 4) != 0) {
        throw std::runtime_error("not an LSMD file: " + path.string());
    }
    LsmdHeader h;
    h.version = r.u16();
    if (h.version != kLsmdVersion) {
        throw std::runtime_error("unsupported LSMD version " + std::to_string(h.version));
    }
    h.crop_size = r.u16();
    h.record_count = r.u32();
    h.screen_seed = r.u64();
    std::memcpy(h.config_digest.data(), r.take(32), 32);
    return h;
}

}  // namespace

LsmdHeader read_lsmd_header(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    return parse_header(r, path);
}

SpeckleDataset read_lsmd(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    const LsmdHeader h = parse_header(r, path);

    SpeckleDataset ds;
    ds.screen_seed = h.screen_seed;
    ds.config_digest = h.config_digest;
    ds.crop_size = h.crop_size;
    ds.source_name = path.stem().string();
    const std::size_t pixels = static_cast<std::size_t>(h.crop_size) * h.crop_size;
    ds.records.resize(h.record_count);
    for (auto& rec : ds.records) {
        rec.speckle.crop_size = h.crop_size;
        rec.speckle.intensity.resize(pixels);
        for (auto& v : rec.speckle.intensity) v = r.f32();
        rec.speckle.scale = r.f32();
        rec.target.height = h.crop_size;
        rec.target.width = h.crop_size;
        const std::uint8_t* tp = r.take(pixels);
        rec.target.pixels.assign(tp, tp + pixels);
    }
    return ds;
}

DistributionReport analyze_distribution(const std::vector<GrayImage>& targets) {
    if (targets.empty()) throw std::invalid_argument("analyze_distribution: empty target list");
    DistributionReport report;
    std::array<std::uint64_t, 256> counts{};
    std::uint64_t total = 0;
    report.per_image_stats.reserve(targets.size());
    for (const auto& img : targets) {
        double sum = 0.0;
        for (std::uint8_t p : img.pixels) {
            ++counts[p];
            sum += p;
        }
        total += img.pixels.size();
        const double mean = sum / static_cast<double>(img.pixels.size());
        double var = 0.0;
        for (std::uint8_t p : img.pixels) var += (p - mean) * (p - mean);
        var /= static_cast<double>(img.pixels.size());
        report.per_image_stats.emplace_back(mean, var);
    }
    for (int v = 0; v < 256; ++v) {
        report.gray_histogram[v] = static_cast<double>(counts[v]) / static_cast<double>(total);
    }
    return report;
}

double histogram_entropy(const std::array<double, 256>& histogram) {
    double h = 0.0;
    for (double p : histogram) {
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

std::string histogram_csv(const DistributionReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "gray_value,probability\n";
    for (int v = 0; v < 256; ++v) out << v << "," << report.gray_histogram[v] << "\n";
    return out.str();
}

std::string mean_variance_csv(const DistributionReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "image_index,mean,variance\n";
    for (std::size_t i = 0; i < report.per_image_stats.size(); ++i) {
        out << i << "," << report.per_image_stats[i].first << ","
            << report.per_image_stats[i].second << "\n";
    }
    return out.str();
}

}  // namespace speckle
