#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace speckle {

// 8-bit grayscale image, row major.
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    bool operator==(const GrayImage&) const = default;
};

// IDX image file (big-endian, magic 0x00000803).
std::vector<GrayImage> load_idx(const std::filesystem::path& path);

// CIFAR-10 binary batches: 3073-byte records, one label byte followed by
// 32x32 R, G, B planes. Converted to gray with BT.601 luminance weights.
std::vector<GrayImage> load_cifar10_bin(const std::filesystem::path& path);

// Binary PGM ("P5"), maxval <= 255.
GrayImage load_pgm(const std::filesystem::path& path);
void save_pgm(const GrayImage& img, const std::filesystem::path& path);

// Bilinear resample on doubles, pixel-center convention, clamp at edges.
std::vector<double> resize_bilinear(const std::vector<double>& src, int src_h, int src_w,
                                    int dst_h, int dst_w);

// Resize to the square target size used by the forward model.
GrayImage to_target(const GrayImage& img, int crop_size);

}  // namespace speckle
