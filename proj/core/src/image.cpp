#include "speckle/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "speckle/io.hpp"

namespace speckle {

namespace {

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace

std::vector<GrayImage> load_idx(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    if (bytes.size() < 16) throw std::runtime_error("truncated IDX file: " + path.string());
    const std::uint32_t magic = be32(bytes.data());
    if (magic != 0x00000803u) {
        throw std::runtime_error("not an image IDX file (magic " + std::to_string(magic) + ")");
    }
    const std::uint64_t count = be32(bytes.data() + 4);
    const std::uint64_t rows = be32(bytes.data() + 8);
    const std::uint64_t cols = be32(bytes.data() + 12);
    if (rows == 0 || cols == 0 || rows > 1u << 16 || cols > 1u << 16 ||
        count > 1u << 28 || count * rows * cols > (std::uint64_t(1) << 40)) {
        throw std::runtime_error("IDX dimension overflow");
    }
    const std::uint64_t payload = count * rows * cols;
    if (bytes.size() < 16 + payload) throw std::runtime_error("truncated IDX file: " + path.string());

    std::vector<GrayImage> images;
    images.reserve(count);
    const std::uint8_t* p = bytes.data() + 16;
    for (std::uint64_t i = 0; i < count; ++i) {
        GrayImage img(static_cast<int>(rows), static_cast<int>(cols));
        std::memcpy(img.pixels.data(), p, rows * cols);
        p += rows * cols;
        images.push_back(std::move(img));
    }
    return images;
}

std::vector<GrayImage> load_cifar10_bin(const std::filesystem::path& path) {
    constexpr std::size_t kRecord = 3073;  // label + 3*1024
    const auto bytes = read_all(path);
    if (bytes.size() % kRecord != 0) {
        throw std::runtime_error("CIFAR-10 file length is not a multiple of 3073: " + path.string());
    }
    const std::size_t n = bytes.size() / kRecord;
    std::vector<GrayImage> images;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kRecord;
        const std::uint8_t* r = rec + 1;
        const std::uint8_t* g = r + 1024;
        const std::uint8_t* b = g + 1024;
        GrayImage img(32, 32);
        for (int k = 0; k < 1024; ++k) {
            const double y = 0.299 * r[k] + 0.587 * g[k] + 0.114 * b[k];
            img.pixels[k] = static_cast<std::uint8_t>(std::min(255.0, std::floor(y + 0.5)));
        }
        images.push_back(std::move(img));
    }
    return images;
}

GrayImage load_pgm(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            char c = static_cast<char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return std::string(bytes.begin() + start, bytes.begin() + pos);
    };

    const std::string magic = next_token();
    if (magic != "P5") throw std::runtime_error("unsupported PGM variant: " + magic);
    const std::string ws = next_token();
    const std::string hs = next_token();
    const std::string ms = next_token();
    if (ws.empty() || hs.empty() || ms.empty()) throw std::runtime_error("truncated PGM header");
    const long w = std::stol(ws);
    const long h = std::stol(hs);
    const long maxval = std::stol(ms);
    if (w <= 0 || h <= 0) throw std::runtime_error("bad PGM dimensions");
    if (maxval > 255) throw std::runtime_error("16-bit PGM unsupported (maxval " + ms + ")");
    if (maxval <= 0) throw std::runtime_error("bad PGM maxval");
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h;
    if (bytes.size() < pos + need) throw std::runtime_error("truncated PGM payload");
    GrayImage img(static_cast<int>(h), static_cast<int>(w));
    std::memcpy(img.pixels.data(), bytes.data() + pos, need);
    return img;
}

void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
    std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                         "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
    atomic_write(path, bytes);
}

std::vector<double> resize_bilinear(const std::vector<double>& src, int src_h, int src_w,
                                    int dst_h, int dst_w) {
    if (src_h <= 0 || src_w <= 0 || dst_h <= 0 || dst_w <= 0 ||
        src.size() != static_cast<std::size_t>(src_h) * src_w) {
        throw std::invalid_argument("resize_bilinear: bad dimensions");
    }
    std::vector<double> dst(static_cast<std::size_t>(dst_h) * dst_w);
    const double sy = static_cast<double>(src_h) / dst_h;
    const double sx = static_cast<double>(src_w) / dst_w;
    for (int y = 0; y < dst_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const double cy = std::clamp(fy, 0.0, static_cast<double>(src_h - 1));
        const int y0 = static_cast<int>(cy);
        const int y1 = std::min(y0 + 1, src_h - 1);
        const double wy = cy - y0;
        for (int x = 0; x < dst_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const double cx = std::clamp(fx, 0.0, static_cast<double>(src_w - 1));
            const int x0 = static_cast<int>(cx);
            const int x1 = std::min(x0 + 1, src_w - 1);
            const double wx = cx - x0;
            const double top = src[static_cast<std::size_t>(y0) * src_w + x0] * (1.0 - wx) +
                               src[static_cast<std::size_t>(y0) * src_w + x1] * wx;
            const double bot = src[static_cast<std::size_t>(y1) * src_w + x0] * (1.0 - wx) +
                               src[static_cast<std::size_t>(y1) * src_w + x1] * wx;
            dst[static_cast<std::size_t>(y) * dst_w + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    return dst;
}

GrayImage to_target(const GrayImage& img, int crop_size) {
    if (img.height <= 0 || img.width <= 0) throw std::invalid_argument("to_target: empty image");
    if (crop_size <= 0) throw std::invalid_argument("to_target: bad crop size");
    if (img.height == crop_size && img.width == crop_size) return img;
    std::vector<double> src(img.pixels.begin(), img.pixels.end());
    const auto dst = resize_bilinear(src, img.height, img.width, crop_size, crop_size);
    GrayImage out(crop_size, crop_size);
    for (std::size_t i = 0; i < dst.size(); ++i) {
        out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::floor(dst[i] + 0.5), 0.0, 255.0));
    }
    return out;
}

}  // namespace speckle
