#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "speckle/image.hpp"
#include "synthetic.hpp"

using namespace speckle;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const std::string& name) {
    return fs::temp_directory_path() / name;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

}  // namespace

TEST_CASE("idx loader round-trips a hand-built file") {
    auto images = testsupport::make_mnist_like(4, 11);
    const auto path = tmp_file("speckle_test.idx");
    testsupport::write_idx(images, path);
    const auto loaded = load_idx(path);
    REQUIRE(loaded.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(loaded[i].height == 28);
        CHECK(loaded[i].width == 28);
        CHECK(loaded[i] == images[i]);
    }
    fs::remove(path);
}

TEST_CASE("idx loader rejects a label file") {
    std::vector<std::uint8_t> bytes;
    be32(bytes, 0x00000801u);
    be32(bytes, 4);
    bytes.insert(bytes.end(), {1, 2, 3, 4});
    const auto path = tmp_file("speckle_labels.idx");
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(load_idx(path), doctest::Contains("not an image IDX file"),
                         std::runtime_error);
    fs::remove(path);
}

TEST_CASE("idx loader rejects truncated payloads") {
    std::vector<std::uint8_t> bytes;
    be32(bytes, 0x00000803u);
    be32(bytes, 2);
    be32(bytes, 4);
    be32(bytes, 4);
    bytes.insert(bytes.end(), 10, 0);  // needs 32
    const auto path = tmp_file("speckle_trunc.idx");
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(load_idx(path), doctest::Contains("truncated"), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("idx loader rejects absurd dimensions") {
    std::vector<std::uint8_t> bytes;
    be32(bytes, 0x00000803u);
    be32(bytes, 0xFFFFFFFFu);
    be32(bytes, 0xFFFFFFFFu);
    be32(bytes, 0xFFFFFFFFu);
    const auto path = tmp_file("speckle_overflow.idx");
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(load_idx(path), doctest::Contains("overflow"), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("cifar loader converts achromatic records to the same gray") {
    GrayImage img(32, 32, 137);
    const auto path = tmp_file("speckle_gray.cifar");
    testsupport::write_cifar_bin({img}, path);
    const auto loaded = load_cifar10_bin(path);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0] == img);
    fs::remove(path);
}

TEST_CASE("cifar loader applies the luminance weights") {
    // R=255, G=B=0 -> round(0.299*255) = 76
    std::vector<std::uint8_t> bytes(3073, 0);
    for (int i = 1; i <= 1024; ++i) bytes[i] = 255;
    const auto path = tmp_file("speckle_red.cifar");
    write_bytes(path, bytes);
    const auto loaded = load_cifar10_bin(path);
    REQUIRE(loaded.size() == 1);
    for (auto p : loaded[0].pixels) CHECK(p == 76);
    fs::remove(path);
}

TEST_CASE("cifar loader handles empty files and rejects bad sizes") {
    const auto path = tmp_file("speckle_empty.cifar");
    write_bytes(path, {});
    CHECK(load_cifar10_bin(path).empty());
    write_bytes(path, std::vector<std::uint8_t>(3072, 0));
    CHECK_THROWS_AS(load_cifar10_bin(path), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("pgm loader reads P5 exactly") {
    const std::string header = "P5\n2 2\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), {0, 85, 170, 255});
    const auto path = tmp_file("speckle_test.pgm");
    write_bytes(path, bytes);
    const auto img = load_pgm(path);
    CHECK(img.height == 2);
    CHECK(img.width == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 85, 170, 255});
    fs::remove(path);
}

TEST_CASE("pgm loader rejects ascii and 16-bit variants") {
    const auto path = tmp_file("speckle_bad.pgm");
    write_bytes(path, {'P', '2', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', '0'});
    CHECK_THROWS_WITH_AS(load_pgm(path), doctest::Contains("unsupported PGM variant"),
                         std::runtime_error);
    const std::string header = "P5\n1 1\n65535\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), {0, 0});
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(load_pgm(path), doctest::Contains("16-bit PGM unsupported"),
                         std::runtime_error);
    fs::remove(path);
}

TEST_CASE("pgm save/load round-trips") {
    const auto images = testsupport::make_face_like(1, 3);
    const auto path = tmp_file("speckle_face.pgm");
    save_pgm(images[0], path);
    CHECK(load_pgm(path) == images[0]);
    fs::remove(path);
}

TEST_CASE("to_target is the identity at the target size") {
    const auto images = testsupport::make_cifar_like(1, 5);
    CHECK(to_target(images[0], 32) == images[0]);
}

TEST_CASE("to_target preserves constant images exactly") {
    GrayImage img(17, 23, 7);
    const auto out = to_target(img, 32);
    CHECK(out.height == 32);
    CHECK(out.width == 32);
    for (auto p : out.pixels) CHECK(p == 7);
}

TEST_CASE("to_target keeps constant-background corners when upscaling 28 to 32") {
    GrayImage img(28, 28, 31);
    img.at(14, 14) = 255;  // content far from the corners
    const auto out = to_target(img, 32);
    CHECK(out.at(0, 0) == 31);
    CHECK(out.at(0, 31) == 31);
    CHECK(out.at(31, 0) == 31);
    CHECK(out.at(31, 31) == 31);
}

TEST_CASE("resize_bilinear preserves constants") {
    std::vector<double> src(5 * 7, 3.25);
    const auto dst = resize_bilinear(src, 5, 7, 11, 13);
    REQUIRE(dst.size() == 11u * 13u);
    for (double v : dst) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}
