#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "speckle/dataset.hpp"
#include "speckle/io.hpp"
#include "synthetic.hpp"

using namespace speckle;
namespace fs = std::filesystem;

namespace {

OpticalConfig test_config() {
    OpticalConfig cfg;
    cfg.grid_size = 64;
    cfg.display_size = 45;
    cfg.crop_size = 32;
    return cfg;
}

std::vector<GrayImage> test_targets(int n, std::uint64_t seed) {
    auto raw = testsupport::make_cifar_like(n, seed);
    std::vector<GrayImage> targets;
    for (auto& img : raw) targets.push_back(to_target(img, 32));
    return targets;
}

}  // namespace

TEST_CASE("generate_dataset preserves order and provenance") {
    const auto cfg = test_config();
    const auto screen = make_diffuser(cfg, 42);
    const auto targets = test_targets(10, 9);
    const auto ds = generate_dataset(targets, screen, cfg);
    REQUIRE(ds.records.size() == 10);
    CHECK(ds.screen_seed == 42);
    CHECK(ds.crop_size == 32);
    CHECK(ds.config_digest == config_digest(cfg));
    for (int i = 0; i < 10; ++i) {
        CHECK(ds.records[i].target == targets[i]);
        CHECK(ds.records[i].speckle.source_id == std::to_string(i));
    }
}

TEST_CASE("generate_dataset names the failing sample") {
    const auto cfg = test_config();
    const auto screen = make_diffuser(cfg, 42);
    auto targets = test_targets(10, 10);
    targets[3] = GrayImage(32, 32, 0);
    CHECK_THROWS_WITH_AS(generate_dataset(targets, screen, cfg), doctest::Contains("sample 3"),
                         std::runtime_error);
}

TEST_CASE("generate_dataset output is independent of worker count") {
    const auto cfg = test_config();
    const auto screen = make_diffuser(cfg, 42);
    const auto targets = test_targets(12, 11);
    const auto serial = generate_dataset(targets, screen, cfg, 1);
    const auto parallel = generate_dataset(targets, screen, cfg, 4);
    REQUIRE(serial.records.size() == parallel.records.size());
    for (std::size_t i = 0; i < serial.records.size(); ++i) {
        CHECK(serial.records[i] == parallel.records[i]);
    }
}

TEST_CASE("lsmd container round-trips byte-exactly") {
    const auto cfg = test_config();
    const auto screen = make_diffuser(cfg, 7);
    const auto ds = generate_dataset(test_targets(6, 12), screen, cfg);
    const auto path = fs::temp_directory_path() / "speckle_test.lsmd";
    const auto path2 = fs::temp_directory_path() / "speckle_test2.lsmd";
    write_lsmd(ds, path);

    const auto header = read_lsmd_header(path);
    CHECK(header.crop_size == 32);
    CHECK(header.record_count == 6);
    CHECK(header.screen_seed == 7);
    CHECK(header.config_digest == config_digest(cfg));

    const auto loaded = read_lsmd(path);
    REQUIRE(loaded.records.size() == ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        CHECK(loaded.records[i] == ds.records[i]);
    }
    write_lsmd(loaded, path2);
    CHECK(read_file(path) == read_file(path2));
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("lsmd reader rejects foreign and truncated files") {
    const auto path = fs::temp_directory_path() / "speckle_bad.lsmd";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_WITH_AS(read_lsmd(path), doctest::Contains("not an LSMD"), std::runtime_error);
    const auto cfg = test_config();
    const auto ds = generate_dataset(test_targets(2, 13), make_diffuser(cfg, 1), cfg);
    write_lsmd(ds, path);
    auto bytes = read_file(path);
    bytes.resize(bytes.size() - 10);
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS(read_lsmd(path), doctest::Contains("truncated"), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("analyze_distribution basic statistics") {
    SUBCASE("single constant image") {
        const auto report = analyze_distribution({GrayImage(4, 4, 128)});
        CHECK(report.gray_histogram[128] == doctest::Approx(1.0));
        for (int v = 0; v < 256; ++v) {
            if (v != 128) CHECK(report.gray_histogram[v] == 0.0);
        }
        REQUIRE(report.per_image_stats.size() == 1);
        CHECK(report.per_image_stats[0].first == doctest::Approx(128.0));
        CHECK(report.per_image_stats[0].second == doctest::Approx(0.0));
    }

    SUBCASE("two-pixel extremes") {
        GrayImage img(1, 2);
        img.pixels = {0, 255};
        const auto report = analyze_distribution({img});
        CHECK(report.gray_histogram[0] == doctest::Approx(0.5));
        CHECK(report.gray_histogram[255] == doctest::Approx(0.5));
        CHECK(report.per_image_stats[0].first == doctest::Approx(127.5));
        CHECK(report.per_image_stats[0].second == doctest::Approx(16256.25));
    }

    SUBCASE("empty list is an error") {
        CHECK_THROWS_AS(analyze_distribution({}), std::invalid_argument);
    }
}

TEST_CASE("histogram sums to one and entropy orders the corpora") {
    const auto cifar_like = testsupport::make_cifar_like(200, 20);
    const auto mnist_like = testsupport::make_mnist_like(200, 21);
    const auto rc = analyze_distribution(cifar_like);
    const auto rm = analyze_distribution(mnist_like);
    double sum = 0.0;
    for (double p : rc.gray_histogram) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK(histogram_entropy(rc.gray_histogram) > histogram_entropy(rm.gray_histogram));
    for (const auto& [mean, var] : rc.per_image_stats) {
        REQUIRE(mean >= 0.0);
        REQUIRE(mean <= 255.0);
        REQUIRE(var >= 0.0);
    }
}

TEST_CASE("distribution csv exports") {
    const auto report = analyze_distribution({GrayImage(2, 2, 10)});
    const auto hist = histogram_csv(report);
    CHECK(hist.substr(0, 23) == "gray_value,probability\n");
    const auto mv = mean_variance_csv(report);
    CHECK(mv.substr(0, 26) == "image_index,mean,variance\n");
    CHECK(mv.find("0,10,0\n") != std::string::npos);
}
