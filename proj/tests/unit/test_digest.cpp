#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "speckle/digest.hpp"

using namespace speckle;

TEST_CASE("sha256 known vectors") {
    CHECK(hex(sha256(std::string("abc"))) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(hex(sha256(std::string(""))) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("sha256_file hashes file contents") {
    const auto path = std::filesystem::temp_directory_path() / "speckle_digest_test.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "abc";
    }
    CHECK(hex(sha256_file(path)) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    std::filesystem::remove(path);
}
