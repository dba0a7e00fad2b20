#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "p2l/checkpoint.hpp"
#include "p2l/errors.hpp"
#include "test_util.hpp"

using namespace p2l;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("guidance checkpoints round-trip bitwise") {
    GuidanceModel g = p2l_test::frozen_random_guidance(9, 3);
    const std::string p1 = tmp_path("p2l_g1.ckpt"), p2 = tmp_path("p2l_g2.ckpt");
    save_guidance(g, p1);
    GuidanceModel loaded = load_guidance(p1);
    CHECK(loaded.frozen());
    CHECK(loaded.checksum() == g.checksum());
    save_guidance(loaded, p2);
    CHECK(read_bytes(p1) == read_bytes(p2)); // save -> load -> save is byte-identical
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("policy checkpoints keep the value head and token ids") {
    PolicyModel policy(p2l_test::tiny_net(10), {0, 1, 2}, 5);
    const std::string p = tmp_path("p2l_pol.ckpt");
    save_policy(policy, p);
    PolicyModel loaded = load_policy(p);
    CHECK(loaded.net().params().checksum() == policy.net().params().checksum());
    CHECK(loaded.ids().pad == 0);
    CHECK(loaded.ids().delimiter == 1);
    CHECK(loaded.ids().eot == 2);
    CHECK(loaded.net().params().has("vh.fc2.w"));
    fs::remove(p);
}

TEST_CASE("flow checkpoints bind to the guidance checksum") {
    GuidanceModel g = p2l_test::frozen_random_guidance(9, 3);
    FlowConfig cfg;
    cfg.n_decisions = 3;
    cfg.d_model = g.config().d_model;
    FlowModel flow(cfg, g, 8);
    const std::string p = tmp_path("p2l_flow.ckpt");
    save_flow(flow, p);

    FlowModel loaded = load_flow(p, g);
    CHECK(loaded.params().checksum() == flow.params().checksum());

    // a retrained guidance must be refused
    GuidanceModel other = p2l_test::frozen_random_guidance(9, 999);
    CHECK_THROWS_AS(load_flow(p, other), InvalidStateError);
    fs::remove(p);
}

TEST_CASE("malformed checkpoints fail loudly") {
    GuidanceModel g = p2l_test::frozen_random_guidance(9, 3);
    const std::string p = tmp_path("p2l_bad.ckpt");
    save_guidance(g, p);

    SUBCASE("truncated payload") {
        auto bytes = read_bytes(p);
        bytes.resize(bytes.size() - 16);
        write_bytes(p, bytes);
        CHECK_THROWS_AS(load_guidance(p), FormatError);
    }
    SUBCASE("corrupt magic") {
        auto bytes = read_bytes(p);
        bytes[0] = 'X';
        write_bytes(p, bytes);
        CHECK_THROWS_AS(load_guidance(p), FormatError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_guidance(tmp_path("p2l_nonexistent.ckpt")), FormatError); }
    fs::remove(p);
}

TEST_CASE("file checksums are stable") {
    const std::string p = tmp_path("p2l_sum.bin");
    {
        std::ofstream out(p, std::ios::binary);
        out << "deterministic bytes";
    }
    const auto a = file_checksum_hex(p);
    const auto b = file_checksum_hex(p);
    CHECK(a == b);
    CHECK(a.size() == 16);
    fs::remove(p);
}
