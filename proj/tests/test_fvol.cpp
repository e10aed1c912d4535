#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "flowreg/fvol.hpp"
#include "flowreg/rng.hpp"

using namespace flowreg;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "flowreg_fvol_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return std::vector<char>((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("FVOL volume round-trip is byte-identical") {
    const auto dir = temp_dir();
    Volume v({5, 4, 3}, {1.5, 1.5, 3.15});
    Rng rng(42);
    for (auto& x : v.data) x = rng.uniform();

    const auto p1 = dir / "v1.fvol";
    const auto p2 = dir / "v2.fvol";
    write_fvol(p1, v);
    const Volume r = read_fvol_volume(p1);
    CHECK(r.dims == v.dims);
    write_fvol(p2, r);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(peek_fvol_kind(p1) == FvolKind::kVolume);
}

TEST_CASE("FVOL field and label round-trips are byte-identical") {
    const auto dir = temp_dir();
    DisplacementField f({4, 4, 2}, {1, 1, 2});
    Rng rng(7);
    for (auto& x : f.data) x = rng.normal();
    write_fvol(dir / "f1.fvol", f);
    write_fvol(dir / "f2.fvol", read_fvol_field(dir / "f1.fvol"));
    CHECK(slurp(dir / "f1.fvol") == slurp(dir / "f2.fvol"));
    CHECK(peek_fvol_kind(dir / "f1.fvol") == FvolKind::kField);

    LabelMap l({3, 3, 3}, {1, 1, 1});
    for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = std::uint8_t(i % 4);
    write_fvol(dir / "l1.fvol", l);
    write_fvol(dir / "l2.fvol", read_fvol_labels(dir / "l1.fvol"));
    CHECK(slurp(dir / "l1.fvol") == slurp(dir / "l2.fvol"));
    CHECK(read_fvol_labels(dir / "l1.fvol").data == l.data);
    CHECK(peek_fvol_kind(dir / "l1.fvol") == FvolKind::kLabels);
}

TEST_CASE("FVOL golden bytes: little-endian header and payload layout") {
    // 1x2x1 volume, spacing (1, 2, 4), values 1.0 and -2.0
    Volume v({1, 2, 1}, {1.0, 2.0, 4.0});
    v.data = {1.0, -2.0};
    const auto dir = temp_dir();
    const auto path = dir / "golden.fvol";
    write_fvol(path, v);

    const std::vector<std::uint8_t> expected = {
        'F', 'V', 'O', 'L', 1,                  // magic + version
        1, 0, 0, 0,                             // nx = 1
        2, 0, 0, 0,                             // ny = 2
        1, 0, 0, 0,                             // nz = 1
        1, 0, 0, 0,                             // channels = 1
        0, 0, 0, 0,                             // dtype = f32
        0x00, 0x00, 0x80, 0x3F,                 // 1.0f
        0x00, 0x00, 0x00, 0x40,                 // 2.0f
        0x00, 0x00, 0x80, 0x40,                 // 4.0f
        0x00, 0x00, 0x80, 0x3F,                 // data[0] = 1.0f
        0x00, 0x00, 0x00, 0xC0,                 // data[1] = -2.0f
    };
    const std::vector<char> got = slurp(path);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(std::uint8_t(got[i]) == expected[i]);
    }

    // and the reader recovers the golden values
    const Volume r = read_fvol_volume(path);
    CHECK(r.data[0] == 1.0);
    CHECK(r.data[1] == -2.0);
    CHECK(r.spacing.z == 4.0);
}

TEST_CASE("FVOL reader rejects malformed input") {
    const auto dir = temp_dir();
    const auto path = dir / "bad.fvol";
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOPE";
    }
    CHECK_THROWS_AS((void)read_fvol_volume(path), FvolError);
    CHECK_THROWS_AS((void)read_fvol_volume(dir / "does_not_exist.fvol"), FvolError);

    // kind mismatch: a field is not a volume
    DisplacementField f({2, 2, 2}, {1, 1, 1});
    write_fvol(dir / "field.fvol", f);
    CHECK_THROWS_AS((void)read_fvol_volume(dir / "field.fvol"), FvolError);
}
