#include <doctest.h>

#include <cmath>

#include "flowreg/rng.hpp"
#include "flowreg/types.hpp"
#include "flowreg/volume_ops.hpp"

using namespace flowreg;

namespace {

Volume make_ramp(Dims3 d, double ax, double ay, double az, double b = 0.0) {
    Volume v(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) v.at(x, y, z) = ax * x + ay * y + az * z + b;
    return v;
}

Volume make_random(Dims3 d, std::uint64_t seed) {
    Volume v(d, {1, 1, 1});
    Rng rng(seed);
    for (auto& x : v.data) x = rng.uniform();
    return v;
}

}  // namespace

TEST_CASE("trilinear_sample hits stored values at integer coordinates") {
    const Volume v = make_random({5, 4, 3}, 7);
    CHECK(trilinear_sample(v, 1, 2, 2) == doctest::Approx(v.at(1, 2, 2)).epsilon(1e-15));
    CHECK(trilinear_sample(v, 0, 0, 0) == doctest::Approx(v.at(0, 0, 0)).epsilon(1e-15));
    CHECK(trilinear_sample(v, 4, 3, 2) == doctest::Approx(v.at(4, 3, 2)).epsilon(1e-15));
}

TEST_CASE("trilinear_sample is exact on linear ramps") {
    const Volume v = make_ramp({6, 5, 4}, 1.0, 0.0, 0.0);
    CHECK(trilinear_sample(v, 1.5, 0, 0) == doctest::Approx(1.5).epsilon(1e-14));
    const Volume w = make_ramp({6, 5, 4}, 0.5, -2.0, 3.0, 1.0);
    CHECK(trilinear_sample(w, 2.25, 1.5, 0.75) ==
          doctest::Approx(0.5 * 2.25 - 2.0 * 1.5 + 3.0 * 0.75 + 1.0).epsilon(1e-13));
}

TEST_CASE("trilinear_sample clamps to the border voxel") {
    const Volume v = make_random({4, 4, 4}, 9);
    CHECK(trilinear_sample(v, -5, 0, 0) == doctest::Approx(v.at(0, 0, 0)));
    CHECK(trilinear_sample(v, 10, 3, 3) == doctest::Approx(v.at(3, 3, 3)));
    CHECK(trilinear_sample(v, 1.0, -2.5, 7.0) == doctest::Approx(v.at(1, 0, 3)));
}

TEST_CASE("warp_image with a zero field is bitwise identity") {
    const Volume v = make_random({8, 6, 4}, 11);
    const DisplacementField zero({8, 6, 4}, v.spacing);
    const Volume w = warp_image(v, zero);
    CHECK(w.data == v.data);
}

TEST_CASE("warp_image shifts a ramp exactly") {
    const Dims3 d{8, 6, 4};
    const Volume v = make_ramp(d, 1.0, 0.0, 0.0);
    DisplacementField u(d, v.spacing);
    for (std::int64_t i = 0; i < d.voxels(); ++i) u.data[std::size_t(i)] = 1.0;  // u_x = +1
    const Volume w = warp_image(v, u);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx - 1; ++x) {
                CHECK(w.at(x, y, z) == doctest::Approx(x + 1.0).epsilon(1e-14));
            }
}

TEST_CASE("warp_image rejects mismatched dims") {
    const Volume v = make_random({4, 4, 4}, 1);
    const DisplacementField u({4, 4, 2}, v.spacing);
    CHECK_THROWS_AS((void)warp_image(v, u), ShapeError);
}

TEST_CASE("warp_labels identity and integer shift") {
    const Dims3 d{6, 6, 4};
    LabelMap l(d, {1, 1, 1});
    l.at(3, 2, 1) = kLV;
    const DisplacementField zero(d, l.spacing);
    CHECK(warp_labels(l, zero).data == l.data);

    DisplacementField shift(d, l.spacing);
    for (std::int64_t i = 0; i < d.voxels(); ++i) shift.data[std::size_t(i)] = -1.0;  // sample x-1
    const LabelMap moved = warp_labels(l, shift);
    CHECK(moved.at(4, 2, 1) == kLV);  // label moved one voxel in +x
    CHECK(moved.at(3, 2, 1) == kBackground);
}

TEST_CASE("warp_labels output classes are a subset of the input classes") {
    const Dims3 d{8, 8, 4};
    LabelMap l(d, {1, 1, 1});
    Rng rng(3);
    for (auto& v : l.data) v = std::uint8_t(rng.uniform_int(3));  // uses classes 0..2 only
    DisplacementField u(d, l.spacing);
    for (auto& x : u.data) x = 4.0 * (rng.uniform() - 0.5);
    const LabelMap w = warp_labels(l, u);
    for (auto v : w.data) CHECK(v <= 2);
}

TEST_CASE("jacobian_map of the zero field is one everywhere") {
    const DisplacementField zero({5, 5, 5}, {1, 1, 1});
    const Volume j = jacobian_map(zero);
    for (double v : j.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("jacobian_map of an affine field equals det(A) on the interior") {
    // u(x) = (A - I) x, so the warp map is exactly A
    const double A[3][3] = {{1.2, 0.1, 0.0}, {-0.2, 0.9, 0.05}, {0.1, 0.0, 1.1}};
    const double det_a = A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1]) -
                         A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0]) +
                         A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]);
    const Dims3 d{7, 6, 5};
    DisplacementField u(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const double p[3] = {double(x), double(y), double(z)};
                for (int c = 0; c < 3; ++c) {
                    u.at(c, x, y, z) =
                        A[c][0] * p[0] + A[c][1] * p[1] + A[c][2] * p[2] - p[c];
                }
            }
    const Volume j = jacobian_map(u);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                // one-sided differences are exact on affine maps too
                CHECK(j.at(x, y, z) == doctest::Approx(det_a).epsilon(1e-10));
            }
}

TEST_CASE("jacobian_map rejects grids thinner than 3 voxels") {
    const DisplacementField u({2, 5, 5}, {1, 1, 1});
    CHECK_THROWS_AS((void)jacobian_map(u), ShapeError);
}

TEST_CASE("noise sigmas follow 5*min(s)/s_i") {
    const auto s = noise_sigmas({1.5, 1.5, 3.15});
    CHECK(s[0] == doctest::Approx(5.0));
    CHECK(s[1] == doctest::Approx(5.0));
    CHECK(s[2] == doctest::Approx(5.0 * 1.5 / 3.15).epsilon(1e-12));
    CHECK(s[2] == doctest::Approx(2.3810).epsilon(1e-4));

    const auto iso = noise_sigmas({1, 1, 1});
    CHECK(iso[0] == 5.0);
    CHECK(iso[1] == 5.0);
    CHECK(iso[2] == 5.0);
}

TEST_CASE("sample_noise_field empirical std matches the per-axis sigmas") {
    const Dims3 d{100, 100, 100};  // 1e6 voxels
    Rng rng(1234);
    const DisplacementField f = sample_noise_field(d, {1, 1, 2}, rng);
    const auto sigmas = noise_sigmas({1, 1, 2});
    for (int c = 0; c < 3; ++c) {
        const double* u = f.channel(c);
        double mean = 0.0;
        for (std::int64_t i = 0; i < d.voxels(); ++i) mean += u[i];
        mean /= double(d.voxels());
        double var = 0.0;
        for (std::int64_t i = 0; i < d.voxels(); ++i) var += (u[i] - mean) * (u[i] - mean);
        var /= double(d.voxels());
        CHECK(std::abs(std::sqrt(var) - sigmas[std::size_t(c)]) / sigmas[std::size_t(c)] < 0.01);
        CHECK(var == doctest::Approx(sigmas[std::size_t(c)] * sigmas[std::size_t(c)]).epsilon(0.02));
    }
    CHECK(sigmas[2] == doctest::Approx(2.5));
}

TEST_CASE("sample_noise_field is deterministic in the seed") {
    Rng a(77), b(77);
    const DisplacementField fa = sample_noise_field({8, 8, 8}, {1, 1, 1}, a);
    const DisplacementField fb = sample_noise_field({8, 8, 8}, {1, 1, 1}, b);
    CHECK(fa.data == fb.data);
}

TEST_CASE("downsample_field: constant field rescales by 1/factor") {
    const Dims3 d{16, 16, 8};
    DisplacementField u(d, {1, 1, 1});
    for (std::int64_t i = 0; i < d.voxels(); ++i) u.data[std::size_t(i)] = 8.0;  // u_x = 8
    const DisplacementField c = downsample_field(u, 8);
    CHECK(c.dims == Dims3{2, 2, 1});
    for (std::int64_t i = 0; i < c.dims.voxels(); ++i) {
        CHECK(c.data[std::size_t(i)] == doctest::Approx(1.0));
    }
    const DisplacementField zero_c = downsample_field(DisplacementField(d, {1, 1, 1}), 2);
    for (double v : zero_c.data) CHECK(v == 0.0);
}

TEST_CASE("downsample_field validates factor and divisibility") {
    const DisplacementField u({12, 12, 6}, {1, 1, 1});
    CHECK_THROWS_AS((void)downsample_field(u, 3), std::invalid_argument);
    CHECK_THROWS_AS((void)downsample_field(u, 8), ShapeError);
}

TEST_CASE("upsample_field: constants scale by the factor, zero stays zero") {
    const Dims3 d{4, 4, 2};
    DisplacementField u(d, {1, 1, 1});
    for (std::int64_t i = 0; i < d.voxels(); ++i) u.data[std::size_t(i)] = 1.0;
    const DisplacementField f = upsample_field(u, 2);
    CHECK(f.dims == Dims3{8, 8, 4});
    for (std::int64_t i = 0; i < f.dims.voxels(); ++i) {
        CHECK(f.data[std::size_t(i)] == doctest::Approx(2.0));
    }
    const DisplacementField z = upsample_field(DisplacementField(d, {1, 1, 1}), 4);
    for (double v : z.data) CHECK(v == 0.0);
}

TEST_CASE("upsample_field is exact on linear fields away from the border") {
    const Dims3 d{8, 8, 4};
    DisplacementField u(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) u.at(0, x, y, z) = 0.25 * x + 0.5 * y - 0.1 * z;
    const DisplacementField f = upsample_field(u, 2);
    // fine voxel x maps to coarse coordinate (x - 0.5) / 2; values scale by 2
    for (int z = 1; z < f.dims.nz - 1; ++z)
        for (int y = 1; y < f.dims.ny - 1; ++y)
            for (int x = 1; x < f.dims.nx - 1; ++x) {
                const double cx = (x - 0.5) / 2.0, cy = (y - 0.5) / 2.0, cz = (z - 0.5) / 2.0;
                const double expect = 2.0 * (0.25 * cx + 0.5 * cy - 0.1 * cz);
                CHECK(f.at(0, x, y, z) == doctest::Approx(expect).epsilon(1e-12));
            }
}

TEST_CASE("downsample then upsample preserves constant fields exactly") {
    const Dims3 d{16, 8, 8};
    DisplacementField u(d, {1, 1, 1});
    for (int c = 0; c < 3; ++c) {
        double* ch = u.channel(c);
        for (std::int64_t i = 0; i < d.voxels(); ++i) ch[i] = double(c) - 1.0;
    }
    const DisplacementField rt = upsample_field(downsample_field(u, 4), 4);
    CHECK(rt.dims == d);
    for (std::size_t i = 0; i < u.data.size(); ++i) {
        CHECK(rt.data[i] == doctest::Approx(u.data[i]).epsilon(1e-13));
    }
}

TEST_CASE("down(8)/up(8) round-trip on a band-limited field keeps relative L2 error < 0.1") {
    // wavelengths stay well below the coarse-grid Nyquist rate (factor 8)
    const Dims3 d{64, 64, 16};
    const double pi = 3.14159265358979;
    DisplacementField u(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                u.at(0, x, y, z) = 3.0 * std::sin(2.0 * pi * x / 96.0) + 0.5;
                u.at(1, x, y, z) = 2.0 * std::cos(2.0 * pi * (x + y) / 128.0);
                u.at(2, x, y, z) = 1.0 + 0.02 * x - 0.01 * y;
            }
    const DisplacementField rt = upsample_field(downsample_field(u, 8), 8);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < u.data.size(); ++i) {
        num += (rt.data[i] - u.data[i]) * (rt.data[i] - u.data[i]);
        den += u.data[i] * u.data[i];
    }
    CHECK(std::sqrt(num / den) < 0.1);
}

TEST_CASE("center_crop_or_pad arithmetic") {
    const Dims3 d{6, 6, 6};
    Volume v = make_random(d, 5);
    SUBCASE("identity") {
        const Volume same = center_crop_or_pad(v, d);
        CHECK(same.data == v.data);
    }
    SUBCASE("crop 6->4 moves a marked voxel from index 3 to 2") {
        v.at(3, 3, 3) = 123.0;
        const Volume c = center_crop_or_pad(v, {4, 4, 4});
        CHECK(c.at(2, 2, 2) == 123.0);
    }
    SUBCASE("pad 4->6 of a constant volume stays constant") {
        const Volume k(Dims3{4, 4, 4}, Spacing3{1, 1, 1}, 2.5);
        const Volume p = center_crop_or_pad(k, {6, 6, 6});
        for (double x : p.data) CHECK(x == 2.5);  // min intensity == the constant
    }
    SUBCASE("padding uses the minimum intensity") {
        Volume k(Dims3{2, 2, 2}, Spacing3{1, 1, 1}, 5.0);
        k.at(0, 0, 0) = -3.0;
        const Volume p = center_crop_or_pad(k, {4, 4, 4});
        CHECK(p.at(0, 0, 0) == -3.0);  // corner is padding
    }
    SUBCASE("odd remainder puts the extra voxel on the high side") {
        Volume k(Dims3{4, 1, 1}, Spacing3{1, 1, 1}, 0.0);
        for (int x = 0; x < 4; ++x) k.at(x, 0, 0) = x;
        const Volume c = center_crop_or_pad(k, {3, 1, 1});
        // source origin (4-3)/2 = 0: keeps indices 0..2, drops the high end
        CHECK(c.at(0, 0, 0) == 0.0);
        CHECK(c.at(2, 0, 0) == 2.0);
    }
    SUBCASE("labels pad with background") {
        LabelMap l(Dims3{2, 2, 2}, Spacing3{1, 1, 1}, kLV);
        const LabelMap p = center_crop_or_pad(l, {4, 4, 4});
        CHECK(p.at(0, 0, 0) == kBackground);
        CHECK(p.at(1, 1, 1) == kLV);
    }
}
