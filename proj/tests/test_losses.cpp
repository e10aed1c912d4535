#include <doctest.h>

#include <cmath>
#include <vector>

#include "flowreg/losses.hpp"
#include "flowreg/rng.hpp"
#include "flowreg/volume_ops.hpp"

using namespace flowreg;

namespace {

Volume random_volume(Dims3 d, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Volume v(d, {1, 1, 1});
    Rng rng(seed);
    for (auto& x : v.data) x = lo + (hi - lo) * rng.uniform();
    return v;
}

// naive O(n * w^3) local squared NCC, the independent oracle
double ncc_loss_naive(const Volume& a, const Volume& b, const LossConfig& cfg) {
    const Dims3 d = a.dims;
    const int r = cfg.ncc_window / 2;
    double acc = 0.0;
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                int n = 0;
                for (int dz = -r; dz <= r; ++dz)
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const int xi = x + dx, yi = y + dy, zi = z + dz;
                            if (xi < 0 || xi >= d.nx || yi < 0 || yi >= d.ny || zi < 0 ||
                                zi >= d.nz) {
                                continue;
                            }
                            const double av = a.at(xi, yi, zi), bv = b.at(xi, yi, zi);
                            sa += av;
                            sb += bv;
                            saa += av * av;
                            sbb += bv * bv;
                            sab += av * bv;
                            ++n;
                        }
                const double cross = sab - sa * sb / n;
                const double va = std::max(0.0, saa - sa * sa / n);
                const double vb = std::max(0.0, sbb - sb * sb / n);
                acc += cross * cross / ((va + cfg.eps) * (vb + cfg.eps));
            }
    return -acc / double(d.voxels());
}

// naive forward-difference gradient penalty
double grad_loss_naive(const DisplacementField& u) {
    const Dims3 d = u.dims;
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        for (int axis = 0; axis < 3; ++axis) {
            double acc = 0.0;
            std::int64_t m = 0;
            for (int z = 0; z < d.nz; ++z)
                for (int y = 0; y < d.ny; ++y)
                    for (int x = 0; x < d.nx; ++x) {
                        int xn = x + (axis == 0), yn = y + (axis == 1), zn = z + (axis == 2);
                        if (xn >= d.nx || yn >= d.ny || zn >= d.nz) continue;
                        const double diff = u.at(c, xn, yn, zn) - u.at(c, x, y, z);
                        acc += diff * diff;
                        ++m;
                    }
            total += acc / double(m);
        }
    }
    return total / 9.0;
}

}  // namespace

TEST_CASE("ncc_loss of an image with itself is -1") {
    const Volume v = random_volume({12, 10, 8}, 5);
    LossConfig cfg;
    CHECK(ncc_loss(v, v, cfg) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("ncc_loss is invariant to positive affine intensity maps") {
    const Volume v = random_volume({12, 10, 8}, 6);
    Volume w = v;
    for (auto& x : w.data) x = 3.5 * x + 2.0;
    LossConfig cfg;
    CHECK(ncc_loss(w, v, cfg) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(std::abs(ncc_loss(w, v, cfg) - ncc_loss(v, v, cfg)) < 1e-6);
}

TEST_CASE("ncc_loss stays within [-1, 0]") {
    const Volume a = random_volume({10, 9, 7}, 7);
    const Volume b = random_volume({10, 9, 7}, 8);
    LossConfig cfg;
    const double l = ncc_loss(a, b, cfg);
    CHECK(l <= 0.0);
    CHECK(l >= -1.0);
}

TEST_CASE("ncc_loss matches the naive per-window oracle") {
    const Dims3 d{9, 8, 7};
    LossConfig cfg;
    cfg.ncc_window = 5;
    SUBCASE("orthogonal ramps") {
        Volume a(d, {1, 1, 1}), b(d, {1, 1, 1});
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    a.at(x, y, z) = double(x);
                    b.at(x, y, z) = double(y);
                }
        CHECK(ncc_loss(a, b, cfg) == doctest::Approx(ncc_loss_naive(a, b, cfg)).epsilon(1e-8));
    }
    SUBCASE("random images") {
        const Volume a = random_volume(d, 21);
        const Volume b = random_volume(d, 22);
        CHECK(ncc_loss(a, b, cfg) == doctest::Approx(ncc_loss_naive(a, b, cfg)).epsilon(1e-8));
    }
    SUBCASE("shape error") {
        const Volume a = random_volume(d, 1);
        const Volume b = random_volume({4, 4, 4}, 2);
        CHECK_THROWS_AS((void)ncc_loss(a, b, cfg), ShapeError);
    }
}

TEST_CASE("grad_loss basics") {
    const Dims3 d{6, 5, 4};
    SUBCASE("constant field -> 0") {
        DisplacementField u(d, {1, 1, 1});
        for (auto& x : u.data) x = 3.0;
        CHECK(grad_loss(u) == 0.0);
    }
    SUBCASE("unit x-ramp in u_x -> 1/9") {
        DisplacementField u(d, {1, 1, 1});
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) u.at(0, x, y, z) = double(x);
        CHECK(grad_loss(u) == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    }
    SUBCASE("random field matches naive oracle") {
        DisplacementField u(d, {1, 1, 1});
        Rng rng(17);
        for (auto& x : u.data) x = rng.normal();
        CHECK(grad_loss(u) == doctest::Approx(grad_loss_naive(u)).epsilon(1e-10));
    }
}

TEST_CASE("reg_loss composition") {
    const Dims3 d{10, 10, 6};
    const Volume v = random_volume(d, 30);
    LossConfig cfg;
    SUBCASE("zero field on identical pair gives -1 + 0") {
        const DisplacementField zero(d, v.spacing);
        CHECK(reg_loss(v, v, zero, cfg) == doctest::Approx(-1.0).epsilon(1e-6));
    }
    SUBCASE("grad_weight 0 reduces to ncc alone") {
        DisplacementField u(d, v.spacing);
        Rng rng(31);
        for (auto& x : u.data) x = 0.5 * rng.normal();
        LossConfig no_grad = cfg;
        no_grad.grad_weight = 0.0;
        const Volume fixed = random_volume(d, 32);
        CHECK(reg_loss(v, fixed, u, no_grad) ==
              doctest::Approx(ncc_loss(warp_image(v, u), fixed, cfg)).epsilon(1e-12));
    }
}

namespace {

// central finite differences of reg_loss w.r.t. each displacement component
DisplacementField reg_loss_grad_fd(const Volume& moving, const Volume& fixed,
                                   const DisplacementField& ddf, const LossConfig& cfg,
                                   double h) {
    DisplacementField g(ddf.dims, ddf.spacing);
    DisplacementField probe = ddf;
    for (std::size_t i = 0; i < ddf.data.size(); ++i) {
        probe.data[i] = ddf.data[i] + h;
        const double up = reg_loss(moving, fixed, probe, cfg);
        probe.data[i] = ddf.data[i] - h;
        const double dn = reg_loss(moving, fixed, probe, cfg);
        probe.data[i] = ddf.data[i];
        g.data[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("reg_loss_grad_ddf matches central finite differences") {
    const Dims3 d{8, 8, 4};
    const Volume moving = random_volume(d, 41);
    const Volume fixed = random_volume(d, 42);
    LossConfig cfg;
    cfg.ncc_window = 5;

    DisplacementField u(d, {1, 1, 1});
    Rng rng(43);
    // keep sample points strictly inside trilinear cells so the loss is
    // smooth in a neighborhood of u
    for (auto& x : u.data) x = 0.8 * (rng.uniform() - 0.5) + 0.1;

    const DisplacementField g = reg_loss_grad_ddf(moving, fixed, u, cfg);
    const DisplacementField fd = reg_loss_grad_fd(moving, fixed, u, cfg, 1e-6);

    double num = 0.0, den = 0.0;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        num += (g.data[i] - fd.data[i]) * (g.data[i] - fd.data[i]);
        den += fd.data[i] * fd.data[i];
    }
    const double rel = std::sqrt(num / den);
    CHECK(rel < 1e-4);
    (void)max_rel;
}

TEST_CASE("gradient of grad_loss at a linear field matches the closed form") {
    // u_x = a*x: forward differences are a everywhere valid; the derivative
    // w.r.t. u_x(v) is 2a/(9 M) * ([v-e_x valid] - [v valid]), zero in the
    // interior, +-2a/(9 M) on the two x-faces
    const Dims3 d{6, 5, 4};
    const double a = 0.7;
    DisplacementField u(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) u.at(0, x, y, z) = a * x;
    const double m_valid = double(d.voxels()) * (d.nx - 1) / d.nx;
    const double edge = 2.0 * a / (9.0 * m_valid);

    const DisplacementField g = grad_loss_grad(u);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                double expect = 0.0;
                if (x == 0) expect = -edge;
                if (x == d.nx - 1) expect = edge;
                CHECK(g.at(0, x, y, z) == doctest::Approx(expect).epsilon(1e-10));
            }
    // other channels untouched
    for (int c = 1; c < 3; ++c) {
        const double* ch = g.channel(c);
        for (std::int64_t i = 0; i < d.voxels(); ++i) CHECK(ch[i] == 0.0);
    }
}

TEST_CASE("ncc gradient is ~0 at perfect alignment of a symmetric well") {
    // moving == fixed and ddf == 0: the similarity term sits at a stationary
    // point, so the NCC part of the gradient vanishes
    const Dims3 d{9, 9, 5};
    Volume v(d, {1, 1, 1});
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const double dx = x - 4.0, dy = y - 4.0, dz = z - 2.0;
                v.at(x, y, z) = std::exp(-0.1 * (dx * dx + dy * dy + dz * dz));
            }
    LossConfig cfg;
    cfg.grad_weight = 0.0;  // isolate the NCC term
    const DisplacementField zero(d, {1, 1, 1});
    const DisplacementField g = reg_loss_grad_ddf(v, v, zero, cfg);

    // response scale: gradient magnitude after a unit perturbation
    DisplacementField bumped = zero;
    bumped.data[std::size_t(zero.dims.voxels() / 2)] = 1.0;
    const DisplacementField gb = reg_loss_grad_ddf(v, v, bumped, cfg);
    double norm0 = 0.0, normb = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        norm0 = std::max(norm0, std::abs(g.data[i]));
        normb = std::max(normb, std::abs(gb.data[i]));
    }
    REQUIRE(normb > 0.0);
    CHECK(norm0 / normb < 1e-4);
}

TEST_CASE("one small guidance step does not increase reg_loss") {
    const Dims3 d{10, 10, 6};
    const Volume moving = random_volume(d, 51);
    Volume fixed = moving;
    // a smooth instance: fixed is a slightly shifted copy
    DisplacementField shift(d, {1, 1, 1});
    for (auto& x : shift.data) x = 0.3;
    fixed = warp_image(moving, shift);

    LossConfig cfg;
    DisplacementField u(d, {1, 1, 1});
    Rng rng(52);
    for (auto& x : u.data) x = 0.2 * rng.normal();

    const double before = reg_loss(moving, fixed, u, cfg);
    const DisplacementField g = reg_loss_grad_ddf(moving, fixed, u, cfg);

    // standard descent property with step halving
    double lambda = 0.05;
    bool decreased = false;
    for (int tries = 0; tries < 8 && !decreased; ++tries, lambda *= 0.5) {
        DisplacementField stepped = u;
        for (std::size_t i = 0; i < stepped.data.size(); ++i) {
            stepped.data[i] -= lambda * g.data[i];
        }
        decreased = reg_loss(moving, fixed, stepped, cfg) <= before + 1e-9;
    }
    CHECK(decreased);
}
