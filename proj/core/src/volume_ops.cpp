#include "flowreg/volume_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowreg/tensor.hpp"

namespace flowreg {

namespace {

Grid<double> field_to_grid(const DisplacementField& f) {
    Grid<double> g(3, f.dims);
    g.v = f.data;
    return g;
}

DisplacementField grid_to_field(const Grid<double>& g, const Spacing3& spacing) {
    DisplacementField f(g.dims, spacing);
    f.data = g.v;
    return f;
}

bool is_power_of_two(int x) { return x > 0 && (x & (x - 1)) == 0; }

}  // namespace

double trilinear_sample(const Volume& vol, double px, double py, double pz) {
    return kernels::trilinear_fetch(vol.data.data(), vol.dims, px, py, pz);
}

TriSample trilinear_sample_grad(const Volume& vol, double px, double py, double pz) {
    const auto f = kernels::trilinear_fetch_grad(vol.data.data(), vol.dims, px, py, pz);
    return TriSample{f.value, f.dx, f.dy, f.dz};
}

Volume warp_image(const Volume& moving, const DisplacementField& ddf) {
    require_same_dims(moving.dims, ddf.dims, "warp_image");
    Volume out(moving.dims, moving.spacing);
    const Dims3 d = moving.dims;
    const double* ux = ddf.channel(0);
    const double* uy = ddf.channel(1);
    const double* uz = ddf.channel(2);
    const double* src = moving.data.data();
    double* dst = out.data.data();
    const std::int64_t n = d.voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const int x = int(v % d.nx);
        const int y = int((v / d.nx) % d.ny);
        const int z = int(v / (std::int64_t(d.nx) * d.ny));
        dst[v] = kernels::trilinear_fetch(src, d, x + ux[v], y + uy[v], z + uz[v]);
    }
    return out;
}

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& ddf) {
    require_same_dims(labels.dims, ddf.dims, "warp_labels");
    LabelMap out(labels.dims, labels.spacing);
    const Dims3 d = labels.dims;
    const double* ux = ddf.channel(0);
    const double* uy = ddf.channel(1);
    const double* uz = ddf.channel(2);
    const std::int64_t n = d.voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const int x = int(v % d.nx);
        const int y = int((v / d.nx) % d.ny);
        const int z = int(v / (std::int64_t(d.nx) * d.ny));
        const int xs = std::clamp(int(std::lround(x + ux[v])), 0, d.nx - 1);
        const int ys = std::clamp(int(std::lround(y + uy[v])), 0, d.ny - 1);
        const int zs = std::clamp(int(std::lround(z + uz[v])), 0, d.nz - 1);
        out.data[v] = labels.data[voxel_index(d, xs, ys, zs)];
    }
    return out;
}

Volume jacobian_map(const DisplacementField& ddf) {
    const Dims3 d = ddf.dims;
    if (d.nx < 3 || d.ny < 3 || d.nz < 3) {
        throw ShapeError("jacobian_map: dims must be >= 3 per axis, got " + d.str());
    }
    Volume out(d, ddf.spacing);
    const std::int64_t n = d.voxels();

    // derivative of channel c along axis: central on the interior, one-sided
    // on the faces, all in voxel units
    auto deriv = [&](const double* u, int x, int y, int z, int axis) {
        int lo[3] = {x, y, z};
        int hi[3] = {x, y, z};
        const int len[3] = {d.nx, d.ny, d.nz};
        double scale = 0.5;
        if (lo[axis] == 0) {
            hi[axis] += 1;
            scale = 1.0;
        } else if (hi[axis] == len[axis] - 1) {
            lo[axis] -= 1;
            scale = 1.0;
        } else {
            lo[axis] -= 1;
            hi[axis] += 1;
        }
        return (u[voxel_index(d, hi[0], hi[1], hi[2])] - u[voxel_index(d, lo[0], lo[1], lo[2])]) *
               scale;
    };

    const double* ch[3] = {ddf.channel(0), ddf.channel(1), ddf.channel(2)};
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const int x = int(v % d.nx);
        const int y = int((v / d.nx) % d.ny);
        const int z = int(v / (std::int64_t(d.nx) * d.ny));
        double J[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                J[i][j] = deriv(ch[i], x, y, z, j) + (i == j ? 1.0 : 0.0);
        out.data[v] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                      J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                      J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
    }
    return out;
}

std::array<double, 3> noise_sigmas(const Spacing3& spacing) {
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) {
        throw std::invalid_argument("noise_sigmas: spacing must be strictly positive");
    }
    const double m = spacing.min();
    return {5.0 * m / spacing.x, 5.0 * m / spacing.y, 5.0 * m / spacing.z};
}

DisplacementField sample_noise_field(Dims3 dims, Spacing3 spacing, Rng& rng) {
    const auto sigma = noise_sigmas(spacing);
    DisplacementField f(dims, spacing);
    const std::int64_t n = dims.voxels();
    for (int c = 0; c < 3; ++c) {
        double* u = f.channel(c);
        for (std::int64_t v = 0; v < n; ++v) u[v] = sigma[std::size_t(c)] * rng.normal();
    }
    return f;
}

DisplacementField downsample_field(const DisplacementField& ddf, int factor) {
    if (!is_power_of_two(factor)) {
        throw std::invalid_argument("downsample_field: factor must be a power of two");
    }
    const Dims3 d = ddf.dims;
    if (d.nx % factor || d.ny % factor || d.nz % factor) {
        throw ShapeError("downsample_field: dims " + d.str() + " not divisible by " +
                         std::to_string(factor));
    }
    Grid<double> out;
    kernels::downsample_avg(field_to_grid(ddf), factor, 1.0 / factor, out);
    return grid_to_field(out, Spacing3{ddf.spacing.x * factor, ddf.spacing.y * factor,
                                       ddf.spacing.z * factor});
}

DisplacementField upsample_field(const DisplacementField& ddf, int factor) {
    if (!is_power_of_two(factor)) {
        throw std::invalid_argument("upsample_field: factor must be a power of two");
    }
    Grid<double> out;
    kernels::upsample_linear(field_to_grid(ddf), factor, double(factor), out);
    return grid_to_field(out, Spacing3{ddf.spacing.x / factor, ddf.spacing.y / factor,
                                       ddf.spacing.z / factor});
}

namespace {

// Source index range mapping for a symmetric crop/pad along one axis:
// returns the source index of target index 0 (may be negative when padding).
int crop_origin(int src, int tgt) { return (src - tgt) / 2; }

template <typename Store, typename Elem>
void crop_pad_copy(const Store& src, Dims3 sd, Store& dst, Dims3 td, Elem fill) {
    const int ox = crop_origin(sd.nx, td.nx);
    const int oy = crop_origin(sd.ny, td.ny);
    const int oz = crop_origin(sd.nz, td.nz);
    for (int z = 0; z < td.nz; ++z)
        for (int y = 0; y < td.ny; ++y)
            for (int x = 0; x < td.nx; ++x) {
                const int sx = x + ox, sy = y + oy, sz = z + oz;
                const bool inside = sx >= 0 && sx < sd.nx && sy >= 0 && sy < sd.ny && sz >= 0 &&
                                    sz < sd.nz;
                dst[voxel_index(td, x, y, z)] =
                    inside ? src[voxel_index(sd, sx, sy, sz)] : fill;
            }
}

}  // namespace

Volume center_crop_or_pad(const Volume& vol, Dims3 target) {
    if (target.nx <= 0 || target.ny <= 0 || target.nz <= 0) {
        throw std::invalid_argument("center_crop_or_pad: target dims must be positive");
    }
    Volume out(target, vol.spacing);
    const double fill = vol.data.empty()
                            ? 0.0
                            : *std::min_element(vol.data.begin(), vol.data.end());
    crop_pad_copy(vol.data, vol.dims, out.data, target, fill);
    return out;
}

LabelMap center_crop_or_pad(const LabelMap& labels, Dims3 target) {
    if (target.nx <= 0 || target.ny <= 0 || target.nz <= 0) {
        throw std::invalid_argument("center_crop_or_pad: target dims must be positive");
    }
    LabelMap out(target, labels.spacing);
    crop_pad_copy(labels.data, labels.dims, out.data, target, std::uint8_t(kBackground));
    return out;
}

}  // namespace flowreg
