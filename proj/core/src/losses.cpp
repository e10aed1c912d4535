#include "flowreg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowreg/tensor.hpp"
#include "flowreg/volume_ops.hpp"

namespace flowreg {

namespace {

void validate(const LossConfig& cfg) {
    if (cfg.ncc_window < 3 || cfg.ncc_window % 2 == 0) {
        throw std::invalid_argument("LossConfig: ncc_window must be odd and >= 3");
    }
    if (!(cfg.eps > 0)) throw std::invalid_argument("LossConfig: eps must be positive");
    if (cfg.grad_weight < 0) {
        throw std::invalid_argument("LossConfig: grad_weight must be non-negative");
    }
}

// Sliding-window sum along one axis (window [i-r, i+r] intersected with the
// line), via per-line prefix sums.
void box_sum_axis(std::vector<double>& a, const Dims3& d, int axis, int r) {
    const int len[3] = {d.nx, d.ny, d.nz};
    const std::int64_t stride[3] = {1, d.nx, std::int64_t(d.nx) * d.ny};
    const int n = len[axis];
    const std::int64_t s = stride[axis];

    // enumerate all lines along `axis`
    const int la = (axis + 1) % 3, lb = (axis + 2) % 3;
    const std::int64_t n_lines = std::int64_t(len[la]) * len[lb];
#pragma omp parallel
    {
        std::vector<double> prefix(std::size_t(n) + 1);
#pragma omp for schedule(static)
        for (std::int64_t li = 0; li < n_lines; ++li) {
            const std::int64_t ia = li % len[la];
            const std::int64_t ib = li / len[la];
            double* line = a.data() + ia * stride[la] + ib * stride[lb];
            prefix[0] = 0.0;
            for (int i = 0; i < n; ++i) prefix[std::size_t(i) + 1] = prefix[std::size_t(i)] + line[std::int64_t(i) * s];
            for (int i = 0; i < n; ++i) {
                const int lo = std::max(0, i - r);
                const int hi = std::min(n - 1, i + r);
                line[std::int64_t(i) * s] = prefix[std::size_t(hi) + 1] - prefix[std::size_t(lo)];
            }
        }
    }
}

std::vector<double> box_sum(const std::vector<double>& src, const Dims3& d, int r) {
    std::vector<double> out = src;
    box_sum_axis(out, d, 0, r);
    box_sum_axis(out, d, 1, r);
    box_sum_axis(out, d, 2, r);
    return out;
}

// number of in-grid voxels of the window centered at index i
inline double window_len(int i, int n, int r) {
    return double(std::min(n - 1, i + r) - std::max(0, i - r) + 1);
}

struct NccFields {
    std::vector<double> sa, sb, cross, var_a, var_b, count;
};

NccFields ncc_fields(const Volume& warped, const Volume& fixed, const LossConfig& cfg) {
    const Dims3 d = warped.dims;
    const std::int64_t n = d.voxels();
    const int r = cfg.ncc_window / 2;

    NccFields f;
    f.sa = box_sum(warped.data, d, r);
    f.sb = box_sum(fixed.data, d, r);
    std::vector<double> tmp(static_cast<std::size_t>(n));
    for (std::int64_t v = 0; v < n; ++v) tmp[std::size_t(v)] = warped.data[std::size_t(v)] * warped.data[std::size_t(v)];
    f.var_a = box_sum(tmp, d, r);
    for (std::int64_t v = 0; v < n; ++v) tmp[std::size_t(v)] = fixed.data[std::size_t(v)] * fixed.data[std::size_t(v)];
    f.var_b = box_sum(tmp, d, r);
    for (std::int64_t v = 0; v < n; ++v) tmp[std::size_t(v)] = warped.data[std::size_t(v)] * fixed.data[std::size_t(v)];
    f.cross = box_sum(tmp, d, r);

    f.count.resize(std::size_t(n));
    std::int64_t v = 0;
    for (int z = 0; z < d.nz; ++z) {
        const double wz = window_len(z, d.nz, r);
        for (int y = 0; y < d.ny; ++y) {
            const double wyz = wz * window_len(y, d.ny, r);
            for (int x = 0; x < d.nx; ++x, ++v) f.count[std::size_t(v)] = wyz * window_len(x, d.nx, r);
        }
    }

    // turn raw sums into centered moments in place
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t u = std::size_t(i);
        const double cnt = f.count[u];
        const double ma = f.sa[u] / cnt;
        const double mb = f.sb[u] / cnt;
        f.cross[u] -= f.sa[u] * mb;
        f.var_a[u] = std::max(0.0, f.var_a[u] - f.sa[u] * ma);
        f.var_b[u] = std::max(0.0, f.var_b[u] - f.sb[u] * mb);
    }
    return f;
}

}  // namespace

double ncc_loss(const Volume& warped, const Volume& fixed, const LossConfig& cfg) {
    validate(cfg);
    require_same_dims(warped.dims, fixed.dims, "ncc_loss");
    const NccFields f = ncc_fields(warped, fixed, cfg);
    const std::int64_t n = warped.dims.voxels();
    double acc = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : acc)
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t u = std::size_t(i);
        const double pq = (f.var_a[u] + cfg.eps) * (f.var_b[u] + cfg.eps);
        acc += cfg.signed_ncc ? f.cross[u] / std::sqrt(pq)
                              : f.cross[u] * f.cross[u] / pq;
    }
    return -acc / double(n);
}

Volume ncc_loss_grad_warped(const Volume& warped, const Volume& fixed, const LossConfig& cfg) {
    validate(cfg);
    require_same_dims(warped.dims, fixed.dims, "ncc_loss_grad_warped");
    const Dims3 d = warped.dims;
    const std::int64_t n = d.voxels();
    const int r = cfg.ncc_window / 2;
    const NccFields f = ncc_fields(warped, fixed, cfg);

    // Per-window coefficients; the gradient at a voxel is a box sum of these
    // over the windows containing it (window membership is symmetric).
    std::vector<double> k1(static_cast<std::size_t>(n)), k2(static_cast<std::size_t>(n)), k3(static_cast<std::size_t>(n)), k4(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t u = std::size_t(i);
        const double p = f.var_a[u] + cfg.eps;
        const double q = f.var_b[u] + cfg.eps;
        const double c = f.cross[u];
        const double ma = f.sa[u] / f.count[u];
        const double mb = f.sb[u] / f.count[u];
        double t1, t3;
        if (cfg.signed_ncc) {
            const double rs = 1.0 / std::sqrt(p * q);
            t1 = rs;           // multiplies (b_w - mean_b)
            t3 = c * rs / p;   // multiplies (a_w - mean_a)
        } else {
            t1 = 2.0 * c / (p * q);
            t3 = c * c / (p * p * q) * 2.0;
        }
        k1[u] = t1;
        k2[u] = t1 * mb;
        k3[u] = t3;
        k4[u] = t3 * ma;
    }
    const std::vector<double> b1 = box_sum(k1, d, r);
    const std::vector<double> b2 = box_sum(k2, d, r);
    const std::vector<double> b3 = box_sum(k3, d, r);
    const std::vector<double> b4 = box_sum(k4, d, r);

    Volume out(d, warped.spacing);
    const double scale = -1.0 / double(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t u = std::size_t(i);
        out.data[u] = scale * (warped.data[u] * (-b3[u]) + fixed.data[u] * b1[u] - b2[u] + b4[u]);
    }
    return out;
}

double grad_loss(const DisplacementField& ddf) {
    const Dims3 d = ddf.dims;
    if (d.nx < 2 || d.ny < 2 || d.nz < 2) {
        throw ShapeError("grad_loss: dims must be >= 2 per axis, got " + d.str());
    }
    const std::int64_t n = d.voxels();
    const int len[3] = {d.nx, d.ny, d.nz};
    const std::int64_t stride[3] = {1, d.nx, std::int64_t(d.nx) * d.ny};

    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const double* u = ddf.channel(c);
        for (int axis = 0; axis < 3; ++axis) {
            const std::int64_t s = stride[axis];
            const std::int64_t m_valid = n / len[axis] * (len[axis] - 1);
            double acc = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : acc)
            for (std::int64_t v = 0; v < n; ++v) {
                const int idx_axis = int((v / s) % len[axis]);
                if (idx_axis == len[axis] - 1) continue;
                const double diff = u[v + s] - u[v];
                acc += diff * diff;
            }
            total += acc / double(m_valid);
        }
    }
    return total / 9.0;
}

DisplacementField grad_loss_grad(const DisplacementField& ddf) {
    const Dims3 d = ddf.dims;
    if (d.nx < 2 || d.ny < 2 || d.nz < 2) {
        throw ShapeError("grad_loss_grad: dims must be >= 2 per axis, got " + d.str());
    }
    const std::int64_t n = d.voxels();
    const int len[3] = {d.nx, d.ny, d.nz};
    const std::int64_t stride[3] = {1, d.nx, std::int64_t(d.nx) * d.ny};

    DisplacementField out(d, ddf.spacing);
    for (int c = 0; c < 3; ++c) {
        const double* u = ddf.channel(c);
        double* g = out.channel(c);
        for (int axis = 0; axis < 3; ++axis) {
            const std::int64_t s = stride[axis];
            const std::int64_t m_valid = n / len[axis] * (len[axis] - 1);
            const double w = 2.0 / (9.0 * double(m_valid));
#pragma omp parallel for schedule(static)
            for (std::int64_t v = 0; v < n; ++v) {
                const int idx_axis = int((v / s) % len[axis]);
                double acc = 0.0;
                if (idx_axis < len[axis] - 1) acc -= u[v + s] - u[v];
                if (idx_axis > 0) acc += u[v] - u[v - s];
                g[v] += w * acc;
            }
        }
    }
    return out;
}

double reg_loss(const Volume& moving, const Volume& fixed, const DisplacementField& ddf,
                const LossConfig& cfg) {
    require_same_dims(moving.dims, ddf.dims, "reg_loss");
    const Volume warped = warp_image(moving, ddf);
    double loss = ncc_loss(warped, fixed, cfg);
    if (cfg.grad_weight != 0.0) loss += cfg.grad_weight * grad_loss(ddf);
    return loss;
}

DisplacementField reg_loss_grad_ddf(const Volume& moving, const Volume& fixed,
                                    const DisplacementField& ddf, const LossConfig& cfg) {
    require_same_dims(moving.dims, ddf.dims, "reg_loss_grad_ddf");
    require_same_dims(fixed.dims, ddf.dims, "reg_loss_grad_ddf");
    const Dims3 d = ddf.dims;
    const std::int64_t n = d.voxels();

    const Volume warped = warp_image(moving, ddf);
    const Volume d_warped = ncc_loss_grad_warped(warped, fixed, cfg);

    DisplacementField out =
        cfg.grad_weight != 0.0 ? grad_loss_grad(ddf) : DisplacementField(d, ddf.spacing);
    if (cfg.grad_weight != 0.0 && cfg.grad_weight != 1.0) {
        for (auto& g : out.data) g *= cfg.grad_weight;
    }

    const double* ux = ddf.channel(0);
    const double* uy = ddf.channel(1);
    const double* uz = ddf.channel(2);
    double* gx = out.channel(0);
    double* gy = out.channel(1);
    double* gz = out.channel(2);
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const int x = int(v % d.nx);
        const int y = int((v / d.nx) % d.ny);
        const int z = int(v / (std::int64_t(d.nx) * d.ny));
        const TriSample ts =
            trilinear_sample_grad(moving, x + ux[v], y + uy[v], z + uz[v]);
        const double g = d_warped.data[std::size_t(v)];
        gx[v] += g * ts.dx;
        gy[v] += g * ts.dy;
        gz[v] += g * ts.dz;
    }
    return out;
}

}  // namespace flowreg
