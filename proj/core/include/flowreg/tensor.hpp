#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "flowreg/types.hpp"

namespace flowreg {

/// Multi-channel 3D grid, channel-major, x-fastest within a channel.
/// The scalar type is a template parameter: float for production inference
/// and training, double for gradient verification.
template <typename T>
struct Grid {
    int c = 0;
    Dims3 dims;
    std::vector<T> v;

    Grid() = default;
    Grid(int channels, Dims3 d) : c(channels), dims(d), v(std::size_t(channels) * d.voxels(), T(0)) {}

    std::int64_t voxels() const { return dims.voxels(); }
    T* ch(int ci) { return v.data() + std::int64_t(ci) * voxels(); }
    const T* ch(int ci) const { return v.data() + std::int64_t(ci) * voxels(); }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }
    void resize(int channels, Dims3 d) {
        c = channels;
        dims = d;
        v.assign(std::size_t(channels) * d.voxels(), T(0));
    }
};

namespace kernels {

// ---------------------------------------------------------------------------
// Trilinear fetch with border clamp.
// ---------------------------------------------------------------------------

template <typename T>
struct TriFetch {
    T value;
    T dx, dy, dz;  // derivative w.r.t. the (unclamped) sample position
};

namespace detail {

struct AxisCoord {
    int i0;      // low cell index
    double f;    // fractional offset in [0,1]
    double din;  // 1 if the coordinate is inside [0, n-1], else 0
};

inline AxisCoord resolve_axis(double p, int n) {
    AxisCoord a;
    a.din = (p >= 0.0 && p <= double(n - 1)) ? 1.0 : 0.0;
    double pc = std::clamp(p, 0.0, double(n - 1));
    if (n == 1) {
        a.i0 = 0;
        a.f = 0.0;
        a.din = 0.0;
        return a;
    }
    int i0 = int(pc);
    if (i0 > n - 2) i0 = n - 2;  // derivative at the top face comes from the containing cell
    a.i0 = i0;
    a.f = pc - double(i0);
    return a;
}

}  // namespace detail

/// Interpolated value at (px,py,pz) in voxel coordinates; coordinates outside
/// the grid clamp to the border voxel.
template <typename T>
inline T trilinear_fetch(const T* d, const Dims3& dims, double px, double py, double pz) {
    const auto ax = detail::resolve_axis(px, dims.nx);
    const auto ay = detail::resolve_axis(py, dims.ny);
    const auto az = detail::resolve_axis(pz, dims.nz);
    const std::int64_t sy = dims.nx;
    const std::int64_t sz = std::int64_t(dims.nx) * dims.ny;
    const std::int64_t base = az.i0 * sz + ay.i0 * sy + ax.i0;
    const int xs = dims.nx > 1 ? 1 : 0;
    const int ys = dims.ny > 1 ? int(sy) : 0;
    const int zs = dims.nz > 1 ? int(sz) : 0;

    const double fx = ax.f, fy = ay.f, fz = az.f;
    const double c000 = double(d[base]);
    const double c100 = double(d[base + xs]);
    const double c010 = double(d[base + ys]);
    const double c110 = double(d[base + ys + xs]);
    const double c001 = double(d[base + zs]);
    const double c101 = double(d[base + zs + xs]);
    const double c011 = double(d[base + zs + ys]);
    const double c111 = double(d[base + zs + ys + xs]);

    const double c00 = c000 + fx * (c100 - c000);
    const double c10 = c010 + fx * (c110 - c010);
    const double c01 = c001 + fx * (c101 - c001);
    const double c11 = c011 + fx * (c111 - c011);
    const double c0 = c00 + fy * (c10 - c00);
    const double c1 = c01 + fy * (c11 - c01);
    return T(c0 + fz * (c1 - c0));
}

/// Value plus spatial derivative of the interpolant. The derivative is taken
/// from the containing cell (piecewise multilinear) and is zero along axes
/// where the coordinate fell outside the grid.
template <typename T>
inline TriFetch<T> trilinear_fetch_grad(const T* d, const Dims3& dims, double px, double py,
                                        double pz) {
    const auto ax = detail::resolve_axis(px, dims.nx);
    const auto ay = detail::resolve_axis(py, dims.ny);
    const auto az = detail::resolve_axis(pz, dims.nz);
    const std::int64_t sy = dims.nx;
    const std::int64_t sz = std::int64_t(dims.nx) * dims.ny;
    const std::int64_t base = az.i0 * sz + ay.i0 * sy + ax.i0;
    const int xs = dims.nx > 1 ? 1 : 0;
    const int ys = dims.ny > 1 ? int(sy) : 0;
    const int zs = dims.nz > 1 ? int(sz) : 0;

    const double fx = ax.f, fy = ay.f, fz = az.f;
    const double c000 = double(d[base]);
    const double c100 = double(d[base + xs]);
    const double c010 = double(d[base + ys]);
    const double c110 = double(d[base + ys + xs]);
    const double c001 = double(d[base + zs]);
    const double c101 = double(d[base + zs + xs]);
    const double c011 = double(d[base + zs + ys]);
    const double c111 = double(d[base + zs + ys + xs]);

    const double gx00 = c100 - c000, gx10 = c110 - c010, gx01 = c101 - c001, gx11 = c111 - c011;
    const double c00 = c000 + fx * gx00;
    const double c10 = c010 + fx * gx10;
    const double c01 = c001 + fx * gx01;
    const double c11 = c011 + fx * gx11;
    const double c0 = c00 + fy * (c10 - c00);
    const double c1 = c01 + fy * (c11 - c01);

    TriFetch<T> out;
    out.value = T(c0 + fz * (c1 - c0));
    const double dx0 = gx00 + fy * (gx10 - gx00);
    const double dx1 = gx01 + fy * (gx11 - gx01);
    out.dx = T((dx0 + fz * (dx1 - dx0)) * ax.din);
    const double dy0 = c10 - c00;
    const double dy1 = c11 - c01;
    out.dy = T((dy0 + fz * (dy1 - dy0)) * ay.din);
    out.dz = T((c1 - c0) * az.din);
    return out;
}

// ---------------------------------------------------------------------------
// Warping a multi-channel grid by a displacement field (same dims, 3 channels,
// voxel units): out[c](x) = in[c](x + u(x)).
// ---------------------------------------------------------------------------

template <typename T>
void warp_forward(const Grid<T>& in, const Grid<T>& field, Grid<T>& out) {
    out.resize(in.c, in.dims);
    const Dims3 d = in.dims;
    const std::int64_t n = d.voxels();
    const T* ux = field.ch(0);
    const T* uy = field.ch(1);
    const T* uz = field.ch(2);
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        const T* src = in.ch(ci);
        T* dst = out.ch(ci);
        std::int64_t v = 0;
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x, ++v) {
                    dst[v] = trilinear_fetch(src, d, x + double(ux[v]), y + double(uy[v]),
                                             z + double(uz[v]));
                }
    }
    (void)n;
}

/// Backward pass of warp_forward. d_in receives the scatter of the trilinear
/// weights; d_field receives sum over channels of upstream x image gradient.
/// Both accumulate (+=).
template <typename T>
void warp_backward(const Grid<T>& in, const Grid<T>& field, const Grid<T>& d_out, Grid<T>* d_in,
                   Grid<T>* d_field) {
    const Dims3 d = in.dims;
    const T* ux = field.ch(0);
    const T* uy = field.ch(1);
    const T* uz = field.ch(2);

    if (d_in) {
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < in.c; ++ci) {
            const T* g = d_out.ch(ci);
            T* dst = d_in->ch(ci);
            std::int64_t v = 0;
            for (int z = 0; z < d.nz; ++z)
                for (int y = 0; y < d.ny; ++y)
                    for (int x = 0; x < d.nx; ++x, ++v) {
                        const auto ax = detail::resolve_axis(x + double(ux[v]), d.nx);
                        const auto ay = detail::resolve_axis(y + double(uy[v]), d.ny);
                        const auto az = detail::resolve_axis(z + double(uz[v]), d.nz);
                        const std::int64_t sy = d.nx;
                        const std::int64_t sz = std::int64_t(d.nx) * d.ny;
                        const std::int64_t base = az.i0 * sz + ay.i0 * sy + ax.i0;
                        const int xs = d.nx > 1 ? 1 : 0;
                        const int ys = d.ny > 1 ? int(sy) : 0;
                        const int zs = d.nz > 1 ? int(sz) : 0;
                        const double fx = ax.f, fy = ay.f, fz = az.f;
                        const double gv = double(g[v]);
                        const double w0x = 1.0 - fx, w0y = 1.0 - fy, w0z = 1.0 - fz;
                        dst[base] += T(gv * w0x * w0y * w0z);
                        dst[base + xs] += T(gv * fx * w0y * w0z);
                        dst[base + ys] += T(gv * w0x * fy * w0z);
                        dst[base + ys + xs] += T(gv * fx * fy * w0z);
                        dst[base + zs] += T(gv * w0x * w0y * fz);
                        dst[base + zs + xs] += T(gv * fx * w0y * fz);
                        dst[base + zs + ys] += T(gv * w0x * fy * fz);
                        dst[base + zs + ys + xs] += T(gv * fx * fy * fz);
                    }
        }
    }

    if (d_field) {
        T* dx = d_field->ch(0);
        T* dy = d_field->ch(1);
        T* dz = d_field->ch(2);
        const std::int64_t n = d.voxels();
#pragma omp parallel for schedule(static)
        for (std::int64_t v = 0; v < n; ++v) {
            const int x = int(v % d.nx);
            const int y = int((v / d.nx) % d.ny);
            const int z = int(v / (std::int64_t(d.nx) * d.ny));
            const double px = x + double(ux[v]);
            const double py = y + double(uy[v]);
            const double pz = z + double(uz[v]);
            double ax = 0, ay = 0, az = 0;
            for (int ci = 0; ci < in.c; ++ci) {
                const auto tf = trilinear_fetch_grad(in.ch(ci), d, px, py, pz);
                const double gv = double(d_out.ch(ci)[v]);
                ax += gv * double(tf.dx);
                ay += gv * double(tf.dy);
                az += gv * double(tf.dz);
            }
            dx[v] += T(ax);
            dy[v] += T(ay);
            dz[v] += T(az);
        }
    }
}

// ---------------------------------------------------------------------------
// Resampling between scales. Fine voxel x maps to coarse coordinate
// (x - (f-1)/2) / f (block centers align with block-average pooling).
// value_scale rescales stored values: 1/f when pooling displacement fields
// down, f when interpolating them up, 1 for plain feature maps.
// ---------------------------------------------------------------------------

template <typename T>
void downsample_avg(const Grid<T>& in, int factor, double value_scale, Grid<T>& out) {
    const Dims3 fd = in.dims;
    const Dims3 cd{fd.nx / factor, fd.ny / factor, fd.nz / factor};
    out.resize(in.c, cd);
    const double inv = value_scale / (double(factor) * factor * factor);
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        const T* src = in.ch(ci);
        T* dst = out.ch(ci);
        std::int64_t o = 0;
        for (int Z = 0; Z < cd.nz; ++Z)
            for (int Y = 0; Y < cd.ny; ++Y)
                for (int X = 0; X < cd.nx; ++X, ++o) {
                    double acc = 0.0;
                    for (int dz = 0; dz < factor; ++dz)
                        for (int dyy = 0; dyy < factor; ++dyy)
                            for (int dxx = 0; dxx < factor; ++dxx) {
                                acc += double(src[voxel_index(fd, X * factor + dxx,
                                                              Y * factor + dyy, Z * factor + dz)]);
                            }
                    dst[o] = T(acc * inv);
                }
    }
}

template <typename T>
void upsample_linear(const Grid<T>& in, int factor, double value_scale, Grid<T>& out) {
    const Dims3 cd = in.dims;
    const Dims3 fd{cd.nx * factor, cd.ny * factor, cd.nz * factor};
    out.resize(in.c, fd);
    const double off = (factor - 1) * 0.5;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        const T* src = in.ch(ci);
        T* dst = out.ch(ci);
        std::int64_t o = 0;
        for (int z = 0; z < fd.nz; ++z)
            for (int y = 0; y < fd.ny; ++y)
                for (int x = 0; x < fd.nx; ++x, ++o) {
                    const double cx = (x - off) / factor;
                    const double cy = (y - off) / factor;
                    const double cz = (z - off) / factor;
                    dst[o] = T(double(trilinear_fetch(src, cd, cx, cy, cz)) * value_scale);
                }
    }
}

/// Adjoint of upsample_linear; d_in accumulates (+=).
template <typename T>
void upsample_linear_adjoint(const Grid<T>& d_out, int factor, double value_scale, Grid<T>& d_in) {
    const Dims3 fd = d_out.dims;
    const Dims3 cd = d_in.dims;
    const double off = (factor - 1) * 0.5;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < d_out.c; ++ci) {
        const T* g = d_out.ch(ci);
        T* dst = d_in.ch(ci);
        std::int64_t o = 0;
        for (int z = 0; z < fd.nz; ++z)
            for (int y = 0; y < fd.ny; ++y)
                for (int x = 0; x < fd.nx; ++x, ++o) {
                    const auto ax = detail::resolve_axis((x - off) / factor, cd.nx);
                    const auto ay = detail::resolve_axis((y - off) / factor, cd.ny);
                    const auto az = detail::resolve_axis((z - off) / factor, cd.nz);
                    const std::int64_t sy = cd.nx;
                    const std::int64_t sz = std::int64_t(cd.nx) * cd.ny;
                    const std::int64_t base = az.i0 * sz + ay.i0 * sy + ax.i0;
                    const int xs = cd.nx > 1 ? 1 : 0;
                    const int ys = cd.ny > 1 ? int(sy) : 0;
                    const int zs = cd.nz > 1 ? int(sz) : 0;
                    const double fx = ax.f, fy = ay.f, fz = az.f;
                    const double gv = double(g[o]) * value_scale;
                    dst[base] += T(gv * (1 - fx) * (1 - fy) * (1 - fz));
                    dst[base + xs] += T(gv * fx * (1 - fy) * (1 - fz));
                    dst[base + ys] += T(gv * (1 - fx) * fy * (1 - fz));
                    dst[base + ys + xs] += T(gv * fx * fy * (1 - fz));
                    dst[base + zs] += T(gv * (1 - fx) * (1 - fy) * fz);
                    dst[base + zs + xs] += T(gv * fx * (1 - fy) * fz);
                    dst[base + zs + ys] += T(gv * (1 - fx) * fy * fz);
                    dst[base + zs + ys + xs] += T(gv * fx * fy * fz);
                }
    }
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution with zero padding; stride 1 or 2 (dims divisible by 2).
// Weight layout: w[co][ci][kz][ky][kx], bias b[co].
// ---------------------------------------------------------------------------

template <typename T>
void conv3_forward(const Grid<T>& in, const T* w, const T* b, int stride, int cout, Grid<T>& out) {
    const Dims3 id = in.dims;
    const Dims3 od{id.nx / stride, id.ny / stride, id.nz / stride};
    out.resize(cout, od);
    const int cin = in.c;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        T* dst = out.ch(co);
        std::fill(dst, dst + od.voxels(), b[co]);
        for (int ci = 0; ci < cin; ++ci) {
            const T* src = in.ch(ci);
            const T* wk = w + (std::int64_t(co) * cin + ci) * 27;
            for (int Z = 0; Z < od.nz; ++Z) {
                for (int Y = 0; Y < od.ny; ++Y) {
                    T* orow = dst + voxel_index(od, 0, Y, Z);
                    for (int kz = 0; kz < 3; ++kz) {
                        const int zi = Z * stride + kz - 1;
                        if (zi < 0 || zi >= id.nz) continue;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int yi = Y * stride + ky - 1;
                            if (yi < 0 || yi >= id.ny) continue;
                            const T* irow = src + voxel_index(id, 0, yi, zi);
                            for (int kx = 0; kx < 3; ++kx) {
                                const int dx = kx - 1;
                                const T wv = wk[(kz * 3 + ky) * 3 + kx];
                                // output x range keeping stride*X+dx within [0, id.nx)
                                int X0 = 0;
                                while (X0 * stride + dx < 0) ++X0;
                                int X1 = od.nx;
                                while (X1 > X0 && (X1 - 1) * stride + dx >= id.nx) --X1;
                                const T* ix = irow + dx;
                                if (stride == 1) {
                                    for (int X = X0; X < X1; ++X) orow[X] += wv * ix[X];
                                } else {
                                    for (int X = X0; X < X1; ++X) orow[X] += wv * ix[X * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// d_in accumulates the input gradient (gather form, parallel over input
/// channels); pass nullptr to skip.
template <typename T>
void conv3_backward_input(const Grid<T>& d_out, const T* w, int stride, int cin, Grid<T>& d_in) {
    const Dims3 od = d_out.dims;
    const Dims3 id = d_in.dims;
    const int cout = d_out.c;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < cin; ++ci) {
        T* dst = d_in.ch(ci);
        for (int co = 0; co < cout; ++co) {
            const T* g = d_out.ch(co);
            const T* wk = w + (std::int64_t(co) * cin + ci) * 27;
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const T wv = wk[(kz * 3 + ky) * 3 + kx];
                        if (wv == T(0)) continue;
                        const int dz = kz - 1, dy = ky - 1, dx = kx - 1;
                        for (int Z = 0; Z < od.nz; ++Z) {
                            const int zi = Z * stride + dz;
                            if (zi < 0 || zi >= id.nz) continue;
                            for (int Y = 0; Y < od.ny; ++Y) {
                                const int yi = Y * stride + dy;
                                if (yi < 0 || yi >= id.ny) continue;
                                const T* grow = g + voxel_index(od, 0, Y, Z);
                                T* drow = dst + voxel_index(id, 0, yi, zi);
                                int X0 = 0;
                                while (X0 * stride + dx < 0) ++X0;
                                int X1 = od.nx;
                                while (X1 > X0 && (X1 - 1) * stride + dx >= id.nx) --X1;
                                for (int X = X0; X < X1; ++X) drow[X * stride + dx] += wv * grow[X];
                            }
                        }
                    }
        }
    }
}

/// d_w/d_b accumulate parameter gradients (parallel over output channels).
template <typename T>
void conv3_backward_params(const Grid<T>& in, const Grid<T>& d_out, int stride, T* d_w, T* d_b) {
    const Dims3 id = in.dims;
    const Dims3 od = d_out.dims;
    const int cin = in.c;
    const int cout = d_out.c;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        const T* g = d_out.ch(co);
        double bacc = 0.0;
        for (std::int64_t v = 0; v < od.voxels(); ++v) bacc += double(g[v]);
        d_b[co] += T(bacc);
        for (int ci = 0; ci < cin; ++ci) {
            const T* src = in.ch(ci);
            T* wk = d_w + (std::int64_t(co) * cin + ci) * 27;
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dz = kz - 1, dy = ky - 1, dx = kx - 1;
                        double acc = 0.0;
                        for (int Z = 0; Z < od.nz; ++Z) {
                            const int zi = Z * stride + dz;
                            if (zi < 0 || zi >= id.nz) continue;
                            for (int Y = 0; Y < od.ny; ++Y) {
                                const int yi = Y * stride + dy;
                                if (yi < 0 || yi >= id.ny) continue;
                                const T* grow = g + voxel_index(od, 0, Y, Z);
                                const T* irow = src + voxel_index(id, 0, yi, zi);
                                int X0 = 0;
                                while (X0 * stride + dx < 0) ++X0;
                                int X1 = od.nx;
                                while (X1 > X0 && (X1 - 1) * stride + dx >= id.nx) --X1;
                                for (int X = X0; X < X1; ++X)
                                    acc += double(grow[X]) * double(irow[X * stride + dx]);
                            }
                        }
                        wk[(kz * 3 + ky) * 3 + kx] += T(acc);
                    }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-voxel linear map over channels (1x1x1 convolution).
// ---------------------------------------------------------------------------

template <typename T>
void linear_forward(const Grid<T>& in, const T* w, const T* b, int cout, Grid<T>& out) {
    out.resize(cout, in.dims);
    const std::int64_t n = in.voxels();
    const int cin = in.c;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        T* dst = out.ch(co);
        std::fill(dst, dst + n, b[co]);
        const T* wrow = w + std::int64_t(co) * cin;
        for (int ci = 0; ci < cin; ++ci) {
            const T wv = wrow[ci];
            const T* src = in.ch(ci);
            for (std::int64_t v = 0; v < n; ++v) dst[v] += wv * src[v];
        }
    }
}

template <typename T>
void linear_backward_input(const Grid<T>& d_out, const T* w, int cin, Grid<T>& d_in) {
    const std::int64_t n = d_out.voxels();
    const int cout = d_out.c;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < cin; ++ci) {
        T* dst = d_in.ch(ci);
        for (int co = 0; co < cout; ++co) {
            const T wv = w[std::int64_t(co) * cin + ci];
            if (wv == T(0)) continue;
            const T* g = d_out.ch(co);
            for (std::int64_t v = 0; v < n; ++v) dst[v] += wv * g[v];
        }
    }
}

template <typename T>
void linear_backward_params(const Grid<T>& in, const Grid<T>& d_out, T* d_w, T* d_b) {
    const std::int64_t n = in.voxels();
    const int cin = in.c;
    const int cout = d_out.c;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        const T* g = d_out.ch(co);
        double bacc = 0.0;
        for (std::int64_t v = 0; v < n; ++v) bacc += double(g[v]);
        d_b[co] += T(bacc);
        T* wrow = d_w + std::int64_t(co) * cin;
        for (int ci = 0; ci < cin; ++ci) {
            const T* src = in.ch(ci);
            double acc = 0.0;
            for (std::int64_t v = 0; v < n; ++v) acc += double(g[v]) * double(src[v]);
            wrow[ci] += T(acc);
        }
    }
}

// ---------------------------------------------------------------------------
// Local correlation: channel-mean inner product against a (2r+1)^3 offset
// neighborhood with border clamp. Output has (2r+1)^3 channels, offsets
// enumerated z-major (dz, dy, dx), each in [-r, r].
// ---------------------------------------------------------------------------

template <typename T>
void correlation_forward(const Grid<T>& a, const Grid<T>& b, int radius, Grid<T>& out) {
    const Dims3 d = a.dims;
    const int side = 2 * radius + 1;
    const int n_off = side * side * side;
    out.resize(n_off, d);
    const double inv_c = 1.0 / a.c;
#pragma omp parallel for schedule(static)
    for (int o = 0; o < n_off; ++o) {
        const int dz = o / (side * side) - radius;
        const int dy = (o / side) % side - radius;
        const int dx = o % side - radius;
        T* dst = out.ch(o);
        std::int64_t v = 0;
        for (int z = 0; z < d.nz; ++z) {
            const int zb = std::clamp(z + dz, 0, d.nz - 1);
            for (int y = 0; y < d.ny; ++y) {
                const int yb = std::clamp(y + dy, 0, d.ny - 1);
                for (int x = 0; x < d.nx; ++x, ++v) {
                    const int xb = std::clamp(x + dx, 0, d.nx - 1);
                    const std::int64_t vb = voxel_index(d, xb, yb, zb);
                    double acc = 0.0;
                    for (int ci = 0; ci < a.c; ++ci)
                        acc += double(a.ch(ci)[v]) * double(b.ch(ci)[vb]);
                    dst[v] = T(acc * inv_c);
                }
            }
        }
    }
}

template <typename T>
void correlation_backward(const Grid<T>& a, const Grid<T>& b, int radius, const Grid<T>& d_out,
                          Grid<T>* d_a, Grid<T>* d_b) {
    const Dims3 d = a.dims;
    const int side = 2 * radius + 1;
    const int n_off = side * side * side;
    const double inv_c = 1.0 / a.c;

    if (d_a) {
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < a.c; ++ci) {
            T* dst = d_a->ch(ci);
            const T* bs = b.ch(ci);
            for (int o = 0; o < n_off; ++o) {
                const int dz = o / (side * side) - radius;
                const int dy = (o / side) % side - radius;
                const int dx = o % side - radius;
                const T* g = d_out.ch(o);
                std::int64_t v = 0;
                for (int z = 0; z < d.nz; ++z) {
                    const int zb = std::clamp(z + dz, 0, d.nz - 1);
                    for (int y = 0; y < d.ny; ++y) {
                        const int yb = std::clamp(y + dy, 0, d.ny - 1);
                        for (int x = 0; x < d.nx; ++x, ++v) {
                            const int xb = std::clamp(x + dx, 0, d.nx - 1);
                            dst[v] += T(double(g[v]) * double(bs[voxel_index(d, xb, yb, zb)]) *
                                        inv_c);
                        }
                    }
                }
            }
        }
    }

    if (d_b) {
#pragma omp parallel for schedule(static)
        for (int ci = 0; ci < b.c; ++ci) {
            T* dst = d_b->ch(ci);
            const T* as = a.ch(ci);
            for (int o = 0; o < n_off; ++o) {
                const int dz = o / (side * side) - radius;
                const int dy = (o / side) % side - radius;
                const int dx = o % side - radius;
                const T* g = d_out.ch(o);
                std::int64_t v = 0;
                for (int z = 0; z < d.nz; ++z) {
                    const int zb = std::clamp(z + dz, 0, d.nz - 1);
                    for (int y = 0; y < d.ny; ++y) {
                        const int yb = std::clamp(y + dy, 0, d.ny - 1);
                        for (int x = 0; x < d.nx; ++x, ++v) {
                            const int xb = std::clamp(x + dx, 0, d.nx - 1);
                            dst[voxel_index(d, xb, yb, zb)] +=
                                T(double(g[v]) * double(as[v]) * inv_c);
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Misc small ops.
// ---------------------------------------------------------------------------

template <typename T>
void tanh_inplace(Grid<T>& g) {
    const std::int64_t n = std::int64_t(g.v.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) g.v[i] = T(std::tanh(double(g.v[i])));
}

/// dpre = dpost * (1 - y^2), where y is the stored post-activation value.
template <typename T>
void tanh_backward(const Grid<T>& y, Grid<T>& d) {
    const std::int64_t n = std::int64_t(y.v.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) d.v[i] = d.v[i] * (T(1) - y.v[i] * y.v[i]);
}

/// Broadcast-add a per-channel vector.
template <typename T>
void add_channel_vector(Grid<T>& g, const T* vec) {
    const std::int64_t n = g.voxels();
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < g.c; ++ci) {
        T* dst = g.ch(ci);
        const T v = vec[ci];
        for (std::int64_t i = 0; i < n; ++i) dst[i] += v;
    }
}

/// Adjoint of add_channel_vector: per-channel sum of the upstream gradient.
template <typename T>
void channel_sum(const Grid<T>& g, T* out) {
    const std::int64_t n = g.voxels();
    for (int ci = 0; ci < g.c; ++ci) {
        const T* src = g.ch(ci);
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += double(src[i]);
        out[ci] += T(acc);
    }
}

template <typename T>
void copy_channels(const Grid<T>& src, int src_c0, Grid<T>& dst, int dst_c0, int count) {
    for (int i = 0; i < count; ++i) {
        const T* s = src.ch(src_c0 + i);
        std::copy(s, s + src.voxels(), dst.ch(dst_c0 + i));
    }
}

template <typename T>
void accumulate_channels(const Grid<T>& src, int src_c0, Grid<T>& dst, int dst_c0, int count) {
    const std::int64_t n = dst.voxels();
    for (int i = 0; i < count; ++i) {
        const T* s = src.ch(src_c0 + i);
        T* e = dst.ch(dst_c0 + i);
        for (std::int64_t v = 0; v < n; ++v) e[v] += s[v];
    }
}

}  // namespace kernels
}  // namespace flowreg
