#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowreg {

// Segmentation class codes. Background is 0 so that padding and
// out-of-support voxels are "no structure" by construction.
enum LabelClass : std::uint8_t {
    kBackground = 0,
    kRV = 1,
    kMyo = 2,
    kLV = 3,
};

inline constexpr std::array<std::uint8_t, 3> kForegroundClasses = {kRV, kMyo, kLV};

struct Dims3 {
    int nx = 0, ny = 0, nz = 0;

    std::int64_t voxels() const { return std::int64_t(nx) * ny * nz; }
    bool operator==(const Dims3&) const = default;

    std::string str() const {
        return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
    }
};

struct Spacing3 {
    double x = 1.0, y = 1.0, z = 1.0;

    bool operator==(const Spacing3&) const = default;
    double min() const { return x < y ? (x < z ? x : z) : (y < z ? y : z); }
    double voxel_volume_mm3() const { return x * y * z; }
};

inline std::int64_t voxel_index(const Dims3& d, int x, int y, int z) {
    return (std::int64_t(z) * d.ny + y) * d.nx + x;
}

/// 3D scalar intensity grid, x-fastest memory order.
struct Volume {
    Dims3 dims;
    Spacing3 spacing;
    std::vector<double> data;

    Volume() = default;
    Volume(Dims3 d, Spacing3 s, double fill = 0.0)
        : dims(d), spacing(s), data(std::size_t(d.voxels()), fill) {}

    double& at(int x, int y, int z) { return data[voxel_index(dims, x, y, z)]; }
    double at(int x, int y, int z) const { return data[voxel_index(dims, x, y, z)]; }
};

/// Dense displacement field: three channels (u_x, u_y, u_z) in voxel units,
/// channel-major, each channel x-fastest.
struct DisplacementField {
    Dims3 dims;
    Spacing3 spacing;
    std::vector<double> data;

    DisplacementField() = default;
    DisplacementField(Dims3 d, Spacing3 s, double fill = 0.0)
        : dims(d), spacing(s), data(std::size_t(3 * d.voxels()), fill) {}

    double* channel(int c) { return data.data() + std::int64_t(c) * dims.voxels(); }
    const double* channel(int c) const { return data.data() + std::int64_t(c) * dims.voxels(); }

    double& at(int c, int x, int y, int z) {
        return data[std::int64_t(c) * dims.voxels() + voxel_index(dims, x, y, z)];
    }
    double at(int c, int x, int y, int z) const {
        return data[std::int64_t(c) * dims.voxels() + voxel_index(dims, x, y, z)];
    }
};

/// Integer segmentation grid; values restricted to LabelClass codes.
struct LabelMap {
    Dims3 dims;
    Spacing3 spacing;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(Dims3 d, Spacing3 s, std::uint8_t fill = kBackground)
        : dims(d), spacing(s), data(std::size_t(d.voxels()), fill) {}

    std::uint8_t& at(int x, int y, int z) { return data[voxel_index(dims, x, y, z)]; }
    std::uint8_t at(int x, int y, int z) const { return data[voxel_index(dims, x, y, z)]; }
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline void require_same_dims(const Dims3& a, const Dims3& b, const char* what) {
    if (!(a == b)) {
        throw ShapeError(std::string(what) + ": dimension mismatch " + a.str() + " vs " + b.str());
    }
}

}  // namespace flowreg
