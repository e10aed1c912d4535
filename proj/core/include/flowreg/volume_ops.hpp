#pragma once

#include <array>

#include "flowreg/rng.hpp"
#include "flowreg/types.hpp"

namespace flowreg {

/// Trilinear interpolation at a continuous voxel coordinate; coordinates
/// outside the grid clamp to the border voxel.
double trilinear_sample(const Volume& vol, double px, double py, double pz);

/// Value plus spatial derivative of the interpolant w.r.t. the sample
/// position (derivative from the containing cell; zero beyond the border).
struct TriSample {
    double value;
    double dx, dy, dz;
};
TriSample trilinear_sample_grad(const Volume& vol, double px, double py, double pz);

/// out(x) = moving(x + u(x)); the transform samples the moving image at
/// psi(x) = x + u(x).
Volume warp_image(const Volume& moving, const DisplacementField& ddf);

/// Nearest-neighbor label resampling at x + u(x) with border clamp.
LabelMap warp_labels(const LabelMap& labels, const DisplacementField& ddf);

/// Per-voxel det(I + du/dx), derivatives in voxel units: central differences
/// on the interior, one-sided on the faces.
Volume jacobian_map(const DisplacementField& ddf);

/// Per-axis noise scale sigma_i = 5 * min(spacing) / spacing_i (voxel units),
/// which makes the physical noise magnitude isotropic.
std::array<double, 3> noise_sigmas(const Spacing3& spacing);

/// I.i.d. zero-mean Gaussian field, channel i scaled by noise_sigmas()[i].
/// Draw order is channel-major, x-fastest, so identical seeds give identical
/// fields.
DisplacementField sample_noise_field(Dims3 dims, Spacing3 spacing, Rng& rng);

/// Block-average pooling per channel, displacement values divided by the
/// factor (rescale to coarse-grid voxel units). factor must be a power of two
/// and divide every dimension.
DisplacementField downsample_field(const DisplacementField& ddf, int factor);

/// Trilinear upsampling per channel, displacement values multiplied by the
/// factor. factor must be a power of two.
DisplacementField upsample_field(const DisplacementField& ddf, int factor);

/// Symmetric crop/pad to target dims. Volumes pad with their minimum
/// intensity, labels with background; odd remainders put the extra voxel on
/// the high side.
Volume center_crop_or_pad(const Volume& vol, Dims3 target);
LabelMap center_crop_or_pad(const LabelMap& labels, Dims3 target);

}  // namespace flowreg
