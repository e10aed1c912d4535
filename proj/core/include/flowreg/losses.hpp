#pragma once

#include "flowreg/types.hpp"

namespace flowreg {

struct LossConfig {
    int ncc_window = 9;        // cubic window side, odd and >= 3
    double eps = 1e-5;         // stabilizer added to the variance denominators
    double grad_weight = 1.0;  // weight of the displacement-gradient penalty
    bool signed_ncc = false;   // squared local NCC by default
};

/// Negated mean local (squared) NCC between the warped and fixed images,
/// computed over cubic windows via box sums. Range [-1, 0] in squared mode.
double ncc_loss(const Volume& warped, const Volume& fixed, const LossConfig& cfg);

/// Gradient of ncc_loss with respect to the warped image.
Volume ncc_loss_grad_warped(const Volume& warped, const Volume& fixed, const LossConfig& cfg);

/// Mean squared forward difference of the displacement components, averaged
/// over the nine (channel, axis) terms; each term averages over its valid
/// interior positions only.
double grad_loss(const DisplacementField& ddf);

/// Gradient of grad_loss with respect to the displacement components.
DisplacementField grad_loss_grad(const DisplacementField& ddf);

/// ncc_loss(warp_image(moving, ddf), fixed) + grad_weight * grad_loss(ddf).
double reg_loss(const Volume& moving, const Volume& fixed, const DisplacementField& ddf,
                const LossConfig& cfg);

/// Exact gradient of reg_loss with respect to every displacement component:
/// NCC backprop to the warped image, then through the trilinear kernel's
/// spatial derivative of the moving image, plus the grad_loss term.
DisplacementField reg_loss_grad_ddf(const Volume& moving, const Volume& fixed,
                                    const DisplacementField& ddf, const LossConfig& cfg);

}  // namespace flowreg
