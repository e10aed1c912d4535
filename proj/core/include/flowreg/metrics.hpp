#pragma once

#include <string>

#include "flowreg/types.hpp"

namespace flowreg {

/// Registration direction; decides which phase the fixed/moving frames play
/// in ejection-fraction arithmetic.
enum class TaskDirection { kESToED, kEDToES };

TaskDirection parse_direction(const std::string& s);
std::string direction_name(TaskDirection d);

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty, 0 when exactly one is.
double dice(const LabelMap& a, const LabelMap& b, std::uint8_t cls);

/// Dice on the merged foreground (RV + Myo + LV).
double foreground_dice(const LabelMap& a, const LabelMap& b);

/// Percentage of voxels with det(I + du/dx) <= 0, and the standard deviation
/// of the determinant over all voxels.
struct JacobianStats {
    double pct_nonpositive = 0.0;
    double std_dev = 0.0;
};
JacobianStats jacobian_stats(const DisplacementField& ddf);

/// Voxel count times voxel volume, in milliliters.
double cavity_volume_ml(const LabelMap& labels, std::uint8_t cls);

/// 100 * (V_ED - V_ES) / V_ED; throws when the ED cavity is empty.
struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
double ejection_fraction(const LabelMap& ed, const LabelMap& es, std::uint8_t cls);

/// EF estimated from a registration: the warped moving segmentation stands in
/// for the fixed frame's phase, the true moving segmentation keeps its own.
double predicted_ef(const LabelMap& warped_moving, const LabelMap& true_moving, std::uint8_t cls,
                    TaskDirection dir);

/// |EF(true pair) - EF(predicted via the warped moving segmentation)|, in
/// percentage points.
double ef_mae_pair(const LabelMap& true_moving, const LabelMap& warped_moving,
                   const LabelMap& true_fixed, std::uint8_t cls, TaskDirection dir);

/// Mean myocardial thickness in mm: per axial slice containing Myo around a
/// nonempty LV cavity, radial rays from the LV centroid measure the
/// outermost-minus-innermost Myo crossing; rays without a crossing are
/// skipped. Throws when no slice qualifies.
double myocardial_thickness_mm(const LabelMap& labels, int n_rays = 64);

/// Per-case evaluation record; serializes to a flat JSON object and a CSV row
/// with fixed field names.
struct EvalReport {
    double dice_rv = 0.0;
    double dice_myo = 0.0;
    double dice_lv = 0.0;
    double dice_mean = 0.0;
    double dice_fg = 0.0;
    double pct_negjac = 0.0;
    double std_jac = 0.0;
    double lvef_mae = 0.0;
    double rvef_mae = 0.0;
    double mt_mae = 0.0;
    double seconds = 0.0;

    std::string to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

/// Assembles the full report for one case. Reference EFs default to the
/// voxel-counted true-pair values when no analytic values are supplied.
EvalReport evaluate_case(const LabelMap& fixed_labels, const LabelMap& moving_labels,
                         const DisplacementField& predicted, TaskDirection dir,
                         double reference_lvef, double reference_rvef, double seconds);
EvalReport evaluate_case(const LabelMap& fixed_labels, const LabelMap& moving_labels,
                         const DisplacementField& predicted, TaskDirection dir, double seconds);

}  // namespace flowreg
