#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "flowreg/rng.hpp"
#include "flowreg/types.hpp"

namespace flowreg {

struct PhantomConfig {
    Dims3 dims{64, 64, 16};
    Spacing3 spacing{1.5, 1.5, 3.15};

    // in-plane geometry, voxel units
    double lv_radius_min = 8.2, lv_radius_max = 8.8;        // endocardial base radius
    double myo_thickness_min = 6.4, myo_thickness_max = 6.8;
    double rv_radius_min = 5.8, rv_radius_max = 6.2;        // crescent disc radius
    double rv_gap_min = 0.3, rv_gap_max = 0.4;              // epicardium-to-RV spacing
    double center_jitter = 0.5;                             // LV center offset range
    double taper_width = 2.0;                               // contraction support fade

    // radial scale applied to the ES frame; 1 means no motion
    double contraction_min = 0.76, contraction_max = 0.88;

    // intensity model
    double intensity_background = 0.08;
    double intensity_myo = 0.45;
    double intensity_rv = 0.85;
    double intensity_lv = 0.95;
    double texture_amp = 0.06;   // material-attached low-frequency texture
    double blur_sigma_xy = 0.8;  // voxels
    double blur_sigma_z = 0.4;
    double noise_std = 0.02;

    std::uint64_t seed = 0;

    void validate() const;
};

/// Drawn per-case geometry; round-trips through the case manifest.
struct PhantomParams {
    std::uint64_t case_seed = 0;
    double lv_radius = 0.0;
    double myo_thickness = 0.0;
    double rv_radius = 0.0;
    double rv_gap = 0.0;
    double rv_angle = 0.0;
    double contraction = 1.0;
    double center_x = 0.0, center_y = 0.0;
    double drift_amp_x = 0.0, drift_amp_y = 0.0, drift_phase = 0.0;
    double support_radius = 0.0;  // linear-contraction region; taper outside

    std::string manifest_text(double lvef, double rvef, double mt_ed, double mt_es) const;
};

struct PhantomCase {
    Volume ed_image, es_image;
    LabelMap ed_labels, es_labels;
    DisplacementField gt_field;          // ES->ED task: samples ES on the ED grid
    DisplacementField gt_field_inverse;  // ED->ES task
    double analytic_lvef = 0.0;          // percent
    double analytic_rvef = 0.0;
    double analytic_mt_ed_mm = 0.0;
    double analytic_mt_es_mm = 0.0;
    PhantomParams params;
};

struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic per seed: annular LV/Myo stack plus an RV crescent, the ES
/// frame produced by an analytic in-plane radial contraction about the
/// per-slice LV center (zero displacement outside a support radius).
PhantomCase generate_case(const PhantomConfig& cfg, Rng& rng);

std::vector<PhantomCase> generate_dataset(const PhantomConfig& cfg, int n_cases, Rng& rng);

/// Deterministic index split: first train_frac for training, next val_frac
/// for validation, remainder for testing.
struct SplitRanges {
    int train_begin = 0, train_end = 0;
    int val_begin = 0, val_end = 0;
    int test_begin = 0, test_end = 0;
};
SplitRanges split_ranges(int n_cases, double train_frac, double val_frac);

/// Case directory layout: ed_image/es_image/ed_labels/es_labels/gt_field/
/// gt_field_inverse as FVOL files plus a key=value manifest.
void save_case(const std::filesystem::path& dir, const PhantomCase& c);
PhantomCase load_case(const std::filesystem::path& dir);

std::filesystem::path case_dir_name(const std::filesystem::path& root, int index);

}  // namespace flowreg
