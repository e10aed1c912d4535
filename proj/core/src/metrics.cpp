#include "flowreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "flowreg/volume_ops.hpp"

namespace flowreg {

TaskDirection parse_direction(const std::string& s) {
    if (s == "es_to_ed") return TaskDirection::kESToED;
    if (s == "ed_to_es") return TaskDirection::kEDToES;
    throw std::invalid_argument("unknown task direction '" + s +
                                "' (expected es_to_ed or ed_to_es)");
}

std::string direction_name(TaskDirection d) {
    return d == TaskDirection::kESToED ? "es_to_ed" : "ed_to_es";
}

double dice(const LabelMap& a, const LabelMap& b, std::uint8_t cls) {
    require_same_dims(a.dims, b.dims, "dice");
    std::int64_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool ia = a.data[i] == cls;
        const bool ib = b.data[i] == cls;
        na += ia;
        nb += ib;
        inter += ia && ib;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(inter) / double(na + nb);
}

double foreground_dice(const LabelMap& a, const LabelMap& b) {
    require_same_dims(a.dims, b.dims, "foreground_dice");
    std::int64_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool ia = a.data[i] != kBackground;
        const bool ib = b.data[i] != kBackground;
        na += ia;
        nb += ib;
        inter += ia && ib;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(inter) / double(na + nb);
}

JacobianStats jacobian_stats(const DisplacementField& ddf) {
    const Volume j = jacobian_map(ddf);
    const std::int64_t n = j.dims.voxels();
    std::int64_t nonpos = 0;
    double sum = 0.0;
    for (double v : j.data) {
        if (v <= 0.0) ++nonpos;
        sum += v;
    }
    const double mean = sum / double(n);
    double var = 0.0;
    for (double v : j.data) var += (v - mean) * (v - mean);
    return {100.0 * double(nonpos) / double(n), std::sqrt(var / double(n))};
}

double cavity_volume_ml(const LabelMap& labels, std::uint8_t cls) {
    std::int64_t count = 0;
    for (std::uint8_t v : labels.data) count += v == cls;
    return double(count) * labels.spacing.voxel_volume_mm3() / 1000.0;
}

double ejection_fraction(const LabelMap& ed, const LabelMap& es, std::uint8_t cls) {
    const double v_ed = cavity_volume_ml(ed, cls);
    if (v_ed <= 0.0) {
        throw MetricError("ejection_fraction: empty ED cavity for class " + std::to_string(cls));
    }
    const double v_es = cavity_volume_ml(es, cls);
    return 100.0 * (v_ed - v_es) / v_ed;
}

double predicted_ef(const LabelMap& warped_moving, const LabelMap& true_moving, std::uint8_t cls,
                    TaskDirection dir) {
    // the warped moving segmentation estimates the fixed frame's anatomy
    if (dir == TaskDirection::kESToED) {
        return ejection_fraction(warped_moving, true_moving, cls);
    }
    return ejection_fraction(true_moving, warped_moving, cls);
}

double ef_mae_pair(const LabelMap& true_moving, const LabelMap& warped_moving,
                   const LabelMap& true_fixed, std::uint8_t cls, TaskDirection dir) {
    const double ef_true = dir == TaskDirection::kESToED
                               ? ejection_fraction(true_fixed, true_moving, cls)
                               : ejection_fraction(true_moving, true_fixed, cls);
    return std::abs(ef_true - predicted_ef(warped_moving, true_moving, cls, dir));
}

double myocardial_thickness_mm(const LabelMap& labels, int n_rays) {
    if (n_rays < 4) throw std::invalid_argument("myocardial_thickness: need at least 4 rays");
    const Dims3 d = labels.dims;
    const double step = 0.05;  // march step, voxels
    const double r_max = std::hypot(double(d.nx), double(d.ny));
    const double pi = 3.14159265358979323846;

    double acc = 0.0;
    std::int64_t n_valid_rays = 0;
    for (int z = 0; z < d.nz; ++z) {
        // LV centroid in this slice
        double cx = 0.0, cy = 0.0;
        std::int64_t n_lv = 0;
        bool any_myo = false;
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const std::uint8_t v = labels.at(x, y, z);
                if (v == kLV) {
                    cx += x;
                    cy += y;
                    ++n_lv;
                } else if (v == kMyo) {
                    any_myo = true;
                }
            }
        if (n_lv == 0 || !any_myo) continue;
        cx /= double(n_lv);
        cy /= double(n_lv);

        for (int ray = 0; ray < n_rays; ++ray) {
            const double theta = 2.0 * pi * double(ray) / double(n_rays);
            const double dx = std::cos(theta), dy = std::sin(theta);
            double first = -1.0, last = -1.0;
            for (double r = 0.0; r <= r_max; r += step) {
                const int px = int(std::lround(cx + r * dx));
                const int py = int(std::lround(cy + r * dy));
                if (px < 0 || px >= d.nx || py < 0 || py >= d.ny) break;
                if (labels.at(px, py, z) == kMyo) {
                    if (first < 0.0) first = r;
                    last = r;
                }
            }
            if (first >= 0.0) {
                acc += (last - first) * labels.spacing.x;
                ++n_valid_rays;
            }
        }
    }
    if (n_valid_rays == 0) {
        throw MetricError("myocardial_thickness: no slice with both LV cavity and myocardium");
    }
    return acc / double(n_valid_rays);
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

std::string EvalReport::to_json() const {
    std::ostringstream os;
    os << "{\"dice_rv\":" << fmt(dice_rv) << ",\"dice_myo\":" << fmt(dice_myo)
       << ",\"dice_lv\":" << fmt(dice_lv) << ",\"dice_mean\":" << fmt(dice_mean)
       << ",\"dice_fg\":" << fmt(dice_fg) << ",\"pct_negjac\":" << fmt(pct_negjac)
       << ",\"std_jac\":" << fmt(std_jac) << ",\"lvef_mae\":" << fmt(lvef_mae)
       << ",\"rvef_mae\":" << fmt(rvef_mae) << ",\"mt_mae\":" << fmt(mt_mae)
       << ",\"seconds\":" << fmt(seconds) << "}";
    return os.str();
}

std::string EvalReport::csv_header() {
    return "dice_rv,dice_myo,dice_lv,dice_mean,dice_fg,pct_negjac,std_jac,lvef_mae,rvef_mae,"
           "mt_mae,seconds";
}

std::string EvalReport::csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << dice_rv << ',' << dice_myo << ',' << dice_lv << ',' << dice_mean << ',' << dice_fg << ','
       << pct_negjac << ',' << std_jac << ',' << lvef_mae << ',' << rvef_mae << ',' << mt_mae
       << ',' << seconds;
    return os.str();
}

EvalReport evaluate_case(const LabelMap& fixed_labels, const LabelMap& moving_labels,
                         const DisplacementField& predicted, TaskDirection dir,
                         double reference_lvef, double reference_rvef, double seconds) {
    const LabelMap warped = warp_labels(moving_labels, predicted);

    EvalReport r;
    r.dice_rv = dice(warped, fixed_labels, kRV);
    r.dice_myo = dice(warped, fixed_labels, kMyo);
    r.dice_lv = dice(warped, fixed_labels, kLV);
    r.dice_mean = (r.dice_rv + r.dice_myo + r.dice_lv) / 3.0;
    r.dice_fg = foreground_dice(warped, fixed_labels);

    const JacobianStats js = jacobian_stats(predicted);
    r.pct_negjac = js.pct_nonpositive;
    r.std_jac = js.std_dev;

    r.lvef_mae = std::abs(reference_lvef - predicted_ef(warped, moving_labels, kLV, dir));
    r.rvef_mae = std::abs(reference_rvef - predicted_ef(warped, moving_labels, kRV, dir));
    r.mt_mae = std::abs(myocardial_thickness_mm(fixed_labels) - myocardial_thickness_mm(warped));
    r.seconds = seconds;
    return r;
}

EvalReport evaluate_case(const LabelMap& fixed_labels, const LabelMap& moving_labels,
                         const DisplacementField& predicted, TaskDirection dir, double seconds) {
    const double lvef = dir == TaskDirection::kESToED
                            ? ejection_fraction(fixed_labels, moving_labels, kLV)
                            : ejection_fraction(moving_labels, fixed_labels, kLV);
    const double rvef = dir == TaskDirection::kESToED
                            ? ejection_fraction(fixed_labels, moving_labels, kRV)
                            : ejection_fraction(moving_labels, fixed_labels, kRV);
    return evaluate_case(fixed_labels, moving_labels, predicted, dir, lvef, rvef, seconds);
}

}  // namespace flowreg
