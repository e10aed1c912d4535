#include "flowreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "flowreg/fvol.hpp"

namespace flowreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

void PhantomConfig::validate() const {
    if (dims.nx < 8 || dims.ny < 8 || dims.nz < 1) {
        throw GeometryError("PhantomConfig: grid too small " + dims.str());
    }
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) {
        throw GeometryError("PhantomConfig: spacing must be positive");
    }
    if (!(lv_radius_min > 0 && lv_radius_max >= lv_radius_min)) {
        throw GeometryError("PhantomConfig: invalid lv_radius range");
    }
    if (!(myo_thickness_min > 0 && myo_thickness_max >= myo_thickness_min)) {
        throw GeometryError("PhantomConfig: invalid myo_thickness range");
    }
    if (!(rv_radius_min > 0 && rv_radius_max >= rv_radius_min)) {
        throw GeometryError("PhantomConfig: invalid rv_radius range");
    }
    if (!(contraction_min > 0 && contraction_min <= contraction_max && contraction_max <= 1.0)) {
        throw GeometryError("PhantomConfig: contraction fraction must lie in (0, 1]");
    }
    if (!(blur_sigma_xy >= 0 && blur_sigma_z >= 0 && noise_std >= 0)) {
        throw GeometryError("PhantomConfig: blur/noise parameters must be non-negative");
    }
    // worst-case anatomy extent must fit inside the taper support; the RV
    // crescent center sits at r_epi + gap + rv_radius/2
    const double worst = lv_radius_max + myo_thickness_max + rv_gap_max +
                         1.8 * rv_radius_max + 1.2;
    const double budget = 0.5 * std::min(dims.nx, dims.ny) - center_jitter - 0.5 - taper_width - 0.5;
    if (worst > budget) {
        throw GeometryError(
            "PhantomConfig: anatomy (lv_radius_max + myo_thickness_max + rv_gap_max + "
            "1.5*rv_radius_max) does not fit the grid with the taper margin");
    }
}

namespace {

struct RadialMap {
    double c = 1.0;   // contraction fraction
    double r1 = 0.0;  // linear region radius
    double r2 = 0.0;  // displacement support radius

    static double smoothstep(double q) { return q * q * (3.0 - 2.0 * q); }

    bool identity() const { return c == 1.0; }

    // displacement magnitude g(r): ED material radius r moves to s(r) = r + g(r)
    double g(double r) const {
        if (identity()) return 0.0;
        if (r <= r1) return (c - 1.0) * r;
        if (r >= r2) return 0.0;
        return (c - 1.0) * r1 * smoothstep((r2 - r) / (r2 - r1));
    }
    double s(double r) const { return r + g(r); }

    // inverse of s: ES radius back to ED material radius
    double s_inv(double rho) const {
        if (identity()) return rho;
        if (rho <= c * r1) return rho / c;
        if (rho >= r2) return rho;
        double lo = r1, hi = r2;
        for (int i = 0; i < 64; ++i) {
            const double mid = 0.5 * (lo + hi);
            (s(mid) < rho ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    }
};

struct Anatomy {
    const PhantomConfig* cfg;
    PhantomParams p;
    RadialMap map;

    double center_x(int z) const {
        return p.center_x +
               p.drift_amp_x * std::sin(2.0 * kPi * (z + 0.5) / cfg->dims.nz + p.drift_phase);
    }
    double center_y(int z) const {
        return p.center_y +
               p.drift_amp_y * std::cos(2.0 * kPi * (z + 0.5) / cfg->dims.nz + p.drift_phase);
    }
    // smooth per-slice radius modulation, widest mid-stack
    double shape(int z) const { return 0.90 + 0.10 * std::sin(kPi * (z + 0.5) / cfg->dims.nz); }
    double r_endo(int z) const { return p.lv_radius * shape(z); }
    double r_epi(int z) const { return r_endo(z) + p.myo_thickness; }
    // crescent: the RV disc overlaps the epicardial disc, which bites into it
    double rv_center_dist(int z) const { return r_epi(z) + p.rv_gap + 0.8 * p.rv_radius; }

    std::uint8_t classify(double mx, double my, int z) const {
        const double dx = mx - center_x(z);
        const double dy = my - center_y(z);
        const double r = std::hypot(dx, dy);
        if (r < r_endo(z)) return kLV;
        if (r < r_epi(z)) return kMyo;
        const double rvx = center_x(z) + rv_center_dist(z) * std::cos(p.rv_angle);
        const double rvy = center_y(z) + rv_center_dist(z) * std::sin(p.rv_angle);
        const double r_rv = std::hypot(mx - rvx, my - rvy);
        if (r_rv < p.rv_radius && r >= r_epi(z) + p.rv_gap) return kRV;
        return kBackground;
    }

    double level(std::uint8_t cls) const {
        switch (cls) {
            case kLV: return cfg->intensity_lv;
            case kMyo: return cfg->intensity_myo;
            case kRV: return cfg->intensity_rv;
            default: return cfg->intensity_background;
        }
    }

    // material point of ES-grid coordinate (inverse of the contraction)
    void es_to_material(double x, double y, int z, double& mx, double& my) const {
        const double cx = center_x(z), cy = center_y(z);
        const double dx = x - cx, dy = y - cy;
        const double rho = std::hypot(dx, dy);
        if (map.identity() || rho < 1e-12) {
            mx = x;
            my = y;
            return;
        }
        const double r = map.s_inv(rho);
        mx = cx + dx * (r / rho);
        my = cy + dy * (r / rho);
    }

    // ES position of ED material coordinate (the forward contraction)
    void material_to_es(double x, double y, int z, double& ex, double& ey) const {
        const double cx = center_x(z), cy = center_y(z);
        const double dx = x - cx, dy = y - cy;
        const double r = std::hypot(dx, dy);
        if (map.identity() || r < 1e-12) {
            ex = x;
            ey = y;
            return;
        }
        const double rho = map.s(r);
        ex = cx + dx * (rho / r);
        ey = cy + dy * (rho / r);
    }
};

struct Texture {
    struct Component {
        double amp, fx, fy, fz, phase;
    };
    std::vector<Component> comps;

    static Texture draw(const PhantomConfig& cfg, Rng& rng) {
        Texture t;
        for (int k = 0; k < 6; ++k) {
            Component c;
            c.amp = cfg.texture_amp * (0.5 + 0.5 * rng.uniform());
            const double wavelength = 8.0 + 12.0 * rng.uniform();  // voxels
            const double az = 2.0 * kPi * rng.uniform();
            const double el = kPi * (rng.uniform() - 0.5);
            const double w = 2.0 * kPi / wavelength;
            c.fx = w * std::cos(el) * std::cos(az);
            c.fy = w * std::cos(el) * std::sin(az);
            c.fz = w * std::sin(el);
            c.phase = 2.0 * kPi * rng.uniform();
            t.comps.push_back(c);
        }
        return t;
    }

    double at(double x, double y, double z) const {
        double acc = 0.0;
        for (const auto& c : comps) {
            acc += c.amp * std::cos(c.fx * x + c.fy * y + c.fz * z + c.phase);
        }
        return acc;
    }
};

void gaussian_blur_axis(std::vector<double>& a, const Dims3& d, int axis, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> kern(std::size_t(radius) + 1);
    for (int i = 0; i <= radius; ++i) kern[std::size_t(i)] = std::exp(-0.5 * (i * i) / (sigma * sigma));

    const int len[3] = {d.nx, d.ny, d.nz};
    const std::int64_t stride[3] = {1, d.nx, std::int64_t(d.nx) * d.ny};
    const int n = len[axis];
    const std::int64_t s = stride[axis];
    const int la = (axis + 1) % 3, lb = (axis + 2) % 3;
    const std::int64_t n_lines = std::int64_t(len[la]) * len[lb];

    std::vector<double> line(static_cast<std::size_t>(n));
    for (std::int64_t li = 0; li < n_lines; ++li) {
        double* base = a.data() + (li % len[la]) * stride[la] + (li / len[la]) * stride[lb];
        for (int i = 0; i < n; ++i) line[std::size_t(i)] = base[std::int64_t(i) * s];
        for (int i = 0; i < n; ++i) {
            double acc = kern[0] * line[std::size_t(i)];
            double wsum = kern[0];
            for (int k = 1; k <= radius; ++k) {
                if (i - k >= 0) {
                    acc += kern[std::size_t(k)] * line[std::size_t(i - k)];
                    wsum += kern[std::size_t(k)];
                }
                if (i + k < n) {
                    acc += kern[std::size_t(k)] * line[std::size_t(i + k)];
                    wsum += kern[std::size_t(k)];
                }
            }
            base[std::int64_t(i) * s] = acc / wsum;
        }
    }
}

}  // namespace

SplitRanges split_ranges(int n_cases, double train_frac, double val_frac) {
    if (n_cases < 0 || train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0) {
        throw std::invalid_argument("split_ranges: invalid fractions");
    }
    SplitRanges r;
    r.train_begin = 0;
    r.train_end = int(std::lround(train_frac * n_cases));
    r.val_begin = r.train_end;
    r.val_end = r.val_begin + int(std::lround(val_frac * n_cases));
    r.test_begin = r.val_end;
    r.test_end = n_cases;
    return r;
}

PhantomCase generate_case(const PhantomConfig& cfg, Rng& rng) {
    cfg.validate();
    const Dims3 d = cfg.dims;

    PhantomParams p;
    p.case_seed = rng.next_u64();
    Rng crng(p.case_seed);

    auto in_range = [&](double lo, double hi) { return lo + (hi - lo) * crng.uniform(); };
    p.lv_radius = in_range(cfg.lv_radius_min, cfg.lv_radius_max);
    p.myo_thickness = in_range(cfg.myo_thickness_min, cfg.myo_thickness_max);
    p.rv_radius = in_range(cfg.rv_radius_min, cfg.rv_radius_max);
    p.rv_gap = in_range(cfg.rv_gap_min, cfg.rv_gap_max);
    p.rv_angle = 2.0 * kPi * crng.uniform();
    p.contraction = in_range(cfg.contraction_min, cfg.contraction_max);
    p.center_x = 0.5 * (d.nx - 1) + in_range(-cfg.center_jitter, cfg.center_jitter);
    p.center_y = 0.5 * (d.ny - 1) + in_range(-cfg.center_jitter, cfg.center_jitter);
    p.drift_amp_x = in_range(0.0, 0.5);
    p.drift_amp_y = in_range(0.0, 0.5);
    p.drift_phase = 2.0 * kPi * crng.uniform();

    Anatomy a;
    a.cfg = &cfg;
    a.p = p;

    // support radius: everything anatomical sits inside the linear region
    double extent = 0.0;
    for (int z = 0; z < d.nz; ++z) {
        extent = std::max(extent, a.rv_center_dist(z) + p.rv_radius);
        extent = std::max(extent, a.r_epi(z));
    }
    p.support_radius = extent + 1.2;
    a.p.support_radius = p.support_radius;
    a.map = RadialMap{p.contraction, p.support_radius, p.support_radius + cfg.taper_width};
    const double max_reach = p.support_radius + cfg.taper_width +
                             std::max(std::abs(p.center_x - 0.5 * (d.nx - 1)),
                                      std::abs(p.center_y - 0.5 * (d.ny - 1))) +
                             std::max(p.drift_amp_x, p.drift_amp_y);
    if (max_reach > 0.5 * std::min(d.nx, d.ny)) {
        throw GeometryError("generate_case: drawn geometry exceeds the grid (support radius " +
                            std::to_string(p.support_radius) + ")");
    }

    const Texture tex = Texture::draw(cfg, crng);

    PhantomCase out;
    out.params = p;
    out.ed_image = Volume(d, cfg.spacing);
    out.es_image = Volume(d, cfg.spacing);
    out.ed_labels = LabelMap(d, cfg.spacing);
    out.es_labels = LabelMap(d, cfg.spacing);
    out.gt_field = DisplacementField(d, cfg.spacing);
    out.gt_field_inverse = DisplacementField(d, cfg.spacing);

    std::int64_t v = 0;
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x, ++v) {
                // ED frame: anatomy evaluated at the grid point itself
                const std::uint8_t ed_cls = a.classify(x, y, z);
                out.ed_labels.data[std::size_t(v)] = ed_cls;
                out.ed_image.data[std::size_t(v)] = a.level(ed_cls) + tex.at(x, y, z);

                // ES frame: anatomy pulled back through the contraction
                double mx, my;
                a.es_to_material(x, y, z, mx, my);
                const std::uint8_t es_cls = a.classify(mx, my, z);
                out.es_labels.data[std::size_t(v)] = es_cls;
                out.es_image.data[std::size_t(v)] = a.level(es_cls) + tex.at(mx, my, z);

                // gt field for ES->ED: ED grid point x maps to its ES position
                double ex, ey;
                a.material_to_es(x, y, z, ex, ey);
                out.gt_field.at(0, x, y, z) = ex - x;
                out.gt_field.at(1, x, y, z) = ey - y;

                // inverse direction: ES grid point back to ED material coords
                out.gt_field_inverse.at(0, x, y, z) = mx - x;
                out.gt_field_inverse.at(1, x, y, z) = my - y;
            }
        }
    }

    for (Volume* img : {&out.ed_image, &out.es_image}) {
        gaussian_blur_axis(img->data, d, 0, cfg.blur_sigma_xy);
        gaussian_blur_axis(img->data, d, 1, cfg.blur_sigma_xy);
        gaussian_blur_axis(img->data, d, 2, cfg.blur_sigma_z);
    }
    if (cfg.noise_std > 0.0) {
        for (Volume* img : {&out.ed_image, &out.es_image}) {
            for (double& x : img->data) x += cfg.noise_std * crng.normal();
        }
    }

    // in-plane areas scale by contraction^2, so EF is exact in closed form
    const double c2 = p.contraction * p.contraction;
    out.analytic_lvef = 100.0 * (1.0 - c2);
    out.analytic_rvef = 100.0 * (1.0 - c2);
    out.analytic_mt_ed_mm = p.myo_thickness * cfg.spacing.x;
    out.analytic_mt_es_mm = p.contraction * p.myo_thickness * cfg.spacing.x;
    return out;
}

std::vector<PhantomCase> generate_dataset(const PhantomConfig& cfg, int n_cases, Rng& rng) {
    if (n_cases < 0) throw std::invalid_argument("generate_dataset: n_cases must be >= 0");
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_cases));
    for (auto& s : seeds) s = rng.next_u64();

    std::vector<PhantomCase> cases(static_cast<std::size_t>(n_cases));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n_cases; ++i) {
        Rng case_rng(seeds[std::size_t(i)]);
        cases[std::size_t(i)] = generate_case(cfg, case_rng);
    }
    return cases;
}

std::string PhantomParams::manifest_text(double lvef, double rvef, double mt_ed,
                                         double mt_es) const {
    std::ostringstream os;
    os.precision(17);
    os << "case_seed=" << case_seed << "\n"
       << "lv_radius=" << lv_radius << "\n"
       << "myo_thickness=" << myo_thickness << "\n"
       << "rv_radius=" << rv_radius << "\n"
       << "rv_gap=" << rv_gap << "\n"
       << "rv_angle=" << rv_angle << "\n"
       << "contraction=" << contraction << "\n"
       << "center_x=" << center_x << "\n"
       << "center_y=" << center_y << "\n"
       << "drift_amp_x=" << drift_amp_x << "\n"
       << "drift_amp_y=" << drift_amp_y << "\n"
       << "drift_phase=" << drift_phase << "\n"
       << "support_radius=" << support_radius << "\n"
       << "analytic_lvef=" << lvef << "\n"
       << "analytic_rvef=" << rvef << "\n"
       << "analytic_mt_ed_mm=" << mt_ed << "\n"
       << "analytic_mt_es_mm=" << mt_es << "\n";
    return os.str();
}

std::filesystem::path case_dir_name(const std::filesystem::path& root, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "case_%04d", index);
    return root / buf;
}

void save_case(const std::filesystem::path& dir, const PhantomCase& c) {
    std::filesystem::create_directories(dir);
    write_fvol(dir / "ed_image.fvol", c.ed_image);
    write_fvol(dir / "es_image.fvol", c.es_image);
    write_fvol(dir / "ed_labels.fvol", c.ed_labels);
    write_fvol(dir / "es_labels.fvol", c.es_labels);
    write_fvol(dir / "gt_field.fvol", c.gt_field);
    write_fvol(dir / "gt_field_inverse.fvol", c.gt_field_inverse);

    const std::filesystem::path tmp = dir / "manifest.txt.tmp";
    {
        std::ofstream f(tmp);
        f << c.params.manifest_text(c.analytic_lvef, c.analytic_rvef, c.analytic_mt_ed_mm,
                                    c.analytic_mt_es_mm);
    }
    std::filesystem::rename(tmp, dir / "manifest.txt");
}

PhantomCase load_case(const std::filesystem::path& dir) {
    PhantomCase c;
    c.ed_image = read_fvol_volume(dir / "ed_image.fvol");
    c.es_image = read_fvol_volume(dir / "es_image.fvol");
    c.ed_labels = read_fvol_labels(dir / "ed_labels.fvol");
    c.es_labels = read_fvol_labels(dir / "es_labels.fvol");
    c.gt_field = read_fvol_field(dir / "gt_field.fvol");
    c.gt_field_inverse = read_fvol_field(dir / "gt_field_inverse.fvol");

    std::ifstream f(dir / "manifest.txt");
    if (!f) throw std::runtime_error((dir / "manifest.txt").string() + ": cannot open");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto num = [&](const std::string& k) {
        const auto it = kv.find(k);
        if (it == kv.end()) {
            throw std::runtime_error((dir / "manifest.txt").string() + ": missing key " + k);
        }
        return std::stod(it->second);
    };
    c.params.case_seed = std::stoull(kv.at("case_seed"));
    c.params.lv_radius = num("lv_radius");
    c.params.myo_thickness = num("myo_thickness");
    c.params.rv_radius = num("rv_radius");
    c.params.rv_gap = num("rv_gap");
    c.params.rv_angle = num("rv_angle");
    c.params.contraction = num("contraction");
    c.params.center_x = num("center_x");
    c.params.center_y = num("center_y");
    c.params.drift_amp_x = num("drift_amp_x");
    c.params.drift_amp_y = num("drift_amp_y");
    c.params.drift_phase = num("drift_phase");
    c.params.support_radius = num("support_radius");
    c.analytic_lvef = num("analytic_lvef");
    c.analytic_rvef = num("analytic_rvef");
    c.analytic_mt_ed_mm = num("analytic_mt_ed_mm");
    c.analytic_mt_es_mm = num("analytic_mt_es_mm");
    return c;
}

}  // namespace flowreg
