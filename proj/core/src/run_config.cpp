#include "flowreg/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace flowreg {

namespace {

enum class Kind { kInt, kDouble, kBool, kString, kIntList };

struct SchemaEntry {
    const char* key;
    Kind kind;
    const char* default_value;
};

// every recognized key with its type and default
const SchemaEntry kSchema[] = {
    {"seed", Kind::kInt, "42"},
    {"threads", Kind::kInt, "0"},
    {"out", Kind::kString, ""},
    {"direction", Kind::kString, "es_to_ed"},

    {"data.dir", Kind::kString, ""},
    {"data.train_frac", Kind::kDouble, "0.8"},
    {"data.val_frac", Kind::kDouble, "0.1"},

    {"phantom.cases", Kind::kInt, "200"},
    {"phantom.nx", Kind::kInt, "64"},
    {"phantom.ny", Kind::kInt, "64"},
    {"phantom.nz", Kind::kInt, "16"},
    {"phantom.spacing_x", Kind::kDouble, "1.5"},
    {"phantom.spacing_y", Kind::kDouble, "1.5"},
    {"phantom.spacing_z", Kind::kDouble, "3.15"},
    {"phantom.lv_radius_min", Kind::kDouble, "8.2"},
    {"phantom.lv_radius_max", Kind::kDouble, "8.8"},
    {"phantom.myo_thickness_min", Kind::kDouble, "6.4"},
    {"phantom.myo_thickness_max", Kind::kDouble, "6.8"},
    {"phantom.rv_radius_min", Kind::kDouble, "5.8"},
    {"phantom.rv_radius_max", Kind::kDouble, "6.2"},
    {"phantom.rv_gap_min", Kind::kDouble, "0.3"},
    {"phantom.rv_gap_max", Kind::kDouble, "0.4"},
    {"phantom.center_jitter", Kind::kDouble, "0.5"},
    {"phantom.taper_width", Kind::kDouble, "2.0"},
    {"phantom.contraction_min", Kind::kDouble, "0.76"},
    {"phantom.contraction_max", Kind::kDouble, "0.88"},
    {"phantom.intensity_background", Kind::kDouble, "0.08"},
    {"phantom.intensity_myo", Kind::kDouble, "0.45"},
    {"phantom.intensity_rv", Kind::kDouble, "0.85"},
    {"phantom.intensity_lv", Kind::kDouble, "0.95"},
    {"phantom.texture_amp", Kind::kDouble, "0.06"},
    {"phantom.blur_sigma_xy", Kind::kDouble, "0.8"},
    {"phantom.blur_sigma_z", Kind::kDouble, "0.4"},
    {"phantom.noise_std", Kind::kDouble, "0.02"},

    {"net.scales", Kind::kInt, "3"},
    {"net.channels", Kind::kIntList, "8,16,32"},
    {"net.corr_radius", Kind::kInt, "1"},
    {"net.time_embed_dim", Kind::kInt, "32"},
    {"net.mlp_hidden", Kind::kInt, "32"},

    {"loss.ncc_window", Kind::kInt, "9"},
    {"loss.eps", Kind::kDouble, "1e-5"},
    {"loss.grad_weight", Kind::kDouble, "1.0"},
    {"loss.signed_ncc", Kind::kBool, "false"},

    {"train.epochs", Kind::kInt, "100"},
    {"train.warmup_epochs", Kind::kInt, "2"},
    {"train.lr", Kind::kDouble, "1e-4"},
    {"train.batch_size", Kind::kInt, "1"},
    {"train.ema_mu", Kind::kDouble, "0.99"},
    {"train.patience", Kind::kInt, "10"},
    {"train.augment", Kind::kBool, "true"},
    {"train.resume", Kind::kString, ""},

    {"sampler.steps", Kind::kInt, "10"},
    {"sampler.eta", Kind::kDouble, "0"},
    {"sampler.eta_auto", Kind::kBool, "true"},  // eta = steps*(sqrt(2)-1)
    {"sampler.lambda_g", Kind::kDouble, "0.05"},
    {"sampler.sde", Kind::kBool, "true"},
    {"sampler.heun", Kind::kBool, "true"},
    {"sampler.ig", Kind::kBool, "true"},
    {"sampler.guidance", Kind::kBool, "true"},

    {"register.checkpoint", Kind::kString, ""},
    {"register.fixed", Kind::kString, ""},
    {"register.moving", Kind::kString, ""},
    {"register.instance_opt_steps", Kind::kInt, "0"},
    {"register.instance_opt_lr", Kind::kDouble, "0.01"},

    {"evaluate.pred_dir", Kind::kString, ""},
    {"evaluate.checkpoint", Kind::kString, ""},
    {"evaluate.sweep_steps", Kind::kIntList, ""},
    {"evaluate.split", Kind::kString, "test"},
};

const SchemaEntry* find_schema(const std::string& key) {
    for (const auto& e : kSchema) {
        if (key == e.key) return &e;
    }
    return nullptr;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(int(parse_int(key, item)));
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
    for (const auto& e : kSchema) values_[e.key] = e.default_value;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    RunConfig cfg;
    cfg.load_file(path);
    return cfg;
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path.string() + ": cannot open config file");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": expected key=value, got '" + t + "'");
        }
        set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const SchemaEntry* e = find_schema(key);
    if (!e) throw ConfigError("unknown config key '" + key + "'");
    // validate by parsing once
    switch (e->kind) {
        case Kind::kInt: parse_int(key, value); break;
        case Kind::kDouble: parse_double(key, value); break;
        case Kind::kBool: parse_bool(key, value); break;
        case Kind::kIntList: parse_int_list(key, value); break;
        case Kind::kString: break;
    }
    values_[key] = value;
}

const std::string& RunConfig::raw(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    return parse_int(key, raw(key));
}
double RunConfig::get_double(const std::string& key) const {
    return parse_double(key, raw(key));
}
bool RunConfig::get_bool(const std::string& key) const {
    return parse_bool(key, raw(key));
}
const std::string& RunConfig::get_string(const std::string& key) const {
    return raw(key);
}
std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    return parse_int_list(key, raw(key));
}

std::string RunConfig::echo() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

void RunConfig::write_echo(const std::filesystem::path& path) const {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw ConfigError(path.string() + ": cannot write config echo");
        f << echo();
    }
    std::filesystem::rename(tmp, path);
}

PhantomConfig RunConfig::phantom_config() const {
    PhantomConfig c;
    c.dims = Dims3{int(get_int("phantom.nx")), int(get_int("phantom.ny")),
                   int(get_int("phantom.nz"))};
    c.spacing = Spacing3{get_double("phantom.spacing_x"), get_double("phantom.spacing_y"),
                         get_double("phantom.spacing_z")};
    c.lv_radius_min = get_double("phantom.lv_radius_min");
    c.lv_radius_max = get_double("phantom.lv_radius_max");
    c.myo_thickness_min = get_double("phantom.myo_thickness_min");
    c.myo_thickness_max = get_double("phantom.myo_thickness_max");
    c.rv_radius_min = get_double("phantom.rv_radius_min");
    c.rv_radius_max = get_double("phantom.rv_radius_max");
    c.rv_gap_min = get_double("phantom.rv_gap_min");
    c.rv_gap_max = get_double("phantom.rv_gap_max");
    c.center_jitter = get_double("phantom.center_jitter");
    c.taper_width = get_double("phantom.taper_width");
    c.contraction_min = get_double("phantom.contraction_min");
    c.contraction_max = get_double("phantom.contraction_max");
    c.intensity_background = get_double("phantom.intensity_background");
    c.intensity_myo = get_double("phantom.intensity_myo");
    c.intensity_rv = get_double("phantom.intensity_rv");
    c.intensity_lv = get_double("phantom.intensity_lv");
    c.texture_amp = get_double("phantom.texture_amp");
    c.blur_sigma_xy = get_double("phantom.blur_sigma_xy");
    c.blur_sigma_z = get_double("phantom.blur_sigma_z");
    c.noise_std = get_double("phantom.noise_std");
    c.seed = Rng::split(seed(), "phantom");
    return c;
}

NetworkConfig RunConfig::network_config() const {
    NetworkConfig c;
    c.n_scales = int(get_int("net.scales"));
    c.channels = get_int_list("net.channels");
    c.corr_radius = int(get_int("net.corr_radius"));
    c.time_embed_dim = int(get_int("net.time_embed_dim"));
    c.mlp_hidden = int(get_int("net.mlp_hidden"));
    c.seed = Rng::split(seed(), "init");
    c.validate();
    return c;
}

LossConfig RunConfig::loss_config() const {
    LossConfig c;
    c.ncc_window = int(get_int("loss.ncc_window"));
    c.eps = get_double("loss.eps");
    c.grad_weight = get_double("loss.grad_weight");
    c.signed_ncc = get_bool("loss.signed_ncc");
    return c;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig c;
    c.epochs = int(get_int("train.epochs"));
    c.warmup_epochs = int(get_int("train.warmup_epochs"));
    c.lr = get_double("train.lr");
    c.batch_size = int(get_int("train.batch_size"));
    c.ema_mu = get_double("train.ema_mu");
    c.patience = int(get_int("train.patience"));
    c.augment = get_bool("train.augment");
    c.loss = loss_config();
    c.seed = Rng::split(seed(), "fit");
    c.validate();
    return c;
}

SamplerConfig RunConfig::sampler_config() const {
    SamplerConfig c;
    c.steps = int(get_int("sampler.steps"));
    c.eta = get_bool("sampler.eta_auto") ? SamplerConfig::saturating_eta(c.steps)
                                         : get_double("sampler.eta");
    c.lambda_g = get_double("sampler.lambda_g");
    c.use_sde = get_bool("sampler.sde");
    c.use_heun = get_bool("sampler.heun");
    c.use_ig = get_bool("sampler.ig");
    c.use_guidance = get_bool("sampler.guidance");
    c.seed = Rng::split(seed(), "sampler");
    c.validate();
    return c;
}

}  // namespace flowreg
