#include "flowreg/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace flowreg {

void NetworkConfig::validate() const {
    if (n_scales < 2) throw std::invalid_argument("NetworkConfig: n_scales must be >= 2");
    if (int(channels.size()) != n_scales) {
        throw std::invalid_argument("NetworkConfig: channels must list one entry per scale");
    }
    for (int c : channels) {
        if (c < 1) throw std::invalid_argument("NetworkConfig: channel counts must be positive");
    }
    if (corr_radius < 1) throw std::invalid_argument("NetworkConfig: corr_radius must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
        throw std::invalid_argument("NetworkConfig: time_embed_dim must be even and >= 2");
    }
    if (mlp_hidden < 1) throw std::invalid_argument("NetworkConfig: mlp_hidden must be >= 1");
}

void NetworkConfig::require_grid(const Dims3& dims) const {
    const int f = downsample_factor();
    if (dims.nx % f || dims.ny % f || dims.nz % f) {
        throw ShapeError("network: dims " + dims.str() + " not divisible by " +
                         std::to_string(f));
    }
}

std::vector<double> time_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("time_embedding: dim must be even and >= 2");
    }
    const int half = dim / 2;
    const double x = t * 1000.0;
    std::vector<double> emb(static_cast<std::size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        emb[std::size_t(i)] = std::sin(x * freq);
        emb[std::size_t(half + i)] = std::cos(x * freq);
    }
    return emb;
}

namespace {

int corr_channels(int radius) {
    const int side = 2 * radius + 1;
    return side * side * side;
}

// decoder MLP input width at stage k
int dec_in_channels(const NetworkConfig& cfg, int k) {
    int d = corr_channels(cfg.corr_radius) + 2 * cfg.channels[std::size_t(k)];
    if (k < cfg.n_scales - 1) d += cfg.channels[std::size_t(k) + 1];  // upsampled context
    return d;
}

// decoder MLP output width: context features (stages that feed a finer one)
// plus the 3-channel field increment
int dec_out_channels(const NetworkConfig& cfg, int k) {
    return (k > 0 ? cfg.channels[std::size_t(k)] : 0) + 3;
}

}  // namespace

std::vector<LayerSpec> layer_specs(const NetworkConfig& cfg) {
    cfg.validate();
    using Init = LayerSpec::Init;
    std::vector<LayerSpec> specs;
    const auto& ch = cfg.channels;

    specs.push_back({"enc.s0.conv0.w", {ch[0], 1, 27}, Init::kGlorot});
    specs.push_back({"enc.s0.conv0.b", {ch[0]}, Init::kZero});
    specs.push_back({"enc.s0.conv1.w", {ch[0], ch[0], 27}, Init::kGlorot});
    specs.push_back({"enc.s0.conv1.b", {ch[0]}, Init::kZero});
    for (int k = 1; k < cfg.n_scales; ++k) {
        const std::string base = "enc.s" + std::to_string(k);
        specs.push_back({base + ".down.w", {ch[std::size_t(k)], ch[std::size_t(k) - 1], 27}, Init::kGlorot});
        specs.push_back({base + ".down.b", {ch[std::size_t(k)]}, Init::kZero});
        specs.push_back({base + ".conv1.w", {ch[std::size_t(k)], ch[std::size_t(k)], 27}, Init::kGlorot});
        specs.push_back({base + ".conv1.b", {ch[std::size_t(k)]}, Init::kZero});
    }
    for (int k = 0; k < cfg.n_scales; ++k) {
        const std::string base = "time.s" + std::to_string(k);
        specs.push_back({base + ".w", {ch[std::size_t(k)], cfg.time_embed_dim}, Init::kGlorot});
        specs.push_back({base + ".b", {ch[std::size_t(k)]}, Init::kZero});
    }
    for (int k = cfg.n_scales - 1; k >= 0; --k) {
        const std::string base = "dec.s" + std::to_string(k);
        specs.push_back({base + ".mlp0.w", {cfg.mlp_hidden, dec_in_channels(cfg, k)}, Init::kGlorot});
        specs.push_back({base + ".mlp0.b", {cfg.mlp_hidden}, Init::kZero});
        // the last 3 output rows predict the field increment and start at zero
        specs.push_back({base + ".mlp1.w", {dec_out_channels(cfg, k), cfg.mlp_hidden}, Init::kHead});
        specs.push_back({base + ".mlp1.b", {dec_out_channels(cfg, k)}, Init::kZero});
    }
    return specs;
}

std::size_t param_count(const NetworkConfig& cfg) {
    std::size_t n = 0;
    for (const auto& s : layer_specs(cfg)) {
        std::size_t e = 1;
        for (int d : s.shape) e *= std::size_t(d);
        n += e;
    }
    return n;
}

template <typename T>
Network<T>::Network(NetworkConfig cfg) : cfg_(std::move(cfg)), specs_(layer_specs(cfg_)) {
    const int n = cfg_.n_scales;
    idx_.enc0_w = entry_index("enc.s0.conv0.w");
    idx_.enc0_b = entry_index("enc.s0.conv0.b");
    idx_.enc1_w = entry_index("enc.s0.conv1.w");
    idx_.enc1_b = entry_index("enc.s0.conv1.b");
    idx_.down_w.assign(std::size_t(n), -1);
    idx_.down_b.assign(std::size_t(n), -1);
    idx_.conv_w.assign(std::size_t(n), -1);
    idx_.conv_b.assign(std::size_t(n), -1);
    for (int k = 1; k < n; ++k) {
        const std::string base = "enc.s" + std::to_string(k);
        idx_.down_w[std::size_t(k)] = entry_index(base + ".down.w");
        idx_.down_b[std::size_t(k)] = entry_index(base + ".down.b");
        idx_.conv_w[std::size_t(k)] = entry_index(base + ".conv1.w");
        idx_.conv_b[std::size_t(k)] = entry_index(base + ".conv1.b");
    }
    idx_.time_w.assign(std::size_t(n), -1);
    idx_.time_b.assign(std::size_t(n), -1);
    idx_.mlp0_w.assign(std::size_t(n), -1);
    idx_.mlp0_b.assign(std::size_t(n), -1);
    idx_.mlp1_w.assign(std::size_t(n), -1);
    idx_.mlp1_b.assign(std::size_t(n), -1);
    for (int k = 0; k < n; ++k) {
        idx_.time_w[std::size_t(k)] = entry_index("time.s" + std::to_string(k) + ".w");
        idx_.time_b[std::size_t(k)] = entry_index("time.s" + std::to_string(k) + ".b");
        idx_.mlp0_w[std::size_t(k)] = entry_index("dec.s" + std::to_string(k) + ".mlp0.w");
        idx_.mlp0_b[std::size_t(k)] = entry_index("dec.s" + std::to_string(k) + ".mlp0.b");
        idx_.mlp1_w[std::size_t(k)] = entry_index("dec.s" + std::to_string(k) + ".mlp1.w");
        idx_.mlp1_b[std::size_t(k)] = entry_index("dec.s" + std::to_string(k) + ".mlp1.b");
    }
}

template <typename T>
int Network<T>::entry_index(std::string_view name) const {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (specs_[i].name == name) return int(i);
    }
    throw std::logic_error("network: unknown layer " + std::string(name));
}

template <typename T>
void Network<T>::check_params(const ParamSet<T>& p) const {
    if (p.entries.size() != specs_.size()) {
        throw std::invalid_argument("network: parameter set does not match topology");
    }
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (p.entries[i].name != specs_[i].name || p.entries[i].shape != specs_[i].shape) {
            throw std::invalid_argument("network: parameter mismatch at " + specs_[i].name);
        }
    }
}

template <typename T>
ParamSet<T> Network<T>::init_params(Rng& rng) const {
    ParamSet<T> p;
    p.entries.reserve(specs_.size());
    for (const auto& s : specs_) {
        std::size_t count = 1;
        for (int d : s.shape) count *= std::size_t(d);
        std::vector<T> w(count, T(0));
        if (s.init == LayerSpec::Init::kGlorot || s.init == LayerSpec::Init::kHead) {
            // fan counts over all non-leading dims; conv shapes are
            // [cout, cin, 27], linear shapes [cout, cin]
            std::size_t fan_in = count / std::size_t(s.shape[0]);
            std::size_t fan_out = count / (s.shape.size() > 1 ? std::size_t(s.shape[1]) : 1);
            if (s.shape.size() == 3) fan_out = std::size_t(s.shape[0]) * std::size_t(s.shape[2]);
            const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
            const int rows = s.shape[0];
            const std::size_t per_row = count / std::size_t(rows);
            for (int row = 0; row < rows; ++row) {
                // field-increment head rows stay zero so the untrained
                // network predicts a zero residual
                const bool zero_row = s.init == LayerSpec::Init::kHead && row >= rows - 3;
                for (std::size_t i = 0; i < per_row; ++i) {
                    const double u = rng.uniform();
                    const double val = (2.0 * u - 1.0) * limit;
                    if (!zero_row) w[std::size_t(row) * per_row + i] = T(val);
                }
            }
        }
        p.entries.push_back({s.name, s.shape, std::move(w)});
    }
    return p;
}

namespace {

template <typename T>
Grid<T> volume_to_grid(const Volume& v) {
    Grid<T> g(1, v.dims);
    for (std::size_t i = 0; i < v.data.size(); ++i) g.v[i] = T(v.data[i]);
    return g;
}

template <typename T>
Grid<T> field_to_grid(const DisplacementField& f) {
    Grid<T> g(3, f.dims);
    for (std::size_t i = 0; i < f.data.size(); ++i) g.v[i] = T(f.data[i]);
    return g;
}

template <typename T>
DisplacementField grid_to_field(const Grid<T>& g, const Spacing3& spacing) {
    DisplacementField f(g.dims, spacing);
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = double(g.v[i]);
    return f;
}

}  // namespace

template <typename T>
void Network<T>::encode(const ParamSet<T>& p, typename Workspace<T>::EncActs& acts) const {
    const int n = cfg_.n_scales;
    acts.down.resize(std::size_t(n));
    acts.feat.resize(std::size_t(n));
    const auto& ch = cfg_.channels;

    kernels::conv3_forward(acts.input, p.entries[std::size_t(idx_.enc0_w)].w.data(),
                           p.entries[std::size_t(idx_.enc0_b)].w.data(), 1, ch[0], acts.h0);
    kernels::tanh_inplace(acts.h0);
    kernels::conv3_forward(acts.h0, p.entries[std::size_t(idx_.enc1_w)].w.data(),
                           p.entries[std::size_t(idx_.enc1_b)].w.data(), 1, ch[0], acts.feat[0]);
    kernels::tanh_inplace(acts.feat[0]);
    for (int k = 1; k < n; ++k) {
        kernels::conv3_forward(acts.feat[std::size_t(k) - 1],
                               p.entries[std::size_t(idx_.down_w[std::size_t(k)])].w.data(),
                               p.entries[std::size_t(idx_.down_b[std::size_t(k)])].w.data(), 2,
                               ch[std::size_t(k)], acts.down[std::size_t(k)]);
        kernels::tanh_inplace(acts.down[std::size_t(k)]);
        kernels::conv3_forward(acts.down[std::size_t(k)],
                               p.entries[std::size_t(idx_.conv_w[std::size_t(k)])].w.data(),
                               p.entries[std::size_t(idx_.conv_b[std::size_t(k)])].w.data(), 1,
                               ch[std::size_t(k)], acts.feat[std::size_t(k)]);
        kernels::tanh_inplace(acts.feat[std::size_t(k)]);
    }
}

template <typename T>
DisplacementField Network<T>::forward(const ParamSet<T>& p, const Volume& fixed,
                                      const Volume& moving, const DisplacementField& psi_t,
                                      double t, Workspace<T>& ws) const {
    check_params(p);
    require_same_dims(fixed.dims, moving.dims, "network forward");
    require_same_dims(fixed.dims, psi_t.dims, "network forward");
    cfg_.require_grid(fixed.dims);
    if (!(t >= 0.0 && t < 1.0)) {
        throw std::domain_error("network forward: t must be in [0, 1)");
    }

    const int n = cfg_.n_scales;
    const int r = cfg_.corr_radius;
    const auto& ch = cfg_.channels;

    ws.enc_f.input = volume_to_grid<T>(fixed);
    ws.enc_m.input = volume_to_grid<T>(moving);
    encode(p, ws.enc_f);
    encode(p, ws.enc_m);

    // time conditioning: raw sinusoid, then a learned per-scale projection
    const std::vector<double> emb_d = time_embedding(t, cfg_.time_embed_dim);
    ws.emb.assign(emb_d.begin(), emb_d.end());
    ws.tvec.assign(std::size_t(n), {});
    ws.fm_t.assign(std::size_t(n), {});
    for (int k = 0; k < n; ++k) {
        const auto& tw = p.entries[std::size_t(idx_.time_w[std::size_t(k)])].w;
        const auto& tb = p.entries[std::size_t(idx_.time_b[std::size_t(k)])].w;
        std::vector<T>& tv = ws.tvec[std::size_t(k)];
        tv.assign(std::size_t(ch[std::size_t(k)]), T(0));
        for (int co = 0; co < ch[std::size_t(k)]; ++co) {
            double acc = double(tb[std::size_t(co)]);
            for (int i = 0; i < cfg_.time_embed_dim; ++i) {
                acc += double(tw[std::size_t(co) * std::size_t(cfg_.time_embed_dim) + std::size_t(i)]) * emb_d[std::size_t(i)];
            }
            tv[std::size_t(co)] = T(acc);
        }
        ws.fm_t[std::size_t(k)] = ws.enc_m.feat[std::size_t(k)];
        kernels::add_channel_vector(ws.fm_t[std::size_t(k)], tv.data());
    }

    ws.psi_in.assign(std::size_t(n), {});
    ws.ctx_up.assign(std::size_t(n), {});
    ws.warped.assign(std::size_t(n), {});
    ws.corr.assign(std::size_t(n), {});
    ws.mlp_in.assign(std::size_t(n), {});
    ws.hid.assign(std::size_t(n), {});
    ws.out.assign(std::size_t(n), {});
    ws.psi.assign(std::size_t(n), {});

    const Grid<T> psi_t_grid = field_to_grid<T>(psi_t);

    for (int k = n - 1; k >= 0; --k) {
        Grid<T>& psi_in = ws.psi_in[std::size_t(k)];
        if (k == n - 1) {
            const int f = cfg_.downsample_factor();
            kernels::downsample_avg(psi_t_grid, f, 1.0 / f, psi_in);
        } else {
            kernels::upsample_linear(ws.psi[std::size_t(k) + 1], 2, 2.0, psi_in);
            const int cc = ch[std::size_t(k) + 1];
            Grid<T> ctx(cc, ws.psi[std::size_t(k) + 1].dims);
            kernels::copy_channels(ws.out[std::size_t(k) + 1], 0, ctx, 0, cc);
            kernels::upsample_linear(ctx, 2, 1.0, ws.ctx_up[std::size_t(k)]);
        }

        kernels::warp_forward(ws.fm_t[std::size_t(k)], psi_in, ws.warped[std::size_t(k)]);
        kernels::correlation_forward(ws.warped[std::size_t(k)], ws.enc_f.feat[std::size_t(k)], r,
                                     ws.corr[std::size_t(k)]);

        const int din = dec_in_channels(cfg_, k);
        Grid<T>& mlp_in = ws.mlp_in[std::size_t(k)];
        mlp_in.resize(din, psi_in.dims);
        int c0 = 0;
        kernels::copy_channels(ws.corr[std::size_t(k)], 0, mlp_in, c0, ws.corr[std::size_t(k)].c);
        c0 += ws.corr[std::size_t(k)].c;
        kernels::copy_channels(ws.warped[std::size_t(k)], 0, mlp_in, c0, ch[std::size_t(k)]);
        c0 += ch[std::size_t(k)];
        kernels::copy_channels(ws.enc_f.feat[std::size_t(k)], 0, mlp_in, c0, ch[std::size_t(k)]);
        c0 += ch[std::size_t(k)];
        if (k < n - 1) {
            kernels::copy_channels(ws.ctx_up[std::size_t(k)], 0, mlp_in, c0, ch[std::size_t(k) + 1]);
        }

        kernels::linear_forward(mlp_in, p.entries[std::size_t(idx_.mlp0_w[std::size_t(k)])].w.data(),
                                p.entries[std::size_t(idx_.mlp0_b[std::size_t(k)])].w.data(),
                                cfg_.mlp_hidden, ws.hid[std::size_t(k)]);
        kernels::tanh_inplace(ws.hid[std::size_t(k)]);
        kernels::linear_forward(ws.hid[std::size_t(k)],
                                p.entries[std::size_t(idx_.mlp1_w[std::size_t(k)])].w.data(),
                                p.entries[std::size_t(idx_.mlp1_b[std::size_t(k)])].w.data(),
                                dec_out_channels(cfg_, k), ws.out[std::size_t(k)]);

        // residual correction on the carried field
        Grid<T>& psi = ws.psi[std::size_t(k)];
        psi = psi_in;
        const int delta0 = dec_out_channels(cfg_, k) - 3;
        kernels::accumulate_channels(ws.out[std::size_t(k)], delta0, psi, 0, 3);
    }

    ws.valid = true;
    return grid_to_field(ws.psi[0], psi_t.spacing);
}

template <typename T>
void Network<T>::backward(const ParamSet<T>& p, const Workspace<T>& ws,
                          const DisplacementField& d_psi1, ParamSet<T>& grads) const {
    if (!ws.valid) {
        throw std::logic_error("network backward: no retained forward activations");
    }
    check_params(p);
    check_params(grads);
    require_same_dims(d_psi1.dims, ws.psi[0].dims, "network backward");

    const int n = cfg_.n_scales;
    const int r = cfg_.corr_radius;
    const auto& ch = cfg_.channels;

    std::vector<Grid<T>> d_psi(static_cast<std::size_t>(n));      // gradient w.r.t. psi[k]
    std::vector<Grid<T>> d_ctx_out(static_cast<std::size_t>(n));  // gradient w.r.t. out[k] context part
    std::vector<Grid<T>> d_feat_f(static_cast<std::size_t>(n)), d_feat_m(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        d_feat_f[std::size_t(k)].resize(ch[std::size_t(k)], ws.enc_f.feat[std::size_t(k)].dims);
        d_feat_m[std::size_t(k)].resize(ch[std::size_t(k)], ws.enc_m.feat[std::size_t(k)].dims);
        if (k > 0) d_ctx_out[std::size_t(k)].resize(ch[std::size_t(k)], ws.out[std::size_t(k)].dims);
    }
    d_psi[0] = field_to_grid<T>(d_psi1);

    for (int k = 0; k < n; ++k) {
        const int dout_c = dec_out_channels(cfg_, k);
        const int delta0 = dout_c - 3;

        // out[k] gradient: context rows from the finer stage, last 3 from psi
        Grid<T> d_out(dout_c, ws.out[std::size_t(k)].dims);
        if (k > 0) kernels::copy_channels(d_ctx_out[std::size_t(k)], 0, d_out, 0, ch[std::size_t(k)]);
        kernels::copy_channels(d_psi[std::size_t(k)], 0, d_out, delta0, 3);

        // MLP backward
        Grid<T> d_hid(cfg_.mlp_hidden, ws.hid[std::size_t(k)].dims);
        kernels::linear_backward_input(d_out, p.entries[std::size_t(idx_.mlp1_w[std::size_t(k)])].w.data(),
                                       cfg_.mlp_hidden, d_hid);
        kernels::linear_backward_params(ws.hid[std::size_t(k)], d_out,
                                        grads.entries[std::size_t(idx_.mlp1_w[std::size_t(k)])].w.data(),
                                        grads.entries[std::size_t(idx_.mlp1_b[std::size_t(k)])].w.data());
        kernels::tanh_backward(ws.hid[std::size_t(k)], d_hid);
        const int din_c = dec_in_channels(cfg_, k);
        Grid<T> d_mlp_in(din_c, ws.mlp_in[std::size_t(k)].dims);
        kernels::linear_backward_input(d_hid, p.entries[std::size_t(idx_.mlp0_w[std::size_t(k)])].w.data(),
                                       din_c, d_mlp_in);
        kernels::linear_backward_params(ws.mlp_in[std::size_t(k)], d_hid,
                                        grads.entries[std::size_t(idx_.mlp0_w[std::size_t(k)])].w.data(),
                                        grads.entries[std::size_t(idx_.mlp0_b[std::size_t(k)])].w.data());

        // split the concat
        const int n_corr = corr_channels(r);
        Grid<T> d_corr(n_corr, d_mlp_in.dims);
        Grid<T> d_warped(ch[std::size_t(k)], d_mlp_in.dims);
        kernels::copy_channels(d_mlp_in, 0, d_corr, 0, n_corr);
        kernels::copy_channels(d_mlp_in, n_corr, d_warped, 0, ch[std::size_t(k)]);
        kernels::accumulate_channels(d_mlp_in, n_corr + ch[std::size_t(k)], d_feat_f[std::size_t(k)], 0,
                                     ch[std::size_t(k)]);
        if (k < n - 1) {
            Grid<T> d_ctx_up(ch[std::size_t(k) + 1], d_mlp_in.dims);
            kernels::copy_channels(d_mlp_in, n_corr + 2 * ch[std::size_t(k)], d_ctx_up, 0,
                                   ch[std::size_t(k) + 1]);
            kernels::upsample_linear_adjoint(d_ctx_up, 2, 1.0, d_ctx_out[std::size_t(k) + 1]);
        }

        // correlation backward adds to both streams
        kernels::correlation_backward(ws.warped[std::size_t(k)], ws.enc_f.feat[std::size_t(k)], r, d_corr,
                                      &d_warped, &d_feat_f[std::size_t(k)]);

        // warp backward: into the (time-conditioned) moving features and the
        // warping field
        Grid<T> d_psi_in(3, ws.psi_in[std::size_t(k)].dims);
        kernels::copy_channels(d_psi[std::size_t(k)], 0, d_psi_in, 0, 3);  // residual path
        Grid<T> d_fm(ch[std::size_t(k)], ws.fm_t[std::size_t(k)].dims);
        kernels::warp_backward(ws.fm_t[std::size_t(k)], ws.psi_in[std::size_t(k)], d_warped, &d_fm,
                               &d_psi_in);

        // time projection gradients; moving feature grads pass through the add
        std::vector<T> d_tvec(std::size_t(ch[std::size_t(k)]), T(0));
        kernels::channel_sum(d_fm, d_tvec.data());
        auto& tw_g = grads.entries[std::size_t(idx_.time_w[std::size_t(k)])].w;
        auto& tb_g = grads.entries[std::size_t(idx_.time_b[std::size_t(k)])].w;
        for (int co = 0; co < ch[std::size_t(k)]; ++co) {
            tb_g[std::size_t(co)] += d_tvec[std::size_t(co)];
            for (int i = 0; i < cfg_.time_embed_dim; ++i) {
                tw_g[std::size_t(co) * std::size_t(cfg_.time_embed_dim) + std::size_t(i)] +=
                    d_tvec[std::size_t(co)] * ws.emb[std::size_t(i)];
            }
        }
        kernels::accumulate_channels(d_fm, 0, d_feat_m[std::size_t(k)], 0, ch[std::size_t(k)]);

        // propagate the field gradient to the coarser stage
        if (k < n - 1) {
            d_psi[std::size_t(k) + 1].resize(3, ws.psi[std::size_t(k) + 1].dims);
            kernels::upsample_linear_adjoint(d_psi_in, 2, 2.0, d_psi[std::size_t(k) + 1]);
        }
        // at the coarsest stage psi_in came from the (constant) noisy input
    }

    encode_backward(p, ws.enc_f, d_feat_f, grads);
    encode_backward(p, ws.enc_m, d_feat_m, grads);
}

template <typename T>
void Network<T>::encode_backward(const ParamSet<T>& p, const typename Workspace<T>::EncActs& acts,
                                 std::vector<Grid<T>>& d_feat, ParamSet<T>& grads) const {
    const int n = cfg_.n_scales;
    const auto& ch = cfg_.channels;

    Grid<T> d = std::move(d_feat[std::size_t(n) - 1]);
    for (int k = n - 1; k >= 1; --k) {
        kernels::tanh_backward(acts.feat[std::size_t(k)], d);
        kernels::conv3_backward_params(acts.down[std::size_t(k)], d, 1,
                                       grads.entries[std::size_t(idx_.conv_w[std::size_t(k)])].w.data(),
                                       grads.entries[std::size_t(idx_.conv_b[std::size_t(k)])].w.data());
        Grid<T> d_down(ch[std::size_t(k)], acts.down[std::size_t(k)].dims);
        kernels::conv3_backward_input(d, p.entries[std::size_t(idx_.conv_w[std::size_t(k)])].w.data(), 1,
                                      ch[std::size_t(k)], d_down);
        kernels::tanh_backward(acts.down[std::size_t(k)], d_down);
        kernels::conv3_backward_params(acts.feat[std::size_t(k) - 1], d_down, 2,
                                       grads.entries[std::size_t(idx_.down_w[std::size_t(k)])].w.data(),
                                       grads.entries[std::size_t(idx_.down_b[std::size_t(k)])].w.data());
        Grid<T> d_prev(ch[std::size_t(k) - 1], acts.feat[std::size_t(k) - 1].dims);
        kernels::conv3_backward_input(d_down, p.entries[std::size_t(idx_.down_w[std::size_t(k)])].w.data(),
                                      2, ch[std::size_t(k) - 1], d_prev);
        kernels::accumulate_channels(d_feat[std::size_t(k) - 1], 0, d_prev, 0, ch[std::size_t(k) - 1]);
        d = std::move(d_prev);
    }

    kernels::tanh_backward(acts.feat[0], d);
    kernels::conv3_backward_params(acts.h0, d, 1, grads.entries[std::size_t(idx_.enc1_w)].w.data(),
                                   grads.entries[std::size_t(idx_.enc1_b)].w.data());
    Grid<T> d_h0(ch[0], acts.h0.dims);
    kernels::conv3_backward_input(d, p.entries[std::size_t(idx_.enc1_w)].w.data(), 1, ch[0], d_h0);
    kernels::tanh_backward(acts.h0, d_h0);
    kernels::conv3_backward_params(acts.input, d_h0, 1, grads.entries[std::size_t(idx_.enc0_w)].w.data(),
                                   grads.entries[std::size_t(idx_.enc0_b)].w.data());
}

// ---------------------------------------------------------------------------
// FRWT checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kFrwtMagic[4] = {'F', 'R', 'W', 'T'};
constexpr std::uint8_t kFrwtVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}
void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

struct Cursor {
    const std::vector<char>* bytes;
    std::size_t pos = 0;
    std::string path;
    void need(std::size_t n) const {
        if (pos + n > bytes->size()) throw CheckpointError(path + ": truncated checkpoint");
    }
    std::uint8_t u8() {
        need(1);
        return std::uint8_t((*bytes)[pos++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t((*bytes)[pos + std::size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t((*bytes)[pos + std::size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg,
                     const ParamSet<float>& params) {
    std::string buf;
    buf.append(kFrwtMagic, 4);
    buf.push_back(char(kFrwtVersion));
    put_u32(buf, std::uint32_t(cfg.n_scales));
    for (int c : cfg.channels) put_u32(buf, std::uint32_t(c));
    put_u32(buf, std::uint32_t(cfg.corr_radius));
    put_u32(buf, std::uint32_t(cfg.time_embed_dim));
    put_u32(buf, std::uint32_t(cfg.mlp_hidden));
    put_u64(buf, cfg.seed);
    put_u32(buf, std::uint32_t(params.entries.size()));
    for (const auto& e : params.entries) {
        put_u32(buf, std::uint32_t(e.name.size()));
        buf.append(e.name);
        put_u32(buf, std::uint32_t(e.w.size()));
        for (float v : e.w) put_f32(buf, v);
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError(path.string() + ": cannot open for writing");
        f.write(buf.data(), std::streamsize(buf.size()));
        if (!f) throw CheckpointError(path.string() + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

std::pair<NetworkConfig, ParamSet<float>> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(path.string() + ": cannot open");
    std::vector<char> bytes;
    f.seekg(0, std::ios::end);
    bytes.resize(std::size_t(f.tellg()));
    f.seekg(0);
    f.read(bytes.data(), std::streamsize(bytes.size()));

    Cursor c{&bytes, 0, path.string()};
    c.need(4);
    if (std::memcmp(bytes.data(), kFrwtMagic, 4) != 0) {
        throw CheckpointError(path.string() + ": bad magic, not an FRWT checkpoint");
    }
    c.pos = 4;
    if (c.u8() != kFrwtVersion) throw CheckpointError(path.string() + ": unsupported version");

    NetworkConfig cfg;
    cfg.n_scales = int(c.u32());
    if (cfg.n_scales < 2 || cfg.n_scales > 16) {
        throw CheckpointError(path.string() + ": implausible scale count");
    }
    cfg.channels.resize(std::size_t(cfg.n_scales));
    for (auto& ch : cfg.channels) ch = int(c.u32());
    cfg.corr_radius = int(c.u32());
    cfg.time_embed_dim = int(c.u32());
    cfg.mlp_hidden = int(c.u32());
    cfg.seed = c.u64();
    cfg.validate();

    const auto specs = layer_specs(cfg);
    const std::uint32_t n_entries = c.u32();
    if (n_entries != specs.size()) {
        throw CheckpointError(path.string() + ": entry count does not match config");
    }
    ParamSet<float> params;
    params.entries.reserve(n_entries);
    for (std::uint32_t i = 0; i < n_entries; ++i) {
        const std::uint32_t name_len = c.u32();
        c.need(name_len);
        std::string name(bytes.data() + c.pos, name_len);
        c.pos += name_len;
        const std::uint32_t count = c.u32();
        const auto& spec = specs[i];
        std::size_t expect = 1;
        for (int d : spec.shape) expect *= std::size_t(d);
        if (name != spec.name || count != expect) {
            throw CheckpointError(path.string() + ": layer " + name + " does not match topology");
        }
        std::vector<float> w(count);
        for (auto& v : w) v = c.f32();
        params.entries.push_back({std::move(name), spec.shape, std::move(w)});
    }
    return {cfg, std::move(params)};
}

template class Network<float>;
template class Network<double>;

}  // namespace flowreg
