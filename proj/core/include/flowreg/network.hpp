#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flowreg/rng.hpp"
#include "flowreg/tensor.hpp"
#include "flowreg/types.hpp"

namespace flowreg {

struct NetworkConfig {
    int n_scales = 3;
    std::vector<int> channels = {8, 16, 32};  // per scale, fine to coarse
    int corr_radius = 1;
    int time_embed_dim = 32;
    int mlp_hidden = 32;
    std::uint64_t seed = 0;

    void validate() const;
    int downsample_factor() const { return 1 << (n_scales - 1); }
    void require_grid(const Dims3& dims) const;
    bool operator==(const NetworkConfig&) const = default;
};

/// Named parameter tensors in a fixed, config-determined order.
template <typename T>
struct ParamSet {
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<T> w;
    };
    std::vector<Entry> entries;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.w.size();
        return n;
    }
    ParamSet zeros_like() const {
        ParamSet z;
        z.entries.reserve(entries.size());
        for (const auto& e : entries) {
            z.entries.push_back({e.name, e.shape, std::vector<T>(e.w.size(), T(0))});
        }
        return z;
    }
    void zero() {
        for (auto& e : entries) std::fill(e.w.begin(), e.w.end(), T(0));
    }
    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        out.entries.reserve(entries.size());
        for (const auto& e : entries) {
            std::vector<U> w(e.w.size());
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = U(e.w[i]);
            out.entries.push_back({e.name, e.shape, std::move(w)});
        }
        return out;
    }
};

/// Shape table for every parameter tensor of a topology.
struct LayerSpec {
    std::string name;
    std::vector<int> shape;
    enum class Init { kGlorot, kZero, kHead } init = Init::kGlorot;
};
std::vector<LayerSpec> layer_specs(const NetworkConfig& cfg);
std::size_t param_count(const NetworkConfig& cfg);

/// Sinusoidal embedding of t*1000 over dim/2 frequency pairs, laid out as
/// [sin..., cos...]; at t=0 this is (0,...,0, 1,...,1).
std::vector<double> time_embedding(double t, int dim);

/// Per-sample activation storage; forward fills it, backward consumes it.
template <typename T>
struct Workspace {
    struct EncActs {
        Grid<T> input;               // 1-channel image
        Grid<T> h0;                  // stem conv activation
        std::vector<Grid<T>> down;   // post-stride-2 activations, index k>=1
        std::vector<Grid<T>> feat;   // per-scale features
    };
    EncActs enc_f, enc_m;
    std::vector<T> emb;               // raw sinusoidal embedding
    std::vector<std::vector<T>> tvec; // projected time vector per scale
    std::vector<Grid<T>> fm_t;        // moving features + time
    std::vector<Grid<T>> psi_in;      // field each stage warps with / refines
    std::vector<Grid<T>> ctx_up;      // upsampled context features (k < n-1)
    std::vector<Grid<T>> warped, corr, mlp_in, hid, out, psi;
    bool valid = false;
};

/// The conditional registration network f(fixed, moving, psi_t, t): shared
/// two-conv encoder per scale, coarse-to-fine correlation-MLP decoder with
/// sinusoidal time conditioning added to moving features, residual field
/// corrections at every stage.
template <typename T>
class Network {
public:
    explicit Network(NetworkConfig cfg);

    const NetworkConfig& config() const { return cfg_; }

    ParamSet<T> init_params(Rng& rng) const;
    ParamSet<T> init_params() const {
        Rng rng(cfg_.seed);
        return init_params(rng);
    }

    /// Predicts the full-resolution field; t must lie in [0, 1).
    DisplacementField forward(const ParamSet<T>& p, const Volume& fixed, const Volume& moving,
                              const DisplacementField& psi_t, double t, Workspace<T>& ws) const;

    /// Accumulates exact parameter gradients for the activations retained in
    /// ws; throws if forward has not been run on this workspace.
    void backward(const ParamSet<T>& p, const Workspace<T>& ws, const DisplacementField& d_psi1,
                  ParamSet<T>& grads) const;

    void check_params(const ParamSet<T>& p) const;

private:
    NetworkConfig cfg_;
    std::vector<LayerSpec> specs_;

    int entry_index(std::string_view name) const;
    // cached entry indices, resolved once against the canonical order
    struct Idx {
        int enc0_w, enc0_b, enc1_w, enc1_b;                    // scale-0 stem
        std::vector<int> down_w, down_b, conv_w, conv_b;       // scales >= 1
        std::vector<int> time_w, time_b;
        std::vector<int> mlp0_w, mlp0_b, mlp1_w, mlp1_b;
    } idx_;

    void encode(const ParamSet<T>& p, typename Workspace<T>::EncActs& acts) const;
    void encode_backward(const ParamSet<T>& p, const typename Workspace<T>::EncActs& acts,
                         std::vector<Grid<T>>& d_feat, ParamSet<T>& grads) const;
};

// FRWT checkpoint: magic "FRWT", version byte, config echo, then per-layer
// name-length-prefixed entries with little-endian float32 payloads.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& cfg,
                     const ParamSet<float>& params);
std::pair<NetworkConfig, ParamSet<float>> load_checkpoint(const std::filesystem::path& path);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace flowreg
