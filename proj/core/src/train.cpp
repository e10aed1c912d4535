#include "flowreg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "flowreg/flow.hpp"
#include "flowreg/volume_ops.hpp"

namespace flowreg {

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) {
        throw std::invalid_argument("TrainConfig: warmup_epochs must lie in [0, epochs]");
    }
    if (!(ema_mu > 0.0 && ema_mu < 1.0)) {
        throw std::invalid_argument("TrainConfig: ema_mu must lie in (0, 1)");
    }
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
    if (batch_size != 1) throw std::invalid_argument("TrainConfig: only batch_size 1 is supported");
    if (!(lr >= 0)) throw std::invalid_argument("TrainConfig: lr must be non-negative");
}

double sample_time_logit_normal(Rng& rng) {
    const double z = rng.normal();
    return 1.0 / (1.0 + std::exp(-z));
}

template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double mu) {
    if (teacher.entries.size() != student.entries.size()) {
        throw std::invalid_argument("ema_update: parameter sets do not match");
    }
    for (std::size_t e = 0; e < teacher.entries.size(); ++e) {
        auto& tw = teacher.entries[e].w;
        const auto& sw = student.entries[e].w;
        if (tw.size() != sw.size()) {
            throw std::invalid_argument("ema_update: tensor size mismatch at " +
                                        teacher.entries[e].name);
        }
        for (std::size_t i = 0; i < tw.size(); ++i) {
            tw[i] = T(mu * double(tw[i]) + (1.0 - mu) * double(sw[i]));
        }
    }
}

AugmentDraw draw_augment(Rng& rng) {
    AugmentDraw a;
    a.flip_x = rng.coin();
    a.flip_y = rng.coin();
    a.flip_z = rng.coin();
    a.rot90 = rng.uniform_int(4);
    return a;
}

namespace {

// Quarter-turn in the xy-plane: output(x, y) = input(y, ny_out - 1 - x) with
// swapped dims; flips reverse one axis. Implemented as explicit grid copies.
template <typename Store>
void flip_axis(Store& data, Dims3& d, int axis) {
    Store out(data.size());
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const int sx = axis == 0 ? d.nx - 1 - x : x;
                const int sy = axis == 1 ? d.ny - 1 - y : y;
                const int sz = axis == 2 ? d.nz - 1 - z : z;
                out[std::size_t(voxel_index(d, x, y, z))] =
                    data[std::size_t(voxel_index(d, sx, sy, sz))];
            }
    data = std::move(out);
}

template <typename Store>
void rot90_xy(Store& data, Dims3& d) {
    Dims3 nd{d.ny, d.nx, d.nz};
    Store out(data.size());
    for (int z = 0; z < nd.nz; ++z)
        for (int y = 0; y < nd.ny; ++y)
            for (int x = 0; x < nd.nx; ++x) {
                // out(x, y) = in(y, ny_in - 1 - x) = in(y, nd.nx - 1 - x)
                out[std::size_t(voxel_index(nd, x, y, z))] =
                    data[std::size_t(voxel_index(d, y, nd.nx - 1 - x, z))];
            }
    data = std::move(out);
    d = nd;
}

template <typename GridT, typename Store>
GridT apply_augment_grid(const AugmentDraw& a, const GridT& g, const Store&) {
    GridT out = g;
    Dims3 d = out.dims;
    if (a.flip_x) flip_axis(out.data, d, 0);
    if (a.flip_y) flip_axis(out.data, d, 1);
    if (a.flip_z) flip_axis(out.data, d, 2);
    for (int i = 0; i < a.rot90; ++i) rot90_xy(out.data, d);
    out.dims = d;
    if (a.rot90 % 2 == 1) std::swap(out.spacing.x, out.spacing.y);
    return out;
}

}  // namespace

Volume apply_augment(const AugmentDraw& a, const Volume& v) {
    return apply_augment_grid(a, v, v.data);
}

LabelMap apply_augment(const AugmentDraw& a, const LabelMap& l) {
    return apply_augment_grid(a, l, l.data);
}

TrainSample augment(const TrainSample& s, Rng& rng) {
    const AugmentDraw a = draw_augment(rng);
    TrainSample out;
    out.fixed = apply_augment(a, s.fixed);
    out.moving = apply_augment(a, s.moving);
    if (!s.fixed_labels.data.empty()) out.fixed_labels = apply_augment(a, s.fixed_labels);
    if (!s.moving_labels.data.empty()) out.moving_labels = apply_augment(a, s.moving_labels);
    return out;
}

template <typename T>
TrainState<T>::TrainState(const NetworkConfig& net_cfg, const TrainConfig& cfg)
    : net(net_cfg),
      student(net.init_params()),
      teacher(student),  // teacher starts as a copy at warmup start
      opt(student.total()),
      rng(Rng::split(cfg.seed, "train")) {}

namespace {

template <typename T>
std::vector<T> flatten(const ParamSet<T>& p) {
    std::vector<T> out;
    out.reserve(p.total());
    for (const auto& e : p.entries) out.insert(out.end(), e.w.begin(), e.w.end());
    return out;
}

template <typename T>
void unflatten(const std::vector<T>& flat, ParamSet<T>& p) {
    std::size_t off = 0;
    for (auto& e : p.entries) {
        std::copy(flat.begin() + long(off), flat.begin() + long(off + e.w.size()), e.w.begin());
        off += e.w.size();
    }
}

}  // namespace

template <typename T>
double reflow_step(TrainState<T>& state, const Volume& fixed, const Volume& moving,
                   const DisplacementField& psi1_ref, const DisplacementField& eps, double t,
                   const TrainConfig& cfg) {
    const DisplacementField psi_t = interpolate(psi1_ref, eps, t);
    const DisplacementField psi_hat1 =
        state.net.forward(state.student, fixed, moving, psi_t, t, state.ws);

    const double loss = reg_loss(moving, fixed, psi_hat1, cfg.loss);
    if (!std::isfinite(loss)) {
        throw std::runtime_error("train_step: non-finite loss at epoch " +
                                 std::to_string(state.epoch) + ", t=" + std::to_string(t));
    }

    const DisplacementField d_psi = reg_loss_grad_ddf(moving, fixed, psi_hat1, cfg.loss);
    ParamSet<T> grads = state.student.zeros_like();
    state.net.backward(state.student, state.ws, d_psi, grads);

    std::vector<T> w = flatten(state.student);
    const std::vector<T> g = flatten(grads);
    state.opt.step(std::span<T>(w), std::span<const T>(g), cfg.lr);
    unflatten(w, state.student);

    ema_update(state.teacher, state.student, cfg.ema_mu);
    return loss;
}

template <typename T>
double train_step(TrainState<T>& state, const Volume& fixed, const Volume& moving,
                  const TrainConfig& cfg) {
    cfg.validate();
    const DisplacementField eps = sample_noise_field(fixed.dims, fixed.spacing, state.rng);

    if (state.epoch <= cfg.warmup_epochs) {
        // warmup trains the single-step case only: pure noise, t = 0
        return reflow_step(state, fixed, moving, eps, eps, 0.0, cfg);
    }

    // teacher reference prediction; produced outside any gradient tape
    Workspace<T> teacher_ws;
    const DisplacementField psi1_tea =
        state.net.forward(state.teacher, fixed, moving, eps, 0.0, teacher_ws);
    ++state.teacher_forward_calls;
    const double t = sample_time_logit_normal(state.rng);
    return reflow_step(state, fixed, moving, psi1_tea, eps, t, cfg);
}

template <typename T>
double validation_loss(const Network<T>& net, const ParamSet<T>& params,
                       const std::vector<TrainSample>& val_set,
                       const std::vector<DisplacementField>& val_noise,
                       const LossConfig& loss_cfg) {
    if (val_set.empty()) throw std::invalid_argument("validation_loss: empty validation set");
    Workspace<T> ws;
    double acc = 0.0;
    for (std::size_t i = 0; i < val_set.size(); ++i) {
        const auto& s = val_set[i];
        const DisplacementField psi_hat1 =
            net.forward(params, s.fixed, s.moving, val_noise[i], 0.0, ws);
        acc += reg_loss(s.moving, s.fixed, psi_hat1, loss_cfg);
    }
    return acc / double(val_set.size());
}

std::vector<DisplacementField> make_validation_noise(const std::vector<TrainSample>& val_set,
                                                     std::uint64_t fit_seed) {
    Rng val_rng(Rng::split(fit_seed, "val-noise"));
    std::vector<DisplacementField> val_noise;
    val_noise.reserve(val_set.size());
    for (const auto& s : val_set) {
        val_noise.push_back(sample_noise_field(s.fixed.dims, s.fixed.spacing, val_rng));
    }
    return val_noise;
}

template <typename T>
FitResult<T> fit(const std::vector<TrainSample>& train_set,
                 const std::vector<TrainSample>& val_set, const NetworkConfig& net_cfg,
                 const TrainConfig& cfg, std::vector<EpochLog>* live_log,
                 const ParamSet<T>* resume_from) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("fit: empty training set");
    if (val_set.empty()) throw std::invalid_argument("fit: empty validation set");

    TrainState<T> state(net_cfg, cfg);
    if (resume_from) {
        state.net.check_params(*resume_from);
        state.student = *resume_from;
        state.teacher = state.student;
    }
    Rng data_rng(Rng::split(cfg.seed, "data"));

    // one fixed noise realization per validation case, for comparable losses
    const std::vector<DisplacementField> val_noise = make_validation_noise(val_set, cfg.seed);

    FitResult<T> result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        state.epoch = epoch;

        // Fisher-Yates on the pair order
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[std::size_t(data_rng.uniform_int(int(i)))]);
        }

        double train_acc = 0.0;
        for (std::size_t idx : order) {
            const TrainSample* s = &train_set[idx];
            TrainSample aug_storage;
            if (cfg.augment) {
                aug_storage = augment(*s, data_rng);
                s = &aug_storage;
            }
            train_acc += train_step(state, s->fixed, s->moving, cfg);
        }

        const double val = validation_loss(state.net, state.student, val_set, val_noise, cfg.loss);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        EpochLog log{epoch, train_acc / double(train_set.size()), val, secs};
        result.history.push_back(log);
        if (live_log) live_log->push_back(log);
        result.epochs_run = epoch;

        // best tracking and early stopping start once reflow begins
        if (epoch > cfg.warmup_epochs) {
            if (val < result.best_val_loss) {
                result.best_val_loss = val;
                result.best_epoch = epoch;
                result.student = state.student;
                result.teacher = state.teacher;
                epochs_since_improvement = 0;
            } else {
                ++epochs_since_improvement;
            }
            if (epochs_since_improvement >= cfg.patience) break;
        }
    }

    if (result.best_epoch == 0) {
        // training ended inside warmup; fall back to the final state
        result.student = state.student;
        result.teacher = state.teacher;
        result.best_val_loss = result.history.back().val_loss;
        result.best_epoch = result.epochs_run;
    }
    return result;
}

template void ema_update<float>(ParamSet<float>&, const ParamSet<float>&, double);
template void ema_update<double>(ParamSet<double>&, const ParamSet<double>&, double);
template struct TrainState<float>;
template struct TrainState<double>;
template double train_step<float>(TrainState<float>&, const Volume&, const Volume&,
                                  const TrainConfig&);
template double train_step<double>(TrainState<double>&, const Volume&, const Volume&,
                                   const TrainConfig&);
template double reflow_step<float>(TrainState<float>&, const Volume&, const Volume&,
                                   const DisplacementField&, const DisplacementField&, double,
                                   const TrainConfig&);
template double reflow_step<double>(TrainState<double>&, const Volume&, const Volume&,
                                    const DisplacementField&, const DisplacementField&, double,
                                    const TrainConfig&);
template struct FitResult<float>;
template FitResult<float> fit<float>(const std::vector<TrainSample>&,
                                     const std::vector<TrainSample>&, const NetworkConfig&,
                                     const TrainConfig&, std::vector<EpochLog>*,
                                     const ParamSet<float>*);
template double validation_loss<float>(const Network<float>&, const ParamSet<float>&,
                                       const std::vector<TrainSample>&,
                                       const std::vector<DisplacementField>&, const LossConfig&);

}  // namespace flowreg
