#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "flowreg/losses.hpp"
#include "flowreg/network.hpp"
#include "flowreg/optim.hpp"
#include "flowreg/rng.hpp"
#include "flowreg/types.hpp"

namespace flowreg {

struct TrainConfig {
    int epochs = 100;
    int warmup_epochs = 2;
    double lr = 1e-4;
    int batch_size = 1;
    double ema_mu = 0.99;
    int patience = 10;
    bool augment = true;
    LossConfig loss;
    std::uint64_t seed = 0;

    void validate() const;
};

/// One registration training pair; labels ride along for augmentation and
/// evaluation but are never used by the loss.
struct TrainSample {
    Volume fixed;
    Volume moving;
    LabelMap fixed_labels;
    LabelMap moving_labels;
};

/// t = sigmoid(z), z ~ N(0,1); strictly inside (0, 1).
double sample_time_logit_normal(Rng& rng);

/// Per-parameter convex combination teacher <- mu*teacher + (1-mu)*student.
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double mu);

/// A uniformly drawn subset of axis flips plus an in-plane 90-degree
/// rotation count, applied identically to images and labels.
struct AugmentDraw {
    bool flip_x = false, flip_y = false, flip_z = false;
    int rot90 = 0;  // quarter turns in the xy-plane
};
AugmentDraw draw_augment(Rng& rng);
Volume apply_augment(const AugmentDraw& a, const Volume& v);
LabelMap apply_augment(const AugmentDraw& a, const LabelMap& l);
TrainSample augment(const TrainSample& s, Rng& rng);

template <typename T>
struct TrainState {
    Network<T> net;
    ParamSet<T> student;
    ParamSet<T> teacher;
    AdamOpt<T> opt;
    int epoch = 1;  // 1-based; train_step consults it for the warmup branch
    Rng rng;
    std::int64_t teacher_forward_calls = 0;
    Workspace<T> ws;

    TrainState(const NetworkConfig& net_cfg, const TrainConfig& cfg);
};

/// One optimizer step per Algorithm "warmup-reflow": warmup epochs train the
/// single-step case (psi_t = noise, t = 0); reflow epochs interpolate toward
/// a no-gradient teacher prediction at a logit-normal t. Returns the loss.
template <typename T>
double train_step(TrainState<T>& state, const Volume& fixed, const Volume& moving,
                  const TrainConfig& cfg);

/// Reflow update given an externally produced reference field; train_step
/// delegates here, and tests can replay a frozen teacher output through it.
template <typename T>
double reflow_step(TrainState<T>& state, const Volume& fixed, const Volume& moving,
                   const DisplacementField& psi1_ref, const DisplacementField& eps, double t,
                   const TrainConfig& cfg);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

template <typename T>
struct FitResult {
    ParamSet<T> student;       // best-validation checkpoint
    ParamSet<T> teacher;       // teacher at the same epoch
    double best_val_loss = 0.0;
    int best_epoch = 0;
    int epochs_run = 0;
    std::vector<EpochLog> history;
};

/// The per-case fixed noise realizations used for validation, derived from
/// the training seed.
std::vector<DisplacementField> make_validation_noise(const std::vector<TrainSample>& val_set,
                                                     std::uint64_t fit_seed);

/// Full training loop: shuffled pairs, optional augmentation, per-epoch
/// single-step validation loss with a fixed noise realization, best-checkpoint
/// tracking and early stopping (both begin after warmup). When resume_from is
/// given, student and teacher start from those weights with a fresh schedule.
template <typename T>
FitResult<T> fit(const std::vector<TrainSample>& train_set,
                 const std::vector<TrainSample>& val_set, const NetworkConfig& net_cfg,
                 const TrainConfig& cfg, std::vector<EpochLog>* live_log = nullptr,
                 const ParamSet<T>* resume_from = nullptr);

/// Mean single-step validation loss for one parameter set; val noise fields
/// must match positionally.
template <typename T>
double validation_loss(const Network<T>& net, const ParamSet<T>& params,
                       const std::vector<TrainSample>& val_set,
                       const std::vector<DisplacementField>& val_noise, const LossConfig& loss_cfg);

extern template void ema_update<float>(ParamSet<float>&, const ParamSet<float>&, double);
extern template void ema_update<double>(ParamSet<double>&, const ParamSet<double>&, double);
extern template struct TrainState<float>;
extern template struct TrainState<double>;
extern template double train_step<float>(TrainState<float>&, const Volume&, const Volume&,
                                         const TrainConfig&);
extern template double train_step<double>(TrainState<double>&, const Volume&, const Volume&,
                                          const TrainConfig&);
extern template double reflow_step<float>(TrainState<float>&, const Volume&, const Volume&,
                                          const DisplacementField&, const DisplacementField&,
                                          double, const TrainConfig&);
extern template double reflow_step<double>(TrainState<double>&, const Volume&, const Volume&,
                                           const DisplacementField&, const DisplacementField&,
                                           double, const TrainConfig&);
extern template struct FitResult<float>;
extern template FitResult<float> fit<float>(const std::vector<TrainSample>&,
                                            const std::vector<TrainSample>&, const NetworkConfig&,
                                            const TrainConfig&, std::vector<EpochLog>*,
                                            const ParamSet<float>*);
extern template double validation_loss<float>(const Network<float>&, const ParamSet<float>&,
                                              const std::vector<TrainSample>&,
                                              const std::vector<DisplacementField>&,
                                              const LossConfig&);

}  // namespace flowreg
