#pragma once

#include <cstdint>
#include <utility>

#include "flowreg/losses.hpp"
#include "flowreg/network.hpp"
#include "flowreg/types.hpp"

namespace flowreg {

struct SamplerConfig {
    int steps = 10;
    double eta = saturating_eta(10);  // churn saturates by default
    double lambda_g = 0.05;
    bool use_sde = true;
    bool use_heun = true;
    bool use_ig = true;
    bool use_guidance = true;
    std::uint64_t seed = 0;

    /// Smallest eta for which min(eta/N, sqrt(2)-1) saturates.
    static double saturating_eta(int steps);
    void validate() const;
};

/// psi_t = t * psi1 + (1 - t) * eps, componentwise.
DisplacementField interpolate(const DisplacementField& psi1, const DisplacementField& eps,
                              double t);

/// v = (psi_hat1 - psi_t) / (1 - t); t must be < 1.
DisplacementField velocity(const DisplacementField& psi_hat1, const DisplacementField& psi_t,
                           double t);

/// sigma = 1 - t and sigma_hat = sigma * (1 + min(eta/N, sqrt(2) - 1)).
std::pair<double, double> churn_sigma(double t, double eta, int steps);

/// psi += sqrt(sigma_hat^2 - sigma^2) * eps; a no-op when sigma_hat == sigma.
void inject_noise(DisplacementField& psi, double sigma, double sigma_hat,
                  const DisplacementField& eps);

/// Network prediction followed (when enabled) by one guidance step of size
/// lambda_g on the registration loss with respect to the prediction itself.
template <typename T>
DisplacementField guided_forward(const Network<T>& net, const ParamSet<T>& params,
                                 const Volume& fixed, const Volume& moving,
                                 const DisplacementField& psi, double t, double lambda_g,
                                 bool use_guidance, const LossConfig& loss_cfg, Workspace<T>& ws);

/// Full multi-step sampler: spacing-scaled noise start, optional SDE churn,
/// Heun's second-order correction, Initial Guess replacement after step one,
/// and per-step guidance. Deterministic given cfg.seed.
template <typename T>
DisplacementField sample(const Network<T>& net, const ParamSet<T>& params, const Volume& fixed,
                         const Volume& moving, const SamplerConfig& cfg,
                         const LossConfig& loss_cfg);

/// Test-time descent with moment estimates directly on the displacement
/// components, minimizing reg_loss from ddf0.
DisplacementField instance_optimise(const Volume& fixed, const Volume& moving,
                                    const DisplacementField& ddf0, int steps, double lr,
                                    const LossConfig& loss_cfg);

extern template DisplacementField guided_forward<float>(const Network<float>&,
                                                        const ParamSet<float>&, const Volume&,
                                                        const Volume&, const DisplacementField&,
                                                        double, double, bool, const LossConfig&,
                                                        Workspace<float>&);
extern template DisplacementField guided_forward<double>(const Network<double>&,
                                                         const ParamSet<double>&, const Volume&,
                                                         const Volume&, const DisplacementField&,
                                                         double, double, bool, const LossConfig&,
                                                         Workspace<double>&);
extern template DisplacementField sample<float>(const Network<float>&, const ParamSet<float>&,
                                                const Volume&, const Volume&, const SamplerConfig&,
                                                const LossConfig&);
extern template DisplacementField sample<double>(const Network<double>&, const ParamSet<double>&,
                                                 const Volume&, const Volume&,
                                                 const SamplerConfig&, const LossConfig&);

}  // namespace flowreg
