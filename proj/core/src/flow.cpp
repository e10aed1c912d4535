#include "flowreg/flow.hpp"

#include <cmath>

#include "flowreg/optim.hpp"
#include "flowreg/volume_ops.hpp"

namespace flowreg {

double SamplerConfig::saturating_eta(int steps) {
    return double(steps) * (std::sqrt(2.0) - 1.0);
}

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("SamplerConfig: steps must be >= 1");
    if (eta < 0) throw std::invalid_argument("SamplerConfig: eta must be non-negative");
    if (lambda_g < 0) throw std::invalid_argument("SamplerConfig: lambda_g must be non-negative");
}

DisplacementField interpolate(const DisplacementField& psi1, const DisplacementField& eps,
                              double t) {
    require_same_dims(psi1.dims, eps.dims, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("interpolate: t must be in [0, 1]");
    if (t == 0.0) return eps;
    if (t == 1.0) return psi1;
    DisplacementField out(psi1.dims, psi1.spacing);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = t * psi1.data[i] + (1.0 - t) * eps.data[i];
    }
    return out;
}

DisplacementField velocity(const DisplacementField& psi_hat1, const DisplacementField& psi_t,
                           double t) {
    require_same_dims(psi_hat1.dims, psi_t.dims, "velocity");
    if (!(t < 1.0)) throw std::domain_error("velocity: t must be < 1");
    const double inv = 1.0 / (1.0 - t);
    DisplacementField out(psi_t.dims, psi_t.spacing);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = (psi_hat1.data[i] - psi_t.data[i]) * inv;
    }
    return out;
}

std::pair<double, double> churn_sigma(double t, double eta, int steps) {
    const double sigma = 1.0 - t;
    const double gamma = std::min(eta / double(steps), std::sqrt(2.0) - 1.0);
    return {sigma, sigma * (1.0 + gamma)};
}

void inject_noise(DisplacementField& psi, double sigma, double sigma_hat,
                  const DisplacementField& eps) {
    require_same_dims(psi.dims, eps.dims, "inject_noise");
    if (sigma_hat < sigma) {
        throw std::invalid_argument("inject_noise: sigma_hat must be >= sigma");
    }
    if (sigma_hat == sigma) return;
    const double scale = std::sqrt(sigma_hat * sigma_hat - sigma * sigma);
    for (std::size_t i = 0; i < psi.data.size(); ++i) psi.data[i] += scale * eps.data[i];
}

template <typename T>
DisplacementField guided_forward(const Network<T>& net, const ParamSet<T>& params,
                                 const Volume& fixed, const Volume& moving,
                                 const DisplacementField& psi, double t, double lambda_g,
                                 bool use_guidance, const LossConfig& loss_cfg, Workspace<T>& ws) {
    DisplacementField psi_hat1 = net.forward(params, fixed, moving, psi, t, ws);
    if (use_guidance && lambda_g != 0.0) {
        const DisplacementField g = reg_loss_grad_ddf(moving, fixed, psi_hat1, loss_cfg);
        for (std::size_t i = 0; i < psi_hat1.data.size(); ++i) {
            psi_hat1.data[i] -= lambda_g * g.data[i];
        }
    }
    return psi_hat1;
}

template <typename T>
DisplacementField sample(const Network<T>& net, const ParamSet<T>& params, const Volume& fixed,
                         const Volume& moving, const SamplerConfig& cfg,
                         const LossConfig& loss_cfg) {
    cfg.validate();
    const int n_steps = cfg.steps;
    Rng rng(cfg.seed);
    Workspace<T> ws;

    DisplacementField psi = sample_noise_field(fixed.dims, fixed.spacing, rng);
    const double h = 1.0 / n_steps;

    for (int i = 0; i < n_steps; ++i) {
        const double t = double(i) / n_steps;

        if (cfg.use_sde && i > 0) {
            const auto [sigma, sigma_hat] = churn_sigma(t, cfg.eta, n_steps);
            const DisplacementField churn = sample_noise_field(fixed.dims, fixed.spacing, rng);
            inject_noise(psi, sigma, sigma_hat, churn);
        }

        const DisplacementField psi_hat1 = guided_forward(net, params, fixed, moving, psi, t,
                                                          cfg.lambda_g, cfg.use_guidance,
                                                          loss_cfg, ws);

        if (cfg.use_ig && i == 0) {
            psi = psi_hat1;
            continue;
        }

        DisplacementField v1 = velocity(psi_hat1, psi, t);
        if (cfg.use_heun && i < n_steps - 1) {
            const double t_next = double(i + 1) / n_steps;
            DisplacementField psi_mid = psi;
            for (std::size_t k = 0; k < psi_mid.data.size(); ++k) {
                psi_mid.data[k] += h * v1.data[k];
            }
            const DisplacementField mid_hat1 = guided_forward(net, params, fixed, moving, psi_mid,
                                                              t_next, cfg.lambda_g,
                                                              cfg.use_guidance, loss_cfg, ws);
            const DisplacementField v2 = velocity(mid_hat1, psi_mid, t_next);
            for (std::size_t k = 0; k < v1.data.size(); ++k) {
                v1.data[k] = 0.5 * (v1.data[k] + v2.data[k]);
            }
            for (std::size_t k = 0; k < psi.data.size(); ++k) psi.data[k] += h * v1.data[k];
        } else {
            // Euler step written as psi + (h/(1-t)) (psi_hat1 - psi); the
            // ratio is exactly 1 at the final step, where the update lands on
            // the prediction itself.
            const double alpha = 1.0 / double(n_steps - i);
            if (alpha == 1.0) {
                psi = psi_hat1;
            } else {
                for (std::size_t k = 0; k < psi.data.size(); ++k) {
                    psi.data[k] += alpha * (psi_hat1.data[k] - psi.data[k]);
                }
            }
        }
    }
    return psi;
}

DisplacementField instance_optimise(const Volume& fixed, const Volume& moving,
                                    const DisplacementField& ddf0, int steps, double lr,
                                    const LossConfig& loss_cfg) {
    if (steps < 0) throw std::invalid_argument("instance_optimise: steps must be >= 0");
    DisplacementField ddf = ddf0;
    if (steps == 0 || lr == 0.0) return ddf;
    AdamOpt<double> opt(ddf.data.size());
    for (int it = 0; it < steps; ++it) {
        const DisplacementField g = reg_loss_grad_ddf(moving, fixed, ddf, loss_cfg);
        opt.step(std::span<double>(ddf.data), std::span<const double>(g.data), lr);
    }
    return ddf;
}

template DisplacementField guided_forward<float>(const Network<float>&, const ParamSet<float>&,
                                                 const Volume&, const Volume&,
                                                 const DisplacementField&, double, double, bool,
                                                 const LossConfig&, Workspace<float>&);
template DisplacementField guided_forward<double>(const Network<double>&, const ParamSet<double>&,
                                                  const Volume&, const Volume&,
                                                  const DisplacementField&, double, double, bool,
                                                  const LossConfig&, Workspace<double>&);
template DisplacementField sample<float>(const Network<float>&, const ParamSet<float>&,
                                         const Volume&, const Volume&, const SamplerConfig&,
                                         const LossConfig&);
template DisplacementField sample<double>(const Network<double>&, const ParamSet<double>&,
                                          const Volume&, const Volume&, const SamplerConfig&,
                                          const LossConfig&);

}  // namespace flowreg
