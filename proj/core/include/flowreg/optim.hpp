#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace flowreg {

/// First-order optimizer with moment estimates (beta1=0.9, beta2=0.999,
/// eps=1e-8, no weight decay), operating on a flat parameter view.
template <typename T>
class AdamOpt {
public:
    AdamOpt() = default;
    explicit AdamOpt(std::size_t n) : m_(n, T(0)), v_(n, T(0)) {}

    void step(std::span<T> w, std::span<const T> g, double lr) {
        if (w.size() != m_.size() || g.size() != m_.size()) {
            throw std::invalid_argument("AdamOpt: size mismatch");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, double(t_));
        const double bc2 = 1.0 - std::pow(kBeta2, double(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = double(g[i]);
            const double m = kBeta1 * double(m_[i]) + (1.0 - kBeta1) * gi;
            const double v = kBeta2 * double(v_[i]) + (1.0 - kBeta2) * gi * gi;
            m_[i] = T(m);
            v_[i] = T(v);
            w[i] -= T(lr * (m / bc1) / (std::sqrt(v / bc2) + kEps));
        }
    }

    std::int64_t steps_taken() const { return t_; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    std::vector<T> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace flowreg
