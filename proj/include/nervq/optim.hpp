#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace nervq {

/// Adam with bias correction (beta1=0.9, beta2=0.999).
class Adam {
public:
    explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::size_t size() const { return m_.size(); }

    void step(std::span<double> w, std::span<const double> g, double lr) {
        if (w.size() != m_.size() || g.size() != m_.size()) {
            throw std::invalid_argument("adam: parameter/gradient length mismatch");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }

private:
    std::vector<double> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

/// Cosine annealing from lr0 down to (nearly) zero across total steps.
inline double cosine_lr(double lr0, long step, long total) {
    if (total <= 1) return lr0;
    const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

} // namespace nervq
