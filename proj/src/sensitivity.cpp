#include "nervq/sensitivity.hpp"

#include <cmath>
#include <stdexcept>

namespace nervq {

double default_hvp_eps(std::span<const double> w, std::span<const double> d) {
    double wmax = 0.0, dmax = 0.0;
    for (double x : w) wmax = std::max(wmax, std::abs(x));
    for (double x : d) dmax = std::max(dmax, std::abs(x));
    return 1e-4 * (1.0 + wmax) / (dmax + 1e-12);
}

std::vector<double> hvp(const LossGradFn& loss_at, std::span<const double> w, std::span<const double> d, double eps) {
    if (w.size() != d.size()) throw std::invalid_argument("hvp: w and d length mismatch");
    if (!(eps > 0.0)) throw std::invalid_argument("hvp: eps must be > 0");
    const std::size_t n = w.size();
    std::vector<double> probe(n), gplus(n), gminus(n);
    for (std::size_t i = 0; i < n; ++i) probe[i] = w[i] + eps * d[i];
    const double lp = loss_at(probe, gplus);
    for (std::size_t i = 0; i < n; ++i) probe[i] = w[i] - eps * d[i];
    const double lm = loss_at(probe, gminus);
    if (!std::isfinite(lp) || !std::isfinite(lm)) throw std::runtime_error("hvp: non-finite loss at probe point");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (gplus[i] - gminus[i]) / (2.0 * eps);
        if (!std::isfinite(out[i])) throw std::runtime_error("hvp: non-finite gradient component");
    }
    return out;
}

OmegaResult omega(const LossGradFn& loss_at, std::span<const double> w, std::span<const double> dw, double eps) {
    if (w.size() != dw.size()) throw std::invalid_argument("omega: w and dw length mismatch");
    OmegaResult r;
    r.eps = eps > 0.0 ? eps : default_hvp_eps(w, dw);

    std::vector<double> g(w.size());
    loss_at(w, g);
    double dot = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        dot += dw[i] * g[i];
        norm += g[i] * g[i];
    }
    r.first_order = dot;
    r.grad_norm = std::sqrt(norm);

    bool all_zero = true;
    for (double x : dw) {
        if (x != 0.0) {
            all_zero = false;
            break;
        }
    }
    if (all_zero) {
        r.omega = 0.0;
        return r;
    }

    const std::vector<double> hd = hvp(loss_at, w, dw, r.eps);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += dw[i] * hd[i];
    r.omega = acc;
    return r;
}

double omega_quadratic_oracle(const std::vector<std::vector<double>>& H, std::span<const double> dw) {
    const std::size_t n = H.size();
    for (const auto& row : H) {
        if (row.size() != n) throw std::invalid_argument("omega_quadratic_oracle: H must be square");
    }
    if (dw.size() != n) throw std::invalid_argument("omega_quadratic_oracle: dimension mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(H[i][j] - H[j][i]) > 1e-9 * std::max(1.0, std::abs(H[i][j]))) {
                throw std::invalid_argument("omega_quadratic_oracle: H must be symmetric");
            }
        }
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += H[i][j] * dw[j];
        acc += dw[i] * row;
    }
    return acc;
}

double fim_diag_proxy(std::span<const double> output_grads, std::span<const double> dz) {
    if (output_grads.size() != dz.size()) throw std::invalid_argument("fim_diag_proxy: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < dz.size(); ++i) acc += output_grads[i] * output_grads[i] * dz[i] * dz[i];
    return acc;
}

} // namespace nervq
