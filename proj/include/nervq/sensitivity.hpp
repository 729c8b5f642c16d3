#pragma once

#include <span>
#include <vector>

#include "nervq/tensor.hpp"

namespace nervq {

/// Probe step for central-difference Hessian-vector products:
/// 1e-4 * (1 + ||w||_inf) / (||d||_inf + 1e-12).
double default_hvp_eps(std::span<const double> w, std::span<const double> d);

/// H*d estimated as (g(w + eps*d) - g(w - eps*d)) / (2 eps).
std::vector<double> hvp(const LossGradFn& loss_at, std::span<const double> w, std::span<const double> d, double eps);

struct OmegaResult {
    double omega = 0.0;        // dw' H dw
    double first_order = 0.0;  // dw' g, reported but not part of the criterion
    double grad_norm = 0.0;    // ||g(w)||_2
    double eps = 0.0;
};

/// Sensitivity criterion Omega = dw' * hvp(w, dw). Pass eps <= 0 to use the
/// default probe step.
OmegaResult omega(const LossGradFn& loss_at, std::span<const double> w, std::span<const double> dw, double eps = 0.0);

/// Exact dense dw' H dw; test oracle for quadratic losses. H must be square
/// and symmetric.
double omega_quadratic_oracle(const std::vector<std::vector<double>>& H, std::span<const double> dw);

/// Diagonal-FIM calibration proxy: sum_i (dL/dz_i)^2 * dz_i^2.
double fim_diag_proxy(std::span<const double> output_grads, std::span<const double> dz);

} // namespace nervq
