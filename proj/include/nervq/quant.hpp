#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nervq/tensor.hpp"

namespace nervq {

/// One step per output channel, or one step per tensor.
enum class StepGranularity { Channel, Layer };

constexpr int kMinBits = 2;
constexpr int kMaxBits = 8;
constexpr double kStepFloor = 1e-8;

/// Rectified sigmoid h(v) = clamp(sigmoid(v)*(zeta-gamma)+gamma, 0, 1) with
/// zeta=1.1, gamma=-0.1; reaches exactly 0 and 1 at finite v.
double rect_sigmoid(double v);
double rect_sigmoid_derivative(double v);
/// Inverse on the open interior; input is clamped into (gamma, zeta).
double rect_sigmoid_inverse(double h);

inline long clip_lo(int bits) { return -(1L << (bits - 1)); }
inline long clip_hi(int bits) { return (1L << (bits - 1)) - 1; }

/// Quantizer state for one tensor: bitwidth, per-channel steps, per-weight
/// soft rounding variables.
struct TensorQuant {
    int bits = 8;
    std::size_t channels = 1;
    std::vector<double> steps;
    std::vector<double> v;

    std::size_t channel_size(std::size_t total) const { return total / channels; }
    void validate(std::size_t weight_count) const;
};

struct QuantState {
    std::map<std::string, TensorQuant> tensors;
    double lambda = 0.1;
    double beta = 20.0;
    StepGranularity granularity = StepGranularity::Channel;

    std::size_t rounding_var_count() const;
};

std::size_t channel_count_for(const Tensor& t, StepGranularity g);

/// MinMax step per channel: (max - min) / (2^b - 1), floored at 1e-8 for
/// constant channels.
std::vector<double> init_steps(const Tensor& w, int bits, StepGranularity g = StepGranularity::Channel);

/// Steps from init_steps plus V such that h(v) equals the fractional part of
/// w/s clamped to (0.01, 0.99): binarizing reproduces nearest rounding.
TensorQuant init_tensor_quant(const Tensor& w, int bits, StepGranularity g = StepGranularity::Channel);

/// Re-derives V for the current steps (used after step calibration).
void reinit_rounding_vars(const Tensor& w, TensorQuant& q);

/// w~ = s * clip(floor(w/s) + h(v), -2^(b-1), 2^(b-1)-1).
Tensor soft_dequant(const Tensor& w, const TensorQuant& q);

struct HardQuant {
    std::vector<std::int32_t> ints;
    Tensor dequant;
};

/// Binarizes h (>= 0.5 rounds up) and quantizes to integers in the clip range.
HardQuant hard_quantize(const Tensor& w, const TensorQuant& q);

/// Round-to-nearest at the current steps, ignoring V (MinMax PTQ forward).
Tensor nearest_dequant(const Tensor& w, const TensorQuant& q);

/// Sum over elements of 1 - |2 h(v) - 1|^beta.
double rounding_reg(const TensorQuant& q, double beta);
double rounding_reg(const QuantState& state, double beta);

/// Chain rule from dL/dw~ into the quantizer parameters. `nearest_rounding`
/// selects the phase-1 forward (hard nearest, no V term). The floor term is
/// treated as constant w.r.t. s (straight-through).
void accumulate_qp_grads(const Tensor& w, const TensorQuant& q, const Tensor& dL_dwt, bool nearest_rounding,
                         std::span<double> ds, std::span<double> dv);

/// Dequantize integers with explicit steps (decoder side).
Tensor dequantize_ints(std::span<const std::int32_t> ints, std::span<const double> steps,
                       const std::vector<std::size_t>& shape, std::size_t channels);

} // namespace nervq
