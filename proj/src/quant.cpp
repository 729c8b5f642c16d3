#include "nervq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nervq {

namespace {
constexpr double kZeta = 1.1;
constexpr double kGamma = -0.1;

double sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void check_bits(int bits) {
    if (bits < kMinBits || bits > kMaxBits) {
        throw std::invalid_argument("bitwidth " + std::to_string(bits) + " outside [" + std::to_string(kMinBits) +
                                    "," + std::to_string(kMaxBits) + "]");
    }
}
} // namespace

double rect_sigmoid(double v) {
    return std::clamp(sigmoid(v) * (kZeta - kGamma) + kGamma, 0.0, 1.0);
}

double rect_sigmoid_derivative(double v) {
    const double s = sigmoid(v);
    const double raw = s * (kZeta - kGamma) + kGamma;
    if (raw <= 0.0 || raw >= 1.0) return 0.0;
    return s * (1.0 - s) * (kZeta - kGamma);
}

double rect_sigmoid_inverse(double h) {
    const double p = std::clamp((h - kGamma) / (kZeta - kGamma), 1e-9, 1.0 - 1e-9);
    return std::log(p / (1.0 - p));
}

void TensorQuant::validate(std::size_t weight_count) const {
    check_bits(bits);
    if (channels == 0 || weight_count % channels != 0) {
        throw std::invalid_argument("quant state: channel count " + std::to_string(channels) +
                                    " does not divide weight count " + std::to_string(weight_count));
    }
    if (steps.size() != channels) throw std::invalid_argument("quant state: steps/channel mismatch");
    for (double s : steps) {
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("quant state: steps must be positive finite");
    }
    if (!v.empty() && v.size() != weight_count) {
        throw std::invalid_argument("quant state: rounding variable count mismatch");
    }
}

std::size_t QuantState::rounding_var_count() const {
    std::size_t n = 0;
    for (const auto& [name, q] : tensors) n += q.v.size();
    return n;
}

std::size_t channel_count_for(const Tensor& t, StepGranularity g) {
    if (g == StepGranularity::Layer) return 1;
    return t.channel_count();
}

std::vector<double> init_steps(const Tensor& w, int bits, StepGranularity g) {
    check_bits(bits);
    if (w.size() == 0) throw std::invalid_argument("init_steps: empty tensor");
    const std::size_t channels = channel_count_for(w, g);
    const std::size_t csize = w.size() / channels;
    if (csize == 0) throw std::invalid_argument("init_steps: empty channel");
    const double denom = static_cast<double>((1L << bits) - 1);
    std::vector<double> steps(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double* p = w.data() + c * csize;
        double lo = p[0], hi = p[0];
        for (std::size_t i = 1; i < csize; ++i) {
            lo = std::min(lo, p[i]);
            hi = std::max(hi, p[i]);
        }
        steps[c] = std::max((hi - lo) / denom, kStepFloor);
    }
    return steps;
}

TensorQuant init_tensor_quant(const Tensor& w, int bits, StepGranularity g) {
    TensorQuant q;
    q.bits = bits;
    q.channels = channel_count_for(w, g);
    q.steps = init_steps(w, bits, g);
    reinit_rounding_vars(w, q);
    return q;
}

void reinit_rounding_vars(const Tensor& w, TensorQuant& q) {
    q.v.resize(w.size());
    const std::size_t csize = q.channel_size(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = q.steps[i / csize];
        const double ratio = w[i] / s;
        const double frac = ratio - std::floor(ratio);
        q.v[i] = rect_sigmoid_inverse(std::clamp(frac, 0.01, 0.99));
    }
}

Tensor soft_dequant(const Tensor& w, const TensorQuant& q) {
    q.validate(w.size());
    if (q.v.size() != w.size()) throw std::invalid_argument("soft_dequant: rounding variables not initialized");
    const double lo = static_cast<double>(clip_lo(q.bits));
    const double hi = static_cast<double>(clip_hi(q.bits));
    const std::size_t csize = q.channel_size(w.size());
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = q.steps[i / csize];
        const double u = std::floor(w[i] / s) + rect_sigmoid(q.v[i]);
        out[i] = s * std::clamp(u, lo, hi);
    }
    return out;
}

HardQuant hard_quantize(const Tensor& w, const TensorQuant& q) {
    q.validate(w.size());
    if (q.v.size() != w.size()) throw std::invalid_argument("hard_quantize: rounding variables not initialized");
    const long lo = clip_lo(q.bits), hi = clip_hi(q.bits);
    const std::size_t csize = q.channel_size(w.size());
    HardQuant out;
    out.ints.resize(w.size());
    out.dequant = Tensor(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = q.steps[i / csize];
        const long up = rect_sigmoid(q.v[i]) >= 0.5 ? 1 : 0;
        const long n = std::clamp(static_cast<long>(std::floor(w[i] / s)) + up, lo, hi);
        out.ints[i] = static_cast<std::int32_t>(n);
        out.dequant[i] = s * static_cast<double>(n);
    }
    return out;
}

Tensor nearest_dequant(const Tensor& w, const TensorQuant& q) {
    q.validate(w.size());
    const double lo = static_cast<double>(clip_lo(q.bits));
    const double hi = static_cast<double>(clip_hi(q.bits));
    const std::size_t csize = q.channel_size(w.size());
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = q.steps[i / csize];
        const double ratio = w[i] / s;
        // floor + (frac >= 0.5) keeps ties consistent with hard_quantize
        const double n = std::floor(ratio) + ((ratio - std::floor(ratio)) >= 0.5 ? 1.0 : 0.0);
        out[i] = s * std::clamp(n, lo, hi);
    }
    return out;
}

double rounding_reg(const TensorQuant& q, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("rounding_reg: beta must be > 0");
    double acc = 0.0;
    for (double vi : q.v) {
        acc += 1.0 - std::pow(std::abs(2.0 * rect_sigmoid(vi) - 1.0), beta);
    }
    return acc;
}

double rounding_reg(const QuantState& state, double beta) {
    double acc = 0.0;
    for (const auto& [name, q] : state.tensors) acc += rounding_reg(q, beta);
    return acc;
}

void accumulate_qp_grads(const Tensor& w, const TensorQuant& q, const Tensor& dL_dwt, bool nearest_rounding,
                         std::span<double> ds, std::span<double> dv) {
    if (!dL_dwt.same_shape(w)) throw std::invalid_argument("accumulate_qp_grads: gradient shape mismatch");
    if (ds.size() != q.channels || (!nearest_rounding && dv.size() != w.size())) {
        throw std::invalid_argument("accumulate_qp_grads: output buffer size mismatch");
    }
    const double lo = static_cast<double>(clip_lo(q.bits));
    const double hi = static_cast<double>(clip_hi(q.bits));
    const std::size_t csize = q.channel_size(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const std::size_t c = i / csize;
        const double s = q.steps[c];
        const double ratio = w[i] / s;
        double u;
        if (nearest_rounding) {
            u = std::floor(ratio) + ((ratio - std::floor(ratio)) >= 0.5 ? 1.0 : 0.0);
        } else {
            u = std::floor(ratio) + rect_sigmoid(q.v[i]);
        }
        const bool clipped = u < lo || u > hi;
        const double cval = std::clamp(u, lo, hi);
        ds[c] += dL_dwt[i] * cval;
        if (!nearest_rounding && !clipped) {
            dv[i] += dL_dwt[i] * s * rect_sigmoid_derivative(q.v[i]);
        }
    }
}

Tensor dequantize_ints(std::span<const std::int32_t> ints, std::span<const double> steps,
                       const std::vector<std::size_t>& shape, std::size_t channels) {
    const std::size_t total = shape_product(shape);
    if (ints.size() != total || channels == 0 || total % channels != 0 || steps.size() != channels) {
        throw std::invalid_argument("dequantize_ints: inconsistent arguments");
    }
    const std::size_t csize = total / channels;
    Tensor out(shape);
    for (std::size_t i = 0; i < total; ++i) out[i] = steps[i / csize] * static_cast<double>(ints[i]);
    return out;
}

} // namespace nervq
