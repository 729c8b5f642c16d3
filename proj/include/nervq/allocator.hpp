#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nervq/nervlite.hpp"
#include "nervq/quant.hpp"
#include "nervq/sensitivity.hpp"

namespace nervq {

/// Per-layer bitwidth assignment, aligned with the layer order.
struct BitConfig {
    std::vector<int> bits;

    bool operator==(const BitConfig&) const = default;
    std::string to_string() const; // dash-separated, e.g. "4-5-3"
};

struct RateTarget {
    std::uint64_t bits = 0;
    double tolerance = 0.05;

    void validate() const;
    bool contains(std::uint64_t size) const;
};

/// Sum over layers of param_count * bitwidth (embedding term is structurally
/// zero for positional-encoding models).
std::uint64_t model_size_bits(std::span<const std::size_t> param_counts, const BitConfig& config);

/// All configs whose size lands within the rate window. Exhaustive for up to
/// 12 layers; a monotone neighborhood search seeded at the nearest uniform
/// bitwidth beyond that. Deterministic; deduplicated; at most `cap` configs
/// (closest-to-target kept on overflow). Throws InfeasibleTargetError with
/// the nearest achievable sizes when the window is empty.
std::vector<BitConfig> enumerate_configs(std::span<const std::size_t> param_counts,
                                         std::span<const int> candidate_bits, const RateTarget& target,
                                         std::size_t cap);

struct ScoredCandidate {
    BitConfig config;
    std::uint64_t size_bits = 0;
    double omega = 0.0;
    double first_order = 0.0;
    bool finite = true;
};

struct AllocOptions {
    std::vector<int> candidate_bits = {3, 4, 5, 6, 7, 8};
    std::size_t max_candidates = 256;
    double hvp_eps = 0.0; // <= 0 selects the default probe step per candidate
    StepGranularity granularity = StepGranularity::Channel;
    int threads = 1;
};

struct AllocationResult {
    BitConfig config;
    QuantState state;
    std::vector<ScoredCandidate> scored;
    double grad_norm_fp = 0.0; // ||g|| at the full-precision weights
    double grad_norm_w0 = 0.0; // diagnostic: ||g|| at 8-bit nearest-rounded weights
};

struct QuantizableTensor {
    std::string name;
    Tensor values;
};

struct QuantizableLayer {
    std::string name;
    std::vector<QuantizableTensor> tensors;
    std::size_t param_count() const;
};

/// Each worker thread obtains its own loss instance from the factory, so
/// candidate scoring shares no mutable state.
using LossFactory = std::function<LossGradFn()>;

/// Core bit allocation: enumerate feasible configs, score each with
/// Omega = dw' H dw at the MinMax quantization error, pick the argmin
/// (ties: lexicographically smallest bit vector).
AllocationResult allocate_layers(const std::vector<QuantizableLayer>& layers, const LossFactory& loss_factory,
                                 const RateTarget& target, const AllocOptions& opts);

AllocationResult allocate(const Checkpoint& ckpt, const VideoClip& clip, const RateTarget& target,
                          const AllocOptions& opts = {});

/// CSV report: config,size_bits,omega (header included).
std::string scored_candidates_csv(const AllocationResult& result);

} // namespace nervq
