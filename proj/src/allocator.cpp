#include "nervq/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <thread>

#include "nervq/errors.hpp"

namespace nervq {

std::string BitConfig::to_string() const {
    std::string out;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (i) out += '-';
        out += std::to_string(bits[i]);
    }
    return out;
}

void RateTarget::validate() const {
    if (bits == 0) throw std::invalid_argument("rate target must be > 0 bits");
    if (tolerance < 0.0 || tolerance >= 1.0) throw std::invalid_argument("rate tolerance must be in [0,1)");
}

bool RateTarget::contains(std::uint64_t size) const {
    const double diff = std::abs(static_cast<double>(size) - static_cast<double>(bits));
    return diff <= tolerance * static_cast<double>(bits) + 1e-9;
}

std::uint64_t model_size_bits(std::span<const std::size_t> param_counts, const BitConfig& config) {
    if (param_counts.size() != config.bits.size()) {
        throw std::invalid_argument("model_size_bits: " + std::to_string(param_counts.size()) + " layers vs " +
                                    std::to_string(config.bits.size()) + " bitwidths");
    }
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < param_counts.size(); ++i) {
        acc += static_cast<std::uint64_t>(param_counts[i]) * static_cast<std::uint64_t>(config.bits[i]);
    }
    return acc; // + Param(e) * b_e, structurally zero with positional encoding
}

namespace {

std::vector<int> sorted_candidates(std::span<const int> candidate_bits) {
    if (candidate_bits.empty()) throw std::invalid_argument("enumerate_configs: empty candidate set");
    std::vector<int> bits(candidate_bits.begin(), candidate_bits.end());
    std::sort(bits.begin(), bits.end());
    bits.erase(std::unique(bits.begin(), bits.end()), bits.end());
    for (int b : bits) {
        if (b < kMinBits || b > kMaxBits) {
            throw std::invalid_argument("candidate bitwidth " + std::to_string(b) + " outside [" +
                                        std::to_string(kMinBits) + "," + std::to_string(kMaxBits) + "]");
        }
    }
    return bits;
}

void exhaustive_search(std::span<const std::size_t> counts, const std::vector<int>& bits, const RateTarget& target,
                       std::vector<BitConfig>& out, std::uint64_t& nearest, bool track_nearest_only) {
    const std::size_t n = counts.size();
    std::vector<std::uint64_t> min_tail(n + 1, 0), max_tail(n + 1, 0);
    for (std::size_t i = n; i-- > 0;) {
        min_tail[i] = min_tail[i + 1] + counts[i] * static_cast<std::uint64_t>(bits.front());
        max_tail[i] = max_tail[i + 1] + counts[i] * static_cast<std::uint64_t>(bits.back());
    }
    const double lo = static_cast<double>(target.bits) * (1.0 - target.tolerance) - 1e-9;
    const double hi = static_cast<double>(target.bits) * (1.0 + target.tolerance) + 1e-9;
    std::vector<int> cur(n, 0);
    double nearest_diff = std::numeric_limits<double>::infinity();

    std::function<void(std::size_t, std::uint64_t)> rec = [&](std::size_t layer, std::uint64_t acc) {
        if (layer == n) {
            const double size = static_cast<double>(acc);
            if (track_nearest_only) {
                const double diff = std::abs(size - static_cast<double>(target.bits));
                if (diff < nearest_diff) {
                    nearest_diff = diff;
                    nearest = acc;
                }
            } else if (size >= lo && size <= hi) {
                out.push_back(BitConfig{cur});
            }
            return;
        }
        if (!track_nearest_only) {
            if (static_cast<double>(acc + min_tail[layer]) > hi) return;
            if (static_cast<double>(acc + max_tail[layer]) < lo) return;
        }
        for (int b : bits) {
            cur[layer] = b;
            rec(layer + 1, acc + counts[layer] * static_cast<std::uint64_t>(b));
        }
    };
    rec(0, 0);
}

// Seeded at the uniform bitwidth nearest the target, expands one-layer
// neighbors breadth-first; used when exhaustive enumeration is too large.
std::vector<BitConfig> neighborhood_search(std::span<const std::size_t> counts, const std::vector<int>& bits,
                                           const RateTarget& target, std::size_t cap) {
    std::uint64_t total = 0;
    for (std::size_t c : counts) total += c;
    const double avg = static_cast<double>(target.bits) / static_cast<double>(total);
    int seed_bit = bits.front();
    for (int b : bits) {
        if (std::abs(b - avg) < std::abs(seed_bit - avg)) seed_bit = b;
    }
    std::map<int, std::size_t> bit_index;
    for (std::size_t i = 0; i < bits.size(); ++i) bit_index[bits[i]] = i;

    std::vector<BitConfig> found;
    std::set<std::vector<int>> visited;
    std::vector<std::vector<int>> frontier{std::vector<int>(counts.size(), seed_bit)};
    visited.insert(frontier.front());
    const std::size_t expansion_limit = std::max<std::size_t>(cap * 64, 4096);

    while (!frontier.empty() && visited.size() < expansion_limit && found.size() < cap) {
        std::vector<std::vector<int>> next;
        for (const auto& cfg : frontier) {
            BitConfig bc{cfg};
            if (target.contains(model_size_bits(counts, bc))) found.push_back(bc);
            for (std::size_t l = 0; l < cfg.size(); ++l) {
                const std::size_t idx = bit_index.at(cfg[l]);
                for (int dir : {-1, 1}) {
                    if ((dir < 0 && idx == 0) || (dir > 0 && idx + 1 == bits.size())) continue;
                    std::vector<int> nb = cfg;
                    nb[l] = bits[idx + static_cast<std::size_t>(dir)];
                    if (visited.insert(nb).second) next.push_back(std::move(nb));
                }
            }
        }
        frontier = std::move(next);
    }
    std::sort(found.begin(), found.end(), [](const BitConfig& a, const BitConfig& b) { return a.bits < b.bits; });
    found.erase(std::unique(found.begin(), found.end()), found.end());
    return found;
}

} // namespace

std::vector<BitConfig> enumerate_configs(std::span<const std::size_t> param_counts,
                                         std::span<const int> candidate_bits, const RateTarget& target,
                                         std::size_t cap) {
    target.validate();
    if (cap == 0) throw std::invalid_argument("enumerate_configs: cap must be > 0");
    if (param_counts.empty()) throw std::invalid_argument("enumerate_configs: no layers");
    for (std::size_t c : param_counts) {
        if (c == 0) throw std::invalid_argument("enumerate_configs: zero-parameter layer");
    }
    const std::vector<int> bits = sorted_candidates(candidate_bits);

    std::vector<BitConfig> configs;
    if (param_counts.size() <= 12) {
        std::uint64_t unused = 0;
        exhaustive_search(param_counts, bits, target, configs, unused, false);
    } else {
        configs = neighborhood_search(param_counts, bits, target, cap);
    }

    if (configs.empty()) {
        std::uint64_t total = 0;
        for (std::size_t c : param_counts) total += c;
        const std::uint64_t min_size = total * static_cast<std::uint64_t>(bits.front());
        const std::uint64_t max_size = total * static_cast<std::uint64_t>(bits.back());
        std::ostringstream os;
        os << "infeasible target " << target.bits << " bits (тolerance " << target.tolerance * 100.0
           << "%): achievable range [" << min_size << ", " << max_size << "]";
        if (param_counts.size() <= 12) {
            std::uint64_t nearest = 0;
            std::vector<BitConfig> none;
            exhaustive_search(param_counts, bits, target, none, nearest, true);
            os << ", nearest achievable size " << nearest << " bits";
        } else {
            os << ", nearest uniform sizes:";
            for (int b : bits) os << " b" << b << "=" << total * static_cast<std::uint64_t>(b);
        }
        throw InfeasibleTargetError(os.str());
    }

    if (configs.size() > cap) {
        std::stable_sort(configs.begin(), configs.end(), [&](const BitConfig& a, const BitConfig& b) {
            const double da = std::abs(static_cast<double>(model_size_bits(param_counts, a)) -
                                       static_cast<double>(target.bits));
            const double db = std::abs(static_cast<double>(model_size_bits(param_counts, b)) -
                                       static_cast<double>(target.bits));
            if (da != db) return da < db;
            return a.bits < b.bits;
        });
        configs.resize(cap);
        std::sort(configs.begin(), configs.end(), [](const BitConfig& a, const BitConfig& b) { return a.bits < b.bits; });
    }
    return configs;
}

std::size_t QuantizableLayer::param_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
}

namespace {

std::vector<double> flatten_layers(const std::vector<QuantizableLayer>& layers) {
    std::vector<double> out;
    for (const auto& layer : layers) {
        for (const auto& t : layer.tensors) {
            out.insert(out.end(), t.values.data(), t.values.data() + t.values.size());
        }
    }
    return out;
}

QuantState make_state(const std::vector<QuantizableLayer>& layers, const BitConfig& config, StepGranularity g,
                      double lambda) {
    QuantState state;
    state.granularity = g;
    state.lambda = lambda;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (const auto& t : layers[l].tensors) {
            state.tensors.emplace(t.name, init_tensor_quant(t.values, config.bits[l], g));
        }
    }
    return state;
}

/// MinMax quantization error w~ - w for one config, in flattening order.
std::vector<double> minmax_perturbation(const std::vector<QuantizableLayer>& layers, const BitConfig& config,
                                        StepGranularity g) {
    std::vector<double> dw;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (const auto& t : layers[l].tensors) {
            const TensorQuant q = init_tensor_quant(t.values, config.bits[l], g);
            const HardQuant hq = hard_quantize(t.values, q);
            for (std::size_t i = 0; i < t.values.size(); ++i) dw.push_back(hq.dequant[i] - t.values[i]);
        }
    }
    return dw;
}

} // namespace

AllocationResult allocate_layers(const std::vector<QuantizableLayer>& layers, const LossFactory& loss_factory,
                                 const RateTarget& target, const AllocOptions& opts) {
    if (layers.empty()) throw std::invalid_argument("allocate: no layers");
    std::vector<std::size_t> counts;
    for (const auto& l : layers) counts.push_back(l.param_count());

    const std::vector<BitConfig> configs =
        enumerate_configs(counts, opts.candidate_bits, target, opts.max_candidates);

    const std::vector<double> w = flatten_layers(layers);

    AllocationResult result;
    {
        LossGradFn loss = loss_factory();
        std::vector<double> g(w.size());
        loss(w, g);
        double norm = 0.0;
        for (double x : g) norm += x * x;
        result.grad_norm_fp = std::sqrt(norm);

        // Algorithm-1 variant: gradient at the 8-bit nearest-rounded weights,
        // kept as a diagnostic only.
        BitConfig eight{std::vector<int>(layers.size(), 8)};
        std::vector<double> dw8 = minmax_perturbation(layers, eight, opts.granularity);
        std::vector<double> w0(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) w0[i] = w[i] + dw8[i];
        loss(w0, g);
        norm = 0.0;
        for (double x : g) norm += x * x;
        result.grad_norm_w0 = std::sqrt(norm);

        // first-order diagnostics reuse the full-precision gradient
        loss(w, g);
        result.scored.resize(configs.size());
        for (std::size_t i = 0; i < configs.size(); ++i) {
            result.scored[i].config = configs[i];
            result.scored[i].size_bits = model_size_bits(counts, configs[i]);
            const std::vector<double> dw = minmax_perturbation(layers, configs[i], opts.granularity);
            double dot = 0.0;
            for (std::size_t k = 0; k < dw.size(); ++k) dot += dw[k] * g[k];
            result.scored[i].first_order = dot;
        }
    }

    const int threads = std::max(1, std::min<int>(opts.threads, static_cast<int>(configs.size())));
    auto score_range = [&](std::size_t begin, std::size_t end) {
        LossGradFn loss = loss_factory();
        for (std::size_t i = begin; i < end; ++i) {
            const std::vector<double> dw = minmax_perturbation(layers, configs[i], opts.granularity);
            const double eps = opts.hvp_eps > 0.0 ? opts.hvp_eps : default_hvp_eps(w, dw);
            double om = 0.0;
            bool ok = true;
            try {
                const std::vector<double> hd = hvp(loss, w, dw, eps);
                for (std::size_t k = 0; k < dw.size(); ++k) om += dw[k] * hd[k];
                ok = std::isfinite(om);
            } catch (const std::runtime_error&) {
                ok = false;
            }
            result.scored[i].omega = ok ? om : std::numeric_limits<double>::quiet_NaN();
            result.scored[i].finite = ok;
        }
    };
    if (threads == 1) {
        score_range(0, configs.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (configs.size() + static_cast<std::size_t>(threads) - 1) / static_cast<std::size_t>(threads);
        for (int t = 0; t < threads; ++t) {
            const std::size_t begin = static_cast<std::size_t>(t) * chunk;
            const std::size_t end = std::min(configs.size(), begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(score_range, begin, end);
        }
        for (auto& th : pool) th.join();
    }

    const ScoredCandidate* best = nullptr;
    for (const auto& sc : result.scored) {
        if (!sc.finite) continue;
        if (!best || sc.omega < best->omega || (sc.omega == best->omega && sc.config.bits < best->config.bits)) {
            best = &sc;
        }
    }
    if (!best) throw std::runtime_error("allocate: every candidate produced a non-finite sensitivity score");

    result.config = best->config;
    result.state = make_state(layers, best->config, opts.granularity, /*lambda=*/0.1);
    return result;
}

AllocationResult allocate(const Checkpoint& ckpt, const VideoClip& clip, const RateTarget& target,
                          const AllocOptions& opts) {
    ckpt.validate();
    if (ckpt.meta.epochs <= 0) {
        throw std::invalid_argument("allocate: checkpoint has no training meta; allocate expects converged weights");
    }
    std::vector<QuantizableLayer> layers;
    for (const auto& info : ckpt.layers()) {
        QuantizableLayer l;
        l.name = info.name;
        for (const auto& tn : info.tensors) l.tensors.push_back({tn, ckpt.tensors.at(tn)});
        layers.push_back(std::move(l));
    }
    auto factory = [&ckpt, &clip]() { return make_clip_loss(ckpt, clip); };
    return allocate_layers(layers, factory, target, opts);
}

std::string scored_candidates_csv(const AllocationResult& result) {
    std::ostringstream os;
    os << "config,size_bits,omega\n";
    for (const auto& sc : result.scored) {
        os << sc.config.to_string() << ',' << sc.size_bits << ',';
        if (sc.finite) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.12g", sc.omega);
            os << buf;
        } else {
            os << "nan";
        }
        os << '\n';
    }
    return os.str();
}

} // namespace nervq
