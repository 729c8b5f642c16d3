#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nervq/tensor.hpp"

namespace nervq {

/// Raw video clip: planar u8, frame-major (T * 3 * H * W).
struct VideoClip {
    std::uint32_t frames = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> data;

    void validate() const;
    std::size_t pixels() const { return static_cast<std::size_t>(frames) * height * width; }
    /// Frame t as a [3,H,W] tensor scaled to [0,1].
    Tensor frame(std::uint32_t t) const;
};

VideoClip load_clip(const std::string& path);
void save_clip(const VideoClip& clip, const std::string& path);

/// Index-based INR decoder: positional encoding, a dense stem, cascaded
/// conv3x3 + pixel-shuffle upsampling blocks, conv head with sigmoid output.
struct ModelSpec {
    int posenc_freqs = 8;
    double posenc_base = 1.25;
    std::vector<int> stem_dims;     // dense widths; last must equal seed_c*seed_h*seed_w
    int seed_c = 0;
    int seed_h = 0;
    int seed_w = 0;
    struct Block {
        int channels = 0;           // channels after pixel shuffle
        int upsample = 1;
    };
    std::vector<Block> blocks;
    int frames = 0;                 // temporal extent of the bound clip

    int frame_height() const;
    int frame_width() const;
    int posenc_dim() const { return 2 * posenc_freqs; }
    void validate() const;

    std::string canonical_text() const;
    static ModelSpec from_text(const std::string& text);
    std::uint64_t digest() const;

    static ModelSpec desk_default();
};

using WeightMap = std::map<std::string, Tensor>;

struct TrainingMeta {
    int epochs = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
};

/// A layer groups the tensors quantized at one bitwidth.
struct LayerInfo {
    std::string name;
    std::vector<std::string> tensors;   // "<name>.weight", "<name>.bias"
    std::size_t param_count = 0;
};

struct Checkpoint {
    ModelSpec spec;
    std::vector<std::string> layer_order;
    WeightMap tensors;
    TrainingMeta meta;

    std::size_t total_params() const;
    std::vector<LayerInfo> layers() const;
    /// Tensor names in canonical (layer, weight-then-bias) order.
    std::vector<std::string> tensor_order() const;
    void validate() const;
};

Checkpoint build_model(const ModelSpec& spec, std::uint64_t seed);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Flat view of all parameters in canonical tensor order.
struct FlatLayout {
    struct Entry {
        std::string tensor;
        std::size_t offset = 0;
        std::size_t length = 0;
    };
    std::vector<Entry> entries;
    std::size_t total = 0;

    static FlatLayout of(const Checkpoint& ckpt);
    std::vector<double> flatten(const WeightMap& weights) const;
    WeightMap unflatten(std::span<const double> flat, const WeightMap& shapes_like) const;
    const Entry& find(const std::string& tensor) const;
};

/// Owns the computation graph for one ModelSpec. Not thread-safe; build one
/// runtime per thread for concurrent evaluation.
class ModelRuntime {
public:
    explicit ModelRuntime(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerInfo>& layers() const { return layers_; }

    void set_weights(const WeightMap& weights);
    /// Renders frame t with the weights most recently set.
    Tensor render(int t);
    /// Renders and returns the pre-activation output of the named layer.
    Tensor layer_output(const WeightMap& weights, int t, const std::string& layer);

    /// Mean MSE between rendered frames and clip frames over the given frame
    /// set; accumulates d(loss)/d(tensor) into grads when non-null.
    double loss(const WeightMap& weights, const VideoClip& clip, std::span<const int> frame_ids,
                WeightMap* grads = nullptr);

private:
    ModelSpec spec_;
    Graph graph_;
    int input_id_ = -1;
    int target_id_ = -1;
    int output_id_ = -1;
    int loss_id_ = -1;
    std::map<std::string, int> param_nodes_;
    std::map<std::string, int> layer_out_nodes_;
    std::vector<LayerInfo> layers_;
};

/// Renders one frame of the checkpoint's model (convenience path; builds a
/// runtime per call).
Tensor render(const Checkpoint& ckpt, int t);

/// 10*log10(1 / MSE) for values in [0,1]; identical inputs report the 99 dB cap.
double psnr(const Tensor& a, const Tensor& b);
double psnr_from_mse(double mse);

/// PSNR of the whole rendered clip against the target (joint MSE over frames).
double clip_psnr(const Checkpoint& ckpt, const VideoClip& clip);
double clip_psnr_with_weights(ModelRuntime& rt, const WeightMap& weights, const VideoClip& clip);
double clip_mse_with_weights(ModelRuntime& rt, const WeightMap& weights, const VideoClip& clip);

struct TrainOptions {
    int epochs = 1200;
    double lr = 2e-3;
    int batch = 4;
    std::uint64_t seed = 1;
};

/// Adam + cosine schedule on the full clip. Deterministic for a fixed seed.
Checkpoint train(const Checkpoint& ckpt, const VideoClip& clip, const TrainOptions& opts);

/// Full-clip MSE loss over the flattened weights (expectation = mean over
/// all frames). Each returned callable owns its runtime; clone per thread.
LossGradFn make_clip_loss(const Checkpoint& ckpt, const VideoClip& clip);

} // namespace nervq
