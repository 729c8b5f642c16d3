#include "nervq/nervlite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "nervq/bytes.hpp"
#include "nervq/optim.hpp"
#include "nervq/rng.hpp"

namespace nervq {

// ---------------------------------------------------------------------------
// VideoClip
// ---------------------------------------------------------------------------

void VideoClip::validate() const {
    if (frames < 2) throw std::invalid_argument("clip must have at least 2 frames, got " + std::to_string(frames));
    if (height == 0 || width == 0) throw std::invalid_argument("clip dims must be positive");
    const std::size_t expect = static_cast<std::size_t>(frames) * 3 * height * width;
    if (data.size() != expect) {
        throw std::invalid_argument("clip payload length " + std::to_string(data.size()) + " != T*3*H*W = " +
                                    std::to_string(expect));
    }
}

Tensor VideoClip::frame(std::uint32_t t) const {
    if (t >= frames) throw std::invalid_argument("frame index " + std::to_string(t) + " out of range [0," +
                                                 std::to_string(frames) + ")");
    const std::size_t plane = static_cast<std::size_t>(3) * height * width;
    Tensor out({3, height, width});
    const std::uint8_t* src = data.data() + static_cast<std::size_t>(t) * plane;
    for (std::size_t i = 0; i < plane; ++i) out[i] = static_cast<double>(src[i]) / 255.0;
    return out;
}

static constexpr char kClipMagic[8] = {'N', 'Q', 'V', 'C', 'L', 'I', 'P', '1'};
static constexpr std::uint32_t kClipVersion = 1;

void save_clip(const VideoClip& clip, const std::string& path) {
    clip.validate();
    std::vector<std::uint8_t> out;
    out.reserve(28 + clip.data.size());
    out.insert(out.end(), kClipMagic, kClipMagic + 8);
    put_u32le(out, kClipVersion);
    put_u32le(out, 0); // reserved
    put_u32le(out, clip.frames);
    put_u32le(out, clip.height);
    put_u32le(out, clip.width);
    put_bytes(out, clip.data);
    write_file_bytes(path, out);
}

VideoClip load_clip(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes);
    const auto magic = r.take(8);
    if (!std::equal(magic.begin(), magic.end(), kClipMagic)) {
        throw StreamCorruptError("not a clip file: bad magic in " + path);
    }
    const std::uint32_t version = r.u32le();
    if (version != kClipVersion) {
        throw VersionMismatchError("clip version " + std::to_string(version) + " unsupported (expect " +
                                   std::to_string(kClipVersion) + ")");
    }
    r.u32le(); // reserved
    VideoClip clip;
    clip.frames = r.u32le();
    clip.height = r.u32le();
    clip.width = r.u32le();
    const std::size_t expect = static_cast<std::size_t>(clip.frames) * 3 * clip.height * clip.width;
    const auto payload = r.take(expect);
    clip.data.assign(payload.begin(), payload.end());
    clip.validate();
    return clip;
}

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

int ModelSpec::frame_height() const {
    int h = seed_h;
    for (const Block& b : blocks) h *= b.upsample;
    return h;
}

int ModelSpec::frame_width() const {
    int w = seed_w;
    for (const Block& b : blocks) w *= b.upsample;
    return w;
}

void ModelSpec::validate() const {
    if (posenc_freqs < 1) throw std::invalid_argument("spec: posenc_freqs must be >= 1");
    if (!(posenc_base > 1.0)) throw std::invalid_argument("spec: posenc_base must be > 1");
    if (stem_dims.empty()) throw std::invalid_argument("spec: stem_dims must be non-empty");
    for (int d : stem_dims) {
        if (d < 1) throw std::invalid_argument("spec: stem widths must be >= 1");
    }
    if (seed_c < 1 || seed_h < 1 || seed_w < 1) throw std::invalid_argument("spec: seed shape must be positive");
    const long seed_total = static_cast<long>(seed_c) * seed_h * seed_w;
    if (stem_dims.back() != seed_total) {
        throw std::invalid_argument("spec: last stem width " + std::to_string(stem_dims.back()) +
                                    " must equal seed c*h*w = " + std::to_string(seed_total));
    }
    if (blocks.empty()) throw std::invalid_argument("spec: at least one upsampling block required");
    for (const Block& b : blocks) {
        if (b.channels < 1) throw std::invalid_argument("spec: block channels must be >= 1");
        if (b.upsample < 1) throw std::invalid_argument("spec: block upsample must be >= 1");
    }
    if (frames < 2) throw std::invalid_argument("spec: frames must be >= 2");
}

static std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string ModelSpec::canonical_text() const {
    std::ostringstream os;
    os << "posenc_freqs=" << posenc_freqs << '\n';
    os << "posenc_base=" << fmt_double(posenc_base) << '\n';
    os << "stem_dims=";
    for (std::size_t i = 0; i < stem_dims.size(); ++i) os << (i ? "," : "") << stem_dims[i];
    os << '\n';
    os << "seed=" << seed_c << ',' << seed_h << ',' << seed_w << '\n';
    os << "blocks=";
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        os << (i ? "," : "") << blocks[i].channels << 'x' << blocks[i].upsample;
    }
    os << '\n';
    os << "frames=" << frames << '\n';
    return os.str();
}

static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

ModelSpec ModelSpec::from_text(const std::string& text) {
    ModelSpec spec;
    spec.stem_dims.clear();
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("spec text: missing '=' in line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "posenc_freqs") {
            spec.posenc_freqs = std::stoi(val);
        } else if (key == "posenc_base") {
            spec.posenc_base = std::stod(val);
        } else if (key == "stem_dims") {
            spec.stem_dims.clear();
            for (const auto& p : split(val, ',')) spec.stem_dims.push_back(std::stoi(p));
        } else if (key == "seed") {
            const auto p = split(val, ',');
            if (p.size() != 3) throw std::invalid_argument("spec text: seed needs c,h,w");
            spec.seed_c = std::stoi(p[0]);
            spec.seed_h = std::stoi(p[1]);
            spec.seed_w = std::stoi(p[2]);
        } else if (key == "blocks") {
            spec.blocks.clear();
            for (const auto& p : split(val, ',')) {
                const auto x = p.find('x');
                if (x == std::string::npos) throw std::invalid_argument("spec text: block needs CxR: " + p);
                Block b;
                b.channels = std::stoi(p.substr(0, x));
                b.upsample = std::stoi(p.substr(x + 1));
                spec.blocks.push_back(b);
            }
        } else if (key == "frames") {
            spec.frames = std::stoi(val);
        } else {
            throw std::invalid_argument("spec text: unknown key '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

std::uint64_t ModelSpec::digest() const {
    const std::string text = canonical_text();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

ModelSpec ModelSpec::desk_default() {
    ModelSpec spec;
    spec.posenc_freqs = 8;
    spec.posenc_base = 1.25;
    spec.stem_dims = {48, 128};
    spec.seed_c = 8;
    spec.seed_h = 4;
    spec.seed_w = 4;
    spec.blocks = {{16, 2}, {12, 2}};
    spec.frames = 8;
    return spec;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct TensorShapeSpec {
    std::string layer;
    std::string tensor;
    std::vector<std::size_t> shape;
};

static std::vector<TensorShapeSpec> tensor_shapes_of(const ModelSpec& spec) {
    std::vector<TensorShapeSpec> out;
    auto add = [&](const std::string& layer, std::vector<std::size_t> wshape, std::size_t bias_len) {
        out.push_back({layer, layer + ".weight", std::move(wshape)});
        out.push_back({layer, layer + ".bias", {bias_len}});
    };
    std::size_t prev = static_cast<std::size_t>(spec.posenc_dim());
    for (std::size_t i = 0; i < spec.stem_dims.size(); ++i) {
        const std::size_t width = static_cast<std::size_t>(spec.stem_dims[i]);
        add("stem" + std::to_string(i), {width, prev}, width);
        prev = width;
    }
    std::size_t cur_c = static_cast<std::size_t>(spec.seed_c);
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const auto& blk = spec.blocks[i];
        const std::size_t conv_out =
            static_cast<std::size_t>(blk.channels) * static_cast<std::size_t>(blk.upsample) * static_cast<std::size_t>(blk.upsample);
        add("block" + std::to_string(i), {conv_out, cur_c, 3, 3}, conv_out);
        cur_c = static_cast<std::size_t>(blk.channels);
    }
    add("head", {3, cur_c, 3, 3}, 3);
    return out;
}

std::size_t Checkpoint::total_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
}

std::vector<LayerInfo> Checkpoint::layers() const {
    std::vector<LayerInfo> out;
    for (const std::string& layer : layer_order) {
        LayerInfo info;
        info.name = layer;
        for (const char* suffix : {".weight", ".bias"}) {
            const std::string tn = layer + suffix;
            auto it = tensors.find(tn);
            if (it != tensors.end()) {
                info.tensors.push_back(tn);
                info.param_count += it->second.size();
            }
        }
        out.push_back(std::move(info));
    }
    return out;
}

std::vector<std::string> Checkpoint::tensor_order() const {
    std::vector<std::string> out;
    for (const auto& layer : layers()) {
        for (const auto& tn : layer.tensors) out.push_back(tn);
    }
    return out;
}

void Checkpoint::validate() const {
    spec.validate();
    const auto expected = tensor_shapes_of(spec);
    if (tensors.size() != expected.size()) {
        throw std::invalid_argument("checkpoint: tensor count " + std::to_string(tensors.size()) + " != expected " +
                                    std::to_string(expected.size()));
    }
    std::vector<std::string> expected_layers;
    for (const auto& ts : expected) {
        auto it = tensors.find(ts.tensor);
        if (it == tensors.end()) throw std::invalid_argument("checkpoint: missing tensor " + ts.tensor);
        if (it->second.shape() != ts.shape) {
            throw std::invalid_argument("checkpoint: tensor " + ts.tensor + " shape " +
                                        shape_to_string(it->second.shape()) + " != spec " + shape_to_string(ts.shape));
        }
        if (expected_layers.empty() || expected_layers.back() != ts.layer) expected_layers.push_back(ts.layer);
    }
    if (layer_order != expected_layers) throw std::invalid_argument("checkpoint: layer order inconsistent with spec");
}

Checkpoint build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Checkpoint ckpt;
    ckpt.spec = spec;
    ckpt.meta.seed = seed;
    Rng rng(seed);
    for (const auto& ts : tensor_shapes_of(spec)) {
        if (ckpt.layer_order.empty() || ckpt.layer_order.back() != ts.layer) ckpt.layer_order.push_back(ts.layer);
        Tensor t(ts.shape);
        // fan-in: dense rows are [out,in]; conv kernels are [co,ci,3,3]
        double fan_in = 1.0;
        if (ts.shape.size() == 2) {
            fan_in = static_cast<double>(ts.shape[1]);
        } else if (ts.shape.size() == 4) {
            fan_in = static_cast<double>(ts.shape[1] * ts.shape[2] * ts.shape[3]);
        } else {
            // bias: reuse the matching weight's fan-in
            const auto& w = ckpt.tensors.at(ts.layer + ".weight");
            fan_in = w.ndim() == 2 ? static_cast<double>(w.shape()[1])
                                   : static_cast<double>(w.shape()[1] * w.shape()[2] * w.shape()[3]);
        }
        const double bound = std::sqrt(1.0 / fan_in);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
        ckpt.tensors.emplace(ts.tensor, std::move(t));
    }
    ckpt.validate();
    return ckpt;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

static constexpr char kCkptMagic[8] = {'N', 'Q', 'C', 'K', 'P', 'T', '0', '1'};
static constexpr std::uint32_t kCkptVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.validate();
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kCkptMagic, kCkptMagic + 8);
    put_u32le(out, kCkptVersion);
    put_string(out, ckpt.spec.canonical_text());
    put_u32le(out, static_cast<std::uint32_t>(ckpt.meta.epochs));
    put_f64le(out, ckpt.meta.final_loss);
    put_u64le(out, ckpt.meta.seed);
    const auto order = ckpt.tensor_order();
    put_u32le(out, static_cast<std::uint32_t>(order.size()));
    for (const auto& name : order) {
        const Tensor& t = ckpt.tensors.at(name);
        put_string(out, name);
        put_u32le(out, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d : t.shape()) put_u32le(out, static_cast<std::uint32_t>(d));
        std::vector<std::uint8_t> payload;
        payload.reserve(t.size() * 8);
        for (std::size_t i = 0; i < t.size(); ++i) put_f64le(payload, t[i]);
        put_u32le(out, crc32(payload));
        put_bytes(out, payload);
    }
    write_file_bytes(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes);
    const auto magic = r.take(8);
    if (!std::equal(magic.begin(), magic.end(), kCkptMagic)) {
        throw StreamCorruptError("not a checkpoint file: bad magic in " + path);
    }
    const std::uint32_t version = r.u32le();
    if (version != kCkptVersion) {
        throw VersionMismatchError("checkpoint version " + std::to_string(version) + " unsupported");
    }
    Checkpoint ckpt;
    ckpt.spec = ModelSpec::from_text(r.string());
    ckpt.meta.epochs = static_cast<int>(r.u32le());
    ckpt.meta.final_loss = r.f64le();
    ckpt.meta.seed = r.u64le();
    const std::uint32_t n_tensors = r.u32le();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.string();
        const std::uint32_t ndim = r.u32le();
        std::vector<std::size_t> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.u32le());
        const std::uint32_t stored_crc = r.u32le();
        const std::size_t count = shape_product(shape);
        const auto payload = r.take(count * 8);
        if (crc32(payload) != stored_crc) {
            throw ChecksumError("checkpoint tensor " + name + ": payload checksum mismatch");
        }
        ByteReader pr(payload);
        std::vector<double> data(count);
        for (std::size_t k = 0; k < count; ++k) data[k] = pr.f64le();
        ckpt.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
        const auto dot = name.rfind('.');
        const std::string layer = dot == std::string::npos ? name : name.substr(0, dot);
        if (ckpt.layer_order.empty() || ckpt.layer_order.back() != layer) ckpt.layer_order.push_back(layer);
    }
    ckpt.validate();
    return ckpt;
}

// ---------------------------------------------------------------------------
// FlatLayout
// ---------------------------------------------------------------------------

FlatLayout FlatLayout::of(const Checkpoint& ckpt) {
    FlatLayout layout;
    std::size_t offset = 0;
    for (const auto& name : ckpt.tensor_order()) {
        const std::size_t len = ckpt.tensors.at(name).size();
        layout.entries.push_back({name, offset, len});
        offset += len;
    }
    layout.total = offset;
    return layout;
}

std::vector<double> FlatLayout::flatten(const WeightMap& weights) const {
    std::vector<double> out(total, 0.0);
    for (const auto& e : entries) {
        const Tensor& t = weights.at(e.tensor);
        if (t.size() != e.length) throw std::invalid_argument("flatten: length mismatch for " + e.tensor);
        std::copy(t.data(), t.data() + t.size(), out.begin() + static_cast<std::ptrdiff_t>(e.offset));
    }
    return out;
}

WeightMap FlatLayout::unflatten(std::span<const double> flat, const WeightMap& shapes_like) const {
    if (flat.size() != total) throw std::invalid_argument("unflatten: flat length mismatch");
    WeightMap out;
    for (const auto& e : entries) {
        const Tensor& like = shapes_like.at(e.tensor);
        std::vector<double> data(flat.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                 flat.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length));
        out.emplace(e.tensor, Tensor(like.shape(), std::move(data)));
    }
    return out;
}

const FlatLayout::Entry& FlatLayout::find(const std::string& tensor) const {
    for (const auto& e : entries) {
        if (e.tensor == tensor) return e;
    }
    throw std::invalid_argument("flat layout: unknown tensor " + tensor);
}

// ---------------------------------------------------------------------------
// ModelRuntime
// ---------------------------------------------------------------------------

ModelRuntime::ModelRuntime(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    input_id_ = graph_.add_input({1}, "t");
    int cur = graph_.add_positional_encoding(input_id_, {spec_.posenc_freqs, spec_.posenc_base});

    const auto shapes = tensor_shapes_of(spec_);
    auto param = [&](const std::string& tensor) {
        for (const auto& ts : shapes) {
            if (ts.tensor == tensor) {
                const int id = graph_.add_parameter(tensor, Tensor(ts.shape));
                param_nodes_[tensor] = id;
                return id;
            }
        }
        throw std::logic_error("unknown tensor " + tensor);
    };

    for (std::size_t i = 0; i < spec_.stem_dims.size(); ++i) {
        const std::string layer = "stem" + std::to_string(i);
        const int w = param(layer + ".weight");
        const int b = param(layer + ".bias");
        cur = graph_.add_dense(w, cur, b);
        layer_out_nodes_[layer] = cur;
        cur = graph_.add_activation(cur, Act::Gelu);
    }
    cur = graph_.add_reshape(cur, {static_cast<std::size_t>(spec_.seed_c), static_cast<std::size_t>(spec_.seed_h),
                                   static_cast<std::size_t>(spec_.seed_w)});
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
        const std::string layer = "block" + std::to_string(i);
        const int w = param(layer + ".weight");
        const int b = param(layer + ".bias");
        cur = graph_.add_conv3x3(w, cur, b);
        layer_out_nodes_[layer] = cur;
        cur = graph_.add_pixel_shuffle(cur, spec_.blocks[i].upsample);
        cur = graph_.add_activation(cur, Act::Gelu);
    }
    const int hw = param("head.weight");
    const int hb = param("head.bias");
    cur = graph_.add_conv3x3(hw, cur, hb);
    layer_out_nodes_["head"] = cur;
    output_id_ = graph_.add_activation(cur, Act::Sigmoid);

    target_id_ = graph_.add_input({3, static_cast<std::size_t>(spec_.frame_height()),
                                   static_cast<std::size_t>(spec_.frame_width())},
                                  "target");
    loss_id_ = graph_.add_mse_loss(output_id_, target_id_);

    for (const auto& ts : shapes) {
        if (layers_.empty() || layers_.back().name != ts.layer) layers_.push_back({ts.layer, {}, 0});
        layers_.back().tensors.push_back(ts.tensor);
        layers_.back().param_count += shape_product(ts.shape);
    }
}

void ModelRuntime::set_weights(const WeightMap& weights) {
    for (const auto& [name, id] : param_nodes_) {
        auto it = weights.find(name);
        if (it == weights.end()) throw std::invalid_argument("set_weights: missing tensor " + name);
        graph_.set_parameter(id, it->second);
    }
}

Tensor ModelRuntime::render(int t) {
    if (t < 0 || t >= spec_.frames) {
        throw std::invalid_argument("render: frame index " + std::to_string(t) + " out of range [0," +
                                    std::to_string(spec_.frames) + ")");
    }
    const double tau = static_cast<double>(t) / static_cast<double>(spec_.frames - 1);
    graph_.bind(input_id_, Tensor::scalar(tau));
    return graph_.forward(output_id_);
}

Tensor ModelRuntime::layer_output(const WeightMap& weights, int t, const std::string& layer) {
    auto it = layer_out_nodes_.find(layer);
    if (it == layer_out_nodes_.end()) throw std::invalid_argument("unknown layer " + layer);
    set_weights(weights);
    render(t);
    return graph_.value(it->second);
}

double ModelRuntime::loss(const WeightMap& weights, const VideoClip& clip, std::span<const int> frame_ids,
                          WeightMap* grads) {
    if (static_cast<int>(clip.frames) != spec_.frames || static_cast<int>(clip.height) != spec_.frame_height() ||
        static_cast<int>(clip.width) != spec_.frame_width()) {
        throw std::invalid_argument("clip dims " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) +
                                    "x" + std::to_string(clip.width) + " do not match model " +
                                    std::to_string(spec_.frames) + "x" + std::to_string(spec_.frame_height()) + "x" +
                                    std::to_string(spec_.frame_width()));
    }
    if (frame_ids.empty()) throw std::invalid_argument("loss: empty frame set");
    set_weights(weights);
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(frame_ids.size());
    for (int t : frame_ids) {
        const double tau = static_cast<double>(t) / static_cast<double>(spec_.frames - 1);
        graph_.bind(input_id_, Tensor::scalar(tau));
        graph_.bind(target_id_, clip.frame(static_cast<std::uint32_t>(t)));
        const Tensor l = graph_.forward(loss_id_);
        total += l[0];
        if (grads) {
            graph_.backward(loss_id_);
            for (const auto& [name, id] : param_nodes_) {
                const Tensor& g = graph_.grad(id);
                auto it = grads->find(name);
                if (it == grads->end()) it = grads->emplace(name, Tensor(g.shape())).first;
                Tensor& acc = it->second;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] * inv;
            }
        }
    }
    return total * inv;
}

Tensor render(const Checkpoint& ckpt, int t) {
    ModelRuntime rt(ckpt.spec);
    rt.set_weights(ckpt.tensors);
    return rt.render(t);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double psnr_from_mse(double mse) {
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

double psnr(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("psnr: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return psnr_from_mse(acc / static_cast<double>(a.size()));
}

double clip_mse_with_weights(ModelRuntime& rt, const WeightMap& weights, const VideoClip& clip) {
    rt.set_weights(weights);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::uint32_t t = 0; t < clip.frames; ++t) {
        const Tensor out = rt.render(static_cast<int>(t));
        const Tensor ref = clip.frame(t);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double d = out[i] - ref[i];
            acc += d * d;
        }
        count += out.size();
    }
    return acc / static_cast<double>(count);
}

double clip_psnr_with_weights(ModelRuntime& rt, const WeightMap& weights, const VideoClip& clip) {
    return psnr_from_mse(clip_mse_with_weights(rt, weights, clip));
}

double clip_psnr(const Checkpoint& ckpt, const VideoClip& clip) {
    ModelRuntime rt(ckpt.spec);
    return clip_psnr_with_weights(rt, ckpt.tensors, clip);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Checkpoint train(const Checkpoint& ckpt, const VideoClip& clip, const TrainOptions& opts) {
    ckpt.validate();
    clip.validate();
    if (opts.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    if (opts.epochs == 0) return ckpt;
    if (!(opts.lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");
    const int batch = std::max(1, std::min<int>(opts.batch, static_cast<int>(clip.frames)));

    ModelRuntime rt(ckpt.spec);
    const FlatLayout layout = FlatLayout::of(ckpt);
    std::vector<double> w = layout.flatten(ckpt.tensors);
    Adam opt(w.size());
    Rng rng(opts.seed);

    std::vector<int> order(clip.frames);
    std::iota(order.begin(), order.end(), 0);
    const long batches_per_epoch = (static_cast<long>(clip.frames) + batch - 1) / batch;
    const long total_steps = static_cast<long>(opts.epochs) * batches_per_epoch;

    long step = 0;
    double last_loss = 0.0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        for (long bi = 0; bi < batches_per_epoch; ++bi) {
            const std::size_t lo = static_cast<std::size_t>(bi) * static_cast<std::size_t>(batch);
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(batch));
            std::span<const int> ids(order.data() + lo, hi - lo);

            const WeightMap weights = layout.unflatten(w, ckpt.tensors);
            WeightMap grads;
            last_loss = rt.loss(weights, clip, ids, &grads);
            if (!std::isfinite(last_loss)) {
                throw std::runtime_error("train: loss became non-finite at epoch " + std::to_string(epoch) +
                                         ", step " + std::to_string(step));
            }
            const std::vector<double> g = layout.flatten(grads);
            opt.step(w, g, cosine_lr(opts.lr, step, total_steps));
            ++step;
        }
    }

    Checkpoint out = ckpt;
    out.tensors = layout.unflatten(w, ckpt.tensors);
    out.meta.epochs = ckpt.meta.epochs + opts.epochs;
    std::vector<int> all(clip.frames);
    std::iota(all.begin(), all.end(), 0);
    out.meta.final_loss = rt.loss(out.tensors, clip, all, nullptr);
    return out;
}

LossGradFn make_clip_loss(const Checkpoint& ckpt, const VideoClip& clip) {
    auto rt = std::make_shared<ModelRuntime>(ckpt.spec);
    auto layout = std::make_shared<FlatLayout>(FlatLayout::of(ckpt));
    auto shapes = std::make_shared<WeightMap>(ckpt.tensors);
    auto clip_copy = std::make_shared<VideoClip>(clip);
    auto frames = std::make_shared<std::vector<int>>(clip.frames);
    std::iota(frames->begin(), frames->end(), 0);

    return [rt, layout, shapes, clip_copy, frames](std::span<const double> w, std::span<double> grad) -> double {
        const WeightMap weights = layout->unflatten(w, *shapes);
        if (grad.empty()) {
            return rt->loss(weights, *clip_copy, *frames, nullptr);
        }
        if (grad.size() != layout->total) throw std::invalid_argument("clip loss: gradient buffer length mismatch");
        WeightMap grads;
        const double l = rt->loss(weights, *clip_copy, *frames, &grads);
        const std::vector<double> g = layout->flatten(grads);
        std::copy(g.begin(), g.end(), grad.begin());
        return l;
    };
}

} // namespace nervq
