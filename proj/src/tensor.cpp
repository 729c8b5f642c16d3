#include "nervq/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace nervq {

std::size_t shape_product(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(std::span<const std::size_t> shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

static void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor extents must be >= 1, got " + shape_to_string(shape));
    }
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_product(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::size_t Tensor::channel_count() const {
    if (shape_.empty()) return 0;
    return ndim() >= 2 ? shape_[0] : 1;
}

std::size_t Tensor::channel_size() const {
    std::size_t c = channel_count();
    return c == 0 ? 0 : size() / c;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Parameter: return "parameter";
        case Op::Dense: return "dense";
        case Op::Conv3x3: return "conv3x3";
        case Op::PixelShuffle: return "pixel_shuffle";
        case Op::Activation: return "activation";
        case Op::PositionalEncoding: return "positional_encoding";
        case Op::Add: return "add";
        case Op::Reshape: return "reshape";
        case Op::MseLoss: return "mse_loss";
    }
    return "?";
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

double gelu_derivative(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    const double Phi = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    return Phi + x * phi;
}

static double sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor pixel_shuffle(const Tensor& x, int r) {
    if (r < 1) throw std::invalid_argument("pixel_shuffle factor must be >= 1");
    if (x.ndim() != 3) throw std::invalid_argument("pixel_shuffle expects a [c,h,w] tensor, got " + shape_to_string(x.shape()));
    const std::size_t rr = static_cast<std::size_t>(r) * static_cast<std::size_t>(r);
    const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (cin % rr != 0) {
        throw std::invalid_argument("pixel_shuffle: channel count " + std::to_string(cin) +
                                    " not divisible by r^2=" + std::to_string(rr));
    }
    const std::size_t cout = cin / rr;
    Tensor out({cout, h * static_cast<std::size_t>(r), w * static_cast<std::size_t>(r)});
    const std::size_t oh = h * r, ow = w * r;
    for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (int di = 0; di < r; ++di)
                    for (int dj = 0; dj < r; ++dj) {
                        const std::size_t src = ((c * rr + di * r + dj) * h + i) * w + j;
                        const std::size_t dst = (c * oh + i * r + di) * ow + j * r + dj;
                        out[dst] = x[src];
                    }
    return out;
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
    if (r < 1) throw std::invalid_argument("pixel_unshuffle factor must be >= 1");
    if (x.ndim() != 3) throw std::invalid_argument("pixel_unshuffle expects a [c,h,w] tensor");
    const std::size_t c = x.shape()[0], oh = x.shape()[1], ow = x.shape()[2];
    if (oh % r != 0 || ow % r != 0) throw std::invalid_argument("pixel_unshuffle: spatial dims not divisible by r");
    const std::size_t rr = static_cast<std::size_t>(r) * static_cast<std::size_t>(r);
    const std::size_t h = oh / r, w = ow / r;
    Tensor out({c * rr, h, w});
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (int di = 0; di < r; ++di)
                    for (int dj = 0; dj < r; ++dj) {
                        const std::size_t dst = ((cc * rr + di * r + dj) * h + i) * w + j;
                        const std::size_t src = (cc * oh + i * r + di) * ow + j * r + dj;
                        out[dst] = x[src];
                    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

void Graph::fail(int id, const std::string& msg) const {
    std::string where = "node #" + std::to_string(id);
    if (id >= 0 && id < static_cast<int>(nodes_.size())) {
        where += " (";
        where += op_name(nodes_[static_cast<std::size_t>(id)].op);
        if (!nodes_[static_cast<std::size_t>(id)].name.empty()) where += " '" + nodes_[static_cast<std::size_t>(id)].name + "'";
        where += ")";
    }
    throw std::invalid_argument(where + ": " + msg);
}

const Graph::Node& Graph::checked(int id, const char* ctx) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument(std::string(ctx) + ": invalid node id " + std::to_string(id));
    }
    return nodes_[static_cast<std::size_t>(id)];
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    forward_root_ = -1;
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::add_input(std::vector<std::size_t> shape, std::string name) {
    validate_shape(shape);
    Node n;
    n.op = Op::Input;
    n.out_shape = std::move(shape);
    n.name = std::move(name);
    return push(std::move(n));
}

int Graph::add_parameter(std::string name, Tensor init) {
    Node n;
    n.op = Op::Parameter;
    n.out_shape = init.shape();
    n.value = std::move(init);
    n.has_value = true;
    n.name = std::move(name);
    return push(std::move(n));
}

int Graph::add_dense(int weight, int x, int bias) {
    const Node& w = checked(weight, "dense");
    const Node& in = checked(x, "dense");
    if (w.out_shape.size() != 2) fail(weight, "dense weight must be [out,in], got " + shape_to_string(w.out_shape));
    if (in.out_shape.size() != 1) fail(x, "dense input must be a vector, got " + shape_to_string(in.out_shape));
    if (w.out_shape[1] != in.out_shape[0]) {
        fail(x, "dense shape mismatch: weight " + shape_to_string(w.out_shape) + " vs input " + shape_to_string(in.out_shape));
    }
    Node n;
    n.op = Op::Dense;
    n.parents = {weight, x};
    if (bias >= 0) {
        const Node& b = checked(bias, "dense bias");
        if (b.out_shape != std::vector<std::size_t>{w.out_shape[0]}) {
            fail(bias, "dense bias must be [out]=" + std::to_string(w.out_shape[0]) + ", got " + shape_to_string(b.out_shape));
        }
        n.parents.push_back(bias);
    }
    n.out_shape = {w.out_shape[0]};
    return push(std::move(n));
}

int Graph::add_conv3x3(int weight, int x, int bias) {
    const Node& w = checked(weight, "conv3x3");
    const Node& in = checked(x, "conv3x3");
    if (w.out_shape.size() != 4 || w.out_shape[2] != 3 || w.out_shape[3] != 3) {
        fail(weight, "conv3x3 weight must be [c_out,c_in,3,3], got " + shape_to_string(w.out_shape));
    }
    if (in.out_shape.size() != 3) fail(x, "conv3x3 input must be [c,h,w], got " + shape_to_string(in.out_shape));
    if (w.out_shape[1] != in.out_shape[0]) {
        fail(x, "conv3x3 channel mismatch: weight expects c_in=" + std::to_string(w.out_shape[1]) +
                    ", input has " + std::to_string(in.out_shape[0]));
    }
    Node n;
    n.op = Op::Conv3x3;
    n.parents = {weight, x};
    if (bias >= 0) {
        const Node& b = checked(bias, "conv3x3 bias");
        if (b.out_shape != std::vector<std::size_t>{w.out_shape[0]}) {
            fail(bias, "conv3x3 bias must be [c_out], got " + shape_to_string(b.out_shape));
        }
        n.parents.push_back(bias);
    }
    n.out_shape = {w.out_shape[0], in.out_shape[1], in.out_shape[2]};
    return push(std::move(n));
}

int Graph::add_pixel_shuffle(int x, int r) {
    const Node& in = checked(x, "pixel_shuffle");
    if (r < 1) fail(x, "pixel_shuffle factor must be >= 1");
    const std::size_t rr = static_cast<std::size_t>(r) * static_cast<std::size_t>(r);
    if (in.out_shape.size() != 3 || in.out_shape[0] % rr != 0) {
        fail(x, "pixel_shuffle needs [c,h,w] with c divisible by r^2=" + std::to_string(rr) +
                    ", got " + shape_to_string(in.out_shape));
    }
    Node n;
    n.op = Op::PixelShuffle;
    n.parents = {x};
    n.shuffle_r = r;
    n.out_shape = {in.out_shape[0] / rr, in.out_shape[1] * static_cast<std::size_t>(r),
                   in.out_shape[2] * static_cast<std::size_t>(r)};
    return push(std::move(n));
}

int Graph::add_activation(int x, Act kind) {
    const Node& in = checked(x, "activation");
    Node n;
    n.op = Op::Activation;
    n.parents = {x};
    n.act = kind;
    n.out_shape = in.out_shape;
    return push(std::move(n));
}

int Graph::add_positional_encoding(int t, PosEncSpec pe) {
    const Node& in = checked(t, "positional_encoding");
    if (shape_product(in.out_shape) != 1) fail(t, "positional_encoding input must be a scalar");
    if (pe.freqs < 1 || pe.base <= 1.0) fail(t, "positional_encoding needs freqs >= 1 and base > 1");
    Node n;
    n.op = Op::PositionalEncoding;
    n.parents = {t};
    n.pe = pe;
    n.out_shape = {2 * static_cast<std::size_t>(pe.freqs)};
    return push(std::move(n));
}

int Graph::add_add(int a, int b) {
    const Node& na = checked(a, "add");
    const Node& nb = checked(b, "add");
    if (na.out_shape != nb.out_shape) {
        fail(b, "add shape mismatch: " + shape_to_string(na.out_shape) + " vs " + shape_to_string(nb.out_shape));
    }
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    n.out_shape = na.out_shape;
    return push(std::move(n));
}

int Graph::add_reshape(int x, std::vector<std::size_t> shape) {
    const Node& in = checked(x, "reshape");
    validate_shape(shape);
    if (shape_product(shape) != shape_product(in.out_shape)) {
        fail(x, "reshape size mismatch: " + shape_to_string(in.out_shape) + " -> " + shape_to_string(shape));
    }
    Node n;
    n.op = Op::Reshape;
    n.parents = {x};
    n.out_shape = std::move(shape);
    return push(std::move(n));
}

int Graph::add_mse_loss(int a, int b) {
    const Node& na = checked(a, "mse_loss");
    const Node& nb = checked(b, "mse_loss");
    if (na.out_shape != nb.out_shape) {
        fail(b, "mse_loss shape mismatch: " + shape_to_string(na.out_shape) + " vs " + shape_to_string(nb.out_shape));
    }
    Node n;
    n.op = Op::MseLoss;
    n.parents = {a, b};
    n.out_shape = {1};
    return push(std::move(n));
}

void Graph::bind(int input_id, Tensor value) {
    Node& n = nodes_.at(static_cast<std::size_t>(input_id));
    if (n.op != Op::Input) fail(input_id, "bind target is not an input");
    if (value.shape() != n.out_shape) {
        fail(input_id, "bound value shape " + shape_to_string(value.shape()) + " != declared " + shape_to_string(n.out_shape));
    }
    n.value = std::move(value);
    n.has_value = true;
    forward_root_ = -1;
}

void Graph::set_parameter(int param_id, Tensor value) {
    Node& n = nodes_.at(static_cast<std::size_t>(param_id));
    if (n.op != Op::Parameter) fail(param_id, "set_parameter target is not a parameter");
    if (value.shape() != n.out_shape) {
        fail(param_id, "parameter shape " + shape_to_string(value.shape()) + " != declared " + shape_to_string(n.out_shape));
    }
    n.value = std::move(value);
    forward_root_ = -1;
}

const Tensor& Graph::value(int id) const {
    const Node& n = checked(id, "value");
    if (!n.has_value) throw std::logic_error("node value requested before forward");
    return n.value;
}

const Tensor& Graph::grad(int id) const {
    const Node& n = checked(id, "grad");
    if (n.grad.empty()) throw std::logic_error("node grad requested before backward");
    return n.grad;
}

std::vector<int> Graph::parameter_ids() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::Parameter) out.push_back(static_cast<int>(i));
    }
    return out;
}

void Graph::eval_node(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.op) {
        case Op::Input:
            if (!n.has_value) fail(id, "unbound input");
            return;
        case Op::Parameter:
            return;
        case Op::Dense: {
            const Tensor& w = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            const std::size_t out = w.shape()[0], in = w.shape()[1];
            Tensor y({out});
            for (std::size_t o = 0; o < out; ++o) {
                double acc = 0.0;
                const double* wr = w.data() + o * in;
                for (std::size_t i = 0; i < in; ++i) acc += wr[i] * x[i];
                y[o] = acc;
            }
            if (n.parents.size() == 3) {
                const Tensor& b = nodes_[static_cast<std::size_t>(n.parents[2])].value;
                for (std::size_t o = 0; o < out; ++o) y[o] += b[o];
            }
            n.value = std::move(y);
            break;
        }
        case Op::Conv3x3: {
            const Tensor& w = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            const std::size_t co = w.shape()[0], ci = w.shape()[1];
            const std::size_t h = x.shape()[1], wd = x.shape()[2];
            Tensor y({co, h, wd});
            for (std::size_t oc = 0; oc < co; ++oc) {
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    const double* k = w.data() + (oc * ci + ic) * 9;
                    const double* xp = x.data() + ic * h * wd;
                    double* yp = y.data() + oc * h * wd;
                    for (std::size_t i = 0; i < h; ++i) {
                        for (std::size_t j = 0; j < wd; ++j) {
                            double acc = 0.0;
                            for (int u = -1; u <= 1; ++u) {
                                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + u;
                                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (int v = -1; v <= 1; ++v) {
                                    const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j) + v;
                                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    acc += k[(u + 1) * 3 + (v + 1)] * xp[ii * static_cast<std::ptrdiff_t>(wd) + jj];
                                }
                            }
                            yp[i * wd + j] += acc;
                        }
                    }
                }
            }
            if (n.parents.size() == 3) {
                const Tensor& b = nodes_[static_cast<std::size_t>(n.parents[2])].value;
                for (std::size_t oc = 0; oc < co; ++oc) {
                    double* yp = y.data() + oc * h * wd;
                    for (std::size_t i = 0; i < h * wd; ++i) yp[i] += b[oc];
                }
            }
            n.value = std::move(y);
            break;
        }
        case Op::PixelShuffle:
            n.value = pixel_shuffle(nodes_[static_cast<std::size_t>(n.parents[0])].value, n.shuffle_r);
            break;
        case Op::Activation: {
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            Tensor y(x.shape());
            if (n.act == Act::Gelu) {
                for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
            } else {
                for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
            }
            n.value = std::move(y);
            break;
        }
        case Op::PositionalEncoding: {
            const Tensor& t = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const double tau = t[0];
            Tensor y({2 * static_cast<std::size_t>(n.pe.freqs)});
            double freq = std::numbers::pi;
            for (int i = 0; i < n.pe.freqs; ++i) {
                y[2 * static_cast<std::size_t>(i)] = std::sin(freq * tau);
                y[2 * static_cast<std::size_t>(i) + 1] = std::cos(freq * tau);
                freq *= n.pe.base;
            }
            n.value = std::move(y);
            break;
        }
        case Op::Add: {
            const Tensor& a = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& b = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            Tensor y(a.shape());
            for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
            n.value = std::move(y);
            break;
        }
        case Op::Reshape: {
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            n.value = Tensor(n.out_shape, std::vector<double>(x.data(), x.data() + x.size()));
            break;
        }
        case Op::MseLoss: {
            const Tensor& a = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& b = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            double acc = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = a[i] - b[i];
                acc += d * d;
            }
            n.value = Tensor::scalar(acc / static_cast<double>(a.size()));
            break;
        }
    }
    n.has_value = true;
}

Tensor Graph::forward(int root) {
    checked(root, "forward");
    // evaluate only the root's ancestors
    std::vector<char> needed(static_cast<std::size_t>(root) + 1, 0);
    std::vector<int> stack{root};
    needed[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
            if (!needed[static_cast<std::size_t>(p)]) {
                needed[static_cast<std::size_t>(p)] = 1;
                stack.push_back(p);
            }
        }
    }
    for (int i = 0; i <= root; ++i) {
        if (needed[static_cast<std::size_t>(i)]) eval_node(i);
    }
    forward_root_ = root;
    return nodes_[static_cast<std::size_t>(root)].value;
}

void Graph::back_node(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) return; // no downstream consumer
    const Tensor& g = n.grad;
    auto parent_grad = [&](int idx) -> Tensor& {
        Node& p = nodes_[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(idx)])];
        if (p.grad.empty()) p.grad = Tensor(p.out_shape);
        return p.grad;
    };
    switch (n.op) {
        case Op::Input:
        case Op::Parameter:
            return;
        case Op::Dense: {
            const Tensor& w = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            Tensor& gw = parent_grad(0);
            Tensor& gx = parent_grad(1);
            const std::size_t out = w.shape()[0], in = w.shape()[1];
            for (std::size_t o = 0; o < out; ++o) {
                const double go = g[o];
                double* gwr = gw.data() + o * in;
                const double* wr = w.data() + o * in;
                for (std::size_t i = 0; i < in; ++i) {
                    gwr[i] += go * x[i];
                    gx[i] += go * wr[i];
                }
            }
            if (n.parents.size() == 3) {
                Tensor& gb = parent_grad(2);
                for (std::size_t o = 0; o < out; ++o) gb[o] += g[o];
            }
            return;
        }
        case Op::Conv3x3: {
            const Tensor& w = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            Tensor& gw = parent_grad(0);
            Tensor& gx = parent_grad(1);
            const std::size_t co = w.shape()[0], ci = w.shape()[1];
            const std::size_t h = x.shape()[1], wd = x.shape()[2];
            for (std::size_t oc = 0; oc < co; ++oc) {
                const double* gp = g.data() + oc * h * wd;
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    const double* k = w.data() + (oc * ci + ic) * 9;
                    double* gk = gw.data() + (oc * ci + ic) * 9;
                    const double* xp = x.data() + ic * h * wd;
                    double* gxp = gx.data() + ic * h * wd;
                    for (std::size_t i = 0; i < h; ++i) {
                        for (std::size_t j = 0; j < wd; ++j) {
                            const double go = gp[i * wd + j];
                            if (go == 0.0) continue;
                            for (int u = -1; u <= 1; ++u) {
                                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + u;
                                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (int v = -1; v <= 1; ++v) {
                                    const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j) + v;
                                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    const std::size_t xi = static_cast<std::size_t>(ii) * wd + static_cast<std::size_t>(jj);
                                    gk[(u + 1) * 3 + (v + 1)] += go * xp[xi];
                                    gxp[xi] += go * k[(u + 1) * 3 + (v + 1)];
                                }
                            }
                        }
                    }
                }
            }
            if (n.parents.size() == 3) {
                Tensor& gb = parent_grad(2);
                for (std::size_t oc = 0; oc < co; ++oc) {
                    const double* gp = g.data() + oc * h * wd;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < h * wd; ++i) acc += gp[i];
                    gb[oc] += acc;
                }
            }
            return;
        }
        case Op::PixelShuffle: {
            Tensor& gx = parent_grad(0);
            Tensor back = pixel_unshuffle(g, n.shuffle_r);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += back[i];
            return;
        }
        case Op::Activation: {
            const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            Tensor& gx = parent_grad(0);
            if (n.act == Act::Gelu) {
                for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * gelu_derivative(x[i]);
            } else {
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double s = n.value[i];
                    gx[i] += g[i] * s * (1.0 - s);
                }
            }
            return;
        }
        case Op::PositionalEncoding: {
            const Tensor& t = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            Tensor& gt = parent_grad(0);
            const double tau = t[0];
            double freq = std::numbers::pi;
            double acc = 0.0;
            for (int i = 0; i < n.pe.freqs; ++i) {
                acc += g[2 * static_cast<std::size_t>(i)] * freq * std::cos(freq * tau);
                acc -= g[2 * static_cast<std::size_t>(i) + 1] * freq * std::sin(freq * tau);
                freq *= n.pe.base;
            }
            gt[0] += acc;
            return;
        }
        case Op::Add: {
            Tensor& ga = parent_grad(0);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
            Tensor& gb = parent_grad(1);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
            return;
        }
        case Op::Reshape: {
            Tensor& gx = parent_grad(0);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
            return;
        }
        case Op::MseLoss: {
            const Tensor& a = nodes_[static_cast<std::size_t>(n.parents[0])].value;
            const Tensor& b = nodes_[static_cast<std::size_t>(n.parents[1])].value;
            Tensor& ga = parent_grad(0);
            Tensor& gb = parent_grad(1);
            const double scale = 2.0 * g[0] / static_cast<double>(a.size());
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = scale * (a[i] - b[i]);
                ga[i] += d;
                gb[i] -= d;
            }
            return;
        }
    }
}

void Graph::backward(int root) {
    const Node& r = checked(root, "backward");
    if (forward_root_ != root) throw std::logic_error("backward before forward of the same root");
    if (shape_product(r.out_shape) != 1) {
        throw std::invalid_argument("backward root must be scalar, got shape " + shape_to_string(r.out_shape));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[static_cast<std::size_t>(root)].grad = Tensor(r.out_shape, {1.0});
    for (int i = root; i >= 0; --i) back_node(i);
}

double grad_check(const LossGradFn& loss_at, std::span<const double> w, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("grad_check step must be > 0");
    std::vector<double> wv(w.begin(), w.end());
    std::vector<double> analytic(w.size(), 0.0);
    const double loss = loss_at(wv, analytic);
    if (!std::isfinite(loss)) throw std::runtime_error("grad_check: non-finite loss");
    double worst = 0.0;
    std::vector<double> none;
    for (std::size_t i = 0; i < wv.size(); ++i) {
        const double keep = wv[i];
        wv[i] = keep + step;
        const double lp = loss_at(wv, none);
        wv[i] = keep - step;
        const double lm = loss_at(wv, none);
        wv[i] = keep;
        if (!std::isfinite(lp) || !std::isfinite(lm)) throw std::runtime_error("grad_check: non-finite loss");
        const double fd = (lp - lm) / (2.0 * step);
        const double rel = std::abs(analytic[i] - fd) / std::max(std::abs(analytic[i]), 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace nervq
