#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace nervq {

/// Dense row-major tensor of 64-bit reals.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor full(std::vector<std::size_t> shape, double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    /// Number of quantization channels: extent of the leading axis for
    /// tensors of rank >= 2, a single channel for vectors.
    std::size_t channel_count() const;
    std::size_t channel_size() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(std::span<const std::size_t> shape);
std::string shape_to_string(std::span<const std::size_t> shape);

enum class Op : std::uint8_t {
    Input,
    Parameter,
    Dense,
    Conv3x3,
    PixelShuffle,
    Activation,
    PositionalEncoding,
    Add,
    Reshape,
    MseLoss,
};

enum class Act : std::uint8_t { Gelu, Sigmoid };

struct PosEncSpec {
    int freqs = 8;     // number of frequency pairs
    double base = 1.25;
};

const char* op_name(Op op);

double gelu(double x);
double gelu_derivative(double x);

/// Rearranges [c*r*r, h, w] -> [c, h*r, w*r].
Tensor pixel_shuffle(const Tensor& x, int r);
/// Exact inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, int r);

/// Reverse-mode computation graph. Nodes are appended after their parents,
/// so index order is a topological order. Shapes are checked when nodes are
/// added; forward() refuses unbound inputs.
class Graph {
public:
    int add_input(std::vector<std::size_t> shape, std::string name = "");
    int add_parameter(std::string name, Tensor init);
    int add_dense(int weight, int x, int bias = -1);
    int add_conv3x3(int weight, int x, int bias = -1);
    int add_pixel_shuffle(int x, int r);
    int add_activation(int x, Act kind);
    int add_positional_encoding(int t, PosEncSpec pe);
    int add_add(int a, int b);
    int add_reshape(int x, std::vector<std::size_t> shape);
    int add_mse_loss(int a, int b);

    void bind(int input_id, Tensor value);
    void set_parameter(int param_id, Tensor value);

    std::size_t node_count() const { return nodes_.size(); }
    Op op_of(int id) const { return nodes_.at(id).op; }
    const std::vector<std::size_t>& shape_of(int id) const { return nodes_.at(id).out_shape; }
    const std::string& name_of(int id) const { return nodes_.at(id).name; }
    const Tensor& value(int id) const;
    const Tensor& grad(int id) const;
    std::vector<int> parameter_ids() const;

    /// Evaluates every node up to and including root; returns root's value.
    Tensor forward(int root);
    /// Accumulates d(root)/d(node) into grads. Requires a prior forward()
    /// of the same root and a scalar root.
    void backward(int root);

private:
    struct Node {
        Op op = Op::Input;
        std::vector<int> parents;
        std::vector<std::size_t> out_shape;
        Tensor value;
        Tensor grad;
        bool has_value = false;
        Act act = Act::Gelu;
        int shuffle_r = 1;
        PosEncSpec pe;
        std::string name;
    };

    int push(Node n);
    const Node& checked(int id, const char* ctx) const;
    void eval_node(int id);
    void back_node(int id);
    [[noreturn]] void fail(int id, const std::string& msg) const;

    std::vector<Node> nodes_;
    int forward_root_ = -1;
};

/// Loss callback over a flat weight vector. Returns the loss; when grad is
/// non-empty it must be filled with the analytic gradient (same length as w).
using LossGradFn =
    std::function<double(std::span<const double> w, std::span<double> grad)>;

/// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-12).
double grad_check(const LossGradFn& loss_at, std::span<const double> w, double step);

} // namespace nervq
