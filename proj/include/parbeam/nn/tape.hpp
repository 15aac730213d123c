#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "parbeam/linalg.hpp"
#include "parbeam/nn/tensor.hpp"

namespace parbeam::nn {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

/// Reverse-mode recording. Every op pushes its value and a rule that maps
/// the output gradient to parent gradients.
class Tape {
public:
    using Rule = std::function<void(Tape&, const Tensor4& grad)>;

    Var leaf(Tensor4 value, bool requires_grad = true);
    Var constant(Tensor4 value) { return leaf(std::move(value), false); }
    Var push(Tensor4 value, std::initializer_list<Var> parents, Rule rule);

    const Tensor4& value(Var v) const;
    bool requires_grad(Var v) const;
    /// Gradient after backward; zeros when nothing reached the node.
    Tensor4 grad(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    /// Seeds out with `seed` and runs every rule in reverse order. Throws
    /// ContractViolation for a handle not on this tape.
    void backward(Var out, const Tensor4& seed);
    /// backward with a unit seed; out must hold a single value.
    void backward(Var out);
    void zero_grads();

    /// Adds g into the gradient of v (no-op when v needs no gradient).
    void accumulate(Var v, const Tensor4& g);

private:
    struct Node {
        Tensor4 value;
        bool requires_grad = false;
        Rule rule;
        Tensor4 grad;
        bool has_grad = false;
    };
    const Node& node(Var v) const;
    std::vector<Node> nodes_;
};

namespace ops {

/// Cross-correlation, stride 1, zero padding (k-1)/2; w is (Cout, Cin, k, k).
Var conv(Tape& t, Var x, Var w);
/// Stride-2 2x2 transposed convolution; w is (Cin, Cout, 2, 2).
Var tconv2(Tape& t, Var x, Var w);
/// Broadcast add of s, shape (N or 1, C or 1, 1, 1).
Var badd(Tape& t, Var x, Var s);
/// Broadcast multiply by s, shape (N or 1, C or 1, 1, 1).
Var bmul(Tape& t, Var x, Var s);
Var relu(Tape& t, Var x);
/// v * [ref > 0]; ref receives no gradient.
Var mask_mul(Tape& t, Var v, Var ref);
/// 2x2 stride-2 max pooling; ties go to the first cell in row-major order.
Var maxpool2(Tape& t, Var x);
/// Routes v through the cells maxpool2 selects on ref; ref receives no gradient.
Var pool_route(Tape& t, Var v, Var ref);
/// Channel concatenation.
Var concat(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var add_scalar(Tape& t, Var a, double c);
/// c * x^p elementwise.
Var pow_c(Tape& t, Var x, double p, double c);
/// Sums to shape (N or 1, C or 1, 1, 1).
Var reduce_sum(Tape& t, Var x, bool keep_n, bool keep_c);
/// Mean over batch and space, shape (1, C, 1, 1).
Var channel_mean(Tape& t, Var x);
/// Mean of squares over every entry, a single value.
Var mean_sq(Tape& t, Var x);
/// Mean over every entry, a single value.
Var mean_all(Tape& t, Var x);
/// ln(x + eps) elementwise.
Var log_eps(Tape& t, Var x, double eps);
/// Per (n, c) plane: sqrt((x[i][j]-x[i+1][j])^2 + (x[i][j]-x[i][j+1])^2),
/// spatial shape (H-1, W-1). Where the value is 0 the gradient is taken as 0.
Var tv_map(Tape& t, Var x);
/// Zero padding on the bottom and right up to (h, w).
Var pad_to(Tape& t, Var x, std::size_t h, std::size_t w);
/// Top-left (h, w) block.
Var crop(Tape& t, Var x, std::size_t h, std::size_t w);
/// Applies a linear operator to each batch item's flattened (C, H, W) block.
Var linop(Tape& t, Var x, std::shared_ptr<const LinearOperator> op, Shape item_out);
/// Adjoint counterpart of linop.
Var linop_adjoint(Tape& t, Var y, std::shared_ptr<const LinearOperator> op, Shape item_out);

} // namespace ops

} // namespace parbeam::nn
