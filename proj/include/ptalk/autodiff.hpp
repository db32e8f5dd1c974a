#pragma once

#include <functional>
#include <vector>

#include "ptalk/tensor.hpp"

namespace ptalk::ad {

class Tape;

// Handle into a tape. Valid only while the owning tape is alive.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Tensor& val() const;
    const std::vector<int>& shape() const;
};

// Reverse-mode tape. One tape per loss evaluation: build the graph forward,
// call backward(loss) once, read gradients (leaf gradients are accumulated
// into their external sinks), then discard the tape.
class Tape {
public:
    // Parameter entry point: gradient is accumulated into *grad_sink, which
    // must outlive the tape and have the value's shape.
    Var leaf(const Tensor& value, Tensor* grad_sink);
    Var constant(Tensor value);
    Var constant_scalar(Scalar v);

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var neg(Var a);
    Var smul(Var a, Scalar s);
    Var sadd(Var a, Scalar s);
    Var scale_by(Var a, Var s);  // every element of a times the 1-element s
    Var tanh_(Var a);
    Var sigmoid_(Var a);
    Var relu_(Var a);
    Var exp_(Var a);
    Var log_(Var a);   // requires strictly positive input
    Var abs_(Var a);
    Var square_(Var a);

    // matrix
    Var matmul(Var a, Var b);          // (m,k)x(k,n)
    Var transpose2d(Var a);
    Var add_rowvec(Var m, Var v);      // (B,d) + (d,)
    Var l2_normalize_rows(Var m);      // rows scaled to unit L2 norm
    Var softmax_ce_diag(Var logits);   // mean_i -log softmax(row_i)[i], square input
    Var stack_rows(const std::vector<Var>& rows);   // B x d from d-vectors
    Var concat_last(const std::vector<Var>& parts); // rank 1 or 2, along last axis

    // reductions
    Var sum_all(Var a);
    Var mean_all(Var a);

    // maps (C,H,W)
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var upsample2x(Var x);
    Var avg_pool(Var x, int fh, int fw);
    Var grid_warp(Var src, Var flow);   // flow: (2,H,W) displacement, border clamp
    Var mul_map(Var x, Var m);          // (C,H,W) * (1,H,W)
    Var channel_scale(Var x, Var s);    // (C,H,W) * (C,)
    Var channel_mean(Var x);            // (C,H,W) -> (C,)
    Var broadcast_to_map(Var v, int h, int w);  // (C,) -> (C,H,W)
    Var concat_channels(const std::vector<Var>& parts);  // (Ci,H,W) -> (sum Ci,H,W)

    // structure
    Var reshape(Var a, std::vector<int> shape);
    Var stop_gradient(Var a);
    Var gather_rows(Var table, std::vector<int> indices);

    // composite losses
    Var mse(Var a, Var b) { return mean_all(square_(sub(a, b))); }
    Var mae(Var a, Var b) { return mean_all(abs_(sub(a, b))); }

    void backward(Var loss);  // loss must be a scalar (1 element)

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    // Gradient of the last backward() w.r.t. an intermediate node. Empty
    // tensor if the node was unreachable from the loss.
    const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;                       // allocated lazily
        std::function<void(Tape&)> back;   // propagates this->grad to parents
        Tensor* sink = nullptr;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;

    Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> back);
    Tensor& grad_buf(int id);
    friend struct Var;
};

inline const Tensor& Var::val() const { return tape->value(*this); }
inline const std::vector<int>& Var::shape() const { return tape->value(*this).shape; }

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }

}  // namespace ptalk::ad
