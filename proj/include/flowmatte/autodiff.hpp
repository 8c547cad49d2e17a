#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "flowmatte/params.hpp"
#include "flowmatte/tensor.hpp"

namespace flowmatte::ad {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class PadMode { Zero, Reflect };

/// Reverse-mode tape over Tensor4d values. Ops append nodes; backward()
/// walks the tape in reverse and accumulates into node grads, with
/// parameter leaves forwarding into their ParamStore grad buffers.
class Tape {
public:
    struct Node {
        Tensor4d owned;   // op output storage (param leaves read the store instead)
        Tensor4d grad;    // allocated on first touch
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Tape&, int)> back;
    };

    bool grad_enabled = true;

    Var constant(Tensor4d v);                 // no gradient ever
    Var input(Tensor4d v, bool needs_grad = false);
    Var param(Parameter& p);                  // leaf bound to a store parameter

    /// Returned references stay valid across later op calls (deque storage).
    const Tensor4d& value(Var v) const { return val_of(v.id); }
    Tensor4d& grad(Var v) { return grad_of(v.id); }
    bool has_grad(Var v) const { return nodes_[v.id].grad.size() > 0; }

    /// Seeds d(loss)/d(loss)=1 and propagates. `loss` must be scalar-shaped.
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }

    // --- internals used by op implementations ---
    int push(Tensor4d value, bool needs_grad, std::function<void(Tape&, int)> back);
    Tensor4d& grad_of(int id);
    const Tensor4d& val_of(int id) const {
        const Node& n = nodes_[id];
        return n.param ? n.param->value : n.owned;
    }
    Node& node(int id) { return nodes_[id]; }

private:
    std::deque<Node> nodes_;
};

// Elementwise / structural ops.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var add_scaled(Tape& t, Var a, Var b, double sa, double sb);  // sa*a + sb*b
Var scale(Tape& t, Var a, double s);
Var silu(Tape& t, Var a);
Var concat_c(Tape& t, Var a, Var b);
Var repeat_c(Tape& t, Var a, int reps);
Var mean_c(Tape& t, Var a);
Var reshape(Tape& t, Var a, int t2, int c2, int h2, int w2);
Var nearest_up2(Tape& t, Var a);
Var zero_stuff2(Tape& t, Var a);
Var decode_range01(Tape& t, Var a);  // clamp((x+1)/2, 0, 1)
Var fwd_diff_x(Tape& t, Var a);      // replicate boundary: last column is 0
Var fwd_diff_y(Tape& t, Var a);
Var crop_hw(Tape& t, Var a, int h, int w);  // keep top-left h x w region

// Network ops.
Var conv2d(Tape& t, Var x, Var w, Var b, int stride = 1, int pad = 1,
           PadMode mode = PadMode::Zero);
Var conv1d_time(Tape& t, Var x, Var w, Var b);  // odd kernel, reflect pad over T
Var group_norm(Tape& t, Var x, int groups, double eps = 1e-5);
Var linear(Tape& t, Var x, Var w, Var b);  // x flattens to a vector
Var film(Tape& t, Var x, Var scale_shift);  // scale_shift is (1, 2C, 1, 1)
Var matmul2d(Tape& t, Var a, Var b);        // (M,K,1,1) x (K,N,1,1)

// Scalar reductions.
Var mean_all(Tape& t, Var a);
Var sum_squares(Tape& t, Var a);
Var mse(Tape& t, Var a, Var b);
Var l1(Tape& t, Var a, Var b);  // subgradient convention sign(0)=0

/// Symmetric reflection (edge repeated): valid for any i given n >= 1.
int reflect_index(int i, int n);

}  // namespace flowmatte::ad
