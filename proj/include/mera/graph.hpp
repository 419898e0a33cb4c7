#pragma once

#include <vector>

#include "mera/params.hpp"
#include "mera/tensor.hpp"

namespace mera {

// Reverse-mode tape. One Graph is built per batch: ops append nodes eagerly
// (so the tape order is already topological), backward walks it once in
// reverse and accumulates into ParamEntry::grad for trainable leaves. Frozen
// leaves never receive a gradient.
class Graph {
public:
    using Ref = int;

    Ref input(Tensor v);
    Ref param(ParamEntry& e);

    Ref matmul(Ref a, Ref b);
    Ref add_rowvec(Ref x, Ref v);
    Ref tanh_act(Ref x);
    Ref relu_act(Ref x);
    Ref layer_norm(Ref x, Ref gain, Ref bias, double eps = 1e-5);
    // mean cross entropy over batch rows, scalar output
    Ref softmax_ce(Ref logits, std::vector<int> labels);

    Ref add(Ref a, Ref b);
    Ref scale(Ref x, double c);
    Ref square(Ref x);
    Ref sum(Ref x);

    const Tensor& value(Ref r) const;
    // gradient w.r.t. a node, valid after backward; zeros if the node was not reached
    const Tensor& grad(Ref r) const;

    void backward(Ref loss);

    std::size_t size() const { return nodes_.size(); }

private:
    enum class Op {
        input, param, matmul, add_rowvec, tanh_act, relu_act,
        layer_norm, softmax_ce, add, scale, square, sum
    };

    struct Node {
        Op op;
        Ref a = -1, b = -1, c = -1;
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        bool grad_live = false;
        ParamEntry* entry = nullptr;
        LayerNormCache ln;
        double eps = 0.0;
        double factor = 1.0;
        std::vector<int> labels;
        Tensor probs;
    };

    Ref push(Node n);
    Node& node(Ref r);
    const Node& node(Ref r) const;
    void accumulate(Ref r, const Tensor& delta);

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

} // namespace mera
