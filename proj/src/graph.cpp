#include "mera/graph.hpp"

#include <cmath>
#include <string>

#include "mera/error.hpp"

namespace mera {

Graph::Ref Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Ref>(nodes_.size() - 1);
}

Graph::Node& Graph::node(Ref r) {
    if (r < 0 || r >= static_cast<Ref>(nodes_.size()))
        throw IndexError("graph node " + std::to_string(r) + " out of range");
    return nodes_[static_cast<std::size_t>(r)];
}

const Graph::Node& Graph::node(Ref r) const {
    return const_cast<Graph*>(this)->node(r);
}

Graph::Ref Graph::input(Tensor v) {
    Node n;
    n.op = Op::input;
    n.value = std::move(v);
    return push(std::move(n));
}

Graph::Ref Graph::param(ParamEntry& e) {
    Node n;
    n.op = Op::param;
    n.value = e.value;
    n.entry = &e;
    n.needs_grad = e.trainable;
    return push(std::move(n));
}

Graph::Ref Graph::matmul(Ref a, Ref b) {
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.value = mera::matmul(node(a).value, node(b).value);
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::add_rowvec(Ref x, Ref v) {
    Node n;
    n.op = Op::add_rowvec;
    n.a = x;
    n.b = v;
    n.value = mera::add_rowvec(node(x).value, node(v).value);
    n.needs_grad = node(x).needs_grad || node(v).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::tanh_act(Ref x) {
    Node n;
    n.op = Op::tanh_act;
    n.a = x;
    n.value = tanh_map(node(x).value);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::relu_act(Ref x) {
    Node n;
    n.op = Op::relu_act;
    n.a = x;
    n.value = relu_map(node(x).value);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::layer_norm(Ref x, Ref gain, Ref bias, double eps) {
    Node n;
    n.op = Op::layer_norm;
    n.a = x;
    n.b = gain;
    n.c = bias;
    n.eps = eps;
    n.value = layer_norm_forward(node(x).value, node(gain).value, node(bias).value, eps, &n.ln);
    n.needs_grad = node(x).needs_grad || node(gain).needs_grad || node(bias).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::softmax_ce(Ref logits, std::vector<int> labels) {
    Node n;
    n.op = Op::softmax_ce;
    n.a = logits;
    double loss = cross_entropy_mean(node(logits).value, labels, &n.probs);
    n.labels = std::move(labels);
    n.value = Tensor::from({1}, {static_cast<float>(loss)});
    n.needs_grad = node(logits).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::add(Ref a, Ref b) {
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    n.value = mera::add(node(a).value, node(b).value);
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::scale(Ref x, double c) {
    Node n;
    n.op = Op::scale;
    n.a = x;
    n.factor = c;
    n.value = mera::scale(node(x).value, c);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::square(Ref x) {
    Node n;
    n.op = Op::square;
    n.a = x;
    n.value = hadamard(node(x).value, node(x).value);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Graph::Ref Graph::sum(Ref x) {
    Node n;
    n.op = Op::sum;
    n.a = x;
    double acc = 0.0;
    for (float f : node(x).value.data) acc += f;
    n.value = Tensor::from({1}, {static_cast<float>(acc)});
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

const Tensor& Graph::value(Ref r) const {
    return node(r).value;
}

const Tensor& Graph::grad(Ref r) const {
    const Node& n = node(r);
    if (!n.grad_live)
        throw StateError("gradient requested for a node backward never reached");
    return n.grad;
}

void Graph::accumulate(Ref r, const Tensor& delta) {
    Node& n = node(r);
    if (!n.needs_grad) return;
    if (!n.grad_live) {
        n.grad = Tensor(n.value.shape);
        n.grad_live = true;
    }
    if (!n.grad.same_shape(delta)) throw ShapeError("gradient shape mismatch in backward");
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        n.grad.data[i] = static_cast<float>(static_cast<double>(n.grad.data[i]) + static_cast<double>(delta.data[i]));
}

void Graph::backward(Ref loss) {
    if (nodes_.empty()) throw StateError("backward before any forward op");
    if (backward_done_) throw StateError("backward already ran on this tape");
    backward_done_ = true;
    Node& top = node(loss);
    if (top.value.numel() != 1) throw StateError("backward target must be scalar");
    if (!top.needs_grad)
        throw StateError("backward target does not depend on any trainable parameter");
    top.grad = Tensor(top.value.shape);
    top.grad.data[0] = 1.0f;
    top.grad_live = true;

    for (Ref r = loss; r >= 0; --r) {
        Node& n = nodes_[static_cast<std::size_t>(r)];
        if (!n.grad_live || !n.needs_grad) continue;
        const Tensor& gy = n.grad;
        switch (n.op) {
        case Op::input:
            break;
        case Op::param:
            if (n.entry->trainable) {
                for (std::size_t i = 0; i < gy.data.size(); ++i)
                    n.entry->grad.data[i] = static_cast<float>(
                        static_cast<double>(n.entry->grad.data[i]) + static_cast<double>(gy.data[i]));
                n.entry->has_grad = true;
            }
            break;
        case Op::matmul:
            accumulate(n.a, matmul_a_bt(gy, node(n.b).value));
            accumulate(n.b, matmul_at_b(node(n.a).value, gy));
            break;
        case Op::add_rowvec:
            accumulate(n.a, gy);
            accumulate(n.b, col_sum(gy));
            break;
        case Op::tanh_act: {
            Tensor d = gy;
            const Tensor& y = n.value;
            for (std::size_t i = 0; i < d.data.size(); ++i)
                d.data[i] = static_cast<float>(static_cast<double>(gy.data[i]) *
                                               (1.0 - static_cast<double>(y.data[i]) * static_cast<double>(y.data[i])));
            accumulate(n.a, d);
            break;
        }
        case Op::relu_act: {
            Tensor d = gy;
            const Tensor& x = node(n.a).value;
            for (std::size_t i = 0; i < d.data.size(); ++i)
                d.data[i] = x.data[i] > 0.0f ? gy.data[i] : 0.0f;
            accumulate(n.a, d);
            break;
        }
        case Op::layer_norm: {
            const Tensor& x = node(n.a).value;
            const Tensor& gain = node(n.b).value;
            std::int64_t m = x.shape[0], w = x.shape[1];
            Tensor dx({m, w}), dgain({w}), dbias({w});
            std::vector<double> gsum(static_cast<std::size_t>(w), 0.0);
            std::vector<double> bsum(static_cast<std::size_t>(w), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                double mu = n.ln.mean[static_cast<std::size_t>(i)];
                double rstd = n.ln.rstd[static_cast<std::size_t>(i)];
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::int64_t j = 0; j < w; ++j) {
                    double xhat = (static_cast<double>(x.data[i * w + j]) - mu) * rstd;
                    double gyv = static_cast<double>(gy.data[i * w + j]);
                    double dxhat = gyv * static_cast<double>(gain.data[j]);
                    gsum[static_cast<std::size_t>(j)] += gyv * xhat;
                    bsum[static_cast<std::size_t>(j)] += gyv;
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= static_cast<double>(w);
                mean_dxhat_xhat /= static_cast<double>(w);
                for (std::int64_t j = 0; j < w; ++j) {
                    double xhat = (static_cast<double>(x.data[i * w + j]) - mu) * rstd;
                    double dxhat = static_cast<double>(gy.data[i * w + j]) * static_cast<double>(gain.data[j]);
                    dx.data[i * w + j] = static_cast<float>(rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                }
            }
            for (std::int64_t j = 0; j < w; ++j) {
                dgain.data[j] = static_cast<float>(gsum[static_cast<std::size_t>(j)]);
                dbias.data[j] = static_cast<float>(bsum[static_cast<std::size_t>(j)]);
            }
            accumulate(n.a, dx);
            accumulate(n.b, dgain);
            accumulate(n.c, dbias);
            break;
        }
        case Op::softmax_ce: {
            const Tensor& logits = node(n.a).value;
            std::int64_t m = logits.shape[0], w = logits.shape[1];
            double g = static_cast<double>(gy.data[0]) / static_cast<double>(m);
            Tensor d({m, w});
            for (std::int64_t i = 0; i < m; ++i) {
                int y = n.labels[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < w; ++j) {
                    double p = static_cast<double>(n.probs.data[i * w + j]);
                    double t = (j == y) ? 1.0 : 0.0;
                    d.data[i * w + j] = static_cast<float>(g * (p - t));
                }
            }
            accumulate(n.a, d);
            break;
        }
        case Op::add:
            accumulate(n.a, gy);
            accumulate(n.b, gy);
            break;
        case Op::scale:
            accumulate(n.a, mera::scale(gy, n.factor));
            break;
        case Op::square: {
            Tensor d = gy;
            const Tensor& x = node(n.a).value;
            for (std::size_t i = 0; i < d.data.size(); ++i)
                d.data[i] = static_cast<float>(2.0 * static_cast<double>(x.data[i]) * static_cast<double>(gy.data[i]));
            accumulate(n.a, d);
            break;
        }
        case Op::sum: {
            Tensor d(node(n.a).value.shape);
            float g = gy.data[0];
            for (float& f : d.data) f = g;
            accumulate(n.a, d);
            break;
        }
        }
    }
}

} // namespace mera
