#pragma once

#include <cstdint>
#include <vector>

#include "mera/rng.hpp"

namespace mera {

// Dense row-major tensor, rank 1 or 2 in practice. Values are stored in
// f32; every reduction kernel below accumulates in f64 before rounding back.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    static Tensor from(std::vector<std::int64_t> s, std::vector<float> values);

    std::int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t rows() const;
    std::int64_t cols() const;

    float& at(std::int64_t i, std::int64_t j);
    float at(std::int64_t i, std::int64_t j) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// ---- kernels ----

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b for a [m,k], b [m,n] -> [k,n]
Tensor matmul_at_b(const Tensor& a, const Tensor& b);
// a b^T for a [m,k], b [n,k] -> [m,n]
Tensor matmul_a_bt(const Tensor& a, const Tensor& b);

// broadcast a length-n vector over the rows of [m,n]
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// column sums of [m,n] -> [n]
Tensor col_sum(const Tensor& x);

Tensor tanh_map(const Tensor& x);
Tensor relu_map(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor hadamard(const Tensor& a, const Tensor& b);

struct LayerNormCache {
    std::vector<double> mean;
    std::vector<double> rstd;
};

// per-row normalization of [m,n]: y = gain * (x - mu) / sqrt(var + eps) + bias,
// var is the population variance of the row
Tensor layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& bias,
                          double eps, LayerNormCache* cache);

// row-wise softmax of [m,n], log-sum-exp evaluated in f64
Tensor softmax_rows(const Tensor& logits);

// mean cross entropy over rows; labels[i] in [0, n). probs_out, when given,
// receives the softmax for the backward pass.
double cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          Tensor* probs_out);

// argmax of one row, ties resolved to the lowest index
int argmax_row(const Tensor& x, std::int64_t row);

// throws NumericError naming `what` if any element is NaN or Inf
void check_finite(const Tensor& x, const char* what);

// ---- initializers ----

// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), shape [fan_in, fan_out]
Tensor xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, Rng& rng);
Tensor normal_tensor(std::vector<std::int64_t> shape, double sigma, Rng& rng);

} // namespace mera
