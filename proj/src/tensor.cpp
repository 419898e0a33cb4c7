#include "mera/tensor.hpp"

#include <cmath>
#include <string>

#include "mera/error.hpp"

namespace mera {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) {
        if (d < 0) throw ShapeError("negative extent in shape");
        n *= d;
    }
    return n;
}

void require_2d(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected rank 2, got rank " + std::to_string(t.rank()));
}

} // namespace

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
}

Tensor Tensor::from(std::vector<std::int64_t> s, std::vector<float> values) {
    if (shape_numel(s) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("Tensor::from: value count does not match shape");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

std::int64_t Tensor::numel() const {
    return static_cast<std::int64_t>(data.size());
}

std::int64_t Tensor::rows() const {
    require_2d(*this, "rows");
    return shape[0];
}

std::int64_t Tensor::cols() const {
    require_2d(*this, "cols");
    return shape[1];
}

float& Tensor::at(std::int64_t i, std::int64_t j) {
    require_2d(*this, "at");
    if (i < 0 || i >= shape[0] || j < 0 || j >= shape[1]) throw IndexError("Tensor::at out of range");
    return data[static_cast<std::size_t>(i * shape[1] + j)];
}

float Tensor::at(std::int64_t i, std::int64_t j) const {
    return const_cast<Tensor*>(this)->at(i, j);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul lhs");
    require_2d(b, "matmul rhs");
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner extents differ, " + std::to_string(a.shape[1]) + " vs " + std::to_string(b.shape[0]));
    std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const float* arow = a.data.data() + i * k;
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < k; ++t)
                acc += static_cast<double>(arow[t]) * static_cast<double>(b.data[t * n + j]);
            out.data[i * n + j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor matmul_at_b(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_at_b lhs");
    require_2d(b, "matmul_at_b rhs");
    if (a.shape[0] != b.shape[0])
        throw ShapeError("matmul_at_b: row extents differ");
    std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({k, n});
    for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < m; ++t)
                acc += static_cast<double>(a.data[t * k + i]) * static_cast<double>(b.data[t * n + j]);
            out.data[i * n + j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_a_bt lhs");
    require_2d(b, "matmul_a_bt rhs");
    if (a.shape[1] != b.shape[1])
        throw ShapeError("matmul_a_bt: column extents differ");
    std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor out({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < k; ++t)
                acc += static_cast<double>(a.data[i * k + t]) * static_cast<double>(b.data[j * k + t]);
            out.data[i * n + j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_2d(x, "add_rowvec input");
    if (v.rank() != 1 || v.shape[0] != x.shape[1])
        throw ShapeError("add_rowvec: vector length does not match columns");
    Tensor out = x;
    for (std::int64_t i = 0; i < x.shape[0]; ++i)
        for (std::int64_t j = 0; j < x.shape[1]; ++j)
            out.data[i * x.shape[1] + j] += v.data[j];
    return out;
}

Tensor col_sum(const Tensor& x) {
    require_2d(x, "col_sum input");
    Tensor out({x.shape[1]});
    for (std::int64_t j = 0; j < x.shape[1]; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < x.shape[0]; ++i)
            acc += static_cast<double>(x.data[i * x.shape[1] + j]);
        out.data[j] = static_cast<float>(acc);
    }
    return out;
}

Tensor tanh_map(const Tensor& x) {
    Tensor out = x;
    for (float& f : out.data) f = std::tanh(f);
    return out;
}

Tensor relu_map(const Tensor& x) {
    Tensor out = x;
    for (float& f : out.data) f = f > 0.0f ? f : 0.0f;
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = x;
    for (float& f : out.data) f = static_cast<float>(static_cast<double>(f) * c);
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("hadamard: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

Tensor layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& bias,
                          double eps, LayerNormCache* cache) {
    require_2d(x, "layer_norm input");
    std::int64_t m = x.shape[0], n = x.shape[1];
    if (gain.rank() != 1 || gain.shape[0] != n || bias.rank() != 1 || bias.shape[0] != n)
        throw ShapeError("layer_norm: gain/bias length does not match columns");
    if (n == 0) throw ShapeError("layer_norm: empty rows");
    Tensor out({m, n});
    if (cache) {
        cache->mean.assign(static_cast<std::size_t>(m), 0.0);
        cache->rstd.assign(static_cast<std::size_t>(m), 0.0);
    }
    for (std::int64_t i = 0; i < m; ++i) {
        const float* row = x.data.data() + i * n;
        double mu = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double rstd = 1.0 / std::sqrt(var + eps);
        if (cache) {
            cache->mean[static_cast<std::size_t>(i)] = mu;
            cache->rstd[static_cast<std::size_t>(i)] = rstd;
        }
        for (std::int64_t j = 0; j < n; ++j) {
            double xhat = (row[j] - mu) * rstd;
            out.data[i * n + j] = static_cast<float>(static_cast<double>(gain.data[j]) * xhat + static_cast<double>(bias.data[j]));
        }
    }
    return out;
}

Tensor softmax_rows(const Tensor& logits) {
    require_2d(logits, "softmax input");
    std::int64_t m = logits.shape[0], n = logits.shape[1];
    if (n == 0) throw ShapeError("softmax: empty rows");
    Tensor out({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const float* row = logits.data.data() + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (std::int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        for (std::int64_t j = 0; j < n; ++j)
            out.data[i * n + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / z);
    }
    return out;
}

double cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          Tensor* probs_out) {
    require_2d(logits, "cross_entropy input");
    std::int64_t m = logits.shape[0], n = logits.shape[1];
    if (static_cast<std::int64_t>(labels.size()) != m)
        throw ShapeError("cross_entropy: label count does not match rows");
    if (m == 0) throw ShapeError("cross_entropy: empty batch");
    Tensor probs({m, n});
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= n) throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range");
        const float* row = logits.data.data() + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (std::int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        double lse = mx + std::log(z);
        total += lse - static_cast<double>(row[y]);
        for (std::int64_t j = 0; j < n; ++j)
            probs.data[i * n + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / z);
    }
    if (probs_out) *probs_out = std::move(probs);
    double loss = total / static_cast<double>(m);
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: loss is not finite");
    return loss;
}

int argmax_row(const Tensor& x, std::int64_t row) {
    require_2d(x, "argmax input");
    if (row < 0 || row >= x.shape[0]) throw IndexError("argmax_row: row out of range");
    std::int64_t n = x.shape[1];
    if (n == 0) throw ShapeError("argmax_row: empty row");
    const float* r = x.data.data() + row * n;
    int best = 0;
    for (std::int64_t j = 1; j < n; ++j)
        if (r[j] > r[best]) best = static_cast<int>(j);
    return best;
}

void check_finite(const Tensor& x, const char* what) {
    for (float f : x.data)
        if (!std::isfinite(f)) throw NumericError(std::string(what) + ": non-finite value");
}

Tensor xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    if (fan_in <= 0 || fan_out <= 0) throw ShapeError("xavier_uniform: fans must be positive");
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (float& f : t.data) f = static_cast<float>(rng.uniform(-a, a));
    return t;
}

Tensor normal_tensor(std::vector<std::int64_t> shape, double sigma, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& f : t.data) f = static_cast<float>(rng.normal() * sigma);
    return t;
}

} // namespace mera
