#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck_common.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mera/error.hpp"
#include "mera/graph.hpp"
#include "mera/optim.hpp"
#include "mera/params.hpp"
#include "mera/rng.hpp"
#include "mera/tensor.hpp"

using namespace mera;

using namespace gradcheck;

TEST_CASE("finite differences agree with backward on every layer type") {
    double worst = 0.0;
    int cases = 0;
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        CaseSpec s = random_case(seed);
        CAPTURE(seed);
        CAPTURE(s.kind);
        CaseReport r = check_case_gradients(s);
        REQUIRE(r.grads_present);
        CHECK(r.value_rel < 1e-5);
        CHECK(r.worst_elem < 1e-4);
        CHECK(r.worst_norm < 1e-4);
        worst = std::max(worst, r.worst_norm);
        ++cases;
    }
    CHECK(cases >= 20);
    MESSAGE("worst relative error over ", cases, " cases: ", worst);
}

TEST_CASE("matmul matches a long double triple loop") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(derive_seed(seed, "matmul"));
        std::int64_t m = 1 + static_cast<std::int64_t>(rng.uniform_index(8));
        std::int64_t k = 1 + static_cast<std::int64_t>(rng.uniform_index(8));
        std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(8));
        Tensor a = normal_tensor({m, k}, 1.0, rng);
        Tensor b = normal_tensor({k, n}, 1.0, rng);
        Tensor c = matmul(a, b);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                long double acc = 0.0L;
                for (std::int64_t t = 0; t < k; ++t)
                    acc += static_cast<long double>(a.at(i, t)) * static_cast<long double>(b.at(t, j));
                double ref = static_cast<double>(acc);
                CHECK(std::abs(c.at(i, j) - ref) <= 1e-6 * std::max(1.0, std::abs(ref)));
            }
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    Tensor logits = normal_tensor({5, 9}, 3.0, rng);
    Tensor p = softmax_rows(logits);
    for (std::int64_t i = 0; i < 5; ++i) {
        double row = 0.0;
        for (std::int64_t j = 0; j < 9; ++j) row += p.at(i, j);
        CHECK(std::abs(row - 1.0) < 1e-6);
    }
}

TEST_CASE("cross entropy equals mean negative log prob of the label") {
    Rng rng(11);
    Tensor logits = normal_tensor({4, 6}, 2.0, rng);
    std::vector<int> labels = {3, 0, 5, 2};
    Tensor probs;
    double loss = cross_entropy_mean(logits, labels, &probs);
    DMat dl(4, 6);
    for (std::size_t i = 0; i < dl.v.size(); ++i) dl.v[i] = logits.data[i];
    CHECK(loss == doctest::Approx(d_cross_entropy(dl, labels)).epsilon(1e-9));
    // probs match the standalone softmax
    Tensor p2 = softmax_rows(logits);
    for (std::size_t i = 0; i < p2.data.size(); ++i) CHECK(probs.data[i] == p2.data[i]);
}

TEST_CASE("argmax ties resolve to the lowest index") {
    Tensor t = Tensor::from({2, 4}, {1.0f, 7.0f, 7.0f, 0.0f, -2.0f, -2.0f, -2.0f, -2.0f});
    CHECK(argmax_row(t, 0) == 1);
    CHECK(argmax_row(t, 1) == 0);
}

TEST_CASE("shape and index errors") {
    Rng rng(3);
    Tensor a = normal_tensor({2, 3}, 1.0, rng);
    Tensor b = normal_tensor({4, 2}, 1.0, rng);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(argmax_row(a, 5), IndexError);
    std::vector<int> bad = {0, 9};
    CHECK_THROWS_AS(cross_entropy_mean(a, bad, nullptr), IndexError);
    std::vector<int> wrong_count = {0};
    CHECK_THROWS_AS(cross_entropy_mean(a, wrong_count, nullptr), ShapeError);
}

TEST_CASE("non-finite values are a hard error") {
    Tensor t = Tensor::from({1, 2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
    CHECK_THROWS_AS(check_finite(t, "probe"), NumericError);
    Tensor inf_logits = Tensor::from({1, 2}, {std::numeric_limits<float>::infinity(), 0.0f});
    std::vector<int> labels = {1};
    CHECK_THROWS_AS(cross_entropy_mean(inf_logits, labels, nullptr), NumericError);
}

TEST_CASE("backward state errors") {
    Graph empty;
    CHECK_THROWS_AS(empty.backward(0), StateError);

    Graph g;
    ParameterSet ps;
    Rng rng(5);
    ps.add("w", xavier_uniform(3, 4, rng));
    Graph::Ref w = g.param(ps.at("w"));
    CHECK_THROWS_AS(g.backward(w), StateError); // not scalar

    Graph g2;
    Graph::Ref c = g2.input(Tensor::from({1}, {2.0f}));
    Graph::Ref s = g2.sum(c);
    CHECK_THROWS_AS(g2.backward(s), StateError); // nothing trainable below
}

TEST_CASE("frozen parameters receive no gradient") {
    ParameterSet ps;
    Rng rng(9);
    ps.add("w", xavier_uniform(3, 4, rng));
    ps.add("frozen", xavier_uniform(3, 4, rng));
    ps.at("frozen").trainable = false;
    Tensor before = ps.at("frozen").value;

    Graph g;
    Graph::Ref x = g.input(normal_tensor({2, 3}, 1.0, rng));
    Graph::Ref both = g.add(g.matmul(x, g.param(ps.at("w"))), g.matmul(x, g.param(ps.at("frozen"))));
    Graph::Ref loss = g.scale(g.sum(g.square(both)), 0.5);
    g.backward(loss);

    CHECK(ps.at("w").has_grad);
    CHECK_FALSE(ps.at("frozen").has_grad);
    for (float f : ps.at("frozen").grad.data) CHECK(f == 0.0f);
    for (std::size_t i = 0; i < before.data.size(); ++i)
        CHECK(ps.at("frozen").value.data[i] == before.data[i]);
}

TEST_CASE("a tape runs backward once; fresh tapes accumulate into grads") {
    ParameterSet ps;
    Rng rng(13);
    ps.add("w", xavier_uniform(2, 2, rng));

    auto build = [](Graph& g, ParameterSet& p) {
        return g.scale(g.sum(g.square(g.param(p.at("w")))), 0.5);
    };
    Graph g1;
    Graph::Ref l1 = build(g1, ps);
    g1.backward(l1);
    CHECK_THROWS_AS(g1.backward(l1), StateError);

    Tensor after_one = ps.at("w").grad;
    Graph g2;
    g2.backward(build(g2, ps)); // same loss again, grads add up
    for (std::size_t i = 0; i < after_one.data.size(); ++i)
        CHECK(ps.at("w").grad.data[i] == doctest::Approx(2.0 * after_one.data[i]).epsilon(1e-12));
}

TEST_CASE("xavier uniform stays inside its bound and is seed deterministic") {
    Rng a(21), b(21), c(22);
    Tensor ta = xavier_uniform(16, 32, a);
    Tensor tb = xavier_uniform(16, 32, b);
    Tensor tc = xavier_uniform(16, 32, c);
    double bound = std::sqrt(6.0 / 48.0);
    for (float f : ta.data) CHECK(std::abs(f) <= bound);
    CHECK(ta.data == tb.data);
    CHECK(ta.data != tc.data);
}

TEST_CASE("seed derivation is stable and tag sensitive") {
    CHECK(derive_seed(1, "alpha") == derive_seed(1, "alpha"));
    CHECK(derive_seed(1, "alpha") != derive_seed(1, "beta"));
    CHECK(derive_seed(1, "alpha") != derive_seed(2, "alpha"));
    CHECK(derive_seed(1, "alpha", 0) != derive_seed(1, "alpha", 1));
}

TEST_CASE("schedule warms up then decays without increasing") {
    LrSchedule s{100, 0.03};
    CHECK(s.warmup_steps() == 3);
    CHECK(s.scale(0) == doctest::Approx(1.0 / 3.0));
    CHECK(s.scale(1) == doctest::Approx(2.0 / 3.0));
    CHECK(s.scale(2) == doctest::Approx(1.0));
    CHECK(s.scale(3) == doctest::Approx(1.0));
    double pi = 3.14159265358979323846;
    CHECK(s.scale(50) == doctest::Approx(0.5 * (1.0 + std::cos(pi * 47.0 / 97.0))));
    double prev = s.scale(3);
    for (int t = 4; t <= 110; ++t) {
        double cur = s.scale(t);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
    CHECK(s.scale(100) == doctest::Approx(0.0));

    LrSchedule tiny{10, 0.0};
    CHECK(tiny.warmup_steps() == 1);
    CHECK(tiny.scale(0) == doctest::Approx(1.0));
}

TEST_CASE("sgd step is exactly value minus lr times grad") {
    ParameterSet ps;
    ps.add("w", Tensor::from({2}, {1.0f, -2.0f}));
    Graph g;
    Graph::Ref loss = g.scale(g.sum(g.square(g.param(ps.at("w")))), 0.5);
    g.backward(loss); // grad = w
    Optimizer opt(OptKind::sgd, LrSchedule{1, 0.0});
    opt.configure(ps, [](const std::string&) { return 0.5; });
    opt.step(ps);
    CHECK(ps.at("w").value.data[0] == doctest::Approx(1.0f - 0.5f * 1.0f));
    CHECK(ps.at("w").value.data[1] == doctest::Approx(-2.0f + 0.5f * 2.0f));
    CHECK_FALSE(ps.at("w").has_grad);
}

TEST_CASE("adam matches a double precision replica") {
    ParameterSet ps;
    ps.add("w", Tensor::from({3}, {0.8f, -1.3f, 2.1f}));

    std::vector<double> w = {0.8f, -1.3f, 2.1f};
    std::vector<double> m(3, 0.0), v(3, 0.0);
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;

    Optimizer opt(OptKind::adam, LrSchedule{100, 0.0});
    opt.configure(ps, [](const std::string&) { return 0.05; });

    for (int k = 1; k <= 5; ++k) {
        Graph g;
        Graph::Ref loss = g.scale(g.sum(g.square(g.param(ps.at("w")))), 0.5);
        g.backward(loss);
        double sched = LrSchedule{100, 0.0}.scale(k - 1);
        for (int i = 0; i < 3; ++i) {
            double grad = w[static_cast<std::size_t>(i)];
            m[i] = b1 * m[i] + (1 - b1) * grad;
            v[i] = b2 * v[i] + (1 - b2) * grad * grad;
            double mh = m[i] / (1 - std::pow(b1, k));
            double vh = v[i] / (1 - std::pow(b2, k));
            w[i] -= lr * sched * mh / (std::sqrt(vh) + eps);
        }
        opt.step(ps);
    }
    for (int i = 0; i < 3; ++i)
        CHECK(std::abs(ps.at("w").value.data[i] - w[i]) < 1e-5);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    ParameterSet ps;
    ps.add("w", Tensor::from({2}, {0.0f, 0.0f}));
    Graph g;
    Graph::Ref loss = g.scale(g.sum(g.square(g.param(ps.at("w")))), 0.5);
    g.backward(loss); // grad = w = 0
    Optimizer opt(OptKind::adam, LrSchedule{10, 0.0});
    opt.configure(ps, [](const std::string&) { return 0.1; });
    opt.step(ps);
    CHECK(ps.at("w").value.data[0] == 0.0f);
    CHECK(ps.at("w").value.data[1] == 0.0f);
}

TEST_CASE("optimizer step without gradients is a state error") {
    ParameterSet ps;
    ps.add("w", Tensor::from({1}, {1.0f}));
    Optimizer opt(OptKind::adam, LrSchedule{10, 0.0});
    opt.configure(ps, [](const std::string&) { return 0.1; });
    CHECK_THROWS_AS(opt.step(ps), StateError);
}

TEST_CASE("parameter set rejects duplicates and unknown names") {
    ParameterSet ps;
    ps.add("a", Tensor::from({1}, {1.0f}));
    CHECK_THROWS_AS(ps.add("a", Tensor::from({1}, {2.0f})), ArgumentError);
    CHECK_THROWS_AS(ps.at("missing"), ArgumentError);
}

TEST_CASE("param hash tracks values and respects filters") {
    ParameterSet ps;
    ps.add("backbone.w", Tensor::from({2}, {1.0f, 2.0f}));
    ps.add("head.w", Tensor::from({1}, {3.0f}));
    std::uint64_t h0 = param_hash(ps);
    std::uint64_t backbone_only = param_hash(ps, [](const std::string& n) { return n.starts_with("backbone."); });

    ps.at("head.w").value.data[0] = 4.0f;
    CHECK(param_hash(ps) != h0);
    CHECK(param_hash(ps, [](const std::string& n) { return n.starts_with("backbone."); }) == backbone_only);

    ps.at("backbone.w").value.data[0] = 0.0f;
    CHECK(param_hash(ps, [](const std::string& n) { return n.starts_with("backbone."); }) != backbone_only);
}

TEST_CASE("layer norm rows come out standardized under unit gain") {
    Rng rng(33);
    Tensor x = normal_tensor({6, 16}, 2.0, rng);
    Tensor g({16}), b({16});
    for (float& f : g.data) f = 1.0f;
    Tensor y = layer_norm_forward(x, g, b, 1e-5, nullptr);
    for (std::int64_t i = 0; i < 6; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::int64_t j = 0; j < 16; ++j) mu += y.at(i, j);
        mu /= 16.0;
        for (std::int64_t j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= 16.0;
        CHECK(std::abs(mu) < 1e-6);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}
