#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "easydistill/tensor.hpp"

using namespace easydistill;

namespace {

TensorPtr random_tensor(std::vector<int> shape, std::mt19937_64& rng,
                        bool requires_grad = false, double scl = 1.0) {
    std::size_t n = shape_numel(shape);
    std::vector<double> d(n);
    std::uniform_real_distribution<double> u(-scl, scl);
    for (auto& v : d) v = u(rng);
    return Tensor::create(std::move(shape), std::move(d), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and small cases") {
    Tape t;
    auto eye = Tensor::create({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::create({2, 2}, {1, 2, 3, 4});
    auto r = t.matmul(eye, a);
    CHECK(r->data == std::vector<double>{1, 2, 3, 4});

    auto row = Tensor::create({1, 2}, {1, 2});
    auto col = Tensor::create({2, 1}, {3, 4});
    CHECK(t.matmul(row, col)->item() == doctest::Approx(11).epsilon(1e-15));
}

TEST_CASE("matmul matches triple-loop oracle") {
    std::mt19937_64 rng(7);
    auto a = random_tensor({5, 7}, rng);
    auto b = random_tensor({7, 3}, rng);
    Tape t;
    auto r = t.matmul(a, b);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int p = 0; p < 7; ++p) s += a->data[i * 7 + p] * b->data[p * 3 + j];
            CHECK(r->data[i * 3 + j] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("matmul shape mismatch reports both shapes") {
    Tape t;
    auto a = Tensor::create({2, 3}, std::vector<double>(6, 0.0));
    auto b = Tensor::create({2, 2}, std::vector<double>(4, 0.0));
    CHECK_THROWS_WITH_AS(t.matmul(a, b),
                         doctest::Contains("[2x3]"), TensorError);
}

TEST_CASE("softmax basics") {
    Tape t;
    auto r = t.softmax(Tensor::create({2}, {0, 0}));
    CHECK(r->data[0] == doctest::Approx(0.5).epsilon(1e-15));

    // large logits must not overflow
    auto s = t.softmax(Tensor::create({2}, {1000, 0}));
    CHECK(s->data[0] == doctest::Approx(1.0));
    CHECK(s->data[1] == doctest::Approx(0.0));

    auto v = t.softmax(Tensor::create({3}, {1, 2, 3}));
    long double denom = expl(1.0L) + expl(2.0L) + expl(3.0L);
    for (int j = 0; j < 3; ++j)
        CHECK(std::abs(v->data[j] - (double)(expl(1.0L + j) / denom)) < 1e-12);
    double sum = v->data[0] + v->data[1] + v->data[2];
    CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("log_softmax consistency and shift invariance") {
    Tape t;
    auto r = t.log_softmax(Tensor::create({2}, {0, 0}));
    CHECK(r->data[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

    std::mt19937_64 rng(11);
    auto x = random_tensor({4, 9}, rng, false, 3.0);
    auto ls = t.log_softmax(x);
    auto sm = t.softmax(x);
    for (std::size_t i = 0; i < x->size(); ++i)
        CHECK(std::abs(ls->data[i] - std::log(sm->data[i])) < 1e-10);

    auto shifted = Tensor::create(x->shape, x->data);
    for (auto& v : shifted->data) v += 17.5;
    auto ls2 = t.log_softmax(shifted);
    auto sm2 = t.softmax(shifted);
    for (std::size_t i = 0; i < x->size(); ++i) {
        CHECK(std::abs(ls->data[i] - ls2->data[i]) < 1e-10);
        CHECK(std::abs(sm->data[i] - sm2->data[i]) < 1e-10);
    }
}

TEST_CASE("elementwise op basics") {
    Tape t;
    auto g = Tensor::create({1}, {1.0});
    auto b = Tensor::create({1}, {0.0});
    // constant vector normalizes to zero before affine
    auto ln = t.layernorm(Tensor::create({4}, {3, 3, 3, 3}),
                          Tensor::create({4}, {1, 1, 1, 1}),
                          Tensor::create({4}, {0, 0, 0, 0}));
    for (double v : ln->data) CHECK(v == doctest::Approx(0.0));

    CHECK(t.gelu(Tensor::scalar(0.0))->item() == 0.0);

    auto picked = t.gather(Tensor::create({1, 3}, {.1, .2, .7}), {2});
    CHECK(picked->data[0] == doctest::Approx(0.7));
}

TEST_CASE("sum_masked rejects a zero mask as masked mean") {
    Tape t;
    auto x = Tensor::create({3}, {1, 2, 3});
    auto mask = Tensor::create({3}, {0, 0, 0});
    CHECK_THROWS_AS(t.sum_masked(x, mask, true), TensorError);
    CHECK(t.sum_masked(x, mask, false)->item() == 0.0);
}

TEST_CASE("non-finite op outputs are rejected") {
    Tape t;
    auto big = Tensor::create({1}, {1e308});
    CHECK_THROWS_AS(t.add(big, big), TensorError);
}

TEST_CASE("backward on simple graphs") {
    {
        Tape t;
        auto x = Tensor::create({3}, {1, 2, 3}, true);
        auto loss = t.sum(x);
        t.backward(loss);
        CHECK(x->grad == std::vector<double>{1, 1, 1});
    }
    {
        Tape t;
        auto x = Tensor::scalar(3.0, true);
        auto loss = t.mul(x, x);
        t.backward(loss);
        CHECK(x->grad[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape t;
    auto x = Tensor::create({2}, {1, 2}, true);
    auto y = t.scale(x, 2.0);
    CHECK_THROWS_AS(t.backward(y), TensorError);
}

TEST_CASE("repeated backward accumulates") {
    Tape t;
    auto x = Tensor::scalar(3.0, true);
    auto loss = t.mul(x, x);
    t.backward(loss);
    loss->zero_grad();
    t.backward(loss);
    CHECK(x->grad[0] == doctest::Approx(12.0));
}

TEST_CASE("diamond graph accumulates both paths") {
    // y = x*x + 2x -> dy/dx = 2x + 2 = 8 at x=3
    Tape t;
    auto x = Tensor::scalar(3.0, true);
    auto loss = t.add(t.mul(x, x), t.scale(x, 2.0));
    t.backward(loss);
    CHECK(x->grad[0] == doctest::Approx(8.0));
}

TEST_CASE("grad_check on basic functions") {
    auto sum_f = [](Tape& t, const TensorPtr& x) { return t.sum(x); };
    std::mt19937_64 rng(3);
    auto x = random_tensor({5}, rng);
    CHECK(grad_check(sum_f, x) <= 1e-10);
}

TEST_CASE("grad_check across differentiable ops") {
    std::mt19937_64 rng(99);
    using F = std::function<TensorPtr(Tape&, const TensorPtr&)>;
    std::mt19937_64 wrng(5);
    auto w = random_tensor({4, 6}, wrng);
    auto wt = random_tensor({5, 4}, wrng);
    auto gain = random_tensor({4}, wrng, false, 0.5);
    auto bias = random_tensor({4}, wrng, false, 0.5);
    std::vector<std::pair<const char*, F>> cases = {
        {"matmul", [&](Tape& t, const TensorPtr& x) { return t.mean(t.matmul(x, w)); }},
        {"matmul_nt", [&](Tape& t, const TensorPtr& x) {
             return t.mean(t.matmul_nt(x, wt));
         }},
        {"softmax", [](Tape& t, const TensorPtr& x) { return t.mean(t.mul(t.softmax(x), x)); }},
        {"log_softmax", [](Tape& t, const TensorPtr& x) {
             return t.mean(t.mul(t.log_softmax(x), x));
         }},
        {"gelu", [](Tape& t, const TensorPtr& x) { return t.mean(t.gelu(x)); }},
        {"layernorm", [&](Tape& t, const TensorPtr& x) {
             return t.mean(t.mul(t.layernorm(x, gain, bias), x));
         }},
        {"exp", [](Tape& t, const TensorPtr& x) { return t.mean(t.exp(x)); }},
        {"log_sigmoid", [](Tape& t, const TensorPtr& x) { return t.mean(t.log_sigmoid(x)); }},
        {"slice_concat", [](Tape& t, const TensorPtr& x) {
             auto a = t.slice_last(x, 0, 2);
             auto b = t.slice_last(x, 2, x->shape.back() - 2);
             return t.mean(t.mul(t.concat_last({b, a}), x));
         }},
        {"sum_last", [](Tape& t, const TensorPtr& x) {
             return t.mean(t.exp(t.scale(t.sum_last(x), 0.25)));
         }},
    };
    for (auto& [name, f] : cases) {
        for (int rep = 0; rep < 10; ++rep) {
            auto x = random_tensor({3, 4}, rng);
            INFO(name << " rep " << rep);
            CHECK(grad_check(f, x) <= 1e-4);
        }
    }
}

TEST_CASE("grad_check minimum and clamp") {
    std::mt19937_64 rng(123);
    auto other = random_tensor({8}, rng);
    auto f = [&](Tape& t, const TensorPtr& x) {
        return t.mean(t.minimum(t.clamp(x, -0.5, 0.5), other));
    };
    for (int rep = 0; rep < 10; ++rep) {
        auto x = random_tensor({8}, rng);
        CHECK(grad_check(f, x) <= 1e-4);
    }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
    std::mt19937_64 rng(17);
    auto a = random_tensor({6, 6}, rng);
    auto b = random_tensor({6, 6}, rng);
    Tape t1, t2;
    auto r1 = t1.softmax(t1.matmul(a, b));
    auto r2 = t2.softmax(t2.matmul(a, b));
    CHECK(r1->data == r2->data);
}
