#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "gudrl/adam.hpp"
#include "gudrl/autodiff.hpp"

using namespace gudrl;
using gudrl::testing::gradient_error;
using gudrl::testing::random_tensor;
using gudrl::testing::weighted_sum;

namespace {

constexpr double kGradTol = 1e-4;

double grad_error_of(const std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>& build,
                     std::vector<Tensor> inputs) {
    return gradient_error(
        [&](ad::Tape& tape, std::vector<ad::Var>& v) { return weighted_sum(tape, build(tape, v)); }, inputs);
}

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("sigmoid at its symmetry point") {
    ad::Tape tape;
    Tensor x = Tensor::row({0.0});
    auto y = ad::sigmoid(tape.param(x));
    CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
    tape.backward(ad::sum(y));
    CHECK(x.grad[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("max_over_set is elementwise") {
    ad::Tape tape;
    ad::Var parts[] = {tape.constant({1, 2}, {1, 2}), tape.constant({1, 2}, {2, 1})};
    auto y = ad::max_over_set(parts);
    CHECK(y.values() == std::vector<double>{2, 2});
}

TEST_CASE("matmul hand dot product") {
    ad::Tape tape;
    auto y = ad::matmul(tape.constant({1, 2}, {1, 2}), tape.constant({2, 1}, {3, 4}));
    CHECK(y.values() == std::vector<double>{11});
}

TEST_CASE("cross entropy hand values") {
    struct Case {
        double l0, l1;
        std::size_t target;
        double expected;
    };
    const Case cases[] = {{0, 0, 0, std::log(2.0)},
                          {std::log(3.0), 0, 0, std::log(4.0 / 3.0)},
                          {std::log(3.0), 0, 1, std::log(4.0)}};
    for (const auto& c : cases) {
        ad::Tape tape;
        auto loss = ad::cross_entropy_loss(tape.constant({1, 2}, {c.l0, c.l1}), c.target);
        CHECK(loss.item() == doctest::Approx(c.expected).epsilon(1e-12));
    }
}

TEST_CASE("identity and product derivatives") {
    Tensor x = Tensor::row({2.0}), y = Tensor::row({3.0});
    {
        ad::Tape tape;
        tape.backward(ad::sum(tape.param(x)));
        CHECK(x.grad[0] == 1.0);
    }
    x.grad.clear();
    ad::Tape tape;
    tape.backward(ad::sum(ad::multiply(tape.param(x), tape.param(y))));
    CHECK(x.grad[0] == 3.0);
    CHECK(y.grad[0] == 2.0);
}

TEST_CASE("adam hand-iterated steps") {
    Tensor w = Tensor::row({1.0});
    AdamState st;
    Tensor* params[] = {&w};
    w.grad = {1.0};
    adam_step(params, st);
    CHECK(w.values[0] == doctest::Approx(0.999).epsilon(1e-9));
    CHECK(std::abs(w.values[0] - 0.999) < 1e-6);
    CHECK(w.grad == std::vector<double>{0.0});
    w.grad = {1.0};
    adam_step(params, st);
    CHECK(std::abs(w.values[0] - 0.998) < 1e-6);
    CHECK(st.step == 2);
}

TEST_CASE("every primitive matches central differences") {
    Rng rng(2024);
    for (int trial = 0; trial < 3; ++trial) {
        auto T = [&](std::vector<std::size_t> s) { return random_tensor(std::move(s), rng); };
        CAPTURE(trial);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::add(v[0], v[1]); }, {T({3, 4}), T({3, 4})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::add(v[0], v[1]); }, {T({3, 4}), T({4})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::multiply(v[0], v[1]); }, {T({3, 4}), T({3, 4})}) <
              kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::multiply(v[0], v[1]); }, {T({3, 4}), T({1, 4})}) <
              kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::multiply(v[0], v[0]); }, {T({2, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::scale(v[0], -1.7); }, {T({2, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::matmul(v[0], v[1]); }, {T({3, 5}), T({5, 2})}) <
              kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::concat(v); }, {T({3, 2}), T({3, 4}), T({3, 1})}) <
              kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::concat_rows(v); }, {T({1, 3}), T({2, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::slice_cols(v[0], 1, 4); }, {T({3, 5})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::slice_rows(v[0], 1, 3); }, {T({4, 2})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::sigmoid(v[0]); }, {T({3, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::tanh(v[0]); }, {T({3, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::relu(v[0]); }, {T({3, 3})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::max_over_set(v); }, {T({2, 3}), T({2, 3}), T({2, 3})}) <
              kGradTol);
        CHECK(grad_error_of(
                  [](auto&, auto& v) {
                      const std::size_t idx[] = {2, 0, 2, 1};
                      return ad::embed_lookup(v[0], idx);
                  },
                  {T({3, 4})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                            {T({3, 6}), T({1, 6}), T({1, 6})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::softmax(v[0]); }, {T({3, 4})}) < kGradTol);
        // 3 tokens, batch 2, width 4, 2 heads.
        CHECK(grad_error_of([](auto&, auto& v) { return ad::attention(v[0], v[1], v[2], 3, 2); },
                            {T({6, 4}), T({6, 4}), T({6, 4})}) < kGradTol);
        CHECK(grad_error_of(
                  [](auto&, auto& v) {
                      const std::size_t targets[] = {1, 0, 1};
                      const double weights[] = {0.5, 1.0, 2.0};
                      return ad::cross_entropy(v[0], targets, weights);
                  },
                  {T({3, 2})}) < kGradTol);
        CHECK(grad_error_of([](auto&, auto& v) { return ad::sum(v[0]); }, {T({2, 5})}) < kGradTol);
    }
}

}  // TEST_SUITE("oracle")

TEST_SUITE("property") {

TEST_CASE("softmax rows are probability vectors") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        ad::Tape tape;
        auto y = ad::softmax(tape.constant(random_tensor({4, 7}, rng, -30, 30)));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double p = y.values()[r * 7 + c];
                CHECK(p >= 0.0);
                s += p;
            }
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("gradient accumulation is linear") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = random_tensor({2, 3}, rng), w = random_tensor({3, 2}, rng);
        auto f = [&](ad::Tape& t) { return ad::sum(ad::tanh(ad::matmul(t.param(x), t.param(w)))); };
        auto g = [&](ad::Tape& t) { return ad::sum(ad::multiply(t.param(x), t.param(x))); };
        std::vector<double> gf, gg;
        {
            ad::Tape t;
            t.backward(f(t));
            gf = x.grad;
            x.grad.clear();
        }
        {
            ad::Tape t;
            t.backward(g(t));
            gg = x.grad;
            x.grad.clear();
        }
        ad::Tape t;
        t.backward(ad::add(f(t), g(t)));
        for (std::size_t i = 0; i < gf.size(); ++i) CHECK(x.grad[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-12));
    }
}

TEST_CASE("tape replay and repeated runs are bit identical") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 4}, rng), g = random_tensor({1, 4}, rng);
        auto run = [&] {
            a.grad.clear();
            b.grad.clear();
            ad::Tape tape;
            auto y = ad::layer_norm(ad::relu(ad::matmul(tape.param(a), tape.param(b))), tape.param(g), tape.param(g));
            auto loss = weighted_sum(tape, ad::softmax(y));
            CHECK(tape.replay());
            tape.backward(loss);
            return std::make_pair(loss.item(), a.grad);
        };
        auto first = run();
        auto second = run();
        CHECK(first.first == second.first);
        CHECK(first.second == second.second);
    }
}

}  // TEST_SUITE("property")

TEST_SUITE("unit") {

TEST_CASE("shape errors name the primitive and shapes") {
    ad::Tape tape;
    auto a = tape.constant({2, 3}, std::vector<double>(6, 0.0));
    auto b = tape.constant({2, 3}, std::vector<double>(6, 0.0));
    try {
        ad::matmul(a, b);
        FAIL("matmul accepted mismatched shapes");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
    ad::Var parts[] = {a, tape.constant({1, 3}, {0, 0, 0})};
    CHECK_THROWS_WITH_AS(ad::max_over_set(parts), doctest::Contains("max_over_set"), std::invalid_argument);
    CHECK_THROWS_AS(ad::cross_entropy_loss(tape.constant({1, 2}, {0, 0}), 2), std::invalid_argument);
}

TEST_CASE("backward rejects non-scalar losses") {
    ad::Tape tape;
    auto a = tape.constant({1, 2}, {1, 2});
    CHECK_THROWS_AS(tape.backward(a), std::invalid_argument);
}

TEST_CASE("adam rejects missing gradients and leaves zero-gradient params alone") {
    Tensor w = Tensor::row({1.0, -2.0});
    AdamState st;
    Tensor* params[] = {&w};
    const std::string names[] = {"w"};
    CHECK_THROWS_WITH(adam_step(params, st, names), doctest::Contains("w"));
    w.grad = {0.0, 0.0};
    adam_step(params, st);
    CHECK(w.values == std::vector<double>{1.0, -2.0});
}

TEST_CASE("global norm clipping") {
    Tensor a = Tensor::row({3.0}), b = Tensor::row({4.0});
    a.grad = {3.0};
    b.grad = {4.0};
    Tensor* params[] = {&a, &b};
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad[0] == doctest::Approx(0.6));
    CHECK(b.grad[0] == doctest::Approx(0.8));
}

}  // TEST_SUITE("unit")
