#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "cmgen/adam.hpp"
#include "cmgen/errors.hpp"
#include "cmgen/rng.hpp"
#include "cmgen/tensor.hpp"
#include "cmgen/tokenizer.hpp"

#include "helpers.hpp"

using namespace cmgen;
using testutil::grad_check;
using testutil::rel_err;

namespace {

Tensor randn(Shape shape, Rng& rng, bool requires_grad = true) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

} // namespace

TEST_CASE("matmul matches hand arithmetic and an independent oracle") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {5, 6});
    Tensor c = matmul(a, b);
    CHECK(c.values() == std::vector<double>{17, 39});

    Rng rng(42);
    Tensor x = randn({3, 4}, rng, false);
    Tensor y = randn({4, 5}, rng, false);
    Tensor z = matmul(x, y);
    // j-i-p loop order, accumulated separately from the implementation
    for (size_t j = 0; j < 5; ++j) {
        for (size_t i = 0; i < 3; ++i) {
            double acc = 0.0;
            for (size_t p = 0; p < 4; ++p) acc += x.at(i, p) * y.at(p, j);
            CHECK(z.at(i, j) == doctest::Approx(acc).epsilon(1e-14));
        }
    }
}

TEST_CASE("elementwise forward values") {
    Tensor a({2, 2}, {1, -2, 3, 0});
    Tensor b({2, 2}, {4, 5, -6, 2});
    CHECK(add(a, b).values() == std::vector<double>{5, 3, -3, 2});
    CHECK(sub(a, b).values() == std::vector<double>{-3, -7, 9, -2});
    CHECK(mul(a, b).values() == std::vector<double>{4, -10, -18, 0});
    CHECK(scale(a, 2.0).values() == std::vector<double>{2, -4, 6, 0});
    CHECK(add_scalar(a, 1.0).values() == std::vector<double>{2, -1, 4, 1});
    CHECK(relu(a).values() == std::vector<double>{1, 0, 3, 0});
    CHECK(sigmoid(Tensor({1}, {0.0})).item() == 0.5);
    CHECK(sigmoid(Tensor({1}, {50.0})).item() == 1.0);  // saturates exactly
    CHECK(cmgen::exp(Tensor({1}, {1.0})).item() == doctest::Approx(std::exp(1.0)));
    CHECK(cmgen::log(cmgen::exp(Tensor({1}, {0.7}))).item() ==
          doctest::Approx(0.7).epsilon(1e-14));
    CHECK(sum(a).item() == 2.0);
    CHECK(transpose(a).values() == std::vector<double>{1, 3, -2, 0});

    Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor v({3}, {10, 20, 30});
    CHECK(add_rowvec(m, v).values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK(mul_rowvec(m, v).values() == std::vector<double>{10, 40, 90, 40, 100, 180});
    CHECK(scale_by(m, Tensor::scalar(2.0)).values() ==
          std::vector<double>{2, 4, 6, 8, 10, 12});

    CHECK(slice_rows(m, 1, 1).values() == std::vector<double>{4, 5, 6});
    CHECK(slice_cols(m, 1, 2).values() == std::vector<double>{2, 3, 5, 6});
    Tensor left({2, 1}, {1, 4});
    Tensor right({2, 2}, {2, 3, 5, 6});
    CHECK(concat_cols({left, right}).values() == std::vector<double>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("softmax rows are distributions and match direct arithmetic") {
    Tensor x({2, 3}, {1, 2, 3, -1, 0, 1});
    Tensor p = softmax(x, 1);
    for (size_t i = 0; i < 2; ++i) {
        double row_sum = p.at(i, 0) + p.at(i, 1) + p.at(i, 2);
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
        double denom = 0.0;
        for (size_t j = 0; j < 3; ++j) denom += std::exp(x.at(i, j));
        for (size_t j = 0; j < 3; ++j)
            CHECK(p.at(i, j) == doctest::Approx(std::exp(x.at(i, j)) / denom));
    }

    // a -1e9 additive mask must underflow to an exactly zero probability
    Tensor masked({1, 2}, {0.0, -1e9});
    Tensor mp = softmax(masked, 1);
    CHECK(mp.at(0, 0) == 1.0);
    CHECK(mp.at(0, 1) == 0.0);

    Tensor col = softmax(x, 0);
    for (size_t j = 0; j < 3; ++j) {
        double s = col.at(0, j) + col.at(1, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    Tensor flat({3}, {0.5, 1.0, -2.0});
    Tensor fp = softmax(flat, 0);
    double total = std::accumulate(fp.values().begin(), fp.values().end(), 0.0);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm normalizes each row") {
    Tensor gain({4}, {1, 1, 1, 1});
    Tensor bias({4}, {0, 0, 0, 0});
    Tensor x({2, 4}, {1, 2, 3, 4, -5, 0, 5, 10});
    Tensor y = layer_norm(x, gain, bias);
    for (size_t i = 0; i < 2; ++i) {
        double mean = 0.0, var = 0.0;
        for (size_t j = 0; j < 4; ++j) mean += y.at(i, j);
        mean /= 4.0;
        for (size_t j = 0; j < 4; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        var /= 4.0;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps shrinks it slightly
    }

    Tensor g2({4}, {2, 2, 2, 2});
    Tensor b2({4}, {1, 1, 1, 1});
    Tensor y2 = layer_norm(x, g2, b2);
    for (size_t i = 0; i < 2; ++i)
        for (size_t j = 0; j < 4; ++j)
            CHECK(y2.at(i, j) == doctest::Approx(2.0 * y.at(i, j) + 1.0));
}

TEST_CASE("cross entropy matches log-sum-exp arithmetic") {
    Tensor uniform({1, 2}, {0.0, 0.0});
    CHECK(cross_entropy(uniform, {1}, kPadId).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-14));

    Tensor logits({2, 3}, {1, 2, 3, 0.5, -0.5, 0.25});
    std::vector<int> targets{2, 1};
    double expected = 0.0;
    for (size_t i = 0; i < 2; ++i) {
        double denom = 0.0;
        for (size_t j = 0; j < 3; ++j) denom += std::exp(logits.at(i, j));
        expected += std::log(denom) - logits.at(i, static_cast<size_t>(targets[i]));
    }
    expected /= 2.0;
    CHECK(cross_entropy(logits, targets, kPadId).item() ==
          doctest::Approx(expected).epsilon(1e-12));

    // padded positions contribute nothing
    std::vector<int> padded{2, kPadId};
    size_t count = 0;
    Tensor s = cross_entropy_sum(logits, padded, kPadId, &count);
    CHECK(count == 1);
    double denom0 = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(s.item() == doctest::Approx(std::log(denom0) - 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{kPadId, kPadId}, kPadId),
                    DegenerateInputError);
}

TEST_CASE("gradients match central finite differences") {
    Rng rng(7);

    auto check_ok = [](std::vector<Tensor> params, const std::function<Tensor()>& fn) {
        auto res = grad_check(params, fn);
        CAPTURE(res.param_index);
        CAPTURE(res.element);
        CHECK(res.max_rel_err < 1e-4);
    };

    SUBCASE("matmul both operands") {
        Tensor a = randn({3, 4}, rng);
        Tensor b = randn({4, 2}, rng);
        check_ok({a, b}, [&] { return sum(matmul(a, b)); });
        // weighted so every output element has a distinct downstream weight
        Tensor w = randn({3, 2}, rng, false);
        check_ok({a, b}, [&] { return sum(mul(matmul(a, b), w)); });
    }
    SUBCASE("transpose") {
        Tensor a = randn({3, 2}, rng);
        Tensor w = randn({2, 3}, rng, false);
        check_ok({a}, [&] { return sum(mul(transpose(a), w)); });
    }
    SUBCASE("add sub mul") {
        Tensor a = randn({2, 3}, rng);
        Tensor b = randn({2, 3}, rng);
        Tensor w = randn({2, 3}, rng, false);
        check_ok({a, b}, [&] { return sum(mul(add(a, b), w)); });
        check_ok({a, b}, [&] { return sum(mul(sub(a, b), w)); });
        check_ok({a, b}, [&] { return sum(mul(mul(a, b), w)); });
    }
    SUBCASE("row-vector broadcasts") {
        Tensor x = randn({3, 4}, rng);
        Tensor v = randn({4}, rng);
        Tensor w = randn({3, 4}, rng, false);
        check_ok({x, v}, [&] { return sum(mul(add_rowvec(x, v), w)); });
        check_ok({x, v}, [&] { return sum(mul(mul_rowvec(x, v), w)); });
    }
    SUBCASE("scalar gate") {
        Tensor x = randn({2, 3}, rng);
        Tensor s = randn({1}, rng);
        Tensor w = randn({2, 3}, rng, false);
        check_ok({x, s}, [&] { return sum(mul(scale_by(x, s), w)); });
    }
    SUBCASE("unary maps") {
        Tensor x = randn({2, 3}, rng);
        Tensor w = randn({2, 3}, rng, false);
        check_ok({x}, [&] { return sum(mul(scale(x, 1.7), w)); });
        check_ok({x}, [&] { return sum(mul(add_scalar(x, 0.3), w)); });
        check_ok({x}, [&] { return sum(mul(sigmoid(x), w)); });
        check_ok({x}, [&] { return sum(mul(cmgen::exp(x), w)); });
        Tensor pos({2, 2}, {0.5, 1.5, 2.5, 0.25}, true);
        Tensor wp = randn({2, 2}, rng, false);
        check_ok({pos}, [&] { return sum(mul(cmgen::log(pos), wp)); });
        Tensor far({2, 2}, {0.9, -1.1, 2.2, -0.7}, true);  // away from the relu kink
        check_ok({far}, [&] { return sum(mul(relu(far), wp)); });
    }
    SUBCASE("softmax both axes") {
        Tensor x = randn({3, 4}, rng);
        Tensor w = randn({3, 4}, rng, false);
        check_ok({x}, [&] { return sum(mul(softmax(x, 1), w)); });
        check_ok({x}, [&] { return sum(mul(softmax(x, 0), w)); });
        Tensor flat = randn({5}, rng);
        Tensor wf = randn({5}, rng, false);
        check_ok({flat}, [&] { return sum(mul(softmax(flat, 0), wf)); });
    }
    SUBCASE("layer_norm inputs gain and bias") {
        Tensor x = randn({3, 6}, rng);
        Tensor g = randn({6}, rng);
        Tensor b = randn({6}, rng);
        Tensor w = randn({3, 6}, rng, false);
        check_ok({x, g, b}, [&] { return sum(mul(layer_norm(x, g, b), w)); });
    }
    SUBCASE("embedding gather with repeated ids") {
        Tensor table = randn({5, 3}, rng);
        std::vector<int> ids{1, 3, 1, 0, 1};
        Tensor w = randn({5, 3}, rng, false);
        check_ok({table}, [&] { return sum(mul(embedding_rows(table, ids), w)); });
    }
    SUBCASE("slices and concat") {
        Tensor x = randn({4, 5}, rng);
        Tensor w1 = randn({2, 5}, rng, false);
        check_ok({x}, [&] { return sum(mul(slice_rows(x, 1, 2), w1)); });
        Tensor w2 = randn({4, 2}, rng, false);
        check_ok({x}, [&] { return sum(mul(slice_cols(x, 2, 2), w2)); });
        Tensor a = randn({3, 2}, rng);
        Tensor b = randn({3, 3}, rng);
        Tensor wc = randn({3, 5}, rng, false);
        check_ok({a, b}, [&] { return sum(mul(concat_cols({a, b}), wc)); });
    }
    SUBCASE("dropout with a frozen mask") {
        Tensor x = randn({4, 4}, rng);
        Tensor w = randn({4, 4}, rng, false);
        check_ok({x}, [&] {
            Rng mask_rng(123);  // same mask on every evaluation
            return sum(mul(dropout(x, 0.3, mask_rng, true), w));
        });
    }
    SUBCASE("cross entropy logits") {
        Tensor logits = randn({4, 6}, rng);
        std::vector<int> targets{2, kPadId, 5, 1};  // one padded position
        check_ok({logits}, [&] { return cross_entropy(logits, targets, kPadId); });
    }
    SUBCASE("composite expression") {
        Tensor a = randn({2, 3}, rng);
        Tensor b = randn({3, 3}, rng);
        Tensor g = randn({3}, rng);
        Tensor bias = randn({3}, rng);
        check_ok({a, b, g, bias}, [&] {
            Tensor h = layer_norm(matmul(a, b), g, bias);
            return cross_entropy(h, {0, 2}, kPadId);
        });
    }
}

TEST_CASE("backward accumulates gradients additively") {
    Tensor x({2}, {3.0, -1.0}, true);
    Tensor loss = sum(add(x, x));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{2.0, 2.0});

    // a second graph over the same leaf adds to the existing gradient
    Tensor loss2 = sum(scale(x, 3.0));
    backward(loss2);
    CHECK(x.grad() == std::vector<double>{5.0, 5.0});

    x.zero_grad();
    CHECK(x.grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("backward requires a single-element root") {
    Tensor x({2, 2}, {1, 2, 3, 4}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("tape is released after backward") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor mid = mul(x, x);
    Tensor loss = sum(mid);
    CHECK_FALSE(loss.node()->parents.empty());
    backward(loss);
    CHECK(loss.node()->parents.empty());
    CHECK(loss.node()->backward_fn == nullptr);
    CHECK(mid.node()->parents.empty());
    // leaf keeps its gradient
    CHECK(x.grad() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x({2, 2}, {1, 2, 3, 4}, true);
    NoGradGuard guard;
    Tensor y = matmul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
    CHECK(y.node()->backward_fn == nullptr);
}

TEST_CASE("ops never mutate their inputs") {
    Rng rng(99);
    Tensor a = randn({3, 3}, rng);
    Tensor b = randn({3, 3}, rng);
    std::vector<double> a0 = a.values(), b0 = b.values();
    (void)matmul(a, b);
    (void)add(a, b);
    (void)mul(a, b);
    (void)softmax(a, 1);
    (void)relu(a);
    (void)transpose(a);
    Tensor loss = sum(mul(matmul(a, b), b));
    backward(loss);
    CHECK(a.values() == a0);
    CHECK(b.values() == b0);
}

TEST_CASE("shape and domain violations raise typed errors") {
    Tensor a({2, 3}, 1.0);
    Tensor b({2, 3}, 1.0);
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    CHECK_THROWS_AS(add(a, Tensor({3, 2}, 1.0)), DimensionError);
    CHECK_THROWS_AS(softmax(a, 2), DimensionError);
    CHECK_THROWS_AS(layer_norm(Tensor({3, 1}, 1.0), Tensor({1}, 1.0), Tensor({1}, 1.0)),
                    DimensionError);  // needs at least 2 features
    CHECK_THROWS_AS(layer_norm(Tensor({2, 2, 2}, 1.0), Tensor({2}, 1.0),
                               Tensor({2}, 1.0)),
                    DimensionError);
    CHECK_THROWS_AS(embedding_rows(a, {}), DegenerateInputError);
    CHECK_THROWS_AS(embedding_rows(a, {2}), IndexError);
    CHECK_THROWS_AS(embedding_rows(a, {-1}), IndexError);
    CHECK_THROWS_AS(Tensor({0, 2}, 1.0), DimensionError);
    CHECK_THROWS_AS(a.item(), ContractError);
    Rng rng(1);
    CHECK_THROWS_AS(dropout(a, 1.0, rng, true), ContractError);
    CHECK_THROWS_AS(dropout(a, -0.1, rng, true), ContractError);
    CHECK_THROWS_AS(cross_entropy(a, {0}, kPadId), DimensionError);
    CHECK_THROWS_AS(cross_entropy(a, {0, 3}, kPadId), IndexError);
}

TEST_CASE("dropout semantics") {
    Rng rng(5);
    Tensor x({100, 10}, 1.0, true);

    Tensor eval_out = dropout(x, 0.5, rng, false);
    CHECK(eval_out.values() == x.values());  // evaluation is the identity

    Tensor zero_p = dropout(x, 0.0, rng, true);
    CHECK(zero_p.values() == x.values());

    Tensor trained = dropout(x, 0.25, rng, true);
    size_t zeros = 0;
    double kept_value = 0.0;
    for (double v : trained.values()) {
        if (v == 0.0)
            ++zeros;
        else
            kept_value = v;
    }
    double drop_rate = static_cast<double>(zeros) / trained.size();
    CHECK(drop_rate > 0.2);
    CHECK(drop_rate < 0.3);
    CHECK(kept_value == doctest::Approx(1.0 / 0.75));  // inverted scaling
}

TEST_CASE("adam follows the reference recurrence") {
    auto reference = [](double x0, double g, size_t steps, const AdamState& base) {
        double x = x0, m = 0.0, v = 0.0;
        for (size_t t = 1; t <= steps; ++t) {
            m = base.beta1 * m + (1 - base.beta1) * g;
            v = base.beta2 * v + (1 - base.beta2) * g * g;
            double mh = m / (1 - std::pow(base.beta1, static_cast<double>(t)));
            double vh = v / (1 - std::pow(base.beta2, static_cast<double>(t)));
            x -= base.lr * mh / (std::sqrt(vh) + base.eps);
        }
        return x;
    };

    AdamState state;
    state.lr = 0.1;
    Tensor p({1}, {2.0}, true);
    std::vector<Tensor> params{p};
    for (size_t t = 0; t < 5; ++t) {
        p.zero_grad();
        p.mutable_grad()[0] = 0.5;
        adam_step(params, state);
    }
    CHECK(p.values()[0] == doctest::Approx(reference(2.0, 0.5, 5, state)).epsilon(1e-14));
    CHECK(state.step == 5);

    // zero gradient leaves the parameter untouched
    Tensor q({2}, {1.0, -1.0}, true);
    AdamState s2;
    std::vector<Tensor> params2{q};
    q.zero_grad();
    adam_step(params2, s2);
    CHECK(q.values() == std::vector<double>{1.0, -1.0});

    // a parameter without a gradient buffer counts as zero gradient
    Tensor r({2}, {3.0, 4.0}, true);
    std::vector<Tensor> params3{r};
    AdamState s3;
    adam_step(params3, s3);
    CHECK(r.values() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("rng streams are deterministic, stateful and splittable") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    auto snapshot = a.state();
    std::vector<uint64_t> ahead;
    for (int i = 0; i < 10; ++i) ahead.push_back(a.next_u64());
    a.set_state(snapshot);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == ahead[static_cast<size_t>(i)]);

    RngStreams s1(9), s2(9);
    CHECK(s1.init.next_u64() == s2.init.next_u64());
    CHECK(s1.dropout.next_u64() == s2.dropout.next_u64());
    RngStreams s3(9);
    std::set<uint64_t> firsts{Rng(s3.init.state()[0]).next_u64()};
    CHECK(s3.init.next_u64() != s3.dropout.next_u64());
    CHECK(s3.noise.next_u64() != s3.order.next_u64());

    Rng u(77);
    for (int i = 0; i < 1000; ++i) {
        double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
        size_t k = u.uniform_index(7);
        CHECK(k < 7);
    }
    CHECK_THROWS_AS(u.uniform_index(0), ContractError);

    Rng n(88);
    double mean = 0.0, sq = 0.0;
    const int kDraws = 20000;
    for (int i = 0; i < kDraws; ++i) {
        double x = n.normal();
        mean += x;
        sq += x * x;
    }
    mean /= kDraws;
    double stddev = std::sqrt(sq / kDraws - mean * mean);
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(stddev - 1.0) < 0.03);

    std::vector<int> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    Rng sh(3);
    sh.shuffle(perm);
    std::set<int> uniq(perm.begin(), perm.end());
    CHECK(uniq.size() == 20);
}
