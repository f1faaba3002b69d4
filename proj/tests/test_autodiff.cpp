#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "peml/tensor.hpp"

using namespace peml;

namespace {

// Random tensor with entries in [-2, 2], small shapes.
TensorPtr random_tensor(std::vector<int> shape, Rng& rng) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = rng.uniform(-2.0, 2.0);
    return make_tensor(std::move(shape), std::move(d));
}

}  // namespace

TEST_CASE("softmax on uniform logits") {
    auto x = make_tensor({3}, {0.0, 0.0, 0.0});
    auto y = softmax(x);
    for (double v : y->data) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and are nonnegative") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor({4, 5}, rng);
        auto y = softmax(x);
        for (int i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int j = 0; j < 5; ++j) {
                CHECK(y->at(i, j) >= 0.0);
                s += y->at(i, j);
            }
            CHECK(s == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("layer norm zeroes a constant vector before gain and bias") {
    auto x = full({1, 6}, 3.7);
    auto gain = full({6}, 1.0);
    auto bias = zeros({6});
    auto y = layer_norm(x, gain, bias);
    for (double v : y->data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("activation definitional points") {
    auto x = make_tensor({3}, {0.0, -1.0, -1.0});
    CHECK(gelu(x)->data[0] == 0.0);
    CHECK(relu(x)->data[1] == 0.0);
    CHECK(leaky_relu(x)->data[2] == Catch::Approx(-0.01));
}

TEST_CASE("backward: quadratic derivative") {
    auto w = make_tensor({2}, {1.0, 2.0}, true);
    auto loss = sum(mul(w, w));
    backward(loss);
    CHECK(w->grad[0] == Catch::Approx(2.0));
    CHECK(w->grad[1] == Catch::Approx(4.0));
}

TEST_CASE("backward: detached tensor gets zero grad") {
    auto w = make_tensor({2}, {1.0, 2.0}, true);
    auto v = make_tensor({2}, {3.0, 4.0}, true);
    auto loss = sum(mul(v, v));
    backward(loss);
    // w never entered the graph; grad stays unpopulated/zero
    w->ensure_grad();
    CHECK(w->grad[0] == 0.0);
    CHECK(w->grad[1] == 0.0);
}

TEST_CASE("backward: closed-form cross-entropy gradient") {
    auto logits = make_tensor({1, 2}, {0.0, 0.0}, true);
    auto loss = cross_entropy_logits(logits, {0});
    backward(loss);
    CHECK(logits->grad[0] == Catch::Approx(-0.5).margin(1e-12));
    CHECK(logits->grad[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("backward rejects non-scalar loss") {
    auto w = make_tensor({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(mul(w, w)), ContractError);
}

TEST_CASE("gradients accumulate across fan-out") {
    auto w = make_tensor({2}, {1.0, 2.0}, true);
    auto loss = sum(add(w, w));  // dL/dw = 2
    backward(loss);
    CHECK(w->grad[0] == Catch::Approx(2.0));
    CHECK(w->grad[1] == Catch::Approx(2.0));
}

TEST_CASE("backward is linear in the loss") {
    Rng rng(11);
    auto x0 = random_tensor({3, 3}, rng);
    const double a = 1.7, b = -0.6;
    auto grad_of = [&](auto make_loss) {
        auto x = make_tensor(x0->shape, x0->data, true);
        backward(make_loss(x));
        return x->grad;
    };
    auto f = [](const TensorPtr& x) { return sum(mul(x, x)); };
    auto g = [](const TensorPtr& x) { return sum(tanh_op(x)); };
    auto gf = grad_of(f);
    auto gg = grad_of(g);
    auto gc = grad_of([&](const TensorPtr& x) {
        return add(scale(f(x), a), scale(g(x), b));
    });
    for (size_t i = 0; i < gc.size(); ++i)
        CHECK(gc[i] == Catch::Approx(a * gf[i] + b * gg[i]).margin(1e-12));
}

TEST_CASE("finite differences: sum of squares") {
    Rng rng(3);
    auto x = random_tensor({4}, rng);
    double err = finite_diff_check([](const TensorPtr& t) { return sum(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("finite differences: cross-entropy of 3-class logits") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({1, 3}, rng);
        double err = finite_diff_check(
            [](const TensorPtr& t) { return cross_entropy_logits(t, {1}); }, x, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("every primitive matches central finite differences") {
    Rng rng(42);
    auto check = [&](const char* name, std::vector<int> shape,
                     std::function<TensorPtr(const TensorPtr&)> f) {
        for (int seed = 0; seed < 20; ++seed) {
            auto x = random_tensor(shape, rng);
            INFO(name << " seed " << seed);
            CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
        }
    };
    check("matmul", {3, 4}, [](const TensorPtr& t) {
        auto w = make_tensor({4, 2}, {0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.4, -1.3});
        return sum(matmul(t, w));
    });
    check("matmul_rhs", {4, 2}, [](const TensorPtr& t) {
        auto a = make_tensor({2, 4}, {0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.4, -1.3});
        return sum(tanh_op(matmul(a, t)));
    });
    check("add_rowvec", {5}, [](const TensorPtr& t) {
        auto m = make_tensor({2, 5}, std::vector<double>(10, 0.4));
        return sum(mul(add_rowvec(m, t), add_rowvec(m, t)));
    });
    check("softmax", {2, 4}, [](const TensorPtr& t) {
        auto p = softmax(t);
        auto w = make_tensor({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
        return sum(mul(p, w));
    });
    check("relu", {6}, [](const TensorPtr& t) { return sum(mul(relu(t), relu(t))); });
    check("leaky_relu", {6}, [](const TensorPtr& t) { return sum(mul(leaky_relu(t), leaky_relu(t))); });
    check("tanh", {6}, [](const TensorPtr& t) { return sum(tanh_op(t)); });
    check("gelu", {6}, [](const TensorPtr& t) { return sum(gelu(t)); });
    check("layer_norm_x", {2, 5}, [](const TensorPtr& t) {
        auto gain = make_tensor({5}, {1.0, 0.5, 2.0, -1.0, 0.3});
        auto bias = make_tensor({5}, {0.1, -0.2, 0.0, 0.4, 0.9});
        return sum(mul(layer_norm(t, gain, bias), layer_norm(t, gain, bias)));
    });
    check("layer_norm_gain", {5}, [](const TensorPtr& t) {
        auto x = make_tensor({2, 5}, {1, -2, 3, 0.5, -1, 2, 0, 1, -0.5, 4});
        auto bias = zeros({5});
        return sum(mul(layer_norm(x, t, bias), layer_norm(x, t, bias)));
    });
    check("transpose", {3, 2}, [](const TensorPtr& t) { return sum(mul(transpose(t), transpose(t))); });
    check("slice_concat", {2, 6}, [](const TensorPtr& t) {
        auto a = slice_cols(t, 0, 3);
        auto b = slice_cols(t, 3, 3);
        return sum(mul(concat_cols({b, a}), concat_cols({b, a})));
    });
    check("concat_rows", {2, 3}, [](const TensorPtr& t) {
        auto other = make_tensor({1, 3}, {0.5, -0.5, 1.5});
        auto c = concat_rows(t, other);
        return sum(mul(c, c));
    });
    check("mean_rows", {4, 3}, [](const TensorPtr& t) {
        return sum(mul(mean_rows(t), mean_rows(t)));
    });
    check("mse", {5}, [](const TensorPtr& t) {
        return mse(t, {0.1, 0.2, 0.3, 0.4, 0.5});
    });
    check("log", {4}, [](const TensorPtr& t) {
        auto p = softmax(t);
        return sum(mul(p, log_op(p)));
    });
    check("neg_xlogx", {4}, [](const TensorPtr& t) { return sum(neg_xlogx(softmax(t))); });
    check("cross_entropy_batch", {3, 4}, [](const TensorPtr& t) {
        return cross_entropy_logits(t, {0, 2, 3});
    });
    check("embedding", {4, 3}, [](const TensorPtr& t) {
        auto e = embedding(t, {1, 3, 1});
        return sum(mul(e, e));
    });
    check("dropout_train", {3, 4}, [](const TensorPtr& t) {
        auto d = dropout(t, 0.3, DropoutKey{99, 1, 5}, true);
        return sum(mul(d, d));
    });
}

TEST_CASE("eval-mode dropout is the identity bitwise") {
    Rng rng(8);
    auto x = random_tensor({4, 4}, rng);
    auto y = dropout(x, 0.5, DropoutKey{1, 2, 3}, false);
    CHECK(y.get() == x.get());
}

TEST_CASE("train-mode dropout mask is replayable") {
    Rng rng(9);
    auto x = random_tensor({8, 8}, rng);
    DropoutKey key{12345, 7, 2};
    auto a = dropout(x, 0.4, key, true);
    auto b = dropout(x, 0.4, key, true);
    CHECK(a->data == b->data);
}

TEST_CASE("shape mismatch errors name both shapes") {
    auto a = zeros({2, 3});
    auto b = zeros({3, 3});
    try {
        add(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,3)") != std::string::npos);
    }
}

TEST_CASE("non-finite forward output raises a numeric error naming the op") {
    auto a = make_tensor({1}, {1e308});
    try {
        mul(a, a);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("non-deterministic function rejected by finite_diff_check") {
    auto x = make_tensor({2}, {1.0, 2.0});
    int calls = 0;
    auto f = [&calls](const TensorPtr& t) {
        ++calls;
        return scale(sum(t), static_cast<double>(calls));
    };
    CHECK_THROWS_AS(finite_diff_check(f, x, 1e-5), ContractError);
}
