#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "meshtex/rng.hpp"
#include "meshtex/tensor.hpp"

using namespace meshtex;
using namespace meshtex::ad;
using D = Tensor<double>;

namespace {

D random_tensor(Shape shape, Rng& rng, bool rg = true) {
    auto t = D::zeros(std::move(shape), rg);
    rng.fill_normal(t.value());
    return t;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("add and mul basics") {
    auto a = D::from({2}, {1, 2});
    auto b = D::from({2}, {3, 4});
    auto c = a + b;
    CHECK(c.value()[0] == 4);
    CHECK(c.value()[1] == 6);

    Rng rng(7);
    Tape<double> tape;
    auto x = random_tensor({3, 3}, rng);
    double y_value = -1.0;
    {
        Tape<double>::Scope scope(tape);
        auto y = x * 0.0;
        for (double v : y.value()) CHECK(v == 0.0);
        auto loss = sum(y);
        y_value = loss.item();
        tape.backward(loss);
    }
    CHECK(y_value == 0.0);
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("product rule: grad of sum(a*b) wrt a equals b") {
    Rng rng(11);
    auto a = random_tensor({4, 4}, rng);
    auto b = random_tensor({4, 4}, rng, false);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto loss = sum(a * b);
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(a.grad()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));

    double rel = gradcheck::check_gradients(
        {a}, [&] { return sum(a * b); });
    CHECK(rel < 1e-6);
}

TEST_CASE("elementwise broadcasting matches scalar-loop oracle") {
    Rng rng(23);
    // Random trailing-broadcastable shape pairs.
    const std::vector<std::pair<Shape, Shape>> cases = {
        {{3, 1, 5}, {4, 5}}, {{2, 3}, {3}}, {{6}, {}}, {{2, 1}, {1, 4}},
        {{1, 2, 1, 3}, {5, 1, 2, 1}},
    };
    for (const auto& [sa, sb] : cases) {
        auto a = random_tensor(sa, rng, false);
        auto b = random_tensor(sb, rng, false);
        auto c = a * b;
        // Oracle: explicit index arithmetic per output element.
        Shape os = broadcast_shape(sa, sb);
        auto idx_of = [](const Shape& s, const Shape& os, std::int64_t flat) {
            // map flat output index -> source flat index under trailing rules
            std::vector<std::int64_t> coord(os.size());
            for (std::int64_t d = static_cast<std::int64_t>(os.size()) - 1; d >= 0; --d) {
                coord[d] = flat % os[d];
                flat /= os[d];
            }
            std::int64_t src = 0, stride = 1;
            for (std::int64_t d = static_cast<std::int64_t>(s.size()) - 1; d >= 0; --d) {
                std::int64_t od = d + static_cast<std::int64_t>(os.size() - s.size());
                std::int64_t c = s[d] == 1 ? 0 : coord[od];
                src += c * stride;
                stride *= s[d];
            }
            return src;
        };
        for (std::int64_t i = 0; i < c.numel(); ++i) {
            double expect = a.value()[idx_of(sa, os, i)] * b.value()[idx_of(sb, os, i)];
            CHECK(c.value()[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("shape mismatch and div guard errors") {
    auto a = D::zeros({2, 3});
    auto b = D::zeros({4});
    CHECK_THROWS_AS(a + b, ShapeError);
    CHECK_THROWS_WITH_AS(a + b, doctest::Contains("[2,3]"), ShapeError);

    auto num = D::from({2}, {1, 1});
    auto den = D::from({2}, {1.0, 1e-13});
    CHECK_THROWS_AS(num / den, NumericalError);
}

TEST_CASE("matmul identity and hand product") {
    auto I = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(3);
    auto M = random_tensor({3, 3}, rng, false);
    auto P = matmul(I, M);
    for (std::size_t i = 0; i < 9; ++i)
        CHECK(P.value()[i] == doctest::Approx(M.value()[i]));

    auto A = D::from({2, 2}, {1, 2, 3, 4});
    auto B = D::from({2, 1}, {1, 1});
    auto C = matmul(A, B);
    CHECK(C.value()[0] == 3);
    CHECK(C.value()[1] == 7);

    auto bad = D::zeros({3, 2});
    CHECK_THROWS_AS(matmul(A, bad), ShapeError);
}

TEST_CASE("matmul gradients vs finite differences") {
    Rng rng(17);
    for (int inst = 0; inst < 3; ++inst) {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto w = random_tensor({3, 2}, rng, false);
        double rel = gradcheck::check_gradients(
            {a, b}, [&] { return sum(matmul(a, b) * w); });
        CHECK(rel < 1e-6);
    }
    // transpose flags
    auto a = random_tensor({4, 3}, rng);
    auto b = random_tensor({2, 4}, rng);
    double rel = gradcheck::check_gradients(
        {a, b}, [&] { return sum(matmul(a, b, true, true)); });
    CHECK(rel < 1e-6);
    // batched with broadcast
    auto ab = random_tensor({5, 3, 4}, rng);
    auto bb = random_tensor({4, 2}, rng);
    rel = gradcheck::check_gradients({ab, bb},
                                     [&] { return sum(matmul(ab, bb)); });
    CHECK(rel < 1e-6);
}

TEST_CASE("conv2d identities") {
    // 1x1 kernel of value 1 reproduces the input
    Rng rng(5);
    auto x = random_tensor({1, 1, 4, 4}, rng, false);
    auto w = D::from({1, 1, 1, 1}, {1});
    auto bias = D::zeros({1});
    auto y = conv2d(x, w, bias, 1, 0);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.value()[i] == doctest::Approx(x.value()[i]));

    // all-ones 3x3 kernel on all-ones 5x5 input, no padding -> all 9
    auto ones = D::full({1, 1, 5, 5}, 1.0);
    auto w3 = D::full({1, 1, 3, 3}, 1.0);
    auto y3 = conv2d(ones, w3, bias, 1, 0);
    CHECK(y3.shape() == Shape{1, 1, 3, 3});
    for (double v : y3.value()) CHECK(v == doctest::Approx(9.0));

    CHECK_THROWS_AS(conv2d(ones, D::zeros({1, 1, 7, 7}), bias, 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(ones, w3, bias, 0, 0), ShapeError);
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(29);
    auto x = random_tensor({1, 2, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto pick = random_tensor({1, 3, 3, 3}, rng, false);  // stride 2 output weights
    double rel = gradcheck::check_gradients(
        {x, w, b}, [&] { return sum(conv2d(x, w, b, 2, 1) * pick); });
    CHECK(rel < 1e-5);
}

TEST_CASE("activations") {
    auto x = D::from({2}, {-1, 2});
    auto y = relu(x);
    CHECK(y.value()[0] == 0);
    CHECK(y.value()[1] == 2);

    auto c = D::full({5}, 3.25);
    auto s = softmax(c, 0);
    for (double v : s.value()) CHECK(v == doctest::Approx(0.2).epsilon(1e-9));

    Rng rng(31);
    auto z = random_tensor({2, 6}, rng);
    auto w = random_tensor({2, 6}, rng, false);
    double rel = gradcheck::check_gradients(
        {z}, [&] { return sum(softmax(z, 1) * w); });
    CHECK(rel < 1e-6);

    auto t = tanh_act(random_tensor({64}, rng, false));
    for (double v : t.value()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("batch_norm statistics and gradients") {
    Rng rng(41);
    auto x = random_tensor({4, 3, 5, 5}, rng, false);
    auto gamma = D::full({3}, 1.0);
    auto beta = D::zeros({3});
    std::vector<double> rm, rv;
    auto y = batch_norm(x, gamma, beta, rm, rv, true);
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        std::int64_t n = 0;
        for (std::int64_t b = 0; b < 4; ++b)
            for (std::int64_t i = 0; i < 25; ++i) {
                mean += y.value()[(b * 3 + c) * 25 + i];
                ++n;
            }
        mean /= n;
        for (std::int64_t b = 0; b < 4; ++b)
            for (std::int64_t i = 0; i < 25; ++i) {
                double d = y.value()[(b * 3 + c) * 25 + i] - mean;
                var += d * d;
            }
        var /= n;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }

    // constant channel -> output equals beta via epsilon guard
    auto xc = D::full({2, 1, 3, 3}, 7.5);
    auto g1 = D::full({1}, 2.0);
    auto b1 = D::full({1}, 0.25);
    std::vector<double> rm1, rv1;
    auto yc = batch_norm(xc, g1, b1, rm1, rv1, true);
    for (double v : yc.value()) CHECK(v == doctest::Approx(0.25));

    // degenerate statistics
    auto single = D::zeros({1, 2, 1, 1});
    std::vector<double> rm2, rv2;
    CHECK_THROWS_AS(batch_norm(single, D::zeros({2}), D::zeros({2}), rm2, rv2, true),
                    NumericalError);

    auto xi = random_tensor({3, 2, 4, 4}, rng);
    auto gg = random_tensor({2}, rng);
    auto bb = random_tensor({2}, rng);
    auto w = random_tensor({3, 2, 4, 4}, rng, false);
    std::vector<double> rm3, rv3;
    double rel = gradcheck::check_gradients({xi, gg, bb}, [&] {
        std::vector<double> m = rm3, v = rv3;  // keep state untouched across evals
        return sum(batch_norm(xi, gg, bb, m, v, true) * w);
    });
    CHECK(rel < 1e-4);
}

TEST_CASE("upsample_nearest") {
    auto x = D::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y1 = upsample_nearest(x, 1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y1.value()[i] == x.value()[i]);

    auto y = upsample_nearest(x, 2);
    const std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    REQUIRE(y.numel() == 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(y.value()[i] == expect[i]);

    auto xg = D::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto loss = sum(upsample_nearest(xg, 3));
        tape.backward(loss);
    }
    for (double g : xg.grad()) CHECK(g == doctest::Approx(9.0));
}

TEST_CASE("backward basics and accumulation") {
    Rng rng(53);
    auto x = random_tensor({5}, rng);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto loss = sum(x);
        tape.backward(loss);
        for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
        // repeated backward without zeroing accumulates in the leaf
        tape.backward(loss);
        for (double g : x.grad()) CHECK(g == doctest::Approx(2.0));
    }
    tape.clear();
    CHECK(tape.size() == 0);

    x.zero_grad();
    Tape<double> tape2;
    {
        Tape<double>::Scope scope(tape2);
        auto loss = sum(x * x);
        tape2.backward(loss);
    }
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x.value()[i]));

    CHECK_THROWS_AS(tape2.backward(x), ShapeError);  // non-scalar loss
}

TEST_CASE("composite MLP gradient vs finite differences") {
    Rng rng(61);
    auto x = random_tensor({2, 6}, rng, false);
    auto w1 = random_tensor({6, 8}, rng);
    auto b1 = random_tensor({8}, rng);
    auto w2 = random_tensor({8, 3}, rng);
    auto b2 = random_tensor({3}, rng);
    double rel = gradcheck::check_gradients({w1, b1, w2, b2}, [&] {
        auto h = tanh_act(matmul(x, w1) + b1);
        auto o = sigmoid(matmul(h, w2) + b2);
        return sum(o * o);
    });
    CHECK(rel < 1e-5);
}

TEST_CASE("tape determinism: repeated runs produce bit-identical gradients") {
    auto run = [](std::vector<double>& wgrad) {
        Rng rng(99);
        auto x = Tensor<float>::zeros({2, 3, 8, 8});
        Rng r2 = rng.fork("x");
        r2.fill_normal(x.value());
        auto w = Tensor<float>::zeros({4, 3, 3, 3}, true);
        Rng r3 = rng.fork("w");
        r3.fill_normal(w.value());
        auto b = Tensor<float>::zeros({4}, true);
        Tape<float> tape;
        {
            Tape<float>::Scope scope(tape);
            auto y = conv2d(x, w, b, 1, 1);
            auto loss = mean(relu(y));
            tape.backward(loss);
        }
        wgrad.assign(w.grad().begin(), w.grad().end());
    };
    std::vector<double> g1, g2;
    run(g1);
    run(g2);
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("adam") {
    // zero gradient -> fixed point
    auto p = D::from({3}, {1, 2, 3}, true);
    AdamState<double> st;
    adam_step(p, st, 0.1);
    CHECK(p.value()[0] == 1.0);
    CHECK(p.value()[2] == 3.0);

    // first step moves by -lr * sign(g) up to O(eps)
    auto q = D::from({2}, {0.5, -0.5}, true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto loss = sum(q * D::from({2}, {3.0, -7.0}));
        tape.backward(loss);
    }
    AdamState<double> st2;
    adam_step(q, st2, 0.01);
    CHECK(q.value()[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-6));
    CHECK(q.value()[1] == doctest::Approx(-0.5 + 0.01).epsilon(1e-6));

    // quadratic bowl converges to argmin
    auto z = D::from({2}, {4.0, -3.0}, true);
    auto target = D::from({2}, {1.25, 0.75});
    AdamState<double> st3;
    for (int it = 0; it < 2000; ++it) {
        z.zero_grad();
        Tape<double> t;
        {
            Tape<double>::Scope scope(t);
            auto d = z - target;
            auto loss = sum(d * d);
            t.backward(loss);
        }
        adam_step(z, st3, 0.01);
    }
    CHECK(std::abs(z.value()[0] - 1.25) < 1e-3);
    CHECK(std::abs(z.value()[1] - 0.75) < 1e-3);
}

TEST_CASE("reshape narrow concat flip tile gradients") {
    Rng rng(71);
    auto x = random_tensor({3, 4}, rng);
    double rel = gradcheck::check_gradients({x}, [&] {
        auto r = reshape(x, {2, 6});
        auto n = narrow(r, 1, 1, 4);
        auto f = flip(n, 0);
        auto c = concat<double>({f, n}, 1);
        auto tb = tile_batch(c, 3);
        return sum(tb * tb);
    });
    CHECK(rel < 1e-6);
}

TEST_CASE("bilinear_sample values and gradients") {
    // 2x2 single-channel map; sample dead-center mixes all four texels equally
    auto map = D::from({1, 2, 2}, {0.0, 1.0, 2.0, 3.0}, true);
    auto mid = D::from({1, 2}, {0.5, 0.5});
    auto v = bilinear_sample(map, mid);
    CHECK(v.value()[0] == doctest::Approx(1.5));

    Rng rng(83);
    auto m = random_tensor({3, 5, 7}, rng);
    auto coords = D::zeros({6, 2}, true);
    for (auto& c : coords.value()) c = 0.15 + 0.7 * rng.uniform();
    auto w = random_tensor({6, 3}, rng, false);
    double rel = gradcheck::check_gradients(
        {m, coords}, [&] { return sum(bilinear_sample(m, coords) * w); });
    CHECK(rel < 1e-5);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    Rng rng(91);
    std::map<std::string, Tensor<float>> params;
    auto a = Tensor<float>::zeros({3, 4});
    rng.fill_normal(a.value());
    auto b = Tensor<float>::zeros({7});
    rng.fill_normal(b.value());
    params.emplace("net.w", a);
    params.emplace("net.b", b);
    const std::string prefix = (fs::temp_directory_path() / "meshtex_ckpt_test").string();
    save_checkpoint(prefix, params);
    auto loaded = load_checkpoint<float>(prefix);
    REQUIRE(loaded.count("net.w") == 1);
    REQUIRE(loaded.count("net.b") == 1);
    CHECK(loaded["net.w"].shape() == Shape{3, 4});
    for (std::int64_t i = 0; i < a.numel(); ++i)
        CHECK(loaded["net.w"].value()[i] == a.value()[i]);
    for (std::int64_t i = 0; i < b.numel(); ++i)
        CHECK(loaded["net.b"].value()[i] == b.value()[i]);
    fs::remove(prefix + ".bin");
    fs::remove(prefix + ".json");
}

}  // TEST_SUITE
