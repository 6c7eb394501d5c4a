#include <catch2/catch.hpp>

#include "fave/tape.hpp"
#include "testutil.hpp"

using namespace fave;
using testutil::BuildFn;
using testutil::op_cases;

TEST_CASE("gradient of squared norm is 2x") {
    Tape tape;
    Var x = tape.input(Tensor({2}, {1.0, -2.0}));
    Var loss = sum_all(mul(x, x));
    auto g = tape.backward(loss);
    REQUIRE(g[static_cast<size_t>(x.id)].v[0] == Approx(2.0));
    REQUIRE(g[static_cast<size_t>(x.id)].v[1] == Approx(-4.0));
}

TEST_CASE("unused parameter receives a zero gradient") {
    Tape tape;
    Parameter w("w", Tensor({2, 2}, {1, 2, 3, 4}));
    Parameter b("b", Tensor({2}, {5, 6}));
    Var wv = tape.param(w);
    Var bv = tape.param(b);
    (void)bv;
    Var x = tape.input(Tensor({2, 1}, {1.0, 1.0}));
    Var loss = sum_all(matmul(wv, x));
    auto gm = grad(tape, loss, {&w, &b});
    REQUIRE(gm[&b].shape == b.value.shape);
    for (real v : gm[&b].v) REQUIRE(v == 0.0);
    REQUIRE(gm[&w].v[0] == Approx(1.0));
}

TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    Var x = tape.input(Tensor({2}, {1.0, 2.0}));
    REQUIRE_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("non-finite gradient names the offending parameter") {
    Tape tape;
    Parameter w("dense.weight", Tensor({2}, {1.0, 2.0}));
    Var wv = tape.param(w);
    const real inf = std::numeric_limits<real>::infinity();
    Var loss = sum_all(mul(wv, tape.constant(Tensor({2}, {inf, 0.0}))));
    try {
        tape.backward(loss);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("dense.weight") != std::string::npos);
    }
}

TEST_CASE("two-layer tanh net gradient matches finite differences") {
    Rng rng(41);
    BuildFn net = [](Tape&, const std::vector<Var>& v) {
        Var h = tanh(add_row(matmul(v[0], v[1]), v[2]));
        return tanh(matmul(h, v[3]));
    };
    std::vector<Tensor> ins = {
        testutil::random_tensor({2, 3}, rng),
        testutil::random_tensor({3, 4}, rng),
        testutil::random_tensor({4}, rng),
        testutil::random_tensor({4, 2}, rng),
    };
    Tensor weights = testutil::random_tensor({2, 2}, rng);
    auto got = testutil::tape_grad(net, ins, weights);
    auto want = testutil::fd_grad(net, ins, weights);
    for (size_t i = 0; i < ins.size(); ++i) REQUIRE(testutil::rel_err(got[i], want[i]) < 1e-4);
}

TEST_CASE("jvp of a linear map is W dot v") {
    Rng rng(43);
    Tensor w = testutil::random_tensor({3, 4}, rng);
    Tensor x = testutil::random_tensor({4, 1}, rng);
    Tensor v = testutil::random_tensor({4, 1}, rng);
    Tape tape;
    Var wc = tape.constant(w);
    Var xv = tape.input(x);
    auto [y, ty] = jvp(tape, [&] { return matmul(wc, xv); }, {{xv, v}});
    (void)y;
    Tape check;
    Var want = matmul(check.input(w), check.input(v));
    REQUIRE(testutil::rel_err(ty.val(), want.val()) < 1e-12);
}

TEST_CASE("jvp of a constant function is zero") {
    Tape tape;
    Var x = tape.input(Tensor({3}, {1, 2, 3}));
    auto [y, ty] = jvp(
        tape, [&] { return tape.constant(Tensor({2}, {5.0, 6.0})); },
        {{x, Tensor({3}, {1.0, 1.0, 1.0})}});
    (void)y;
    for (real t : ty.val().v) REQUIRE(t == 0.0);
}

TEST_CASE("jvp tangent shape mismatch is rejected") {
    Tape tape;
    JvpScope scope(tape);
    Var x = tape.input(Tensor({3}));
    Var t = tape.constant(Tensor({2}));
    REQUIRE_THROWS_AS(tape.seed_tangent(x, t), ShapeError);
}

TEST_CASE("per-primitive gradients and jvps match finite differences") {
    for (const auto& c : op_cases()) {
        Rng rng(1000 + static_cast<u64>(c.name[0]) * 31 + static_cast<u64>(c.name[1]));
        for (int rep = 0; rep < 3; ++rep) {
            std::vector<Tensor> ins;
            for (const auto& s : c.shapes) ins.push_back(testutil::random_tensor(s, rng, c.lo, c.hi));
            Tensor out = testutil::eval_fn(c.build, ins);
            Tensor weights = testutil::random_tensor(out.shape, rng);

            INFO(c.name);
            auto got = testutil::tape_grad(c.build, ins, weights);
            auto want = testutil::fd_grad(c.build, ins, weights);
            for (size_t i = 0; i < ins.size(); ++i)
                REQUIRE(testutil::rel_err(got[i], want[i]) < 1e-4);

            std::vector<Tensor> tangents;
            for (const auto& t : ins) tangents.push_back(testutil::random_tensor(t.shape, rng));
            Tensor jt = testutil::tape_jvp(c.build, ins, tangents);
            Tensor jf = testutil::fd_jvp(c.build, ins, tangents);
            REQUIRE(testutil::rel_err(jt, jf) < 1e-4);
        }
    }
}

TEST_CASE("vjp/jvp adjointness") {
    Rng rng(47);
    BuildFn net = [](Tape&, const std::vector<Var>& v) {
        return softmax_rows(tanh(matmul(v[0], v[1])));
    };
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<Tensor> ins = {testutil::random_tensor({2, 3}, rng),
                                   testutil::random_tensor({3, 4}, rng)};
        Tensor out = testutil::eval_fn(net, ins);
        Tensor u = testutil::random_tensor(out.shape, rng);
        std::vector<Tensor> v = {testutil::random_tensor({2, 3}, rng),
                                 testutil::random_tensor({3, 4}, rng)};

        auto grads = testutil::tape_grad(net, ins, u);
        real lhs = 0;
        for (size_t i = 0; i < grads.size(); ++i) lhs += dot(grads[i], v[i]);

        Tensor jv = testutil::tape_jvp(net, ins, v);
        real rhs = dot(u, jv);
        REQUIRE(lhs == Approx(rhs).margin(1e-8));
    }
}

TEST_CASE("loss built on a jvp output backpropagates (reverse over forward)") {
    // d/dW of || J_x f(x) . v ||^2 for f(x) = tanh(W x): checked against
    // finite differences of the same scalar with v held fixed.
    Rng rng(53);
    Tensor w = testutil::random_tensor({3, 3}, rng);
    Tensor x = testutil::random_tensor({3, 1}, rng);
    Tensor v = testutil::random_tensor({3, 1}, rng);

    auto cons_scalar = [&](const Tensor& wt) {
        Tape tape;
        Var wv = tape.input(wt);
        Var xv = tape.input(x);
        auto [y, ty] = jvp(tape, [&] { return tanh(matmul(wv, xv)); }, {{xv, v}});
        (void)y;
        return sum_all(mul(ty, ty)).val().v[0];
    };

    Tape tape;
    Var wv = tape.input(w);
    Var xv = tape.input(x);
    auto [y, ty] = jvp(tape, [&] { return tanh(matmul(wv, xv)); }, {{xv, v}});
    (void)y;
    Var loss = sum_all(mul(ty, ty));
    auto g = tape.backward(loss);
    const Tensor& gw = g[static_cast<size_t>(wv.id)];
    REQUIRE_FALSE(gw.v.empty());

    Tensor fd(w.shape);
    const real eps = 1e-5;
    for (i64 i = 0; i < w.size(); ++i) {
        Tensor wp = w, wm = w;
        wp.v[static_cast<size_t>(i)] += eps;
        wm.v[static_cast<size_t>(i)] -= eps;
        fd.v[static_cast<size_t>(i)] = (cons_scalar(wp) - cons_scalar(wm)) / (2 * eps);
    }
    REQUIRE(testutil::rel_err(gw, fd) < 1e-4);
}

TEST_CASE("identical seeds give bit-identical runs") {
    auto run = [] {
        Rng rng(99);
        std::vector<Tensor> ins = {testutil::random_tensor({4, 4}, rng),
                                   testutil::random_tensor({4, 4}, rng)};
        Tape tape;
        Var y = softmax_rows(matmul(gelu(tape.input(ins[0])), tape.input(ins[1])));
        return y.val().v;
    };
    REQUIRE(run() == run());
}
