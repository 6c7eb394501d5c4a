#include <catch2/catch.hpp>

#include "fave/tape.hpp"
#include "testutil.hpp"

using namespace fave;

namespace {

// Independent oracle: plain triple-loop matmul.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) {
            real acc = 0;
            for (i64 p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            c.at(i, j) = acc;
        }
    return c;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("matmul matches naive triple loop exactly") {
    Rng rng(7);
    Tensor a = testutil::random_tensor({2, 3}, rng);
    Tensor b = testutil::random_tensor({3, 4}, rng);
    Tape tape;
    Var c = matmul(tape.input(a), tape.input(b));
    REQUIRE(c.val().shape == std::vector<i64>{2, 4});
    Tensor want = naive_matmul(a, b);
    for (i64 i = 0; i < want.size(); ++i)
        REQUIRE(c.val().v[static_cast<size_t>(i)] == want.v[static_cast<size_t>(i)]);
}

TEST_CASE("bmm transpose flags agree with explicit transposition") {
    Rng rng(11);
    Tensor a = testutil::random_tensor({3, 2}, rng);  // stored [k,m] for ta
    Tensor b = testutil::random_tensor({4, 3}, rng);  // stored [n,k] for tb
    Tensor at({2, 3});
    for (i64 i = 0; i < 2; ++i)
        for (i64 j = 0; j < 3; ++j) at.at(i, j) = a.at(j, i);
    Tensor bt({3, 4});
    for (i64 i = 0; i < 3; ++i)
        for (i64 j = 0; j < 4; ++j) bt.at(i, j) = b.at(j, i);
    Tape tape;
    Var viaflags = bmm(tape.input(a), tape.input(b), true, true);
    Tensor want = naive_matmul(at, bt);
    REQUIRE(testutil::rel_err(viaflags.val(), want) < 1e-12);
}

TEST_CASE("batched bmm runs each slice independently") {
    Rng rng(13);
    Tensor a = testutil::random_tensor({2, 2, 3}, rng);
    Tensor b = testutil::random_tensor({2, 3, 2}, rng);
    Tape tape;
    Var c = bmm(tape.input(a), tape.input(b));
    REQUIRE(c.val().shape == std::vector<i64>{2, 2, 2});
    for (i64 g = 0; g < 2; ++g) {
        Tensor ag({2, 3});
        Tensor bg({3, 2});
        std::copy_n(a.data() + g * 6, 6, ag.data());
        std::copy_n(b.data() + g * 6, 6, bg.data());
        Tensor want = naive_matmul(ag, bg);
        for (i64 i = 0; i < 4; ++i)
            REQUIRE(c.val().v[static_cast<size_t>(g * 4 + i)] ==
                    Approx(want.v[static_cast<size_t>(i)]).margin(1e-15));
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    Tape tape;
    Var s = softmax_rows(tape.input(testutil::random_tensor({4, 7}, rng, -5, 5)));
    for (i64 i = 0; i < 4; ++i) {
        real sum = 0;
        for (i64 j = 0; j < 7; ++j) sum += s.val().at(i, j);
        REQUIRE(sum == Approx(1.0).margin(1e-12));
    }
    Tape t2;
    Var two = softmax_rows(t2.input(Tensor({1, 2}, {0.0, 0.0})));
    REQUIRE(two.val().v[0] == Approx(0.5).margin(1e-15));
    REQUIRE(two.val().v[1] == Approx(0.5).margin(1e-15));
}

TEST_CASE("layer norm of a constant row is zero pre-affine") {
    Tape tape;
    Var y = layer_norm(tape.input(Tensor::full({2, 5}, 3.25)));
    for (real x : y.val().v) REQUIRE(x == Approx(0.0).margin(1e-9));
}

TEST_CASE("incompatible shapes are rejected") {
    Tape tape;
    Var a = tape.input(Tensor({2, 3}));
    Var b = tape.input(Tensor({3, 2}));
    REQUIRE_THROWS_AS(add(a, b), ShapeError);
    REQUIRE_THROWS_AS(bmm(a, a), ShapeError);
    REQUIRE_THROWS_AS(gather_rows(a, {5}), ShapeError);
    REQUIRE_THROWS_AS(slice_rows(a, 1, 5), ShapeError);
}

TEST_CASE("split/merge heads round trip") {
    Rng rng(17);
    Tensor x = testutil::random_tensor({6, 4}, rng);  // B=2, L=3, d=4
    Tape tape;
    Var xin = tape.input(x);
    Var back = merge_heads(split_heads(xin, 2, 3, 2), 2, 3, 2);
    for (i64 i = 0; i < x.size(); ++i)
        REQUIRE(back.val().v[static_cast<size_t>(i)] == x.v[static_cast<size_t>(i)]);
}

TEST_CASE("tape replay is bit-identical") {
    Rng rng(23);
    Tape tape;
    Var a = tape.input(testutil::random_tensor({3, 4}, rng));
    Var b = tape.input(testutil::random_tensor({4, 5}, rng));
    Var y = softmax_rows(matmul(tanh(a), b));
    (void)y;
    REQUIRE(tape.replay_matches());
}
