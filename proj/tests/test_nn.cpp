#include <catch2/catch_amalgamated.hpp>

#include "morphoflow/nn.hpp"
#include "morphoflow/rng.hpp"

using namespace morphoflow;
using nn::Tape;
using nn::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (float& v : t.v) v = float(scale * rng.normal());
    return t;
}

// Scalar head for gradient checks: weighted values pushed away from the L1
// kink so the loss is smooth at the evaluation point.
Tape::Id scalar_head(Tape& tape, Tape::Id y, const Tensor& weights) {
    Tape::Id w = tape.leaf(weights, false);
    Tape::Id weighted = tape.mul_vec(y, w);
    Tensor target(tape.val(weighted).shape, -25.0f);
    return tape.l1_loss(weighted, target);
}

// Central finite differences along a random direction vs the tape gradient.
void check_gradient(const Tensor& x0,
                    const std::function<Tape::Id(Tape&, Tape::Id)>& loss_of,
                    std::uint64_t seed, double tol = 2e-2) {
    Rng rng(seed);
    Tape tape;
    Tape::Id x = tape.leaf(x0, true);
    Tape::Id loss = loss_of(tape, x);
    tape.backward(loss);
    const Tensor& grad = tape.grad(x);
    REQUIRE(grad.numel() == x0.numel());

    Tensor dir(x0.shape);
    double norm = 0.0;
    for (float& v : dir.v) {
        v = float(rng.normal());
        norm += double(v) * v;
    }
    norm = std::sqrt(norm);
    for (float& v : dir.v) v = float(v / norm);

    double analytic = 0.0;
    for (std::size_t i = 0; i < grad.v.size(); ++i)
        analytic += double(grad.v[i]) * double(dir.v[i]);

    const double h = 1e-2;
    auto eval = [&](double sign) {
        Tensor shifted = x0;
        for (std::size_t i = 0; i < shifted.v.size(); ++i)
            shifted.v[i] += float(sign * h * dir.v[i]);
        Tape t2;
        Tape::Id x2 = t2.leaf(shifted, false);
        Tape::Id l2 = loss_of(t2, x2);
        return double(t2.val(l2).v[0]);
    };
    const double fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
    CAPTURE(analytic, fd);
    CHECK(std::abs(analytic - fd) <= tol * std::max({1.0, std::abs(analytic), std::abs(fd)}));
}

} // namespace

TEST_CASE("linear layer gradients (input, weight, bias)", "[nn]") {
    Rng rng(1);
    const Tensor x0 = random_tensor({2, 3, 4}, rng);
    const Tensor w0 = random_tensor({5, 4}, rng, 0.5);
    const Tensor b0 = random_tensor({5}, rng, 0.1);
    const Tensor head = random_tensor({5}, rng, 1.0);

    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id w = t.leaf(w0, false);
        Tape::Id b = t.leaf(b0, false);
        return scalar_head(t, t.linear(x, w, b), head);
    }, 2);

    check_gradient(w0, [&](Tape& t, Tape::Id w) {
        Tape::Id x = t.leaf(x0, false);
        Tape::Id b = t.leaf(b0, false);
        return scalar_head(t, t.linear(x, w, b), head);
    }, 3);

    check_gradient(b0, [&](Tape& t, Tape::Id b) {
        Tape::Id x = t.leaf(x0, false);
        Tape::Id w = t.leaf(w0, false);
        return scalar_head(t, t.linear(x, w, b), head);
    }, 4);
}

TEST_CASE("batched matmul gradients", "[nn]") {
    Rng rng(10);
    const Tensor a0 = random_tensor({2, 3, 4}, rng);
    const Tensor b0 = random_tensor({2, 5, 4}, rng);
    const Tensor c0 = random_tensor({2, 4, 5}, rng);
    const Tensor head5 = random_tensor({5}, rng);

    check_gradient(a0, [&](Tape& t, Tape::Id a) {
        Tape::Id b = t.leaf(b0, false);
        return scalar_head(t, t.matmul_nt(a, b), head5);
    }, 11);
    check_gradient(b0, [&](Tape& t, Tape::Id b) {
        Tape::Id a = t.leaf(a0, false);
        return scalar_head(t, t.matmul_nt(a, b), Tensor({5}, {0.3f, -1.2f, 0.8f, 2.0f, -0.5f}));
    }, 12);
    check_gradient(c0, [&](Tape& t, Tape::Id c) {
        Tape::Id a = t.leaf(a0, false);
        return scalar_head(t, t.matmul_nn(a, c), head5);
    }, 13);
}

TEST_CASE("broadcast add and multiply gradients", "[nn]") {
    Rng rng(20);
    const Tensor x0 = random_tensor({2, 3, 4}, rng);
    const Tensor plane0 = random_tensor({3, 4}, rng);
    const Tensor framevec0 = random_tensor({2, 4}, rng);
    const Tensor vec0 = random_tensor({4}, rng);
    const Tensor head = random_tensor({4}, rng);

    check_gradient(plane0, [&](Tape& t, Tape::Id p) {
        Tape::Id x = t.leaf(x0, false);
        return scalar_head(t, t.add_bcast0(x, p), head);
    }, 21);
    check_gradient(framevec0, [&](Tape& t, Tape::Id f) {
        Tape::Id x = t.leaf(x0, false);
        return scalar_head(t, t.add_bcast1(x, f), head);
    }, 22);
    check_gradient(vec0, [&](Tape& t, Tape::Id v) {
        Tape::Id x = t.leaf(x0, false);
        return scalar_head(t, t.add_vec(x, v), head);
    }, 23);
    check_gradient(vec0, [&](Tape& t, Tape::Id v) {
        Tape::Id x = t.leaf(x0, false);
        return scalar_head(t, t.mul_vec(x, v), head);
    }, 24);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id v = t.leaf(vec0, false);
        Tape::Id y = t.mul_vec(t.add_vec(x, v), v);
        return scalar_head(t, y, head);
    }, 25);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id y = t.scale(t.add_const(x, 0.7f), -1.3f);
        return scalar_head(t, y, head);
    }, 26);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id y = t.add(x, t.scale(x, 0.5f));
        return scalar_head(t, y, head);
    }, 27);
}

TEST_CASE("normalization and activation gradients", "[nn]") {
    Rng rng(30);
    const Tensor x0 = random_tensor({2, 3, 6}, rng);
    const Tensor head = random_tensor({6}, rng);

    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.layer_norm(x), head);
    }, 31);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.softmax(x), head);
    }, 32);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.gelu(x), head);
    }, 33);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.silu(x), head);
    }, 34);
}

TEST_CASE("reindexing op gradients", "[nn]") {
    Rng rng(40);
    const Tensor x0 = random_tensor({2, 3, 8}, rng);
    const Tensor head8 = random_tensor({8}, rng);
    const Tensor head4 = random_tensor({4}, rng);

    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.transpose01(x), head8);
    }, 41);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id split = t.split_heads(x, 2);
        Tape::Id merged = t.merge_heads(split, 2);
        return scalar_head(t, merged, head8);
    }, 42);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.chunk(x, 1, 2), head4);
    }, 43);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.reshape(x, {6, 1, 8}), head8);
    }, 44);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        return scalar_head(t, t.mean_axis1(x), head8);
    }, 45);

    const Tensor table0 = random_tensor({3, 5}, rng);
    const Tensor head5 = random_tensor({5}, rng);
    check_gradient(table0, [&](Tape& t, Tape::Id table) {
        return scalar_head(t, t.row(table, 1), head5);
    }, 46);
}

TEST_CASE("split and merge heads invert each other", "[nn]") {
    Rng rng(50);
    const Tensor x0 = random_tensor({3, 4, 8}, rng);
    Tape t;
    Tape::Id x = t.leaf(x0, false);
    Tape::Id roundtrip = t.merge_heads(t.split_heads(x, 4), 4);
    CHECK(t.val(roundtrip).v == x0.v);
}

TEST_CASE("conv3d and upsample gradients", "[nn]") {
    Rng rng(60);
    const Tensor x0 = random_tensor({2, 4, 4, 4}, rng);
    const Tensor w0 = random_tensor({3, 2, 3, 3, 3}, rng, 0.3);
    const Tensor b0 = random_tensor({3}, rng, 0.1);

    auto conv_loss = [&](Tape& t, Tape::Id x, Tape::Id w, Tape::Id b, int stride) {
        Tape::Id y = t.conv3d(x, w, b, stride, 1);
        const std::vector<int> shape = t.val(y).shape;
        Tape::Id flat = t.reshape(y, {1, int(t.val(y).numel()) / shape.back(), shape.back()});
        Tensor head(std::vector<int>{shape.back()});
        Rng hr(99);
        for (float& v : head.v) v = float(hr.normal());
        return scalar_head(t, flat, head);
    };

    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id w = t.leaf(w0, false);
        Tape::Id b = t.leaf(b0, false);
        return conv_loss(t, x, w, b, 1);
    }, 61);
    check_gradient(w0, [&](Tape& t, Tape::Id w) {
        Tape::Id x = t.leaf(x0, false);
        Tape::Id b = t.leaf(b0, false);
        return conv_loss(t, x, w, b, 1);
    }, 62);
    check_gradient(b0, [&](Tape& t, Tape::Id b) {
        Tape::Id x = t.leaf(x0, false);
        Tape::Id w = t.leaf(w0, false);
        return conv_loss(t, x, w, b, 2);
    }, 63);
    check_gradient(x0, [&](Tape& t, Tape::Id x) {
        Tape::Id up = t.upsample2(x);
        Tape::Id flat = t.reshape(up, {2, 8 * 8, 8});
        Tensor head(std::vector<int>{8});
        Rng hr(98);
        for (float& v : head.v) v = float(hr.normal());
        return scalar_head(t, flat, head);
    }, 64);
}

TEST_CASE("l1 loss matches its hand gradient", "[nn]") {
    Rng rng(70);
    const Tensor x0 = random_tensor({2, 2, 3}, rng);
    Tensor target = random_tensor({2, 2, 3}, rng);

    Tape t;
    Tape::Id x = t.leaf(x0, true);
    Tape::Id loss = t.l1_loss(x, target);
    t.backward(loss);
    const auto& g = t.grad(x);
    for (std::size_t i = 0; i < x0.v.size(); ++i) {
        const float expected = (x0.v[i] > target.v[i] ? 1.0f : -1.0f) / float(x0.numel());
        CHECK(g.v[i] == Catch::Approx(expected).margin(1e-7));
    }

    double acc = 0.0;
    for (std::size_t i = 0; i < x0.v.size(); ++i) acc += std::abs(x0.v[i] - target.v[i]);
    CHECK(double(t.val(loss).v[0]) == Catch::Approx(acc / x0.numel()).margin(1e-6));
}

TEST_CASE("adam drives a least-squares toy problem down", "[nn]") {
    Rng rng(80);
    nn::ParamStore store;
    const int w_id = store.add("w", nn::xavier_uniform({1, 4}, 4, 1, rng));
    const Tensor x0 = random_tensor({1, 16, 4}, rng);
    Tensor target({1, 16, 1});
    for (int i = 0; i < 16; ++i)
        target.v[std::size_t(i)] = float(2.0 * x0.v[std::size_t(i) * 4] -
                                         0.7 * x0.v[std::size_t(i) * 4 + 2]);

    nn::Adam adam;
    adam.cfg.lr = 0.05f;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
        Tape t;
        auto binding = nn::bind_params(t, store);
        Tape::Id x = t.leaf(x0, false);
        Tape::Id y = t.linear(x, binding.ids[std::size_t(w_id)], -1);
        Tape::Id loss = t.l1_loss(y, target);
        t.backward(loss);
        auto grads = nn::make_grad_buffers(store);
        nn::accumulate_grads(t, binding, grads);
        adam.update(store, grads);
        if (step == 0) first = t.val(loss).v[0];
        last = t.val(loss).v[0];
    }
    CHECK(last < 0.1 * first);
}
