#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "mmcl/graph.hpp"
#include "mmcl/model.hpp"
#include "mmcl/optim.hpp"
#include "mmcl/rng.hpp"

using namespace mmcl;
using fdcheck::make_param;

namespace {

using G = Graph<double>;
using P = ParameterT<double>;

// Generic smooth scalar reduction so every output coordinate carries a
// distinct, nonzero gradient signal.
G::Ref reduce(G& g, G::Ref x) { return g.sum(g.gelu(x)); }

}  // namespace

TEST_CASE("fd: add and add_broadcast") {
    Rng rng(1);
    P a = make_param("a", {3, 4}, rng), b = make_param("b", {3, 4}, rng);
    auto res = fdcheck::check({&a, &b}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.add(g.param(a), g.param(b)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
    CHECK(res.checked >= 20);

    P x = make_param("x", {2, 3, 4}, rng), v = make_param("v", {4}, rng);
    res = fdcheck::check({&x, &v}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.add_broadcast(g.param(x), g.param(v)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: scale and gelu") {
    Rng rng(2);
    P a = make_param("a", {5, 5}, rng);
    auto res = fdcheck::check({&a}, [&](bool bw) {
        G g;
        auto r = g.sum(g.gelu(g.scale(g.param(a), 1.7)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
    CHECK(res.checked >= 20);
}

TEST_CASE("fd: matmul shared, batched and transposed") {
    Rng rng(3);
    P a = make_param("a", {2, 3, 4}, rng, 0.5);
    P w = make_param("w", {4, 5}, rng, 0.5);
    auto res = fdcheck::check({&a, &w}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.matmul(g.param(a), g.param(w)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    P bb = make_param("bb", {2, 4, 5}, rng, 0.5);
    res = fdcheck::check({&a, &bb}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.matmul(g.param(a), g.param(bb)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    P wt = make_param("wt", {5, 4}, rng, 0.5);
    res = fdcheck::check({&a, &wt}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.matmul(g.param(a), g.param(wt), /*trans_b=*/true));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: linear") {
    Rng rng(4);
    P x = make_param("x", {2, 3, 4}, rng, 0.5);
    P w = make_param("w", {4, 6}, rng, 0.5);
    P b = make_param("b", {6}, rng, 0.5);
    auto res = fdcheck::check({&x, &w, &b}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.linear(g.param(x), g.param(w), g.param(b)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: layer_norm") {
    Rng rng(5);
    P x = make_param("x", {2, 3, 8}, rng);
    P gamma = make_param("gamma", {8}, rng, 0.3);
    P beta = make_param("beta", {8}, rng, 0.3);
    auto res = fdcheck::check({&x, &gamma, &beta}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.layer_norm(g.param(x), g.param(gamma), g.param(beta), 1e-5));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: softmax through cross-entropy") {
    Rng rng(6);
    P x = make_param("x", {4, 6}, rng);
    std::vector<std::size_t> targets{0, 3, 5, 2};
    auto res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = g.softmax_cross_entropy(g.param(x), targets);
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    // softmax node in isolation, composed with a nonlinear reduction
    res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.softmax(g.param(x)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: sigmoid_bce") {
    Rng rng(7);
    P x = make_param("x", {3, 5}, rng);
    std::vector<double> targets(15);
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = (i * 7 % 3 == 0) ? 1.0 : 0.0;
    auto res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = g.sigmoid_bce(g.param(x), targets);
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: layout ops") {
    Rng rng(8);
    P x = make_param("x", {2, 4, 8}, rng);
    auto res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.merge_heads(g.split_heads(g.param(x), 2)));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.reshape(g.param(x), {8, 8}));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    P y = make_param("y", {2, 3, 8}, rng);
    res = fdcheck::check({&x, &y}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.concat_seq({g.param(x), g.param(y)}));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    res = fdcheck::check({&x}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.select_token(g.param(x), 2));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: embedding and slice_rows") {
    Rng rng(9);
    P table = make_param("table", {7, 4}, rng);
    std::vector<std::size_t> ids{1, 3, 3, 0, 6, 2};
    auto res = fdcheck::check({&table}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.embedding(g.param(table), ids, 2, 3));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    res = fdcheck::check({&table}, [&](bool bw) {
        G g;
        auto r = reduce(g, g.slice_rows(g.param(table), 2, 4));
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);
}

TEST_CASE("fd: quadratic penalty and its closed-form gradient") {
    Rng rng(10);
    P t1 = make_param("t1", {3, 3}, rng), t2 = make_param("t2", {4}, rng);
    std::vector<double> f1(9), f2(4), a1(9), a2(4);
    for (auto& v : f1) v = rng.uniform() + 0.1;
    for (auto& v : f2) v = rng.uniform() + 0.1;
    for (auto& v : a1) v = rng.normal();
    for (auto& v : a2) v = rng.normal();
    const double lambda = 3.5;
    auto res = fdcheck::check({&t1, &t2}, [&](bool bw) {
        G g;
        auto r = g.quadratic_penalty({g.param(t1), g.param(t2)}, {&f1, &f2}, {&a1, &a2},
                                     lambda);
        if (bw) g.backward(r);
        return g.scalar(r);
    });
    CHECK(res.ok);

    // grad == 2 * lambda * F * (theta - anchor), element for element
    t1.tensor.zero_grad();
    G g;
    auto r = g.quadratic_penalty({g.param(t1)}, {&f1}, {&a1}, lambda);
    g.backward(r);
    for (std::size_t i = 0; i < 9; ++i) {
        const double expect = 2.0 * lambda * f1[i] * (t1.tensor.data[i] - a1[i]);
        CHECK(t1.tensor.grad[i] == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("fd: multi-head attention") {
    Rng rng(11);
    P x = make_param("x", {2, 5, 8}, rng, 0.5);
    P wq = make_param("wq", {8, 8}, rng, 0.3), bq = make_param("bq", {8}, rng, 0.1);
    P wk = make_param("wk", {8, 8}, rng, 0.3), bk = make_param("bk", {8}, rng, 0.1);
    P wv = make_param("wv", {8, 8}, rng, 0.3), bv = make_param("bv", {8}, rng, 0.1);
    P wo = make_param("wo", {8, 8}, rng, 0.3), bo = make_param("bo", {8}, rng, 0.1);
    AttentionParams<double> ap{&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
    auto res = fdcheck::check(
        {&x, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo},
        [&](bool bw) {
            G g;
            auto r = reduce(g, multi_head_attention(g, g.param(x), ap, 2));
            if (bw) g.backward(r);
            return g.scalar(r);
        },
        10);
    CHECK(res.ok);
}

TEST_CASE("fd: full model loss over every parameter") {
    EncoderConfig cfg;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_tokens_a = 4;
    cfg.max_tokens_b = 6;
    cfg.vocab_b = 12;
    cfg.feat_dim_a = 4;
    ModelT<double> model(cfg, 21);
    model.add_head("t", HeadKind::Classifier, 3);

    BatchT<double> batch;
    batch.batch = 2;
    batch.n_a = 3;
    batch.n_b = 4;
    Rng rng(22);
    batch.a.resize(batch.batch * batch.n_a * cfg.feat_dim_a);
    for (auto& v : batch.a) v = rng.normal();
    batch.b = {4, 7, 2, 11, 5, 4, 9, 0};
    std::vector<std::size_t> targets{1, 2};

    auto params = model.parameters();
    auto res = fdcheck::check(
        params,
        [&](bool bw) {
            G g;
            auto logits = model.forward_logits(g, batch, "t");
            auto loss = g.softmax_cross_entropy(logits, targets);
            if (bw) g.backward(loss);
            return g.scalar(loss);
        },
        4);
    CHECK(res.ok);
    CHECK(res.checked >= 20);
}

TEST_CASE("f32 forward tracks the f64 shadow model") {
    EncoderConfig cfg;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.vocab_b = 12;
    cfg.feat_dim_a = 4;
    cfg.max_tokens_a = 4;
    cfg.max_tokens_b = 6;
    ModelT<double> md(cfg, 33);
    ModelT<float> mf(cfg, 33);
    md.add_head("t", HeadKind::Classifier, 4);
    mf.add_head("t", HeadKind::Classifier, 4);

    BatchT<double> bd;
    bd.batch = 2;
    bd.n_a = 3;
    bd.n_b = 4;
    Rng rng(34);
    bd.a.resize(bd.batch * bd.n_a * cfg.feat_dim_a);
    for (auto& v : bd.a) v = rng.normal();
    bd.b = {4, 7, 2, 11, 5, 4, 9, 0};
    BatchT<float> bf;
    bf.batch = bd.batch;
    bf.n_a = bd.n_a;
    bf.n_b = bd.n_b;
    bf.a.assign(bd.a.begin(), bd.a.end());
    bf.b = bd.b;

    Graph<double> gd;
    auto ld = md.forward_logits(gd, bd, "t");
    Graph<float> gf;
    auto lf = mf.forward_logits(gf, bf, "t");
    REQUIRE(gd.value(ld).size() == gf.value(lf).size());
    for (std::size_t i = 0; i < gd.value(ld).size(); ++i) {
        const double a = gd.value(ld)[i];
        const double b = static_cast<double>(gf.value(lf)[i]);
        CHECK(std::abs(a - b) <= 1e-3 * std::max({std::abs(a), std::abs(b), 1.0}));
    }
}

TEST_CASE("tape guards") {
    Graph<float> g;
    auto x = g.input({2}, {1.0f, 2.0f});
    CHECK_THROWS_AS(g.input({3}, {1.0f}), ShapeError);
    auto s = g.sum(x);
    g.backward(s);
    CHECK_THROWS_AS(g.backward(s), TapeError);

    Graph<float> g2;
    auto y = g2.input({1}, {std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(g2.backward(y), NumericError);
}

TEST_CASE("adamw: reference update, decoupled decay, cleared gradients") {
    Parameter p("w", Tensor({2}, 0.0f));
    p.tensor.data = {1.0f, -2.0f};
    p.tensor.grad = {0.5f, -0.25f};
    OptimizerState opt;
    opt.learning_rate = 0.1;
    opt.weight_decay = 0.01;
    std::vector<Parameter*> ps{&p};
    adamw_step(ps, opt);

    // One step from zero moments: mhat = g, vhat = g^2, so the Adam part is
    // g / (|g| + eps) = sign(g) up to eps; decay applies to the weight itself.
    const double eps = opt.adam_epsilon;
    const double w0 = 1.0, g0 = 0.5;
    const double upd0 = g0 / (std::sqrt(g0 * g0) + eps) + 0.01 * w0;
    CHECK(p.tensor.data[0] == doctest::Approx(w0 - 0.1 * upd0).epsilon(1e-6));
    const double w1 = -2.0, g1 = -0.25;
    const double upd1 = g1 / (std::sqrt(g1 * g1) + eps) + 0.01 * w1;
    CHECK(p.tensor.data[1] == doctest::Approx(w1 - 0.1 * upd1).epsilon(1e-6));
    CHECK(p.tensor.grad.empty());
    CHECK(opt.step_count == 1);
}

TEST_CASE("adamw: frozen parameters are untouched bit for bit") {
    Parameter p("w", Tensor({3}, 0.0f));
    p.tensor.data = {0.25f, -1.5f, 3.0f};
    p.trainable = false;
    const auto before = p.tensor.data;
    OptimizerState opt;
    std::vector<Parameter*> ps{&p};
    adamw_step(ps, opt);
    CHECK(p.tensor.data == before);
    CHECK(opt.moments.empty());
}

TEST_CASE("adamw: trainable parameter without gradient is an error") {
    Parameter p("w", Tensor({2}, 1.0f));
    OptimizerState opt;
    std::vector<Parameter*> ps{&p};
    CHECK_THROWS_AS(adamw_step(ps, opt), OptimizerError);
}

TEST_CASE("rng: determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c = Rng::derive(42, "alpha"), d = Rng::derive(42, "beta");
    CHECK(c.next_u64() != d.next_u64());
    Rng e = Rng::derive(42, "alpha");
    Rng f = Rng::derive(42, "alpha");
    CHECK(e.next_u64() == f.next_u64());

    auto perm = Rng(7).permutation(100);
    std::vector<bool> seen(100, false);
    for (auto i : perm) seen[i] = true;
    for (bool s : seen) CHECK(s);
}

TEST_CASE("seeded init: deterministic, shape-checked") {
    auto t1 = seeded_normal_init<float>({3, 4}, 0.0, 0.02, 5);
    auto t2 = seeded_normal_init<float>({3, 4}, 0.0, 0.02, 5);
    CHECK(t1.data == t2.data);
    CHECK_THROWS_AS(seeded_normal_init<float>({0, 4}, 0.0, 0.02, 5), InvalidShape);
    CHECK_THROWS_AS(seeded_normal_init<float>({2}, 0.0, 0.0, 5), InvalidShape);
}
