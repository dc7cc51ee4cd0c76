#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "stn/fusion.hpp"
#include "stn/gradcheck.hpp"
#include "stn/rng.hpp"

using namespace stn;

namespace {

TensorD rnd(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(s));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

TensorD identity(size_t d) {
    TensorD t({d, d});
    for (size_t i = 0; i < d; ++i) t.at({i, i}) = 1.0;
    return t;
}

AttentionVars identity_attention(TapeD& t, size_t d) {
    AttentionVars p;
    p.wq = t.leaf(identity(d));
    p.wk = t.leaf(identity(d));
    p.wv = t.leaf(identity(d));
    p.wo = t.leaf(identity(d));
    p.bq = t.leaf(TensorD::zeros({d}));
    p.bk = t.leaf(TensorD::zeros({d}));
    p.bv = t.leaf(TensorD::zeros({d}));
    p.bo = t.leaf(TensorD::zeros({d}));
    return p;
}

AttentionVars random_attention(TapeD& t, size_t d, Rng& rng, bool req = false) {
    AttentionVars p;
    p.wq = t.leaf(rnd({d, d}, rng, -0.5, 0.5), req);
    p.wk = t.leaf(rnd({d, d}, rng, -0.5, 0.5), req);
    p.wv = t.leaf(rnd({d, d}, rng, -0.5, 0.5), req);
    p.wo = t.leaf(rnd({d, d}, rng, -0.5, 0.5), req);
    p.bq = t.leaf(rnd({d}, rng, -0.1, 0.1), req);
    p.bk = t.leaf(rnd({d}, rng, -0.1, 0.1), req);
    p.bv = t.leaf(rnd({d}, rng, -0.1, 0.1), req);
    p.bo = t.leaf(rnd({d}, rng, -0.1, 0.1), req);
    return p;
}

}  // namespace

TEST_CASE("single temporal token dominates attention") {
    Rng rng(41);
    TapeD t;
    const size_t d = 4;
    AttentionVars p = identity_attention(t, d);
    TensorD temporal = rnd({1, 1, d}, rng);
    Var out = cross_attention(t, t.leaf(rnd({1, 3, d}, rng)), t.leaf(temporal), p, 2);
    for (size_t s = 0; s < 3; ++s)
        for (size_t j = 0; j < d; ++j)
            CHECK(t.val(out).at({0, s, j}) == doctest::Approx(temporal.at({0, 0, j})).epsilon(1e-12));
}

TEST_CASE("identical keys average the temporal tokens") {
    Rng rng(42);
    TapeD t;
    const size_t d = 4, L = 5;
    AttentionVars p = identity_attention(t, d);
    p.wk = t.leaf(TensorD::zeros({d, d}));  // all keys collapse to zero
    TensorD temporal = rnd({1, L, d}, rng);
    Var out = cross_attention(t, t.leaf(rnd({1, 2, d}, rng)), t.leaf(temporal), p, 1);
    for (size_t s = 0; s < 2; ++s)
        for (size_t j = 0; j < d; ++j) {
            double mean = 0;
            for (size_t l = 0; l < L; ++l) mean += temporal.at({0, l, j});
            mean /= L;
            CHECK(t.val(out).at({0, s, j}) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("hand-computed two-key attention") {
    TapeD t;
    const size_t d = 2;
    AttentionVars p = identity_attention(t, d);
    Var sp = t.leaf(TensorD({1, 1, 2}, {1, 0}));
    Var tp = t.leaf(TensorD({1, 2, 2}, {1, 0, 0, 1}));
    Var out = cross_attention(t, sp, tp, p, 1);
    const double w1 = std::exp(1.0 / std::sqrt(2.0)) / (std::exp(1.0 / std::sqrt(2.0)) + 1.0);
    CHECK(w1 == doctest::Approx(0.6698).epsilon(1e-3));
    CHECK(t.val(out).at({0, 0, 0}) == doctest::Approx(w1).epsilon(1e-9));
    CHECK(t.val(out).at({0, 0, 1}) == doctest::Approx(1.0 - w1).epsilon(1e-9));
}

TEST_CASE("attention weights are a convex combination of value rows") {
    Rng rng(43);
    TapeD t;
    const size_t d = 6, S = 4, L = 5;
    AttentionVars p = random_attention(t, d, rng);
    p.wv = t.leaf(identity(d));
    p.bv = t.leaf(TensorD::zeros({d}));
    p.wo = t.leaf(identity(d));
    p.bo = t.leaf(TensorD::zeros({d}));
    TensorD temporal = rnd({1, L, d}, rng);
    Var out = cross_attention(t, t.leaf(rnd({1, S, d}, rng)), t.leaf(temporal), p, 1);
    for (size_t s = 0; s < S; ++s)
        for (size_t j = 0; j < d; ++j) {
            double lo = temporal.at({0, 0, j}), hi = lo;
            for (size_t l = 1; l < L; ++l) {
                lo = std::min(lo, temporal.at({0, l, j}));
                hi = std::max(hi, temporal.at({0, l, j}));
            }
            const double v = t.val(out).at({0, s, j});
            CHECK(v >= lo - 1e-9);
            CHECK(v <= hi + 1e-9);
        }
}

TEST_CASE("permuting temporal tokens does not change the output") {
    Rng rng(44);
    const size_t d = 4, S = 3, L = 6;
    TensorD sp = rnd({1, S, d}, rng);
    TensorD tp = rnd({1, L, d}, rng);
    TensorD tp_perm({1, L, d});
    const size_t perm[6] = {4, 0, 5, 2, 1, 3};
    for (size_t l = 0; l < L; ++l)
        for (size_t j = 0; j < d; ++j) tp_perm.at({0, l, j}) = tp.at({0, perm[l], j});

    auto run = [&](const TensorD& temporal) {
        TapeD t;
        Rng prng(45);
        AttentionVars p = random_attention(t, d, prng);
        Var out = cross_attention(t, t.leaf(sp), t.leaf(temporal), p, 2);
        return t.val(out);
    };
    TensorD a = run(tp), b = run(tp_perm);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("cross_attention rejects invalid head counts") {
    TapeD t;
    AttentionVars p = identity_attention(t, 4);
    Var sp = t.leaf(TensorD::zeros({1, 2, 4}));
    Var tp = t.leaf(TensorD::zeros({1, 2, 4}));
    CHECK_THROWS_AS(cross_attention(t, sp, tp, p, 3), ConfigError);
}

namespace {

FusionBlockVars zero_block(TapeD& t, size_t d) {
    FusionBlockVars b;
    auto z = [&](Shape s) { return t.leaf(TensorD::zeros(std::move(s))); };
    b.attn.wq = z({d, d});
    b.attn.wk = z({d, d});
    b.attn.wv = z({d, d});
    b.attn.wo = z({d, d});
    b.attn.bq = z({d});
    b.attn.bk = z({d});
    b.attn.bv = z({d});
    b.attn.bo = z({d});
    b.ln1_gamma = t.leaf(TensorD::ones({d}));
    b.ln1_beta = z({d});
    b.ln2_gamma = t.leaf(TensorD::ones({d}));
    b.ln2_beta = z({d});
    b.ff_w1 = z({d, 2 * d});
    b.ff_b1 = z({2 * d});
    b.ff_w2 = z({2 * d, d});
    b.ff_b2 = z({d});
    return b;
}

FusionBlockVars random_block(TapeD& t, size_t d, Rng& rng, bool req = false) {
    FusionBlockVars b;
    b.attn = random_attention(t, d, rng, req);
    b.ln1_gamma = t.leaf(rnd({d}, rng, 0.5, 1.5), req);
    b.ln1_beta = t.leaf(rnd({d}, rng, -0.2, 0.2), req);
    b.ln2_gamma = t.leaf(rnd({d}, rng, 0.5, 1.5), req);
    b.ln2_beta = t.leaf(rnd({d}, rng, -0.2, 0.2), req);
    b.ff_w1 = t.leaf(rnd({d, 2 * d}, rng, -0.4, 0.4), req);
    b.ff_b1 = t.leaf(rnd({2 * d}, rng, -0.1, 0.1), req);
    b.ff_w2 = t.leaf(rnd({2 * d, d}, rng, -0.4, 0.4), req);
    b.ff_b2 = t.leaf(rnd({d}, rng, -0.1, 0.1), req);
    return b;
}

}  // namespace

TEST_CASE("fusion_block with zero weights reduces to layer_norm of the queries") {
    Rng rng(46);
    const size_t d = 4;
    TapeD t;
    FusionBlockVars b = zero_block(t, d);
    TensorD sp = rnd({1, 3, d}, rng);
    Var out = fusion_block(t, t.leaf(sp), t.leaf(rnd({1, 2, d}, rng)), b, 2, true);
    Var ref = layer_norm(t, t.leaf(sp), t.leaf(TensorD::ones({d})), t.leaf(TensorD::zeros({d})),
                         kLayerNormEps);
    for (size_t i = 0; i < t.val(out).size(); ++i)
        CHECK(t.val(out)[i] == doctest::Approx(t.val(ref)[i]).epsilon(1e-4));
}

TEST_CASE("one fusion block equals the manual composition of its sublayers") {
    Rng rng(47);
    const size_t d = 4;
    TapeD t;
    FusionBlockVars b = random_block(t, d, rng);
    TensorD sp = rnd({1, 3, d}, rng), tp = rnd({1, 2, d}, rng);
    Var spv = t.leaf(sp), tpv = t.leaf(tp);

    Var block = fusion_stack(t, spv, tpv, {b}, 2, true);

    Var attended = cross_attention(t, spv, tpv, b.attn, 2);
    Var x = layer_norm(t, add(t, spv, attended), b.ln1_gamma, b.ln1_beta, kLayerNormEps);
    Var ff = linear(t, gelu(t, linear(t, x, b.ff_w1, b.ff_b1)), b.ff_w2, b.ff_b2);
    Var manual = layer_norm(t, add(t, x, ff), b.ln2_gamma, b.ln2_beta, kLayerNormEps);

    CHECK(t.val(block) == t.val(manual));
}

TEST_CASE("fusion block gradients match finite differences") {
    Rng rng(48);
    const size_t d = 4;
    std::vector<TensorD> point;
    {
        // collect the same random draws used to bind leaves inside the fn
        Rng tmp(49);
        TapeD t;
        FusionBlockVars b = random_block(t, d, tmp);
        for (Var v : {b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo, b.attn.bq, b.attn.bk, b.attn.bv,
                      b.attn.bo, b.ln1_gamma, b.ln1_beta, b.ln2_gamma, b.ln2_beta, b.ff_w1, b.ff_b1,
                      b.ff_w2, b.ff_b2})
            point.push_back(t.val(v));
    }
    point.push_back(rnd({1, 2, d}, rng));
    point.push_back(rnd({1, 3, d}, rng));

    double err = grad_check(
        [d](TapeD& t, const std::vector<Var>& v) {
            FusionBlockVars b;
            b.attn = {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
            b.ln1_gamma = v[8];
            b.ln1_beta = v[9];
            b.ln2_gamma = v[10];
            b.ln2_beta = v[11];
            b.ff_w1 = v[12];
            b.ff_b1 = v[13];
            b.ff_w2 = v[14];
            b.ff_b2 = v[15];
            Var out = fusion_block(t, v[17], v[16], b, 2, true);
            return sum_all(t, mul(t, out, out));
        },
        point);
    CHECK(err < 1e-4);
}

TEST_CASE("linear_fusion basics") {
    TapeD t;

    // zero weights, bias beta -> beta
    {
        Var out = linear_fusion(t, t.leaf(TensorD({3}, {1, 2, 3})), t.leaf(TensorD({2}, {4, 5})),
                                t.leaf(TensorD::zeros({5, 4})),
                                t.leaf(TensorD({4}, {0.1, 0.2, 0.3, 0.4})));
        CHECK(t.val(out) == TensorD({4}, {0.1, 0.2, 0.3, 0.4}));
    }

    // weights selecting the spatial half
    {
        TensorD w = TensorD::zeros({5, 3});
        for (size_t i = 0; i < 3; ++i) w.at({i, i}) = 1.0;
        Var out = linear_fusion(t, t.leaf(TensorD({3}, {7, 8, 9})), t.leaf(TensorD({2}, {-1, -2})),
                                t.leaf(w), t.leaf(TensorD::zeros({3})));
        CHECK(t.val(out) == TensorD({3}, {7, 8, 9}));
    }

    // random 3+2 -> 4 affine vs a hand matrix product
    {
        Rng rng(50);
        TensorD sp = rnd({3}, rng), tp = rnd({2}, rng);
        TensorD w = rnd({5, 4}, rng), b = rnd({4}, rng);
        Var out = linear_fusion(t, t.leaf(sp), t.leaf(tp), t.leaf(w), t.leaf(b));
        double cat[5] = {sp[0], sp[1], sp[2], tp[0], tp[1]};
        for (size_t j = 0; j < 4; ++j) {
            double ref = b[j];
            for (size_t i = 0; i < 5; ++i) ref += cat[i] * w.at({i, j});
            CHECK(t.val(out)[j] == doctest::Approx(ref).epsilon(1e-12));
        }
    }
}
