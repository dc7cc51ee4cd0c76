#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stn/cells.hpp"
#include "stn/gradcheck.hpp"
#include "stn/rng.hpp"

using namespace stn;

namespace {

TensorD rnd(Shape s, Rng& rng, double lo = -0.5, double hi = 0.5) {
    TensorD t(std::move(s));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

struct SlstmTensors {
    TensorD w_z, w_i, w_f, w_o;
    TensorD b_z, b_i, b_f, b_o;
    std::vector<TensorD> r_z, r_i, r_f, r_o;
};

SlstmTensors zero_slstm(size_t in, size_t h, size_t heads) {
    SlstmTensors p;
    p.w_z = p.w_i = p.w_f = p.w_o = TensorD::zeros({in, h});
    p.b_z = p.b_i = p.b_f = p.b_o = TensorD::zeros({h});
    const size_t dh = h / heads;
    for (size_t k = 0; k < heads; ++k) {
        p.r_z.push_back(TensorD::zeros({dh, dh}));
        p.r_i.push_back(TensorD::zeros({dh, dh}));
        p.r_f.push_back(TensorD::zeros({dh, dh}));
        p.r_o.push_back(TensorD::zeros({dh, dh}));
    }
    return p;
}

SlstmTensors random_slstm(size_t in, size_t h, size_t heads, Rng& rng) {
    SlstmTensors p = zero_slstm(in, h, heads);
    for (TensorD* w : {&p.w_z, &p.w_i, &p.w_f, &p.w_o, &p.b_z, &p.b_i, &p.b_f, &p.b_o})
        for (size_t i = 0; i < w->size(); ++i) (*w)[i] = rng.uniform(-0.5, 0.5);
    for (auto* r : {&p.r_z, &p.r_i, &p.r_f, &p.r_o})
        for (TensorD& blk : *r)
            for (size_t i = 0; i < blk.size(); ++i) blk[i] = rng.uniform(-0.5, 0.5);
    return p;
}

SlstmLayerVars bind(TapeD& t, const SlstmTensors& p, bool requires_grad = false) {
    SlstmLayerVars v;
    v.w_z = t.leaf(p.w_z, requires_grad);
    v.w_i = t.leaf(p.w_i, requires_grad);
    v.w_f = t.leaf(p.w_f, requires_grad);
    v.w_o = t.leaf(p.w_o, requires_grad);
    v.b_z = t.leaf(p.b_z, requires_grad);
    v.b_i = t.leaf(p.b_i, requires_grad);
    v.b_f = t.leaf(p.b_f, requires_grad);
    v.b_o = t.leaf(p.b_o, requires_grad);
    for (size_t k = 0; k < p.r_z.size(); ++k) {
        v.r_z.push_back(t.leaf(p.r_z[k], requires_grad));
        v.r_i.push_back(t.leaf(p.r_i[k], requires_grad));
        v.r_f.push_back(t.leaf(p.r_f[k], requires_grad));
        v.r_o.push_back(t.leaf(p.r_o[k], requires_grad));
    }
    return v;
}

// Unstabilized closed-form sLSTM recurrence in plain doubles (single head).
// Valid only while the exponentials stay in range.
std::vector<double> naive_slstm_scalar_sequence(const SlstmTensors& p,
                                                const std::vector<std::vector<double>>& xs,
                                                size_t h, bool* overflowed = nullptr) {
    const size_t in = p.w_z.dim(0);
    std::vector<double> c(h, 0), n(h, 0), hid(h, 0);
    std::vector<double> out;
    if (overflowed) *overflowed = false;
    for (const auto& x : xs) {
        std::vector<double> pz(h), pi(h), pf(h), po(h);
        for (size_t j = 0; j < h; ++j) {
            double az = p.b_z[j], ai = p.b_i[j], af = p.b_f[j], ao = p.b_o[j];
            for (size_t k = 0; k < in; ++k) {
                az += x[k] * p.w_z.at({k, j});
                ai += x[k] * p.w_i.at({k, j});
                af += x[k] * p.w_f.at({k, j});
                ao += x[k] * p.w_o.at({k, j});
            }
            for (size_t k = 0; k < h; ++k) {
                az += hid[k] * p.r_z[0].at({k, j});
                ai += hid[k] * p.r_i[0].at({k, j});
                af += hid[k] * p.r_f[0].at({k, j});
                ao += hid[k] * p.r_o[0].at({k, j});
            }
            pz[j] = az;
            pi[j] = ai;
            pf[j] = af;
            po[j] = ao;
        }
        for (size_t j = 0; j < h; ++j) {
            const double z = std::tanh(pz[j]);
            const double ig = std::exp(pi[j]);
            const double fg = std::exp(pf[j]);
            const double o = 1.0 / (1.0 + std::exp(-po[j]));
            c[j] = fg * c[j] + ig * z;
            n[j] = fg * n[j] + ig;
            hid[j] = o * (c[j] / n[j]);
            if (overflowed && (!std::isfinite(c[j]) || !std::isfinite(n[j]) ||
                               !std::isfinite(hid[j])))
                *overflowed = true;
        }
        for (size_t j = 0; j < h; ++j) out.push_back(hid[j]);
    }
    return out;
}

TensorD naive_conv2d_same(const TensorD& x, const TensorD& w, const TensorD& b) {
    // x [B,Ci,H,W], w [Co,Ci,kh,kw], odd kernels, same padding
    const size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const long long ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    TensorD out({B, Co, H, W});
    for (size_t bi = 0; bi < B; ++bi)
        for (size_t co = 0; co < Co; ++co)
            for (size_t i = 0; i < H; ++i)
                for (size_t j = 0; j < W; ++j) {
                    double acc = b.empty() ? 0.0 : b[co];
                    for (size_t ci = 0; ci < Ci; ++ci)
                        for (size_t u = 0; u < kh; ++u)
                            for (size_t v = 0; v < kw; ++v) {
                                const long long ii = (long long)(i + u) - ph;
                                const long long jj = (long long)(j + v) - pw;
                                if (ii < 0 || jj < 0 || ii >= (long long)H || jj >= (long long)W)
                                    continue;
                                acc += x.at({bi, ci, (size_t)ii, (size_t)jj}) *
                                       w.at({co, ci, u, v});
                            }
                    out.at({bi, co, i, j}) = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("slstm step with zero parameters hits the neutral point") {
    TapeD t;
    SlstmLayerVars p = bind(t, zero_slstm(3, 2, 1));
    auto state = slstm_zero_state<double>(t, 1, 2);
    Var x = t.leaf(TensorD({1, 3}, {5.0, -2.0, 0.3}));
    auto [hidden, s2] = slstm_step(t, x, state, p);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(t.val(hidden)[i] == 0.0);
        CHECK(t.val(s2.n)[i] == 1.0);
        CHECK(t.val(s2.c)[i] == 0.0);
        CHECK(s2.m[i] == 0.0);
    }
}

TEST_CASE("slstm scalar hand evaluation") {
    // W_z=1, b_i=ln 2, everything else zero, x=10, zero state:
    // z=tanh(10), m'=ln 2, i'=1, f'=1/2, c'=tanh(10), n'=1, hidden=0.5*tanh(10)
    TapeD t;
    SlstmTensors raw = zero_slstm(1, 1, 1);
    raw.w_z[0] = 1.0;
    raw.b_i[0] = std::log(2.0);
    SlstmLayerVars p = bind(t, raw);
    auto state = slstm_zero_state<double>(t, 1, 1);
    Var x = t.leaf(TensorD({1, 1}, {10.0}));
    auto [hidden, s2] = slstm_step(t, x, state, p);
    CHECK(s2.m[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(t.val(s2.c)[0] == doctest::Approx(std::tanh(10.0)).epsilon(1e-12));
    CHECK(t.val(s2.n)[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.val(hidden)[0] == doctest::Approx(0.5 * std::tanh(10.0)).epsilon(1e-12));
    CHECK(t.val(hidden)[0] == doctest::Approx(0.49999).epsilon(1e-4));
}

TEST_CASE("slstm stabilization survives an extreme gate bias") {
    Rng rng(21);
    SlstmTensors raw = random_slstm(2, 3, 1, rng);
    for (size_t i = 0; i < raw.b_i.size(); ++i) raw.b_i[i] = 1000.0;

    std::vector<std::vector<double>> xs = {{0.3, -0.8}, {1.0, 0.5}, {-0.2, 0.1}};
    bool overflowed = false;
    naive_slstm_scalar_sequence(raw, xs, 3, &overflowed);
    CHECK(overflowed);  // the unstabilized form blows past double range

    TapeD t;
    SlstmLayerVars p = bind(t, raw);
    auto state = slstm_zero_state<double>(t, 1, 3);
    for (const auto& x : xs) {
        auto [hidden, s2] = slstm_step(t, t.leaf(TensorD({1, 2}, {x[0], x[1]})), state, p);
        state = s2;
        for (size_t j = 0; j < 3; ++j) {
            CHECK(std::isfinite(t.val(hidden)[j]));
            CHECK(std::abs(t.val(hidden)[j]) <= 1.0);
        }
    }
}

TEST_CASE("stabilized path equals the naive recurrence for moderate gates") {
    Rng rng(22);
    for (int trial = 0; trial < 10; ++trial) {
        SlstmTensors raw = random_slstm(2, 3, 1, rng);
        std::vector<std::vector<double>> xs;
        for (int s = 0; s < 4; ++s) xs.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2)});

        std::vector<double> ref = naive_slstm_scalar_sequence(raw, xs, 3);

        TapeD t;
        SlstmLayerVars p = bind(t, raw);
        auto state = slstm_zero_state<double>(t, 1, 3);
        size_t k = 0;
        for (const auto& x : xs) {
            auto [hidden, s2] = slstm_step(t, t.leaf(TensorD({1, 2}, {x[0], x[1]})), state, p);
            state = s2;
            for (size_t j = 0; j < 3; ++j, ++k)
                CHECK(std::abs(t.val(hidden)[j] - ref[k]) <= 1e-8);
        }
    }
}

TEST_CASE("slstm hidden stays inside the tanh hull") {
    Rng rng(23);
    SlstmTensors raw = random_slstm(2, 4, 2, rng);
    for (size_t i = 0; i < raw.b_i.size(); ++i) raw.b_i[i] = rng.uniform(-3, 3);
    TapeD t;
    SlstmLayerVars p = bind(t, raw);
    auto state = slstm_zero_state<double>(t, 2, 4);
    for (int s = 0; s < 12; ++s) {
        TensorD x({2, 2});
        for (size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-5, 5);
        auto [hidden, s2] = slstm_step(t, t.leaf(x), state, p);
        state = s2;
        for (size_t i = 0; i < t.val(hidden).size(); ++i)
            CHECK(std::abs(t.val(hidden)[i]) <= 1.0);
    }
}

TEST_CASE("slstm_sequence degenerate and zero cases") {
    Rng rng(24);
    SlstmTensors raw = random_slstm(2, 2, 1, rng);

    TapeD t;
    std::vector<SlstmLayerVars> layers = {bind(t, raw)};
    Var x = t.leaf(TensorD({1, 2}, {0.4, -0.7}));
    auto seq = slstm_sequence(t, {x}, layers);
    auto state = slstm_zero_state<double>(t, 1, 2);
    auto [step_h, s2] = slstm_step(t, x, state, layers[0]);
    REQUIRE(seq.size() == 1);
    CHECK(t.val(seq[0]) == t.val(step_h));

    std::vector<SlstmLayerVars> zero_layers = {bind(t, zero_slstm(2, 2, 1))};
    auto zseq = slstm_sequence(t, {x, x, x}, zero_layers);
    for (Var v : zseq)
        for (size_t i = 0; i < t.val(v).size(); ++i) CHECK(t.val(v)[i] == 0.0);

    CHECK_THROWS_AS(slstm_sequence(t, {}, layers), ContractError);
}

TEST_CASE("slstm_sequence matches the scalar oracle over three steps") {
    Rng rng(25);
    SlstmTensors raw = random_slstm(1, 1, 1, rng);
    std::vector<std::vector<double>> xs = {{0.7}, {-1.2}, {0.4}};
    std::vector<double> ref = naive_slstm_scalar_sequence(raw, xs, 1);

    TapeD t;
    std::vector<SlstmLayerVars> layers = {bind(t, raw)};
    std::vector<Var> inputs;
    for (const auto& x : xs) inputs.push_back(t.leaf(TensorD({1, 1}, {x[0]})));
    auto seq = slstm_sequence(t, inputs, layers);
    for (size_t s = 0; s < 3; ++s) CHECK(t.val(seq[s])[0] == doctest::Approx(ref[s]).epsilon(1e-10));
}

TEST_CASE("gradients of a 3-step unrolled slstm match finite differences") {
    Rng rng(26);
    SlstmTensors raw = random_slstm(2, 2, 1, rng);
    std::vector<TensorD> point = {raw.w_z, raw.w_i, raw.w_f, raw.w_o, raw.b_z, raw.b_i,
                                  raw.b_f,  raw.b_o, raw.r_z[0], raw.r_i[0], raw.r_f[0],
                                  raw.r_o[0], rnd({1, 2}, rng), rnd({1, 2}, rng), rnd({1, 2}, rng)};
    double err = grad_check(
        [](TapeD& t, const std::vector<Var>& v) {
            SlstmLayerVars p;
            p.w_z = v[0];
            p.w_i = v[1];
            p.w_f = v[2];
            p.w_o = v[3];
            p.b_z = v[4];
            p.b_i = v[5];
            p.b_f = v[6];
            p.b_o = v[7];
            p.r_z = {v[8]};
            p.r_i = {v[9]};
            p.r_f = {v[10]};
            p.r_o = {v[11]};
            auto seq = slstm_sequence(t, {v[12], v[13], v[14]}, {p});
            Var s = stack_steps(t, seq);
            return sum_all(t, mul(t, s, s));
        },
        point);
    CHECK(err < 1e-4);
}

TEST_CASE("head block-diagonality isolates per-head hidden slices") {
    Rng rng(27);
    const size_t in = 3, h = 4, heads = 2, dh = h / heads;
    SlstmTensors raw = random_slstm(in, h, heads, rng);
    TensorD x = rnd({1, in}, rng);

    auto run = [&](const SlstmTensors& params) {
        TapeD t;
        SlstmLayerVars p = bind(t, params);
        auto state = slstm_zero_state<double>(t, 1, h);
        Var xv = t.leaf(x);
        auto [h1, s1] = slstm_step(t, xv, state, p);
        auto [h2, s2] = slstm_step(t, xv, s1, p);
        return t.val(h2);
    };

    TensorD base = run(raw);

    // Silence head 1's input: its weight columns, biases, and recurrent block.
    SlstmTensors cut = raw;
    for (TensorD* w : {&cut.w_z, &cut.w_i, &cut.w_f, &cut.w_o})
        for (size_t r = 0; r < in; ++r)
            for (size_t j = dh; j < h; ++j) w->at({r, j}) = 0.0;
    for (TensorD* b : {&cut.b_z, &cut.b_i, &cut.b_f, &cut.b_o})
        for (size_t j = dh; j < h; ++j) (*b)[j] = 0.0;
    for (auto* r : {&cut.r_z, &cut.r_i, &cut.r_f, &cut.r_o}) (*r)[1] = TensorD::zeros({dh, dh});

    TensorD cut_out = run(cut);
    for (size_t j = 0; j < dh; ++j) CHECK(cut_out[j] == base[j]);  // head 0 untouched
}

TEST_CASE("convlstm neutral point and shape checks") {
    TapeD t;
    ConvLstmVars p;
    auto zk = [&](Shape s) { return t.leaf(TensorD::zeros(std::move(s))); };
    p.wx_i = zk({1, 1, 3, 3});
    p.wx_f = zk({1, 1, 3, 3});
    p.wx_o = zk({1, 1, 3, 3});
    p.wx_g = zk({1, 1, 3, 3});
    p.wh_i = zk({1, 1, 3, 3});
    p.wh_f = zk({1, 1, 3, 3});
    p.wh_o = zk({1, 1, 3, 3});
    p.wh_g = zk({1, 1, 3, 3});
    p.b_i = zk({1});
    p.b_f = zk({1});
    p.b_o = zk({1});
    p.b_g = zk({1});
    auto state = convlstm_zero_state<double>(t, 1, 1, 4, 4);
    Rng rng(28);
    Var frame = t.leaf(rnd({1, 1, 4, 4}, rng));
    ConvLstmState s2 = convlstm_step(t, frame, state, p);
    for (size_t i = 0; i < t.val(s2.hidden).size(); ++i) {
        CHECK(t.val(s2.cell)[i] == 0.0);  // gates 0.5, candidate 0
        CHECK(t.val(s2.hidden)[i] == 0.0);
    }
}

TEST_CASE("convlstm saturated gates carry the cell state") {
    TapeD t;
    ConvLstmVars p;
    auto zk = [&](Shape s) { return t.leaf(TensorD::zeros(std::move(s))); };
    p.wx_i = zk({1, 1, 3, 3});
    p.wx_f = zk({1, 1, 3, 3});
    p.wx_o = zk({1, 1, 3, 3});
    p.wx_g = zk({1, 1, 3, 3});
    p.wh_i = zk({1, 1, 3, 3});
    p.wh_f = zk({1, 1, 3, 3});
    p.wh_o = zk({1, 1, 3, 3});
    p.wh_g = zk({1, 1, 3, 3});
    p.b_i = t.leaf(TensorD({1}, {-50.0}));
    p.b_f = t.leaf(TensorD({1}, {50.0}));
    p.b_o = zk({1});
    p.b_g = zk({1});
    Rng rng(29);
    TensorD c0 = rnd({1, 1, 4, 4}, rng, -1.0, 1.0);
    ConvLstmState state{t.leaf(TensorD::zeros({1, 1, 4, 4})), t.leaf(c0)};
    ConvLstmState s2 = convlstm_step(t, t.leaf(rnd({1, 1, 4, 4}, rng)), state, p);
    for (size_t i = 0; i < c0.size(); ++i)
        CHECK(t.val(s2.cell)[i] == doctest::Approx(c0[i]).epsilon(1e-12));
}

TEST_CASE("convlstm matches a naive per-pixel oracle") {
    Rng rng(30);
    TensorD frame = rnd({1, 1, 4, 4}, rng, -1.0, 1.0);
    TensorD h0 = rnd({1, 1, 4, 4}, rng, -1.0, 1.0);
    TensorD c0 = rnd({1, 1, 4, 4}, rng, -1.0, 1.0);
    TensorD wx[4], wh[4], b[4];
    for (int k = 0; k < 4; ++k) {
        wx[k] = rnd({1, 1, 3, 3}, rng);
        wh[k] = rnd({1, 1, 3, 3}, rng);
        b[k] = rnd({1}, rng);
    }

    // library step
    TapeD t;
    ConvLstmVars p;
    p.wx_i = t.leaf(wx[0]);
    p.wx_f = t.leaf(wx[1]);
    p.wx_o = t.leaf(wx[2]);
    p.wx_g = t.leaf(wx[3]);
    p.wh_i = t.leaf(wh[0]);
    p.wh_f = t.leaf(wh[1]);
    p.wh_o = t.leaf(wh[2]);
    p.wh_g = t.leaf(wh[3]);
    p.b_i = t.leaf(b[0]);
    p.b_f = t.leaf(b[1]);
    p.b_o = t.leaf(b[2]);
    p.b_g = t.leaf(b[3]);
    ConvLstmState s2 = convlstm_step(t, t.leaf(frame), ConvLstmState{t.leaf(h0), t.leaf(c0)}, p);

    // oracle
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    TensorD pre[4];
    for (int k = 0; k < 4; ++k) {
        TensorD a = naive_conv2d_same(frame, wx[k], b[k]);
        TensorD bb = naive_conv2d_same(h0, wh[k], TensorD{});
        pre[k] = TensorD(a.shape());
        for (size_t i = 0; i < a.size(); ++i) pre[k][i] = a[i] + bb[i];
    }
    for (size_t i = 0; i < c0.size(); ++i) {
        const double ig = sig(pre[0][i]), fg = sig(pre[1][i]), og = sig(pre[2][i]);
        const double g = std::tanh(pre[3][i]);
        const double c_ref = fg * c0[i] + ig * g;
        const double h_ref = og * std::tanh(c_ref);
        CHECK(std::abs(t.val(s2.cell)[i] - c_ref) <= 1e-10);
        CHECK(std::abs(t.val(s2.hidden)[i] - h_ref) <= 1e-10);
    }
}

TEST_CASE("lstm neutral point, saturation, and scalar oracle") {
    Rng rng(31);

    // zero params and state -> zero hidden
    {
        TapeD t;
        LstmLayerVars p;
        auto z = [&](Shape s) { return t.leaf(TensorD::zeros(std::move(s))); };
        p.w_i = z({2, 2});
        p.w_f = z({2, 2});
        p.w_o = z({2, 2});
        p.w_g = z({2, 2});
        p.r_i = z({2, 2});
        p.r_f = z({2, 2});
        p.r_o = z({2, 2});
        p.r_g = z({2, 2});
        p.b_i = z({2});
        p.b_f = z({2});
        p.b_o = z({2});
        p.b_g = z({2});
        LstmState s2 = lstm_step(t, t.leaf(rnd({1, 2}, rng)), lstm_zero_state<double>(t, 1, 2), p);
        for (size_t i = 0; i < 2; ++i) CHECK(t.val(s2.hidden)[i] == 0.0);
    }

    // saturated forget=1 / input=0 carries the cell
    {
        TapeD t;
        LstmLayerVars p;
        auto z = [&](Shape s) { return t.leaf(TensorD::zeros(std::move(s))); };
        p.w_i = z({2, 2});
        p.w_f = z({2, 2});
        p.w_o = z({2, 2});
        p.w_g = z({2, 2});
        p.r_i = z({2, 2});
        p.r_f = z({2, 2});
        p.r_o = z({2, 2});
        p.r_g = z({2, 2});
        p.b_i = t.leaf(TensorD({2}, {-50, -50}));
        p.b_f = t.leaf(TensorD({2}, {50, 50}));
        p.b_o = z({2});
        p.b_g = z({2});
        TensorD c0({1, 2}, {0.37, -0.81});
        LstmState s2 =
            lstm_step(t, t.leaf(rnd({1, 2}, rng)), LstmState{t.leaf(TensorD::zeros({1, 2})), t.leaf(c0)}, p);
        for (size_t i = 0; i < 2; ++i)
            CHECK(t.val(s2.cell)[i] == doctest::Approx(c0[i]).epsilon(1e-12));
    }

    // random 2-unit params vs a hand recurrence
    {
        TensorD w[4], r[4], b[4];
        for (int k = 0; k < 4; ++k) {
            w[k] = rnd({2, 2}, rng);
            r[k] = rnd({2, 2}, rng);
            b[k] = rnd({2}, rng);
        }
        TensorD x = rnd({1, 2}, rng);
        TapeD t;
        LstmLayerVars p;
        p.w_i = t.leaf(w[0]);
        p.w_f = t.leaf(w[1]);
        p.w_o = t.leaf(w[2]);
        p.w_g = t.leaf(w[3]);
        p.r_i = t.leaf(r[0]);
        p.r_f = t.leaf(r[1]);
        p.r_o = t.leaf(r[2]);
        p.r_g = t.leaf(r[3]);
        p.b_i = t.leaf(b[0]);
        p.b_f = t.leaf(b[1]);
        p.b_o = t.leaf(b[2]);
        p.b_g = t.leaf(b[3]);
        LstmState s1 = lstm_step(t, t.leaf(x), lstm_zero_state<double>(t, 1, 2), p);
        LstmState s2 = lstm_step(t, t.leaf(x), s1, p);

        auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
        double hid[2] = {0, 0}, cell[2] = {0, 0};
        for (int step = 0; step < 2; ++step) {
            double pre[4][2];
            for (int k = 0; k < 4; ++k)
                for (size_t j = 0; j < 2; ++j) {
                    const TensorD& wk = (k == 0 ? w[0] : k == 1 ? w[1] : k == 2 ? w[2] : w[3]);
                    const TensorD& rk = (k == 0 ? r[0] : k == 1 ? r[1] : k == 2 ? r[2] : r[3]);
                    const TensorD& bk = (k == 0 ? b[0] : k == 1 ? b[1] : k == 2 ? b[2] : b[3]);
                    pre[k][j] = bk[j];
                    for (size_t u = 0; u < 2; ++u) pre[k][j] += x[u] * wk.at({u, j});
                    for (size_t u = 0; u < 2; ++u) pre[k][j] += hid[u] * rk.at({u, j});
                }
            for (size_t j = 0; j < 2; ++j) {
                cell[j] = sig(pre[1][j]) * cell[j] + sig(pre[0][j]) * std::tanh(pre[3][j]);
                hid[j] = sig(pre[2][j]) * std::tanh(cell[j]);
            }
        }
        for (size_t j = 0; j < 2; ++j)
            CHECK(t.val(s2.hidden)[j] == doctest::Approx(hid[j]).epsilon(1e-12));
    }
}

TEST_CASE("batched slstm step equals independent per-sample steps") {
    Rng rng(32);
    SlstmTensors raw = random_slstm(3, 4, 2, rng);
    TensorD x0 = rnd({1, 3}, rng), x1 = rnd({1, 3}, rng);
    TensorD xb({2, 3});
    for (size_t j = 0; j < 3; ++j) {
        xb.at({0, j}) = x0.at({0, j});
        xb.at({1, j}) = x1.at({0, j});
    }
    auto run = [&](const TensorD& x) {
        TapeD t;
        SlstmLayerVars p = bind(t, raw);
        auto st = slstm_zero_state<double>(t, x.dim(0), 4);
        auto [h1, s1] = slstm_step(t, t.leaf(x), st, p);
        auto [h2, s2] = slstm_step(t, t.leaf(x), s1, p);
        return t.val(h2);
    };
    TensorD hb = run(xb), h0 = run(x0), h1 = run(x1);
    for (size_t j = 0; j < 4; ++j) {
        CHECK(hb.at({0, j}) == h0.at({0, j}));
        CHECK(hb.at({1, j}) == h1.at({0, j}));
    }
}
