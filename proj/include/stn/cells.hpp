#pragma once

#include <utility>
#include <vector>

#include "stn/ops.hpp"

// Temporal sequence cells. Parameters arrive as tape handles so the same code
// serves training (leaves bound to stored parameters) and tests.

namespace stn {

// ---------------------------------------------------------------------------
// sLSTM: exponential input/forget gating with a normalizer state and a
// log-domain stabilizer. The recurrent weights are block-diagonal across
// heads; each head only sees its own slice of the previous hidden state.
// ---------------------------------------------------------------------------

struct SlstmLayerVars {
    Var w_z, w_i, w_f, w_o;                    // input weights [in x h]
    Var b_z, b_i, b_f, b_o;                    // biases [h]
    std::vector<Var> r_z, r_i, r_f, r_o;       // per-head recurrent [h/a x h/a]
};

template <typename T>
struct SlstmState {
    Var c;        // cell [B x h]
    Var n;        // normalizer [B x h]
    Var hidden;   // [B x h]
    Tensor<T> m;  // stabilizer [B x h], kept off the tape
};

template <typename T>
SlstmState<T> slstm_zero_state(Tape<T>& t, size_t batch, size_t h) {
    Var z = t.leaf(Tensor<T>::zeros({batch, h}), false);
    return SlstmState<T>{z, z, z, Tensor<T>::zeros({batch, h})};
}

namespace detail {

// Hidden state times the block-diagonal recurrent matrix.
template <typename T>
Var block_recurrent(Tape<T>& t, Var hidden, const std::vector<Var>& blocks) {
    const size_t h = t.val(hidden).shape().back();
    const size_t heads = blocks.size();
    if (h % heads != 0)
        throw ConfigError("sLSTM hidden size " + std::to_string(h) +
                          " is not divisible by head count " + std::to_string(heads));
    const size_t dh = h / heads;
    if (heads == 1) return matmul(t, hidden, blocks[0]);
    std::vector<Var> parts;
    parts.reserve(heads);
    for (size_t k = 0; k < heads; ++k)
        parts.push_back(matmul(t, slice_last(t, hidden, k * dh, dh), blocks[k]));
    return concat_last(t, parts);
}

}  // namespace detail

// One sLSTM step. The stabilizer m' = max(f_pre + m, i_pre) shifts both
// exponentials; the hidden output o * c/n is invariant to that shift, so m is
// treated as a constant and gradients flow only through the shifted gates.
template <typename T>
std::pair<Var, SlstmState<T>> slstm_step(Tape<T>& t, Var x, const SlstmState<T>& state,
                                         const SlstmLayerVars& p) {
    auto gate_pre = [&](Var w, Var b, const std::vector<Var>& r) {
        return add(t, linear(t, x, w, b), detail::block_recurrent(t, state.hidden, r));
    };
    Var pre_z = gate_pre(p.w_z, p.b_z, p.r_z);
    Var pre_i = gate_pre(p.w_i, p.b_i, p.r_i);
    Var pre_f = gate_pre(p.w_f, p.b_f, p.r_f);
    Var pre_o = gate_pre(p.w_o, p.b_o, p.r_o);

    Var z = tanh_(t, pre_z);
    Var o = sigmoid(t, pre_o);

    const Tensor<T>& iv = t.val(pre_i);
    const Tensor<T>& fv = t.val(pre_f);
    Tensor<T> m_new(state.m.shape());
    Tensor<T> i_shift(state.m.shape());
    Tensor<T> f_shift(state.m.shape());
    for (size_t k = 0; k < m_new.size(); ++k) {
        m_new[k] = std::max(fv[k] + state.m[k], iv[k]);
        i_shift[k] = -m_new[k];
        f_shift[k] = state.m[k] - m_new[k];
    }

    Var i_gate = exp_(t, add_detached(t, pre_i, i_shift));
    Var f_gate = exp_(t, add_detached(t, pre_f, f_shift));

    Var c_next = add(t, mul(t, f_gate, state.c), mul(t, i_gate, z));
    Var n_next = add(t, mul(t, f_gate, state.n), i_gate);
    Var hidden = mul(t, o, div_(t, c_next, n_next));
    return {hidden, SlstmState<T>{c_next, n_next, hidden, std::move(m_new)}};
}

// Runs a stack of sLSTM layers over a sequence; layer k feeds layer k+1.
// Returns the top layer's hidden state at every step.
template <typename T>
std::vector<Var> slstm_sequence(Tape<T>& t, const std::vector<Var>& xs,
                                const std::vector<SlstmLayerVars>& layers) {
    if (xs.empty()) throw ContractError("slstm_sequence: empty input sequence");
    if (layers.empty()) throw ContractError("slstm_sequence: no layers");
    const size_t batch = t.val(xs[0]).dim(0);
    std::vector<Var> cur = xs;
    for (const SlstmLayerVars& layer : layers) {
        const size_t h = t.val(layer.b_z).size();
        SlstmState<T> state = slstm_zero_state(t, batch, h);
        std::vector<Var> next;
        next.reserve(cur.size());
        for (Var x : cur) {
            auto [hidden, s2] = slstm_step(t, x, state, layer);
            state = std::move(s2);
            next.push_back(hidden);
        }
        cur = std::move(next);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// ConvLSTM: gates are same-padding 2-D convolutions over spatial maps.
// ---------------------------------------------------------------------------

struct ConvLstmVars {
    Var wx_i, wx_f, wx_o, wx_g;  // input kernels [C x Cin x kh x kw]
    Var wh_i, wh_f, wh_o, wh_g;  // hidden kernels [C x C x kh x kw]
    Var b_i, b_f, b_o, b_g;      // [C]
};

struct ConvLstmState {
    Var hidden;  // [B x C x H x W]
    Var cell;    // [B x C x H x W]
};

template <typename T>
ConvLstmState convlstm_zero_state(Tape<T>& t, size_t batch, size_t channels, size_t height,
                                  size_t width) {
    Var z = t.leaf(Tensor<T>::zeros({batch, channels, height, width}), false);
    return ConvLstmState{z, z};
}

template <typename T>
ConvLstmState convlstm_step(Tape<T>& t, Var frame, const ConvLstmState& state,
                            const ConvLstmVars& p) {
    const auto& ks = t.val(p.wx_i).shape();
    if (ks[2] % 2 == 0 || ks[3] % 2 == 0)
        throw ConfigError("convlstm_step: same padding requires odd kernels, got " +
                          shape_str(ks));
    const Pad2 pad{(ks[2] - 1) / 2, (ks[3] - 1) / 2};
    auto gate_pre = [&](Var wx, Var wh, Var b) {
        return add(t, conv2d(t, frame, wx, b, pad), conv2d(t, state.hidden, wh, Var{}, pad));
    };
    Var i = sigmoid(t, gate_pre(p.wx_i, p.wh_i, p.b_i));
    Var f = sigmoid(t, gate_pre(p.wx_f, p.wh_f, p.b_f));
    Var o = sigmoid(t, gate_pre(p.wx_o, p.wh_o, p.b_o));
    Var g = tanh_(t, gate_pre(p.wx_g, p.wh_g, p.b_g));
    Var c_next = add(t, mul(t, f, state.cell), mul(t, i, g));
    Var h_next = mul(t, o, tanh_(t, c_next));
    return ConvLstmState{h_next, c_next};
}

// ---------------------------------------------------------------------------
// Plain LSTM for the flattened-patch baseline.
// ---------------------------------------------------------------------------

struct LstmLayerVars {
    Var w_i, w_f, w_o, w_g;  // input weights [in x h]
    Var r_i, r_f, r_o, r_g;  // recurrent weights [h x h]
    Var b_i, b_f, b_o, b_g;  // [h]
};

struct LstmState {
    Var hidden;  // [B x h]
    Var cell;    // [B x h]
};

template <typename T>
LstmState lstm_zero_state(Tape<T>& t, size_t batch, size_t h) {
    Var z = t.leaf(Tensor<T>::zeros({batch, h}), false);
    return LstmState{z, z};
}

template <typename T>
LstmState lstm_step(Tape<T>& t, Var x, const LstmState& state, const LstmLayerVars& p) {
    auto gate_pre = [&](Var w, Var r, Var b) {
        return add(t, linear(t, x, w, b), matmul(t, state.hidden, r));
    };
    Var i = sigmoid(t, gate_pre(p.w_i, p.r_i, p.b_i));
    Var f = sigmoid(t, gate_pre(p.w_f, p.r_f, p.b_f));
    Var o = sigmoid(t, gate_pre(p.w_o, p.r_o, p.b_o));
    Var g = tanh_(t, gate_pre(p.w_g, p.r_g, p.b_g));
    Var c_next = add(t, mul(t, f, state.cell), mul(t, i, g));
    Var h_next = mul(t, o, tanh_(t, c_next));
    return LstmState{h_next, c_next};
}

template <typename T>
std::vector<Var> lstm_sequence(Tape<T>& t, const std::vector<Var>& xs,
                               const std::vector<LstmLayerVars>& layers) {
    if (xs.empty()) throw ContractError("lstm_sequence: empty input sequence");
    const size_t batch = t.val(xs[0]).dim(0);
    std::vector<Var> cur = xs;
    for (const LstmLayerVars& layer : layers) {
        const size_t h = t.val(layer.b_i).size();
        LstmState state = lstm_zero_state(t, batch, h);
        std::vector<Var> next;
        next.reserve(cur.size());
        for (Var x : cur) {
            state = lstm_step(t, x, state, layer);
            next.push_back(state.hidden);
        }
        cur = std::move(next);
    }
    return cur;
}

}  // namespace stn
