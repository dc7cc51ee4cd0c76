#pragma once

#include <vector>

#include "stn/ops.hpp"

// Fusion of spatial-branch and temporal-branch token sequences: either
// transformer cross-attention blocks (spatial tokens query the temporal
// tokens) or a per-token affine map over the concatenated features.

namespace stn {

inline constexpr double kLayerNormEps = 1e-5;

struct AttentionVars {
    Var wq, wk, wv, wo;  // [d x d]
    Var bq, bk, bv, bo;  // [d]
};

struct FusionBlockVars {
    AttentionVars attn;
    Var ln1_gamma, ln1_beta;        // [d]
    Var ln2_gamma, ln2_beta;        // [d], unused when the feedforward is off
    Var ff_w1, ff_b1, ff_w2, ff_b2; // [d x 2d], [2d], [2d x d], [d]
};

// Multi-head cross-attention. Each head scales scores by sqrt(d/heads).
template <typename T>
Var cross_attention(Tape<T>& t, Var spatial_tokens, Var temporal_tokens, const AttentionVars& p,
                    size_t heads) {
    const auto& ss = t.val(spatial_tokens).shape();
    const auto& ts = t.val(temporal_tokens).shape();
    if (ss.size() != 3 || ts.size() != 3 || ss.back() != ts.back() || ss[0] != ts[0])
        throw DimensionError("cross_attention: token shapes " + shape_str(ss) + " vs " +
                             shape_str(ts));
    const size_t d = ss.back();
    if (heads == 0 || d % heads != 0)
        throw ConfigError("cross_attention: embed dim " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    const size_t dh = d / heads;

    Var q = linear(t, spatial_tokens, p.wq, p.bq);
    Var k = linear(t, temporal_tokens, p.wk, p.bk);
    Var v = linear(t, temporal_tokens, p.wv, p.bv);

    const T scale = T(1) / std::sqrt(T(dh));
    std::vector<Var> head_outputs;
    head_outputs.reserve(heads);
    for (size_t hd = 0; hd < heads; ++hd) {
        Var qh = slice_last(t, q, hd * dh, dh);
        Var kh = slice_last(t, k, hd * dh, dh);
        Var vh = slice_last(t, v, hd * dh, dh);
        Var scores = mul_scalar(t, bmm_nt(t, qh, kh), scale);  // [B, S, L]
        Var weights = softmax(t, scores, 2);
        head_outputs.push_back(bmm(t, weights, vh));  // [B, S, dh]
    }
    Var merged = heads == 1 ? head_outputs[0] : concat_last(t, head_outputs);
    return linear(t, merged, p.wo, p.bo);
}

// Pre-norm-free encoder block: residual cross-attention, layer norm, then an
// optional position-wise feedforward sublayer with its own residual + norm.
template <typename T>
Var fusion_block(Tape<T>& t, Var spatial_tokens, Var temporal_tokens, const FusionBlockVars& p,
                 size_t heads, bool feedforward) {
    Var attended = cross_attention(t, spatial_tokens, temporal_tokens, p.attn, heads);
    Var x = layer_norm(t, add(t, spatial_tokens, attended), p.ln1_gamma, p.ln1_beta,
                       T(kLayerNormEps));
    if (!feedforward) return x;
    Var hidden = gelu(t, linear(t, x, p.ff_w1, p.ff_b1));
    Var ff = linear(t, hidden, p.ff_w2, p.ff_b2);
    return layer_norm(t, add(t, x, ff), p.ln2_gamma, p.ln2_beta, T(kLayerNormEps));
}

// Stacked blocks; block k's output becomes block k+1's spatial tokens while
// the temporal tokens stay fixed.
template <typename T>
Var fusion_stack(Tape<T>& t, Var spatial_tokens, Var temporal_tokens,
                 const std::vector<FusionBlockVars>& blocks, size_t heads, bool feedforward) {
    Var cur = spatial_tokens;
    for (const FusionBlockVars& blk : blocks)
        cur = fusion_block(t, cur, temporal_tokens, blk, heads, feedforward);
    return cur;
}

// Affine map of [spatial || temporal]. Inputs may be plain vectors or token
// sequences with matching leading shape; the map applies position-wise.
template <typename T>
Var linear_fusion(Tape<T>& t, Var spatial_vec, Var temporal_vec, Var w, Var b) {
    Var cat = concat_last(t, {spatial_vec, temporal_vec});
    return linear(t, cat, w, b);
}

}  // namespace stn
