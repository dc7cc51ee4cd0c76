#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stn/cells.hpp"
#include "stn/fusion.hpp"
#include "stn/ops.hpp"
#include "stn/rng.hpp"

// The dual-path forecasting model family: a temporal branch (sLSTM or
// ConvLSTM), a three-stage Conv3D spatial branch, and a fusion layer (linear
// or transformer cross-attention), stacked `stn_blocks` times and decoded by
// an MLP head. A flattened-patch LSTM serves as the purely temporal baseline.

namespace stn {

enum class Variant { kStn, kStnTf, kStnSlstm, kStnSlstmTf, kLstmFlat };

inline bool uses_slstm(Variant v) {
    return v == Variant::kStnSlstm || v == Variant::kStnSlstmTf;
}
inline bool uses_transformer_fusion(Variant v) {
    return v == Variant::kStnTf || v == Variant::kStnSlstmTf;
}
inline bool has_spatial_branch(Variant v) { return v != Variant::kLstmFlat; }

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kStn: return "STN";
        case Variant::kStnTf: return "STN-TF";
        case Variant::kStnSlstm: return "STN-sLSTM";
        case Variant::kStnSlstmTf: return "STN-sLSTM-TF";
        case Variant::kLstmFlat: return "LSTM-flat";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::kStn, Variant::kStnTf, Variant::kStnSlstm, Variant::kStnSlstmTf,
                      Variant::kLstmFlat})
        if (variant_name(v) == s) return v;
    throw ConfigError("unknown variant '" + s + "'");
}

// Channel widths of the spatial trunk plus the ConvLSTM hidden width. The
// trunk output width is decoupled from the hidden size; the spatial affine
// projects it to the embedding.
struct ConvPlan {
    size_t c1 = 1, c2 = 2, c3 = 2;
    size_t convlstm_channels = 1;
};

struct ModelConfig {
    size_t hidden = 64;       // h
    size_t stn_blocks = 2;    // b
    size_t slstm_heads = 4;   // a
    size_t slstm_layers = 2;  // l
    size_t fusion_heads = 8;  // f
    size_t fusion_blocks = 1;
    bool fusion_feedforward = true;
    Variant variant = Variant::kStnSlstmTf;
    size_t radius = 5;      // r
    size_t input_steps = 6; // n
    size_t horizon = 1;     // tau
    ConvPlan plan;
    size_t mlp_hidden = 0;  // 0 picks `hidden`

    size_t patch() const { return 2 * radius + 1; }
    size_t embed() const { return hidden; }
    size_t head_hidden() const { return mlp_hidden ? mlp_hidden : hidden; }

    void validate() const {
        if (hidden == 0 || stn_blocks == 0 || slstm_heads == 0 || slstm_layers == 0 ||
            fusion_heads == 0 || fusion_blocks == 0 || input_steps == 0 || horizon == 0)
            throw ConfigError("model config fields must be positive");
        if (plan.c1 == 0 || plan.c2 == 0 || plan.c3 == 0 || plan.convlstm_channels == 0)
            throw ConfigError("conv channel plan must be positive");
        if (hidden % slstm_heads != 0)
            throw ConfigError("hidden size " + std::to_string(hidden) +
                              " not divisible by sLSTM heads " + std::to_string(slstm_heads));
        if (embed() % fusion_heads != 0)
            throw ConfigError("embed dim " + std::to_string(embed()) +
                              " not divisible by fusion heads " + std::to_string(fusion_heads));
    }
};

// Ordered, named parameter registry. Insertion order is the serialization
// and optimizer order.
template <typename T>
class ParamStore {
  public:
    size_t add(std::string name, Tensor<T> value) {
        names_.push_back(std::move(name));
        values_.push_back(std::move(value));
        return values_.size() - 1;
    }

    size_t size() const { return values_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Tensor<T>& value(size_t i) { return values_[i]; }
    const Tensor<T>& value(size_t i) const { return values_[i]; }

    std::optional<size_t> find(const std::string& name) const {
        for (size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return i;
        return std::nullopt;
    }

    size_t count_scalars() const {
        size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
};

namespace refs {

constexpr size_t kNone = static_cast<size_t>(-1);

struct Affine {
    size_t w = kNone, b = kNone;
};

struct SlstmLayer {
    Affine gates[4];                     // z, i, f, o input weights + biases
    std::vector<size_t> rec[4];          // per-head recurrent blocks
};

struct ConvLstm {
    size_t wx[4] = {kNone, kNone, kNone, kNone};
    size_t wh[4] = {kNone, kNone, kNone, kNone};
    size_t b[4] = {kNone, kNone, kNone, kNone};
};

struct ConvStage {
    size_t kernel = kNone, bias = kNone;
    size_t bn_gamma = kNone, bn_beta = kNone;
    size_t bn_mean = kNone, bn_var = kNone;  // buffer indices
};

struct FusionBlock {
    size_t wq = kNone, wk = kNone, wv = kNone, wo = kNone;
    size_t bq = kNone, bk = kNone, bv = kNone, bo = kNone;
    size_t ln1_g = kNone, ln1_b = kNone, ln2_g = kNone, ln2_b = kNone;
    size_t ff_w1 = kNone, ff_b1 = kNone, ff_w2 = kNone, ff_b2 = kNone;
};

struct Stage {
    Affine temporal_in;  // stage >= 1: embed -> patch^2 for the temporal branch
    Affine spatial_in;   // stage >= 1: embed -> patch^2 for the spatial branch
    std::vector<SlstmLayer> slstm;
    ConvLstm convlstm;
    std::vector<ConvStage> conv;
    Affine temporal_proj;  // temporal tokens -> embed (transformer fusion)
    Affine spatial_proj;   // spatial tokens -> embed (transformer fusion)
    std::vector<FusionBlock> fusion;
    Affine linear_fuse;    // per-token fusion affine (linear fusion)
};

struct Head {
    Affine l1, l2;
};

}  // namespace refs

template <typename T>
class StnModel;

template <typename T>
StnModel<T> build_model(const ModelConfig& cfg, uint64_t seed);

// Binds every parameter as a tape leaf for one forward pass.
template <typename T>
struct ForwardCtx {
    Tape<T>* tape = nullptr;
    std::vector<Var> pvars;
    bool training = false;
    bool update_running = false;
    Var operator[](size_t idx) const { return pvars[idx]; }
};

template <typename T>
class StnModel {
  public:
    ModelConfig config;
    ParamStore<T> params;
    ParamStore<T> buffers;  // batch-norm running statistics

    ForwardCtx<T> bind(Tape<T>& tape, bool requires_grad, bool training,
                       bool update_running = false) {
        ForwardCtx<T> ctx;
        ctx.tape = &tape;
        ctx.training = training;
        ctx.update_running = update_running;
        ctx.pvars.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            ctx.pvars.push_back(tape.leaf(params.value(i), requires_grad));
        return ctx;
    }

    // windows: [B, n, P, P], already per-cell normalized. Returns [B, tau].
    Var forward_batch(ForwardCtx<T>& ctx, const Tensor<T>& windows) {
        const size_t n = config.input_steps, p = config.patch();
        if (windows.rank() != 4 || windows.dim(1) != n || windows.dim(2) != p ||
            windows.dim(3) != p)
            throw DimensionError("forward: window batch " + shape_str(windows.shape()) +
                                 " does not match config [B," + std::to_string(n) + "," +
                                 std::to_string(p) + "," + std::to_string(p) + "]");
        const size_t bad = windows.first_nonfinite();
        if (bad != windows.size())
            throw InputError("forward: non-finite input at flat index " + std::to_string(bad));
        Tape<T>& t = *ctx.tape;
        const size_t batch = windows.dim(0);
        Var w = t.leaf(windows, false);

        if (config.variant == Variant::kLstmFlat) {
            Var steps3 = reshape(t, w, {batch, n, p * p});
            std::vector<Var> xs;
            xs.reserve(n);
            for (size_t k = 0; k < n; ++k) xs.push_back(slice_step(t, steps3, k));
            std::vector<LstmLayerVars> layers;
            for (const auto& lr : lstm_) layers.push_back(bind_lstm(ctx, lr));
            std::vector<Var> hs = lstm_sequence(t, xs, layers);
            return head(ctx, hs.back());
        }

        Var tokens{};  // [B, n, embed] after each stage
        for (size_t s = 0; s < stages_.size(); ++s) {
            const refs::Stage& st = stages_[s];
            // Stage 0 consumes raw frames; later stages re-project the fused
            // tokens into per-step frames through each branch's input map.
            Var frames0 = s == 0 ? reshape(t, w, {batch, n, p * p}) : Var{};
            Var temporal_steps =
                s == 0 ? frames0
                       : linear(t, tokens, ctx[st.temporal_in.w], ctx[st.temporal_in.b]);
            Var spatial_steps =
                s == 0 ? frames0 : linear(t, tokens, ctx[st.spatial_in.w], ctx[st.spatial_in.b]);
            Var volume = reshape(t, spatial_steps, {batch, 1, n, p, p});

            // temporal branch
            Var temporal_tokens;
            if (uses_slstm(config.variant)) {
                std::vector<Var> xs;
                xs.reserve(n);
                for (size_t k = 0; k < n; ++k) xs.push_back(slice_step(t, temporal_steps, k));
                std::vector<SlstmLayerVars> layers;
                for (const auto& lr : st.slstm) layers.push_back(bind_slstm(ctx, lr));
                std::vector<Var> hs = slstm_sequence(t, xs, layers);
                temporal_tokens = stack_steps(t, hs);  // [B, n, h]
            } else {
                ConvLstmVars cv = bind_convlstm(ctx, st.convlstm);
                ConvLstmState cstate =
                    convlstm_zero_state(t, batch, config.plan.convlstm_channels, p, p);
                std::vector<Var> pooled;
                pooled.reserve(n);
                for (size_t k = 0; k < n; ++k) {
                    Var frame = reshape(t, slice_step(t, temporal_steps, k), {batch, 1, p, p});
                    cstate = convlstm_step(t, frame, cstate, cv);
                    Var pool = mean_axis(t, mean_axis(t, cstate.hidden, 3), 2);  // [B, C]
                    pooled.push_back(pool);
                }
                temporal_tokens = stack_steps(t, pooled);  // [B, n, C]
            }

            Var spatial_tokens = spatial_branch(ctx, volume, s);  // [B, n, c3]

            // fusion
            if (uses_transformer_fusion(config.variant)) {
                Var sp = linear(t, spatial_tokens, ctx[st.spatial_proj.w], ctx[st.spatial_proj.b]);
                Var tp =
                    linear(t, temporal_tokens, ctx[st.temporal_proj.w], ctx[st.temporal_proj.b]);
                std::vector<FusionBlockVars> blocks;
                for (const refs::FusionBlock& fb : st.fusion) blocks.push_back(bind_fusion(ctx, fb));
                tokens = fusion_stack(t, sp, tp, blocks, config.fusion_heads,
                                      config.fusion_feedforward);
            } else {
                tokens = linear_fusion(t, spatial_tokens, temporal_tokens, ctx[st.linear_fuse.w],
                                       ctx[st.linear_fuse.b]);
            }
        }

        Var pooled_tokens = mean_axis(t, tokens, 1);  // [B, embed]
        return head(ctx, pooled_tokens);
    }

    // Spatial branch of one stage: three same-padding conv3d+batch-norm+gelu
    // stages over [B,1,n,P,P], spatially mean-pooled to per-timestep feature
    // vectors [B,n,c3].
    Var spatial_branch(ForwardCtx<T>& ctx, Var volume, size_t stage) {
        Tape<T>& t = *ctx.tape;
        const refs::Stage& st = stages_.at(stage);
        Var feat = volume;
        for (const refs::ConvStage& cs : st.conv) {
            Var conv = conv3d(t, feat, ctx[cs.kernel], ctx[cs.bias], Pad3{1, 1, 1});
            Var norm = batch_norm(t, conv, ctx[cs.bn_gamma], ctx[cs.bn_beta],
                                  buffers.value(cs.bn_mean), buffers.value(cs.bn_var),
                                  ctx.training, T(1e-5), T(0.1), ctx.update_running);
            feat = gelu(t, norm);
        }
        Var pooled = mean_axis(t, mean_axis(t, feat, 4), 3);  // [B, c3, n]
        return swap_last2(t, pooled);
    }

    // Single-sample inference; window is [n, P, P].
    Tensor<T> predict(const Tensor<T>& window) {
        Tape<T> tape;
        ForwardCtx<T> ctx = bind(tape, false, false);
        Shape s = window.shape();
        if (s.size() != 3)
            throw DimensionError("predict: window must be [n,P,P], got " + shape_str(s));
        Tensor<T> batch = window.reshaped({1, s[0], s[1], s[2]});
        Var out = forward_batch(ctx, batch);
        return tape.val(out).reshaped({config.horizon});
    }

    size_t count_params() const { return params.count_scalars(); }

    const std::vector<refs::Stage>& stages() const { return stages_; }
    const std::vector<refs::SlstmLayer>& lstm_layers() const { return lstm_; }
    const refs::Head& head_refs() const { return head_; }

  private:
    friend StnModel<T> build_model<T>(const ModelConfig& cfg, uint64_t seed);

    Var head(ForwardCtx<T>& ctx, Var features) {
        Tape<T>& t = *ctx.tape;
        Var hidden = gelu(t, linear(t, features, ctx[head_.l1.w], ctx[head_.l1.b]));
        return linear(t, hidden, ctx[head_.l2.w], ctx[head_.l2.b]);
    }

    SlstmLayerVars bind_slstm(const ForwardCtx<T>& ctx, const refs::SlstmLayer& lr) const {
        SlstmLayerVars v;
        v.w_z = ctx[lr.gates[0].w];
        v.w_i = ctx[lr.gates[1].w];
        v.w_f = ctx[lr.gates[2].w];
        v.w_o = ctx[lr.gates[3].w];
        v.b_z = ctx[lr.gates[0].b];
        v.b_i = ctx[lr.gates[1].b];
        v.b_f = ctx[lr.gates[2].b];
        v.b_o = ctx[lr.gates[3].b];
        for (size_t k : lr.rec[0]) v.r_z.push_back(ctx[k]);
        for (size_t k : lr.rec[1]) v.r_i.push_back(ctx[k]);
        for (size_t k : lr.rec[2]) v.r_f.push_back(ctx[k]);
        for (size_t k : lr.rec[3]) v.r_o.push_back(ctx[k]);
        return v;
    }

    LstmLayerVars bind_lstm(const ForwardCtx<T>& ctx, const refs::SlstmLayer& lr) const {
        LstmLayerVars v;
        v.w_i = ctx[lr.gates[0].w];
        v.w_f = ctx[lr.gates[1].w];
        v.w_o = ctx[lr.gates[2].w];
        v.w_g = ctx[lr.gates[3].w];
        v.b_i = ctx[lr.gates[0].b];
        v.b_f = ctx[lr.gates[1].b];
        v.b_o = ctx[lr.gates[2].b];
        v.b_g = ctx[lr.gates[3].b];
        v.r_i = ctx[lr.rec[0][0]];
        v.r_f = ctx[lr.rec[1][0]];
        v.r_o = ctx[lr.rec[2][0]];
        v.r_g = ctx[lr.rec[3][0]];
        return v;
    }

    ConvLstmVars bind_convlstm(const ForwardCtx<T>& ctx, const refs::ConvLstm& cr) const {
        ConvLstmVars v;
        v.wx_i = ctx[cr.wx[0]];
        v.wx_f = ctx[cr.wx[1]];
        v.wx_o = ctx[cr.wx[2]];
        v.wx_g = ctx[cr.wx[3]];
        v.wh_i = ctx[cr.wh[0]];
        v.wh_f = ctx[cr.wh[1]];
        v.wh_o = ctx[cr.wh[2]];
        v.wh_g = ctx[cr.wh[3]];
        v.b_i = ctx[cr.b[0]];
        v.b_f = ctx[cr.b[1]];
        v.b_o = ctx[cr.b[2]];
        v.b_g = ctx[cr.b[3]];
        return v;
    }

    FusionBlockVars bind_fusion(const ForwardCtx<T>& ctx, const refs::FusionBlock& fb) const {
        FusionBlockVars v;
        v.attn = AttentionVars{ctx[fb.wq], ctx[fb.wk], ctx[fb.wv], ctx[fb.wo],
                               ctx[fb.bq], ctx[fb.bk], ctx[fb.bv], ctx[fb.bo]};
        v.ln1_gamma = ctx[fb.ln1_g];
        v.ln1_beta = ctx[fb.ln1_b];
        if (fb.ff_w1 != refs::kNone) {
            v.ln2_gamma = ctx[fb.ln2_g];
            v.ln2_beta = ctx[fb.ln2_b];
            v.ff_w1 = ctx[fb.ff_w1];
            v.ff_b1 = ctx[fb.ff_b1];
            v.ff_w2 = ctx[fb.ff_w2];
            v.ff_b2 = ctx[fb.ff_b2];
        }
        return v;
    }

    std::vector<refs::Stage> stages_;
    std::vector<refs::SlstmLayer> lstm_;  // flattened-LSTM baseline layers
    refs::Head head_;
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> init_uniform(Shape shape, size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
refs::Affine add_affine(ParamStore<T>& ps, const std::string& prefix, size_t in, size_t out,
                        Rng& rng) {
    refs::Affine a;
    a.w = ps.add(prefix + ".w", init_uniform<T>({in, out}, in, rng));
    a.b = ps.add(prefix + ".b", Tensor<T>::zeros({out}));
    return a;
}

}  // namespace detail

template <typename T>
StnModel<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    StnModel<T> m;
    m.config = cfg;
    Rng rng(seed);
    const size_t p2 = cfg.patch() * cfg.patch();
    const size_t h = cfg.hidden, d = cfg.embed();
    const char* gate_names[4] = {"z", "i", "f", "o"};
    const char* lstm_gate_names[4] = {"i", "f", "o", "g"};

    auto add_slstm_layer = [&](const std::string& prefix, size_t in) {
        refs::SlstmLayer lr;
        const size_t heads = cfg.slstm_heads, dh = h / heads;
        for (int g = 0; g < 4; ++g) {
            lr.gates[g].w = m.params.add(prefix + ".w_" + gate_names[g],
                                         detail::init_uniform<T>({in, h}, in, rng));
            lr.gates[g].b = m.params.add(prefix + ".b_" + gate_names[g], Tensor<T>::zeros({h}));
            for (size_t k = 0; k < heads; ++k)
                lr.rec[g].push_back(
                    m.params.add(prefix + ".r_" + gate_names[g] + ".h" + std::to_string(k),
                                 detail::init_uniform<T>({dh, dh}, dh, rng)));
        }
        return lr;
    };

    if (cfg.variant == Variant::kLstmFlat) {
        size_t in = p2;
        for (size_t l = 0; l < cfg.slstm_layers; ++l) {
            refs::SlstmLayer lr;
            const std::string prefix = "lstm" + std::to_string(l);
            for (int g = 0; g < 4; ++g) {
                lr.gates[g].w = m.params.add(prefix + ".w_" + lstm_gate_names[g],
                                             detail::init_uniform<T>({in, h}, in, rng));
                lr.gates[g].b =
                    m.params.add(prefix + ".b_" + lstm_gate_names[g], Tensor<T>::zeros({h}));
                lr.rec[g].push_back(m.params.add(prefix + ".r_" + lstm_gate_names[g],
                                                 detail::init_uniform<T>({h, h}, h, rng)));
            }
            m.lstm_.push_back(std::move(lr));
            in = h;
        }
        m.head_.l1 = detail::add_affine(m.params, "head.l1", h, cfg.head_hidden(), rng);
        m.head_.l2 = detail::add_affine(m.params, "head.l2", cfg.head_hidden(), cfg.horizon, rng);
        return m;
    }

    const size_t temporal_width =
        uses_slstm(cfg.variant) ? h : cfg.plan.convlstm_channels;
    for (size_t s = 0; s < cfg.stn_blocks; ++s) {
        refs::Stage st;
        const std::string sp = "s" + std::to_string(s);
        if (s > 0) {
            st.temporal_in = detail::add_affine(m.params, sp + ".temporal_in", d, p2, rng);
            st.spatial_in = detail::add_affine(m.params, sp + ".spatial_in", d, p2, rng);
        }
        if (uses_slstm(cfg.variant)) {
            size_t in = p2;
            for (size_t l = 0; l < cfg.slstm_layers; ++l) {
                st.slstm.push_back(add_slstm_layer(sp + ".slstm" + std::to_string(l), in));
                in = h;
            }
        } else {
            const size_t c = cfg.plan.convlstm_channels;
            for (int g = 0; g < 4; ++g) {
                st.convlstm.wx[g] =
                    m.params.add(sp + ".clstm.wx_" + lstm_gate_names[g],
                                 detail::init_uniform<T>({c, 1, 3, 3}, 9, rng));
                st.convlstm.wh[g] =
                    m.params.add(sp + ".clstm.wh_" + lstm_gate_names[g],
                                 detail::init_uniform<T>({c, c, 3, 3}, c * 9, rng));
                st.convlstm.b[g] =
                    m.params.add(sp + ".clstm.b_" + lstm_gate_names[g], Tensor<T>::zeros({c}));
            }
        }

        const size_t widths[4] = {1, cfg.plan.c1, cfg.plan.c2, cfg.plan.c3};
        for (int cstage = 0; cstage < 3; ++cstage) {
            refs::ConvStage cs;
            const std::string cp = sp + ".conv" + std::to_string(cstage + 1);
            const size_t cin = widths[cstage], cout = widths[cstage + 1];
            cs.kernel = m.params.add(cp + ".kernel",
                                     detail::init_uniform<T>({cout, cin, 3, 3, 3}, cin * 27, rng));
            cs.bias = m.params.add(cp + ".bias", Tensor<T>::zeros({cout}));
            cs.bn_gamma = m.params.add(cp + ".bn_gamma", Tensor<T>::ones({cout}));
            cs.bn_beta = m.params.add(cp + ".bn_beta", Tensor<T>::zeros({cout}));
            cs.bn_mean = m.buffers.add(cp + ".running_mean", Tensor<T>::zeros({cout}));
            cs.bn_var = m.buffers.add(cp + ".running_var", Tensor<T>::ones({cout}));
            st.conv.push_back(cs);
        }

        if (uses_transformer_fusion(cfg.variant)) {
            st.spatial_proj = detail::add_affine(m.params, sp + ".spatial_proj", cfg.plan.c3, d, rng);
            st.temporal_proj =
                detail::add_affine(m.params, sp + ".temporal_proj", temporal_width, d, rng);
            for (size_t blk = 0; blk < cfg.fusion_blocks; ++blk) {
                refs::FusionBlock fb;
                const std::string fp = sp + ".fusion" + std::to_string(blk);
                auto aff = [&](const char* nm, size_t in, size_t out) {
                    return m.params.add(fp + "." + nm, detail::init_uniform<T>({in, out}, in, rng));
                };
                fb.wq = aff("wq", d, d);
                fb.bq = m.params.add(fp + ".bq", Tensor<T>::zeros({d}));
                fb.wk = aff("wk", d, d);
                fb.bk = m.params.add(fp + ".bk", Tensor<T>::zeros({d}));
                fb.wv = aff("wv", d, d);
                fb.bv = m.params.add(fp + ".bv", Tensor<T>::zeros({d}));
                fb.wo = aff("wo", d, d);
                fb.bo = m.params.add(fp + ".bo", Tensor<T>::zeros({d}));
                fb.ln1_g = m.params.add(fp + ".ln1_gamma", Tensor<T>::ones({d}));
                fb.ln1_b = m.params.add(fp + ".ln1_beta", Tensor<T>::zeros({d}));
                if (cfg.fusion_feedforward) {
                    fb.ff_w1 = aff("ff_w1", d, 2 * d);
                    fb.ff_b1 = m.params.add(fp + ".ff_b1", Tensor<T>::zeros({2 * d}));
                    fb.ff_w2 = aff("ff_w2", 2 * d, d);
                    fb.ff_b2 = m.params.add(fp + ".ff_b2", Tensor<T>::zeros({d}));
                    fb.ln2_g = m.params.add(fp + ".ln2_gamma", Tensor<T>::ones({d}));
                    fb.ln2_b = m.params.add(fp + ".ln2_beta", Tensor<T>::zeros({d}));
                }
                st.fusion.push_back(fb);
            }
        } else {
            st.linear_fuse = detail::add_affine(m.params, sp + ".fuse",
                                                cfg.plan.c3 + temporal_width, d, rng);
        }
        m.stages_.push_back(std::move(st));
    }

    m.head_.l1 = detail::add_affine(m.params, "head.l1", d, cfg.head_hidden(), rng);
    m.head_.l2 = detail::add_affine(m.params, "head.l2", cfg.head_hidden(), cfg.horizon, rng);
    return m;
}

// L2 training loss: mean squared error over all B*tau entries.
template <typename T>
Var loss_l2(Tape<T>& t, Var predictions, Var targets) {
    return mse(t, predictions, targets);
}

// ---------------------------------------------------------------------------
// Analytic multiply-accumulate count of one single-sample forward pass.
// Affine layers count in*out per application; convolutions count
// Cout*D'*H'*W'*Cin*kd*kh*kw; normalizations count one multiply per element;
// attention counts projections plus S*L*d for each of the score and value
// passes. Additions, activations, and softmax are not MACs.
// ---------------------------------------------------------------------------

namespace macs {

inline size_t affine(size_t rows, size_t in, size_t out) { return rows * in * out; }

inline size_t conv3d(size_t cout, size_t od, size_t oh, size_t ow, size_t cin, size_t kd,
                     size_t kh, size_t kw) {
    return cout * od * oh * ow * cin * kd * kh * kw;
}

inline size_t attention(size_t s, size_t l, size_t d) {
    return affine(s, d, d) + 2 * affine(l, d, d) + affine(s, d, d) + 2 * s * l * d;
}

}  // namespace macs

inline size_t count_macs(const ModelConfig& cfg) {
    cfg.validate();
    const size_t n = cfg.input_steps, p = cfg.patch(), p2 = p * p;
    const size_t h = cfg.hidden, d = cfg.embed();
    const size_t heads = cfg.slstm_heads;
    size_t total = 0;

    if (cfg.variant == Variant::kLstmFlat) {
        size_t in = p2;
        for (size_t l = 0; l < cfg.slstm_layers; ++l) {
            total += n * 4 * (macs::affine(1, in, h) + macs::affine(1, h, h));
            in = h;
        }
        total += macs::affine(1, h, cfg.head_hidden());
        total += macs::affine(1, cfg.head_hidden(), cfg.horizon);
        return total;
    }

    const size_t temporal_width = uses_slstm(cfg.variant) ? h : cfg.plan.convlstm_channels;
    for (size_t s = 0; s < cfg.stn_blocks; ++s) {
        if (s > 0) {
            total += macs::affine(n, d, p2);  // temporal_in
            total += macs::affine(n, d, p2);  // spatial_in
        }
        if (uses_slstm(cfg.variant)) {
            size_t in = p2;
            for (size_t l = 0; l < cfg.slstm_layers; ++l) {
                total += n * 4 * (macs::affine(1, in, h) + macs::affine(1, h, h / heads));
                in = h;
            }
        } else {
            const size_t c = cfg.plan.convlstm_channels;
            total += n * 4 * (macs::conv3d(c, 1, p, p, 1, 1, 3, 3) +
                              macs::conv3d(c, 1, p, p, c, 1, 3, 3));
        }
        const size_t widths[4] = {1, cfg.plan.c1, cfg.plan.c2, cfg.plan.c3};
        for (int cs = 0; cs < 3; ++cs) {
            total += macs::conv3d(widths[cs + 1], n, p, p, widths[cs], 3, 3, 3);
            total += widths[cs + 1] * n * p2;  // batch-norm scale
        }
        if (uses_transformer_fusion(cfg.variant)) {
            total += macs::affine(n, cfg.plan.c3, d);
            total += macs::affine(n, temporal_width, d);
            for (size_t blk = 0; blk < cfg.fusion_blocks; ++blk) {
                total += macs::attention(n, n, d);
                total += n * d;  // ln1 scale
                if (cfg.fusion_feedforward) {
                    total += macs::affine(n, d, 2 * d);
                    total += macs::affine(n, 2 * d, d);
                    total += n * d;  // ln2 scale
                }
            }
        } else {
            total += macs::affine(n, cfg.plan.c3 + temporal_width, d);
        }
    }
    total += macs::affine(1, d, cfg.head_hidden());
    total += macs::affine(1, cfg.head_hidden(), cfg.horizon);
    return total;
}

template <typename T>
size_t count_macs(const StnModel<T>& model) {
    return count_macs(model.config);
}

// ---------------------------------------------------------------------------
// Named presets mirroring the explored configurations.
// ---------------------------------------------------------------------------

struct Preset {
    const char* name;
    size_t h, b, a, l, f;
};

inline const std::vector<Preset>& presets() {
    static const std::vector<Preset> k = {
        {"table2-best", 64, 2, 4, 2, 8}, {"table2-2", 64, 2, 2, 1, 8},
        {"table2-3", 64, 1, 8, 1, 2},    {"table2-4", 64, 2, 8, 2, 2},
        {"table2-5", 64, 2, 8, 1, 8},
    };
    return k;
}

inline ModelConfig preset_config(const std::string& name) {
    for (const Preset& p : presets()) {
        if (name == p.name) {
            ModelConfig cfg;
            cfg.hidden = p.h;
            cfg.stn_blocks = p.b;
            cfg.slstm_heads = p.a;
            cfg.slstm_layers = p.l;
            cfg.fusion_heads = p.f;
            cfg.variant = Variant::kStnSlstmTf;
            cfg.radius = 5;
            cfg.input_steps = 6;
            cfg.horizon = 1;
            return cfg;
        }
    }
    throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace stn
