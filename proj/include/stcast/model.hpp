#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stcast/graph.hpp"
#include "stcast/rng.hpp"
#include "stcast/tensor.hpp"
#include "stcast/windows.hpp"

namespace stcast {

struct AblationFlags {
    bool periodic_attention = true;
    bool dynamic_attention = true;
    bool spatial_gcn = true;
    bool context_encoding = true;
};

enum class Preset { mini, base, plus, custom };

inline const char* to_string(Preset p) {
    switch (p) {
        case Preset::mini: return "mini";
        case Preset::base: return "base";
        case Preset::plus: return "plus";
        default: return "custom";
    }
}

// Architecture knobs. Parameter shapes derive from this alone — never from a
// particular dataset or its region count.
struct ModelConfig {
    int d = 160;      // hidden width, even
    int heads = 4;    // d divisible by heads
    int layers = 3;   // stacked encoder blocks

    // time geometry in steps
    int patch_len = 12;
    int stride = 12;
    int history_steps = 288;
    int future_steps = 288;

    int k = 8;                    // region-embedding width
    Real alpha = Real(0.05);      // GCN identity/propagation balance
    Real dropout_attn = Real(0.3);
    Real dropout_st = Real(0.1);

    AblationFlags ablation;
    Preset preset = Preset::custom;

    int head_dim() const { return d / heads; }
    int hist_tokens() const { return patch_count(history_steps, patch_len, stride); }
    int fut_tokens() const { return patch_count(future_steps, patch_len, stride); }
    WindowGeometry geometry() const { return {history_steps, future_steps, patch_len, stride}; }

    void validate() const {
        if (d < 2 || d % 2 != 0) throw ConfigError("hidden width d must be even and >= 2");
        if (heads < 1 || d % heads != 0) throw ConfigError("d must be divisible by the head count");
        if (layers < 1) throw ConfigError("at least one encoder layer is required");
        if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
        if (!(dropout_attn >= 0 && dropout_attn < 1) || !(dropout_st >= 0 && dropout_st < 1))
            throw ConfigError("dropout rates must lie in [0, 1)");
        if (k < 1) throw ConfigError("region-embedding width k must be >= 1");
        patch_count(history_steps, patch_len, stride);  // throws on bad geometry
        patch_count(future_steps, patch_len, stride);
        if (!ablation.periodic_attention && hist_tokens() != fut_tokens())
            throw ConfigError("disabling periodic attention requires equal history/future token counts");
    }

    // Presets sized so the canonical 5-minute geometry lands near the
    // released 2M / 5M / 26M parameter counts.
    static ModelConfig preset_config(Preset p, int sample_rate_minutes = 5) {
        ModelConfig cfg;
        cfg.preset = p;
        switch (p) {
            case Preset::mini:
                cfg.d = 160;
                cfg.heads = 4;
                cfg.layers = 3;
                break;
            case Preset::base:
                cfg.d = 320;
                cfg.heads = 8;
                cfg.layers = 5;
                break;
            case Preset::plus:
                cfg.d = 704;
                cfg.heads = 8;
                cfg.layers = 12;
                break;
            default: break;
        }
        if (60 % sample_rate_minutes != 0 || (24 * 60) % sample_rate_minutes != 0)
            throw ConfigError("sample rate must divide one hour for the default patch geometry");
        cfg.patch_len = 60 / sample_rate_minutes;        // one hour per patch
        cfg.stride = cfg.patch_len;
        cfg.history_steps = 24 * 60 / sample_rate_minutes;  // one day
        cfg.future_steps = cfg.history_steps;
        return cfg;
    }
};

struct AttentionParams {
    Tensor wq, wk, wv, wo;  // d x d each (heads concatenated column-wise)
    Tensor gain;            // RMSNorm gain, d
};

struct LayerParams {
    Tensor wa, wb, wc;  // SwiGLU projections, d x d
    Tensor gain;        // pre-FFN RMSNorm gain, d
};

// All learned weights. Shapes depend only on ModelConfig.
struct ModelParams {
    Tensor patch_weight;    // P x d
    Tensor patch_bias;      // d
    Tensor tod_table;       // 24 x d/2
    Tensor dow_table;       // 7 x d/2
    Tensor spatial_weight;  // k x d
    AttentionParams periodic;
    AttentionParams dynamic;
    Tensor gcn_weight;      // d x d
    std::vector<LayerParams> layers;
    Tensor head_weight;     // (N_f * d) x F
    Tensor head_bias;       // F

    template <class F>
    void for_each(F&& f) {
        f("patch.weight", patch_weight);
        f("patch.bias", patch_bias);
        f("context.tod", tod_table);
        f("context.dow", dow_table);
        f("context.spatial", spatial_weight);
        f("periodic.wq", periodic.wq);
        f("periodic.wk", periodic.wk);
        f("periodic.wv", periodic.wv);
        f("periodic.wo", periodic.wo);
        f("periodic.gain", periodic.gain);
        f("dynamic.wq", dynamic.wq);
        f("dynamic.wk", dynamic.wk);
        f("dynamic.wv", dynamic.wv);
        f("dynamic.wo", dynamic.wo);
        f("dynamic.gain", dynamic.gain);
        f("gcn.weight", gcn_weight);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            f(p + "wa", layers[l].wa);
            f(p + "wb", layers[l].wb);
            f(p + "wc", layers[l].wc);
            f(p + "gain", layers[l].gain);
        }
        f("head.weight", head_weight);
        f("head.bias", head_bias);
    }

    std::vector<Tensor> all() {
        std::vector<Tensor> out;
        for_each([&](const std::string&, Tensor& t) { out.push_back(t); });
        return out;
    }

    void zero_grad() {
        for_each([](const std::string&, Tensor& t) { t.zero_grad(); });
    }
};

namespace detail {

inline Tensor init_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    Real bound = Real(1) / std::sqrt(static_cast<Real>(fan_in));
    for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
    t.set_requires_grad(true);
    return t;
}

inline Tensor init_ones(int n) {
    Tensor t = Tensor::full({n}, Real(1));
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    int d = cfg.d;
    int half = d / 2;
    int flat = cfg.fut_tokens() * d;

    ModelParams p;
    p.patch_weight = detail::init_uniform({cfg.patch_len, d}, cfg.patch_len, rng);
    p.patch_bias = detail::init_uniform({d}, cfg.patch_len, rng);
    p.tod_table = detail::init_uniform({24, half}, 24, rng);
    p.dow_table = detail::init_uniform({7, half}, 7, rng);
    p.spatial_weight = detail::init_uniform({cfg.k, d}, cfg.k, rng);
    for (AttentionParams* att : {&p.periodic, &p.dynamic}) {
        att->wq = detail::init_uniform({d, d}, d, rng);
        att->wk = detail::init_uniform({d, d}, d, rng);
        att->wv = detail::init_uniform({d, d}, d, rng);
        att->wo = detail::init_uniform({d, d}, d, rng);
        att->gain = detail::init_ones(d);
    }
    p.gcn_weight = detail::init_uniform({d, d}, d, rng);
    p.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& layer : p.layers) {
        layer.wa = detail::init_uniform({d, d}, d, rng);
        layer.wb = detail::init_uniform({d, d}, d, rng);
        layer.wc = detail::init_uniform({d, d}, d, rng);
        layer.gain = detail::init_ones(d);
    }
    p.head_weight = detail::init_uniform({flat, cfg.future_steps}, flat, rng);
    p.head_bias = detail::init_uniform({cfg.future_steps}, flat, rng);
    return p;
}

struct ParamCount {
    long long total = 0;
    std::vector<std::pair<std::string, long long>> items;

    long long item(const std::string& name) const {
        for (const auto& [n, c] : items)
            if (n == name) return c;
        return 0;
    }
};

// Exact scalar-parameter count from the config alone, itemized per component.
inline ParamCount count_parameters(const ModelConfig& cfg) {
    cfg.validate();
    long long d = cfg.d;
    long long attention = 4 * d * d + d;  // q,k,v,output projections + norm gain
    ParamCount c;
    c.items = {
        {"patch_embedding", static_cast<long long>(cfg.patch_len) * d + d},
        {"temporal_context", 24 * (d / 2) + 7 * (d / 2)},
        {"spatial_context", static_cast<long long>(cfg.k) * d},
        {"periodic_attention", attention},
        {"dynamic_attention", attention},
        {"gcn", d * d},
        {"swiglu_layers", static_cast<long long>(cfg.layers) * (3 * d * d + d)},
        {"head", static_cast<long long>(cfg.fut_tokens()) * d * cfg.future_steps + cfg.future_steps},
    };
    for (const auto& [name, count] : c.items) c.total += count;
    return c;
}

// ---------------------------------------------------------------------------
// architecture blocks

// Sinusoidal position encoding table, [tokens, d].
inline Tensor positional_encoding(int tokens, int d) {
    Tensor pe = Tensor::zeros({tokens, d});
    for (int pos = 0; pos < tokens; ++pos)
        for (int i = 0; i < d / 2; ++i) {
            Real angle = pos / std::pow(Real(10000), Real(2 * i) / static_cast<Real>(d));
            pe[static_cast<std::size_t>(pos) * d + 2 * i] = std::sin(angle);
            pe[static_cast<std::size_t>(pos) * d + 2 * i + 1] = std::cos(angle);
        }
    return pe;
}

// Linear patch projection plus sinusoidal position encoding over token index.
// patches: [R, N_h, P] -> [R, N_h, d]
inline Tensor embed_patches(const Tensor& patches, const ModelParams& params, const ModelConfig& cfg) {
    if (patches.rank() != 3 || patches.dim(2) != cfg.patch_len)
        throw ShapeError("embed_patches: expected [R, N, " + std::to_string(cfg.patch_len) + "] patches, got " +
                         detail::shape_str(patches.shape()));
    int R = patches.dim(0), N = patches.dim(1);
    Tensor projected = add_bias(matmul(patches, params.patch_weight), params.patch_bias);
    Tensor pe = positional_encoding(N, cfg.d);
    // broadcast the constant PE table over regions
    Tensor pe_b = Tensor::zeros({R, N, cfg.d});
    for (int r = 0; r < R; ++r)
        std::copy(pe.data().begin(), pe.data().end(),
                  pe_b.data().begin() + static_cast<std::ptrdiff_t>(r) * N * cfg.d);
    return add(projected, pe_b);
}

// Calendar context rows: concat of time-of-day and day-of-week table rows,
// [tokens, d] with d/2 from each table.
inline Tensor encode_temporal_context(const std::vector<int>& tod, const std::vector<int>& dow,
                                      const ModelParams& params) {
    if (tod.size() != dow.size()) throw ShapeError("encode_temporal_context: tod/dow length mismatch");
    return concat_last(embedding_rows(params.tod_table, tod), embedding_rows(params.dow_table, dow));
}

// Region embeddings through a bias-free linear layer: [R, k] -> [R, d].
inline Tensor encode_spatial_context(const Tensor& phi, const ModelParams& params, const ModelConfig& cfg) {
    if (phi.rank() != 2 || phi.dim(1) != cfg.k)
        throw ShapeError("encode_spatial_context: expected [R, " + std::to_string(cfg.k) + "] embeddings, got " +
                         detail::shape_str(phi.shape()));
    return matmul(phi, params.spatial_weight);
}

// Cross-attention from future temporal context onto history tokens:
// Q from D_pre + C, K from D_his + C, V from the history embedding E.
// Heads are concatenated, projected, then RMSNorm-ed.
inline Tensor periodic_cross_attention(const Tensor& E, const Tensor& d_his, const Tensor& d_pre, const Tensor& C,
                                       const ModelParams& params, const ModelConfig& cfg, bool training, Rng* rng,
                                       std::vector<EMatrix>* attn_out = nullptr, Tensor* prenorm_out = nullptr) {
    Tensor q = matmul(context_sum(d_pre, C), params.periodic.wq);
    Tensor k = matmul(context_sum(d_his, C), params.periodic.wk);
    Tensor v = matmul(E, params.periodic.wv);
    Tensor mixed = multihead_mix(q, k, v, cfg.heads, cfg.dropout_attn, training, rng, attn_out);
    Tensor projected = matmul(mixed, params.periodic.wo);
    if (prenorm_out) *prenorm_out = projected;
    return rmsnorm(projected, params.periodic.gain);
}

// Self-attention over the periodic-encoding output (Q = K = V = M).
inline Tensor dynamic_self_attention(const Tensor& M, const ModelParams& params, const ModelConfig& cfg,
                                     bool training, Rng* rng, std::vector<EMatrix>* attn_out = nullptr,
                                     Tensor* prenorm_out = nullptr) {
    Tensor q = matmul(M, params.dynamic.wq);
    Tensor k = matmul(M, params.dynamic.wk);
    Tensor v = matmul(M, params.dynamic.wv);
    Tensor mixed = multihead_mix(q, k, v, cfg.heads, cfg.dropout_attn, training, rng, attn_out);
    Tensor projected = matmul(mixed, params.dynamic.wo);
    if (prenorm_out) *prenorm_out = projected;
    return rmsnorm(projected, params.dynamic.gain);
}

// G_t = dropout[alpha * H_t + (1-alpha) * A_norm H_t W_g], per token.
inline Tensor gcn_propagate(const Tensor& H, const Tensor& a_norm, const ModelParams& params,
                            const ModelConfig& cfg, bool training, Rng* rng) {
    Tensor mixed = matmul(adjacency_mix(H, a_norm), params.gcn_weight);
    Tensor balanced = add(scale(H, cfg.alpha), scale(mixed, Real(1) - cfg.alpha));
    if (!training || cfg.dropout_st == Real(0)) return balanced;
    if (rng == nullptr) throw ConfigError("gcn_propagate: training-mode dropout needs an rng");
    return dropout(balanced, cfg.dropout_st, training, *rng);
}

// O = SwiGLU[RMSNorm(G + O_prev)] + G with SwiGLU(x) = Wc[swish(Wa x) * Wb x].
inline Tensor swiglu_block(const Tensor& G, const Tensor& O_prev, const LayerParams& layer) {
    Tensor x = rmsnorm(add(G, O_prev), layer.gain);
    Tensor gated = mul(swish(matmul(x, layer.wa)), matmul(x, layer.wb));
    return add(matmul(gated, layer.wc), G);
}

// Per-dataset inputs the model consumes besides the window itself.
struct ForwardContext {
    Tensor phi;     // [R, k] region embeddings
    Tensor a_norm;  // [R, R] normalized adjacency
};

inline ForwardContext make_forward_context(const TrafficDataset& ds, int k) {
    RegionEmbeddings emb = region_embeddings(ds.graph, k);
    ForwardContext ctx;
    ctx.phi = Tensor::from({emb.num_regions, k}, emb.phi);
    ctx.a_norm = Tensor::from({ds.num_regions, ds.num_regions}, normalize_adjacency(ds.graph));
    return ctx;
}

// Full pipeline up to the flattened per-region features, [R, N_f * d].
// Ablation flags replace their block with the identity; disabled context
// encodings are zeroed.
inline Tensor forward_features(const PatchedWindow& w, const ForwardContext& ctx, const ModelParams& params,
                               const ModelConfig& cfg, bool training, Rng* rng) {
    int R = w.num_regions;
    int Nh = cfg.hist_tokens(), Nf = cfg.fut_tokens();
    if (w.geom.H != cfg.history_steps || w.geom.F != cfg.future_steps || w.geom.P != cfg.patch_len ||
        w.geom.S != cfg.stride)
        throw ConfigError("forward: window geometry (H=" + std::to_string(w.geom.H) + ",F=" +
                          std::to_string(w.geom.F) + ",P=" + std::to_string(w.geom.P) + ",S=" +
                          std::to_string(w.geom.S) + ") does not match the model config");
    if (ctx.phi.dim(0) != R || ctx.a_norm.dim(0) != R)
        throw ShapeError("forward: context covers " + std::to_string(ctx.phi.dim(0)) + " regions, window has " +
                         std::to_string(R));

    Tensor patches = Tensor::from({R, Nh, cfg.patch_len}, w.hist_patches);
    Tensor E = embed_patches(patches, params, cfg);

    Tensor d_his, d_pre, C;
    if (cfg.ablation.context_encoding) {
        d_his = encode_temporal_context(w.tod_hist, w.dow_hist, params);
        d_pre = encode_temporal_context(w.tod_fut, w.dow_fut, params);
        C = encode_spatial_context(ctx.phi, params, cfg);
    } else {
        d_his = Tensor::zeros({Nh, cfg.d});
        d_pre = Tensor::zeros({Nf, cfg.d});
        C = Tensor::zeros({R, cfg.d});
    }

    Tensor O;
    if (cfg.ablation.periodic_attention) {
        O = periodic_cross_attention(E, d_his, d_pre, C, params, cfg, training, rng);
    } else {
        if (Nh != Nf) throw ConfigError("forward: identity periodic path needs equal token counts");
        O = E;
    }

    for (int l = 0; l < cfg.layers; ++l) {
        Tensor H = cfg.ablation.dynamic_attention ? dynamic_self_attention(O, params, cfg, training, rng) : O;
        Tensor G = cfg.ablation.spatial_gcn ? gcn_propagate(H, ctx.a_norm, params, cfg, training, rng) : H;
        O = swiglu_block(G, O, params.layers[static_cast<std::size_t>(l)]);
    }

    return reshape(O, {R, Nf * cfg.d});
}

// Normalized-space predictions, [R, F]. Denormalize with the window stats to
// recover raw units.
inline Tensor forward(const PatchedWindow& w, const ForwardContext& ctx, const ModelParams& params,
                      const ModelConfig& cfg, bool training, Rng* rng) {
    Tensor features = forward_features(w, ctx, params, cfg, training, rng);
    return add_bias(matmul(features, params.head_weight), params.head_bias);
}

}  // namespace stcast
