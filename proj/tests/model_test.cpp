#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stcast/grad_check.hpp"
#include "stcast/model.hpp"
#include "stcast/synthetic.hpp"

using namespace stcast;

namespace {

// small geometry for fast block tests: 4 history/future tokens of length 2
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.patch_len = 2;
    cfg.stride = 2;
    cfg.history_steps = 8;
    cfg.future_steps = 8;
    cfg.k = 3;
    cfg.dropout_attn = 0.0;
    cfg.dropout_st = 0.0;
    return cfg;
}

TrafficDataset tiny_city(int regions, std::uint64_t seed, Real base = 100) {
    SyntheticCitySpec spec;
    spec.name = "tiny";
    spec.regions = regions;
    spec.days = 2;
    spec.sample_rate_minutes = 30;
    spec.base_volume = base;
    spec.seed = seed;
    return generate_synthetic_city(spec);
}

struct Fixture {
    TrafficDataset ds;
    ForwardContext ctx;
    PatchedWindow window;
};

Fixture make_fixture(int regions, std::uint64_t seed, const ModelConfig& cfg) {
    Fixture fx{tiny_city(regions, seed), {}, {}};
    fx.ctx = make_forward_context(fx.ds, cfg.k);
    fx.window = make_window(fx.ds, cfg.history_steps + 3, cfg.geometry());
    return fx;
}

Tensor identity_matrix(int n) {
    Tensor t = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i) * n + i] = 1.0;
    return t;
}

}  // namespace

TEST(InitParams, DeterministicFromSeed) {
    ModelConfig cfg = tiny_config();
    ModelParams a = init_params(cfg, 7);
    ModelParams b = init_params(cfg, 7);
    a.for_each([&](const std::string& name, Tensor& t) {
        b.for_each([&](const std::string& name2, Tensor& t2) {
            if (name == name2) {
                EXPECT_EQ(t.data(), t2.data()) << name;
            }
        });
    });
}

TEST(InitParams, GainsStartAtExactlyOne) {
    ModelParams p = init_params(tiny_config(), 3);
    for (const Tensor* g : {&p.periodic.gain, &p.dynamic.gain, &p.layers[0].gain, &p.layers[1].gain})
        for (std::size_t i = 0; i < g->numel(); ++i) EXPECT_EQ((*g)[i], 1.0);
}

TEST(InitParams, EntriesRespectFanInBound) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 11);
    auto check_bound = [](const Tensor& t, int fan_in) {
        Real bound = Real(1) / std::sqrt(static_cast<Real>(fan_in));
        for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_LE(std::abs(t[i]), bound);
    };
    check_bound(p.patch_weight, cfg.patch_len);
    check_bound(p.tod_table, 24);
    check_bound(p.dow_table, 7);
    check_bound(p.spatial_weight, cfg.k);
    check_bound(p.periodic.wq, cfg.d);
    check_bound(p.gcn_weight, cfg.d);
    check_bound(p.head_weight, cfg.fut_tokens() * cfg.d);
}

TEST(CountParameters, LinearLayerClosedForm) {
    ModelConfig cfg = tiny_config();
    ParamCount c = count_parameters(cfg);
    EXPECT_EQ(c.item("patch_embedding"), static_cast<long long>(cfg.patch_len) * cfg.d + cfg.d);
    EXPECT_EQ(c.item("head"),
              static_cast<long long>(cfg.fut_tokens()) * cfg.d * cfg.future_steps + cfg.future_steps);
}

TEST(CountParameters, MatchesAllocatedTensors) {
    for (Preset preset : {Preset::mini, Preset::base}) {
        ModelConfig cfg = ModelConfig::preset_config(preset, 30);
        ParamCount counted = count_parameters(cfg);
        ModelParams p = init_params(cfg, 1);
        long long allocated = 0;
        p.for_each([&](const std::string&, Tensor& t) { allocated += static_cast<long long>(t.numel()); });
        EXPECT_EQ(counted.total, allocated) << to_string(preset);
    }
}

TEST(CountParameters, PresetsLandNearReleasedSizes) {
    // released sizes: mini 2M, base 5M, plus 26M at the 5-minute geometry
    const double targets[] = {2e6, 5e6, 26e6};
    const Preset presets[] = {Preset::mini, Preset::base, Preset::plus};
    for (int i = 0; i < 3; ++i) {
        ModelConfig cfg = ModelConfig::preset_config(presets[i], 5);
        double total = static_cast<double>(count_parameters(cfg).total);
        EXPECT_GE(total, 0.7 * targets[i]) << to_string(presets[i]);
        EXPECT_LE(total, 1.3 * targets[i]) << to_string(presets[i]);
    }
}

TEST(CountParameters, AttentionScalesQuadraticallyInWidth) {
    ModelConfig cfg = tiny_config();
    ModelConfig wide = cfg;
    wide.d = cfg.d * 2;
    ParamCount narrow = count_parameters(cfg);
    ParamCount doubled = count_parameters(wide);
    EXPECT_EQ(doubled.item("periodic_attention") - wide.d, 4 * (narrow.item("periodic_attention") - cfg.d));
    EXPECT_EQ(doubled.item("dynamic_attention") - wide.d, 4 * (narrow.item("dynamic_attention") - cfg.d));
}

TEST(PositionalEncoding, FirstTokenIsZeroOne) {
    Tensor pe = positional_encoding(4, 6);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(pe[static_cast<std::size_t>(2 * i)], 0.0);
        EXPECT_EQ(pe[static_cast<std::size_t>(2 * i + 1)], 1.0);
    }
}

TEST(EmbedPatches, OutputShape) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 5);
    for (int R : {1, 3, 9}) {
        Tensor patches = Tensor::zeros({R, cfg.hist_tokens(), cfg.patch_len});
        Tensor e = embed_patches(patches, p, cfg);
        EXPECT_EQ(e.shape(), (std::vector<int>{R, cfg.hist_tokens(), cfg.d}));
    }
}

TEST(EmbedPatches, ZeroInputZeroBiasGivesPureTable) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 5);
    std::fill(p.patch_bias.data().begin(), p.patch_bias.data().end(), 0.0);
    int R = 2, N = cfg.hist_tokens();
    Tensor e = embed_patches(Tensor::zeros({R, N, cfg.patch_len}), p, cfg);
    Tensor pe = positional_encoding(N, cfg.d);
    for (int r = 0; r < R; ++r)
        for (std::size_t i = 0; i < pe.numel(); ++i)
            EXPECT_EQ(e[static_cast<std::size_t>(r) * pe.numel() + i], pe[i]);
}

TEST(TemporalContextEncoder, IdenticalIndicesGiveIdenticalRows) {
    ModelParams p = init_params(tiny_config(), 9);
    Tensor d = encode_temporal_context({5, 5, 13}, {2, 2, 2}, p);
    ASSERT_EQ(d.shape(), (std::vector<int>{3, 8}));
    for (int c = 0; c < 8; ++c) EXPECT_EQ(d[static_cast<std::size_t>(c)], d[static_cast<std::size_t>(8 + c)]);
}

TEST(TemporalContextEncoder, DowChangesOnlySecondHalf) {
    ModelParams p = init_params(tiny_config(), 9);
    Tensor a = encode_temporal_context({5}, {2}, p);
    Tensor b = encode_temporal_context({5}, {3}, p);
    for (int c = 0; c < 4; ++c) EXPECT_EQ(a[static_cast<std::size_t>(c)], b[static_cast<std::size_t>(c)]);
    bool any_diff = false;
    for (int c = 4; c < 8; ++c) any_diff |= a[static_cast<std::size_t>(c)] != b[static_cast<std::size_t>(c)];
    EXPECT_TRUE(any_diff);
}

TEST(TemporalContextEncoder, OutOfRangeIndexThrows) {
    ModelParams p = init_params(tiny_config(), 9);
    EXPECT_THROW(encode_temporal_context({24}, {0}, p), std::out_of_range);
    EXPECT_THROW(encode_temporal_context({0}, {7}, p), std::out_of_range);
}

TEST(SpatialContextEncoder, NoBiasMeansZeroMapsToZero) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 13);
    Tensor c = encode_spatial_context(Tensor::zeros({4, cfg.k}), p, cfg);
    EXPECT_EQ(c.shape(), (std::vector<int>{4, cfg.d}));
    for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_EQ(c[i], 0.0);
}

TEST(SpatialContextEncoder, IdenticalRowsMapIdentically) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 13);
    Tensor phi = Tensor::from({2, 3}, {0.5, -1.0, 2.0, 0.5, -1.0, 2.0});
    Tensor c = encode_spatial_context(phi, p, cfg);
    for (int j = 0; j < cfg.d; ++j)
        EXPECT_EQ(c[static_cast<std::size_t>(j)], c[static_cast<std::size_t>(cfg.d + j)]);
}

namespace {

// identity-weight attention params over width d
AttentionParams identity_attention(int d) {
    AttentionParams a;
    a.wq = identity_matrix(d);
    a.wk = identity_matrix(d);
    a.wv = identity_matrix(d);
    a.wo = identity_matrix(d);
    a.gain = Tensor::full({d}, 1.0);
    return a;
}

}  // namespace

TEST(PeriodicAttention, SingleKeyPassesValueThrough) {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.heads = 1;
    cfg.dropout_attn = 0;
    ModelParams p;
    p.periodic = identity_attention(4);
    int R = 2;
    Rng rng(1);
    Tensor E = Tensor::zeros({R, 1, 4});
    for (auto& v : E.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    Tensor d_his = Tensor::zeros({1, 4});
    Tensor d_pre = Tensor::zeros({3, 4});
    Tensor C = Tensor::zeros({R, 4});
    Tensor prenorm;
    periodic_cross_attention(E, d_his, d_pre, C, p, cfg, false, nullptr, nullptr, &prenorm);
    // one key -> attention weight 1 -> every future token equals V = E
    for (int r = 0; r < R; ++r)
        for (int t = 0; t < 3; ++t)
            for (int c = 0; c < 4; ++c)
                EXPECT_NEAR(prenorm[(static_cast<std::size_t>(r) * 3 + t) * 4 + c],
                            E[static_cast<std::size_t>(r) * 4 + c], 1e-12);
}

TEST(PeriodicAttention, IdenticalKeysAverageValues) {
    ModelConfig cfg;
    cfg.d = 2;
    cfg.heads = 1;
    cfg.dropout_attn = 0;
    ModelParams p;
    p.periodic = identity_attention(2);
    Tensor E = Tensor::from({1, 2, 2}, {1.0, 2.0, 5.0, 6.0});
    Tensor d_his = Tensor::from({2, 2}, {0.3, 0.7, 0.3, 0.7});  // identical keys
    Tensor d_pre = Tensor::from({1, 2}, {0.1, 0.9});
    Tensor C = Tensor::zeros({1, 2});
    Tensor prenorm;
    periodic_cross_attention(E, d_his, d_pre, C, p, cfg, false, nullptr, nullptr, &prenorm);
    EXPECT_NEAR(prenorm[0], 3.0, 1e-12);
    EXPECT_NEAR(prenorm[1], 4.0, 1e-12);
}

TEST(PeriodicAttention, HandSoftmaxMixture) {
    // 1 region, 2 history tokens, 1 future token, d = d_h = 1, identity
    // weights: logits (0, ln 3) -> weights (0.25, 0.75), V = (4, 8) -> 7
    ModelConfig cfg;
    cfg.d = 1;
    cfg.heads = 1;
    cfg.dropout_attn = 0;
    ModelParams p;
    p.periodic = identity_attention(1);
    Tensor E = Tensor::from({1, 2, 1}, {4.0, 8.0});
    Tensor d_his = Tensor::from({2, 1}, {0.0, std::log(3.0)});
    Tensor d_pre = Tensor::from({1, 1}, {1.0});
    Tensor C = Tensor::zeros({1, 1});
    Tensor prenorm;
    std::vector<EMatrix> attn;
    periodic_cross_attention(E, d_his, d_pre, C, p, cfg, false, nullptr, &attn, &prenorm);
    EXPECT_NEAR(prenorm[0], 7.0, 1e-12);
    ASSERT_EQ(attn.size(), 1u);
    EXPECT_NEAR(attn[0](0, 0), 0.25, 1e-12);
    EXPECT_NEAR(attn[0](0, 1), 0.75, 1e-12);
}

TEST(DynamicAttention, SingleTokenIsIdentityUnderIdentityWeights) {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.heads = 2;
    cfg.dropout_attn = 0;
    ModelParams p;
    p.dynamic = identity_attention(4);
    Tensor M = Tensor::from({1, 1, 4}, {1.0, -2.0, 0.5, 3.0});
    Tensor prenorm;
    dynamic_self_attention(M, p, cfg, false, nullptr, nullptr, &prenorm);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(prenorm[i], M[i], 1e-12);
}

TEST(DynamicAttention, IdenticalTokensGiveIdenticalOutputs) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 21);
    Tensor M = Tensor::zeros({2, 3, cfg.d});
    Rng rng(4);
    for (int r = 0; r < 2; ++r) {
        std::vector<Real> row(static_cast<std::size_t>(cfg.d));
        for (auto& v : row) v = static_cast<Real>(rng.uniform(-1, 1));
        for (int t = 0; t < 3; ++t)
            std::copy(row.begin(), row.end(),
                      M.data().begin() + (static_cast<std::ptrdiff_t>(r) * 3 + t) * cfg.d);
    }
    Tensor out = dynamic_self_attention(M, p, cfg, false, nullptr);
    for (int r = 0; r < 2; ++r)
        for (int t = 1; t < 3; ++t)
            for (int c = 0; c < cfg.d; ++c)
                EXPECT_NEAR(out[(static_cast<std::size_t>(r) * 3 + t) * cfg.d + c],
                            out[static_cast<std::size_t>(r) * 3 * cfg.d + c], 1e-12);
}

TEST(DynamicAttention, RowsSumToOneInEvalMode) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 23);
    Rng rng(5);
    Tensor M = Tensor::zeros({3, 4, cfg.d});
    for (auto& v : M.data()) v = static_cast<Real>(rng.uniform(-2, 2));
    std::vector<EMatrix> attn;
    dynamic_self_attention(M, p, cfg, false, nullptr, &attn);
    ASSERT_EQ(attn.size(), static_cast<std::size_t>(3 * cfg.heads));
    for (const EMatrix& a : attn)
        for (int r = 0; r < a.rows(); ++r) {
            double total = 0;
            for (int c = 0; c < a.cols(); ++c) total += a(r, c);
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
}

TEST(GcnPropagate, AlphaOneIsExactIdentity) {
    ModelConfig cfg = tiny_config();
    cfg.alpha = 1.0;
    ModelParams p = init_params(cfg, 31);
    Rng rng(6);
    Tensor H = Tensor::zeros({3, 2, cfg.d});
    for (auto& v : H.data()) v = static_cast<Real>(rng.uniform(-2, 2));
    Tensor a_norm = Tensor::from({3, 3}, {0, 0.5, 0.5, 0.5, 0, 0.5, 0.5, 0.5, 0});
    Tensor G = gcn_propagate(H, a_norm, p, cfg, false, nullptr);
    EXPECT_EQ(G.data(), H.data());
}

TEST(GcnPropagate, DefaultAlphaFromAppendix) {
    ModelConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.alpha, 0.05);
}

TEST(GcnPropagate, NeighborSwapOracle) {
    ModelConfig cfg;
    cfg.d = 1;
    cfg.heads = 1;
    cfg.alpha = 0;
    cfg.dropout_st = 0;
    ModelParams p;
    p.gcn_weight = identity_matrix(1);
    Tensor H = Tensor::from({2, 1, 1}, {1.0, 3.0});
    Tensor a_norm = Tensor::from({2, 2}, {0, 1, 1, 0});
    Tensor G = gcn_propagate(H, a_norm, p, cfg, false, nullptr);
    EXPECT_DOUBLE_EQ(G[0], 3.0);
    EXPECT_DOUBLE_EQ(G[1], 1.0);
}

TEST(SwigluBlock, ZeroInputsStayZero) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 41);
    Tensor G = Tensor::zeros({2, 3, cfg.d});
    Tensor O = swiglu_block(G, Tensor::zeros({2, 3, cfg.d}), p.layers[0]);
    for (std::size_t i = 0; i < O.numel(); ++i) EXPECT_EQ(O[i], 0.0);
}

TEST(SwigluBlock, ScalarClosedForm) {
    // swish(1) * 1 = sigmoid(1) = 0.731059; the block adds the residual G
    LayerParams lp;
    lp.wa = identity_matrix(1);
    lp.wb = identity_matrix(1);
    lp.wc = identity_matrix(1);
    lp.gain = Tensor::full({1}, 1.0);
    Tensor G = Tensor::from({1, 1, 1}, {1.0});
    Tensor O = swiglu_block(G, Tensor::zeros({1, 1, 1}), lp);
    EXPECT_NEAR(O[0] - 1.0, 0.731059, 1e-6);
}

TEST(RmsNorm, ClosedFormPair) {
    Tensor x = Tensor::from({1, 2}, {3.0, 4.0});
    Tensor y = rmsnorm(x, Tensor::full({2}, 1.0));
    EXPECT_NEAR(y[0], 0.848528, 1e-6);
    EXPECT_NEAR(y[1], 1.131371, 1e-6);
}

TEST(Forward, ShapeAndEvalDeterminism) {
    ModelConfig cfg = tiny_config();
    Fixture fx = make_fixture(5, 2, cfg);
    ModelParams p = init_params(cfg, 51);
    NoGradGuard ng;
    Tensor a = forward(fx.window, fx.ctx, p, cfg, false, nullptr);
    Tensor b = forward(fx.window, fx.ctx, p, cfg, false, nullptr);
    EXPECT_EQ(a.shape(), (std::vector<int>{5, cfg.future_steps}));
    EXPECT_EQ(a.data(), b.data());
}

TEST(Forward, ParamsIndependentOfRegionCount) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 52);
    NoGradGuard ng;
    for (int R : {5, 50}) {
        Fixture fx = make_fixture(R, 100 + static_cast<std::uint64_t>(R), cfg);
        Tensor out = forward(fx.window, fx.ctx, p, cfg, false, nullptr);
        EXPECT_EQ(out.shape(), (std::vector<int>{R, cfg.future_steps}));
    }
}

TEST(Forward, GeometryMismatchIsConfigError) {
    ModelConfig cfg = tiny_config();
    Fixture fx = make_fixture(4, 3, cfg);
    ModelParams p = init_params(cfg, 53);
    ModelConfig other = cfg;
    other.history_steps = 16;
    EXPECT_THROW(forward(fx.window, fx.ctx, p, other, false, nullptr), ConfigError);
}

TEST(Forward, ScaleEquivariancePerRegion) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 54);
    TrafficDataset ds = tiny_city(4, 7);
    TrafficDataset scaled = ds;
    const Real c = 10.0;
    for (int t = 0; t < ds.num_steps; ++t) scaled.at(2, t) *= c;

    ForwardContext ctx = make_forward_context(ds, cfg.k);
    NoGradGuard ng;
    PatchedWindow w1 = make_window(ds, cfg.history_steps + 1, cfg.geometry());
    PatchedWindow w2 = make_window(scaled, cfg.history_steps + 1, cfg.geometry());
    ASSERT_GE(w1.stats.sigma[2], 10 * kEpsSigma);

    std::vector<Real> p1 = denormalize(forward(w1, ctx, p, cfg, false, nullptr).data(), 4, cfg.future_steps, w1.stats);
    std::vector<Real> p2 = denormalize(forward(w2, ctx, p, cfg, false, nullptr).data(), 4, cfg.future_steps, w2.stats);
    for (int t = 0; t < cfg.future_steps; ++t) {
        double a = c * p1[static_cast<std::size_t>(2) * cfg.future_steps + t];
        double b = p2[static_cast<std::size_t>(2) * cfg.future_steps + t];
        EXPECT_NEAR(a, b, 1e-6 * std::max(1.0, std::abs(a)));
    }
    // untouched regions unchanged
    for (int t = 0; t < cfg.future_steps; ++t)
        EXPECT_NEAR(p1[static_cast<std::size_t>(t)], p2[static_cast<std::size_t>(t)],
                    1e-9 * std::max(1.0, std::abs(p1[static_cast<std::size_t>(t)])));
}

TEST(Forward, RegionPermutationEquivariance) {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 55);
    TrafficDataset ds = tiny_city(6, 9);

    // distinct eigenvalues make the embedding unique up to the sign fix
    RegionEmbeddings emb = region_embeddings(ds.graph, cfg.k);
    for (int j = 1; j < cfg.k; ++j)
        ASSERT_GT(emb.eigenvalues[static_cast<std::size_t>(j)] - emb.eigenvalues[static_cast<std::size_t>(j - 1)],
                  1e-6);

    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    TrafficDataset pds = ds;
    for (int r = 0; r < 6; ++r)
        for (int t = 0; t < ds.num_steps; ++t) pds.at(perm[static_cast<std::size_t>(r)], t) = ds.at(r, t);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            pds.graph.adjacency[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * 6 +
                                perm[static_cast<std::size_t>(j)]] = ds.graph.at(i, j);

    NoGradGuard ng;
    ForwardContext ctx = make_forward_context(ds, cfg.k);
    ForwardContext pctx = make_forward_context(pds, cfg.k);
    PatchedWindow w = make_window(ds, cfg.history_steps + 2, cfg.geometry());
    PatchedWindow pw = make_window(pds, cfg.history_steps + 2, cfg.geometry());
    Tensor out = forward(w, ctx, params, cfg, false, nullptr);
    Tensor pout = forward(pw, pctx, params, cfg, false, nullptr);
    for (int r = 0; r < 6; ++r)
        for (int t = 0; t < cfg.future_steps; ++t)
            EXPECT_NEAR(pout[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)]) * cfg.future_steps + t],
                        out[static_cast<std::size_t>(r) * cfg.future_steps + t], 1e-8);
}

TEST(Forward, EveryParameterReceivesGradient) {
    ModelConfig cfg = tiny_config();
    Fixture fx = make_fixture(5, 12, cfg);
    ModelParams p = init_params(cfg, 56);
    Tensor target = Tensor::zeros({5, cfg.future_steps});
    Rng rng(3);
    for (auto& v : target.data()) v = static_cast<Real>(rng.uniform(-1, 1));

    p.zero_grad();
    Tensor loss = mae(forward(fx.window, fx.ctx, p, cfg, false, nullptr), target);
    loss.backward();
    p.for_each([](const std::string& name, Tensor& t) {
        bool any = false;
        for (Real g : t.grad()) any |= g != 0.0;
        EXPECT_TRUE(any) << "dead parameter: " << name;
    });
}

TEST(Forward, AblationTogglesRestoreBitIdenticalOutputs) {
    ModelConfig cfg = tiny_config();
    Fixture fx = make_fixture(4, 13, cfg);
    ModelParams p = init_params(cfg, 57);
    NoGradGuard ng;
    Tensor base = forward(fx.window, fx.ctx, p, cfg, false, nullptr);

    bool AblationFlags::*flags[] = {&AblationFlags::periodic_attention, &AblationFlags::dynamic_attention,
                                    &AblationFlags::spatial_gcn, &AblationFlags::context_encoding};
    for (auto flag : flags) {
        ModelConfig ablated = cfg;
        ablated.ablation.*flag = false;
        Tensor off = forward(fx.window, fx.ctx, p, ablated, false, nullptr);
        EXPECT_NE(off.data(), base.data());  // the block does something
        ablated.ablation.*flag = true;
        Tensor restored = forward(fx.window, fx.ctx, p, ablated, false, nullptr);
        EXPECT_EQ(restored.data(), base.data());
    }
}

TEST(Forward, AllFlagsOffStillPredicts) {
    ModelConfig cfg = tiny_config();
    cfg.ablation = {false, false, false, false};
    Fixture fx = make_fixture(4, 14, cfg);
    ModelParams p = init_params(cfg, 58);
    NoGradGuard ng;
    Tensor out = forward(fx.window, fx.ctx, p, cfg, false, nullptr);
    EXPECT_EQ(out.shape(), (std::vector<int>{4, cfg.future_steps}));
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_TRUE(std::isfinite(out[i]));
}

// ---------------------------------------------------------------------------
// finite-difference oracles per architecture block

TEST(BlockGradients, EmbedPatches) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 61);
    Rng rng(7);
    Tensor patches = Tensor::zeros({2, cfg.hist_tokens(), cfg.patch_len});
    for (auto& v : patches.data()) v = static_cast<Real>(rng.uniform(-2, 2));
    Tensor probe = Tensor::zeros({2, cfg.hist_tokens(), cfg.d});
    for (auto& v : probe.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    auto f = [&]() { return sum(mul(embed_patches(patches, p, cfg), probe)); };
    GradCheckReport r = grad_check(f, {p.patch_weight, p.patch_bias}, 1e-5, 1e-4, 20, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(BlockGradients, ContextEncoders) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 62);
    Rng rng(8);
    Tensor phi = Tensor::zeros({3, cfg.k});
    for (auto& v : phi.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    Tensor probe_t = Tensor::zeros({4, cfg.d});
    for (auto& v : probe_t.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    Tensor probe_s = Tensor::zeros({3, cfg.d});
    for (auto& v : probe_s.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    auto f = [&]() {
        Tensor t = encode_temporal_context({0, 5, 5, 23}, {0, 3, 3, 6}, p);
        Tensor s = encode_spatial_context(phi, p, cfg);
        return add(sum(mul(t, probe_t)), sum(mul(s, probe_s)));
    };
    GradCheckReport r = grad_check(f, {p.tod_table, p.dow_table, p.spatial_weight}, 1e-5, 1e-4, 20, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(BlockGradients, PeriodicAttention) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 63);
    Rng rng(9);
    int R = 3, Nh = cfg.hist_tokens(), Nf = cfg.fut_tokens();
    Tensor E = Tensor::zeros({R, Nh, cfg.d});
    Tensor dh = Tensor::zeros({Nh, cfg.d});
    Tensor dp = Tensor::zeros({Nf, cfg.d});
    Tensor C = Tensor::zeros({R, cfg.d});
    Tensor probe = Tensor::zeros({R, Nf, cfg.d});
    for (Tensor* t : {&E, &dh, &dp, &C, &probe})
        for (auto& v : t->data()) v = static_cast<Real>(rng.uniform(-1, 1));
    auto f = [&]() {
        return sum(mul(periodic_cross_attention(E, dh, dp, C, p, cfg, false, nullptr), probe));
    };
    GradCheckReport r = grad_check(
        f, {p.periodic.wq, p.periodic.wk, p.periodic.wv, p.periodic.wo, p.periodic.gain}, 1e-5, 1e-4, 20, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(BlockGradients, DynamicAttention) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 64);
    Rng rng(10);
    Tensor M = Tensor::zeros({3, cfg.fut_tokens(), cfg.d});
    Tensor probe = Tensor::zeros({3, cfg.fut_tokens(), cfg.d});
    for (Tensor* t : {&M, &probe})
        for (auto& v : t->data()) v = static_cast<Real>(rng.uniform(-1, 1));
    auto f = [&]() { return sum(mul(dynamic_self_attention(M, p, cfg, false, nullptr), probe)); };
    GradCheckReport r = grad_check(
        f, {p.dynamic.wq, p.dynamic.wk, p.dynamic.wv, p.dynamic.wo, p.dynamic.gain}, 1e-5, 1e-4, 20, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(BlockGradients, GcnAndSwiglu) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 65);
    Rng rng(11);
    Tensor H = Tensor::zeros({3, 2, cfg.d});
    Tensor O_prev = Tensor::zeros({3, 2, cfg.d});
    Tensor probe = Tensor::zeros({3, 2, cfg.d});
    for (Tensor* t : {&H, &O_prev, &probe})
        for (auto& v : t->data()) v = static_cast<Real>(rng.uniform(-1, 1));
    Tensor a_norm = Tensor::from({3, 3}, {0, 0.5, 0.5, 0.5, 0, 0.5, 0.5, 0.5, 0});
    auto f = [&]() {
        Tensor G = gcn_propagate(H, a_norm, p, cfg, false, nullptr);
        return sum(mul(swiglu_block(G, O_prev, p.layers[0]), probe));
    };
    GradCheckReport r = grad_check(
        f, {p.gcn_weight, p.layers[0].wa, p.layers[0].wb, p.layers[0].wc, p.layers[0].gain}, 1e-5, 1e-4, 20, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(BlockGradients, EndToEndMaeLoss) {
    // full model MAE loss over a random 3-region toy input; 3 regions leave
    // only 2 non-trivial Laplacian modes
    ModelConfig cfg = tiny_config();
    cfg.k = 2;
    Fixture fx = make_fixture(3, 15, cfg);
    ModelParams p = init_params(cfg, 66);
    Rng rng(12);
    Tensor target = Tensor::zeros({3, cfg.future_steps});
    for (auto& v : target.data()) v = static_cast<Real>(rng.uniform(-1, 1));
    auto f = [&]() { return mae(forward(fx.window, fx.ctx, p, cfg, false, nullptr), target); };
    GradCheckReport r = grad_check(f, {p.patch_weight, p.periodic.wq, p.gcn_weight, p.layers[1].wc, p.head_weight},
                                   1e-5, 1e-4, 5, &rng);
    EXPECT_TRUE(r.passed) << r.worst;
    EXPECT_GE(r.coords_checked, 20);
}
