#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stcast/dataset.hpp"
#include "stcast/model.hpp"
#include "stcast/rng.hpp"
#include "stcast/tensor.hpp"
#include "stcast/windows.hpp"

namespace stcast {

struct TrainConfig {
    Real lr = Real(1e-3);
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real adam_eps = Real(1e-8);
    int batch_size = 8;
    int max_epochs = 100;
    int early_stop_patience = 15;
    std::uint64_t seed = 0;
    Real grad_clip = 0;  // global L2 norm bound; <= 0 disables clipping
    int max_steps_per_epoch = 0;  // caps the per-epoch step count; 0 = full coverage
    SplitSpec split{0.7, 0.1};

    void validate() const {
        if (!(lr > 0)) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (early_stop_patience < 1) throw ConfigError("early-stop patience must be >= 1");
        split.validate();
    }
};

// Alias for the fused tensor op; kept as the module-level loss entry point.
inline Tensor mae_loss(const Tensor& pred, const Tensor& target) { return mae(pred, target); }

// First/second moments aligned with ModelParams::for_each order.
struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<Real>> m, v;

    static AdamState like(ModelParams& params) {
        AdamState st;
        params.for_each([&](const std::string&, Tensor& t) {
            st.m.emplace_back(t.numel(), Real(0));
            st.v.emplace_back(t.numel(), Real(0));
        });
        return st;
    }
};

// Bias-corrected Adam update from the gradients currently accumulated in the
// parameter tensors. Gradients are clipped by global norm first when
// grad_clip is set.
inline void adam_step(ModelParams& params, AdamState& st, const TrainConfig& tc) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    params.for_each([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, t); });
    if (st.m.size() != tensors.size()) throw TrainError("optimizer state does not match the parameter list");

    Real clip_scale = Real(1);
    if (tc.grad_clip > 0) {
        double norm_sq = 0;
        for (auto& [name, t] : tensors)
            for (Real g : t.grad()) norm_sq += static_cast<double>(g) * g;
        double norm = std::sqrt(norm_sq);
        if (norm > tc.grad_clip) clip_scale = static_cast<Real>(tc.grad_clip / norm);
    }

    ++st.step;
    Real bc1 = Real(1) - std::pow(tc.beta1, static_cast<Real>(st.step));
    Real bc2 = Real(1) - std::pow(tc.beta2, static_cast<Real>(st.step));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        Tensor& t = tensors[i].second;
        std::vector<Real>& m = st.m[i];
        std::vector<Real>& v = st.v[i];
        for (std::size_t j = 0; j < t.numel(); ++j) {
            Real g = t.grad()[j] * clip_scale;
            if (!std::isfinite(g))
                throw TrainError("non-finite gradient in parameter '" + tensors[i].first + "'");
            m[j] = tc.beta1 * m[j] + (Real(1) - tc.beta1) * g;
            v[j] = tc.beta2 * v[j] + (Real(1) - tc.beta2) * g * g;
            Real m_hat = m[j] / bc1;
            Real v_hat = v[j] / bc2;
            t[j] -= tc.lr * m_hat / (std::sqrt(v_hat) + tc.adam_eps);
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
    std::uint32_t format_version = 1;
    ModelConfig cfg;
    ModelParams params;
    AdamState opt;
    int epoch = 0;
    Rng::State rng_state;
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"d", cfg.d},
                          {"heads", cfg.heads},
                          {"layers", cfg.layers},
                          {"patch_len", cfg.patch_len},
                          {"stride", cfg.stride},
                          {"history_steps", cfg.history_steps},
                          {"future_steps", cfg.future_steps},
                          {"k", cfg.k},
                          {"alpha", cfg.alpha},
                          {"dropout_attn", cfg.dropout_attn},
                          {"dropout_st", cfg.dropout_st},
                          {"preset", to_string(cfg.preset)},
                          {"ablation",
                           {{"periodic_attention", cfg.ablation.periodic_attention},
                            {"dynamic_attention", cfg.ablation.dynamic_attention},
                            {"spatial_gcn", cfg.ablation.spatial_gcn},
                            {"context_encoding", cfg.ablation.context_encoding}}}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d = j.at("d").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.patch_len = j.at("patch_len").get<int>();
    cfg.stride = j.at("stride").get<int>();
    cfg.history_steps = j.at("history_steps").get<int>();
    cfg.future_steps = j.at("future_steps").get<int>();
    cfg.k = j.at("k").get<int>();
    cfg.alpha = j.at("alpha").get<Real>();
    cfg.dropout_attn = j.at("dropout_attn").get<Real>();
    cfg.dropout_st = j.at("dropout_st").get<Real>();
    std::string preset = j.at("preset").get<std::string>();
    cfg.preset = preset == "mini"   ? Preset::mini
                 : preset == "base" ? Preset::base
                 : preset == "plus" ? Preset::plus
                                    : Preset::custom;
    const auto& ab = j.at("ablation");
    cfg.ablation.periodic_attention = ab.at("periodic_attention").get<bool>();
    cfg.ablation.dynamic_attention = ab.at("dynamic_attention").get<bool>();
    cfg.ablation.spatial_gcn = ab.at("spatial_gcn").get<bool>();
    cfg.ablation.context_encoding = ab.at("context_encoding").get<bool>();
    return cfg;
}

}  // namespace detail

// Binary layout: "STCK" magic, u32 header length, header JSON, then raw
// little-endian tensor payloads at the offsets the manifest declares.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    const_cast<ModelParams&>(ckpt.params).for_each([&](const std::string& name, Tensor& t) {
        tensors.emplace_back(name, &t);
    });
    if (ckpt.opt.m.size() != tensors.size() || ckpt.opt.v.size() != tensors.size())
        throw DataError("checkpoint optimizer state does not match the parameter list");

    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    auto add_entry = [&](const std::string& name, const std::vector<int>& shape, std::size_t count) {
        manifest.push_back({{"name", name}, {"shape", shape}, {"dtype", "f64"}, {"offset", offset}});
        offset += count * sizeof(double);
    };
    for (auto& [name, t] : tensors) add_entry(name, t->shape(), t->numel());
    for (std::size_t i = 0; i < tensors.size(); ++i)
        add_entry("adam.m." + tensors[i].first, tensors[i].second->shape(), ckpt.opt.m[i].size());
    for (std::size_t i = 0; i < tensors.size(); ++i)
        add_entry("adam.v." + tensors[i].first, tensors[i].second->shape(), ckpt.opt.v[i].size());

    nlohmann::json header{{"format_version", ckpt.format_version},
                          {"config", detail::config_to_json(ckpt.cfg)},
                          {"epoch", ckpt.epoch},
                          {"adam_step", ckpt.opt.step},
                          {"rng_state", {{"stream", ckpt.rng_state.stream}, {"counter", ckpt.rng_state.counter}}},
                          {"manifest", manifest}};
    std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint file " + path.string());
    out.write("STCK", 4);
    std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    auto write_block = [&](const std::vector<Real>& data) {
        std::vector<double> wide(data.begin(), data.end());
        out.write(reinterpret_cast<const char*>(wide.data()), static_cast<std::streamsize>(wide.size() * sizeof(double)));
    };
    for (auto& [name, t] : tensors) write_block(t->data());
    for (const auto& m : ckpt.opt.m) write_block(m);
    for (const auto& v : ckpt.opt.v) write_block(v);
    if (!out) throw DataError("failed while writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != "STCK")
        throw DataError("not a checkpoint file: " + path.string());
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), len);
    if (static_cast<std::uint32_t>(in.gcount()) != len) throw DataError("truncated checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header: " + std::string(e.what()));
    }
    std::uint32_t version = header.at("format_version").get<std::uint32_t>();
    if (version != 1)
        throw DataError("checkpoint format_version " + std::to_string(version) + " is not supported (expected 1)");

    Checkpoint ckpt;
    ckpt.format_version = version;
    ckpt.cfg = detail::config_from_json(header.at("config"));
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.rng_state.stream = header.at("rng_state").at("stream").get<std::uint64_t>();
    ckpt.rng_state.counter = header.at("rng_state").at("counter").get<std::uint64_t>();
    ckpt.params = init_params(ckpt.cfg, 0);
    ckpt.opt = AdamState::like(ckpt.params);
    ckpt.opt.step = header.at("adam_step").get<std::int64_t>();

    std::vector<std::pair<std::string, Tensor*>> tensors;
    ckpt.params.for_each([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); });

    std::uint64_t payload_start = 8 + len;
    auto read_block = [&](std::uint64_t offset, std::size_t count, std::vector<Real>& dst, const std::string& name) {
        in.seekg(static_cast<std::streamoff>(payload_start + offset));
        std::vector<double> wide(count);
        in.read(reinterpret_cast<char*>(wide.data()), static_cast<std::streamsize>(count * sizeof(double)));
        if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double))
            throw DataError("checkpoint payload for '" + name + "' is truncated");
        dst.assign(wide.begin(), wide.end());
    };

    const auto& manifest = header.at("manifest");
    for (const auto& entry : manifest) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        std::size_t count = 1;
        for (int d : shape) count *= static_cast<std::size_t>(d);

        if (name.rfind("adam.m.", 0) == 0 || name.rfind("adam.v.", 0) == 0) {
            bool is_m = name[5] == 'm';
            std::string base = name.substr(7);
            bool found = false;
            for (std::size_t i = 0; i < tensors.size(); ++i)
                if (tensors[i].first == base) {
                    auto& slot = is_m ? ckpt.opt.m[i] : ckpt.opt.v[i];
                    if (count != tensors[i].second->numel())
                        throw DataError("manifest length for '" + name + "' disagrees with the model config");
                    read_block(offset, count, slot, name);
                    found = true;
                    break;
                }
            if (!found) throw DataError("checkpoint contains unknown optimizer entry '" + name + "'");
        } else {
            bool found = false;
            for (auto& [tname, t] : tensors)
                if (tname == name) {
                    if (count != t->numel())
                        throw DataError("manifest length for '" + name + "' disagrees with the model config");
                    read_block(offset, count, t->data(), name);
                    found = true;
                    break;
                }
            if (!found) throw DataError("checkpoint contains unknown tensor '" + name + "'");
        }
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// training loops

struct LossHistory {
    std::vector<Real> train;  // mean batch loss per epoch
    std::vector<Real> val;    // validation MAE (normalized space) per epoch
    int best_epoch = -1;
};

struct PretrainResult {
    Checkpoint ckpt;
    LossHistory history;
};

namespace detail {

struct DatasetState {
    const TrafficDataset* ds = nullptr;
    ForwardContext ctx;
    SplitBounds bounds;
    int train_windows = 0;  // sliding valid starts in the train range
};

inline Real validation_mae(const std::vector<DatasetState>& states, const ModelParams& params,
                           const ModelConfig& cfg) {
    NoGradGuard ng;
    WindowGeometry geom = cfg.geometry();
    double total = 0;
    std::size_t count = 0;
    for (const auto& st : states) {
        if (st.bounds.val_end - st.bounds.train_end < geom.H + geom.F) continue;
        for (int s : eval_window_starts(st.bounds.train_end, st.bounds.val_end, geom.H, geom.F)) {
            PatchedWindow w = make_window(*st.ds, s, geom);
            Tensor pred = forward(w, st.ctx, const_cast<ModelParams&>(params), cfg, false, nullptr);
            Tensor target = Tensor::from({w.num_regions, geom.F},
                                         normalize_with_stats(w.target, w.num_regions, geom.F, w.stats));
            total += mae_loss(pred, target).value() * static_cast<double>(pred.numel());
            count += pred.numel();
        }
    }
    return count ? static_cast<Real>(total / static_cast<double>(count))
                 : std::numeric_limits<Real>::quiet_NaN();
}

}  // namespace detail

// Index of the dataset a step draws from, probability proportional to each
// dataset's train-window count.
inline int sample_dataset_index(Rng& rng, const std::vector<int>& window_counts) {
    long long total = 0;
    for (int c : window_counts) total += c;
    if (total <= 0) throw DataError("no training windows available");
    long long pick = static_cast<long long>(rng.uniform_index(static_cast<std::uint64_t>(total)));
    for (std::size_t i = 0; i < window_counts.size(); ++i) {
        pick -= window_counts[i];
        if (pick < 0) return static_cast<int>(i);
    }
    return static_cast<int>(window_counts.size()) - 1;
}

// Multi-dataset pre-training. Each step draws one dataset (probability
// proportional to its window count) and one batch of uniformly random train
// windows from it; an epoch's step count covers every dataset's training
// span once in expectation. Laplacian embeddings and normalized adjacencies
// are computed once per dataset and cached.
inline PretrainResult pretrain(const std::vector<TrafficDataset>& datasets, const ModelConfig& cfg,
                               const TrainConfig& tc) {
    cfg.validate();
    tc.validate();
    if (datasets.empty()) throw DataError("pretrain needs at least one dataset");

    WindowGeometry geom = cfg.geometry();
    std::vector<detail::DatasetState> states;
    std::vector<int> counts;
    long long total_windows = 0;
    for (const TrafficDataset& ds : datasets) {
        detail::DatasetState st;
        st.ds = &ds;
        st.bounds = split_bounds(ds.num_steps, tc.split);
        if (st.bounds.train_end < geom.H + geom.F)
            throw DataError("dataset '" + ds.name + "' train split of " + std::to_string(st.bounds.train_end) +
                            " steps cannot fit one H+F window");
        st.ctx = make_forward_context(ds, cfg.k);
        st.train_windows = window_count(0, st.bounds.train_end, geom.H, geom.F);
        counts.push_back(st.train_windows);
        total_windows += st.train_windows;
        states.push_back(std::move(st));
    }
    int steps_per_epoch = static_cast<int>(std::max<long long>(1, total_windows / tc.batch_size));
    if (tc.max_steps_per_epoch > 0) steps_per_epoch = std::min(steps_per_epoch, tc.max_steps_per_epoch);

    ModelParams params = init_params(cfg, tc.seed);
    AdamState opt = AdamState::like(params);
    Rng rng = Rng(tc.seed).fork(1);

    LossHistory history;
    Real best_val = std::numeric_limits<Real>::infinity();
    int since_best = 0;
    int epoch = 0;
    for (; epoch < tc.max_epochs; ++epoch) {
        double epoch_loss = 0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            params.zero_grad();
            double batch_loss = 0;
            int di = sample_dataset_index(rng, counts);
            detail::DatasetState& st = states[static_cast<std::size_t>(di)];
            for (int b = 0; b < tc.batch_size; ++b) {
                int s = sample_window_start(rng, 0, st.bounds.train_end, geom.H, geom.F);
                PatchedWindow w = make_window(*st.ds, s, geom);
                Tensor pred = forward(w, st.ctx, params, cfg, true, &rng);
                Tensor target = Tensor::from({w.num_regions, geom.F},
                                             normalize_with_stats(w.target, w.num_regions, geom.F, w.stats));
                Tensor loss = scale(mae_loss(pred, target), Real(1) / tc.batch_size);
                if (!std::isfinite(loss.value()))
                    throw TrainError("training loss diverged (non-finite) at epoch " + std::to_string(epoch));
                loss.backward();
                batch_loss += loss.value();
            }
            adam_step(params, opt, tc);
            epoch_loss += batch_loss;
        }
        history.train.push_back(static_cast<Real>(epoch_loss / steps_per_epoch));

        Real val = detail::validation_mae(states, params, cfg);
        history.val.push_back(val);
        if (std::isfinite(val) && val < best_val) {
            best_val = val;
            history.best_epoch = epoch;
            since_best = 0;
        } else if (std::isfinite(val)) {
            if (++since_best >= tc.early_stop_patience) {
                ++epoch;
                break;
            }
        }
    }

    PretrainResult out;
    out.ckpt.cfg = cfg;
    out.ckpt.params = std::move(params);
    out.ckpt.opt = std::move(opt);
    out.ckpt.epoch = epoch;
    out.ckpt.rng_state = rng.state();
    out.history = std::move(history);
    return out;
}

// The checkpoint's patch geometry ties time-of-day buckets to one-hour
// patches; a dataset with a different sampling rate cannot feed it.
inline void check_dataset_geometry(const ModelConfig& cfg, const TrafficDataset& ds) {
    if (60 % ds.sample_rate_minutes != 0 || cfg.patch_len != ds.steps_per_hour())
        throw ConfigError("geometry mismatch: checkpoint expects patches of " + std::to_string(cfg.patch_len) +
                          " steps (one hour), dataset '" + ds.name + "' sampled every " +
                          std::to_string(ds.sample_rate_minutes) + " min has " +
                          std::to_string(60 % ds.sample_rate_minutes == 0 ? ds.steps_per_hour() : -1) +
                          " steps per hour");
    if (ds.num_steps < cfg.history_steps + cfg.future_steps)
        throw DataError("dataset '" + ds.name + "' is shorter than one H+F window");
}

// Head-only fine-tuning: the trunk runs without building a graph, and only
// the prediction head receives Adam updates. Every non-head parameter stays
// bit-identical to the input checkpoint.
inline Checkpoint finetune_head(const Checkpoint& start, const TrafficDataset& ds, const TrainConfig& tc,
                                int max_epochs = 3) {
    tc.validate();
    const ModelConfig& cfg = start.cfg;
    check_dataset_geometry(cfg, ds);

    Checkpoint ckpt;
    ckpt.cfg = cfg;
    ckpt.params = init_params(cfg, 0);
    {
        // deep-copy the starting parameters
        std::vector<Tensor> src;
        const_cast<ModelParams&>(start.params).for_each([&](const std::string&, Tensor& t) { src.push_back(t); });
        std::size_t i = 0;
        ckpt.params.for_each([&](const std::string&, Tensor& t) { t.data() = src[i++].data(); });
    }

    WindowGeometry geom = cfg.geometry();
    SplitBounds bounds = split_bounds(ds.num_steps, tc.split);
    if (bounds.train_end < geom.H + geom.F)
        throw DataError("dataset '" + ds.name + "' train split cannot fit one H+F window");
    ForwardContext ctx = make_forward_context(ds, cfg.k);

    // fresh optimizer over the two head tensors only
    struct HeadState {
        std::vector<Real> m, v;
    };
    HeadState mw{std::vector<Real>(ckpt.params.head_weight.numel(), 0), std::vector<Real>(ckpt.params.head_weight.numel(), 0)};
    HeadState mb{std::vector<Real>(ckpt.params.head_bias.numel(), 0), std::vector<Real>(ckpt.params.head_bias.numel(), 0)};
    std::int64_t step_count = 0;

    Rng rng = Rng(tc.seed).fork(2);
    int steps_per_epoch = std::max(1, bounds.train_end / (geom.H + geom.F) / tc.batch_size);

    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        for (int step = 0; step < steps_per_epoch; ++step) {
            ckpt.params.head_weight.zero_grad();
            ckpt.params.head_bias.zero_grad();
            for (int b = 0; b < tc.batch_size; ++b) {
                int s = sample_window_start(rng, 0, bounds.train_end, geom.H, geom.F);
                PatchedWindow w = make_window(ds, s, geom);
                Tensor features;
                {
                    NoGradGuard ng;
                    features = forward_features(w, ctx, ckpt.params, cfg, false, nullptr);
                }
                Tensor pred = add_bias(matmul(features, ckpt.params.head_weight), ckpt.params.head_bias);
                Tensor target = Tensor::from({w.num_regions, geom.F},
                                             normalize_with_stats(w.target, w.num_regions, geom.F, w.stats));
                Tensor loss = scale(mae_loss(pred, target), Real(1) / tc.batch_size);
                if (!std::isfinite(loss.value())) throw TrainError("fine-tuning loss diverged (non-finite)");
                loss.backward();
            }
            ++step_count;
            Real bc1 = Real(1) - std::pow(tc.beta1, static_cast<Real>(step_count));
            Real bc2 = Real(1) - std::pow(tc.beta2, static_cast<Real>(step_count));
            auto update = [&](Tensor& t, HeadState& hs) {
                for (std::size_t j = 0; j < t.numel(); ++j) {
                    Real g = t.grad()[j];
                    if (!std::isfinite(g)) throw TrainError("non-finite gradient in the prediction head");
                    hs.m[j] = tc.beta1 * hs.m[j] + (Real(1) - tc.beta1) * g;
                    hs.v[j] = tc.beta2 * hs.v[j] + (Real(1) - tc.beta2) * g * g;
                    t[j] -= tc.lr * (hs.m[j] / bc1) / (std::sqrt(hs.v[j] / bc2) + tc.adam_eps);
                }
            };
            update(ckpt.params.head_weight, mw);
            update(ckpt.params.head_bias, mb);
        }
    }

    ckpt.opt = AdamState::like(ckpt.params);
    ckpt.epoch = max_epochs;
    ckpt.rng_state = rng.state();
    return ckpt;
}

}  // namespace stcast
