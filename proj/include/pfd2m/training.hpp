#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pfd2m/data.hpp"
#include "pfd2m/diffusion.hpp"
#include "pfd2m/dit.hpp"
#include "pfd2m/rng.hpp"

namespace pfd2m {

// --- learning-rate schedule ---

struct LrSchedule {
    double base_lr = 1e-5;
    int warmup_steps = 1000;
    int drop_step = 30000;
    double post_drop_lr = 1e-6;
    double constant_lr = 0.0;  // > 0 overrides everything

    void validate() const {
        if (warmup_steps < 0) throw ConfigError("lr schedule: negative warmup");
        if (constant_lr == 0.0 && (!(base_lr > 0.0) || !(post_drop_lr > 0.0)))
            throw ConfigError("lr schedule: rates must be positive");
    }
};

inline double lr_at(const LrSchedule& s, int step) {
    s.validate();
    if (step < 1) throw ConfigError("lr_at: step must be >= 1");
    if (s.constant_lr > 0.0) return s.constant_lr;
    if (step <= s.warmup_steps) return s.base_lr * double(step) / s.warmup_steps;
    if (step > s.drop_step) return s.post_drop_lr;
    return s.base_lr;
}

// --- dataset role sampling ---

struct RoleWeights {
    double d2m = 2.0, t2m = 4.0, v2a = 1.0;

    double sum() const { return d2m + t2m + v2a; }
    void validate() const {
        if (d2m < 0 || t2m < 0 || v2a < 0 || !(sum() > 0.0))
            throw ConfigError("role weights: need nonnegative weights with positive sum");
    }
};

inline Role sample_role(const RoleWeights& w, Rng& rng) {
    w.validate();
    const double u = rng.uniform() * w.sum();
    if (u < w.d2m) return Role::d2m;
    if (u < w.d2m + w.t2m) return Role::t2m;
    return Role::v2a;
}

// --- caption templating ---

inline const std::string& fallback_caption() {
    static const std::string s = "An instrumental music track";
    return s;
}

// Templates keyed by which tag categories they consume: any subset of
// {genre}/{instrument}/{mood} placeholders, each appearing at most once.
inline const std::vector<std::string>& default_caption_templates() {
    static const std::vector<std::string> t = {
        "A {genre} music track",
        "{genre} music",
        "A music track featuring {instrument}",
        "A {mood} instrumental piece",
        "A {genre} track featuring {instrument}",
        "A {mood} {genre} track",
        "A {mood} piece with {instrument}",
        "A {mood} {genre} track featuring {instrument}",
    };
    return t;
}

namespace detail {

inline bool template_uses(const std::string& tpl, const char* slot) {
    return tpl.find(std::string("{") + slot + "}") != std::string::npos;
}

inline std::string join_tags(const std::vector<std::string>& tags) {
    std::string out;
    for (size_t i = 0; i < tags.size(); ++i) {
        if (i > 0) out += i + 1 == tags.size() ? " and " : ", ";
        out += tags[i];
    }
    return out;
}

inline void replace_slot(std::string& tpl, const char* slot, const std::string& value) {
    const std::string key = std::string("{") + slot + "}";
    const size_t pos = tpl.find(key);
    if (pos != std::string::npos) tpl.replace(pos, key.size(), value);
}

}  // namespace detail

// Stochastic tag->caption templating: each tag kept with probability 0.5 (at
// least one forced when any exist), then a uniformly chosen template whose
// placeholders match the surviving categories. Draw order: per-tag keeps in
// genre, instrument, mood order; forced index; template index.
inline std::string make_caption(const TagSet& tags,
                                const std::vector<std::string>& templates, Rng& rng) {
    if (templates.empty()) throw ConfigError("make_caption: no templates");
    if (tags.empty()) return fallback_caption();

    TagSet kept;
    for (const auto& g : tags.genre)
        if (rng.uniform() < 0.5) kept.genre.push_back(g);
    for (const auto& i : tags.instrument)
        if (rng.uniform() < 0.5) kept.instrument.push_back(i);
    for (const auto& m : tags.mood)
        if (rng.uniform() < 0.5) kept.mood.push_back(m);
    if (kept.empty()) {
        // force one tag, indexed across genre ++ instrument ++ mood
        size_t idx = size_t(rng.below(tags.total()));
        if (idx < tags.genre.size()) {
            kept.genre.push_back(tags.genre[idx]);
        } else if (idx -= tags.genre.size(); idx < tags.instrument.size()) {
            kept.instrument.push_back(tags.instrument[idx]);
        } else {
            kept.mood.push_back(tags.mood[idx - tags.instrument.size()]);
        }
    }

    std::vector<const std::string*> candidates;
    for (const auto& tpl : templates) {
        const bool g = detail::template_uses(tpl, "genre");
        const bool i = detail::template_uses(tpl, "instrument");
        const bool m = detail::template_uses(tpl, "mood");
        if (g == !kept.genre.empty() && i == !kept.instrument.empty() && m == !kept.mood.empty())
            candidates.push_back(&tpl);
    }
    if (candidates.empty()) return fallback_caption();
    std::string out = *candidates[size_t(rng.below(candidates.size()))];
    detail::replace_slot(out, "genre", detail::join_tags(kept.genre));
    detail::replace_slot(out, "instrument", detail::join_tags(kept.instrument));
    detail::replace_slot(out, "mood", detail::join_tags(kept.mood));
    return out;
}

// --- zero-init grafting ---

// Build full weights from a base (text+timestep-only) checkpoint: base groups
// copied, everything new zero-initialized. Stage-0 starting state.
inline DiTWeights zero_init_transfer(const std::map<std::string, Tensor>& base_weights,
                                     const DiTConfig& cfg) {
    DiTWeights w = DiTWeights::init(cfg, 0);
    w.zero_visual_group();
    for (auto& [name, t] : w.p) {
        if (!name.starts_with("base.")) continue;
        auto it = base_weights.find(name);
        if (it == base_weights.end())
            throw ConfigError("zero_init_transfer: missing base group '" + name + "'");
        if (it->second.rows != t.rows || it->second.cols != t.cols)
            throw ConfigError("zero_init_transfer: shape mismatch for '" + name + "'");
        t = it->second;
    }
    return w;
}

inline DiTWeights zero_init_transfer(const DiTWeights& base, const DiTConfig& cfg) {
    std::map<std::string, Tensor> bm;
    for (const auto& [name, t] : base.p)
        if (name.starts_with("base.")) bm.emplace(name, t);
    return zero_init_transfer(bm, cfg);
}

// --- optimizer ---

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    explicit AdamW(const AdamWConfig& cfg = {}) : cfg_(cfg) {}

    int steps() const { return t_; }
    const std::map<std::string, Tensor>& moment1() const { return m_; }
    const std::map<std::string, Tensor>& moment2() const { return v_; }

    void restore(std::map<std::string, Tensor> m, std::map<std::string, Tensor> v, int t) {
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = t;
    }

    void update(DiTWeights& w, const ParamVars& lifted, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (auto& [name, tensor] : w.p) {
            auto it = lifted.find(name);
            if (it == lifted.end()) throw ConfigError("adamw: missing grad for '" + name + "'");
            const Tensor& g = it->second->grad;
            if (!g.same_shape(tensor)) throw ConfigError("adamw: grad shape mismatch");
            Tensor& m = m_.try_emplace(name, tensor.rows, tensor.cols).first->second;
            Tensor& v = v_.try_emplace(name, tensor.rows, tensor.cols).first->second;
            for (int i = 0; i < tensor.size(); ++i) {
                m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g.v[i];
                v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g.v[i] * g.v[i];
                const double mh = m.v[i] / bc1;
                const double vh = v.v[i] / bc2;
                tensor.v[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                                     cfg_.weight_decay * tensor.v[i]);
            }
        }
    }

private:
    AdamWConfig cfg_;
    int t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// --- stage training ---

struct TrainItem {
    Tensor latent;   // [L x c_latent]
    Tensor visual;   // [F x d_vis]; ignored for t2m
    double feature_rate = 8.0;
    TagSet tags;
    std::string caption;  // non-empty: used verbatim (v2a); else templated from tags
    Role role = Role::d2m;
};

struct StageConfig {
    int stage_id = 1;
    RoleWeights weights;
    int total_steps = 2000;
    int batch_size = 16;
    LrSchedule lr;
    AdamWConfig adamw;
    uint64_t seed = 1;
    double dropout_rate = 0.1;
    double t_min = 1e-3;
    int log_every = 10;
    bool normalize_latents = true;

    void validate() const {
        if (stage_id != 1 && stage_id != 2) throw ConfigError("stage config: stage must be 1 or 2");
        if (total_steps < 1) throw ConfigError("stage config: total_steps must be >= 1");
        if (batch_size < 1) throw ConfigError("stage config: batch_size must be >= 1");
        if (log_every < 1) throw ConfigError("stage config: log_every must be >= 1");
        weights.validate();
        lr.validate();
    }
};

inline StageConfig stage1_config() {
    StageConfig c;
    c.stage_id = 1;
    c.lr = LrSchedule{};  // warmup to 1e-5, drop to 1e-6 after 30k
    return c;
}

inline StageConfig stage2_config() {
    StageConfig c;
    c.stage_id = 2;
    c.total_steps = 1500;
    c.lr.constant_lr = 1e-6;
    return c;
}

struct TrainLogRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    int n_d2m = 0, n_t2m = 0, n_v2a = 0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double latent_scale = 1.0;
};

// Mutable cross-call state enabling mid-stage resume: optimizer moments, the
// next step to run, and the (frozen-at-start) latent normalization scale.
struct TrainState {
    AdamW opt;
    int next_step = 1;
    double latent_scale = 0.0;  // <= 0: compute from the items at start

    explicit TrainState(const AdamWConfig& cfg = {}) : opt(cfg) {}
};

// One training step over a drawn batch; returns the batch loss. Exposed
// separately so tests can drive single steps.
inline double train_step(const StageConfig& cfg, DiTWeights& w, AdamW& opt,
                         const std::vector<std::vector<const TrainItem*>>& by_role, int step,
                         double latent_scale, TrainLogRow* row_out = nullptr) {
    Rng rng(derive_seed(cfg.seed, uint64_t(step)));
    const CondConfig ccfg{w.cfg.d_txt, w.cfg.d_vis, w.cfg.max_tokens, w.cfg.vocab};
    const NullEmbeddings nulls = null_embeddings(w);

    ad::Tape T(true);
    ParamVars P = lift_weights(T, w);
    ad::Var total;
    TrainLogRow row;
    row.step = step;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const Role role = sample_role(cfg.weights, rng);
        const auto& pool = by_role[size_t(role)];
        if (pool.empty())
            throw ConfigError("train: no items for role " + role_name(role) +
                              " with positive weight");
        const TrainItem& item = *pool[size_t(rng.below(pool.size()))];
        (role == Role::d2m ? row.n_d2m : role == Role::t2m ? row.n_t2m : row.n_v2a) += 1;

        const std::string caption = !item.caption.empty()
                                        ? item.caption
                                        : make_caption(item.tags, default_caption_templates(), rng);
        const std::vector<int> ids = text_token_ids(caption, ccfg);

        ConditionBundle bundle;
        bundle.text = Tensor(1, w.cfg.d_txt);  // placeholder; tape path gathers real rows
        if (item.role == Role::t2m || item.visual.rows == 0) {
            bundle.visual = nulls.empty_visual;
            bundle.visual_is_null = true;
        } else {
            bundle.visual = item.visual;
            bundle.feature_rate = item.feature_rate;
        }

        Tensor x0 = item.latent;
        if (latent_scale != 1.0)
            for (double& v : x0.v) v *= latent_scale;

        auto fwd = [&](ad::Var x_t, double t, const ConditionBundle& rb) {
            ad::Var text = rb.text_is_null ? P.at("base.null_text")
                                           : T.gather_rows(P.at("base.text_table"), ids);
            ad::Var vis = rb.visual_is_null ? P.at("vis.null_visual") : T.leaf(rb.visual);
            return dit_forward(T, w.cfg, P, x_t, t, text, vis);
        };
        ad::Var loss =
            training_loss(T, fwd, x0, bundle, nulls, cfg.dropout_rate, cfg.t_min, rng);
        total = total ? T.add_scalar(total, loss) : loss;
    }
    ad::Var batch_loss = T.scale(total, 1.0 / cfg.batch_size);
    T.backward(batch_loss);
    opt.update(w, P, lr_at(cfg.lr, step));

    row.loss = batch_loss->val.at(0, 0);
    row.lr = lr_at(cfg.lr, step);
    if (row_out) *row_out = row;
    return row.loss;
}

// Full stage loop (resumable through `state`). On a non-finite loss the
// weights are reverted to the last logged snapshot and an Error is thrown
// (the caller still holds good weights). checkpoint_cb, when set, fires every
// log_every steps and at the end with the current weights.
inline TrainResult train_stage(
    const StageConfig& cfg, DiTWeights& w, const std::vector<TrainItem>& items,
    const std::function<void(int, const DiTWeights&, const TrainResult&)>& checkpoint_cb = {},
    TrainState* state = nullptr) {
    cfg.validate();
    if (items.empty()) throw ConfigError("train_stage: no items");

    std::vector<std::vector<const TrainItem*>> by_role(3);
    for (const auto& it : items) by_role[size_t(it.role)].push_back(&it);
    if (cfg.weights.d2m > 0 && by_role[size_t(Role::d2m)].empty())
        throw ConfigError("train_stage: d2m weight positive but no d2m items");
    if (cfg.weights.t2m > 0 && by_role[size_t(Role::t2m)].empty())
        throw ConfigError("train_stage: t2m weight positive but no t2m items");
    if (cfg.weights.v2a > 0 && by_role[size_t(Role::v2a)].empty())
        throw ConfigError("train_stage: v2a weight positive but no v2a items");

    TrainState local(cfg.adamw);
    TrainState& st = state ? *state : local;
    const int start_step = st.next_step;
    if (start_step < 1 || start_step > cfg.total_steps + 1)
        throw ConfigError("train_stage: resume step outside the stage");

    TrainResult res;
    if (st.latent_scale > 0.0) {
        res.latent_scale = st.latent_scale;
    } else if (cfg.normalize_latents) {
        double sq = 0.0;
        size_t n = 0;
        for (const auto& it : items) {
            for (double v : it.latent.v) sq += v * v;
            n += size_t(it.latent.size());
        }
        const double rms = std::sqrt(sq / double(std::max<size_t>(1, n)));
        res.latent_scale = rms > 0.0 ? 1.0 / rms : 1.0;
    }
    st.latent_scale = res.latent_scale;

    DiTWeights snapshot = w;
    int snapshot_step = start_step - 1;
    for (int step = start_step; step <= cfg.total_steps; ++step) {
        TrainLogRow row;
        double loss;
        try {
            loss = train_step(cfg, w, st.opt, by_role, step, res.latent_scale, &row);
        } catch (const ConfigError&) {
            throw;  // genuine configuration problem, not a numeric blow-up
        } catch (const Error&) {
            w = snapshot;
            st.next_step = snapshot_step + 1;
            throw Error("train_stage: aborted at step " + std::to_string(step) +
                        " (non-finite loss); weights reverted to step " +
                        std::to_string(snapshot_step));
        }
        if (!std::isfinite(loss)) {
            w = snapshot;
            st.next_step = snapshot_step + 1;
            throw Error("train_stage: aborted at step " + std::to_string(step) +
                        " (non-finite loss); weights reverted to step " +
                        std::to_string(snapshot_step));
        }
        res.log.push_back(row);
        if (step % cfg.log_every == 0 || step == cfg.total_steps) {
            snapshot = w;
            snapshot_step = step;
            st.next_step = step + 1;
            if (checkpoint_cb) checkpoint_cb(step, w, res);
        }
    }
    st.next_step = cfg.total_steps + 1;
    return res;
}

inline std::string train_log_csv(const TrainResult& res) {
    std::string s = "step,loss,lr,n_d2m,n_t2m,n_v2a\n";
    char buf[160];
    for (const auto& r : res.log) {
        std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%d,%d,%d\n", r.step, r.loss, r.lr, r.n_d2m,
                      r.n_t2m, r.n_v2a);
        s += buf;
    }
    return s;
}

}  // namespace pfd2m
