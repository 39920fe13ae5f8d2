#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pfd2m/autodiff.hpp"
#include "pfd2m/conditioning.hpp"
#include "pfd2m/container.hpp"
#include "pfd2m/rng.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Diffusion transformer over latent frames. Conditioning enters three ways:
//  - visual features, upsampled and conv-projected to latent channels, then
//    concatenated with x_t along channels before the input projection;
//  - visual+timestep modulation through frame-wise AdaLN scale/bias at the
//    self-attention and feed-forward sites (prepended tokens excluded);
//  - text embeddings through cross-attention.
// All machinery absent from the plain text+timestep transformer lives in the
// "vis." weight group so it can be zero-initialized as a unit; in that state
// the forward pass reproduces the base model exactly.
struct DiTConfig {
    int depth = 4;
    int d_model = 128;
    int heads = 4;
    int d_ff = 0;  // 0 -> 4*d_model
    int c_latent = 16;
    int d_txt = 64;
    int d_vis = 32;
    int n_prepend = 1;
    int max_frames = 1024;
    int concat_kernel = 1;
    int vocab = 4096;
    int max_tokens = 64;

    int ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }

    void validate() const {
        if (depth < 1 || d_model < 2 || heads < 1 || c_latent < 1 || d_txt < 1 || d_vis < 1)
            throw ConfigError("dit: non-positive dimension");
        if (d_model % heads != 0) throw ConfigError("dit: d_model not divisible by heads");
        if (d_model % 2 != 0) throw ConfigError("dit: d_model must be even");
        if (n_prepend < 1) throw ConfigError("dit: n_prepend must be >= 1");
        if (concat_kernel < 1 || concat_kernel % 2 == 0)
            throw ConfigError("dit: concat_kernel must be odd");
        if (max_frames < 1) throw ConfigError("dit: max_frames must be >= 1");
    }
};

struct DiTWeights {
    DiTConfig cfg;
    std::map<std::string, Tensor> p;  // name -> tensor, sorted (deterministic order)

    Tensor& at(const std::string& name) {
        auto it = p.find(name);
        if (it == p.end()) throw ConfigError("dit weights: missing '" + name + "'");
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = p.find(name);
        if (it == p.end()) throw ConfigError("dit weights: missing '" + name + "'");
        return it->second;
    }

    template <class Fn>
    void for_each_param(Fn&& fn) {
        for (auto& [name, t] : p) fn(name, t);
    }
    template <class Fn>
    void for_each_param(Fn&& fn) const {
        for (const auto& [name, t] : p) fn(name, t);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [_, t] : p) n += size_t(t.size());
        return n;
    }

    // Zero every weight in the grafted group; the Stage-0 starting state.
    void zero_visual_group() {
        for (auto& [name, t] : p)
            if (name.starts_with("vis.")) std::fill(t.v.begin(), t.v.end(), 0.0);
    }

    static DiTWeights init(const DiTConfig& cfg, uint64_t seed, bool randomize_visual = false) {
        cfg.validate();
        DiTWeights w;
        w.cfg = cfg;
        const int d = cfg.d_model;
        const int c = cfg.c_latent;
        auto add = [&](const std::string& name, int rows, int cols, double stddev) {
            Rng rng(derive_seed(seed, fnv1a(name)));
            w.p.emplace(name, stddev == 0.0 ? Tensor(rows, cols)
                                            : Tensor::randn(rows, cols, rng, stddev));
        };
        auto wstd = [](int fan_in) { return 1.0 / std::sqrt(double(fan_in)); };

        add("base.text_table", cfg.vocab, cfg.d_txt, 1.0);
        add("base.null_text", 1, cfg.d_txt, 1.0);
        add("base.input_w", d, c, wstd(c));
        add("base.input_b", 1, d, 0.0);
        add("base.time_w1", d, d, wstd(d));
        add("base.time_b1", 1, d, 0.0);
        add("base.time_w2", d, d, wstd(d));
        add("base.time_b2", 1, d, 0.0);
        add("base.out_w", c, d, wstd(d));
        add("base.out_b", 1, c, 0.0);
        for (int b = 0; b < cfg.depth; ++b) {
            const std::string bb = "base.blk" + std::to_string(b) + ".";
            for (const char* nm : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
                add(bb + nm, d, d, wstd(d));
            for (const char* nm : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
                add(bb + nm, 1, d, 0.0);
            add(bb + "cross.wq", d, d, wstd(d));
            add(bb + "cross.wk", d, cfg.d_txt, wstd(cfg.d_txt));
            add(bb + "cross.wv", d, cfg.d_txt, wstd(cfg.d_txt));
            add(bb + "cross.wo", d, d, wstd(d));
            for (const char* nm : {"cross.bq", "cross.bk", "cross.bv", "cross.bo"})
                add(bb + nm, 1, d, 0.0);
            add(bb + "ffn.w1", cfg.ff(), d, wstd(d));
            add(bb + "ffn.b1", 1, cfg.ff(), 0.0);
            add(bb + "ffn.w2", d, cfg.ff(), wstd(cfg.ff()));
            add(bb + "ffn.b2", 1, d, 0.0);
        }

        const double vs = randomize_visual ? 0.1 : 0.0;
        add("vis.concat_w", c, cfg.concat_kernel * cfg.d_vis, vs);
        add("vis.concat_b", 1, c, vs);
        add("vis.input_w", d, c, vs);
        add("vis.posemb", cfg.max_frames, cfg.d_vis, vs);
        add("vis.adaln_w", d, cfg.d_vis, vs);
        add("vis.adaln_b", 1, d, vs);
        add("vis.null_visual", 1, cfg.d_vis, vs);
        for (int b = 0; b < cfg.depth; ++b) {
            const std::string vb = "vis.blk" + std::to_string(b) + ".";
            for (const char* nm : {"attn_scale_w", "attn_bias_w", "ffn_scale_w", "ffn_bias_w"})
                add(vb + nm, d, d, vs);
            for (const char* nm : {"attn_scale_b", "attn_bias_b", "ffn_scale_b", "ffn_bias_b"})
                add(vb + nm, 1, d, vs);
        }
        return w;
    }
};

inline NullEmbeddings null_embeddings(const DiTWeights& w) {
    return {w.at("base.null_text"), w.at("vis.null_visual")};
}

struct ForwardHooks {
    bool identity_self_attention = false;  // test hook: self-attention passes input through
};

using ParamVars = std::map<std::string, ad::Var>;

inline ParamVars lift_weights(ad::Tape& tape, const DiTWeights& w) {
    ParamVars out;
    for (const auto& [name, t] : w.p) out.emplace(name, tape.leaf(t));
    return out;
}

namespace detail {

inline ad::Var mha(ad::Tape& T, ad::Var q_in, ad::Var kv_in, int heads, ad::Var wq, ad::Var bq,
                   ad::Var wk, ad::Var bk, ad::Var wv, ad::Var bv, ad::Var wo, ad::Var bo) {
    const int d = wq->val.rows;
    const int dh = d / heads;
    ad::Var q = T.linear(q_in, wq, bq);
    ad::Var k = T.linear(kv_in, wk, bk);
    ad::Var v = T.linear(kv_in, wv, bv);
    std::vector<ad::Var> outs;
    outs.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        ad::Var qh = T.slice_cols(q, h * dh, (h + 1) * dh);
        ad::Var kh = T.slice_cols(k, h * dh, (h + 1) * dh);
        ad::Var vh = T.slice_cols(v, h * dh, (h + 1) * dh);
        ad::Var att = T.softmax_rows(T.scale(T.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
        outs.push_back(T.matmul(att, vh));
    }
    return T.linear(T.concat_cols(outs), wo, bo);
}

}  // namespace detail

// Tape forward. x_t: [L x c_latent]; text_emb: [M x d_txt] (null already
// substituted by the caller); vis_src: [F x d_vis] (likewise). Returns the
// velocity prediction [L x c_latent].
inline ad::Var dit_forward(ad::Tape& T, const DiTConfig& cfg, const ParamVars& P, ad::Var x_t,
                           double t, ad::Var text_emb, ad::Var vis_src,
                           const ForwardHooks& hooks = {}) {
    cfg.validate();
    const int L = x_t->val.rows;
    if (x_t->val.cols != cfg.c_latent) throw ConfigError("dit_forward: latent channel mismatch");
    if (L < 1) throw ConfigError("dit_forward: empty sequence");
    if (L > cfg.max_frames) throw ConfigError("dit_forward: sequence longer than max_frames");
    if (text_emb->val.cols != cfg.d_txt || text_emb->val.rows < 1)
        throw ConfigError("dit_forward: bad text embedding shape");
    if (vis_src->val.cols != cfg.d_vis || vis_src->val.rows < 1)
        throw ConfigError("dit_forward: bad visual feature shape");
    auto at = [&](const std::string& n) -> ad::Var {
        auto it = P.find(n);
        if (it == P.end()) throw ConfigError("dit_forward: missing weight '" + n + "'");
        return it->second;
    };

    ad::Var ts = T.leaf(sinusoidal_timestep_embedding(t, cfg.d_model));
    ad::Var tvec = T.linear(T.gelu(T.linear(ts, at("base.time_w1"), at("base.time_b1"))),
                            at("base.time_w2"), at("base.time_b2"));

    // visual path: upsample, positional embeddings, conv projection to latent
    // channels, channel-concat via a dedicated slice of the input projection
    ad::Var vp = T.add(T.upsample_rows(vis_src, L), T.slice_rows(at("vis.posemb"), 0, L));
    ad::Var vproj = T.conv1d_same(vp, at("vis.concat_w"), at("vis.concat_b"), cfg.concat_kernel);
    ad::Var h = T.concat_rows(
        T.upsample_rows(tvec, cfg.n_prepend),
        T.add(T.linear(x_t, at("base.input_w"), at("base.input_b")),
              T.matmul_nt(vproj, at("vis.input_w"))));

    // frame-wise modulation source: broadcast timestep vector + projected visual
    ad::Var m = T.add(T.upsample_rows(tvec, L), T.linear(vp, at("vis.adaln_w"), at("vis.adaln_b")));
    ad::Var zpad = T.leaf(Tensor(cfg.n_prepend, cfg.d_model));  // prepended rows: plain LN

    for (int b = 0; b < cfg.depth; ++b) {
        const std::string bb = "base.blk" + std::to_string(b) + ".";
        const std::string vb = "vis.blk" + std::to_string(b) + ".";
        ad::Var s_att =
            T.concat_rows(zpad, T.linear(m, at(vb + "attn_scale_w"), at(vb + "attn_scale_b")));
        ad::Var b_att =
            T.concat_rows(zpad, T.linear(m, at(vb + "attn_bias_w"), at(vb + "attn_bias_b")));
        ad::Var a_in = T.modulate(T.layer_norm(h), s_att, b_att);
        ad::Var a_out = hooks.identity_self_attention
                            ? a_in
                            : detail::mha(T, a_in, a_in, cfg.heads, at(bb + "attn.wq"),
                                          at(bb + "attn.bq"), at(bb + "attn.wk"),
                                          at(bb + "attn.bk"), at(bb + "attn.wv"),
                                          at(bb + "attn.bv"), at(bb + "attn.wo"),
                                          at(bb + "attn.bo"));
        h = T.add(h, a_out);
        h = T.add(h, detail::mha(T, T.layer_norm(h), text_emb, cfg.heads, at(bb + "cross.wq"),
                                 at(bb + "cross.bq"), at(bb + "cross.wk"), at(bb + "cross.bk"),
                                 at(bb + "cross.wv"), at(bb + "cross.bv"), at(bb + "cross.wo"),
                                 at(bb + "cross.bo")));
        ad::Var s_ffn =
            T.concat_rows(zpad, T.linear(m, at(vb + "ffn_scale_w"), at(vb + "ffn_scale_b")));
        ad::Var b_ffn =
            T.concat_rows(zpad, T.linear(m, at(vb + "ffn_bias_w"), at(vb + "ffn_bias_b")));
        ad::Var f_in = T.modulate(T.layer_norm(h), s_ffn, b_ffn);
        h = T.add(h, T.linear(T.gelu(T.linear(f_in, at(bb + "ffn.w1"), at(bb + "ffn.b1"))),
                              at(bb + "ffn.w2"), at(bb + "ffn.b2")));
    }

    ad::Var body = T.slice_rows(h, cfg.n_prepend, cfg.n_prepend + L);
    return T.linear(body, at("base.out_w"), at("base.out_b"));
}

// Plain-tensor inference wrapper; nulls substituted from the weights.
inline Tensor dit_infer(const DiTWeights& w, const Tensor& x_t, double t,
                        const ConditionBundle& bundle, const ForwardHooks& hooks = {}) {
    ad::Tape T(false);
    ParamVars P = lift_weights(T, w);
    ad::Var text = bundle.text_is_null ? P.at("base.null_text") : T.leaf(bundle.text);
    ad::Var vis = bundle.visual_is_null ? P.at("vis.null_visual") : T.leaf(bundle.visual);
    return dit_forward(T, w.cfg, P, T.leaf(x_t), t, text, vis, hooks)->val;
}

// Reference model without any visual machinery: a plain pre-LN transformer
// with the timestep token prepended. Written independently of dit_forward so
// the two can be compared against each other.
inline Tensor dit_forward_base(const DiTWeights& w, const Tensor& x_t, double t,
                               const Tensor& text_emb) {
    const DiTConfig& cfg = w.cfg;
    cfg.validate();
    const int L = x_t.rows;
    const int d = cfg.d_model;

    auto lin = [](const Tensor& x, const Tensor& wt, const Tensor& b) {
        Tensor y = matmul_nt(x, wt);
        for (int r = 0; r < y.rows; ++r)
            for (int c = 0; c < y.cols; ++c) y.at(r, c) += b.at(0, c);
        return y;
    };
    auto ln = [](const Tensor& x) {
        Tensor y(x.rows, x.cols);
        for (int r = 0; r < x.rows; ++r) {
            double mean = 0.0;
            for (int c = 0; c < x.cols; ++c) mean += x.at(r, c);
            mean /= x.cols;
            double var = 0.0;
            for (int c = 0; c < x.cols; ++c) {
                const double dd = x.at(r, c) - mean;
                var += dd * dd;
            }
            var /= x.cols;
            const double is = 1.0 / std::sqrt(var + 1e-6);
            for (int c = 0; c < x.cols; ++c) y.at(r, c) = (x.at(r, c) - mean) * is;
        }
        return y;
    };
    auto gelu = [](Tensor x) {
        for (double& v : x.v) v = 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475));
        return x;
    };
    auto mha = [&](const Tensor& q_in, const Tensor& kv_in, const std::string& pre) {
        Tensor q = lin(q_in, w.at(pre + "wq"), w.at(pre + "bq"));
        Tensor k = lin(kv_in, w.at(pre + "wk"), w.at(pre + "bk"));
        Tensor v = lin(kv_in, w.at(pre + "wv"), w.at(pre + "bv"));
        const int dh = d / cfg.heads;
        Tensor mixed(q.rows, d);
        for (int hd = 0; hd < cfg.heads; ++hd) {
            for (int i = 0; i < q.rows; ++i) {
                // softmax over keys for this query row
                std::vector<double> sc(size_t(k.rows));
                double mx = -1e300;
                for (int j = 0; j < k.rows; ++j) {
                    double dot = 0.0;
                    for (int c = 0; c < dh; ++c)
                        dot += q.at(i, hd * dh + c) * k.at(j, hd * dh + c);
                    sc[size_t(j)] = dot / std::sqrt(double(dh));
                    mx = std::max(mx, sc[size_t(j)]);
                }
                double sum = 0.0;
                for (double& s : sc) {
                    s = std::exp(s - mx);
                    sum += s;
                }
                for (int c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int j = 0; j < k.rows; ++j)
                        acc += sc[size_t(j)] / sum * v.at(j, hd * dh + c);
                    mixed.at(i, hd * dh + c) = acc;
                }
            }
        }
        return lin(mixed, w.at(pre + "wo"), w.at(pre + "bo"));
    };

    Tensor ts = sinusoidal_timestep_embedding(t, d);
    Tensor tvec = lin(gelu(lin(ts, w.at("base.time_w1"), w.at("base.time_b1"))),
                      w.at("base.time_w2"), w.at("base.time_b2"));
    Tensor proj = lin(x_t, w.at("base.input_w"), w.at("base.input_b"));
    Tensor h(cfg.n_prepend + L, d);
    for (int i = 0; i < cfg.n_prepend; ++i)
        std::copy(tvec.v.begin(), tvec.v.end(), h.row(i));
    std::copy(proj.v.begin(), proj.v.end(), h.row(cfg.n_prepend));

    for (int b = 0; b < cfg.depth; ++b) {
        const std::string bb = "base.blk" + std::to_string(b) + ".";
        Tensor n1 = ln(h);
        axpy(1.0, mha(n1, n1, bb + "attn."), h);
        axpy(1.0, mha(ln(h), text_emb, bb + "cross."), h);
        Tensor f = lin(gelu(lin(ln(h), w.at(bb + "ffn.w1"), w.at(bb + "ffn.b1"))),
                       w.at(bb + "ffn.w2"), w.at(bb + "ffn.b2"));
        axpy(1.0, f, h);
    }

    Tensor body(L, d);
    std::copy(h.row(cfg.n_prepend), h.row(cfg.n_prepend) + size_t(L) * size_t(d), body.v.data());
    return lin(body, w.at("base.out_w"), w.at("base.out_b"));
}

// --- checkpoint serialization ---

inline Container weights_to_container(const DiTWeights& w) {
    Container c;
    c.meta["kind"] = "dit-checkpoint";
    auto put = [&](const std::string& k, int v) { c.meta[k] = std::to_string(v); };
    put("depth", w.cfg.depth);
    put("d_model", w.cfg.d_model);
    put("heads", w.cfg.heads);
    put("d_ff", w.cfg.d_ff);
    put("c_latent", w.cfg.c_latent);
    put("d_txt", w.cfg.d_txt);
    put("d_vis", w.cfg.d_vis);
    put("n_prepend", w.cfg.n_prepend);
    put("max_frames", w.cfg.max_frames);
    put("concat_kernel", w.cfg.concat_kernel);
    put("vocab", w.cfg.vocab);
    put("max_tokens", w.cfg.max_tokens);
    for (const auto& [name, t] : w.p) c.put(name, t);
    return c;
}

inline DiTWeights weights_from_container(const Container& c) {
    auto geti = [&](const std::string& k) {
        auto it = c.meta.find(k);
        if (it == c.meta.end()) throw IoError("checkpoint: missing meta '" + k + "'");
        return std::stoi(it->second);
    };
    DiTWeights w;
    w.cfg.depth = geti("depth");
    w.cfg.d_model = geti("d_model");
    w.cfg.heads = geti("heads");
    w.cfg.d_ff = geti("d_ff");
    w.cfg.c_latent = geti("c_latent");
    w.cfg.d_txt = geti("d_txt");
    w.cfg.d_vis = geti("d_vis");
    w.cfg.n_prepend = geti("n_prepend");
    w.cfg.max_frames = geti("max_frames");
    w.cfg.concat_kernel = geti("concat_kernel");
    w.cfg.vocab = geti("vocab");
    w.cfg.max_tokens = geti("max_tokens");
    w.cfg.validate();
    for (const auto& [name, t] : c.tensors)
        if (name.starts_with("base.") || name.starts_with("vis.")) w.p.emplace(name, t);
    DiTWeights ref = DiTWeights::init(w.cfg, 1);
    for (const auto& [name, t] : ref.p) {
        const Tensor& got = w.at(name);
        if (got.rows != t.rows || got.cols != t.cols)
            throw IoError("checkpoint: tensor '" + name + "' has wrong shape");
    }
    if (w.p.size() != ref.p.size()) throw IoError("checkpoint: unexpected extra weight tensors");
    return w;
}

}  // namespace pfd2m
