#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "pfd2m/autodiff.hpp"
#include "pfd2m/conditioning.hpp"
#include "pfd2m/rng.hpp"
#include "pfd2m/tensor.hpp"

namespace pfd2m {

// Cosine variance-preserving schedule over continuous t in [0,1].
inline double schedule_alpha(double t) { return std::cos(0.5 * std::numbers::pi * t); }
inline double schedule_sigma(double t) { return std::sin(0.5 * std::numbers::pi * t); }
inline double schedule_lambda(double t) { return std::log(schedule_alpha(t) / schedule_sigma(t)); }

inline Tensor q_sample(const Tensor& x0, double t, const Tensor& eps) {
    if (!x0.same_shape(eps)) throw ConfigError("q_sample: shape mismatch");
    Tensor out = pfd2m::scale(x0, schedule_alpha(t));
    axpy(schedule_sigma(t), eps, out);
    return out;
}

inline Tensor velocity_target(const Tensor& x0, const Tensor& eps, double t) {
    if (!x0.same_shape(eps)) throw ConfigError("velocity_target: shape mismatch");
    Tensor out = pfd2m::scale(eps, schedule_alpha(t));
    axpy(-schedule_sigma(t), x0, out);
    return out;
}

inline Tensor x0_from_v(const Tensor& x_t, const Tensor& v, double t) {
    Tensor out = pfd2m::scale(x_t, schedule_alpha(t));
    axpy(-schedule_sigma(t), v, out);
    return out;
}

inline Tensor v_from_x0(const Tensor& x_t, const Tensor& x0, double t) {
    // invert x0 = alpha*x_t - sigma*v
    const double s = schedule_sigma(t);
    Tensor out = pfd2m::scale(x_t, schedule_alpha(t));
    axpy(-1.0, x0, out);
    return pfd2m::scale(out, 1.0 / s);
}

inline Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, double s) {
    if (!v_uncond.same_shape(v_cond)) throw ConfigError("cfg_combine: shape mismatch");
    if (s == 1.0) return v_cond;
    if (s == 0.0) return v_uncond;
    Tensor out = pfd2m::sub(v_cond, v_uncond);
    Tensor res = v_uncond;
    axpy(s, out, res);
    return res;
}

struct SamplerConfig {
    int steps = 100;
    double guidance_scale = 5.0;
    double t_min = 1e-3;
    double t_max = 1.0;

    void validate() const {
        if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
        if (!(t_min > 0.0) || !(t_min < t_max) || !(t_max <= 1.0))
            throw ConfigError("sampler: need 0 < t_min < t_max <= 1");
    }
};

// Velocity predictor seen by the sampler; both guidance branches go through it.
struct VelocityModel {
    virtual ~VelocityModel() = default;
    virtual Tensor velocity(const Tensor& x_t, double t, bool conditional) = 0;
};

struct SampleTrace {
    std::vector<double> t_grid;   // accepted iterate times (t_1..t_N)
    std::vector<double> x_norm;   // Frobenius norm after each update
};

// Second-order multistep data-prediction solver (DPM-Solver++(2M) style) on a
// uniform t grid mapped through lambda. steps=1 degenerates to one first-order
// step. Initial noise is drawn row-major from rng.
inline Tensor sample(VelocityModel& model, const SamplerConfig& cfg, int rows, int cols, Rng& rng,
                     SampleTrace* trace = nullptr) {
    cfg.validate();
    const int n = cfg.steps;
    std::vector<double> t(size_t(n) + 1), lam(size_t(n) + 1), al(size_t(n) + 1),
        sg(size_t(n) + 1);
    for (int i = 0; i <= n; ++i) {
        t[size_t(i)] = cfg.t_max + (cfg.t_min - cfg.t_max) * double(i) / n;
        lam[size_t(i)] = schedule_lambda(t[size_t(i)]);
        al[size_t(i)] = schedule_alpha(t[size_t(i)]);
        sg[size_t(i)] = schedule_sigma(t[size_t(i)]);
    }

    Tensor x(rows, cols);
    for (double& v : x.v) v = rng.gaussian();

    Tensor x0_prev;
    double h_prev = 0.0;
    for (int i = 1; i <= n; ++i) {
        const double t_src = t[size_t(i) - 1];
        Tensor v_cond = model.velocity(x, t_src, true);
        Tensor v_uncond = model.velocity(x, t_src, false);
        Tensor vhat = cfg_combine(v_uncond, v_cond, cfg.guidance_scale);
        Tensor x0 = x0_from_v(x, vhat, t_src);

        const double h = lam[size_t(i)] - lam[size_t(i) - 1];
        const double ratio = sg[size_t(i)] / sg[size_t(i) - 1];
        const double coef = -al[size_t(i)] * (std::expm1(-h));
        if (i == 1) {
            Tensor nx = pfd2m::scale(x, ratio);
            axpy(coef, x0, nx);
            x = std::move(nx);
        } else {
            const double r = h_prev / h;
            Tensor d = pfd2m::scale(x0, 1.0 + 1.0 / (2.0 * r));
            axpy(-1.0 / (2.0 * r), x0_prev, d);
            Tensor nx = pfd2m::scale(x, ratio);
            axpy(coef, d, nx);
            x = std::move(nx);
        }
        if (!x.all_finite()) throw Error("sampler: non-finite trajectory at t=" +
                                         std::to_string(t[size_t(i)]));
        x0_prev = std::move(x0);
        h_prev = h;
        if (trace) {
            trace->t_grid.push_back(t[size_t(i)]);
            trace->x_norm.push_back(x.frob_norm());
        }
    }
    return x;
}

// Single-sample training loss built on the caller's tape. Draw order is
// frozen: t, then eps (row-major), then condition dropout (text, visual).
// ForwardFn: (Var x_t, double t, const ConditionBundle& resolved) -> Var.
template <class ForwardFn>
ad::Var training_loss(ad::Tape& T, ForwardFn&& fwd, const Tensor& x0,
                      const ConditionBundle& bundle, const NullEmbeddings& nulls,
                      double dropout_rate, double t_min, Rng& rng) {
    const double t = t_min + (1.0 - t_min) * rng.uniform();
    Tensor eps(x0.rows, x0.cols);
    for (double& v : eps.v) v = rng.gaussian();
    ConditionBundle resolved = apply_condition_dropout(bundle, dropout_rate, nulls, rng);

    ad::Var x_t = T.leaf(q_sample(x0, t, eps));
    ad::Var target = T.leaf(velocity_target(x0, eps, t));
    ad::Var pred = fwd(x_t, t, resolved);
    ad::Var loss = T.mse(pred, target);
    if (!loss->val.all_finite()) throw Error("training_loss: non-finite loss");
    return loss;
}

}  // namespace pfd2m
