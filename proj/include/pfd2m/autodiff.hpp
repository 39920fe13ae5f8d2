#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "pfd2m/tensor.hpp"

namespace pfd2m::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    std::vector<Var> parents;
    std::function<void(Node&)> backward;
};

// Reverse-mode tape. Nodes are recorded in creation order, which is already
// topological, so backward() is a single reverse sweep. With grads disabled
// the tape degenerates to plain forward evaluation.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor t) {
        auto n = std::make_shared<Node>();
        n->val = std::move(t);
        if (grad_enabled_) n->grad = Tensor(n->val.rows, n->val.cols);
        order_.push_back(n);
        return n;
    }

    void backward(const Var& loss) {
        if (!grad_enabled_) throw Error("backward on a grad-disabled tape");
        loss->grad = Tensor::full(loss->val.rows, loss->val.cols, 1.0);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it)
            if ((*it)->backward) (*it)->backward(**it);
    }

    size_t node_count() const { return order_.size(); }

    // --- ops ---

    Var add(Var a, Var b) {
        Tensor out = pfd2m::add(a->val, b->val);
        return make(std::move(out), {a, b}, [](Node& n) {
            axpy(1.0, n.grad, n.parents[0]->grad);
            axpy(1.0, n.grad, n.parents[1]->grad);
        });
    }

    Var sub(Var a, Var b) {
        Tensor out = pfd2m::sub(a->val, b->val);
        return make(std::move(out), {a, b}, [](Node& n) {
            axpy(1.0, n.grad, n.parents[0]->grad);
            axpy(-1.0, n.grad, n.parents[1]->grad);
        });
    }

    // a [R x C] + row [1 x C] broadcast over rows
    Var add_row_broadcast(Var a, Var row) {
        Tensor out = a->val;
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) out.at(r, c) += row->val.at(0, c);
        return make(std::move(out), {a, row}, [](Node& n) {
            axpy(1.0, n.grad, n.parents[0]->grad);
            Tensor& gr = n.parents[1]->grad;
            for (int r = 0; r < n.grad.rows; ++r)
                for (int c = 0; c < n.grad.cols; ++c) gr.at(0, c) += n.grad.at(r, c);
        });
    }

    Var hadamard(Var a, Var b) {
        Tensor out = pfd2m::hadamard(a->val, b->val);
        return make(std::move(out), {a, b}, [](Node& n) {
            const Tensor& av = n.parents[0]->val;
            const Tensor& bv = n.parents[1]->val;
            for (int i = 0; i < n.grad.size(); ++i) {
                n.parents[0]->grad.v[i] += n.grad.v[i] * bv.v[i];
                n.parents[1]->grad.v[i] += n.grad.v[i] * av.v[i];
            }
        });
    }

    Var scale(Var a, double s) {
        Tensor out = pfd2m::scale(a->val, s);
        return make(std::move(out), {a}, [s](Node& n) {
            axpy(s, n.grad, n.parents[0]->grad);
        });
    }

    Var matmul(Var a, Var b) {
        Tensor out = pfd2m::matmul(a->val, b->val);
        return make(std::move(out), {a, b}, [](Node& n) {
            axpy(1.0, pfd2m::matmul_nt(n.grad, n.parents[1]->val), n.parents[0]->grad);
            axpy(1.0, pfd2m::matmul_tn(n.parents[0]->val, n.grad), n.parents[1]->grad);
        });
    }

    // a [m x k] * b^T with b [n x k]
    Var matmul_nt(Var a, Var b) {
        Tensor out = pfd2m::matmul_nt(a->val, b->val);
        return make(std::move(out), {a, b}, [](Node& n) {
            axpy(1.0, pfd2m::matmul(n.grad, n.parents[1]->val), n.parents[0]->grad);
            axpy(1.0, pfd2m::matmul_tn(n.grad, n.parents[0]->val), n.parents[1]->grad);
        });
    }

    // y = x W^T + b with x [L x in], w [out x in], b [1 x out]
    Var linear(Var x, Var w, Var b) { return add_row_broadcast(matmul_nt(x, w), b); }

    // per-row normalization, no affine part
    Var layer_norm(Var x, double eps = 1e-6) {
        const Tensor& xv = x->val;
        Tensor out(xv.rows, xv.cols);
        auto inv_std = std::make_shared<std::vector<double>>(xv.rows);
        const int c = xv.cols;
        for (int r = 0; r < xv.rows; ++r) {
            double mean = 0.0;
            for (int j = 0; j < c; ++j) mean += xv.at(r, j);
            mean /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) {
                const double d = xv.at(r, j) - mean;
                var += d * d;
            }
            var /= c;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (int j = 0; j < c; ++j) out.at(r, j) = (xv.at(r, j) - mean) * is;
        }
        Tensor saved = out;
        return make(std::move(out), {x}, [inv_std, saved](Node& n) {
            const int cc = saved.cols;
            for (int r = 0; r < saved.rows; ++r) {
                double gm = 0.0, gym = 0.0;
                for (int j = 0; j < cc; ++j) {
                    gm += n.grad.at(r, j);
                    gym += n.grad.at(r, j) * saved.at(r, j);
                }
                gm /= cc;
                gym /= cc;
                for (int j = 0; j < cc; ++j)
                    n.parents[0]->grad.at(r, j) +=
                        (*inv_std)[r] * (n.grad.at(r, j) - gm - saved.at(r, j) * gym);
            }
        });
    }

    Var softmax_rows(Var x) {
        const Tensor& xv = x->val;
        Tensor out(xv.rows, xv.cols);
        for (int r = 0; r < xv.rows; ++r) {
            double mx = xv.at(r, 0);
            for (int j = 1; j < xv.cols; ++j) mx = std::max(mx, xv.at(r, j));
            double sum = 0.0;
            for (int j = 0; j < xv.cols; ++j) {
                out.at(r, j) = std::exp(xv.at(r, j) - mx);
                sum += out.at(r, j);
            }
            for (int j = 0; j < xv.cols; ++j) out.at(r, j) /= sum;
        }
        Tensor saved = out;
        return make(std::move(out), {x}, [saved](Node& n) {
            for (int r = 0; r < saved.rows; ++r) {
                double dot = 0.0;
                for (int j = 0; j < saved.cols; ++j) dot += n.grad.at(r, j) * saved.at(r, j);
                for (int j = 0; j < saved.cols; ++j)
                    n.parents[0]->grad.at(r, j) += saved.at(r, j) * (n.grad.at(r, j) - dot);
            }
        });
    }

    Var gelu(Var x) {
        const Tensor& xv = x->val;
        Tensor out(xv.rows, xv.cols);
        for (int i = 0; i < xv.size(); ++i)
            out.v[i] = 0.5 * xv.v[i] * (1.0 + std::erf(xv.v[i] * 0.7071067811865475));
        return make(std::move(out), {x}, [](Node& n) {
            const Tensor& xin = n.parents[0]->val;
            constexpr double inv_sqrt2 = 0.7071067811865475;
            constexpr double inv_sqrt2pi = 0.3989422804014327;
            for (int i = 0; i < xin.size(); ++i) {
                const double xi = xin.v[i];
                const double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
                n.parents[0]->grad.v[i] += n.grad.v[i] * (cdf + xi * pdf);
            }
        });
    }

    Var concat_rows(Var a, Var b) {
        assert(a->val.cols == b->val.cols);
        Tensor out(a->val.rows + b->val.rows, a->val.cols);
        std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
        std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.size());
        return make(std::move(out), {a, b}, [](Node& n) {
            Tensor& ga = n.parents[0]->grad;
            Tensor& gb = n.parents[1]->grad;
            for (int i = 0; i < ga.size(); ++i) ga.v[i] += n.grad.v[i];
            for (int i = 0; i < gb.size(); ++i) gb.v[i] += n.grad.v[ga.size() + i];
        });
    }

    Var slice_rows(Var a, int r0, int r1) {
        assert(0 <= r0 && r0 < r1 && r1 <= a->val.rows);
        Tensor out(r1 - r0, a->val.cols);
        std::copy(a->val.row(r0), a->val.row(r0) + out.size(), out.v.data());
        return make(std::move(out), {a}, [r0](Node& n) {
            double* dst = n.parents[0]->grad.row(r0);
            for (int i = 0; i < n.grad.size(); ++i) dst[i] += n.grad.v[i];
        });
    }

    Var slice_cols(Var a, int c0, int c1) {
        assert(0 <= c0 && c0 < c1 && c1 <= a->val.cols);
        Tensor out(a->val.rows, c1 - c0);
        for (int r = 0; r < out.rows; ++r)
            std::copy(a->val.row(r) + c0, a->val.row(r) + c1, out.row(r));
        return make(std::move(out), {a}, [c0](Node& n) {
            for (int r = 0; r < n.grad.rows; ++r) {
                double* dst = n.parents[0]->grad.row(r) + c0;
                const double* src = n.grad.row(r);
                for (int j = 0; j < n.grad.cols; ++j) dst[j] += src[j];
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        assert(!parts.empty());
        int cols = 0;
        for (const auto& p : parts) cols += p->val.cols;
        Tensor out(parts[0]->val.rows, cols);
        int off = 0;
        for (const auto& p : parts) {
            for (int r = 0; r < out.rows; ++r)
                std::copy(p->val.row(r), p->val.row(r) + p->val.cols, out.row(r) + off);
            off += p->val.cols;
        }
        return make(std::move(out), parts, [](Node& n) {
            int o = 0;
            for (auto& p : n.parents) {
                for (int r = 0; r < n.grad.rows; ++r) {
                    const double* src = n.grad.row(r) + o;
                    double* dst = p->grad.row(r);
                    for (int j = 0; j < p->grad.cols; ++j) dst[j] += src[j];
                }
                o += p->val.cols;
            }
        });
    }

    Var gather_rows(Var table, std::vector<int> ids) {
        Tensor out(int(ids.size()), table->val.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            assert(ids[i] >= 0 && ids[i] < table->val.rows);
            std::copy(table->val.row(ids[i]), table->val.row(ids[i]) + table->val.cols,
                      out.row(int(i)));
        }
        return make(std::move(out), {table}, [ids = std::move(ids)](Node& n) {
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = n.parents[0]->grad.row(ids[i]);
                const double* src = n.grad.row(int(i));
                for (int j = 0; j < n.grad.cols; ++j) dst[j] += src[j];
            }
        });
    }

    Var transpose(Var a) {
        Tensor out = pfd2m::transpose(a->val);
        return make(std::move(out), {a}, [](Node& n) {
            Tensor gt = pfd2m::transpose(n.grad);
            axpy(1.0, gt, n.parents[0]->grad);
        });
    }

    Var upsample_rows(Var a, int out_rows) {
        Tensor out = upsample_rows_nearest(a->val, out_rows);
        const int in_rows = a->val.rows;
        return make(std::move(out), {a}, [in_rows](Node& n) {
            for (int i = 0; i < n.grad.rows; ++i) {
                double* dst = n.parents[0]->grad.row(upsample_index(i, in_rows, n.grad.rows));
                const double* src = n.grad.row(i);
                for (int j = 0; j < n.grad.cols; ++j) dst[j] += src[j];
            }
        });
    }

    // y = x (1 + s) + b elementwise; used as the AdaLN affine step
    Var modulate(Var x, Var s, Var b) {
        assert(x->val.same_shape(s->val) && x->val.same_shape(b->val));
        Tensor out(x->val.rows, x->val.cols);
        for (int i = 0; i < out.size(); ++i)
            out.v[i] = x->val.v[i] * (1.0 + s->val.v[i]) + b->val.v[i];
        return make(std::move(out), {x, s, b}, [](Node& n) {
            const Tensor& xv = n.parents[0]->val;
            const Tensor& sv = n.parents[1]->val;
            for (int i = 0; i < n.grad.size(); ++i) {
                n.parents[0]->grad.v[i] += n.grad.v[i] * (1.0 + sv.v[i]);
                n.parents[1]->grad.v[i] += n.grad.v[i] * xv.v[i];
                n.parents[2]->grad.v[i] += n.grad.v[i];
            }
        });
    }

    Var conv1d_same(Var x, Var w, Var b, int k) {
        Tensor out = pfd2m::conv1d_same(x->val, w->val, b->val, k);
        return make(std::move(out), {x, w, b}, [k](Node& n) {
            const Tensor& xv = n.parents[0]->val;
            const Tensor& wv = n.parents[1]->val;
            Tensor& gx = n.parents[0]->grad;
            Tensor& gw = n.parents[1]->grad;
            Tensor& gb = n.parents[2]->grad;
            const int c_in = xv.cols;
            const int c_out = wv.rows;
            const int off = (k - 1) / 2;
            for (int t = 0; t < xv.rows; ++t) {
                for (int co = 0; co < c_out; ++co) {
                    const double g = n.grad.at(t, co);
                    gb.at(0, co) += g;
                    for (int j = 0; j < k; ++j) {
                        const int src = t + j - off;
                        if (src < 0 || src >= xv.rows) continue;
                        for (int ci = 0; ci < c_in; ++ci) {
                            gw.at(co, j * c_in + ci) += g * xv.at(src, ci);
                            gx.at(src, ci) += g * wv.at(co, j * c_in + ci);
                        }
                    }
                }
            }
        });
    }

    // mean of squared entries of (a - b), scalar output
    Var mse(Var a, Var b) {
        Var d = sub(a, b);
        const double inv_n = 1.0 / d->val.size();
        double acc = 0.0;
        for (double x : d->val.v) acc += x * x;
        Tensor out(1, 1);
        out.at(0, 0) = acc * inv_n;
        return make(std::move(out), {d}, [inv_n](Node& n) {
            const double g = 2.0 * inv_n * n.grad.at(0, 0);
            const Tensor& dv = n.parents[0]->val;
            for (int i = 0; i < dv.size(); ++i) n.parents[0]->grad.v[i] += g * dv.v[i];
        });
    }

    Var add_scalar(Var a, Var b) {  // both 1x1
        Tensor out(1, 1);
        out.at(0, 0) = a->val.at(0, 0) + b->val.at(0, 0);
        return make(std::move(out), {a, b}, [](Node& n) {
            n.parents[0]->grad.at(0, 0) += n.grad.at(0, 0);
            n.parents[1]->grad.at(0, 0) += n.grad.at(0, 0);
        });
    }

private:
    Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bw) {
        auto n = std::make_shared<Node>();
        n->val = std::move(val);
        if (grad_enabled_) {
            n->grad = Tensor(n->val.rows, n->val.cols);
            n->parents = std::move(parents);
            n->backward = std::move(bw);
        }
        order_.push_back(n);
        return n;
    }

    std::vector<Var> order_;
    bool grad_enabled_;
};

}  // namespace pfd2m::ad
