#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include "genir/numerics/ops.hpp"
#include "genir/numerics/tensor.hpp"

namespace genir {

/// Reverse-mode differentiation over whole-tensor operations.
///
/// A tape records one forward computation. Parameters enter as leaves that
/// reference caller-owned storage (no copy) and deposit their gradients into a
/// caller-owned sink, so many tapes can share one parameter set while each
/// accumulates into its own gradient buffer. A tape is single-use and must not
/// be shared between threads.
template <class T>
class Tape {
public:
    struct Var {
        std::uint32_t id = 0;
    };

    Tape() { nodes_.reserve(512); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var parameter(const Tensor<T>& value, Tensor<T>& grad_sink) {
        if (!value.same_shape(grad_sink)) throw ShapeError("parameter/grad sink shape mismatch");
        Node n;
        n.external = &value;
        n.sink = &grad_sink;
        return push(std::move(n));
    }

    Var constant(Tensor<T> value) {
        Node n;
        n.owned = std::move(value);
        n.is_constant = true;
        return push(std::move(n));
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.owned;
    }

    T scalar(Var v) const { return value(v)[0]; }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// a * w^T
    Var matmul_nt(Var a, Var w) {
        Tensor<T> out = genir::matmul_nt(value(a), value(w));
        return record(std::move(out), [a, w](Tape& t, const Tensor<T>& g) {
            // d a = g * w ; d w = g^T * a
            if (t.needs_grad(a)) {
                Tensor<T>& ga = t.grad_ref(a);
                const Tensor<T>& wv = t.value(w);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    T* gai = ga.row(i).data();
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                        const T gij = g(i, j);
                        if (gij == T{0}) continue;
                        const T* wj = wv.row(j).data();
                        const std::size_t k = wv.cols();
#pragma omp simd
                        for (std::size_t p = 0; p < k; ++p) gai[p] += gij * wj[p];
                    }
                }
            }
            if (t.needs_grad(w)) matmul_tn_acc(g, t.value(a), t.grad_ref(w));
        });
    }

    /// a * b
    Var matmul(Var a, Var b) {
        Tensor<T> out = genir::matmul(value(a), value(b));
        return record(std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
            // d a = g * b^T ; d b = a^T * g
            if (t.needs_grad(a)) t.grad_ref(a) += genir::matmul_nt(g, t.value(b));
            if (t.needs_grad(b)) matmul_tn_acc(t.value(a), g, t.grad_ref(b));
        });
    }

    Var add(Var a, Var b) {
        Tensor<T> out = value(a) + value(b);
        return record(std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
            if (t.needs_grad(a)) t.grad_ref(a) += g;
            if (t.needs_grad(b)) t.grad_ref(b) += g;
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = value(a) * s;
        return record(std::move(out), [a, s](Tape& t, const Tensor<T>& g) {
            if (!t.needs_grad(a)) return;
            Tensor<T>& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    Var mul_const(Var a, Tensor<T> m) {
        const Tensor<T>& x = value(a);
        if (m.rows() != x.rows() || m.cols() != x.cols()) throw ShapeError("mul_const shape mismatch");
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * m[i];
        return record(std::move(out), [a, m = std::move(m)](Tape& t, const Tensor<T>& g) {
            if (!t.needs_grad(a)) return;
            Tensor<T>& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += m[i] * g[i];
        });
    }

    Var relu(Var a) {
        Tensor<T> out = genir::relu(value(a));
        return record(std::move(out), [a](Tape& t, const Tensor<T>& g) {
            if (!t.needs_grad(a)) return;
            const Tensor<T>& x = t.value(a);
            Tensor<T>& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (x[i] > T{0}) ga[i] += g[i];
            }
        });
    }

    /// Row-wise RMS normalization with gain (1 x cols).
    Var rms_norm(Var x, Var gain) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& gv = value(gain);
        if (gv.size() != xv.cols()) throw ShapeError("rms_norm gain length mismatch");
        Tensor<T> out(xv.rows(), xv.cols());
        std::vector<T> inv(xv.rows());
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            inv[r] = inverse_rms(xv.row(r));
            auto o = out.row(r);
            const auto xr = xv.row(r);
            for (std::size_t c = 0; c < xv.cols(); ++c) o[c] = xr[c] * inv[r] * gv[c];
        }
        return record(std::move(out), [x, gain, inv = std::move(inv)](Tape& t, const Tensor<T>& g) {
            const Tensor<T>& xv = t.value(x);
            const Tensor<T>& gv = t.value(gain);
            Tensor<T> dx_local(xv.rows(), xv.cols());
            Tensor<T> dg_local(1, xv.cols());
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                rms_norm_row_backward<T>(xv.row(r), gv.flat(), inv[r], g.row(r), dx_local.row(r),
                                         dg_local.flat());
            }
            if (t.needs_grad(x)) t.grad_ref(x) += dx_local;
            if (t.needs_grad(gain)) t.grad_ref(gain) += dg_local;
        });
    }

    /// Row-wise softmax of scale * s.
    Var softmax_rows(Var s, T scale) {
        Tensor<T> out = scaled_softmax(value(s), scale);
        return record(std::move(out), [s, scale](Tape& t, const Tensor<T>& g, const Tensor<T>& y) {
            if (!t.needs_grad(s)) return;
            Tensor<T>& gs = t.grad_ref(s);
            for (std::size_t r = 0; r < y.rows(); ++r) {
                const auto yr = y.row(r);
                const auto gr = g.row(r);
                T inner{0};
                for (std::size_t c = 0; c < y.cols(); ++c) inner += yr[c] * gr[c];
                auto out = gs.row(r);
                for (std::size_t c = 0; c < y.cols(); ++c) out[c] += scale * yr[c] * (gr[c] - inner);
            }
        });
    }

    /// Rows `ids` of `table`, in order.
    Var gather_rows(Var table, std::vector<std::size_t> ids) {
        const Tensor<T>& tv = value(table);
        Tensor<T> out(ids.size(), tv.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= tv.rows()) throw std::out_of_range("gather_rows index out of range");
            const auto src = tv.row(ids[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return record(std::move(out), [table, ids = std::move(ids)](Tape& t, const Tensor<T>& g) {
            if (!t.needs_grad(table)) return;
            Tensor<T>& gt = t.grad_ref(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                auto dst = gt.row(ids[i]);
                const auto src = g.row(i);
                for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
            }
        });
    }

    /// Columns [begin, begin + width).
    Var slice_cols(Var x, std::size_t begin, std::size_t width) {
        const Tensor<T>& xv = value(x);
        if (begin + width > xv.cols()) throw ShapeError("slice_cols out of range");
        Tensor<T> out(xv.rows(), width);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            const auto src = xv.row(r).subspan(begin, width);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
        return record(std::move(out), [x, begin, width](Tape& t, const Tensor<T>& g) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_ref(x);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < width; ++c) gx(r, begin + c) += g(r, c);
            }
        });
    }

    /// Horizontal concatenation of equally tall blocks.
    Var concat_cols(std::vector<Var> parts) {
        if (parts.empty()) throw ShapeError("concat_cols of nothing");
        const std::size_t rows = value(parts[0]).rows();
        std::size_t cols = 0;
        for (Var p : parts) {
            if (value(p).rows() != rows) throw ShapeError("concat_cols row mismatch");
            cols += value(p).cols();
        }
        Tensor<T> out(rows, cols);
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor<T>& pv = value(p);
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + off);
            }
            off += pv.cols();
        }
        return record(std::move(out), [parts = std::move(parts)](Tape& t, const Tensor<T>& g) {
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t w = t.value(p).cols();
                if (t.needs_grad(p)) {
                    Tensor<T>& gp = t.grad_ref(p);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
                    }
                }
                off += w;
            }
        });
    }

    /// -log softmax(logits)[target] for a single row of logits; result is 1 x 1.
    Var cross_entropy(Var logits, std::size_t target) {
        const Tensor<T>& lv = value(logits);
        if (lv.rows() != 1) throw ShapeError("cross_entropy expects a single row of logits");
        if (target >= lv.cols()) throw std::out_of_range("cross_entropy target outside vocabulary");
        Tensor<T> p = lv;
        scaled_softmax_inplace(p.row(0), T{1});
        T mx = lv[0];
        for (T v : lv.flat()) mx = std::max(mx, v);
        T lse{0};
        for (T v : lv.flat()) lse += std::exp(v - mx);
        const T loss = std::log(lse) + mx - lv[target];
        return record(Tensor<T>(1, 1, loss),
                      [logits, target, p = std::move(p)](Tape& t, const Tensor<T>& g) {
                          if (!t.needs_grad(logits)) return;
                          Tensor<T>& gl = t.grad_ref(logits);
                          const T s = g[0];
                          for (std::size_t i = 0; i < p.size(); ++i) gl[i] += s * p[i];
                          gl[target] -= s;
                      });
    }

    /// Seeds d root / d root = 1 and propagates to every parameter sink.
    void backward(Var root) {
        if (value(root).size() != 1) throw ShapeError("backward root must be a scalar");
        grad_ref(root).fill(T{1});
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || !n.has_grad) continue;
            n.backward(*this, n.grad, n.owned);
        }
    }

private:
    using Backward = std::function<void(Tape&, const Tensor<T>&, const Tensor<T>&)>;

    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T>* sink = nullptr;
        Tensor<T> grad;
        Backward backward;
        bool has_grad = false;
        bool is_constant = false;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    template <class F>
    Var record(Tensor<T> out, F&& fn) {
        Node n;
        n.owned = std::move(out);
        if constexpr (std::is_invocable_v<F, Tape&, const Tensor<T>&, const Tensor<T>&>) {
            n.backward = std::forward<F>(fn);
        } else {
            n.backward = [f = std::forward<F>(fn)](Tape& t, const Tensor<T>& g, const Tensor<T>&) {
                f(t, g);
            };
        }
        return push(std::move(n));
    }

    bool needs_grad(Var v) const { return !nodes_[v.id].is_constant; }

    Tensor<T>& grad_ref(Var v) {
        Node& n = nodes_[v.id];
        if (n.sink) return *n.sink;
        if (!n.has_grad) {
            const Tensor<T>& val = n.external ? *n.external : n.owned;
            n.grad = Tensor<T>(val.rows(), val.cols());
            n.has_grad = true;
        }
        return n.grad;
    }

    std::vector<Node> nodes_;
};

}  // namespace genir
