#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "pflsim/rng.hpp"

namespace pflsim {

using Shape = std::vector<std::size_t>;

// Additive mask value for attention / softmax masking.
inline constexpr double kMaskNegInf = -1e9;

namespace detail {

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // materialized during backward, trainable paths only
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t numel() const { return data.size(); }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return shape.empty() ? 1 : numel() / cols(); }

    std::vector<double>& grad_buf() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

// Tape recording is on by default; evaluation paths switch it off.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

#ifndef NDEBUG
inline void check_finite(const char* op, const TensorImpl& t) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            assert(false && "non-finite value produced by forward op");
            throw std::runtime_error(std::string(op) + ": non-finite output");
        }
    }
}
#else
inline void check_finite(const char*, const TensorImpl&) {}
#endif

}  // namespace detail

class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense f64 tensor, row-major flat storage. Copies share the underlying
/// buffer; ops return fresh tensors recorded on the implicit tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw std::invalid_argument("Tensor: shape " + detail::shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
        for (auto d : shape)
            if (d == 0) throw std::invalid_argument("Tensor: zero dimension in shape " + detail::shape_str(shape));
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data(Shape{1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        return from_data(std::move(shape), rng.normal_vec(n, mean, stddev), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->numel(); }
    std::size_t rows() const { return impl_->rows(); }
    std::size_t cols() const { return impl_->cols(); }
    bool requires_grad() const { return impl_->requires_grad; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double item() const {
        if (numel() != 1) throw std::runtime_error("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient materialized");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    /// Same storage viewed under a different shape (numel must match).
    Tensor reshaped(Shape shape) const {
        if (detail::shape_numel(shape) != numel())
            throw std::invalid_argument("reshape: " + detail::shape_str(shape) + " incompatible with " +
                                        detail::shape_str(impl_->shape));
        if (!impl_->parents.empty() || impl_->backward_fn)
            throw std::runtime_error("reshape: only leaf tensors can be reshaped in place");
        auto impl = impl_;
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>(*impl);
        t.impl_->shape = std::move(shape);
        return t;
    }

    /// Detached copy of the values (fresh leaf, no grad).
    Tensor detached_copy() const { return from_data(impl_->shape, impl_->data, false); }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline Tensor make_op_output(Shape shape, std::vector<double> data,
                             std::vector<Tensor> parents,
                             std::function<void(TensorImpl&)> backward_fn) {
    bool any_rg = false;
    for (const auto& p : parents) any_rg = any_rg || p.requires_grad();
    Tensor out = Tensor::from_data(std::move(shape), std::move(data), false);
    check_finite("op", *out.impl());
    if (grad_enabled_flag() && any_rg) {
        out.impl()->requires_grad = true;
        auto& ps = out.impl()->parents;
        ps.reserve(parents.size());
        for (const auto& p : parents) ps.push_back(p.impl());
        out.impl()->backward_fn = std::move(backward_fn);
    }
    return out;
}

}  // namespace detail

/// Reverse-mode pass from a scalar root. Visits the recorded subgraph in
/// reverse topological order exactly once; gradient buffers appear only on
/// requires_grad tensors.
inline void backward(const Tensor& root) {
    if (root.numel() != 1) throw std::runtime_error("backward: root must be scalar");
    auto* r = root.impl().get();
    if (!r->requires_grad) throw std::runtime_error("backward: root does not require grad");

    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next;
    };
    std::vector<Frame> stack{{r, 0}};
    seen.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    r->grad_buf()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + detail::shape_str(a.shape()) +
                                    " vs " + detail::shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return detail::make_op_output(a.shape(), std::move(out), {a, b}, [](detail::TensorImpl& o) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *o.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

/// x [R,C] + row vector b [C], broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    const std::size_t r = x.rows(), c = x.cols();
    if (b.numel() != c)
        throw std::invalid_argument("add_rowvec: vector " + detail::shape_str(b.shape()) +
                                    " does not match columns of " + detail::shape_str(x.shape()));
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = px[i * c + j] + pb[j];
    return detail::make_op_output(x.shape(), std::move(out), {x, b}, [r, c](detail::TensorImpl& o) {
        auto& px = *o.parents[0];
        auto& pb = *o.parents[1];
        if (px.requires_grad) {
            auto& g = px.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buf();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    return detail::make_op_output(a.shape(), std::move(out), {a}, [c](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * o.grad[i];
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    {
        const double* __restrict pa = a.data().data();
        const double* __restrict pb = b.data().data();
        double* __restrict pc = out.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = pa[i * k + kk];
                const double* __restrict br = pb + kk * n;
                double* __restrict cr = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
    }
    return detail::make_op_output(Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorImpl& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const double* __restrict go = o.grad.data();
        if (pa.requires_grad) {
            // dA = dC * B^T, row-by-row dot products over contiguous rows.
            double* __restrict ga = pa.grad_buf().data();
            const double* __restrict vb = pb.data.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double* __restrict gr = go + i * n;
                    const double* __restrict br = vb + kk * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                    ga[i * k + kk] += acc;
                }
        }
        if (pb.requires_grad) {
            // dB = A^T * dC.
            double* __restrict gb = pb.grad_buf().data();
            const double* __restrict va = pa.data.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double av = va[i * k + kk];
                    const double* __restrict gr = go + i * n;
                    double* __restrict br = gb + kk * n;
                    for (std::size_t j = 0; j < n; ++j) br[j] += av * gr[j];
                }
        }
    });
}

/// Softmax over the last axis with optional additive mask (same shape as x,
/// or one row broadcast over all rows). Rows whose mask is entirely at the
/// large-negative sentinel are rejected.
inline Tensor softmax_lastdim(const Tensor& x, const std::optional<Tensor>& mask = std::nullopt) {
    const std::size_t r = x.rows(), c = x.cols();
    const double* pm = nullptr;
    bool mask_broadcast = false;
    if (mask) {
        if (mask->numel() == c && (mask->shape().size() == 1 || mask->rows() == 1)) {
            mask_broadcast = true;
        } else if (mask->shape() != x.shape()) {
            throw std::invalid_argument("softmax_lastdim: mask " + detail::shape_str(mask->shape()) +
                                        " not broadcastable to " + detail::shape_str(x.shape()));
        }
        pm = mask->data().data();
        for (std::size_t i = 0; i < (mask_broadcast ? 1 : r); ++i) {
            bool all_masked = true;
            for (std::size_t j = 0; j < c; ++j)
                if (pm[i * c + j] > -1e8) {
                    all_masked = false;
                    break;
                }
            if (all_masked) throw std::runtime_error("softmax_lastdim: fully masked row " + std::to_string(i));
        }
    }
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* mrow = pm ? (mask_broadcast ? pm : pm + i * c) : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            const double v = px[i * c + j] + (mrow ? mrow[j] : 0.0);
            mx = std::max(mx, v);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = std::exp(px[i * c + j] + (mrow ? mrow[j] : 0.0) - mx);
            out[i * c + j] = v;
            sum += v;
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
    }
    auto saved = out;  // softmax output reused in backward
    return detail::make_op_output(x.shape(), std::move(out), {x},
                                  [r, c, saved = std::move(saved)](detail::TensorImpl& o) {
                                      auto& p = *o.parents[0];
                                      if (!p.requires_grad) return;
                                      auto& g = p.grad_buf();
                                      for (std::size_t i = 0; i < r; ++i) {
                                          const double* s = saved.data() + i * c;
                                          const double* go = o.grad.data() + i * c;
                                          double dot = 0.0;
                                          for (std::size_t j = 0; j < c; ++j) dot += go[j] * s[j];
                                          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += s[j] * (go[j] - dot);
                                      }
                                  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("layer_norm: affine params " + detail::shape_str(gamma.shape()) + "/" +
                                    detail::shape_str(beta.shape()) + " do not match last dim of " +
                                    detail::shape_str(x.shape()));
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_sigma(r);
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += px[i * c + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = px[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (px[i * c + j] - mean) * is;
            xhat[i * c + j] = h;
            out[i * c + j] = h * pg[j] + pb[j];
        }
    }
    return detail::make_op_output(
        x.shape(), std::move(out), {x, gamma, beta},
        [r, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](detail::TensorImpl& o) {
            auto& px = *o.parents[0];
            auto& pg = *o.parents[1];
            auto& pb = *o.parents[2];
            const double* go = o.grad.data();
            if (pg.requires_grad) {
                auto& g = pg.grad_buf();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += go[i * c + j] * xhat[i * c + j];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buf();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += go[i * c + j];
            }
            if (px.requires_grad) {
                auto& g = px.grad_buf();
                const double* gam = pg.data.data();
                for (std::size_t i = 0; i < r; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = go[i * c + j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i * c + j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = go[i * c + j] * gam[j];
                        g[i * c + j] += inv_sigma[i] * (dxh - m1 - xhat[i * c + j] * m2);
                    }
                }
            }
        });
}

/// Concatenate along axis 0 (stack rows) or axis 1 (side by side); 2-D.
inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw std::invalid_argument("concat: expects rank-2 tensors");
    const std::size_t ar = a.shape()[0], ac = a.shape()[1];
    const std::size_t br = b.shape()[0], bc = b.shape()[1];
    if (axis == 0) {
        if (ac != bc)
            throw std::invalid_argument("concat axis 0: column mismatch " + detail::shape_str(a.shape()) + " vs " +
                                        detail::shape_str(b.shape()));
        std::vector<double> out;
        out.reserve(a.numel() + b.numel());
        out.insert(out.end(), a.data().begin(), a.data().end());
        out.insert(out.end(), b.data().begin(), b.data().end());
        return detail::make_op_output(Shape{ar + br, ac}, std::move(out), {a, b}, [na = a.numel()](detail::TensorImpl& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) {
                auto& g = pa.grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[na + i];
            }
        });
    }
    if (axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    if (ar != br)
        throw std::invalid_argument("concat axis 1: row mismatch " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    std::vector<double> out(ar * (ac + bc));
    for (std::size_t i = 0; i < ar; ++i) {
        std::copy_n(a.data().data() + i * ac, ac, out.data() + i * (ac + bc));
        std::copy_n(b.data().data() + i * bc, bc, out.data() + i * (ac + bc) + ac);
    }
    return detail::make_op_output(Shape{ar, ac + bc}, std::move(out), {a, b}, [ar, ac, bc](detail::TensorImpl& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t oc = ac + bc;
        if (pa.requires_grad) {
            auto& g = pa.grad_buf();
            for (std::size_t i = 0; i < ar; ++i)
                for (std::size_t j = 0; j < ac; ++j) g[i * ac + j] += o.grad[i * oc + j];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buf();
            for (std::size_t i = 0; i < ar; ++i)
                for (std::size_t j = 0; j < bc; ++j) g[i * bc + j] += o.grad[i * oc + ac + j];
        }
    });
}

/// Slice of rows [begin, end) in the 2-D row view (all leading axes flattened
/// against the last). Output shape {end-begin, cols}.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    const std::size_t r = x.rows(), c = x.cols();
    if (begin >= end || end > r)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") out of bounds for " + detail::shape_str(x.shape()));
    std::vector<double> out(x.data().begin() + begin * c, x.data().begin() + end * c);
    return detail::make_op_output(Shape{end - begin, c}, std::move(out), {x}, [begin, c](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * c + i] += o.grad[i];
    });
}

/// Mean over axis 0 (column means -> [C]) or axis 1 (row means -> [R]).
inline Tensor mean(const Tensor& x, int axis) {
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 0) {
        std::vector<double> out(c, 0.0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
        for (auto& v : out) v /= static_cast<double>(r);
        return detail::make_op_output(Shape{c}, std::move(out), {x}, [r, c](detail::TensorImpl& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            auto& g = p.grad_buf();
            const double inv = 1.0 / static_cast<double>(r);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j] * inv;
        });
    }
    if (axis != 1) throw std::invalid_argument("mean: axis must be 0 or 1");
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i] += x.data()[i * c + j];
        out[i] /= static_cast<double>(c);
    }
    return detail::make_op_output(Shape{r}, std::move(out), {x}, [r, c](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        const double inv = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i] * inv;
    });
}

/// Copying reshape recorded on the tape (identity backward).
inline Tensor reshape_copy(const Tensor& x, Shape shape) {
    if (detail::shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape_copy: " + detail::shape_str(shape) + " incompatible with " +
                                    detail::shape_str(x.shape()));
    std::vector<double> out = x.data();
    return detail::make_op_output(std::move(shape), std::move(out), {x}, [](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_op_output(Shape{1}, {s}, {x}, [](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        for (auto& v : g) v += o.grad[0];
    });
}

inline Tensor gelu(const Tensor& x) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
    return detail::make_op_output(x.shape(), std::move(out), {x}, [](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        const double* px = p.data.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(px[i] * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * px[i] * px[i]);
            g[i] += o.grad[i] * (cdf + px[i] * pdf);
        }
    });
}

/// Inverted-dropout mask, kept as an explicit object so the exact same mask
/// can be replayed (finite-difference checks evaluate f at p±eps under one
/// fixed mask).
struct DropoutMask {
    std::vector<double> factors;  // 0 or 1/keep per element

    static DropoutMask sample(std::size_t n, double rate, Rng& rng) {
        if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
        DropoutMask m;
        m.factors.resize(n);
        const double keep = 1.0 - rate;
        for (auto& f : m.factors) f = (rng.uniform() < rate) ? 0.0 : 1.0 / keep;
        return m;
    }

    static DropoutMask identity(std::size_t n) {
        DropoutMask m;
        m.factors.assign(n, 1.0);
        return m;
    }
};

inline Tensor dropout_apply(const Tensor& x, const DropoutMask& mask) {
    if (mask.factors.size() != x.numel()) throw std::invalid_argument("dropout_apply: mask size mismatch");
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * mask.factors[i];
    return detail::make_op_output(x.shape(), std::move(out), {x}, [f = mask.factors](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * f[i];
    });
}

inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool train) {
    if (!train || rate == 0.0) return dropout_apply(x, DropoutMask::identity(x.numel()));
    return dropout_apply(x, DropoutMask::sample(x.numel(), rate, rng));
}

/// Cosine similarity of the flattened tensors. Either argument all-zero
/// yields 0 by definition (constant, no gradient).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw std::invalid_argument("cosine_similarity: length mismatch " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += pa[i] * pb[i];
        na2 += pa[i] * pa[i];
        nb2 += pb[i] * pb[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) return Tensor::scalar(0.0);
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double cs = dot / (na * nb);
    return detail::make_op_output(Shape{1}, {cs}, {a, b}, [na, nb, cs](detail::TensorImpl& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const double go = o.grad[0];
        const double* va = pa.data.data();
        const double* vb = pb.data.data();
        if (pa.requires_grad) {
            auto& g = pa.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (vb[i] / (na * nb) - cs * va[i] / (na * na));
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (va[i] / (na * nb) - cs * vb[i] / (nb * nb));
        }
    });
}

inline Tensor l2_norm_squared(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return detail::make_op_output(Shape{1}, {s}, {x}, [](detail::TensorImpl& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buf();
        const double go = o.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.data[i] * go;
    });
}

}  // namespace pflsim
