#include "transnetr/nn_ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace transnetr {

namespace {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T, class Fn>
void record_op(const TensorT<T>& out, Fn&& fn) {
    if (out.requires_grad()) {
        if (auto* tape = TapeT<T>::current()) {
            tape->record(out.node(), std::forward<Fn>(fn));
        }
    }
}

template <class T>
TensorT<T> finish(const char* op, Shape shape, std::vector<T> data, bool requires_grad) {
    ensure_finite(op, data);
    return TensorT<T>::from_vector(std::move(shape), std::move(data), requires_grad);
}

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

}  // namespace

// C[m x p] += Aop[m x k] . Bop[k x p]; transpose flags refer to the stored layout.
template <class T>
void matmul_accumulate(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t p,
                       bool transpose_a, bool transpose_b) {
    Eigen::Map<const MatRM<T>> ma(a, transpose_a ? k : m, transpose_a ? m : k);
    Eigen::Map<const MatRM<T>> mb(b, transpose_b ? p : k, transpose_b ? k : p);
    Eigen::Map<MatRM<T>> mc(c, m, p);
    if (!transpose_a && !transpose_b) {
        mc.noalias() += ma * mb;
    } else if (!transpose_a && transpose_b) {
        mc.noalias() += ma * mb.transpose();
    } else if (transpose_a && !transpose_b) {
        mc.noalias() += ma.transpose() * mb;
    } else {
        mc.noalias() += ma.transpose() * mb.transpose();
    }
}

template void matmul_accumulate<float>(const float*, const float*, float*, std::int64_t, std::int64_t,
                                       std::int64_t, bool, bool);
template void matmul_accumulate<double>(const double*, const double*, double*, std::int64_t, std::int64_t,
                                        std::int64_t, bool, bool);

// ------------------------------------------------------------------ activation

template <class T>
TensorT<T> activation(const TensorT<T>& x, Activation kind, T negative_slope) {
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    switch (kind) {
        case Activation::Relu:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] >= T(0) ? xv[i] : T(0);
            break;
        case Activation::LeakyRelu:
            for (std::size_t i = 0; i < xv.size(); ++i) {
                out[i] = xv[i] >= T(0) ? xv[i] : negative_slope * xv[i];
            }
            break;
        case Activation::Sigmoid: {
            // Output is pinned strictly inside (0,1) even where exp underflows.
            const T lo = std::numeric_limits<T>::denorm_min();
            const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const T v = xv[i];
                T y;
                if (v >= T(0)) {
                    const T e = std::exp(-v);
                    y = T(1) / (T(1) + e);
                } else {
                    const T e = std::exp(v);
                    y = e / (T(1) + e);
                }
                out[i] = std::min(hi, std::max(lo, y));
            }
            break;
        }
    }
    auto r = finish("activation", x.shape(), std::move(out), x.requires_grad());
    if (kind == Activation::Sigmoid) {
        record_op(r, [xn = x.node(), yn = r.node()](const std::vector<T>& go) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) {
                const T y = yn->data[i];
                g[i] = go[i] * y * (T(1) - y);
            }
            xn->accumulate(g.data(), g.size());
        });
    } else {
        // Right-hand derivative at 0: slope 1 for both relu and leaky_relu.
        const T neg = kind == Activation::Relu ? T(0) : negative_slope;
        record_op(r, [xn = x.node(), neg](const std::vector<T>& go) {
            std::vector<T> g(go.size());
            for (std::size_t i = 0; i < go.size(); ++i) {
                g[i] = xn->data[i] >= T(0) ? go[i] : neg * go[i];
            }
            xn->accumulate(g.data(), g.size());
        });
    }
    return r;
}

// ------------------------------------------------------------------ conv2d

namespace {

struct ConvGeom {
    std::int64_t n, c, h, w;
    std::int64_t o, kh, kw;
    std::int64_t oh, ow;
    int stride, padding;
    std::int64_t k() const { return c * kh * kw; }
    std::int64_t cols() const { return oh * ow; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <class T>
ConvGeom conv_geometry(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                       int stride, int padding) {
    if (input.rank() != 4 || weight.rank() != 4) {
        throw std::invalid_argument("conv2d: expected NCHW input and OIKhKw weight, got " +
                                    shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    ConvGeom g{};
    g.n = input.dim(0);
    g.c = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.o = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = stride;
    g.padding = padding;
    if (weight.dim(1) != g.c) {
        throw std::invalid_argument("conv2d: input channels do not match weight, input " +
                                    shape_str(input.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
        throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                    " does not match output channels of weight " +
                                    shape_str(weight.shape()));
    }
    g.oh = conv_out_extent(g.h, g.kh, stride, padding);
    g.ow = conv_out_extent(g.w, g.kw, stride, padding);
    if (g.oh < 1 || g.ow < 1) {
        throw std::invalid_argument("conv2d: kernel " + shape_str(weight.shape()) +
                                    " does not fit padded input " + shape_str(input.shape()));
    }
    return g;
}

// Valid output range [o0, o1) for which i = o*stride + k - padding stays inside [0, extent).
inline void valid_out_range(std::int64_t k, std::int64_t extent, std::int64_t out_extent, int stride,
                            int padding, std::int64_t& o0, std::int64_t& o1) {
    const std::int64_t off = k - padding;
    std::int64_t lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    std::int64_t hi = out_extent;
    const std::int64_t max_i = extent - 1 - off;
    if (max_i < 0) {
        o0 = o1 = 0;
        return;
    }
    hi = std::min<std::int64_t>(out_extent, max_i / stride + 1);
    o0 = std::min(lo, hi);
    o1 = hi;
}

template <class T>
void im2col_plane(const T* in, const ConvGeom& g, T* col) {
    const std::int64_t cols = g.cols();
    for (std::int64_t c = 0; c < g.c; ++c) {
        const T* plane = in + c * g.h * g.w;
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
            for (std::int64_t kw = 0; kw < g.kw; ++kw) {
                T* row = col + ((c * g.kh + kh) * g.kw + kw) * cols;
                std::int64_t ow0, ow1;
                valid_out_range(kw, g.w, g.ow, g.stride, g.padding, ow0, ow1);
                for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                    T* dst = row + oh * g.ow;
                    const std::int64_t ih = oh * g.stride + kh - g.padding;
                    if (ih < 0 || ih >= g.h) {
                        std::fill_n(dst, g.ow, T(0));
                        continue;
                    }
                    const T* src = plane + ih * g.w + kw - g.padding;
                    std::fill_n(dst, ow0, T(0));
                    for (std::int64_t ow = ow0; ow < ow1; ++ow) dst[ow] = src[ow * g.stride];
                    std::fill_n(dst + ow1, g.ow - ow1, T(0));
                }
            }
        }
    }
}

template <class T>
void col2im_plane(const T* col, const ConvGeom& g, T* din) {
    const std::int64_t cols = g.cols();
    for (std::int64_t c = 0; c < g.c; ++c) {
        T* plane = din + c * g.h * g.w;
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
            for (std::int64_t kw = 0; kw < g.kw; ++kw) {
                const T* row = col + ((c * g.kh + kh) * g.kw + kw) * cols;
                std::int64_t ow0, ow1;
                valid_out_range(kw, g.w, g.ow, g.stride, g.padding, ow0, ow1);
                for (std::int64_t oh = 0; oh < g.oh; ++oh) {
                    const std::int64_t ih = oh * g.stride + kh - g.padding;
                    if (ih < 0 || ih >= g.h) continue;
                    const T* src = row + oh * g.ow;
                    T* dst = plane + ih * g.w + kw - g.padding;
                    for (std::int64_t ow = ow0; ow < ow1; ++ow) dst[ow * g.stride] += src[ow];
                }
            }
        }
    }
}

}  // namespace

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding) {
    const ConvGeom g = conv_geometry(input, weight, bias, stride, padding);
    const std::int64_t cols = g.cols();
    const std::int64_t plane_in = g.c * g.h * g.w;
    const std::int64_t plane_out = g.o * cols;

    const auto& in = input.values();
    const auto& wv = weight.values();
    std::vector<T> out(static_cast<std::size_t>(g.n * plane_out), T(0));
    std::vector<T> col;
    if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.k() * cols));

    for (std::int64_t n = 0; n < g.n; ++n) {
        const T* src = in.data() + n * plane_in;
        const T* cptr = src;
        if (!g.pointwise()) {
            im2col_plane(src, g, col.data());
            cptr = col.data();
        }
        matmul_accumulate(wv.data(), cptr, out.data() + n * plane_out, g.o, g.k(), cols, false, false);
    }
    if (bias.defined()) {
        const auto& bv = bias.values();
        for (std::int64_t n = 0; n < g.n; ++n) {
            for (std::int64_t o = 0; o < g.o; ++o) {
                T* row = out.data() + n * plane_out + o * cols;
                const T b = bv[static_cast<std::size_t>(o)];
                for (std::int64_t i = 0; i < cols; ++i) row[i] += b;
            }
        }
    }

    const bool needs_grad = input.requires_grad() || weight.requires_grad() ||
                            (bias.defined() && bias.requires_grad());
    auto r = finish("conv2d", Shape{g.n, g.o, g.oh, g.ow}, std::move(out), needs_grad);
    record_op(r, [xn = input.node(), wn = weight.node(),
                  bn = bias.defined() ? bias.node() : nullptr, g](const std::vector<T>& go) {
        const std::int64_t cols = g.cols();
        const std::int64_t plane_in = g.c * g.h * g.w;
        const std::int64_t plane_out = g.o * cols;
        std::vector<T> col;
        if (!g.pointwise() && (wn->requires_grad || xn->requires_grad)) {
            col.resize(static_cast<std::size_t>(g.k() * cols));
        }
        std::vector<T> dw;
        if (wn->requires_grad) dw.assign(wn->data.size(), T(0));
        std::vector<T> dx;
        if (xn->requires_grad) dx.assign(xn->data.size(), T(0));
        std::vector<T> dcol;
        if (xn->requires_grad && !g.pointwise()) dcol.resize(static_cast<std::size_t>(g.k() * cols));

        for (std::int64_t n = 0; n < g.n; ++n) {
            const T* go_plane = go.data() + n * plane_out;
            if (wn->requires_grad) {
                const T* cptr = xn->data.data() + n * plane_in;
                if (!g.pointwise()) {
                    im2col_plane(xn->data.data() + n * plane_in, g, col.data());
                    cptr = col.data();
                }
                matmul_accumulate(go_plane, cptr, dw.data(), g.o, cols, g.k(), false, true);
            }
            if (xn->requires_grad) {
                if (g.pointwise()) {
                    matmul_accumulate(wn->data.data(), go_plane, dx.data() + n * plane_in, g.k(), g.o,
                                      cols, true, false);
                } else {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    matmul_accumulate(wn->data.data(), go_plane, dcol.data(), g.k(), g.o, cols, true,
                                      false);
                    col2im_plane(dcol.data(), g, dx.data() + n * plane_in);
                }
            }
        }
        if (wn->requires_grad) wn->accumulate(dw.data(), dw.size());
        if (xn->requires_grad) xn->accumulate(dx.data(), dx.size());
        if (bn && bn->requires_grad) {
            std::vector<T> db(bn->data.size(), T(0));
            for (std::int64_t n = 0; n < g.n; ++n) {
                for (std::int64_t o = 0; o < g.o; ++o) {
                    const T* row = go.data() + n * plane_out + o * cols;
                    T acc = 0;
                    for (std::int64_t i = 0; i < cols; ++i) acc += row[i];
                    db[static_cast<std::size_t>(o)] += acc;
                }
            }
            bn->accumulate(db.data(), db.size());
        }
    });
    return r;
}

// ------------------------------------------------------------------ batchnorm2d

template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& input, const TensorT<T>& bn_scale, const TensorT<T>& bn_shift,
                       TensorT<T>& running_mean, TensorT<T>& running_var, bool training, T momentum,
                       T eps) {
    if (input.rank() != 4) {
        throw std::invalid_argument("batchnorm2d: expected NCHW input, got " + shape_str(input.shape()));
    }
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    for (const TensorT<T>* t :
         std::initializer_list<const TensorT<T>*>{&bn_scale, &bn_shift, &running_mean, &running_var}) {
        if (t->rank() != 1 || t->dim(0) != c) {
            throw std::invalid_argument("batchnorm2d: per-channel tensor " + shape_str(t->shape()) +
                                        " does not match input " + shape_str(input.shape()));
        }
    }
    const std::int64_t m = n * h * w;
    if (training && m < 2) {
        throw std::invalid_argument("batchnorm2d: train mode needs at least 2 values per channel");
    }

    const auto& xv = input.values();
    const auto& sv = bn_scale.values();
    const auto& bv = bn_shift.values();
    const std::int64_t hw = h * w;
    const std::int64_t plane = c * hw;

    std::vector<T> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
    if (training) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xv.data() + b * plane + ch * hw;
                for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            }
            const T mu = acc / static_cast<T>(m);
            T var_acc = 0;
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xv.data() + b * plane + ch * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mu;
                    var_acc += d * d;
                }
            }
            const T var = var_acc / static_cast<T>(m);
            mean[static_cast<std::size_t>(ch)] = mu;
            invstd[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var + eps);
            auto& rm = running_mean.values();
            auto& rv = running_var.values();
            rm[static_cast<std::size_t>(ch)] = (T(1) - momentum) * rm[static_cast<std::size_t>(ch)] +
                                               momentum * mu;
            const T var_unbiased = var * static_cast<T>(m) / static_cast<T>(m - 1);
            rv[static_cast<std::size_t>(ch)] = (T(1) - momentum) * rv[static_cast<std::size_t>(ch)] +
                                               momentum * var_unbiased;
        }
    } else {
        const auto& rm = running_mean.values();
        const auto& rv = running_var.values();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<std::size_t>(ch)] = rm[static_cast<std::size_t>(ch)];
            invstd[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(rv[static_cast<std::size_t>(ch)] + eps);
        }
    }

    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* p = xv.data() + b * plane + ch * hw;
            T* q = out.data() + b * plane + ch * hw;
            const T mu = mean[static_cast<std::size_t>(ch)];
            const T is = invstd[static_cast<std::size_t>(ch)];
            const T gamma = sv[static_cast<std::size_t>(ch)];
            const T beta = bv[static_cast<std::size_t>(ch)];
            for (std::int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * gamma + beta;
        }
    }

    const bool needs_grad = input.requires_grad() || bn_scale.requires_grad() || bn_shift.requires_grad();
    auto r = finish("batchnorm2d", input.shape(), std::move(out), needs_grad);
    record_op(r, [xn = input.node(), sn = bn_scale.node(), bn = bn_shift.node(), mean, invstd, n, c, hw,
                  training](const std::vector<T>& go) {
        const std::int64_t m = n * hw;
        const std::int64_t plane = c * hw;
        std::vector<T> dx;
        if (xn->requires_grad) dx.assign(xn->data.size(), T(0));
        std::vector<T> dgamma(static_cast<std::size_t>(c), T(0));
        std::vector<T> dbeta(static_cast<std::size_t>(c), T(0));

        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T mu = mean[static_cast<std::size_t>(ch)];
            const T is = invstd[static_cast<std::size_t>(ch)];
            const T gamma = sn->data[static_cast<std::size_t>(ch)];
            T sum_go = 0, sum_go_xhat = 0;
            for (std::int64_t b = 0; b < n; ++b) {
                const T* gp = go.data() + b * plane + ch * hw;
                const T* xp = xn->data.data() + b * plane + ch * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_go += gp[i];
                    sum_go_xhat += gp[i] * (xp[i] - mu) * is;
                }
            }
            dgamma[static_cast<std::size_t>(ch)] = sum_go_xhat;
            dbeta[static_cast<std::size_t>(ch)] = sum_go;
            if (xn->requires_grad) {
                if (training) {
                    const T inv_m = T(1) / static_cast<T>(m);
                    for (std::int64_t b = 0; b < n; ++b) {
                        const T* gp = go.data() + b * plane + ch * hw;
                        const T* xp = xn->data.data() + b * plane + ch * hw;
                        T* dp = dx.data() + b * plane + ch * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T xhat = (xp[i] - mu) * is;
                            dp[i] = gamma * is * (gp[i] - sum_go * inv_m - xhat * sum_go_xhat * inv_m);
                        }
                    }
                } else {
                    for (std::int64_t b = 0; b < n; ++b) {
                        const T* gp = go.data() + b * plane + ch * hw;
                        T* dp = dx.data() + b * plane + ch * hw;
                        for (std::int64_t i = 0; i < hw; ++i) dp[i] = gp[i] * gamma * is;
                    }
                }
            }
        }
        if (xn->requires_grad) xn->accumulate(dx.data(), dx.size());
        if (sn->requires_grad) sn->accumulate(dgamma.data(), dgamma.size());
        if (bn->requires_grad) bn->accumulate(dbeta.data(), dbeta.size());
    });
    return r;
}

// ------------------------------------------------------------------ maxpool2d

template <class T>
TensorT<T> maxpool2d(const TensorT<T>& input, int kernel, int stride, int padding) {
    if (input.rank() != 4) {
        throw std::invalid_argument("maxpool2d: expected NCHW input, got " + shape_str(input.shape()));
    }
    if (kernel < 1) throw std::invalid_argument("maxpool2d: kernel must be >= 1");
    if (stride < 1) throw std::invalid_argument("maxpool2d: stride must be >= 1");
    if (padding < 0 || padding >= kernel) {
        throw std::invalid_argument("maxpool2d: padding must satisfy 0 <= padding < kernel");
    }
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (kernel > h + 2 * padding || kernel > w + 2 * padding) {
        throw std::invalid_argument("maxpool2d: window " + std::to_string(kernel) +
                                    " is larger than padded input " + shape_str(input.shape()));
    }
    const std::int64_t oh = conv_out_extent(h, kernel, stride, padding);
    const std::int64_t ow = conv_out_extent(w, kernel, stride, padding);

    const auto& xv = input.values();
    std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
    std::vector<std::int64_t> argmax(out.size());
    std::size_t oi = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* plane = xv.data() + (b * c + ch) * h * w;
            const std::int64_t plane_off = (b * c + ch) * h * w;
            for (std::int64_t py = 0; py < oh; ++py) {
                for (std::int64_t px = 0; px < ow; ++px, ++oi) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t ky = 0; ky < kernel; ++ky) {
                        const std::int64_t iy = py * stride + ky - padding;
                        if (iy < 0 || iy >= h) continue;
                        for (std::int64_t kx = 0; kx < kernel; ++kx) {
                            const std::int64_t ix = px * stride + kx - padding;
                            if (ix < 0 || ix >= w) continue;
                            const T v = plane[iy * w + ix];
                            if (v > best) {
                                best = v;
                                best_idx = plane_off + iy * w + ix;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    auto r = finish("maxpool2d", Shape{n, c, oh, ow}, std::move(out), input.requires_grad());
    record_op(r, [xn = input.node(), argmax = std::move(argmax)](const std::vector<T>& go) {
        std::vector<T> g(xn->data.size(), T(0));
        for (std::size_t i = 0; i < go.size(); ++i) {
            g[static_cast<std::size_t>(argmax[i])] += go[i];
        }
        xn->accumulate(g.data(), g.size());
    });
    return r;
}

// ------------------------------------------------------------------ bilinear resize

namespace {

struct ResizeTap {
    std::int64_t lo, hi;
    double frac;
};

std::vector<ResizeTap> resize_taps(std::int64_t in, std::int64_t out) {
    std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
        const double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        double f = std::floor(src);
        std::int64_t lo = static_cast<std::int64_t>(f);
        double frac = src - f;
        std::int64_t hi = lo + 1;
        lo = std::clamp<std::int64_t>(lo, 0, in - 1);
        hi = std::clamp<std::int64_t>(hi, 0, in - 1);
        taps[static_cast<std::size_t>(i)] = {lo, hi, frac};
    }
    return taps;
}

}  // namespace

template <class T>
TensorT<T> bilinear_resize(const TensorT<T>& input, std::int64_t out_h, std::int64_t out_w) {
    if (input.rank() != 4) {
        throw std::invalid_argument("bilinear_resize: expected NCHW input, got " +
                                    shape_str(input.shape()));
    }
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output size must be >= 1");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const auto ytaps = resize_taps(h, out_h);
    const auto xtaps = resize_taps(w, out_w);

    const auto& xv = input.values();
    std::vector<T> out(static_cast<std::size_t>(n * c * out_h * out_w));
    std::size_t oi = 0;
    for (std::int64_t p = 0; p < n * c; ++p) {
        const T* plane = xv.data() + p * h * w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            const auto& ty = ytaps[static_cast<std::size_t>(y)];
            const T wy1 = static_cast<T>(ty.frac);
            const T wy0 = T(1) - wy1;
            const T* r0 = plane + ty.lo * w;
            const T* r1 = plane + ty.hi * w;
            for (std::int64_t x = 0; x < out_w; ++x, ++oi) {
                const auto& tx = xtaps[static_cast<std::size_t>(x)];
                const T wx1 = static_cast<T>(tx.frac);
                const T wx0 = T(1) - wx1;
                out[oi] = wy0 * (wx0 * r0[tx.lo] + wx1 * r0[tx.hi]) +
                          wy1 * (wx0 * r1[tx.lo] + wx1 * r1[tx.hi]);
            }
        }
    }
    auto r = finish("bilinear_resize", Shape{n, c, out_h, out_w}, std::move(out), input.requires_grad());
    record_op(r, [xn = input.node(), ytaps, xtaps, n, c, h, w, out_h, out_w](const std::vector<T>& go) {
        std::vector<T> g(xn->data.size(), T(0));
        std::size_t oi = 0;
        for (std::int64_t p = 0; p < n * c; ++p) {
            T* plane = g.data() + p * h * w;
            for (std::int64_t y = 0; y < out_h; ++y) {
                const auto& ty = ytaps[static_cast<std::size_t>(y)];
                const T wy1 = static_cast<T>(ty.frac);
                const T wy0 = T(1) - wy1;
                for (std::int64_t x = 0; x < out_w; ++x, ++oi) {
                    const auto& tx = xtaps[static_cast<std::size_t>(x)];
                    const T wx1 = static_cast<T>(tx.frac);
                    const T wx0 = T(1) - wx1;
                    const T v = go[oi];
                    plane[ty.lo * w + tx.lo] += wy0 * wx0 * v;
                    plane[ty.lo * w + tx.hi] += wy0 * wx1 * v;
                    plane[ty.hi * w + tx.lo] += wy1 * wx0 * v;
                    plane[ty.hi * w + tx.hi] += wy1 * wx1 * v;
                }
            }
        }
        xn->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> bilinear_upsample2x(const TensorT<T>& input) {
    if (input.rank() != 4) {
        throw std::invalid_argument("bilinear_upsample2x: expected NCHW input, got " +
                                    shape_str(input.shape()));
    }
    return bilinear_resize(input, input.dim(2) * 2, input.dim(3) * 2);
}

// ------------------------------------------------------------------ concat

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (!b.defined()) return a;  // concat with an empty-channel tensor is identity
    if (!a.defined()) return b;
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3)) {
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    }
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(static_cast<std::size_t>(n * (ca + cb) * hw));
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(av.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(bv.data() + i * cb * hw, cb * hw, out.data() + i * (ca + cb) * hw + ca * hw);
    }
    const bool needs_grad = a.requires_grad() || b.requires_grad();
    auto r = finish("concat_channels", Shape{n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), needs_grad);
    record_op(r, [an = a.node(), bn = b.node(), n, ca, cb, hw](const std::vector<T>& go) {
        if (an->requires_grad) {
            std::vector<T> g(an->data.size());
            for (std::int64_t i = 0; i < n; ++i) {
                std::copy_n(go.data() + i * (ca + cb) * hw, ca * hw, g.data() + i * ca * hw);
            }
            an->accumulate(g.data(), g.size());
        }
        if (bn->requires_grad) {
            std::vector<T> g(bn->data.size());
            for (std::int64_t i = 0; i < n; ++i) {
                std::copy_n(go.data() + i * (ca + cb) * hw + ca * hw, cb * hw, g.data() + i * cb * hw);
            }
            bn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

// ------------------------------------------------------------------ linear

template <class T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (weight.rank() != 2) {
        throw std::invalid_argument("linear: weight must be [D_out, D_in], got " +
                                    shape_str(weight.shape()));
    }
    if (input.rank() < 1 || input.shape().back() != weight.dim(1)) {
        throw std::invalid_argument("linear: trailing dim of input " + shape_str(input.shape()) +
                                    " does not match weight " + shape_str(weight.shape()));
    }
    const std::int64_t d_in = weight.dim(1);
    const std::int64_t d_out = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
        throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()) +
                                    " does not match weight " + shape_str(weight.shape()));
    }
    const std::int64_t rows = input.numel() / d_in;
    const auto& xv = input.values();
    const auto& wv = weight.values();

    std::vector<T> out(static_cast<std::size_t>(rows * d_out), T(0));
    matmul_accumulate(xv.data(), wv.data(), out.data(), rows, d_in, d_out, false, true);
    if (bias.defined()) {
        const auto& bv = bias.values();
        for (std::int64_t rix = 0; rix < rows; ++rix) {
            T* row = out.data() + rix * d_out;
            for (std::int64_t j = 0; j < d_out; ++j) row[j] += bv[static_cast<std::size_t>(j)];
        }
    }
    Shape out_shape = input.shape();
    out_shape.back() = d_out;
    const bool needs_grad = input.requires_grad() || weight.requires_grad() ||
                            (bias.defined() && bias.requires_grad());
    auto r = finish("linear", std::move(out_shape), std::move(out), needs_grad);
    record_op(r, [xn = input.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr,
                  rows, d_in, d_out](const std::vector<T>& go) {
        if (xn->requires_grad) {
            std::vector<T> g(xn->data.size(), T(0));
            matmul_accumulate(go.data(), wn->data.data(), g.data(), rows, d_out, d_in, false, false);
            xn->accumulate(g.data(), g.size());
        }
        if (wn->requires_grad) {
            std::vector<T> g(wn->data.size(), T(0));
            matmul_accumulate(go.data(), xn->data.data(), g.data(), d_out, rows, d_in, true, false);
            wn->accumulate(g.data(), g.size());
        }
        if (bn && bn->requires_grad) {
            std::vector<T> g(bn->data.size(), T(0));
            for (std::int64_t rix = 0; rix < rows; ++rix) {
                const T* row = go.data() + rix * d_out;
                for (std::int64_t j = 0; j < d_out; ++j) g[static_cast<std::size_t>(j)] += row[j];
            }
            bn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

// ------------------------------------------------------------------ layernorm

template <class T>
TensorT<T> layernorm(const TensorT<T>& input, const TensorT<T>& ln_scale, const TensorT<T>& ln_shift,
                     T eps) {
    if (input.rank() < 1) throw std::invalid_argument("layernorm: input must have rank >= 1");
    const std::int64_t d = input.shape().back();
    for (const TensorT<T>* t : {&ln_scale, &ln_shift}) {
        if (t->rank() != 1 || t->dim(0) != d) {
            throw std::invalid_argument("layernorm: scale/shift shape " + shape_str(t->shape()) +
                                        " does not match trailing dim of " + shape_str(input.shape()));
        }
    }
    const std::int64_t rows = input.numel() / d;
    const auto& xv = input.values();
    const auto& sv = ln_scale.values();
    const auto& bv = ln_shift.values();

    std::vector<T> mean(static_cast<std::size_t>(rows)), invstd(static_cast<std::size_t>(rows));
    std::vector<T> out(xv.size());
    for (std::int64_t rix = 0; rix < rows; ++rix) {
        const T* x = xv.data() + rix * d;
        T mu = 0;
        for (std::int64_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            const T dv = x[j] - mu;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        mean[static_cast<std::size_t>(rix)] = mu;
        invstd[static_cast<std::size_t>(rix)] = is;
        T* y = out.data() + rix * d;
        for (std::int64_t j = 0; j < d; ++j) {
            y[j] = (x[j] - mu) * is * sv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    const bool needs_grad = input.requires_grad() || ln_scale.requires_grad() || ln_shift.requires_grad();
    auto r = finish("layernorm", input.shape(), std::move(out), needs_grad);
    record_op(r, [xn = input.node(), sn = ln_scale.node(), bn = ln_shift.node(), mean, invstd, rows,
                  d](const std::vector<T>& go) {
        std::vector<T> dx;
        if (xn->requires_grad) dx.assign(xn->data.size(), T(0));
        std::vector<T> dgamma(static_cast<std::size_t>(d), T(0));
        std::vector<T> dbeta(static_cast<std::size_t>(d), T(0));
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::int64_t rix = 0; rix < rows; ++rix) {
            const T* x = xn->data.data() + rix * d;
            const T* g = go.data() + rix * d;
            const T mu = mean[static_cast<std::size_t>(rix)];
            const T is = invstd[static_cast<std::size_t>(rix)];
            T sum_gs = 0, sum_gs_xhat = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const T xhat = (x[j] - mu) * is;
                const T gs = g[j] * sn->data[static_cast<std::size_t>(j)];
                sum_gs += gs;
                sum_gs_xhat += gs * xhat;
                dgamma[static_cast<std::size_t>(j)] += g[j] * xhat;
                dbeta[static_cast<std::size_t>(j)] += g[j];
            }
            if (xn->requires_grad) {
                T* dp = dx.data() + rix * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    const T xhat = (x[j] - mu) * is;
                    const T gs = g[j] * sn->data[static_cast<std::size_t>(j)];
                    dp[j] = is * (gs - sum_gs * inv_d - xhat * sum_gs_xhat * inv_d);
                }
            }
        }
        if (xn->requires_grad) xn->accumulate(dx.data(), dx.size());
        if (sn->requires_grad) sn->accumulate(dgamma.data(), dgamma.size());
        if (bn->requires_grad) bn->accumulate(dbeta.data(), dbeta.size());
    });
    return r;
}

// ------------------------------------------------------------------ softmax

template <class T>
TensorT<T> softmax(const TensorT<T>& input) {
    if (input.rank() < 1) throw std::invalid_argument("softmax: input must have rank >= 1");
    const std::int64_t d = input.shape().back();
    const std::int64_t rows = input.numel() / d;
    const auto& xv = input.values();
    std::vector<T> out(xv.size());
    for (std::int64_t rix = 0; rix < rows; ++rix) {
        const T* x = xv.data() + rix * d;
        T* y = out.data() + rix * d;
        T mx = x[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        T sum = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < d; ++j) y[j] *= inv;
    }
    auto r = finish("softmax", input.shape(), std::move(out), input.requires_grad());
    record_op(r, [xn = input.node(), yn = r.node(), rows, d](const std::vector<T>& go) {
        std::vector<T> g(go.size());
        for (std::int64_t rix = 0; rix < rows; ++rix) {
            const T* y = yn->data.data() + rix * d;
            const T* gp = go.data() + rix * d;
            T dot = 0;
            for (std::int64_t j = 0; j < d; ++j) dot += gp[j] * y[j];
            T* dp = g.data() + rix * d;
            for (std::int64_t j = 0; j < d; ++j) dp[j] = y[j] * (gp[j] - dot);
        }
        xn->accumulate(g.data(), g.size());
    });
    return r;
}

// ------------------------------------------------------------------ patchify

namespace {

// tokens[n, gy*gw+gx, c*p*p + py*p + px] <-> image[n, c, gy*p+py, gx*p+px]
template <class T, bool kGather>
void move_patches(const T* image_in, T* image_out, const T* tok_in, T* tok_out, std::int64_t n,
                  std::int64_t c, std::int64_t h, std::int64_t w, int patch) {
    const std::int64_t gh = h / patch, gw = w / patch;
    const std::int64_t t_count = gh * gw;
    const std::int64_t feat = c * patch * patch;
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t gy = 0; gy < gh; ++gy) {
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                const std::int64_t t = gy * gw + gx;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (int py = 0; py < patch; ++py) {
                        const std::int64_t iy = gy * patch + py;
                        const std::int64_t img_base = ((b * c + ch) * h + iy) * w + gx * patch;
                        const std::int64_t tok_base =
                            (b * t_count + t) * feat + (ch * patch + py) * patch;
                        if constexpr (kGather) {
                            for (int px = 0; px < patch; ++px) {
                                tok_out[tok_base + px] = image_in[img_base + px];
                            }
                        } else {
                            for (int px = 0; px < patch; ++px) {
                                image_out[img_base + px] = tok_in[tok_base + px];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void gather_patches(const T* image, T* tokens, std::int64_t n, std::int64_t c, std::int64_t h,
                    std::int64_t w, int patch) {
    move_patches<T, true>(image, nullptr, nullptr, tokens, n, c, h, w, patch);
}

template <class T>
void scatter_patches(const T* tokens, T* image, std::int64_t n, std::int64_t c, std::int64_t h,
                     std::int64_t w, int patch) {
    move_patches<T, false>(nullptr, image, tokens, nullptr, n, c, h, w, patch);
}

}  // namespace

template <class T>
TensorT<T> patchify(const TensorT<T>& input, int patch) {
    if (input.rank() != 4) {
        throw std::invalid_argument("patchify: expected NCHW input, got " + shape_str(input.shape()));
    }
    if (patch < 1) throw std::invalid_argument("patchify: patch must be >= 1");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("patchify: spatial size of " + shape_str(input.shape()) +
                                    " is not divisible by patch size " + std::to_string(patch));
    }
    const std::int64_t t_count = (h / patch) * (w / patch);
    const std::int64_t feat = c * patch * patch;
    std::vector<T> out(static_cast<std::size_t>(n * t_count * feat));
    gather_patches(input.values().data(), out.data(), n, c, h, w, patch);
    auto r = finish("patchify", Shape{n, t_count, feat}, std::move(out), input.requires_grad());
    record_op(r, [xn = input.node(), n, c, h, w, patch](const std::vector<T>& go) {
        std::vector<T> g(xn->data.size());
        scatter_patches(go.data(), g.data(), n, c, h, w, patch);
        xn->accumulate(g.data(), g.size());
    });
    return r;
}

template <class T>
TensorT<T> unpatchify(const TensorT<T>& tokens, std::int64_t channels, std::int64_t h, std::int64_t w,
                      int patch) {
    if (tokens.rank() != 3) {
        throw std::invalid_argument("unpatchify: expected [N, T, F] tokens, got " +
                                    shape_str(tokens.shape()));
    }
    if (h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("unpatchify: target size not divisible by patch size");
    }
    const std::int64_t n = tokens.dim(0);
    const std::int64_t t_count = (h / patch) * (w / patch);
    const std::int64_t feat = channels * patch * patch;
    if (tokens.dim(1) != t_count || tokens.dim(2) != feat) {
        throw std::invalid_argument("unpatchify: token shape " + shape_str(tokens.shape()) +
                                    " does not match target " +
                                    shape_str({n, channels, h, w}) + " with patch " +
                                    std::to_string(patch));
    }
    std::vector<T> out(static_cast<std::size_t>(n * channels * h * w));
    scatter_patches(tokens.values().data(), out.data(), n, channels, h, w, patch);
    auto r = finish("unpatchify", Shape{n, channels, h, w}, std::move(out), tokens.requires_grad());
    record_op(r, [tn = tokens.node(), n, channels, h, w, patch](const std::vector<T>& go) {
        std::vector<T> g(tn->data.size());
        gather_patches(go.data(), g.data(), n, channels, h, w, patch);
        tn->accumulate(g.data(), g.size());
    });
    return r;
}

// ------------------------------------------------------------------ token bias

template <class T>
TensorT<T> add_token_bias(const TensorT<T>& tokens, const TensorT<T>& table) {
    if (tokens.rank() != 3 || table.rank() != 2 || tokens.dim(1) != table.dim(0) ||
        tokens.dim(2) != table.dim(1)) {
        throw std::invalid_argument("add_token_bias: tokens " + shape_str(tokens.shape()) +
                                    " incompatible with table " + shape_str(table.shape()));
    }
    const std::int64_t n = tokens.dim(0);
    const std::int64_t block = table.numel();
    const auto& xv = tokens.values();
    const auto& tv = table.values();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < n; ++b) {
        const T* x = xv.data() + b * block;
        T* y = out.data() + b * block;
        for (std::int64_t i = 0; i < block; ++i) y[i] = x[i] + tv[static_cast<std::size_t>(i)];
    }
    const bool needs_grad = tokens.requires_grad() || table.requires_grad();
    auto r = finish("add_token_bias", tokens.shape(), std::move(out), needs_grad);
    record_op(r, [xn = tokens.node(), tn = table.node(), n, block](const std::vector<T>& go) {
        if (xn->requires_grad) xn->accumulate(go.data(), go.size());
        if (tn->requires_grad) {
            std::vector<T> g(static_cast<std::size_t>(block), T(0));
            for (std::int64_t b = 0; b < n; ++b) {
                const T* gp = go.data() + b * block;
                for (std::int64_t i = 0; i < block; ++i) g[static_cast<std::size_t>(i)] += gp[i];
            }
            tn->accumulate(g.data(), g.size());
        }
    });
    return r;
}

// ------------------------------------------------------------------ instantiations

#define TRANSNETR_INSTANTIATE_NN(T)                                                                   \
    template TensorT<T> activation<T>(const TensorT<T>&, Activation, T);                              \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int); \
    template TensorT<T> batchnorm2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,       \
                                       TensorT<T>&, TensorT<T>&, bool, T, T);                         \
    template TensorT<T> maxpool2d<T>(const TensorT<T>&, int, int, int);                               \
    template TensorT<T> bilinear_resize<T>(const TensorT<T>&, std::int64_t, std::int64_t);            \
    template TensorT<T> bilinear_upsample2x<T>(const TensorT<T>&);                                    \
    template TensorT<T> concat_channels<T>(const TensorT<T>&, const TensorT<T>&);                     \
    template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);           \
    template TensorT<T> layernorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T);     \
    template TensorT<T> softmax<T>(const TensorT<T>&);                                                \
    template TensorT<T> patchify<T>(const TensorT<T>&, int);                                          \
    template TensorT<T> unpatchify<T>(const TensorT<T>&, std::int64_t, std::int64_t, std::int64_t,    \
                                      int);                                                           \
    template TensorT<T> add_token_bias<T>(const TensorT<T>&, const TensorT<T>&);

TRANSNETR_INSTANTIATE_NN(float)
TRANSNETR_INSTANTIATE_NN(double)

#undef TRANSNETR_INSTANTIATE_NN

}  // namespace transnetr
