#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <limits>

#include "semsr/nn/var.hpp"

// Differentiable tensor ops. Feature maps are NCHW, token sequences are
// [N, L, D], linear weights are [out, in] and conv weights are stored
// pre-flattened as [out, in * k * k].
namespace semsr::nn {

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void check_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ArgumentError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
void accumulate(Node<T>& target, const Buffer<T>& src) {
    auto& g = target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a.shape(), b.shape(), "add");
    Buffer<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        for (std::size_t p = 0; p < 2; ++p)
            if (wants_grad(n, p)) detail::accumulate(*n.parents[p], n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a.shape(), b.shape(), "sub");
    Buffer<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        if (wants_grad(n, 0)) detail::accumulate(*n.parents[0], n.grad);
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a.shape(), b.shape(), "mul");
    Buffer<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        const auto& av = n.parents[0]->value;
        const auto& bv = n.parents[1]->value;
        if (wants_grad(n, 0)) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Buffer<T> out(a.values());
    for (auto& v : out) v *= s;
    return make_op<T>(a.shape(), std::move(out), {a}, [s](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Buffer<T> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (T(1) + std::exp(-av[i]));
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
        const auto& x = n.parents[0]->value;
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-x[i]));
            g[i] += n.grad[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Buffer<T> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-av[i]));
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
    });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
    Buffer<T> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (numel(shape) != a.size()) throw ArgumentError("reshape: element count mismatch");
    return make_op<T>(std::move(shape), a.values(), {a},
                      [](Node<T>& n) { detail::accumulate(*n.parents[0], n.grad); });
}

// x: [N, ...], b: [...]; adds b to every sample.
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& b) {
    const std::size_t per = b.size();
    if (x.size() % per || Shape(x.shape().begin() + 1, x.shape().end()) != b.shape())
        throw ArgumentError("add_broadcast: " + to_string(b.shape()) + " does not match " + to_string(x.shape()));
    Buffer<T> out(x.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i % per];
    return make_op<T>(x.shape(), std::move(out), {x, b}, [per](Node<T>& n) {
        if (wants_grad(n, 0)) detail::accumulate(*n.parents[0], n.grad);
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % per] += n.grad[i];
        }
    });
}

// x: [N, C, ...], v: [N, C]; adds v[n, c] to every spatial entry.
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
    const int N = x.dim(0), C = x.dim(1);
    if (v.rank() != 2 || v.dim(0) != N || v.dim(1) != C)
        throw ArgumentError("add_channel: expected [" + std::to_string(N) + "," + std::to_string(C) + "] got " +
                            to_string(v.shape()));
    const std::size_t inner = x.size() / (static_cast<std::size_t>(N) * C);
    Buffer<T> out(x.values());
    const auto& vv = v.values();
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc)
        for (std::size_t i = 0; i < inner; ++i) out[nc * inner + i] += vv[nc];
    return make_op<T>(x.shape(), std::move(out), {x, v}, [inner](Node<T>& n) {
        if (wants_grad(n, 0)) detail::accumulate(*n.parents[0], n.grad);
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t nc = 0; nc < g.size(); ++nc) {
                T s = 0;
                for (std::size_t i = 0; i < inner; ++i) s += n.grad[nc * inner + i];
                g[nc] += s;
            }
        }
    });
}

// ---------------------------------------------------------------- linear algebra

// A: [m, k], B: [k, n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    using namespace detail;
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ArgumentError("matmul: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    Buffer<T> out(static_cast<std::size_t>(m) * nn);
    MapR<T>(out.data(), m, nn).noalias() = CMapR<T>(a.values().data(), m, k) * CMapR<T>(b.values().data(), k, nn);
    return make_op<T>({m, nn}, std::move(out), {a, b}, [m, k, nn](Node<T>& n) {
        CMapR<T> dy(n.grad.data(), m, nn);
        if (wants_grad(n, 0)) {
            auto& g = n.parents[0]->ensure_grad();
            MapR<T>(g.data(), m, k).noalias() += dy * CMapR<T>(n.parents[1]->value.data(), k, nn).transpose();
        }
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            MapR<T>(g.data(), k, nn).noalias() += CMapR<T>(n.parents[0]->value.data(), m, k).transpose() * dy;
        }
    });
}

// x: [..., in], w: [out, in], b: [out] (optional)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {}) {
    using namespace detail;
    const int in = w.dim(1), outf = w.dim(0);
    if (x.dim(-1) != in)
        throw ArgumentError("linear: input width " + std::to_string(x.dim(-1)) + " != " + std::to_string(in));
    const int rows = static_cast<int>(x.size() / in);
    Buffer<T> out(static_cast<std::size_t>(rows) * outf);
    MapR<T> y(out.data(), rows, outf);
    // One product per leading-dimension sample so that a sample's result does
    // not depend on how many others share the batch.
    const int samples = x.rank() > 1 ? x.dim(0) : 1;
    const int per = rows / samples;
    for (int s = 0; s < samples; ++s)
        y.middleRows(s * per, per).noalias() =
            CMapR<T>(x.values().data() + static_cast<std::size_t>(s) * per * in, per, in) *
            CMapR<T>(w.values().data(), outf, in).transpose();
    if (b.defined())
        for (int r = 0; r < rows; ++r)
            for (int o = 0; o < outf; ++o) y(r, o) += b.values()[o];
    Shape shape = x.shape();
    shape.back() = outf;
    return make_op<T>(std::move(shape), std::move(out), {x, w, b}, [rows, in, outf](Node<T>& n) {
        CMapR<T> dy(n.grad.data(), rows, outf);
        if (wants_grad(n, 0)) {
            auto& g = n.parents[0]->ensure_grad();
            MapR<T>(g.data(), rows, in).noalias() += dy * CMapR<T>(n.parents[1]->value.data(), outf, in);
        }
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            MapR<T>(g.data(), outf, in).noalias() += dy.transpose() * CMapR<T>(n.parents[0]->value.data(), rows, in);
        }
        if (wants_grad(n, 2)) {
            auto& g = n.parents[2]->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int o = 0; o < outf; ++o) g[o] += dy(r, o);
        }
    });
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
    int channels = 0, height = 0, width = 0;
    int kernel = 1, stride = 1, pad = 0;
    int out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
    int patch() const { return channels * kernel * kernel; }
    bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

namespace detail {

// Output columns j whose input column j*stride - pad + kj lies inside [0, width).
inline void valid_columns(const ConvGeometry& g, int kj, int& lo, int& hi) {
    const int ow = g.out_w(), off = kj - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = (g.width - 1 - off) < 0 ? 0 : std::min(ow, (g.width - 1 - off) / g.stride + 1);
    if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, st = g.stride;
    const int P = oh * ow;
    for (int c = 0; c < g.channels; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                int lo, hi;
                valid_columns(g, kj, lo, hi);
                const int off = kj - g.pad;
                for (int i = 0; i < oh; ++i) {
                    T* dst = row + i * ow;
                    const int y = i * st - g.pad + ki;
                    if (y < 0 || y >= g.height) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * g.height + y) * g.width;
                    std::fill(dst, dst + lo, T(0));
                    if (st == 1) {
                        std::copy(src + lo + off, src + hi + off, dst + lo);
                    } else {
                        for (int j = lo; j < hi; ++j) dst[j] = src[j * st + off];
                    }
                    std::fill(dst + hi, dst + ow, T(0));
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, st = g.stride;
    const int P = oh * ow;
    for (int c = 0; c < g.channels; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                int lo, hi;
                valid_columns(g, kj, lo, hi);
                const int off = kj - g.pad;
                for (int i = 0; i < oh; ++i) {
                    const int y = i * st - g.pad + ki;
                    if (y < 0 || y >= g.height) continue;
                    T* dst = dx + (static_cast<std::size_t>(c) * g.height + y) * g.width;
                    const T* src = row + i * ow;
                    for (int j = lo; j < hi; ++j) dst[j * st + off] += src[j];
                }
            }
}

}  // namespace detail

// x: [N, C, H, W], w: [O, C*k*k], b: [O] (optional)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int kernel, int stride, int pad) {
    using namespace detail;
    if (x.rank() != 4) throw ArgumentError("conv2d: expected NCHW input, got " + to_string(x.shape()));
    ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), kernel, stride, pad};
    const int N = x.dim(0), O = w.dim(0), K = geo.patch();
    if (w.dim(1) != K)
        throw ArgumentError("conv2d: weight expects patch " + std::to_string(w.dim(1)) + " but input gives " +
                            std::to_string(K));
    const int oh = geo.out_h(), ow = geo.out_w(), P = oh * ow;
    if (oh <= 0 || ow <= 0) throw ArgumentError("conv2d: input smaller than kernel");
    const std::size_t in_stride = static_cast<std::size_t>(geo.channels) * geo.height * geo.width;
    Buffer<T> out(static_cast<std::size_t>(N) * O * P);
    Buffer<T> cols(geo.pointwise() ? 0 : static_cast<std::size_t>(K) * P);
    CMapR<T> wm(w.values().data(), O, K);
    for (int n = 0; n < N; ++n) {
        const T* xn = x.values().data() + n * in_stride;
        const T* cp = xn;
        if (!geo.pointwise()) {
            im2col(xn, geo, cols.data());
            cp = cols.data();
        }
        MapR<T> y(out.data() + static_cast<std::size_t>(n) * O * P, O, P);
        y.noalias() = wm * CMapR<T>(cp, K, P);
        if (b.defined())
            for (int o = 0; o < O; ++o) y.row(o).array() += b.values()[o];
    }
    return make_op<T>({N, O, oh, ow}, std::move(out), {x, w, b}, [geo, N, O, K, P, in_stride](Node<T>& n) {
        const auto& xv = n.parents[0]->value;
        const auto& wv = n.parents[1]->value;
        const bool gx = wants_grad(n, 0), gw = wants_grad(n, 1), gb = wants_grad(n, 2);
        Buffer<T> cols(geo.pointwise() ? 0 : static_cast<std::size_t>(K) * P);
        Buffer<T> dcols(gx && !geo.pointwise() ? static_cast<std::size_t>(K) * P : 0);
        T* dx = gx ? n.parents[0]->ensure_grad().data() : nullptr;
        T* dw = gw ? n.parents[1]->ensure_grad().data() : nullptr;
        T* db = gb ? n.parents[2]->ensure_grad().data() : nullptr;
        CMapR<T> wm(wv.data(), O, K);
        for (int s = 0; s < N; ++s) {
            CMapR<T> dy(n.grad.data() + static_cast<std::size_t>(s) * O * P, O, P);
            const T* xn = xv.data() + s * in_stride;
            if (gw) {
                const T* cp = xn;
                if (!geo.pointwise()) {
                    im2col(xn, geo, cols.data());
                    cp = cols.data();
                }
                MapR<T>(dw, O, K).noalias() += dy * CMapR<T>(cp, K, P).transpose();
            }
            if (gb)
                for (int o = 0; o < O; ++o) db[o] += dy.row(o).sum();
            if (gx) {
                if (geo.pointwise()) {
                    MapR<T>(dx + s * in_stride, K, P).noalias() += wm.transpose() * dy;
                } else {
                    MapR<T>(dcols.data(), K, P).noalias() = wm.transpose() * dy;
                    col2im_add(dcols.data(), geo, dx + s * in_stride);
                }
            }
        }
    });
}

// ---------------------------------------------------------------- normalization

// Normalizes over groups of channels (GroupNorm); x: [N, C, ...].
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int N = x.dim(0), C = x.dim(1);
    if (C % groups != 0) throw ArgumentError("group_norm: channels not divisible by groups");
    const std::size_t inner = x.size() / (static_cast<std::size_t>(N) * C);
    const int cpg = C / groups;
    const std::size_t gsize = inner * cpg;
    Buffer<T> out(x.size());
    auto xhat = std::make_shared<Buffer<T>>(x.size());
    auto rstd = std::make_shared<Buffer<T>>(static_cast<std::size_t>(N) * groups);
    const auto& xv = x.values();
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + g * cpg) * inner;
            T mean = 0;
            for (std::size_t i = 0; i < gsize; ++i) mean += xv[base + i];
            mean /= static_cast<T>(gsize);
            T var = 0;
            for (std::size_t i = 0; i < gsize; ++i) {
                const T d = xv[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(gsize);
            const T r = T(1) / std::sqrt(var + eps);
            (*rstd)[n * groups + g] = r;
            for (int c = 0; c < cpg; ++c) {
                const int ch = g * cpg + c;
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t idx = base + c * inner + i;
                    const T h = (xv[idx] - mean) * r;
                    (*xhat)[idx] = h;
                    out[idx] = h * gamma.values()[ch] + beta.values()[ch];
                }
            }
        }
    return make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, [=](Node<T>& n) {
        const auto& gv = n.parents[1]->value;
        if (wants_grad(n, 1) || wants_grad(n, 2)) {
            T* dg = wants_grad(n, 1) ? n.parents[1]->ensure_grad().data() : nullptr;
            T* dbeta = wants_grad(n, 2) ? n.parents[2]->ensure_grad().data() : nullptr;
            for (int s = 0; s < N; ++s)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(s) * C + c) * inner;
                    T a = 0, b2 = 0;
                    for (std::size_t i = 0; i < inner; ++i) {
                        a += n.grad[base + i] * (*xhat)[base + i];
                        b2 += n.grad[base + i];
                    }
                    if (dg) dg[c] += a;
                    if (dbeta) dbeta[c] += b2;
                }
        }
        if (wants_grad(n, 0)) {
            auto& dx = n.parents[0]->ensure_grad();
            Buffer<T> dh(gsize);
            for (int s = 0; s < N; ++s)
                for (int g = 0; g < groups; ++g) {
                    const std::size_t base = (static_cast<std::size_t>(s) * C + g * cpg) * inner;
                    T m1 = 0, m2 = 0;
                    for (int c = 0; c < cpg; ++c)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t k = c * inner + i;
                            dh[k] = n.grad[base + k] * gv[g * cpg + c];
                            m1 += dh[k];
                            m2 += dh[k] * (*xhat)[base + k];
                        }
                    m1 /= static_cast<T>(gsize);
                    m2 /= static_cast<T>(gsize);
                    const T r = (*rstd)[s * groups + g];
                    for (std::size_t k = 0; k < gsize; ++k) dx[base + k] += r * (dh[k] - m1 - (*xhat)[base + k] * m2);
                }
        }
    });
}

// Normalizes over the last dimension; x: [..., D], gamma/beta: [D].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int D = x.dim(-1);
    const std::size_t rows = x.size() / D;
    Buffer<T> out(x.size());
    auto xhat = std::make_shared<Buffer<T>>(x.size());
    auto rstd = std::make_shared<Buffer<T>>(rows);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * D;
        T mean = 0;
        for (int i = 0; i < D; ++i) mean += row[i];
        mean /= D;
        T var = 0;
        for (int i = 0; i < D; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= D;
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (int i = 0; i < D; ++i) {
            const T h = (row[i] - mean) * rs;
            (*xhat)[r * D + i] = h;
            out[r * D + i] = h * gamma.values()[i] + beta.values()[i];
        }
    }
    return make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, [=](Node<T>& n) {
        const auto& gv = n.parents[1]->value;
        T* dg = wants_grad(n, 1) ? n.parents[1]->ensure_grad().data() : nullptr;
        T* dbeta = wants_grad(n, 2) ? n.parents[2]->ensure_grad().data() : nullptr;
        T* dx = wants_grad(n, 0) ? n.parents[0]->ensure_grad().data() : nullptr;
        Buffer<T> dh(D);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* dy = n.grad.data() + r * D;
            const T* h = xhat->data() + r * D;
            T m1 = 0, m2 = 0;
            for (int i = 0; i < D; ++i) {
                if (dg) dg[i] += dy[i] * h[i];
                if (dbeta) dbeta[i] += dy[i];
                dh[i] = dy[i] * gv[i];
                m1 += dh[i];
                m2 += dh[i] * h[i];
            }
            if (!dx) continue;
            m1 /= D;
            m2 /= D;
            for (int i = 0; i < D; ++i) dx[r * D + i] += (*rstd)[r] * (dh[i] - m1 - h[i] * m2);
        }
    });
}

// ---------------------------------------------------------------- attention

// Single-head scaled dot-product attention.
// q: [N, L, D], k: [N, M, D], v: [N, M, E] -> [N, L, E]
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
    using namespace detail;
    const int N = q.dim(0), L = q.dim(1), D = q.dim(2), M = k.dim(1), E = v.dim(2);
    if (k.dim(0) != N || v.dim(0) != N || k.dim(2) != D || v.dim(1) != M)
        throw ArgumentError("attention: incompatible q/k/v shapes " + to_string(q.shape()) + " " +
                            to_string(k.shape()) + " " + to_string(v.shape()));
    const T sc = T(1) / std::sqrt(static_cast<T>(D));
    auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(N) * L * M);
    Buffer<T> out(static_cast<std::size_t>(N) * L * E);
    for (int s = 0; s < N; ++s) {
        CMapR<T> qs(q.values().data() + static_cast<std::size_t>(s) * L * D, L, D);
        CMapR<T> ks(k.values().data() + static_cast<std::size_t>(s) * M * D, M, D);
        CMapR<T> vs(v.values().data() + static_cast<std::size_t>(s) * M * E, M, E);
        MapR<T> p(probs->data() + static_cast<std::size_t>(s) * L * M, L, M);
        p.noalias() = (qs * ks.transpose()) * sc;
        // scalar softmax: vectorized reductions would make results depend on
        // buffer alignment
        for (int i = 0; i < L; ++i) {
            T* row = &p(i, 0);
            T mx = row[0];
            for (int j = 1; j < M; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (int j = 0; j < M; ++j) sum += (row[j] = std::exp(row[j] - mx));
            for (int j = 0; j < M; ++j) row[j] /= sum;
        }
        MapR<T>(out.data() + static_cast<std::size_t>(s) * L * E, L, E).noalias() = p * vs;
    }
    return make_op<T>({N, L, E}, std::move(out), {q, k, v}, [=](Node<T>& n) {
        Buffer<T> dp(static_cast<std::size_t>(L) * M);
        for (int s = 0; s < N; ++s) {
            CMapR<T> qs(n.parents[0]->value.data() + static_cast<std::size_t>(s) * L * D, L, D);
            CMapR<T> ks(n.parents[1]->value.data() + static_cast<std::size_t>(s) * M * D, M, D);
            CMapR<T> vs(n.parents[2]->value.data() + static_cast<std::size_t>(s) * M * E, M, E);
            CMapR<T> p(probs->data() + static_cast<std::size_t>(s) * L * M, L, M);
            CMapR<T> dout(n.grad.data() + static_cast<std::size_t>(s) * L * E, L, E);
            if (wants_grad(n, 2))
                MapR<T>(n.parents[2]->ensure_grad().data() + static_cast<std::size_t>(s) * M * E, M, E).noalias() +=
                    p.transpose() * dout;
            if (!wants_grad(n, 0) && !wants_grad(n, 1)) continue;
            MapR<T> dS(dp.data(), L, M);
            dS.noalias() = dout * vs.transpose();
            for (int i = 0; i < L; ++i) {
                T dot = 0;
                for (int j = 0; j < M; ++j) dot += dS(i, j) * p(i, j);
                dS.row(i) = (p.row(i).array() * (dS.row(i).array() - dot)) * sc;
            }
            if (wants_grad(n, 0))
                MapR<T>(n.parents[0]->ensure_grad().data() + static_cast<std::size_t>(s) * L * D, L, D).noalias() +=
                    dS * ks;
            if (wants_grad(n, 1))
                MapR<T>(n.parents[1]->ensure_grad().data() + static_cast<std::size_t>(s) * M * D, M, D).noalias() +=
                    dS.transpose() * qs;
        }
    });
}

// ---------------------------------------------------------------- layout

// [N, C, H, W] -> [N, H*W, C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Buffer<T> out(x.size());
    const auto& xv = x.values();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p)
                out[(static_cast<std::size_t>(n) * HW + p) * C + c] = xv[(static_cast<std::size_t>(n) * C + c) * HW + p];
    return make_op<T>({N, HW, C}, std::move(out), {x}, [N, C, HW](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int s = 0; s < N; ++s)
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < HW; ++p)
                    g[(static_cast<std::size_t>(s) * C + c) * HW + p] += n.grad[(static_cast<std::size_t>(s) * HW + p) * C + c];
    });
}

// [N, H*W, C] -> [N, C, H, W]
template <typename T>
Var<T> from_tokens(const Var<T>& t, int H, int W) {
    const int N = t.dim(0), HW = t.dim(1), C = t.dim(2);
    if (HW != H * W) throw ArgumentError("from_tokens: token count does not match H*W");
    Buffer<T> out(t.size());
    const auto& tv = t.values();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p)
                out[(static_cast<std::size_t>(n) * C + c) * HW + p] = tv[(static_cast<std::size_t>(n) * HW + p) * C + c];
    return make_op<T>({N, C, H, W}, std::move(out), {t}, [N, C, HW](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int s = 0; s < N; ++s)
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < HW; ++p)
                    g[(static_cast<std::size_t>(s) * HW + p) * C + c] += n.grad[(static_cast<std::size_t>(s) * C + c) * HW + p];
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    if (b.dim(0) != N || a.size() / (N * Ca) != b.size() / (N * Cb))
        throw ArgumentError("concat_channels: incompatible " + to_string(a.shape()) + " " + to_string(b.shape()));
    const std::size_t inner = a.size() / (static_cast<std::size_t>(N) * Ca);
    Buffer<T> out(a.size() + b.size());
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.values().data() + n * Ca * inner, Ca * inner, out.data() + n * (Ca + Cb) * inner);
        std::copy_n(b.values().data() + n * Cb * inner, Cb * inner, out.data() + (n * (Ca + Cb) + Ca) * inner);
    }
    Shape shape = a.shape();
    shape[1] = Ca + Cb;
    return make_op<T>(std::move(shape), std::move(out), {a, b}, [N, Ca, Cb, inner](Node<T>& n) {
        for (int s = 0; s < N; ++s) {
            if (wants_grad(n, 0)) {
                auto& g = n.parents[0]->ensure_grad();
                for (std::size_t i = 0; i < Ca * inner; ++i) g[s * Ca * inner + i] += n.grad[s * (Ca + Cb) * inner + i];
            }
            if (wants_grad(n, 1)) {
                auto& g = n.parents[1]->ensure_grad();
                for (std::size_t i = 0; i < Cb * inner; ++i)
                    g[s * Cb * inner + i] += n.grad[(s * (Ca + Cb) + Ca) * inner + i];
            }
        }
    });
}

// Channels [c0, c1) of x: [N, C, ...]
template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
    const int N = x.dim(0), C = x.dim(1), Co = c1 - c0;
    if (c0 < 0 || c1 > C || Co <= 0) throw ArgumentError("slice_channels: bad range");
    const std::size_t inner = x.size() / (static_cast<std::size_t>(N) * C);
    Buffer<T> out(static_cast<std::size_t>(N) * Co * inner);
    for (int n = 0; n < N; ++n)
        std::copy_n(x.values().data() + (n * C + c0) * inner, Co * inner, out.data() + n * Co * inner);
    Shape shape = x.shape();
    shape[1] = Co;
    return make_op<T>(std::move(shape), std::move(out), {x}, [N, C, Co, c0, inner](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int s = 0; s < N; ++s)
            for (std::size_t i = 0; i < Co * inner; ++i) g[(s * C + c0) * inner + i] += n.grad[s * Co * inner + i];
    });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Buffer<T> out(x.size() * 4);
    const auto& xv = x.values();
    for (int nc = 0; nc < N * C; ++nc)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j)
                out[(static_cast<std::size_t>(nc) * 2 * H + i) * 2 * W + j] =
                    xv[(static_cast<std::size_t>(nc) * H + i / 2) * W + j / 2];
    return make_op<T>({N, C, 2 * H, 2 * W}, std::move(out), {x}, [N, C, H, W](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j)
                    g[(static_cast<std::size_t>(nc) * H + i / 2) * W + j / 2] +=
                        n.grad[(static_cast<std::size_t>(nc) * 2 * H + i) * 2 * W + j];
    });
}

// Non-overlapping f x f average pooling.
template <typename T>
Var<T> avg_pool(const Var<T>& x, int f) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % f || W % f) throw ArgumentError("avg_pool: size not divisible by factor");
    const int h = H / f, w = W / f;
    const T inv = T(1) / static_cast<T>(f * f);
    Buffer<T> out(static_cast<std::size_t>(N) * C * h * w, T(0));
    const auto& xv = x.values();
    for (int nc = 0; nc < N * C; ++nc)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                out[(static_cast<std::size_t>(nc) * h + i / f) * w + j / f] +=
                    xv[(static_cast<std::size_t>(nc) * H + i) * W + j] * inv;
    return make_op<T>({N, C, h, w}, std::move(out), {x}, [N, C, H, W, f, h, w, inv](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    g[(static_cast<std::size_t>(nc) * H + i) * W + j] +=
                        n.grad[(static_cast<std::size_t>(nc) * h + i / f) * w + j / f] * inv;
    });
}

// [N, L, D] -> [N, D]
template <typename T>
Var<T> mean_tokens(const Var<T>& x) {
    const int N = x.dim(0), L = x.dim(1), D = x.dim(2);
    Buffer<T> out(static_cast<std::size_t>(N) * D, T(0));
    for (int n = 0; n < N; ++n)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d) out[n * D + d] += x.values()[(static_cast<std::size_t>(n) * L + l) * D + d] / L;
    return make_op<T>({N, D}, std::move(out), {x}, [N, L, D](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (int s = 0; s < N; ++s)
            for (int l = 0; l < L; ++l)
                for (int d = 0; d < D; ++d) g[(static_cast<std::size_t>(s) * L + l) * D + d] += n.grad[s * D + d] / L;
    });
}

// ---------------------------------------------------------------- reductions and losses

template <typename T>
Var<T> mean(const Var<T>& x) {
    T s = 0;
    for (T v : x.values()) s += v;
    const T cnt = static_cast<T>(x.size());
    return make_op<T>({1}, {s / cnt}, {x}, [cnt](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (auto& v : g) v += n.grad[0] / cnt;
    });
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
    detail::check_same(pred.shape(), target.shape(), "mse_loss");
    T s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred.values()[i] - target.values()[i];
        s += d * d;
    }
    const T cnt = static_cast<T>(pred.size());
    return make_op<T>({1}, {s / cnt}, {pred, target}, [cnt](Node<T>& n) {
        const auto& p = n.parents[0]->value;
        const auto& t = n.parents[1]->value;
        const T k = T(2) * n.grad[0] / cnt;
        if (wants_grad(n, 0)) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (p[i] - t[i]);
        }
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (p[i] - t[i]);
        }
    });
}

// Numerically stable log(1 + exp(x)).
template <typename T>
inline T softplus(T x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Mean binary cross-entropy of logits against probability targets in [0, 1].
// Targets are treated as constants.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& targets) {
    detail::check_same(logits.shape(), targets.shape(), "bce_with_logits");
    T s = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const T z = logits.values()[i], y = targets.values()[i];
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        s += softplus(z) - y * z;
    }
    const T cnt = static_cast<T>(logits.size());
    Var<T> tgt = targets.detach();
    return make_op<T>({1}, {s / cnt}, {logits, tgt}, [cnt](Node<T>& n) {
        const auto& z = n.parents[0]->value;
        const auto& y = n.parents[1]->value;
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] / cnt * (T(1) / (T(1) + std::exp(-z[i])) - y[i]);
    });
}

// KL(N(mu, exp(logvar)) || N(0, 1)), averaged over entries.
template <typename T>
Var<T> gaussian_kl(const Var<T>& mu, const Var<T>& logvar) {
    detail::check_same(mu.shape(), logvar.shape(), "gaussian_kl");
    T s = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const T m = mu.values()[i], lv = logvar.values()[i];
        s += T(0.5) * (m * m + std::exp(lv) - T(1) - lv);
    }
    const T cnt = static_cast<T>(mu.size());
    return make_op<T>({1}, {s / cnt}, {mu, logvar}, [cnt](Node<T>& n) {
        const auto& m = n.parents[0]->value;
        const auto& lv = n.parents[1]->value;
        const T k = n.grad[0] / cnt;
        if (wants_grad(n, 0)) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * m[i];
        }
        if (wants_grad(n, 1)) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * T(0.5) * (std::exp(lv[i]) - T(1));
        }
    });
}

// Weighted sum of scalar losses.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, T wa, const Var<T>& b, T wb) {
    return add(scale(a, wa), scale(b, wb));
}

}  // namespace semsr::nn
