#include "picr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace picr {

namespace {

thread_local std::int64_t g_flops = 0;

// C[M,N] += A[M,K] * B[K,N]; row-major, inner loop contiguous.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<std::size_t>(i) * k;
        T* cr = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const T av = ar[l];
            const T* br = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T. Dot products over K with independent partial
// sums so the loop vectorizes without FP reassociation.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    constexpr int W = 8;
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<std::size_t>(i) * k;
        T* cr = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* br = b + static_cast<std::size_t>(j) * k;
            T acc[W] = {};
            int l = 0;
            for (; l + W <= k; l += W)
                for (int w = 0; w < W; ++w) acc[w] += ar[l + w] * br[l + w];
            T s = 0;
            for (; l < k; ++l) s += ar[l] * br[l];
            for (int w = 0; w < W; ++w) s += acc[w];
            cr[j] += s;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N].
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int l = 0; l < k; ++l) {
        const T* ar = a + static_cast<std::size_t>(l) * m;
        const T* br = b + static_cast<std::size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            const T av = ar[i];
            T* cr = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// --- broadcasting (align-right) ---

struct BcastPlan {
    std::vector<int> out_shape;
    std::int64_t numel = 0;
    std::vector<std::int64_t> sa, sb;  // per out-dim strides into a and b, 0 when broadcast
    bool same = false;                 // identical shapes fast path
};

BcastPlan bcast_plan(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
    BcastPlan p;
    if (a == b) {
        p.out_shape = a;
        p.numel = detail::shape_numel(a);
        p.same = true;
        return p;
    }
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    p.out_shape.resize(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) {
        const int da = d - (r - ra), db = d - (r - rb);
        const int va = da >= 0 ? a[static_cast<std::size_t>(da)] : 1;
        const int vb = db >= 0 ? b[static_cast<std::size_t>(db)] : 1;
        if (va != vb && va != 1 && vb != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " do not broadcast");
        p.out_shape[static_cast<std::size_t>(d)] = std::max(va, vb);
    }
    p.numel = detail::shape_numel(p.out_shape);
    // strides of a and b in their own layouts, expanded to out rank
    std::vector<std::int64_t> stra(static_cast<std::size_t>(r), 0), strb(static_cast<std::size_t>(r), 0);
    std::int64_t acc = 1;
    for (int d = ra - 1; d >= 0; --d) {
        stra[static_cast<std::size_t>(d + r - ra)] = a[static_cast<std::size_t>(d)] == 1 ? 0 : acc;
        acc *= a[static_cast<std::size_t>(d)];
    }
    acc = 1;
    for (int d = rb - 1; d >= 0; --d) {
        strb[static_cast<std::size_t>(d + r - rb)] = b[static_cast<std::size_t>(d)] == 1 ? 0 : acc;
        acc *= b[static_cast<std::size_t>(d)];
    }
    p.sa = std::move(stra);
    p.sb = std::move(strb);
    return p;
}

// Calls f(out_index, offset_a, offset_b) over the broadcast output.
template <typename F>
void bcast_for_each(const BcastPlan& p, F&& f) {
    if (p.same) {
        for (std::int64_t i = 0; i < p.numel; ++i) f(i, i, i);
        return;
    }
    const int r = static_cast<int>(p.out_shape.size());
    std::vector<int> coord(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < p.numel; ++i) {
        f(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++coord[ud];
            oa += p.sa[ud];
            ob += p.sb[ud];
            if (coord[ud] < p.out_shape[ud]) break;
            coord[ud] = 0;
            oa -= p.sa[ud] * p.out_shape[ud];
            ob -= p.sb[ud] * p.out_shape[ud];
        }
    }
}

enum class Bin { Add, Sub, Mul, Div };

template <typename T, Bin OP>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const char* name) {
    BcastPlan plan = bcast_plan(a.shape(), b.shape(), name);
    TensorT<T> out(plan.out_shape);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    bcast_for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        if constexpr (OP == Bin::Add) po[i] = pa[ia] + pb[ib];
        if constexpr (OP == Bin::Sub) po[i] = pa[ia] - pb[ib];
        if constexpr (OP == Bin::Mul) po[i] = pa[ia] * pb[ib];
        if constexpr (OP == Bin::Div) po[i] = pa[ia] / pb[ib];
    });
    g_flops += plan.numel;

    detail::OpCtx<T> ctx{&a, &b};
    if (ctx.active()) {
        auto ga = ctx.grad_in(a), gb = ctx.grad_in(b);
        auto go = ctx.grad_out(out);
        auto da = a.data_ptr(), db = b.data_ptr();
        ctx.record([plan, ga, gb, go, da, db]() {
            const T* g = go->data();
            const T* pa2 = da->data();
            const T* pb2 = db->data();
            T* pga = ga ? ga->data() : nullptr;
            T* pgb = gb ? gb->data() : nullptr;
            bcast_for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                if constexpr (OP == Bin::Add) {
                    if (pga) pga[ia] += g[i];
                    if (pgb) pgb[ib] += g[i];
                }
                if constexpr (OP == Bin::Sub) {
                    if (pga) pga[ia] += g[i];
                    if (pgb) pgb[ib] -= g[i];
                }
                if constexpr (OP == Bin::Mul) {
                    if (pga) pga[ia] += g[i] * pb2[ib];
                    if (pgb) pgb[ib] += g[i] * pa2[ia];
                }
                if constexpr (OP == Bin::Div) {
                    if (pga) pga[ia] += g[i] / pb2[ib];
                    if (pgb) pgb[ib] -= g[i] * pa2[ia] / (pb2[ib] * pb2[ib]);
                }
            });
        });
    }
    return out;
}

template <typename T, typename FwdFn, typename GradFn>
TensorT<T> unary_op(const TensorT<T>& x, FwdFn fwd, GradFn dfn) {
    TensorT<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    g_flops += n;

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        auto dx = x.data_ptr();
        auto dy = out.data_ptr();
        ctx.record([gx, go, dx, dy, n, dfn]() {
            const T* g = go->data();
            const T* px2 = dx->data();
            const T* py2 = dy->data();
            T* pg = gx->data();
            for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * dfn(px2[i], py2[i]);
        });
    }
    return out;
}

}  // namespace

std::int64_t flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }

// --- linear algebra ---

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({m, n});
    gemm_nn(a.data(), b.data(), out.data(), m, k, n);
    g_flops += static_cast<std::int64_t>(m) * k * n;

    detail::OpCtx<T> ctx{&a, &b};
    if (ctx.active()) {
        auto ga = ctx.grad_in(a), gb = ctx.grad_in(b);
        auto go = ctx.grad_out(out);
        auto da = a.data_ptr(), db = b.data_ptr();
        ctx.record([ga, gb, go, da, db, m, k, n]() {
            if (ga) gemm_nt(go->data(), db->data(), ga->data(), m, n, k);
            if (gb) gemm_tn(da->data(), go->data(), gb->data(), k, m, n);
            g_flops += 2ll * m * k * n;
        });
    }
    return out;
}

template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool transpose_b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int bk = transpose_b ? b.dim(2) : b.dim(1);
    const int n = transpose_b ? b.dim(1) : b.dim(2);
    if (bk != k)
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    TensorT<T> out({bs, m, n});
    const std::int64_t sa = static_cast<std::int64_t>(m) * k;
    const std::int64_t sb = static_cast<std::int64_t>(b.dim(1)) * b.dim(2);
    const std::int64_t so = static_cast<std::int64_t>(m) * n;
    for (int i = 0; i < bs; ++i) {
        const T* pa = a.data() + i * sa;
        const T* pb = b.data() + i * sb;
        T* po = out.data() + i * so;
        if (transpose_b)
            gemm_nt(pa, pb, po, m, k, n);
        else
            gemm_nn(pa, pb, po, m, k, n);
    }
    g_flops += static_cast<std::int64_t>(bs) * m * k * n;

    detail::OpCtx<T> ctx{&a, &b};
    if (ctx.active()) {
        auto ga = ctx.grad_in(a), gb = ctx.grad_in(b);
        auto go = ctx.grad_out(out);
        auto da = a.data_ptr(), db = b.data_ptr();
        ctx.record([ga, gb, go, da, db, bs, m, k, n, sa, sb, so, transpose_b]() {
            for (int i = 0; i < bs; ++i) {
                const T* g = go->data() + i * so;
                const T* pa = da->data() + i * sa;
                const T* pb = db->data() + i * sb;
                if (transpose_b) {
                    // C = A * B^T with B [n, k]
                    if (ga) gemm_nn(g, pb, ga->data() + i * sa, m, n, k);
                    if (gb) gemm_tn(g, pa, gb->data() + i * sb, n, m, k);
                } else {
                    if (ga) gemm_nt(g, pb, ga->data() + i * sa, m, n, k);
                    if (gb) gemm_tn(pa, g, gb->data() + i * sb, k, m, n);
                }
            }
            g_flops += 2ll * bs * m * k * n;
        });
    }
    return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    TensorT<T> y = matmul(x, w);
    if (!b.defined()) return y;
    return add(y, b);
}

// --- elementwise ---

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T, Bin::Add>(a, b, "add");
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T, Bin::Sub>(a, b, "sub");
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T, Bin::Mul>(a, b, "mul");
}
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T, Bin::Div>(a, b, "div");
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, double v) {
    const T c = static_cast<T>(v);
    return unary_op(
        x, [c](T a) { return a + c; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, double v) {
    const T c = static_cast<T>(v);
    return unary_op(
        x, [c](T a) { return a * c; }, [c](T, T) { return c; });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    return unary_op(
        x, [](T a) { return a > T(0) ? a : T(0); }, [](T a, T) { return a > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    return unary_op(
        x, [](T a) { return T(1) / (T(1) + std::exp(-a)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary_op(
        x, [](T a) { return static_cast<T>(0.5 * a * (1.0 + std::erf(a * inv_sqrt2))); },
        [](T a, T) {
            const double cdf = 0.5 * (1.0 + std::erf(a * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * static_cast<double>(a) * a);
            return static_cast<T>(cdf + a * pdf);
        });
}

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: scalar input");
    const int c = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / c;
    TensorT<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * c;
        T* yr = po + r * c;
        T mx = xr[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        T s = 0;
        for (int j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            s += yr[j];
        }
        const T inv = T(1) / s;
        for (int j = 0; j < c; ++j) yr[j] *= inv;
    }
    g_flops += 5 * x.numel();

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        auto dy = out.data_ptr();
        ctx.record([gx, go, dy, rows, c]() {
            const T* g = go->data();
            const T* y = dy->data();
            T* pg = gx->data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c;
                const T* yr = y + r * c;
                T dot = 0;
                for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
                T* pgr = pg + r * c;
                for (int j = 0; j < c; ++j) pgr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta) {
    if (x.rank() < 1) throw ShapeError("layernorm: scalar input");
    const int c = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw ShapeError("layernorm: params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match channels of " + shape_str(x.shape()));
    constexpr double eps = 1e-5;
    const std::int64_t rows = x.numel() / c;
    TensorT<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* px = x.data();
    const T* pgm = gamma.data();
    const T* pbt = beta.data();
    T* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * c;
        double mu = 0;
        for (int j = 0; j < c; ++j) mu += xr[j];
        mu /= c;
        double var = 0;
        for (int j = 0; j < c; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= c;
        const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<std::size_t>(r)] = istd;
        T* hr = xhat->data() + r * c;
        T* yr = po + r * c;
        for (int j = 0; j < c; ++j) {
            hr[j] = static_cast<T>((xr[j] - mu) * istd);
            yr[j] = pgm[j] * hr[j] + pbt[j];
        }
    }
    g_flops += 8 * x.numel();

    detail::OpCtx<T> ctx{&x, &gamma, &beta};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto gg = ctx.grad_in(gamma);
        auto gb = ctx.grad_in(beta);
        auto go = ctx.grad_out(out);
        auto dg = gamma.data_ptr();
        ctx.record([gx, gg, gb, go, dg, xhat, inv_std, rows, c]() {
            const T* g = go->data();
            const T* gm = dg->data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c;
                const T* hr = xhat->data() + r * c;
                if (gg || gb) {
                    for (int j = 0; j < c; ++j) {
                        if (gg) (*gg)[static_cast<std::size_t>(j)] += gr[j] * hr[j];
                        if (gb) (*gb)[static_cast<std::size_t>(j)] += gr[j];
                    }
                }
                if (gx) {
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int j = 0; j < c; ++j) {
                        const double dh = static_cast<double>(gr[j]) * gm[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    const T istd = (*inv_std)[static_cast<std::size_t>(r)];
                    T* pgr = gx->data() + r * c;
                    for (int j = 0; j < c; ++j) {
                        const double dh = static_cast<double>(gr[j]) * gm[j];
                        pgr[j] += static_cast<T>((dh - m1 - hr[j] * m2) * istd);
                    }
                }
            }
        });
    }
    return out;
}

// --- reductions ---

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    TensorT<T> out({1});
    double s = 0;
    const T* px = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) s += px[i];
    out.data()[0] = static_cast<T>(s);
    g_flops += x.numel();

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        const std::int64_t n = x.numel();
        ctx.record([gx, go, n]() {
            const T g = (*go)[0];
            T* pg = gx->data();
            for (std::int64_t i = 0; i < n; ++i) pg[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// --- shape ops ---

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> shape) {
    // Pure metadata: shares both storage and autograd identity.
    return x.view(std::move(shape));
}

template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch for " + shape_str(x.shape()));
    std::vector<int> seen(static_cast<std::size_t>(r), 0);
    std::vector<int> out_shape(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) {
        const int p = perm[static_cast<std::size_t>(d)];
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]++)
            throw ShapeError("permute: invalid permutation");
        out_shape[static_cast<std::size_t>(d)] = x.dim(p);
    }
    // in strides, then per-out-dim strides into the input
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(r), 1);
    for (int d = r - 2; d >= 0; --d)
        in_stride[static_cast<std::size_t>(d)] = in_stride[static_cast<std::size_t>(d + 1)] * x.dim(d + 1);
    std::vector<std::int64_t> map_stride(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) map_stride[static_cast<std::size_t>(d)] = in_stride[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];

    TensorT<T> out(out_shape);
    const T* px = x.data();
    T* po = out.data();
    const std::int64_t n = x.numel();
    std::vector<int> coord(static_cast<std::size_t>(r), 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = px[off];
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++coord[ud];
            off += map_stride[ud];
            if (coord[ud] < out_shape[ud]) break;
            coord[ud] = 0;
            off -= map_stride[ud] * out_shape[ud];
        }
    }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, map_stride, out_shape, n, r]() {
            const T* g = go->data();
            T* pg = gx->data();
            std::vector<int> cd(static_cast<std::size_t>(r), 0);
            std::int64_t off2 = 0;
            for (std::int64_t i = 0; i < n; ++i) {
                pg[off2] += g[i];
                for (int d = r - 1; d >= 0; --d) {
                    auto ud = static_cast<std::size_t>(d);
                    ++cd[ud];
                    off2 += map_stride[ud];
                    if (cd[ud] < out_shape[ud]) break;
                    cd[ud] = 0;
                    off2 -= map_stride[ud] * out_shape[ud];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const int r = xs[0].rank();
    if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
    std::vector<int> out_shape = xs[0].shape();
    int total = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) throw ShapeError("concat: rank mismatch " + shape_str(x.shape()));
        for (int d = 0; d < r; ++d)
            if (d != axis && x.dim(d) != out_shape[static_cast<std::size_t>(d)])
                throw ShapeError("concat: shape " + shape_str(x.shape()) + " incompatible with " +
                                 shape_str(xs[0].shape()));
        total += x.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    TensorT<T> out(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
    const std::int64_t out_row = static_cast<std::int64_t>(total) * inner;

    std::int64_t off_axis = 0;
    std::vector<std::int64_t> offsets;
    for (const auto& x : xs) {
        const std::int64_t len = static_cast<std::int64_t>(x.dim(axis)) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * out_row + off_axis * inner, x.data() + o * len,
                        static_cast<std::size_t>(len) * sizeof(T));
        offsets.push_back(off_axis);
        off_axis += x.dim(axis);
    }

    std::vector<const TensorT<T>*> ptrs;
    for (const auto& x : xs) ptrs.push_back(&x);
    detail::OpCtx<T> ctx(ptrs);
    if (ctx.active()) {
        std::vector<std::shared_ptr<std::vector<T>>> gs;
        std::vector<std::int64_t> lens;
        for (const auto& x : xs) {
            gs.push_back(ctx.grad_in(x));
            lens.push_back(static_cast<std::int64_t>(x.dim(axis)) * inner);
        }
        auto go = ctx.grad_out(out);
        ctx.record([gs, lens, offsets, go, outer, out_row, inner]() {
            const T* g = go->data();
            for (std::size_t k = 0; k < gs.size(); ++k) {
                if (!gs[k]) continue;
                T* pg = gs[k]->data();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const T* src = g + o * out_row + offsets[k] * inner;
                    T* dst = pg + o * lens[k];
                    for (std::int64_t i = 0; i < lens[k]; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
    const int r = x.rank();
    if (axis < 0 || axis >= r || start < 0 || len <= 0 || start + len > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    std::vector<int> out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    TensorT<T> out(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const std::int64_t in_row = static_cast<std::int64_t>(x.dim(axis)) * inner;
    const std::int64_t out_len = static_cast<std::int64_t>(len) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_len, x.data() + o * in_row + static_cast<std::int64_t>(start) * inner,
                    static_cast<std::size_t>(out_len) * sizeof(T));

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, outer, inner, in_row, out_len, start]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (std::int64_t o = 0; o < outer; ++o) {
                T* dst = pg + o * in_row + static_cast<std::int64_t>(start) * inner;
                const T* src = g + o * out_len;
                for (std::int64_t i = 0; i < out_len; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> take_rows(const TensorT<T>& table, const std::vector<int>& idx) {
    if (table.rank() != 2) throw ShapeError("take_rows: table must be rank 2, got " + shape_str(table.shape()));
    const int rows = table.dim(0), cols = table.dim(1);
    for (int i : idx)
        if (i < 0 || i >= rows) throw ShapeError("take_rows: index out of range");
    TensorT<T> out({static_cast<int>(idx.size()), cols});
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::memcpy(out.data() + k * cols, table.data() + static_cast<std::size_t>(idx[k]) * cols,
                    static_cast<std::size_t>(cols) * sizeof(T));

    detail::OpCtx<T> ctx{&table};
    if (ctx.active()) {
        auto gt = ctx.grad_in(table);
        auto go = ctx.grad_out(out);
        ctx.record([gt, go, idx, cols]() {
            const T* g = go->data();
            T* pg = gt->data();
            for (std::size_t k = 0; k < idx.size(); ++k) {
                T* dst = pg + static_cast<std::size_t>(idx[k]) * cols;
                const T* src = g + k * cols;
                for (int j = 0; j < cols; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// --- spatial ops ---

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int pad, int stride) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError("conv2d: expected x[C,H,W] and w[Co,Ci,kh,kw], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci)
        throw ShapeError("conv2d: input channels of " + shape_str(x.shape()) + " do not match kernel " +
                         shape_str(w.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel dims must be odd in " + shape_str(w.shape()));
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel " + shape_str(w.shape()));
    if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0)
        throw ShapeError("conv2d: geometry (" + std::to_string(h) + "+" + std::to_string(2 * pad) + "-" +
                         std::to_string(kh) + ") not divisible by stride " + std::to_string(stride));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match output channels");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    const int K = ci * kh * kw;
    const std::int64_t N = static_cast<std::int64_t>(oh) * ow;

    // k-major column matrix so the forward gemm runs row-contiguous
    auto im2col = [=](const T* src, std::vector<T>& col) {
        col.assign(static_cast<std::size_t>(K) * N, T(0));
        for (int c = 0; c < ci; ++c) {
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    T* dst = col.data() + (static_cast<std::size_t>(c) * kh * kw + static_cast<std::size_t>(ky) * kw + kx) * N;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        const T* row = src + (static_cast<std::size_t>(c) * h + iy) * wd;
                        T* drow = dst + static_cast<std::size_t>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < wd) drow[ox] = row[ix];
                        }
                    }
                }
            }
        }
    };

    TensorT<T> out({co, oh, ow});
    {
        std::vector<T> col;
        im2col(x.data(), col);
        gemm_nn(w.data(), col.data(), out.data(), co, K, static_cast<int>(N));
    }
    if (bias.defined()) {
        T* po = out.data();
        const T* pb = bias.data();
        for (int c = 0; c < co; ++c)
            for (std::int64_t i = 0; i < N; ++i) po[c * N + i] += pb[c];
    }
    g_flops += static_cast<std::int64_t>(co) * K * N;

    detail::OpCtx<T> ctx{&x, &w, &bias};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto gw = ctx.grad_in(w);
        auto gb = ctx.grad_in(bias);
        auto go = ctx.grad_out(out);
        auto dx = x.data_ptr(), dw = w.data_ptr();
        ctx.record([=]() {
            const T* g = go->data();
            if (gb) {
                T* pgb = gb->data();
                for (int c = 0; c < co; ++c) {
                    T s = 0;
                    for (std::int64_t i = 0; i < N; ++i) s += g[c * N + i];
                    pgb[c] += s;
                }
            }
            if (gw) {
                std::vector<T> col;
                im2col(dx->data(), col);
                gemm_nt(g, col.data(), gw->data(), co, static_cast<int>(N), K);
            }
            if (gx) {
                std::vector<T> gcol(static_cast<std::size_t>(K) * N, T(0));
                gemm_tn(dw->data(), g, gcol.data(), K, co, static_cast<int>(N));
                T* pgx = gx->data();
                for (int c = 0; c < ci; ++c) {
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const T* src = gcol.data() + (static_cast<std::size_t>(c) * kh * kw +
                                                          static_cast<std::size_t>(ky) * kw + kx) * N;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                T* row = pgx + (static_cast<std::size_t>(c) * h + iy) * wd;
                                const T* srow = src + static_cast<std::size_t>(oy) * ow;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < wd) row[ix] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
            g_flops += 2ll * co * K * N;
        });
    }
    return out;
}

template <typename T>
TensorT<T> maxpool2x(const TensorT<T>& x) {
    if (x.rank() != 3 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
        throw ShapeError("maxpool2x: needs [C,H,W] with even H,W, got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = h / 2, ow = w / 2;
    TensorT<T> out({c, oh, ow});
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
    const T* px = x.data();
    T* po = out.data();
    std::int64_t oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            for (int z = 0; z < ow; ++z, ++oi) {
                std::int64_t base = (static_cast<std::int64_t>(ch) * h + 2 * y) * w + 2 * z;
                std::int64_t best = base;
                T bv = px[base];
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::int64_t i = base + static_cast<std::int64_t>(dy) * w + dx;
                        if (px[i] > bv) {
                            bv = px[i];
                            best = i;
                        }
                    }
                po[oi] = bv;
                (*arg)[static_cast<std::size_t>(oi)] = best;
            }
        }
    }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        const std::int64_t n = out.numel();
        ctx.record([gx, go, arg, n]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (std::int64_t i = 0; i < n; ++i) pg[(*arg)[static_cast<std::size_t>(i)]] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.rank() != 3) throw ShapeError("global_avg_pool: needs [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    TensorT<T> out({c});
    const T* px = x.data();
    for (int ch = 0; ch < c; ++ch) {
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += px[ch * hw + i];
        out.data()[ch] = static_cast<T>(s / static_cast<double>(hw));
    }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, c, hw]() {
            T* pg = gx->data();
            for (int ch = 0; ch < c; ++ch) {
                const T g = (*go)[static_cast<std::size_t>(ch)] / static_cast<T>(hw);
                for (std::int64_t i = 0; i < hw; ++i) pg[ch * hw + i] += g;
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> upsample2x_nearest(const TensorT<T>& x) {
    if (x.rank() != 3) throw ShapeError("upsample2x_nearest: needs [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    TensorT<T> out({c, 2 * h, 2 * w});
    const T* px = x.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
            const T* row = px + (static_cast<std::int64_t>(ch) * h + y / 2) * w;
            T* orow = po + (static_cast<std::int64_t>(ch) * 2 * h + y) * 2 * w;
            for (int z = 0; z < 2 * w; ++z) orow[z] = row[z / 2];
        }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, c, h, w]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < 2 * h; ++y) {
                    T* row = pg + (static_cast<std::int64_t>(ch) * h + y / 2) * w;
                    const T* grow = g + (static_cast<std::int64_t>(ch) * 2 * h + y) * 2 * w;
                    for (int z = 0; z < 2 * w; ++z) row[z / 2] += grow[z];
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w) {
    if (x.rank() != 3) throw ShapeError("bilinear_resize: needs [C,H,W], got " + shape_str(x.shape()));
    if (out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_resize: non-positive output size");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    TensorT<T> out({c, out_h, out_w});

    // pixel-center sampling
    struct Tap {
        int i0, i1;
        T w0, w1;
    };
    auto taps = [](int in, int outn) {
        std::vector<Tap> t(static_cast<std::size_t>(outn));
        const double scale = static_cast<double>(in) / outn;
        for (int o = 0; o < outn; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
            const int i0 = static_cast<int>(std::floor(src));
            const int i1 = std::min(i0 + 1, in - 1);
            const double f = src - i0;
            t[static_cast<std::size_t>(o)] = Tap{i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
        }
        return t;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps(h, out_h));
    auto tx = std::make_shared<std::vector<Tap>>(taps(w, out_w));

    const T* px = x.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = px + static_cast<std::int64_t>(ch) * h * w;
        for (int y = 0; y < out_h; ++y) {
            const Tap& a = (*ty)[static_cast<std::size_t>(y)];
            T* orow = po + (static_cast<std::int64_t>(ch) * out_h + y) * out_w;
            for (int z = 0; z < out_w; ++z) {
                const Tap& b = (*tx)[static_cast<std::size_t>(z)];
                orow[z] = a.w0 * (b.w0 * plane[a.i0 * w + b.i0] + b.w1 * plane[a.i0 * w + b.i1]) +
                          a.w1 * (b.w0 * plane[a.i1 * w + b.i0] + b.w1 * plane[a.i1 * w + b.i1]);
            }
        }
    }
    g_flops += out.numel() * 4;

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, ty, tx, c, h, w, out_h, out_w]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int ch = 0; ch < c; ++ch) {
                T* plane = pg + static_cast<std::int64_t>(ch) * h * w;
                for (int y = 0; y < out_h; ++y) {
                    const Tap& a = (*ty)[static_cast<std::size_t>(y)];
                    const T* grow = g + (static_cast<std::int64_t>(ch) * out_h + y) * out_w;
                    for (int z = 0; z < out_w; ++z) {
                        const Tap& b = (*tx)[static_cast<std::size_t>(z)];
                        const T gv = grow[z];
                        plane[a.i0 * w + b.i0] += a.w0 * b.w0 * gv;
                        plane[a.i0 * w + b.i1] += a.w0 * b.w1 * gv;
                        plane[a.i1 * w + b.i0] += a.w1 * b.w0 * gv;
                        plane[a.i1 * w + b.i1] += a.w1 * b.w1 * gv;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> pad_reflect2d(const TensorT<T>& x, int p) {
    if (x.rank() != 3) throw ShapeError("pad_reflect2d: needs [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (p < 0 || p > h - 1 || p > w - 1)
        throw ShapeError("pad_reflect2d: pad " + std::to_string(p) + " too large for " + shape_str(x.shape()));
    const int oh = h + 2 * p, ow = w + 2 * p;
    auto reflect = [](int i, int n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    TensorT<T> out({c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            const int iy = reflect(y - p, h);
            const T* row = px + (static_cast<std::int64_t>(ch) * h + iy) * w;
            T* orow = po + (static_cast<std::int64_t>(ch) * oh + y) * ow;
            for (int z = 0; z < ow; ++z) orow[z] = row[reflect(z - p, w)];
        }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, c, h, w, p, oh, ow, reflect]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y) {
                    const int iy = reflect(y - p, h);
                    T* row = pg + (static_cast<std::int64_t>(ch) * h + iy) * w;
                    const T* grow = g + (static_cast<std::int64_t>(ch) * oh + y) * ow;
                    for (int z = 0; z < ow; ++z) row[reflect(z - p, w)] += grow[z];
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> extract_patches(const TensorT<T>& x, int p) {
    if (x.rank() != 3) throw ShapeError("extract_patches: needs [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw ShapeError("extract_patches: " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(p));
    const int gh = h / p, gw = w / p;
    TensorT<T> out({gh * gw, p * p * c});
    const T* px = x.data();
    T* po = out.data();
    for (int gy = 0; gy < gh; ++gy)
        for (int gx2 = 0; gx2 < gw; ++gx2) {
            T* row = po + (static_cast<std::int64_t>(gy) * gw + gx2) * (p * p * c);
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        row[(dy * p + dx) * c + ch] =
                            px[(static_cast<std::int64_t>(ch) * h + gy * p + dy) * w + gx2 * p + dx];
        }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, c, h, w, p, gh, gw]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int gy = 0; gy < gh; ++gy)
                for (int gx2 = 0; gx2 < gw; ++gx2) {
                    const T* row = g + (static_cast<std::int64_t>(gy) * gw + gx2) * (p * p * c);
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx)
                            for (int ch = 0; ch < c; ++ch)
                                pg[(static_cast<std::int64_t>(ch) * h + gy * p + dy) * w + gx2 * p + dx] +=
                                    row[(dy * p + dx) * c + ch];
                }
        });
    }
    return out;
}

// --- token grid ops [H,W,C] ---

template <typename T>
TensorT<T> pad_grid(const TensorT<T>& x, int pad_h, int pad_w) {
    if (x.rank() != 3) throw ShapeError("pad_grid: needs [H,W,C], got " + shape_str(x.shape()));
    if (pad_h < 0 || pad_w < 0) throw ShapeError("pad_grid: negative padding");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = h + pad_h, ow = w + pad_w;
    TensorT<T> out({oh, ow, c});
    const T* px = x.data();
    T* po = out.data();
    for (int y = 0; y < h; ++y)
        std::memcpy(po + static_cast<std::int64_t>(y) * ow * c, px + static_cast<std::int64_t>(y) * w * c,
                    static_cast<std::size_t>(w) * c * sizeof(T));

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, h, w, c, ow]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int y = 0; y < h; ++y) {
                const T* src = g + static_cast<std::int64_t>(y) * ow * c;
                T* dst = pg + static_cast<std::int64_t>(y) * w * c;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(w) * c; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> crop_grid(const TensorT<T>& x, int h, int w) {
    if (x.rank() != 3 || h > x.dim(0) || w > x.dim(1) || h <= 0 || w <= 0)
        throw ShapeError("crop_grid: crop " + std::to_string(h) + "x" + std::to_string(w) +
                         " invalid for " + shape_str(x.shape()));
    const int ih = x.dim(0), iw = x.dim(1), c = x.dim(2);
    (void)ih;
    TensorT<T> out({h, w, c});
    const T* px = x.data();
    T* po = out.data();
    for (int y = 0; y < h; ++y)
        std::memcpy(po + static_cast<std::int64_t>(y) * w * c, px + static_cast<std::int64_t>(y) * iw * c,
                    static_cast<std::size_t>(w) * c * sizeof(T));

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, h, w, c, iw]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int y = 0; y < h; ++y) {
                const T* src = g + static_cast<std::int64_t>(y) * w * c;
                T* dst = pg + static_cast<std::int64_t>(y) * iw * c;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(w) * c; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> roll_grid(const TensorT<T>& x, int shift_h, int shift_w) {
    if (x.rank() != 3) throw ShapeError("roll_grid: needs [H,W,C], got " + shape_str(x.shape()));
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    auto modp = [](int a, int n) { return ((a % n) + n) % n; };
    TensorT<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int y = 0; y < h; ++y) {
        const int sy = modp(y - shift_h, h);
        for (int z = 0; z < w; ++z) {
            const int sx = modp(z - shift_w, w);
            std::memcpy(po + (static_cast<std::int64_t>(y) * w + z) * c,
                        px + (static_cast<std::int64_t>(sy) * w + sx) * c, static_cast<std::size_t>(c) * sizeof(T));
        }
    }

    detail::OpCtx<T> ctx{&x};
    if (ctx.active()) {
        auto gx = ctx.grad_in(x);
        auto go = ctx.grad_out(out);
        ctx.record([gx, go, h, w, c, shift_h, shift_w, modp]() {
            const T* g = go->data();
            T* pg = gx->data();
            for (int y = 0; y < h; ++y) {
                const int sy = modp(y - shift_h, h);
                for (int z = 0; z < w; ++z) {
                    const int sx = modp(z - shift_w, w);
                    T* dst = pg + (static_cast<std::int64_t>(sy) * w + sx) * c;
                    const T* src = g + (static_cast<std::int64_t>(y) * w + z) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> bce_mean(const TensorT<T>& s, const TensorT<T>& g) {
    if (s.shape() != g.shape())
        throw ShapeError("bce: prediction " + shape_str(s.shape()) + " vs target " + shape_str(g.shape()));
    constexpr double eps = 1e-7;
    const std::int64_t n = s.numel();
    const T* ps = s.data();
    const T* pg = g.data();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double sv = std::min(std::max(static_cast<double>(ps[i]), eps), 1.0 - eps);
        acc -= pg[i] * std::log(sv) + (1.0 - pg[i]) * std::log(1.0 - sv);
    }
    TensorT<T> out({1});
    out.data()[0] = static_cast<T>(acc / static_cast<double>(n));
    g_flops += 4 * n;

    detail::OpCtx<T> ctx{&s, &g};
    if (ctx.active()) {
        auto gs = ctx.grad_in(s);
        auto gg = ctx.grad_in(g);
        auto go = ctx.grad_out(out);
        auto ds = s.data_ptr(), dg = g.data_ptr();
        ctx.record([gs, gg, go, ds, dg, n]() {
            constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
            const T gv = (*go)[0] / static_cast<T>(n);
            const T* ps2 = ds->data();
            const T* pg2 = dg->data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double sv = static_cast<double>(ps2[i]);
                if (gs && sv > lo && sv < hi)
                    (*gs)[static_cast<std::size_t>(i)] +=
                        gv * static_cast<T>((sv - pg2[i]) / (sv * (1.0 - sv)));
                if (gg) {
                    const double sc = std::min(std::max(sv, lo), hi);
                    (*gg)[static_cast<std::size_t>(i)] += gv * static_cast<T>(std::log((1.0 - sc) / sc));
                }
            }
        });
    }
    return out;
}

#define PICR_INSTANTIATE_OPS(T)                                                                  \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                         \
    template TensorT<T> bmm<T>(const TensorT<T>&, const TensorT<T>&, bool);                      \
    template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);      \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                            \
    template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                            \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                            \
    template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);                            \
    template TensorT<T> add_scalar<T>(const TensorT<T>&, double);                                \
    template TensorT<T> mul_scalar<T>(const TensorT<T>&, double);                                \
    template TensorT<T> relu<T>(const TensorT<T>&);                                              \
    template TensorT<T> gelu<T>(const TensorT<T>&);                                              \
    template TensorT<T> sigmoid<T>(const TensorT<T>&);                                           \
    template TensorT<T> softmax_lastdim<T>(const TensorT<T>&);                                   \
    template TensorT<T> layernorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);   \
    template TensorT<T> sum_all<T>(const TensorT<T>&);                                           \
    template TensorT<T> mean_all<T>(const TensorT<T>&);                                          \
    template TensorT<T> reshape<T>(const TensorT<T>&, std::vector<int>);                         \
    template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&);                  \
    template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);                          \
    template TensorT<T> slice<T>(const TensorT<T>&, int, int, int);                              \
    template TensorT<T> take_rows<T>(const TensorT<T>&, const std::vector<int>&);                \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int); \
    template TensorT<T> maxpool2x<T>(const TensorT<T>&);                                         \
    template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                   \
    template TensorT<T> upsample2x_nearest<T>(const TensorT<T>&);                                \
    template TensorT<T> bilinear_resize<T>(const TensorT<T>&, int, int);                         \
    template TensorT<T> pad_reflect2d<T>(const TensorT<T>&, int);                                \
    template TensorT<T> extract_patches<T>(const TensorT<T>&, int);                              \
    template TensorT<T> pad_grid<T>(const TensorT<T>&, int, int);                                \
    template TensorT<T> crop_grid<T>(const TensorT<T>&, int, int);                               \
    template TensorT<T> roll_grid<T>(const TensorT<T>&, int, int);                               \
    template TensorT<T> bce_mean<T>(const TensorT<T>&, const TensorT<T>&);

PICR_INSTANTIATE_OPS(float)
PICR_INSTANTIATE_OPS(double)
#undef PICR_INSTANTIATE_OPS

}  // namespace picr
