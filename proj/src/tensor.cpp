#include "meshtex/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <thread>

#include <json.hpp>

#include "meshtex/parallel.hpp"

extern "C" void openblas_set_num_threads(int);

namespace meshtex::ad {

namespace {
// Kernels here issue many small GEMMs; OpenBLAS thread sync costs more than
// it buys at these sizes, so BLAS runs single-threaded unless overridden.
const bool g_blas_threads_configured = [] {
    int n = 1;
    if (const char* env = std::getenv("MESHTEX_BLAS_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) n = v;
    }
    openblas_set_num_threads(n);
    return true;
}();
}  // namespace

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    // Trailing-dimension alignment.
    Shape out(std::max(a.size(), b.size()), 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(cat("shapes not broadcastable: ", shape_str(a), " vs ",
                                 shape_str(b)));
        out[out.size() - 1 - i] = std::max(da, db);
    }
    return out;
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `shape` expanded to `out` rank, zeroed on broadcast dims.
// True when `shape` equals `out` except for exactly one axis of size 1 (after
// trailing alignment); the mapping is then ib = (i / block) * inner + i % inner.
bool single_axis_broadcast(const Shape& shape, const Shape& out, std::int64_t& inner,
                           std::int64_t& block) {
    if (shape.size() != out.size()) return false;
    int axis = -1;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (shape[i] == out[i]) continue;
        if (shape[i] == 1 && axis < 0) {
            axis = static_cast<int>(i);
            continue;
        }
        return false;
    }
    if (axis < 0) return false;
    inner = 1;
    for (std::size_t i = axis + 1; i < out.size(); ++i) inner *= out[i];
    block = inner * out[axis];
    return true;
}

std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    auto base = row_major_strides(shape);
    std::vector<std::int64_t> st(out.size(), 0);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        std::size_t oi = out.size() - shape.size() + i;
        st[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : base[i];
    }
    return st;
}

template <typename T>
thread_local Tape<T>* g_current_tape = nullptr;

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(shape);
    d->value.assign(static_cast<std::size_t>(shape_numel(d->shape)), T(0));
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->value.begin(), t.d_->value.end(), fill);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
    return from({}, {v}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
    MESHTEX_CHECK(shape_numel(shape) == static_cast<std::int64_t>(data.size()), ShapeError,
                  "data length ", data.size(), " does not match shape ", shape_str(shape));
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(shape);
    d->value = std::move(data);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    rng.fill_normal(t.value(), 0.0, stddev);
    return t;
}

// ---------------------------------------------------------------- Tape

template <typename T>
Tape<T>* Tape<T>::current() {
    return g_current_tape<T>;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& t) : prev_(g_current_tape<T>) {
    g_current_tape<T> = &t;
}

template <typename T>
Tape<T>::Scope::~Scope() {
    g_current_tape<T> = prev_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    MESHTEX_CHECK(loss.defined() && loss.numel() == 1, ShapeError,
                  "backward requires a scalar loss, got shape ",
                  loss.defined() ? shape_str(loss.shape()) : "<null>");
    MESHTEX_CHECK(!nodes_.empty(), NumericalError, "backward on an empty tape");
    // Grads of op outputs are pass-local; only leaves accumulate across calls.
    for (auto& node : nodes_)
        for (auto& out : node.outputs) out->grad.assign(out->value.size(), T(0));
    loss.ptr()->ensure_grad();
    loss.ptr()->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
}

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
    tape.backward(loss);
}

template <typename T>
static void record(std::vector<std::shared_ptr<TensorData<T>>> outputs,
                   std::function<void()> fn) {
    g_current_tape<T>->push(std::move(outputs), std::move(fn));
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename T>
struct EwKernel {
    EwOp op;
    T forward(T a, T b) const {
        switch (op) {
            case EwOp::Add: return a + b;
            case EwOp::Sub: return a - b;
            case EwOp::Mul: return a * b;
            case EwOp::Div: return a / b;
            case EwOp::Pow: return std::pow(a, b);
        }
        return T(0);
    }
    // Partial derivatives given inputs and the forward output.
    T da(T a, T b, T y) const {
        switch (op) {
            case EwOp::Add: return T(1);
            case EwOp::Sub: return T(1);
            case EwOp::Mul: return b;
            case EwOp::Div: return T(1) / b;
            case EwOp::Pow: {
                T g = b * std::pow(a, b - T(1));
                return std::isfinite(g) ? g : T(0);  // subgradient at pow(0, p<1)
            }
        }
        return T(0);
    }
    T db(T a, T b, T y) const {
        switch (op) {
            case EwOp::Add: return T(1);
            case EwOp::Sub: return T(-1);
            case EwOp::Mul: return a;
            case EwOp::Div: return -a / (b * b);
            case EwOp::Pow: {
                if (a <= T(0)) return T(0);
                return y * std::log(a);
            }
        }
        return T(0);
    }
};

}  // namespace

template <typename T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, const Tensor<T>& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    if (op == EwOp::Div) {
        for (T v : b.value())
            MESHTEX_CHECK(std::abs(static_cast<double>(v)) >= 1e-12, NumericalError,
                          "division by near-zero value ", static_cast<double>(v),
                          " (|divisor| < 1e-12)");
    }

    EwKernel<T> k{op};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.value().data();
    const std::int64_t n = out.numel();

    const bool same = a.shape() == out_shape && b.shape() == out_shape;
    const bool b_scalar = b.numel() == 1;
    const bool a_scalar = a.numel() == 1;

    if (same) {
        parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) po[i] = k.forward(pa[i], pb[i]);
        }, 1 << 14);
    } else if (b_scalar && a.shape() == out_shape) {
        const T bv = pb[0];
        parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) po[i] = k.forward(pa[i], bv);
        }, 1 << 14);
    } else if (a_scalar && b.shape() == out_shape) {
        const T av = pa[0];
        parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) po[i] = k.forward(av, pb[i]);
        }, 1 << 14);
    } else if (std::int64_t inner, block;
               a.shape() == out_shape && single_axis_broadcast(b.shape(), out_shape,
                                                               inner, block)) {
        parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i)
                po[i] = k.forward(pa[i], pb[(i / block) * inner + i % inner]);
        }, 1 << 14);
    } else {
        const auto sa = broadcast_strides(a.shape(), out_shape);
        const auto sb = broadcast_strides(b.shape(), out_shape);
        const auto so = row_major_strides(out_shape);
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t rem = i, ia = 0, ib = 0;
            for (std::size_t d = 0; d < out_shape.size(); ++d) {
                std::int64_t c = rem / so[d];
                rem -= c * so[d];
                ia += c * sa[d];
                ib += c * sb[d];
            }
            po[i] = k.forward(pa[ia], pb[ib]);
        }
    }

    if (recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.ptr();
        auto bd = b.ptr();
        auto od = out.ptr();
        record<T>({od}, [k, ad, bd, od, out_shape] {
            const T* pa = ad->value.data();
            const T* pb = bd->value.data();
            const T* py = od->value.data();
            const T* pg = od->grad.data();
            const std::int64_t n = static_cast<std::int64_t>(od->value.size());
            const bool same_a = ad->shape == out_shape;
            const bool same_b = bd->shape == out_shape;
            if (ad->requires_grad) ad->ensure_grad();
            if (bd->requires_grad) bd->ensure_grad();
            if (same_a && same_b) {
                if (ad->requires_grad) {
                    T* ga = ad->grad.data();
                    parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i)
                            ga[i] += pg[i] * k.da(pa[i], pb[i], py[i]);
                    }, 1 << 15);
                }
                if (bd->requires_grad) {
                    T* gb = bd->grad.data();
                    parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i)
                            gb[i] += pg[i] * k.db(pa[i], pb[i], py[i]);
                    }, 1 << 15);
                }
                return;
            }
            if (std::int64_t inner, block;
                same_a && single_axis_broadcast(bd->shape, out_shape, inner, block)) {
                T* ga = ad->requires_grad ? ad->grad.data() : nullptr;
                T* gb = bd->requires_grad ? bd->grad.data() : nullptr;
                if (ga)
                    parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i) {
                            const std::int64_t ib = (i / block) * inner + i % inner;
                            ga[i] += pg[i] * k.da(pa[i], pb[ib], py[i]);
                        }
                    }, 1 << 14);
                if (gb)
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t ib = (i / block) * inner + i % inner;
                        gb[ib] += pg[i] * k.db(pa[i], pb[ib], py[i]);
                    }
                return;
            }
            const auto sa = broadcast_strides(ad->shape, out_shape);
            const auto sb = broadcast_strides(bd->shape, out_shape);
            const auto so = row_major_strides(out_shape);
            T* ga = ad->requires_grad ? ad->grad.data() : nullptr;
            T* gb = bd->requires_grad ? bd->grad.data() : nullptr;
            for (std::int64_t i = 0; i < n; ++i) {
                std::int64_t rem = i, ia = 0, ib = 0;
                for (std::size_t d = 0; d < out_shape.size(); ++d) {
                    std::int64_t c = rem / so[d];
                    rem -= c * so[d];
                    ia += c * sa[d];
                    ib += c * sb[d];
                }
                if (ga) ga[ia] += pg[i] * k.da(pa[ia], pb[ib], py[i]);
                if (gb) gb[ib] += pg[i] * k.db(pa[ia], pb[ib], py[i]);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, T b) {
    return elementwise(op, a, Tensor<T>::scalar(b));
}

// ---------------------------------------------------------------- matmul

namespace {

void gemm_raw(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              float alpha, const float* A, std::int64_t lda, const float* B,
              std::int64_t ldb, float beta, float* C, std::int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, A, static_cast<int>(lda), B,
                static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}
void gemm_raw(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              double alpha, const double* A, std::int64_t lda, const double* B,
              std::int64_t ldb, double beta, double* C, std::int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, A, static_cast<int>(lda), B,
                static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}

// Big products are split over the worker threads by rows or columns of C
// (disjoint outputs, so results are deterministic); BLAS itself stays
// single-threaded.
template <typename T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* A, std::int64_t lda, const T* B, std::int64_t ldb, T beta, T* C,
          std::int64_t ldc) {
    const double flops = static_cast<double>(m) * n * k;
    if (hardware_threads() < 2 || flops < 4e6) {
        gemm_raw(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
        return;
    }
    if (n >= m) {
        const std::int64_t half = n / 2;
        const T* B2 = tb ? B + half * ldb : B + half;
        std::thread worker([&] {
            gemm_raw(ta, tb, m, n - half, k, alpha, A, lda, B2, ldb, beta, C + half,
                     ldc);
        });
        gemm_raw(ta, tb, m, half, k, alpha, A, lda, B, ldb, beta, C, ldc);
        worker.join();
    } else {
        const std::int64_t half = m / 2;
        const T* A2 = ta ? A + half : A + half * lda;
        std::thread worker([&] {
            gemm_raw(ta, tb, m - half, n, k, alpha, A2, lda, B, ldb, beta,
                     C + half * ldc, ldc);
        });
        gemm_raw(ta, tb, half, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
        worker.join();
    }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
    MESHTEX_CHECK(a.ndim() >= 2 && b.ndim() >= 2, ShapeError,
                  "matmul requires rank >= 2 operands, got ", shape_str(a.shape()),
                  " and ", shape_str(b.shape()));
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const std::int64_t ar = sa[sa.size() - 2], ac = sa[sa.size() - 1];
    const std::int64_t br = sb[sb.size() - 2], bc = sb[sb.size() - 1];
    const std::int64_t m = trans_a ? ac : ar;
    const std::int64_t ka = trans_a ? ar : ac;
    const std::int64_t kb = trans_b ? bc : br;
    const std::int64_t n = trans_b ? br : bc;
    MESHTEX_CHECK(ka == kb, ShapeError, "matmul inner-dimension mismatch: ",
                  shape_str(a.shape()), (trans_a ? "^T" : ""), " x ", shape_str(b.shape()),
                  (trans_b ? "^T" : ""));

    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    Shape batch = broadcast_shape(batch_a, batch_b);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    const auto stb_a = broadcast_strides(batch_a, batch);
    const auto stb_b = broadcast_strides(batch_b, batch);
    const auto stb_o = row_major_strides(batch);
    const std::int64_t nbatch = shape_numel(batch);
    const std::int64_t a_mat = ar * ac, b_mat = br * bc, o_mat = m * n;

    auto for_each_batch = [&](auto&& body) {
        for (std::int64_t i = 0; i < nbatch; ++i) {
            std::int64_t rem = i, ia = 0, ib = 0;
            for (std::size_t d = 0; d < batch.size(); ++d) {
                std::int64_t c = rem / stb_o[d];
                rem -= c * stb_o[d];
                ia += c * stb_a[d];
                ib += c * stb_b[d];
            }
            body(i, ia, ib);
        }
    };

    for_each_batch([&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        gemm(trans_a, trans_b, m, n, ka, T(1), a.value().data() + ia * a_mat, ac,
             b.value().data() + ib * b_mat, bc, T(0), out.value().data() + i * o_mat, n);
    });

    if (recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.ptr();
        auto bd = b.ptr();
        auto od = out.ptr();
        const std::size_t brank = batch.size();
        record<T>({od}, [=] {
            if (ad->requires_grad) ad->ensure_grad();
            if (bd->requires_grad) bd->ensure_grad();
            for (std::int64_t i = 0; i < nbatch; ++i) {
                std::int64_t rem = i, ia = 0, ib = 0;
                for (std::size_t d = 0; d < brank; ++d) {
                    std::int64_t c = rem / stb_o[d];
                    rem -= c * stb_o[d];
                    ia += c * stb_a[d];
                    ib += c * stb_b[d];
                }
                const T* G = od->grad.data() + i * o_mat;
                const T* A = ad->value.data() + ia * a_mat;
                const T* B = bd->value.data() + ib * b_mat;
                if (ad->requires_grad) {
                    T* gA = ad->grad.data() + ia * a_mat;
                    if (!trans_a) {
                        // dA(m,ka) = G(m,n) . opB^T(n,ka)
                        gemm(false, !trans_b, m, ka, n, T(1), G, n, B, bc, T(1), gA, ac);
                    } else {
                        // dA stored as (ar,ac) = opB(ka,n) . G^T(n,m)
                        gemm(trans_b, true, ar, ac, n, T(1), B, bc, G, n, T(1), gA, ac);
                    }
                }
                if (bd->requires_grad) {
                    T* gB = bd->grad.data() + ib * b_mat;
                    if (!trans_b) {
                        // dB(ka,n) = opA^T(ka,m) . G(m,n)
                        gemm(!trans_a, false, ka, n, m, T(1), A, ac, G, n, T(1), gB, bc);
                    } else {
                        // dB stored as (br,bc) = G^T(n,m) . opA(m,ka)
                        gemm(true, trans_a, br, bc, m, T(1), G, n, A, ac, T(1), gB, bc);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- conv2d

namespace {

// Writes one sample's patch matrix into rows of a [K, row_stride] buffer
// starting at column `col_offset` (so a whole batch can share one GEMM).
// Row interiors are bulk-copied; only the padding fringe is handled per
// element.
template <typename T>
void im2col(const T* in, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t OH,
            std::int64_t OW, T* col, std::int64_t row_stride, std::int64_t col_offset) {
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* dst = col + ((c * kh + ki) * kw + kj) * row_stride + col_offset;
                // oj in [lo, hi) has jj = oj*stride - pad + kj inside [0, W)
                std::int64_t lo = (pad - kj + stride - 1) / stride;
                lo = std::max<std::int64_t>(lo, 0);
                std::int64_t hi = (W - 1 + pad - kj) / stride + 1;
                hi = std::min(hi, OW);
                hi = std::max(hi, lo);
                for (std::int64_t oi = 0; oi < OH; ++oi) {
                    std::int64_t ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) {
                        std::fill(dst, dst + OW, T(0));
                        dst += OW;
                        continue;
                    }
                    const T* src = in + (c * H + ii) * W - pad + kj;
                    std::fill(dst, dst + lo, T(0));
                    if (stride == 1) {
                        std::memcpy(dst + lo, src + lo,
                                    sizeof(T) * static_cast<std::size_t>(hi - lo));
                    } else {
                        for (std::int64_t oj = lo; oj < hi; ++oj)
                            dst[oj] = src[oj * stride];
                    }
                    std::fill(dst + hi, dst + OW, T(0));
                    dst += OW;
                }
            }
}

template <typename T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t OH, std::int64_t OW, T* in_grad, std::int64_t row_stride,
                std::int64_t col_offset) {
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* src = col + ((c * kh + ki) * kw + kj) * row_stride + col_offset;
                for (std::int64_t oi = 0; oi < OH; ++oi) {
                    const std::int64_t ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    T* dst = in_grad + (c * H + ii) * W;
                    const T* row = src + oi * OW;
                    for (std::int64_t oj = 0; oj < OW; ++oj) {
                        const std::int64_t jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < W) dst[jj] += row[oj];
                    }
                }
            }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
    MESHTEX_CHECK(stride >= 1, ShapeError, "conv2d stride must be positive, got ", stride);
    MESHTEX_CHECK(input.ndim() == 4 && weight.ndim() == 4, ShapeError,
                  "conv2d expects [b,c,h,w] input and [co,ci,kh,kw] weight, got ",
                  shape_str(input.shape()), " and ", shape_str(weight.shape()));
    const std::int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2),
                       W = input.dim(3);
    const std::int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    MESHTEX_CHECK(weight.dim(1) == Cin, ShapeError, "conv2d channel mismatch: input has ",
                  Cin, ", weight expects ", weight.dim(1));
    MESHTEX_CHECK(kh <= H + 2 * padding && kw <= W + 2 * padding, ShapeError,
                  "conv2d kernel ", kh, "x", kw, " larger than padded input ",
                  H + 2 * padding, "x", W + 2 * padding);
    const std::int64_t OH = (H + 2 * padding - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - kw) / stride + 1;
    const std::int64_t K = Cin * kh * kw, N = OH * OW;

    // The whole batch shares one patch matrix [K, B*N] and one GEMM; the
    // [Cout, B*N] product is then scattered into [B, Cout, N] layout.
    const std::int64_t BN = B * N;
    Tensor<T> out = Tensor<T>::zeros({B, Cout, OH, OW});
    {
        std::unique_ptr<T[]> col(new T[static_cast<std::size_t>(K * BN)]);
        parallel_for(0, B, [&](std::int64_t b) {
            im2col(input.value().data() + b * Cin * H * W, Cin, H, W, kh, kw, stride,
                   padding, OH, OW, col.get(), BN, b * N);
        }, std::max<std::int64_t>(1, (1 << 15) / (K * N + 1)));
        std::unique_ptr<T[]> prod(new T[static_cast<std::size_t>(Cout * BN)]);
        gemm(false, false, Cout, BN, K, T(1), weight.value().data(), K, col.get(), BN,
             T(0), prod.get(), BN);
        const T* bv = bias.defined() ? bias.value().data() : nullptr;
        T* po = out.value().data();
        parallel_for(0, B * Cout, [&](std::int64_t bc) {
            const std::int64_t b = bc / Cout, co = bc % Cout;
            const T* src = prod.get() + co * BN + b * N;
            T* dst = po + (b * Cout + co) * N;
            const T add = bv ? bv[co] : T(0);
            for (std::int64_t i = 0; i < N; ++i) dst[i] = src[i] + add;
        }, std::max<std::int64_t>(1, (1 << 15) / (N + 1)));
    }

    const bool bias_in_graph = bias.defined() && bias.requires_grad();
    if (recording<T>({&input, &weight}) || (Tape<T>::current() && bias_in_graph)) {
        out.set_requires_grad(true);
        auto id = input.ptr();
        auto wd = weight.ptr();
        auto bd = bias.defined() ? bias.ptr() : nullptr;
        auto od = out.ptr();
        const int s = stride, p = padding;
        record<T>({od}, [=] {
            if (wd->requires_grad) wd->ensure_grad();
            if (bd && bd->requires_grad) bd->ensure_grad();
            // gradient rearranged to [Cout, B*N]
            std::unique_ptr<T[]> gt(new T[static_cast<std::size_t>(Cout * BN)]);
            parallel_for(0, B * Cout, [&](std::int64_t bc) {
                const std::int64_t b = bc / Cout, co = bc % Cout;
                const T* src = od->grad.data() + (b * Cout + co) * N;
                std::memcpy(gt.get() + co * BN + b * N, src,
                            sizeof(T) * static_cast<std::size_t>(N));
            }, std::max<std::int64_t>(1, (1 << 15) / (N + 1)));
            if (wd->requires_grad || id->requires_grad) {
                std::unique_ptr<T[]> col(new T[static_cast<std::size_t>(K * BN)]);
                parallel_for(0, B, [&](std::int64_t b) {
                    im2col(id->value.data() + b * Cin * H * W, Cin, H, W, kh, kw, s, p,
                           OH, OW, col.get(), BN, b * N);
                }, std::max<std::int64_t>(1, (1 << 15) / (K * N + 1)));
                if (wd->requires_grad)
                    gemm(false, true, Cout, K, BN, T(1), gt.get(), BN, col.get(), BN,
                         T(1), wd->grad.data(), K);
                if (id->requires_grad) {
                    id->ensure_grad();
                    T* dcol = col.get();  // reuse the buffer
                    gemm(true, false, K, BN, Cout, T(1), wd->value.data(), K, gt.get(),
                         BN, T(0), dcol, BN);
                    parallel_for(0, B, [&](std::int64_t b) {
                        col2im_add(dcol, Cin, H, W, kh, kw, s, p, OH, OW,
                                   id->grad.data() + b * Cin * H * W, BN, b * N);
                    }, std::max<std::int64_t>(1, (1 << 15) / (K * N + 1)));
                }
            }
            if (bd && bd->requires_grad) {
                T* gb = bd->grad.data();
                for (std::int64_t co = 0; co < Cout; ++co) {
                    T acc = T(0);
                    const T* row = gt.get() + co * BN;
                    for (std::int64_t i = 0; i < BN; ++i) acc += row[i];
                    gb[co] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- activations

namespace {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& x, FwdFn fwd, BwdFn bwd_from_in_out) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.value().data();
    T* po = out.value().data();
    const std::int64_t n = x.numel();
    parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) po[i] = fwd(px[i]);
    }, 1 << 14);
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* px = xd->value.data();
            const T* py = od->value.data();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            const std::int64_t n = static_cast<std::int64_t>(xd->value.size());
            parallel_for_chunks(0, n, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i)
                    gx[i] += pg[i] * bwd_from_in_out(px[i], py[i]);
            }, 1 << 14);
        });
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return unary_op(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int nd = static_cast<int>(x.ndim());
    if (axis < 0) axis += nd;
    MESHTEX_CHECK(axis >= 0 && axis < nd, ShapeError, "softmax axis ", axis,
                  " out of range for shape ", shape_str(x.shape()));
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < nd; ++i) inner *= s[i];
    const std::int64_t len = s[axis];

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.value().data();
    T* po = out.value().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const T* v = px + o * len * inner + in;
            T* y = po + o * len * inner + in;
            T mx = v[0];
            for (std::int64_t i = 1; i < len; ++i) mx = std::max(mx, v[i * inner]);
            T total = T(0);
            for (std::int64_t i = 0; i < len; ++i) {
                T e = std::exp(v[i * inner] - mx);
                y[i * inner] = e;
                total += e;
            }
            for (std::int64_t i = 0; i < len; ++i) y[i * inner] /= total;
        }

    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* py = od->value.data();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::int64_t i = 0; i < len; ++i)
                        dot += pg[base + i * inner] * py[base + i * inner];
                    for (std::int64_t i = 0; i < len; ++i)
                        gx[base + i * inner] +=
                            py[base + i * inner] * (pg[base + i * inner] - dot);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------- batch norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::vector<T>& running_mean, std::vector<T>& running_var,
                     bool training, T momentum, T eps) {
    MESHTEX_CHECK(x.ndim() == 4, ShapeError, "batch_norm expects [b,c,h,w], got ",
                  shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    MESHTEX_CHECK(gamma.numel() == C && beta.numel() == C, ShapeError,
                  "batch_norm gamma/beta must have ", C, " elements");
    if (running_mean.size() != static_cast<std::size_t>(C)) {
        running_mean.assign(static_cast<std::size_t>(C), T(0));
        running_var.assign(static_cast<std::size_t>(C), T(1));
    }
    const std::int64_t n_per_c = B * H * W;
    if (training)
        MESHTEX_CHECK(n_per_c >= 2, NumericalError,
                      "batch_norm degenerate statistics: needs b*h*w >= 2 in training "
                      "mode, got ", n_per_c);

    std::vector<T> mean_c(static_cast<std::size_t>(C)), var_c(static_cast<std::size_t>(C));
    const T* px = x.value().data();
    const std::int64_t bn_grain = std::max<std::int64_t>(1, (1 << 17) / (n_per_c + 1));
    if (training) {
        parallel_for(0, C, [&](std::int64_t c) {
            double acc = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* p = px + (b * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(n_per_c);
            double vacc = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* p = px + (b * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    double d = p[i] - mu;
                    vacc += d * d;
                }
            }
            mean_c[c] = static_cast<T>(mu);
            var_c[c] = static_cast<T>(vacc / static_cast<double>(n_per_c));
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean_c[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var_c[c];
        }, bn_grain);
    } else {
        mean_c = running_mean;
        var_c = running_var;
    }

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    T* po = out.value().data();
    const T* pgm = gamma.value().data();
    const T* pbt = beta.value().data();
    parallel_for(0, B * C, [&](std::int64_t bc) {
        const std::int64_t c = bc % C;
        const T inv = T(1) / std::sqrt(var_c[c] + eps);
        const T g = pgm[c], bb = pbt[c], mu = mean_c[c];
        const T* p = px + bc * H * W;
        T* q = po + bc * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) q[i] = g * (p[i] - mu) * inv + bb;
    }, std::max<std::int64_t>(1, (1 << 16) / (H * W + 1)));

    if (recording<T>({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto gd = gamma.ptr();
        auto bd = beta.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            const T* px = xd->value.data();
            const T* pg = od->grad.data();
            const T* pgm = gd->value.data();
            if (xd->requires_grad) xd->ensure_grad();
            if (gd->requires_grad) gd->ensure_grad();
            if (bd->requires_grad) bd->ensure_grad();
            const std::int64_t bn_grain =
                std::max<std::int64_t>(1, (1 << 16) / (n_per_c + 1));
            parallel_for(0, C, [&](std::int64_t c) {
                const T mu = mean_c[c];
                const T inv = T(1) / std::sqrt(var_c[c] + eps);
                // Per-channel reductions over (b,h,w).
                double sum_g = 0.0, sum_g_xhat = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* gp = pg + (b * C + c) * H * W;
                    const T* xp = px + (b * C + c) * H * W;
                    for (std::int64_t i = 0; i < H * W; ++i) {
                        sum_g += gp[i];
                        sum_g_xhat += gp[i] * (xp[i] - mu) * inv;
                    }
                }
                if (gd->requires_grad) gd->grad[c] += static_cast<T>(sum_g_xhat);
                if (bd->requires_grad) bd->grad[c] += static_cast<T>(sum_g);
                if (!xd->requires_grad) return;
                const T gscale = pgm[c];
                if (training) {
                    const T inv_n = T(1) / static_cast<T>(n_per_c);
                    for (std::int64_t b = 0; b < B; ++b) {
                        const T* gp = pg + (b * C + c) * H * W;
                        const T* xp = px + (b * C + c) * H * W;
                        T* gx = xd->grad.data() + (b * C + c) * H * W;
                        for (std::int64_t i = 0; i < H * W; ++i) {
                            const T xhat = (xp[i] - mu) * inv;
                            gx[i] += gscale * inv *
                                     (gp[i] - static_cast<T>(sum_g) * inv_n -
                                      xhat * static_cast<T>(sum_g_xhat) * inv_n);
                        }
                    }
                } else {
                    for (std::int64_t b = 0; b < B; ++b) {
                        const T* gp = pg + (b * C + c) * H * W;
                        T* gx = xd->grad.data() + (b * C + c) * H * W;
                        for (std::int64_t i = 0; i < H * W; ++i)
                            gx[i] += gscale * inv * gp[i];
                    }
                }
            }, bn_grain);
        });
    }
    return out;
}

// ---------------------------------------------------------------- upsample

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
    MESHTEX_CHECK(factor >= 1, ShapeError, "upsample factor must be >= 1, got ", factor);
    MESHTEX_CHECK(x.ndim() == 4, ShapeError, "upsample expects [b,c,h,w], got ",
                  shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t f = factor, OH = H * f, OW = W * f;
    Tensor<T> out = Tensor<T>::zeros({B, C, OH, OW});
    const T* px = x.value().data();
    T* po = out.value().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T* src = px + bc * H * W;
        T* dst = po + bc * OH * OW;
        for (std::int64_t i = 0; i < OH; ++i) {
            const T* row = src + (i / f) * W;
            for (std::int64_t j = 0; j < OW; ++j) dst[i * OW + j] = row[j / f];
        }
    }
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const T* g = pg + bc * OH * OW;
                T* dst = gx + bc * H * W;
                for (std::int64_t i = 0; i < OH; ++i)
                    for (std::int64_t j = 0; j < OW; ++j)
                        dst[(i / f) * W + j / f] += g[i * OW + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    MESHTEX_CHECK(shape_numel(shape) == x.numel(), ShapeError, "cannot reshape ",
                  shape_str(x.shape()), " to ", shape_str(shape));
    Tensor<T> out = Tensor<T>::from(std::move(shape),
                                    {x.value().begin(), x.value().end()});
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::size_t i = 0; i < xd->value.size(); ++i) gx[i] += pg[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len) {
    const int nd = static_cast<int>(x.ndim());
    if (axis < 0) axis += nd;
    MESHTEX_CHECK(axis >= 0 && axis < nd, ShapeError, "narrow axis out of range");
    MESHTEX_CHECK(start >= 0 && len >= 1 && start + len <= x.shape()[axis], ShapeError,
                  "narrow range [", start, ",", start + len, ") out of bounds for dim ",
                  x.shape()[axis]);
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < nd; ++i) inner *= s[i];
    Shape out_shape = s;
    out_shape[axis] = len;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.value().data();
    T* po = out.value().data();
    const std::int64_t d = s[axis];
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, px + (o * d + start) * inner,
                    sizeof(T) * static_cast<std::size_t>(len * inner));
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                T* dst = gx + (o * d + start) * inner;
                const T* src = pg + o * len * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    MESHTEX_CHECK(!parts.empty(), ShapeError, "concat of zero tensors");
    const int nd = static_cast<int>(parts[0].ndim());
    int ax = axis < 0 ? axis + nd : axis;
    MESHTEX_CHECK(ax >= 0 && ax < nd, ShapeError, "concat axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        MESHTEX_CHECK(static_cast<int>(p.ndim()) == nd, ShapeError,
                      "concat rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != ax)
                MESHTEX_CHECK(p.shape()[i] == out_shape[i], ShapeError,
                              "concat shape mismatch at dim ", i, ": ",
                              shape_str(p.shape()), " vs ", shape_str(out_shape));
        total += p.shape()[ax];
    }
    out_shape[ax] = total;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[i];
    for (int i = ax + 1; i < nd; ++i) inner *= out_shape[i];

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    T* po = out.value().data();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t d = p.shape()[ax];
        const T* px = p.value().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + offset) * inner, px + o * d * inner,
                        sizeof(T) * static_cast<std::size_t>(d * inner));
        offset += d;
    }

    bool any_rg = false;
    for (const auto& p : parts)
        if (p.requires_grad()) any_rg = true;
    if (any_rg && Tape<T>::current()) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<T>>> pd;
        pd.reserve(parts.size());
        for (const auto& p : parts) pd.push_back(p.ptr());
        auto od = out.ptr();
        record<T>({od}, [=] {
            const T* pg = od->grad.data();
            std::int64_t offset = 0;
            for (const auto& x : pd) {
                const std::int64_t d = x->shape[ax];
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* gx = x->grad.data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = pg + (o * total + offset) * inner;
                        T* dst = gx + o * d * inner;
                        for (std::int64_t i = 0; i < d * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& x, int axis) {
    const int nd = static_cast<int>(x.ndim());
    int ax = axis < 0 ? axis + nd : axis;
    MESHTEX_CHECK(ax >= 0 && ax < nd, ShapeError, "flip axis out of range");
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[i];
    for (int i = ax + 1; i < nd; ++i) inner *= s[i];
    const std::int64_t d = s[ax];
    Tensor<T> out = Tensor<T>::zeros(s);
    const T* px = x.value().data();
    T* po = out.value().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < d; ++i)
            std::memcpy(po + (o * d + i) * inner, px + (o * d + (d - 1 - i)) * inner,
                        sizeof(T) * static_cast<std::size_t>(inner));
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < d; ++i) {
                    const T* src = pg + (o * d + i) * inner;
                    T* dst = gx + (o * d + (d - 1 - i)) * inner;
                    for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> tile_batch(const Tensor<T>& x, std::int64_t batch) {
    MESHTEX_CHECK(batch >= 1, ShapeError, "tile_batch requires batch >= 1");
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin(), batch);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const std::int64_t n = x.numel();
    for (std::int64_t b = 0; b < batch; ++b)
        std::memcpy(out.value().data() + b * n, x.value().data(),
                    sizeof(T) * static_cast<std::size_t>(n));
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T* pg = od->grad.data();
            T* gx = xd->grad.data();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t i = 0; i < n; ++i) gx[i] += pg[b * n + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.value()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (recording<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            xd->ensure_grad();
            const T g = od->grad[0];
            T* gx = xd->grad.data();
            for (std::size_t i = 0; i < xd->value.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T scale = T(1) / static_cast<T>(x.numel());
    return sum(x) * scale;
}

// ---------------------------------------------------------------- bilinear

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& coords) {
    MESHTEX_CHECK(map.ndim() == 3, ShapeError, "bilinear_sample map must be [c,h,w], got ",
                  shape_str(map.shape()));
    MESHTEX_CHECK(coords.ndim() == 2 && coords.dim(1) == 2, ShapeError,
                  "bilinear_sample coords must be [n,2], got ", shape_str(coords.shape()));
    const std::int64_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
    const std::int64_t N = coords.dim(0);
    Tensor<T> out = Tensor<T>::zeros({N, C});
    const T* pm = map.value().data();
    const T* pc = coords.value().data();
    T* po = out.value().data();

    auto corners = [&](T u, T v, std::int64_t& x0, std::int64_t& y0, T& fx, T& fy) {
        T x = u * static_cast<T>(W - 1);
        T y = v * static_cast<T>(H - 1);
        x = std::min(std::max(x, T(0)), static_cast<T>(W - 1));
        y = std::min(std::max(y, T(0)), static_cast<T>(H - 1));
        x0 = std::min(static_cast<std::int64_t>(x), W - 2 >= 0 ? W - 2 : 0);
        y0 = std::min(static_cast<std::int64_t>(y), H - 2 >= 0 ? H - 2 : 0);
        fx = x - static_cast<T>(x0);
        fy = y - static_cast<T>(y0);
    };

    for (std::int64_t i = 0; i < N; ++i) {
        std::int64_t x0, y0;
        T fx, fy;
        corners(pc[i * 2], pc[i * 2 + 1], x0, y0, fx, fy);
        const std::int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        for (std::int64_t c = 0; c < C; ++c) {
            const T* m = pm + c * H * W;
            const T v00 = m[y0 * W + x0], v01 = m[y0 * W + x1];
            const T v10 = m[y1 * W + x0], v11 = m[y1 * W + x1];
            po[i * C + c] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                            fy * ((T(1) - fx) * v10 + fx * v11);
        }
    }

    if (recording<T>({&map, &coords})) {
        out.set_requires_grad(true);
        auto md = map.ptr();
        auto cd = coords.ptr();
        auto od = out.ptr();
        record<T>({od}, [=] {
            if (md->requires_grad) md->ensure_grad();
            if (cd->requires_grad) cd->ensure_grad();
            const T* pm = md->value.data();
            const T* pc = cd->value.data();
            const T* pg = od->grad.data();
            for (std::int64_t i = 0; i < N; ++i) {
                T u = pc[i * 2], v = pc[i * 2 + 1];
                T x = std::min(std::max(u * static_cast<T>(W - 1), T(0)),
                               static_cast<T>(W - 1));
                T y = std::min(std::max(v * static_cast<T>(H - 1), T(0)),
                               static_cast<T>(H - 1));
                std::int64_t x0 = std::min(static_cast<std::int64_t>(x),
                                           W - 2 >= 0 ? W - 2 : 0);
                std::int64_t y0 = std::min(static_cast<std::int64_t>(y),
                                           H - 2 >= 0 ? H - 2 : 0);
                const std::int64_t x1 = std::min(x0 + 1, W - 1),
                                   y1 = std::min(y0 + 1, H - 1);
                const T fx = x - static_cast<T>(x0), fy = y - static_cast<T>(y0);
                T du = T(0), dv = T(0);
                for (std::int64_t c = 0; c < C; ++c) {
                    const T g = pg[i * C + c];
                    const T* m = pm + c * H * W;
                    const T v00 = m[y0 * W + x0], v01 = m[y0 * W + x1];
                    const T v10 = m[y1 * W + x0], v11 = m[y1 * W + x1];
                    if (md->requires_grad) {
                        T* gm = md->grad.data() + c * H * W;
                        gm[y0 * W + x0] += g * (T(1) - fy) * (T(1) - fx);
                        gm[y0 * W + x1] += g * (T(1) - fy) * fx;
                        gm[y1 * W + x0] += g * fy * (T(1) - fx);
                        gm[y1 * W + x1] += g * fy * fx;
                    }
                    if (cd->requires_grad) {
                        du += g * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                        dv += g * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if (cd->requires_grad) {
                    cd->grad[i * 2] += du * static_cast<T>(W - 1);
                    cd->grad[i * 2 + 1] += dv * static_cast<T>(H - 1);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- adam

template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, T lr, T beta1, T beta2, T eps) {
    const std::size_t n = static_cast<std::size_t>(param.numel());
    if (state.m.size() != n) {
        state.m.assign(n, T(0));
        state.v.assign(n, T(0));
        state.t = 0;
    }
    MESHTEX_CHECK(state.m.size() == n, ShapeError, "adam state size mismatch");
    state.t += 1;
    if (!param.has_grad()) return;  // zero gradient: fixed point
    auto g = param.ptr()->grad;
    MESHTEX_CHECK(g.size() == n, ShapeError, "adam gradient/param shape mismatch: grad ",
                  g.size(), " vs param ", n);
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.t));
    T* p = param.value().data();
    T* m = state.m.data();
    T* v = state.v.data();
    const T* gp = g.data();
    parallel_for_chunks(0, static_cast<std::int64_t>(n),
                        [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            m[i] = beta1 * m[i] + (T(1) - beta1) * gp[i];
            v[i] = beta2 * v[i] + (T(1) - beta2) * gp[i] * gp[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }, 1 << 15);
}

// ---------------------------------------------------------------- checkpoints

namespace {
template <typename T>
const char* dtype_name();
template <>
const char* dtype_name<float>() {
    return "f32";
}
template <>
const char* dtype_name<double>() {
    return "f64";
}
}  // namespace

template <typename T>
void save_checkpoint(const std::string& path_prefix,
                     const std::map<std::string, Tensor<T>>& params) {
    namespace fs = std::filesystem;
    nlohmann::json index;
    index["dtype"] = dtype_name<T>();
    index["byte_order"] = "little";
    nlohmann::json tensors = nlohmann::json::object();

    const std::string bin_tmp = path_prefix + ".bin.tmp";
    std::ofstream bin(bin_tmp, std::ios::binary);
    MESHTEX_CHECK(bin.good(), IoError, "cannot open ", bin_tmp, " for writing");
    std::int64_t offset = 0;
    for (const auto& [name, t] : params) {
        nlohmann::json e;
        e["offset"] = offset;
        e["shape"] = t.shape();
        e["dtype"] = dtype_name<T>();
        tensors[name] = e;
        bin.write(reinterpret_cast<const char*>(t.value().data()),
                  static_cast<std::streamsize>(sizeof(T) * t.value().size()));
        offset += static_cast<std::int64_t>(sizeof(T) * t.value().size());
    }
    bin.close();
    index["tensors"] = tensors;

    const std::string json_tmp = path_prefix + ".json.tmp";
    std::ofstream js(json_tmp);
    js << index.dump(2) << "\n";
    js.close();
    fs::rename(bin_tmp, path_prefix + ".bin");
    fs::rename(json_tmp, path_prefix + ".json");
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path_prefix) {
    std::ifstream js(path_prefix + ".json");
    MESHTEX_CHECK(js.good(), IoError, "missing checkpoint index ", path_prefix, ".json");
    nlohmann::json index = nlohmann::json::parse(js);
    MESHTEX_CHECK(index["dtype"] == dtype_name<T>(), IoError, "checkpoint dtype ",
                  index["dtype"].get<std::string>(), " does not match requested ",
                  dtype_name<T>());
    std::ifstream bin(path_prefix + ".bin", std::ios::binary);
    MESHTEX_CHECK(bin.good(), IoError, "missing checkpoint blob ", path_prefix, ".bin");

    std::map<std::string, Tensor<T>> out;
    for (auto it = index["tensors"].begin(); it != index["tensors"].end(); ++it) {
        const auto& e = it.value();
        Shape shape = e["shape"].get<Shape>();
        const std::int64_t n = shape_numel(shape);
        std::vector<T> data(static_cast<std::size_t>(n));
        bin.seekg(e["offset"].get<std::int64_t>());
        bin.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(sizeof(T) * data.size()));
        MESHTEX_CHECK(bin.good(), IoError, "truncated checkpoint blob reading ", it.key());
        out.emplace(it.key(), Tensor<T>::from(std::move(shape), std::move(data)));
    }
    return out;
}

// ---------------------------------------------------------------- instantiation

#define MESHTEX_INSTANTIATE_TENSOR(T)                                                     \
    template class Tensor<T>;                                                             \
    template class Tape<T>;                                                               \
    template void backward<T>(Tape<T>&, const Tensor<T>&);                                \
    template Tensor<T> elementwise<T>(EwOp, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> elementwise<T>(EwOp, const Tensor<T>&, T);                         \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);         \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                 int, int);                                               \
    template Tensor<T> relu<T>(const Tensor<T>&);                                         \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                \
    template Tensor<T> tanh_act<T>(const Tensor<T>&);                                     \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                      \
    template Tensor<T> softmax<T>(const Tensor<T>&, int);                                 \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                     const Tensor<T>&, std::vector<T>&, std::vector<T>&,  \
                                     bool, T, T);                                         \
    template Tensor<T> upsample_nearest<T>(const Tensor<T>&, int);                        \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                               \
    template Tensor<T> narrow<T>(const Tensor<T>&, int, std::int64_t, std::int64_t);      \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                     \
    template Tensor<T> flip<T>(const Tensor<T>&, int);                                    \
    template Tensor<T> tile_batch<T>(const Tensor<T>&, std::int64_t);                     \
    template Tensor<T> sum<T>(const Tensor<T>&);                                          \
    template Tensor<T> mean<T>(const Tensor<T>&);                                         \
    template Tensor<T> bilinear_sample<T>(const Tensor<T>&, const Tensor<T>&);            \
    template void adam_step<T>(Tensor<T>&, AdamState<T>&, T, T, T, T);                    \
    template void save_checkpoint<T>(const std::string&,                                  \
                                     const std::map<std::string, Tensor<T>>&);            \
    template std::map<std::string, Tensor<T>> load_checkpoint<T>(const std::string&);

MESHTEX_INSTANTIATE_TENSOR(float)
MESHTEX_INSTANTIATE_TENSOR(double)

}  // namespace meshtex::ad
