#include <magic/kernels.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace magic::kern {

namespace {

Backend g_backend = Backend::parallel;
bool g_canonical = true;

// Runs f(i) for i in [0, n). The parallel path splits iterations statically
// across threads; each f(i) owns its output elements outright, so the split
// never changes results.
template <typename F>
void run(std::size_t n, F&& f) {
  if (g_backend == Backend::parallel) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) f(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) f(i);
  }
}

template <typename T>
std::vector<T>& scratch_buf() {
  thread_local std::vector<T> buf;
  return buf;
}

std::vector<std::uint32_t>& scratch_idx() {
  thread_local std::vector<std::uint32_t> buf;
  return buf;
}

// strict weak order on floats that also separates -0.0 from +0.0
template <typename T>
bool value_less(T a, T b) {
  if (a < b) return true;
  if (b < a) return false;
  return std::signbit(a) && !std::signbit(b);
}

// Softmax of row x[0..cols) into y under the validity mask, optionally with a
// canonical (value-sorted) denominator sum.
template <typename T>
void softmax_row(const T* x, const std::uint8_t* valid, T* y, std::size_t cols, bool canonical) {
  T hi = -std::numeric_limits<T>::infinity();
  std::size_t n_valid = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    if (!valid[j]) continue;
    ++n_valid;
    if (x[j] > hi) hi = x[j];
  }
  if (n_valid == 0) {
    std::fill(y, y + cols, T(0));
    return;
  }
  T denom;
  if (canonical) {
    auto& terms = scratch_buf<T>();
    terms.resize(n_valid);
    std::size_t m = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = valid[j] ? std::exp(x[j] - hi) : T(0);
      if (valid[j]) terms[m++] = y[j];
    }
    denom = detail::canonical_sum(terms.data(), n_valid);
  } else {
    denom = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = valid[j] ? std::exp(x[j] - hi) : T(0);
      denom += y[j];
    }
  }
  for (std::size_t j = 0; j < cols; ++j)
    if (valid[j]) y[j] /= denom;
}

}  // namespace

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }
bool canonical_reductions() { return g_canonical; }
void set_canonical_reductions(bool on) { g_canonical = on; }

namespace detail {

template <typename T>
T canonical_sum(T* terms, std::size_t n) {
  std::sort(terms, terms + n, value_less<T>);
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += terms[i];
  return s;
}

}  // namespace detail

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc) {
  run(n, [=](std::size_t i) {
    const T* __restrict ai = a + i * p;
    T* __restrict ci = c + i * q;
    if (!acc) std::fill(ci, ci + q, T(0));
    for (std::size_t k = 0; k < p; ++k) {
      const T aik = ai[k];
      const T* __restrict bk = b + k * q;
      for (std::size_t j = 0; j < q; ++j) ci[j] += aik * bk[j];
    }
  });
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc) {
  run(n, [=](std::size_t i) {
    const T* __restrict ai = a + i * p;
    T* __restrict ci = c + i * q;
    for (std::size_t j = 0; j < q; ++j) {
      const T* __restrict bj = b + j * p;
      T s = T(0);
      for (std::size_t k = 0; k < p; ++k) s += ai[k] * bj[k];
      ci[j] = acc ? ci[j] + s : s;
    }
  });
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc) {
  run(n, [=](std::size_t i) {
    T* __restrict ci = c + i * q;
    if (!acc) std::fill(ci, ci + q, T(0));
    for (std::size_t k = 0; k < p; ++k) {
      const T aki = a[k * n + i];
      const T* __restrict bk = b + k * q;
      for (std::size_t j = 0; j < q; ++j) ci[j] += aki * bk[j];
    }
  });
}

template <typename T>
void add_bias_rows(T* x, const T* bias, std::size_t rows, std::size_t cols) {
  run(rows, [=](std::size_t r) {
    T* xr = x + r * cols;
    for (std::size_t j = 0; j < cols; ++j) xr[j] += bias[j];
  });
}

template <typename T>
void col_sum_acc(const T* x, T* out, std::size_t rows, std::size_t cols) {
  run(cols, [=](std::size_t j) {
    T s = out[j];
    for (std::size_t r = 0; r < rows; ++r) s += x[r * cols + j];
    out[j] = s;
  });
}

template <typename T>
void add_inplace(T* x, const T* y, std::size_t n) {
  run(n, [=](std::size_t i) { x[i] += y[i]; });
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  run(n, [=](std::size_t i) { y[i] += alpha * x[i]; });
}

template <typename T>
void scale_into(const T* x, T alpha, T* y, std::size_t n, bool acc) {
  if (acc)
    run(n, [=](std::size_t i) { y[i] += alpha * x[i]; });
  else
    run(n, [=](std::size_t i) { y[i] = alpha * x[i]; });
}

template <typename T>
void gelu_fwd(const T* x, T* y, std::size_t n) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  run(n, [=](std::size_t i) {
    y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  });
}

template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx_acc, std::size_t n) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(3.14159265358979323846L));
  run(n, [=](std::size_t i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
    dx_acc[i] += dy[i] * (cdf + x[i] * pdf);
  });
}

template <typename T>
void sigmoid_fwd(const T* x, T* y, std::size_t n) {
  run(n, [=](std::size_t i) {
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  });
}

template <typename T>
void sigmoid_bwd(const T* y, const T* dy, T* dx_acc, std::size_t n) {
  run(n, [=](std::size_t i) { dx_acc[i] += dy[i] * y[i] * (T(1) - y[i]); });
}

template <typename T>
void clamp_fwd(const T* x, T lo, T hi, T* y, std::size_t n) {
  run(n, [=](std::size_t i) { y[i] = std::min(std::max(x[i], lo), hi); });
}

template <typename T>
void clamp_bwd(const T* x, T lo, T hi, const T* dy, T* dx_acc, std::size_t n) {
  run(n, [=](std::size_t i) {
    if (x[i] >= lo && x[i] <= hi) dx_acc[i] += dy[i];
  });
}

template <typename T>
void gather_rows(const T* src, const std::uint32_t* idx, T* dst, std::size_t n_rows,
                 std::size_t cols) {
  run(n_rows, [=](std::size_t i) {
    const T* s = src + static_cast<std::size_t>(idx[i]) * cols;
    std::copy(s, s + cols, dst + i * cols);
  });
}

template <typename T>
void scatter_rows_acc(const T* src, const std::uint32_t* idx, T* dst, std::size_t n_rows,
                      std::size_t cols) {
  run(cols, [=](std::size_t j) {
    for (std::size_t i = 0; i < n_rows; ++i)
      dst[static_cast<std::size_t>(idx[i]) * cols + j] += src[i * cols + j];
  });
}

template <typename T>
void layer_norm_rows_fwd(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                         std::size_t rows, std::size_t cols) {
  run(rows, [=](std::size_t r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu = T(0);
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= T(cols);
    T var = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      const T d = xr[j] - mu;
      var += d * d;
    }
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t j = 0; j < cols; ++j) yr[j] = gamma[j] * ((xr[j] - mu) * rs) + beta[j];
  });
}

template <typename T>
void layer_norm_rows_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                         T* dx_acc, T* dgamma_acc, T* dbeta_acc, std::size_t rows,
                         std::size_t cols) {
  run(rows, [=](std::size_t r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx_acc + r * cols;
    const T mu = mean[r];
    const T rs = rstd[r];
    T s1 = T(0), s2 = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T dyg = dyr[j] * gamma[j];
      s1 += dyg;
      s2 += dyg * xhat;
    }
    s1 /= T(cols);
    s2 /= T(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T dyg = dyr[j] * gamma[j];
      dxr[j] += rs * (dyg - s1 - xhat * s2);
    }
  });
  run(cols, [=](std::size_t j) {
    T dg = T(0), db = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T xhat = (x[r * cols + j] - mean[r]) * rstd[r];
      dg += dy[r * cols + j] * xhat;
      db += dy[r * cols + j];
    }
    dgamma_acc[j] += dg;
    dbeta_acc[j] += db;
  });
}

template <typename T>
void masked_softmax_rows_fwd(const T* x, const std::uint8_t* valid, T* y, std::size_t rows,
                             std::size_t cols, bool canonical) {
  run(rows, [=](std::size_t r) {
    softmax_row(x + r * cols, valid + r * cols, y + r * cols, cols, canonical);
  });
}

template <typename T>
void masked_softmax_rows_bwd(const T* y, const std::uint8_t* valid, const T* dy, T* dx_acc,
                             std::size_t rows, std::size_t cols) {
  run(rows, [=](std::size_t r) {
    const T* yr = y + r * cols;
    const T* dyr = dy + r * cols;
    const std::uint8_t* vr = valid + r * cols;
    T s = T(0);
    for (std::size_t j = 0; j < cols; ++j)
      if (vr[j]) s += yr[j] * dyr[j];
    T* dxr = dx_acc + r * cols;
    for (std::size_t j = 0; j < cols; ++j)
      if (vr[j]) dxr[j] += yr[j] * (dyr[j] - s);
  });
}

template <typename T>
void max_pool_rows_fwd(const T* x, const std::uint8_t* valid, std::size_t r0, std::size_t r1,
                       std::size_t cols, T* out, std::uint32_t* argmax) {
  run(cols, [=](std::size_t j) {
    T best = T(0);
    std::uint32_t at = std::numeric_limits<std::uint32_t>::max();
    for (std::size_t r = r0; r < r1; ++r) {
      if (!valid[r]) continue;
      const T v = x[r * cols + j];
      if (at == std::numeric_limits<std::uint32_t>::max() || v > best) {
        best = v;
        at = static_cast<std::uint32_t>(r);
      }
    }
    out[j] = at == std::numeric_limits<std::uint32_t>::max() ? T(0) : best;
    argmax[j] = at;
  });
}

template <typename T>
void max_pool_rows_bwd(const std::uint32_t* argmax, const T* dout, T* dx_acc, std::size_t cols) {
  run(cols, [=](std::size_t j) {
    if (argmax[j] == std::numeric_limits<std::uint32_t>::max()) return;
    dx_acc[static_cast<std::size_t>(argmax[j]) * cols + j] += dout[j];
  });
}

template <typename T>
void mha_fwd(const T* q, const T* k, const T* v, const std::uint8_t* key_valid, T* ctx, T* attn,
             std::size_t batch, std::size_t seq, std::size_t heads, std::size_t hidden,
             bool canonical) {
  const std::size_t dh = hidden / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  run(batch * heads * seq, [=](std::size_t u) {
    const std::size_t b = u / (heads * seq);
    const std::size_t h = (u / seq) % heads;
    const std::size_t t = u % seq;
    const std::uint8_t* vb = key_valid + b * seq;
    T* ctx_t = ctx + (b * seq + t) * hidden + h * dh;
    T* w = attn + ((b * heads + h) * seq + t) * seq;
    if (!vb[t]) {
      std::fill(ctx_t, ctx_t + dh, T(0));
      std::fill(w, w + seq, T(0));
      return;
    }
    const T* qrow = q + (b * seq + t) * hidden + h * dh;
    for (std::size_t s = 0; s < seq; ++s) {
      if (!vb[s]) {
        w[s] = T(0);
        continue;
      }
      const T* krow = k + (b * seq + s) * hidden + h * dh;
      T dot = T(0);
      for (std::size_t d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
      w[s] = dot * scale;
    }
    softmax_row(w, vb, w, seq, canonical);
    std::fill(ctx_t, ctx_t + dh, T(0));
    if (canonical) {
      // Accumulate keys in an order fixed by their content, not their
      // position: sort by weight, breaking ties on the value row. Identical
      // (weight, value) pairs contribute identical terms, so this makes every
      // per-dimension sum permutation independent with a single sort.
      auto& ord = scratch_idx();
      ord.clear();
      for (std::size_t s = 0; s < seq; ++s)
        if (vb[s]) ord.push_back(static_cast<std::uint32_t>(s));
      auto vrow = [=](std::uint32_t s) { return v + (b * seq + s) * hidden + h * dh; };
      std::sort(ord.begin(), ord.end(), [&](std::uint32_t x, std::uint32_t y) {
        if (value_less(w[x], w[y])) return true;
        if (value_less(w[y], w[x])) return false;
        const T* vx = vrow(x);
        const T* vy = vrow(y);
        for (std::size_t d = 0; d < dh; ++d) {
          if (value_less(vx[d], vy[d])) return true;
          if (value_less(vy[d], vx[d])) return false;
        }
        return false;
      });
      for (const std::uint32_t s : ord) {
        const T ws = w[s];
        const T* vr = vrow(s);
        for (std::size_t d = 0; d < dh; ++d) ctx_t[d] += ws * vr[d];
      }
    } else {
      for (std::size_t s = 0; s < seq; ++s) {
        if (!vb[s]) continue;
        const T ws = w[s];
        const T* vrow = v + (b * seq + s) * hidden + h * dh;
        for (std::size_t d = 0; d < dh; ++d) ctx_t[d] += ws * vrow[d];
      }
    }
  });
}

template <typename T>
void mha_bwd(const T* q, const T* k, const T* v, const std::uint8_t* key_valid, const T* attn,
             const T* dctx, T* dq_acc, T* dk_acc, T* dv_acc, std::size_t batch, std::size_t seq,
             std::size_t heads, std::size_t hidden) {
  const std::size_t dh = hidden / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  // One unit owns the (batch, head) pair, so the dk/dv accumulations across
  // query positions stay within a single thread.
  run(batch * heads, [=](std::size_t u) {
    const std::size_t b = u / heads;
    const std::size_t h = u % heads;
    const std::uint8_t* vb = key_valid + b * seq;
    auto& dw = scratch_buf<T>();
    dw.resize(seq);
    for (std::size_t t = 0; t < seq; ++t) {
      if (!vb[t]) continue;
      const T* w = attn + ((b * heads + h) * seq + t) * seq;
      const T* dctx_t = dctx + (b * seq + t) * hidden + h * dh;
      const T* qrow = q + (b * seq + t) * hidden + h * dh;
      T s = T(0);
      for (std::size_t sk = 0; sk < seq; ++sk) {
        if (!vb[sk]) continue;
        const T* vrow = v + (b * seq + sk) * hidden + h * dh;
        T d = T(0);
        for (std::size_t j = 0; j < dh; ++j) d += dctx_t[j] * vrow[j];
        dw[sk] = d;
        s += w[sk] * d;
      }
      T* dq_t = dq_acc + (b * seq + t) * hidden + h * dh;
      for (std::size_t sk = 0; sk < seq; ++sk) {
        if (!vb[sk]) continue;
        const T ws = w[sk];
        const T dlogit = ws * (dw[sk] - s) * scale;
        const T* krow = k + (b * seq + sk) * hidden + h * dh;
        T* dk_s = dk_acc + (b * seq + sk) * hidden + h * dh;
        T* dv_s = dv_acc + (b * seq + sk) * hidden + h * dh;
        for (std::size_t j = 0; j < dh; ++j) {
          dv_s[j] += ws * dctx_t[j];
          dk_s[j] += dlogit * qrow[j];
          dq_t[j] += dlogit * krow[j];
        }
      }
    }
  });
}

template <typename T>
void adamw_update(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps, T wd,
                  T bc1, T bc2) {
  run(n, [=](std::size_t i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  });
}

template <typename T>
bool all_finite(const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

#define MAGIC_KERN_INSTANTIATE(T)                                                                 \
  template T detail::canonical_sum<T>(T*, std::size_t);                                           \
  template void matmul_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template void matmul_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template void matmul_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template void add_bias_rows<T>(T*, const T*, std::size_t, std::size_t);                         \
  template void col_sum_acc<T>(const T*, T*, std::size_t, std::size_t);                           \
  template void add_inplace<T>(T*, const T*, std::size_t);                                        \
  template void axpy<T>(T, const T*, T*, std::size_t);                                            \
  template void scale_into<T>(const T*, T, T*, std::size_t, bool);                                \
  template void gelu_fwd<T>(const T*, T*, std::size_t);                                           \
  template void gelu_bwd<T>(const T*, const T*, T*, std::size_t);                                 \
  template void sigmoid_fwd<T>(const T*, T*, std::size_t);                                        \
  template void sigmoid_bwd<T>(const T*, const T*, T*, std::size_t);                              \
  template void clamp_fwd<T>(const T*, T, T, T*, std::size_t);                                    \
  template void clamp_bwd<T>(const T*, T, T, const T*, T*, std::size_t);                          \
  template void gather_rows<T>(const T*, const std::uint32_t*, T*, std::size_t, std::size_t);     \
  template void scatter_rows_acc<T>(const T*, const std::uint32_t*, T*, std::size_t,              \
                                    std::size_t);                                                 \
  template void layer_norm_rows_fwd<T>(const T*, const T*, const T*, T, T*, T*, T*, std::size_t,  \
                                       std::size_t);                                              \
  template void layer_norm_rows_bwd<T>(const T*, const T*, const T*, const T*, const T*, T*, T*,  \
                                       T*, std::size_t, std::size_t);                             \
  template void masked_softmax_rows_fwd<T>(const T*, const std::uint8_t*, T*, std::size_t,        \
                                           std::size_t, bool);                                    \
  template void masked_softmax_rows_bwd<T>(const T*, const std::uint8_t*, const T*, T*,           \
                                           std::size_t, std::size_t);                             \
  template void max_pool_rows_fwd<T>(const T*, const std::uint8_t*, std::size_t, std::size_t,     \
                                     std::size_t, T*, std::uint32_t*);                            \
  template void max_pool_rows_bwd<T>(const std::uint32_t*, const T*, T*, std::size_t);            \
  template void mha_fwd<T>(const T*, const T*, const T*, const std::uint8_t*, T*, T*,             \
                           std::size_t, std::size_t, std::size_t, std::size_t, bool);             \
  template void mha_bwd<T>(const T*, const T*, const T*, const std::uint8_t*, const T*, const T*, \
                           T*, T*, T*, std::size_t, std::size_t, std::size_t, std::size_t);       \
  template void adamw_update<T>(T*, const T*, T*, T*, std::size_t, T, T, T, T, T, T, T);          \
  template bool all_finite<T>(const T*, std::size_t);

MAGIC_KERN_INSTANTIATE(float)
MAGIC_KERN_INSTANTIATE(double)
#undef MAGIC_KERN_INSTANTIATE

}  // namespace magic::kern
