#pragma once

#include <cstddef>
#include <cstdint>

namespace magic::kern {

// Two interchangeable execution modes. `serial` runs plain reference loops;
// `parallel` runs the same loop bodies with OpenMP, splitting work only across
// independent output elements so every reduction keeps its serial order. The
// two modes produce bitwise-identical results for any thread count.
enum class Backend { serial, parallel };

Backend backend();
void set_backend(Backend b);

// Canonical reduction order for attention. When enabled, reductions over the
// key axis (softmax denominator, context accumulation) sum their terms in
// value-sorted order, which makes the forward pass bitwise invariant under
// token permutations. Slightly slower; on by default.
bool canonical_reductions();
void set_canonical_reductions(bool on);

namespace detail {
// Sums terms[0..n) in a permutation-insensitive order (ascending value, with
// -0.0 ordered before +0.0). Clobbers `terms`.
template <typename T>
T canonical_sum(T* terms, std::size_t n);
}  // namespace detail

// --- dense linear algebra ----------------------------------------------------
// c [n x q] = a [n x p] . b [p x q]; += when acc is set
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc = false);
// c [n x q] = a [n x p] . b^T with b stored [q x p]
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc = false);
// c [n x q] = a^T . b with a stored [p x n], b stored [p x q]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t p, std::size_t q,
               bool acc = false);

template <typename T>
void add_bias_rows(T* x, const T* bias, std::size_t rows, std::size_t cols);
// out[j] += sum_i x[i][j]
template <typename T>
void col_sum_acc(const T* x, T* out, std::size_t rows, std::size_t cols);

// --- elementwise --------------------------------------------------------------
template <typename T>
void add_inplace(T* x, const T* y, std::size_t n);
// y += alpha * x
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
template <typename T>
void scale_into(const T* x, T alpha, T* y, std::size_t n, bool acc = false);

// Exact GELU, x * Phi(x) with the erf form.
template <typename T>
void gelu_fwd(const T* x, T* y, std::size_t n);
template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx_acc, std::size_t n);
template <typename T>
void sigmoid_fwd(const T* x, T* y, std::size_t n);
// takes the forward output, not the input
template <typename T>
void sigmoid_bwd(const T* y, const T* dy, T* dx_acc, std::size_t n);
template <typename T>
void clamp_fwd(const T* x, T lo, T hi, T* y, std::size_t n);
template <typename T>
void clamp_bwd(const T* x, T lo, T hi, const T* dy, T* dx_acc, std::size_t n);

// --- row movement --------------------------------------------------------------
template <typename T>
void gather_rows(const T* src, const std::uint32_t* idx, T* dst, std::size_t n_rows,
                 std::size_t cols);
// dst[idx[i]] += src[i]; indices may repeat. Accumulation runs in ascending i
// per column, so the result does not depend on the thread count.
template <typename T>
void scatter_rows_acc(const T* src, const std::uint32_t* idx, T* dst, std::size_t n_rows,
                      std::size_t cols);

// --- layer norm (per row, population variance) ----------------------------------
template <typename T>
void layer_norm_rows_fwd(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                         std::size_t rows, std::size_t cols);
template <typename T>
void layer_norm_rows_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                         T* dx_acc, T* dgamma_acc, T* dbeta_acc, std::size_t rows,
                         std::size_t cols);

// --- masked softmax over matrix rows --------------------------------------------
// valid is [rows x cols]; invalid entries come out exactly 0. A row with no
// valid entry comes out all zero.
template <typename T>
void masked_softmax_rows_fwd(const T* x, const std::uint8_t* valid, T* y, std::size_t rows,
                             std::size_t cols, bool canonical);
template <typename T>
void masked_softmax_rows_bwd(const T* y, const std::uint8_t* valid, const T* dy, T* dx_acc,
                             std::size_t rows, std::size_t cols);

// --- masked max pooling over a row range -----------------------------------------
// out[j] = max over rows r in [r0, r1) with valid[r] of x[r][j]. argmax[j]
// records the winning row (lowest index on ties) for the backward scatter; if
// the range has no valid row, out is 0 and argmax is UINT32_MAX.
template <typename T>
void max_pool_rows_fwd(const T* x, const std::uint8_t* valid, std::size_t r0, std::size_t r1,
                       std::size_t cols, T* out, std::uint32_t* argmax);
template <typename T>
void max_pool_rows_bwd(const std::uint32_t* argmax, const T* dout, T* dx_acc, std::size_t cols);

// --- multi-head attention ----------------------------------------------------------
// q, k, v, ctx: [(batch*seq) x hidden], heads splitting the hidden axis.
// key_valid: [batch x seq]; invalid tokens are skipped as keys and produce an
// all-zero ctx row and attn row as queries. attn stashes the softmax weights,
// [batch x heads x seq x seq], for the backward pass. Logits are scaled by
// 1/sqrt(hidden/heads).
template <typename T>
void mha_fwd(const T* q, const T* k, const T* v, const std::uint8_t* key_valid, T* ctx, T* attn,
             std::size_t batch, std::size_t seq, std::size_t heads, std::size_t hidden,
             bool canonical);
template <typename T>
void mha_bwd(const T* q, const T* k, const T* v, const std::uint8_t* key_valid, const T* attn,
             const T* dctx, T* dq_acc, T* dk_acc, T* dv_acc, std::size_t batch, std::size_t seq,
             std::size_t heads, std::size_t hidden);

// --- optimizer -------------------------------------------------------------------
// Decoupled weight decay: p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p) with
// mhat = m / bc1, vhat = v / bc2 where bc1 = 1 - beta1^t, bc2 = 1 - beta2^t.
template <typename T>
void adamw_update(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps, T wd,
                  T bc1, T bc2);

template <typename T>
bool all_finite(const T* x, std::size_t n);

}  // namespace magic::kern
