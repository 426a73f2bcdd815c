#pragma once

#include <magic/graph.hpp>
#include <magic/kernels.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace magic::ops {

namespace detail {

// Accumulation target for an input's gradient: the real grad buffer when the
// input participates in backprop, otherwise a throwaway.
template <typename T>
T* grad_sink(Node<T>& in, Tensor<T>& scratch) {
  if (in.needs_grad) return in.grad.ptr();
  scratch = Tensor<T>::zeros(in.value.shape);
  return scratch.ptr();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

// c = a . b for a [n x p], b [p x q]
template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
  const std::size_t n = a->value.rows(), p = a->value.cols(), q = b->value.cols();
  detail::require(b->value.rows() == p, "matmul: inner dimensions disagree " +
                                            shape_str(a->value.shape) + " vs " +
                                            shape_str(b->value.shape));
  Tensor<T> out = Tensor<T>::zeros({n, q});
  kern::matmul_nn(a->value.ptr(), b->value.ptr(), out.ptr(), n, p, q);
  return make_node<T>(std::move(out), {a, b}, [n, p, q](Node<T>& o) {
    auto& a_in = *o.inputs[0];
    auto& b_in = *o.inputs[1];
    if (a_in.needs_grad)
      kern::matmul_nt(o.grad.ptr(), b_in.value.ptr(), a_in.grad.ptr(), n, q, p, true);
    if (b_in.needs_grad)
      kern::matmul_tn(a_in.value.ptr(), o.grad.ptr(), b_in.grad.ptr(), p, n, q, true);
  });
}

// x . W + b for x [n x p], W [p x q], b [q]
template <typename T>
NodePtr<T> linear(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& b) {
  const std::size_t n = x->value.rows(), p = x->value.cols(), q = w->value.cols();
  detail::require(w->value.rows() == p, "linear: weight rows != input cols");
  detail::require(b->value.numel() == q, "linear: bias length != output cols");
  Tensor<T> out = Tensor<T>::zeros({n, q});
  kern::matmul_nn(x->value.ptr(), w->value.ptr(), out.ptr(), n, p, q);
  kern::add_bias_rows(out.ptr(), b->value.ptr(), n, q);
  return make_node<T>(std::move(out), {x, w, b}, [n, p, q](Node<T>& o) {
    auto& x_in = *o.inputs[0];
    auto& w_in = *o.inputs[1];
    auto& b_in = *o.inputs[2];
    if (x_in.needs_grad)
      kern::matmul_nt(o.grad.ptr(), w_in.value.ptr(), x_in.grad.ptr(), n, q, p, true);
    if (w_in.needs_grad)
      kern::matmul_tn(x_in.value.ptr(), o.grad.ptr(), w_in.grad.ptr(), p, n, q, true);
    if (b_in.needs_grad) kern::col_sum_acc(o.grad.ptr(), b_in.grad.ptr(), n, q);
  });
}

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  detail::require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> out = a->value;
  kern::add_inplace(out.ptr(), b->value.ptr(), out.numel());
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& o) {
    for (int i = 0; i < 2; ++i) {
      auto& in = *o.inputs[i];
      if (in.needs_grad) kern::add_inplace(in.grad.ptr(), o.grad.ptr(), o.grad.numel());
    }
  });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T alpha) {
  Tensor<T> out = Tensor<T>::zeros(a->value.shape);
  kern::scale_into(a->value.ptr(), alpha, out.ptr(), out.numel());
  return make_node<T>(std::move(out), {a}, [alpha](Node<T>& o) {
    auto& in = *o.inputs[0];
    if (in.needs_grad) kern::axpy(alpha, o.grad.ptr(), in.grad.ptr(), o.grad.numel());
  });
}

template <typename T>
NodePtr<T> gelu(const NodePtr<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x->value.shape);
  kern::gelu_fwd(x->value.ptr(), out.ptr(), out.numel());
  return make_node<T>(std::move(out), {x}, [](Node<T>& o) {
    auto& in = *o.inputs[0];
    if (in.needs_grad)
      kern::gelu_bwd(in.value.ptr(), o.grad.ptr(), in.grad.ptr(), o.grad.numel());
  });
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x->value.shape);
  kern::sigmoid_fwd(x->value.ptr(), out.ptr(), out.numel());
  return make_node<T>(std::move(out), {x}, [](Node<T>& o) {
    auto& in = *o.inputs[0];
    if (in.needs_grad)
      kern::sigmoid_bwd(o.value.ptr(), o.grad.ptr(), in.grad.ptr(), o.grad.numel());
  });
}

template <typename T>
NodePtr<T> clamp(const NodePtr<T>& x, T lo, T hi) {
  Tensor<T> out = Tensor<T>::zeros(x->value.shape);
  kern::clamp_fwd(x->value.ptr(), lo, hi, out.ptr(), out.numel());
  return make_node<T>(std::move(out), {x}, [lo, hi](Node<T>& o) {
    auto& in = *o.inputs[0];
    if (in.needs_grad)
      kern::clamp_bwd(in.value.ptr(), lo, hi, o.grad.ptr(), in.grad.ptr(), o.grad.numel());
  });
}

template <typename T>
NodePtr<T> concat_rows(const std::vector<NodePtr<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no parts");
  const std::size_t cols = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(p->value.cols() == cols, "concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + r * cols);
    r += p->value.rows();
  }
  return make_node<T>(std::move(out), parts, [cols](Node<T>& o) {
    std::size_t r = 0;
    for (auto& pp : o.inputs) {
      auto& in = *pp;
      if (in.needs_grad)
        kern::add_inplace(in.grad.ptr(), o.grad.ptr() + r * cols, in.grad.numel());
      r += in.value.rows();
    }
  });
}

template <typename T>
NodePtr<T> concat_cols(const NodePtr<T>& a, const NodePtr<T>& b) {
  const std::size_t n = a->value.rows(), ca = a->value.cols(), cb = b->value.cols();
  detail::require(b->value.rows() == n, "concat_cols: row mismatch");
  Tensor<T> out = Tensor<T>::zeros({n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a->value.ptr() + i * ca, ca, out.ptr() + i * (ca + cb));
    std::copy_n(b->value.ptr() + i * cb, cb, out.ptr() + i * (ca + cb) + ca);
  }
  return make_node<T>(std::move(out), {a, b}, [n, ca, cb](Node<T>& o) {
    auto& a_in = *o.inputs[0];
    auto& b_in = *o.inputs[1];
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = o.grad.ptr() + i * (ca + cb);
      if (a_in.needs_grad) {
        T* ga = a_in.grad.ptr() + i * ca;
        for (std::size_t j = 0; j < ca; ++j) ga[j] += g[j];
      }
      if (b_in.needs_grad) {
        T* gb = b_in.grad.ptr() + i * cb;
        for (std::size_t j = 0; j < cb; ++j) gb[j] += g[ca + j];
      }
    }
  });
}

template <typename T>
NodePtr<T> gather_rows(const NodePtr<T>& x, std::vector<std::uint32_t> idx) {
  const std::size_t cols = x->value.cols();
  for (const auto i : idx)
    detail::require(i < x->value.rows(), "gather_rows: index out of range");
  Tensor<T> out = Tensor<T>::zeros({idx.size(), cols});
  kern::gather_rows(x->value.ptr(), idx.data(), out.ptr(), idx.size(), cols);
  return make_node<T>(std::move(out), {x}, [idx = std::move(idx), cols](Node<T>& o) {
    auto& in = *o.inputs[0];
    if (in.needs_grad)
      kern::scatter_rows_acc(o.grad.ptr(), idx.data(), in.grad.ptr(), idx.size(), cols);
  });
}

// Per-row layer norm over the last axis; gamma and beta have `cols` entries.
template <typename T>
NodePtr<T> layer_norm_rows(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                           T eps) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  detail::require(gamma->value.numel() == cols && beta->value.numel() == cols,
                  "layer_norm_rows: affine parameter length != cols");
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  Tensor<T> mean = Tensor<T>::zeros({rows});
  Tensor<T> rstd = Tensor<T>::zeros({rows});
  kern::layer_norm_rows_fwd(x->value.ptr(), gamma->value.ptr(), beta->value.ptr(), eps, out.ptr(),
                            mean.ptr(), rstd.ptr(), rows, cols);
  return make_node<T>(
      std::move(out), {x, gamma, beta},
      [rows, cols, mean = std::move(mean), rstd = std::move(rstd)](Node<T>& o) {
        auto& x_in = *o.inputs[0];
        auto& g_in = *o.inputs[1];
        auto& b_in = *o.inputs[2];
        Tensor<T> sx, sg, sb;
        kern::layer_norm_rows_bwd(x_in.value.ptr(), g_in.value.ptr(), mean.ptr(), rstd.ptr(),
                                  o.grad.ptr(), detail::grad_sink(x_in, sx),
                                  detail::grad_sink(g_in, sg), detail::grad_sink(b_in, sb), rows,
                                  cols);
      });
}

// Multi-head self-attention core on already-projected q/k/v, laid out as
// [(batch*seq) x hidden]. key_valid is one byte per token.
template <typename T>
NodePtr<T> mha(const NodePtr<T>& q, const NodePtr<T>& k, const NodePtr<T>& v,
               std::vector<std::uint8_t> key_valid, std::size_t batch, std::size_t seq,
               std::size_t heads) {
  const std::size_t hidden = q->value.cols();
  detail::require(q->value.same_shape(k->value) && q->value.same_shape(v->value),
                  "mha: q/k/v shape mismatch");
  detail::require(q->value.rows() == batch * seq, "mha: rows != batch*seq");
  detail::require(hidden % heads == 0, "mha: hidden not divisible by heads");
  detail::require(key_valid.size() == batch * seq, "mha: mask size mismatch");
  Tensor<T> out = Tensor<T>::zeros(q->value.shape);
  Tensor<T> attn = Tensor<T>::zeros({batch, heads, seq, seq});
  kern::mha_fwd(q->value.ptr(), k->value.ptr(), v->value.ptr(), key_valid.data(), out.ptr(),
                attn.ptr(), batch, seq, heads, hidden, kern::canonical_reductions());
  return make_node<T>(
      std::move(out), {q, k, v},
      [batch, seq, heads, hidden, key_valid = std::move(key_valid),
       attn = std::move(attn)](Node<T>& o) {
        auto& q_in = *o.inputs[0];
        auto& k_in = *o.inputs[1];
        auto& v_in = *o.inputs[2];
        Tensor<T> sq, sk, sv;
        kern::mha_bwd(q_in.value.ptr(), k_in.value.ptr(), v_in.value.ptr(), key_valid.data(),
                      attn.ptr(), o.grad.ptr(), detail::grad_sink(q_in, sq),
                      detail::grad_sink(k_in, sk), detail::grad_sink(v_in, sv), batch, seq, heads,
                      hidden);
      });
}

// Masked max pooling over row spans [r0, r1); one output row per span.
template <typename T>
NodePtr<T> masked_max_pool_spans(const NodePtr<T>& x,
                                 std::vector<std::array<std::uint32_t, 2>> spans,
                                 std::vector<std::uint8_t> valid) {
  const std::size_t cols = x->value.cols();
  detail::require(valid.size() == x->value.rows(), "masked_max_pool_spans: mask size mismatch");
  Tensor<T> out = Tensor<T>::zeros({spans.size(), cols});
  std::vector<std::uint32_t> argmax(spans.size() * cols);
  for (std::size_t s = 0; s < spans.size(); ++s) {
    detail::require(spans[s][0] < spans[s][1] && spans[s][1] <= x->value.rows(),
                    "masked_max_pool_spans: bad span");
    kern::max_pool_rows_fwd(x->value.ptr(), valid.data(), spans[s][0], spans[s][1], cols,
                            out.ptr() + s * cols, argmax.data() + s * cols);
    detail::require(argmax[s * cols] != std::numeric_limits<std::uint32_t>::max(),
                    "masked_max_pool_spans: span is fully masked");
  }
  const std::size_t n_spans = spans.size();
  return make_node<T>(std::move(out), {x},
                      [n_spans, cols, argmax = std::move(argmax)](Node<T>& o) {
                        auto& in = *o.inputs[0];
                        if (!in.needs_grad) return;
                        for (std::size_t s = 0; s < n_spans; ++s)
                          kern::max_pool_rows_bwd(argmax.data() + s * cols, o.grad.ptr() + s * cols,
                                                  in.grad.ptr(), cols);
                      });
}

// Smoothed BCE on a single probability: y' = y(1-eps) + eps/2,
// loss = -(y' ln p + (1-y') ln(1-p)) with p clamped to [1e-7, 1-1e-7].
template <typename T>
T smoothed_bce(T p, int y, T eps) {
  detail::require(eps >= T(0) && eps < T(1), "smoothed_bce: eps out of [0,1)");
  p = std::min(std::max(p, T(1e-7)), T(1) - T(1e-7));
  const T yp = y ? T(1) - eps / T(2) : eps / T(2);
  return -(yp * std::log(p) + (T(1) - yp) * std::log(T(1) - p));
}

// Mean of smoothed BCE over all entries of a scores column, with sigmoid and
// the [1e-7, 1-1e-7] probability clamp folded in. targets are 0/1 per row.
template <typename T>
NodePtr<T> smoothed_bce_mean(const NodePtr<T>& scores, std::vector<std::uint8_t> targets, T eps) {
  const std::size_t n = scores->value.numel();
  detail::require(targets.size() == n, "smoothed_bce_mean: target count mismatch");
  detail::require(eps >= T(0) && eps < T(1), "smoothed_bce_mean: eps out of [0,1)");
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  Tensor<T> praw = Tensor<T>::zeros({n});
  kern::sigmoid_fwd(scores->value.ptr(), praw.ptr(), n);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::min(std::max(praw.data[i], lo), hi);
    const T yp = targets[i] ? (T(1) - eps) + eps / T(2) : eps / T(2);
    total += -(yp * std::log(p) + (T(1) - yp) * std::log(T(1) - p));
  }
  total /= T(n);
  return make_node<T>(Tensor<T>::scalar(total), {scores},
                      [n, eps, lo, hi, targets = std::move(targets),
                       praw = std::move(praw)](Node<T>& o) {
                        auto& in = *o.inputs[0];
                        if (!in.needs_grad) return;
                        const T go = o.grad.data[0] / T(n);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T pr = praw.data[i];
                          if (pr < lo || pr > hi) continue;  // clamp zeroes the gradient
                          const T yp =
                              targets[i] ? (T(1) - eps) + eps / T(2) : eps / T(2);
                          const T dbce_dp = -yp / pr + (T(1) - yp) / (T(1) - pr);
                          in.grad.data[i] += go * dbce_dp * pr * (T(1) - pr);
                        }
                      });
}

// Symmetric in-batch InfoNCE over cosine similarities: rows of za and zb are
// l2-normalized, logits = cos/temperature, and the image-to-text and
// text-to-image cross entropies with diagonal targets are averaged.
template <typename T>
NodePtr<T> symmetric_infonce(const NodePtr<T>& za, const NodePtr<T>& zb, T temperature) {
  detail::require(temperature > T(0), "symmetric_infonce: temperature must be positive");
  detail::require(za->value.same_shape(zb->value), "symmetric_infonce: shape mismatch");
  const std::size_t n = za->value.rows(), h = za->value.cols();
  Tensor<T> an = Tensor<T>::zeros({n, h}), bn = Tensor<T>::zeros({n, h});
  Tensor<T> norm_a = Tensor<T>::zeros({n}), norm_b = Tensor<T>::zeros({n});
  for (std::size_t i = 0; i < n; ++i) {
    T sa = T(0), sb = T(0);
    for (std::size_t j = 0; j < h; ++j) {
      sa += za->value.at(i, j) * za->value.at(i, j);
      sb += zb->value.at(i, j) * zb->value.at(i, j);
    }
    detail::require(sa > T(0) && sb > T(0), "symmetric_infonce: zero-norm embedding");
    norm_a.data[i] = std::sqrt(sa);
    norm_b.data[i] = std::sqrt(sb);
    for (std::size_t j = 0; j < h; ++j) {
      an.at(i, j) = za->value.at(i, j) / norm_a.data[i];
      bn.at(i, j) = zb->value.at(i, j) / norm_b.data[i];
    }
  }
  Tensor<T> logits = Tensor<T>::zeros({n, n});
  kern::matmul_nt(an.ptr(), bn.ptr(), logits.ptr(), n, h, n);
  for (auto& l : logits.data) l /= temperature;

  // loss = mean over rows and columns of -log softmax at the diagonal
  auto neg_log_softmax_diag = [n](const Tensor<T>& m, bool rows_axis, std::size_t i) {
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const T v = rows_axis ? m.at(i, j) : m.at(j, i);
      if (v > hi) hi = v;
    }
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T v = rows_axis ? m.at(i, j) : m.at(j, i);
      s += std::exp(v - hi);
    }
    return (hi + std::log(s)) - m.at(i, i);
  };
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i)
    total += neg_log_softmax_diag(logits, true, i) + neg_log_softmax_diag(logits, false, i);
  total /= T(2 * n);

  return make_node<T>(
      Tensor<T>::scalar(total), {za, zb},
      [n, h, temperature, an = std::move(an), bn = std::move(bn), norm_a = std::move(norm_a),
       norm_b = std::move(norm_b), logits = std::move(logits)](Node<T>& o) {
        auto& a_in = *o.inputs[0];
        auto& b_in = *o.inputs[1];
        const T go = o.grad.data[0];
        // dlogits = go * (softmax_rows - I + softmax_cols - I) / (2n)
        Tensor<T> dl = Tensor<T>::zeros({n, n});
        std::vector<std::uint8_t> all_valid(n * n, 1);
        Tensor<T> pr = Tensor<T>::zeros({n, n});
        kern::masked_softmax_rows_fwd(logits.ptr(), all_valid.data(), pr.ptr(), n, n, false);
        Tensor<T> lt = Tensor<T>::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) lt.at(i, j) = logits.at(j, i);
        Tensor<T> pc = Tensor<T>::zeros({n, n});
        kern::masked_softmax_rows_fwd(lt.ptr(), all_valid.data(), pc.ptr(), n, n, false);
        const T w = go / T(2 * n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T delta = i == j ? T(1) : T(0);
            dl.at(i, j) = w * ((pr.at(i, j) - delta) + (pc.at(j, i) - delta));
          }
        // through the temperature and the normalization
        for (auto& g : dl.data) g /= temperature;
        Tensor<T> dan = Tensor<T>::zeros({n, h}), dbn = Tensor<T>::zeros({n, h});
        kern::matmul_nn(dl.ptr(), bn.ptr(), dan.ptr(), n, n, h);
        kern::matmul_tn(dl.ptr(), an.ptr(), dbn.ptr(), n, n, h);
        auto unnormalize = [n, h](const Tensor<T>& dz_n, const Tensor<T>& z_n,
                                  const Tensor<T>& norm, Node<T>& target) {
          if (!target.needs_grad) return;
          for (std::size_t i = 0; i < n; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < h; ++j) dot += dz_n.at(i, j) * z_n.at(i, j);
            for (std::size_t j = 0; j < h; ++j)
              target.grad.at(i, j) += (dz_n.at(i, j) - z_n.at(i, j) * dot) / norm.data[i];
          }
        };
        unnormalize(dan, an, norm_a, a_in);
        unnormalize(dbn, bn, norm_b, b_in);
      });
}

// argmax with ties to the lowest index
template <typename T>
std::size_t predict(const std::vector<T>& scores) {
  detail::require(!scores.empty(), "predict: empty scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

}  // namespace magic::ops
