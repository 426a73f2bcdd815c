#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "magic/batch.hpp"
#include "magic/graph.hpp"
#include "magic/ops.hpp"
#include "magic/rng.hpp"
#include "magic/tensor.hpp"

namespace magic {

enum class Variant { magic, no_obj_ctx, no_mv_ctx, no_ctx, match_baseline };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::magic: return "magic";
    case Variant::no_obj_ctx: return "magic_no_obj_ctx";
    case Variant::no_mv_ctx: return "magic_no_mv_ctx";
    case Variant::no_ctx: return "magic_no_ctx";
    case Variant::match_baseline: return "match_baseline";
  }
  return "magic";
}

inline bool variant_from_name(const std::string& s, Variant& out) {
  for (Variant v : {Variant::magic, Variant::no_obj_ctx, Variant::no_mv_ctx, Variant::no_ctx,
                    Variant::match_baseline}) {
    if (s == variant_name(v)) {
      out = v;
      return true;
    }
  }
  return false;
}

struct ModelConfig {
  std::size_t feature_dim = 512;
  std::size_t hidden = 256;
  std::size_t layers = 3;
  std::size_t heads = 8;
  std::size_t ffn_dim = 1024;
  std::size_t max_tokens = 32;
  std::size_t max_views = 8;
  Variant variant = Variant::magic;
  bool use_view_positions = false;
  double smoothing_eps = 0.1;
  double contrastive_weight = 0.0;
  double contrastive_temperature = 0.07;
};

constexpr double kNormEps = 1e-5;

// Closed-form parameter inventory. Transformer variants: two d->h input
// projections, the 2xh token-type table, an optional n_max x h view-position
// table, `layers` pre-norm blocks (two norms, four h->h attention projections,
// h->ffn->h MLP), a final norm, and the h->h->1 scorer. The MATCH baseline is
// just the 2d->h->1 MLP.
inline std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t d = c.feature_dim, h = c.hidden, f = c.ffn_dim;
  if (c.variant == Variant::match_baseline) return 2 * d * h + h + h + 1;
  std::size_t n = 2 * (d * h + h);
  n += 2 * h;
  if (c.use_view_positions) n += c.max_views * h;
  n += c.layers * (4 * h + 4 * (h * h + h) + (h * f + f) + (f * h + h));
  n += 2 * h;
  n += (h * h + h) + (h + 1);
  return n;
}

template <typename T>
struct BlockParams {
  NodePtr<T> norm1_g, norm1_b;
  NodePtr<T> wq, bq, wk, bk, wv, bv, wo, bo;
  NodePtr<T> norm2_g, norm2_b;
  NodePtr<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  NodePtr<T> view_w, view_b, lang_w, lang_b;
  NodePtr<T> token_type;  // row 0 added to view tokens, row 1 to language tokens
  NodePtr<T> view_pos;    // present only with use_view_positions
  std::vector<BlockParams<T>> blocks;
  NodePtr<T> out_norm_g, out_norm_b;
  NodePtr<T> score_w1, score_b1, score_w2, score_b2;
  std::vector<std::pair<std::string, NodePtr<T>>> registry;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : registry) n += p->value.numel();
    return n;
  }
  std::vector<NodePtr<T>> trainable() const {
    std::vector<NodePtr<T>> out;
    out.reserve(registry.size());
    for (const auto& [name, p] : registry) out.push_back(p);
    return out;
  }
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  ops::detail::require(cfg.hidden >= 1 && cfg.feature_dim >= 1 && cfg.ffn_dim >= 1,
                       "init_model: zero-sized dimension");
  ops::detail::require(cfg.hidden % cfg.heads == 0, "init_model: hidden not divisible by heads");
  ops::detail::require(cfg.max_views >= 1 && cfg.max_tokens >= 1,
                       "init_model: max_views and max_tokens must be at least 1");
  ops::detail::require(cfg.smoothing_eps >= 0.0 && cfg.smoothing_eps < 1.0,
                       "init_model: smoothing out of [0,1)");
  ops::detail::require(cfg.contrastive_weight == 0.0 || cfg.variant != Variant::match_baseline,
                       "init_model: contrastive loss needs a transformer variant");

  ModelParams<T> p;
  p.cfg = cfg;
  Rng rng(seed);
  // Fan-in scaling keeps activations O(1) at any width; a fixed small std
  // (the old default) stalls training once hidden grows past a few dozen.
  auto normal = [&](const std::string& name, std::vector<std::size_t> shape, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (auto& x : t.data) x = T(stddev * rng.normal());
    auto node = leaf<T>(std::move(t), true);
    p.registry.emplace_back(name, node);
    return node;
  };
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(double(n)); };
  // Readout starts near zero so every candidate opens at even odds.
  constexpr double kReadoutStd = 0.02;
  auto constant = [&](const std::string& name, std::vector<std::size_t> shape, T value) {
    Tensor<T> t = Tensor<T>::full(shape, value);
    auto node = leaf<T>(std::move(t), true);
    p.registry.emplace_back(name, node);
    return node;
  };

  const std::size_t d = cfg.feature_dim, h = cfg.hidden, f = cfg.ffn_dim;
  if (cfg.variant == Variant::match_baseline) {
    p.score_w1 = normal("scorer.w1", {2 * d, h}, fan(2 * d));
    p.score_b1 = constant("scorer.b1", {h}, T(0));
    p.score_w2 = normal("scorer.w2", {h, 1}, kReadoutStd);
    p.score_b2 = constant("scorer.b2", {1}, T(0));
    return p;
  }

  p.view_w = normal("view_proj.weight", {d, h}, fan(d));
  p.view_b = constant("view_proj.bias", {h}, T(0));
  p.lang_w = normal("lang_proj.weight", {d, h}, fan(d));
  p.lang_b = constant("lang_proj.bias", {h}, T(0));
  p.token_type = normal("token_type", {2, h}, fan(h));
  if (cfg.use_view_positions) p.view_pos = normal("view_positions", {cfg.max_views, h}, fan(h));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    BlockParams<T> blk;
    blk.norm1_g = constant(b + "norm1.gain", {h}, T(1));
    blk.norm1_b = constant(b + "norm1.bias", {h}, T(0));
    blk.wq = normal(b + "attn.wq", {h, h}, fan(h));
    blk.bq = constant(b + "attn.bq", {h}, T(0));
    blk.wk = normal(b + "attn.wk", {h, h}, fan(h));
    blk.bk = constant(b + "attn.bk", {h}, T(0));
    blk.wv = normal(b + "attn.wv", {h, h}, fan(h));
    blk.bv = constant(b + "attn.bv", {h}, T(0));
    blk.wo = normal(b + "attn.wo", {h, h}, fan(h));
    blk.bo = constant(b + "attn.bo", {h}, T(0));
    blk.norm2_g = constant(b + "norm2.gain", {h}, T(1));
    blk.norm2_b = constant(b + "norm2.bias", {h}, T(0));
    blk.ffn_w1 = normal(b + "ffn.w1", {h, f}, fan(h));
    blk.ffn_b1 = constant(b + "ffn.b1", {f}, T(0));
    blk.ffn_w2 = normal(b + "ffn.w2", {f, h}, fan(f));
    blk.ffn_b2 = constant(b + "ffn.b2", {h}, T(0));
    p.blocks.push_back(std::move(blk));
  }
  p.out_norm_g = constant("out_norm.gain", {h}, T(1));
  p.out_norm_b = constant("out_norm.bias", {h}, T(0));
  p.score_w1 = normal("scorer.w1", {h, h}, fan(h));
  p.score_b1 = constant("scorer.b1", {h}, T(0));
  p.score_w2 = normal("scorer.w2", {h, 1}, kReadoutStd);
  p.score_b2 = constant("scorer.b2", {1}, T(0));
  return p;
}

// Token sequences for one batch, flattened to [seqs*seq_len, hidden].
// object_spans holds batch.size*batch.objects global row ranges in instance
// (then object) order; lang_spans holds one range per sequence.
template <typename T>
struct Assembly {
  NodePtr<T> tokens;
  std::vector<std::uint8_t> key_valid;
  std::size_t seqs = 0, seq_len = 0;
  std::vector<std::array<std::uint32_t, 2>> object_spans;
  std::vector<std::array<std::uint32_t, 2>> lang_spans;
};

namespace detail {

template <typename T>
void check_batch(const Batch<T>& batch, const ModelConfig& cfg) {
  ops::detail::require(batch.consistent(), "forward: inconsistent batch shapes");
  ops::detail::require(batch.size >= 1 && batch.objects >= 1 && batch.views >= 1 &&
                           batch.tokens >= 1,
                       "forward: empty batch axis");
  ops::detail::require(batch.dim == cfg.feature_dim, "forward: feature dim mismatch");
  ops::detail::require(batch.views <= cfg.max_views, "forward: more views than max_views");
  ops::detail::require(batch.tokens <= cfg.max_tokens, "forward: more tokens than max_tokens");
  for (std::size_t b = 0; b < batch.size; ++b) {
    ops::detail::require(batch.targets[b] < batch.objects, "forward: target out of range");
    if (cfg.contrastive_weight != 0.0 || cfg.variant == Variant::match_baseline) {
      // these paths max-pool the language span, so it cannot be empty; plain
      // transformer scoring tolerates a fully masked annotation
      bool any_lang = false;
      for (std::size_t t = 0; t < batch.tokens; ++t)
        any_lang = any_lang || batch.lang_valid[b * batch.tokens + t];
      ops::detail::require(any_lang, "forward: instance with no valid language token");
    }
    for (std::size_t o = 0; o < batch.objects; ++o) {
      bool any_view = false;
      for (std::size_t v = 0; v < batch.views; ++v)
        any_view = any_view || batch.view_valid[(b * batch.objects + o) * batch.views + v];
      ops::detail::require(any_view, "forward: object with no valid view");
    }
  }
}

// Max-pool each object's projected view embeddings into one token.
template <typename T>
NodePtr<T> pool_objects(const NodePtr<T>& proj_views, const Batch<T>& batch) {
  std::vector<std::array<std::uint32_t, 2>> spans(batch.size * batch.objects);
  for (std::size_t s = 0; s < spans.size(); ++s)
    spans[s] = {std::uint32_t(s * batch.views), std::uint32_t((s + 1) * batch.views)};
  return ops::masked_max_pool_spans(proj_views, std::move(spans), batch.view_valid);
}

}  // namespace detail

template <typename T>
Assembly<T> embed_and_assemble(const Batch<T>& batch, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.cfg;
  ops::detail::require(cfg.variant != Variant::match_baseline,
                       "embed_and_assemble: match_baseline has no token sequence");
  detail::check_batch(batch, cfg);
  const std::size_t B = batch.size, m = batch.objects, n = batch.views, k = batch.tokens;

  auto proj_v = ops::linear(leaf<T>(batch.view_feats), params.view_w, params.view_b);
  if (cfg.use_view_positions) {
    std::vector<std::uint32_t> pos(B * m * n);
    for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = std::uint32_t(r % n);
    proj_v = ops::add(proj_v, ops::gather_rows(params.view_pos, std::move(pos)));
  }
  auto proj_l = ops::linear(leaf<T>(batch.lang_feats), params.lang_w, params.lang_b);

  const bool pooled = cfg.variant == Variant::no_mv_ctx || cfg.variant == Variant::no_ctx;
  const bool per_object = cfg.variant == Variant::no_obj_ctx || cfg.variant == Variant::no_ctx;
  NodePtr<T> obj_part = pooled ? detail::pool_objects(proj_v, batch) : proj_v;
  const std::size_t obj_rows = pooled ? 1 : n;       // view rows contributed per object
  const std::size_t obj_total = B * m * obj_rows;    // rows of obj_part

  Assembly<T> a;
  a.seqs = per_object ? B * m : B;
  a.seq_len = (per_object ? obj_rows : m * obj_rows) + k;
  const std::size_t total = a.seqs * a.seq_len;

  std::vector<std::uint32_t> order(total), type_ids(total);
  a.key_valid.assign(total, 1);
  std::size_t r = 0;
  auto push_views = [&](std::size_t b, std::size_t o) {
    for (std::size_t v = 0; v < obj_rows; ++v, ++r) {
      order[r] = std::uint32_t((b * m + o) * obj_rows + v);
      type_ids[r] = 0;
      a.key_valid[r] = pooled ? 1 : batch.view_valid[(b * m + o) * n + v];
    }
  };
  auto push_lang = [&](std::size_t b) {
    const std::uint32_t lo = std::uint32_t(r);
    for (std::size_t t = 0; t < k; ++t, ++r) {
      order[r] = std::uint32_t(obj_total + b * k + t);
      type_ids[r] = 1;
      a.key_valid[r] = batch.lang_valid[b * k + t];
    }
    a.lang_spans.push_back({lo, std::uint32_t(r)});
  };
  for (std::size_t b = 0; b < B; ++b) {
    if (per_object) {
      for (std::size_t o = 0; o < m; ++o) {
        a.object_spans.push_back({std::uint32_t(r), std::uint32_t(r + obj_rows)});
        push_views(b, o);
        push_lang(b);
      }
    } else {
      for (std::size_t o = 0; o < m; ++o) {
        a.object_spans.push_back({std::uint32_t(r), std::uint32_t(r + obj_rows)});
        push_views(b, o);
      }
      push_lang(b);
    }
  }

  auto rows = ops::gather_rows(ops::concat_rows<T>({obj_part, proj_l}), std::move(order));
  a.tokens = ops::add(rows, ops::gather_rows(params.token_type, std::move(type_ids)));
  return a;
}

template <typename T>
NodePtr<T> encode(const Assembly<T>& a, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.cfg;
  NodePtr<T> x = a.tokens;
  for (const auto& blk : params.blocks) {
    auto normed = ops::layer_norm_rows(x, blk.norm1_g, blk.norm1_b, T(kNormEps));
    auto ctx = ops::mha(ops::linear(normed, blk.wq, blk.bq), ops::linear(normed, blk.wk, blk.bk),
                        ops::linear(normed, blk.wv, blk.bv), a.key_valid, a.seqs, a.seq_len,
                        cfg.heads);
    x = ops::add(x, ops::linear(ctx, blk.wo, blk.bo));
    auto normed2 = ops::layer_norm_rows(x, blk.norm2_g, blk.norm2_b, T(kNormEps));
    auto inner = ops::gelu(ops::linear(normed2, blk.ffn_w1, blk.ffn_b1));
    x = ops::add(x, ops::linear(inner, blk.ffn_w2, blk.ffn_b2));
  }
  return ops::layer_norm_rows(x, params.out_norm_g, params.out_norm_b, T(kNormEps));
}

template <typename T>
NodePtr<T> score_mlp(const NodePtr<T>& pooled, const ModelParams<T>& params) {
  auto hidden = ops::gelu(ops::linear(pooled, params.score_w1, params.score_b1));
  return ops::linear(hidden, params.score_w2, params.score_b2);
}

// scores: [batch*objects, 1]; pooled: object embeddings (u). lang_pooled is
// populated only when the contrastive term is on.
template <typename T>
struct ForwardOutput {
  NodePtr<T> scores;
  NodePtr<T> pooled;
  NodePtr<T> lang_pooled;
  NodePtr<T> token_outputs;
};

template <typename T>
ForwardOutput<T> forward(const Batch<T>& batch, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.cfg;
  ForwardOutput<T> out;
  if (cfg.variant == Variant::match_baseline) {
    detail::check_batch(batch, cfg);
    auto view_pool = detail::pool_objects(leaf<T>(batch.view_feats), batch);
    std::vector<std::array<std::uint32_t, 2>> lang_spans(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b)
      lang_spans[b] = {std::uint32_t(b * batch.tokens), std::uint32_t((b + 1) * batch.tokens)};
    auto lang_pool =
        ops::masked_max_pool_spans(leaf<T>(batch.lang_feats), std::move(lang_spans),
                                   batch.lang_valid);
    std::vector<std::uint32_t> rep(batch.size * batch.objects);
    for (std::size_t s = 0; s < rep.size(); ++s) rep[s] = std::uint32_t(s / batch.objects);
    auto joined = ops::concat_cols(view_pool, ops::gather_rows(lang_pool, std::move(rep)));
    out.scores = score_mlp(joined, params);
    return out;
  }

  Assembly<T> a = embed_and_assemble(batch, params);
  out.token_outputs = encode(a, params);
  out.pooled = ops::masked_max_pool_spans(out.token_outputs, a.object_spans, a.key_valid);
  out.scores = score_mlp(out.pooled, params);
  if (cfg.contrastive_weight != 0.0) {
    auto lang_all = ops::masked_max_pool_spans(out.token_outputs, a.lang_spans, a.key_valid);
    // one language row per instance: for per-object variants take the target
    // object's sequence
    std::vector<std::uint32_t> pick(batch.size);
    const bool per_object = a.seqs == batch.size * batch.objects;
    for (std::size_t b = 0; b < batch.size; ++b)
      pick[b] = std::uint32_t(per_object ? b * batch.objects + batch.targets[b] : b);
    out.lang_pooled = ops::gather_rows(lang_all, std::move(pick));
  }
  return out;
}

// Mean over all objects of the smoothed per-object BCE, one positive per
// instance; plus the weighted contrastive term when configured.
template <typename T>
NodePtr<T> total_loss(const ForwardOutput<T>& out, const Batch<T>& batch,
                      const ModelParams<T>& params) {
  std::vector<std::uint8_t> onehot(batch.size * batch.objects, 0);
  for (std::size_t b = 0; b < batch.size; ++b) onehot[b * batch.objects + batch.targets[b]] = 1;
  auto loss = ops::smoothed_bce_mean(out.scores, std::move(onehot), T(params.cfg.smoothing_eps));
  if (params.cfg.contrastive_weight != 0.0) {
    std::vector<std::uint32_t> tgt(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b)
      tgt[b] = std::uint32_t(b * batch.objects + batch.targets[b]);
    auto za = ops::gather_rows(out.pooled, std::move(tgt));
    auto nce =
        ops::symmetric_infonce(za, out.lang_pooled, T(params.cfg.contrastive_temperature));
    loss = ops::add(loss, ops::scale(nce, T(params.cfg.contrastive_weight)));
  }
  return loss;
}

// Per-instance argmax over the m raw scores, ties broken toward the lowest
// index.
template <typename T>
std::vector<std::uint32_t> predict_batch(const Tensor<T>& scores, std::size_t batch,
                                         std::size_t objects) {
  ops::detail::require(scores.numel() == batch * objects, "predict_batch: size mismatch");
  std::vector<std::uint32_t> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<T> s(scores.data.begin() + b * objects, scores.data.begin() + (b + 1) * objects);
    out[b] = std::uint32_t(ops::predict(s));
  }
  return out;
}

}  // namespace magic
