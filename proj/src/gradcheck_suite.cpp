#include "magic/gradcheck_suite.hpp"

#include <array>
#include <functional>

#include "magic/model.hpp"
#include "magic/ops.hpp"
#include "magic/rng.hpp"

namespace magic {

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.5,
                             double hi = 1.5) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

std::vector<std::pair<std::string, GradCheckReport>> gradcheck_suite(double h, double tol) {
  Rng rng(31);
  std::vector<std::pair<std::string, GradCheckReport>> out;

  auto check = [&](const std::string& name, const std::function<NodePtr<double>()>& fn,
                   const std::vector<NodePtr<double>>& params) {
    out.emplace_back(name, grad_check(fn, params, h, tol));
  };

  // reduce matrix outputs to a scalar through a fixed random readout so every
  // coordinate's gradient is exercised
  auto readout = [&](const NodePtr<double>& x) {
    Tensor<double> r = random_tensor({x->value.cols(), std::size_t(1)}, rng);
    Tensor<double> rr = random_tensor({std::size_t(1), x->value.rows()}, rng);
    return [r = leaf(r), rr = leaf(rr)](const NodePtr<double>& y) {
      return ops::matmul(rr, ops::matmul(y, r));
    };
  };

  {
    auto a = leaf(random_tensor({3, 4}, rng), true);
    auto b = leaf(random_tensor({4, 2}, rng), true);
    auto red = readout(ops::matmul(a, b));
    check("matmul", [&] { return red(ops::matmul(a, b)); }, {a, b});
  }
  {
    auto x = leaf(random_tensor({3, 4}, rng), true);
    auto w = leaf(random_tensor({4, 2}, rng), true);
    auto b = leaf(random_tensor({2}, rng), true);
    auto red = readout(ops::linear(x, w, b));
    check("linear", [&] { return red(ops::linear(x, w, b)); }, {x, w, b});
  }
  {
    auto a = leaf(random_tensor({3, 4}, rng), true);
    auto b = leaf(random_tensor({3, 4}, rng), true);
    auto red = readout(ops::add(a, b));
    check("add", [&] { return red(ops::add(a, b)); }, {a, b});
  }
  {
    auto a = leaf(random_tensor({3, 4}, rng), true);
    auto red = readout(ops::scale(a, -0.7));
    check("scale", [&] { return red(ops::scale(a, -0.7)); }, {a});
  }
  {
    auto x = leaf(random_tensor({3, 5}, rng), true);
    auto red = readout(ops::gelu(x));
    check("gelu", [&] { return red(ops::gelu(x)); }, {x});
  }
  {
    auto x = leaf(random_tensor({3, 5}, rng), true);
    auto red = readout(ops::sigmoid(x));
    check("sigmoid", [&] { return red(ops::sigmoid(x)); }, {x});
  }
  {
    auto x = leaf(random_tensor({3, 5}, rng, -2.0, 2.0), true);
    auto red = readout(ops::clamp(x, -1.0, 1.0));
    check("clamp", [&] { return red(ops::clamp(x, -1.0, 1.0)); }, {x});
  }
  {
    auto x = leaf(random_tensor({4, 6}, rng), true);
    auto g = leaf(random_tensor({6}, rng, 0.5, 1.5), true);
    auto b = leaf(random_tensor({6}, rng), true);
    auto red = readout(ops::layer_norm_rows(x, g, b, 1e-5));
    check("layer_norm", [&] { return red(ops::layer_norm_rows(x, g, b, 1e-5)); }, {x, g, b});
  }
  {
    auto q = leaf(random_tensor({6, 8}, rng), true);
    auto k = leaf(random_tensor({6, 8}, rng), true);
    auto v = leaf(random_tensor({6, 8}, rng), true);
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
    auto red = readout(ops::mha(q, k, v, mask, 2, 3, 2));
    check("attention", [&] { return red(ops::mha(q, k, v, mask, 2, 3, 2)); }, {q, k, v});
  }
  {
    auto x = leaf(random_tensor({6, 4}, rng), true);
    std::vector<std::array<std::uint32_t, 2>> spans = {{0, 3}, {3, 6}};
    std::vector<std::uint8_t> valid = {1, 0, 1, 1, 1, 1};
    auto red = readout(ops::masked_max_pool_spans(x, spans, valid));
    check("max_pool", [&] { return red(ops::masked_max_pool_spans(x, spans, valid)); }, {x});
  }
  {
    auto a = leaf(random_tensor({2, 3}, rng), true);
    auto b = leaf(random_tensor({4, 3}, rng), true);
    auto red = readout(ops::concat_rows<double>({a, b}));
    check("concat_rows", [&] { return red(ops::concat_rows<double>({a, b})); }, {a, b});
  }
  {
    auto a = leaf(random_tensor({3, 2}, rng), true);
    auto b = leaf(random_tensor({3, 4}, rng), true);
    auto red = readout(ops::concat_cols(a, b));
    check("concat_cols", [&] { return red(ops::concat_cols(a, b)); }, {a, b});
  }
  {
    auto x = leaf(random_tensor({4, 3}, rng), true);
    std::vector<std::uint32_t> idx = {2, 0, 2, 3};
    auto red = readout(ops::gather_rows(x, idx));
    check("gather_rows", [&] { return red(ops::gather_rows(x, idx)); }, {x});
  }
  {
    auto s = leaf(random_tensor({4, 1}, rng), true);
    check("smoothed_bce_mean", [&] { return ops::smoothed_bce_mean(s, {1, 0, 0, 1}, 0.1); },
          {s});
  }
  {
    auto za = leaf(random_tensor({3, 5}, rng), true);
    auto zb = leaf(random_tensor({3, 5}, rng), true);
    check("symmetric_infonce", [&] { return ops::symmetric_infonce(za, zb, 0.07); }, {za, zb});
  }
  {
    ModelConfig cfg;
    cfg.feature_dim = 5;
    cfg.hidden = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_views = 2;
    cfg.max_tokens = 4;
    cfg.use_view_positions = true;
    cfg.contrastive_weight = 0.3;
    auto params = init_model<double>(cfg, 7);

    Batch<double> batch;
    batch.size = 2;
    batch.objects = 2;
    batch.views = 2;
    batch.tokens = 3;
    batch.dim = cfg.feature_dim;
    batch.view_feats = random_tensor({2 * 2 * 2, cfg.feature_dim}, rng);
    batch.lang_feats = random_tensor({2 * 3, cfg.feature_dim}, rng);
    batch.view_valid.assign(8, 1);
    batch.view_valid[1] = 0;
    batch.lang_valid.assign(6, 1);
    batch.lang_valid[5] = 0;
    batch.targets = {1, 0};
    batch.kinds = {1, 0};

    check("model_loss", [&] { return total_loss(forward(batch, params), batch, params); },
          params.trainable());
  }
  return out;
}

}  // namespace magic
