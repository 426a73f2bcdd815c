#pragma once

#include <magic/graph.hpp>
#include <magic/kernels.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace magic {

struct LrSchedule {
  double base_lr = 1e-3;
  std::size_t warmup_steps = 10000;

  // Linear ramp hitting base_lr at the end of warmup. Multiplying before the
  // division keeps the pinned points (1e-7 at step 0, 5e-4 at 4999) exact in
  // floating point. warmup_steps == 0 means no warmup.
  double at(std::size_t step) const {
    if (warmup_steps == 0 || step + 1 >= warmup_steps) return base_lr;
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
};

// AdamW with bias-corrected moments and decoupled weight decay, over a fixed
// list of parameter leaves.
template <typename T>
struct AdamW {
  std::vector<NodePtr<T>> params;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);
  std::size_t step_count = 0;
  std::vector<Tensor<T>> m, v;

  explicit AdamW(std::vector<NodePtr<T>> ps) : params(std::move(ps)) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.push_back(Tensor<T>::zeros(p->value.shape));
      v.push_back(Tensor<T>::zeros(p->value.shape));
    }
  }

  void zero_grad() {
    for (auto& p : params) p->grad.fill(T(0));
  }

  void step(T lr) {
    for (const auto& p : params)
      if (!kern::all_finite(p->grad.ptr(), p->grad.numel()))
        throw std::runtime_error("adamw: non-finite gradient");
    ++step_count;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), step_count));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), step_count));
    for (std::size_t i = 0; i < params.size(); ++i)
      kern::adamw_update(params[i]->value.ptr(), params[i]->grad.ptr(), m[i].ptr(), v[i].ptr(),
                         params[i]->value.numel(), lr, beta1, beta2, eps, weight_decay, bc1, bc2);
  }
};

}  // namespace magic
