// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "xda/model.hpp"

namespace xda {

// SGD with classic momentum and decoupled-from-nothing L2 weight decay:
//   g = grad + wd * w;  v = mu * v + g;  w -= lr * v
// One step with zero momentum shrinks an unused weight by exactly
// (1 - lr * wd).
template <typename T>
class SgdT {
 public:
  SgdT(T lr, T momentum, T weight_decay) : lr_(lr), mu_(momentum), wd_(weight_decay) {}

  T lr() const { return lr_; }

  void step(ModelT<T>& m) {
    size_t i = 0;
    visit_trainable(m, [&](const std::string& name, TensorT<T>& t) {
      if (!t.has_grad()) throw ContractError("step() before backward for " + name);
      if (vel_.size() <= i) vel_.emplace_back(t.numel(), T(0));
      auto& v = vel_[i];
      if (v.size() != t.numel()) throw ContractError("optimizer state does not match model");
      const auto& g = t.grad();
      std::vector<T> w = t.values();
      for (size_t j = 0; j < w.size(); ++j) {
        const T gj = g[j] + wd_ * w[j];
        v[j] = mu_ * v[j] + gj;
        w[j] -= lr_ * v[j];
      }
      t = t.with_data(std::move(w));
      t.clear_grad();
      ++i;
    });
  }

 private:
  T lr_, mu_, wd_;
  std::vector<std::vector<T>> vel_;
};

using Sgd = SgdT<float>;

}  // namespace xda
