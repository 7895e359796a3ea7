#include "pmdet/optim.hpp"

#include <cmath>

#include "pmdet/common.hpp"

namespace pmdet::optim {

void Adam::step(const std::vector<Group>& groups) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& group : groups) {
    for (const auto& [name, p] : group.params) {
      if (p->grad.size() != p->value.size()) continue;  // no gradient seen
      Tensor& m = slots_.try_emplace("m/" + name, Tensor::zeros(p->value.shape()))
                      .first->second;
      Tensor& v = slots_.try_emplace("v/" + name, Tensor::zeros(p->value.shape()))
                      .first->second;
      if (m.size() != p->value.size())
        throw StateError("adam: slot shape mismatch for " + name);
      double* mv = m.data();
      double* vv = v.data();
      double* w = p->value.data();
      const double* g = p->grad.data();
      const std::size_t n = p->value.size();
      for (std::size_t i = 0; i < n; ++i) {
        mv[i] = beta1_ * mv[i] + (1.0 - beta1_) * g[i];
        vv[i] = beta2_ * vv[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = mv[i] / bc1;
        const double vhat = vv[i] / bc2;
        w[i] -= group.lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }
}

}  // namespace pmdet::optim
