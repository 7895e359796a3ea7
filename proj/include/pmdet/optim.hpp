#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmdet/autodiff.hpp"

namespace pmdet::optim {

// Adaptive moment estimation with named per-parameter state so optimizer
// slots serialize into checkpoints and reruns are bit-reproducible.
class Adam {
 public:
  struct Group {
    std::map<std::string, ad::Var> params;
    double lr = 1e-3;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Group>& groups);

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }

  // State access for checkpointing: "m/<param name>" and "v/<param name>".
  std::map<std::string, Tensor>& slots() { return slots_; }
  const std::map<std::string, Tensor>& slots() const { return slots_; }

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> slots_;
};

}  // namespace pmdet::optim
