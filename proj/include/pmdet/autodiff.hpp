#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pmdet/tensor.hpp"

namespace pmdet::ad {

// Reverse-mode autodiff on a dynamically built graph. Nodes own their
// parents through shared_ptr, so a whole step graph is released when the
// loss root goes out of scope; parameter nodes persist across steps and
// accumulate gradients until zero_grad.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool is_param = false;
  bool needs_grad = false;
  std::string name;  // parameters only
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

// When grad mode is off (evaluation, teacher inference) ops still compute
// values but record no parents and no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

Var constant(Tensor v);
Var parameter(Tensor v, std::string name);

// Building block for fused ops defined in other modules.
Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn);

// --- primitive ops (2-d unless stated otherwise) ---
Var mm_nn(const Var& a, const Var& b);  // [m,k]x[k,n]
Var mm_nt(const Var& a, const Var& b);  // [m,k]x[n,k]^T
Var add(const Var& a, const Var& b);    // same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_row(const Var& x, const Var& b);  // b broadcast over rows
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-5);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t r0, std::size_t r1);
Var slice_cols(const Var& x, std::size_t c0, std::size_t c1);
Var concat_cols(const std::vector<Var>& parts);
Var mean_all(const Var& x);  // scalar [1]
Var sum_all(const Var& x);
Var mean_rows(const Var& x);  // [1,cols] column means

// Identity forward; multiplies the upstream gradient by -scale on the way
// back. scale >= 0.
Var grad_reverse(const Var& x, double scale);

// x: (C,H,W); w: (Cout, C*kh*kw); b: (Cout). Output (Cout, out_h, out_w).
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t kh,
           std::size_t kw, std::size_t stride, std::size_t pad);

// Numerically stable mean binary cross entropy on logits (n x 1).
Var bce_with_logits(const Var& logits, const Tensor& targets);

void backward(const Var& root);  // root must be a scalar

void zero_grad(const std::vector<Var>& params);
void zero_grad(const std::map<std::string, Var>& params);

}  // namespace pmdet::ad
