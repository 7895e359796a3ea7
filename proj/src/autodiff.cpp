#include "pmdet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "pmdet/common.hpp"
#include "pmdet/kernels.hpp"

namespace pmdet::ad {

namespace {

thread_local int g_no_grad_depth = 0;

void check_2d_mm(const Var& a, const Var& b, std::size_t ak, std::size_t bk,
                 const char* op) {
  if (ak != bk)
    throw ConfigError(std::string(op) + ": inner dimensions disagree " +
                      a->value.shape_str() + " vs " + b->value.shape_str());
}

bool any_needs_grad(const std::vector<Var>& parents) {
  for (const auto& p : parents)
    if (p->needs_grad) return true;
  return false;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var parameter(Tensor v, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->is_param = true;
  n->needs_grad = true;
  n->name = std::move(name);
  return n;
}

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled() && any_needs_grad(parents)) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

Var mm_nn(const Var& a, const Var& b) {
  const std::size_t m = a->value.rows(), k = a->value.cols();
  const std::size_t n = b->value.cols();
  check_2d_mm(a, b, k, b->value.rows(), "mm_nn");
  Tensor out({m, n});
  kernels::mm_nn(a->value.data(), b->value.data(), out.data(), m, k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& g = self.grad;
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.needs_grad)
      kernels::mm_nt(g.data(), B.value.data(), A.ensure_grad().data(), m, n, k,
                     true);
    if (B.needs_grad)
      kernels::mm_tn(A.value.data(), g.data(), B.ensure_grad().data(), k, m, n,
                     true);
  });
}

Var mm_nt(const Var& a, const Var& b) {
  const std::size_t m = a->value.rows(), k = a->value.cols();
  const std::size_t n = b->value.rows();
  check_2d_mm(a, b, k, b->value.cols(), "mm_nt");
  Tensor out({m, n});
  kernels::mm_nt(a->value.data(), b->value.data(), out.data(), m, k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& g = self.grad;
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.needs_grad)
      kernels::mm_nn(g.data(), B.value.data(), A.ensure_grad().data(), m, n, k,
                     true);
    if (B.needs_grad)
      kernels::mm_tn(g.data(), A.value.data(), B.ensure_grad().data(), n, m, k,
                     true);
  });
}

Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw ConfigError("add: shape mismatch " + a->value.shape_str() + " vs " +
                      b->value.shape_str());
  Tensor out = a->value;
  kernels::axpy(1.0, b->value.data(), out.data(), out.size());
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      Node& p = *self.parents[i];
      if (p.needs_grad)
        kernels::axpy(1.0, self.grad.data(), p.ensure_grad().data(),
                      self.grad.size());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw ConfigError("sub: shape mismatch");
  Tensor out = a->value;
  kernels::axpy(-1.0, b->value.data(), out.data(), out.size());
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.needs_grad)
      kernels::axpy(1.0, self.grad.data(), A.ensure_grad().data(),
                    self.grad.size());
    if (B.needs_grad)
      kernels::axpy(-1.0, self.grad.data(), B.ensure_grad().data(),
                    self.grad.size());
  });
}

Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw ConfigError("mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.needs_grad) {
      Tensor& ga = A.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += self.grad[i] * B.value[i];
    }
    if (B.needs_grad) {
      Tensor& gb = B.ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += self.grad[i] * A.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    Node& A = *self.parents[0];
    if (A.needs_grad)
      kernels::axpy(s, self.grad.data(), A.ensure_grad().data(),
                    self.grad.size());
  });
}

Var add_row(const Var& x, const Var& b) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (b->value.size() != cols)
    throw ConfigError("add_row: bias length mismatch");
  Tensor out = x->value;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b->value[c];
  return make_node(std::move(out), {x, b}, [rows, cols](Node& self) {
    Node& X = *self.parents[0];
    Node& B = *self.parents[1];
    if (X.needs_grad)
      kernels::axpy(1.0, self.grad.data(), X.ensure_grad().data(),
                    self.grad.size());
    if (B.needs_grad) {
      Tensor& gb = B.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          gb[c] += self.grad[r * cols + c];
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x->value.shape());
  kernels::relu(x->value.data(), out.data(), out.size());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (X.value[i] > 0.0) gx[i] += self.grad[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-x->value[i]));
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double y = self.value[i];
      gx[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var softmax_rows(const Var& x) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor out(x->value.shape());
  kernels::softmax_rows(x->value.data(), out.data(), rows, cols);
  return make_node(std::move(out), {x}, [rows, cols](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* gxr = gx.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gxr[c] += y[c] * (g[c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (gamma->value.size() != cols || beta->value.size() != cols)
    throw ConfigError("layer_norm: parameter length mismatch");
  Tensor out(x->value.shape());
  Tensor mean({rows}), rstd({rows});
  kernels::layer_norm(x->value.data(), gamma->value.data(),
                      beta->value.data(), out.data(), mean.data(),
                      rstd.data(), rows, cols, eps);
  return make_node(
      std::move(out), {x, gamma, beta},
      [rows, cols, mean, rstd](Node& self) {
        Node& X = *self.parents[0];
        Node& G = *self.parents[1];
        Node& B = *self.parents[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = X.value.data() + r * cols;
          const double* gy = self.grad.data() + r * cols;
          const double mu = mean[r], rs = rstd[r];
          if (B.needs_grad) {
            Tensor& gb = B.ensure_grad();
            for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[c];
          }
          if (G.needs_grad) {
            Tensor& gg = G.ensure_grad();
            for (std::size_t c = 0; c < cols; ++c)
              gg[c] += gy[c] * (xr[c] - mu) * rs;
          }
          if (X.needs_grad) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double h = gy[c] * G.value[c];
              const double xhat = (xr[c] - mu) * rs;
              m1 += h;
              m2 += h * xhat;
            }
            m1 /= static_cast<double>(cols);
            m2 /= static_cast<double>(cols);
            Tensor& gx = X.ensure_grad();
            double* gxr = gx.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) {
              const double h = gy[c] * G.value[c];
              const double xhat = (xr[c] - mu) * rs;
              gxr[c] += rs * (h - m1 - xhat * m2);
            }
          }
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: empty part list");
  const std::size_t cols = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols)
      throw ConfigError("concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Tensor out({rows, cols});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.size(),
              out.data() + r * cols);
    r += p->value.rows();
  }
  return make_node(std::move(out), parts, [cols](Node& self) {
    std::size_t r = 0;
    for (auto& pv : self.parents) {
      Node& p = *pv;
      const std::size_t n = p.value.size();
      if (p.needs_grad)
        kernels::axpy(1.0, self.grad.data() + r * cols,
                      p.ensure_grad().data(), n);
      r += p.value.rows();
    }
  });
}

Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  const std::size_t cols = x->value.cols();
  if (r1 > x->value.rows() || r0 > r1)
    throw ConfigError("slice_rows: range out of bounds");
  Tensor out({r1 - r0, cols});
  std::copy(x->value.data() + r0 * cols, x->value.data() + r1 * cols,
            out.data());
  return make_node(std::move(out), {x}, [r0, cols](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    kernels::axpy(1.0, self.grad.data(),
                  X.ensure_grad().data() + r0 * cols, self.grad.size());
  });
}

Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (c1 > cols || c0 > c1) throw ConfigError("slice_cols: range");
  Tensor out({rows, c1 - c0});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(x->value.data() + r * cols + c0, x->value.data() + r * cols + c1,
              out.data() + r * (c1 - c0));
  return make_node(std::move(out), {x}, [rows, cols, c0, c1](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    const std::size_t width = c1 - c0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c)
        gx[r * cols + c0 + c] += self.grad[r * width + c];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: empty part list");
  const std::size_t rows = parts[0]->value.rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows) throw ConfigError("concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Tensor out({rows, cols});
  std::size_t c = 0;
  for (const auto& p : parts) {
    const std::size_t w = p->value.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(p->value.data() + r * w, p->value.data() + (r + 1) * w,
                out.data() + r * cols + c);
    c += w;
  }
  return make_node(std::move(out), parts, [rows, cols](Node& self) {
    std::size_t c = 0;
    for (auto& pv : self.parents) {
      Node& p = *pv;
      const std::size_t w = p.value.cols();
      if (p.needs_grad) {
        Tensor& gp = p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j)
            gp[r * w + j] += self.grad[r * cols + c + j];
      }
      c += w;
    }
  });
}

Var mean_all(const Var& x) {
  const std::size_t n = x->value.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x->value[i];
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  return make_node(std::move(out), {x}, [n](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    const double g = self.grad[0] / static_cast<double>(n);
    Tensor& gx = X.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.size(); ++i) s += x->value[i];
  Tensor out = Tensor::scalar(s);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean_rows(const Var& x) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor out({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[c] += x->value[r * cols + c] / static_cast<double>(rows);
  return make_node(std::move(out), {x}, [rows, cols](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += self.grad[c] / static_cast<double>(rows);
  });
}

Var grad_reverse(const Var& x, double scale) {
  if (scale < 0.0) throw ConfigError("grad_reverse: negative scale");
  Tensor out = x->value;
  return make_node(std::move(out), {x}, [scale](Node& self) {
    Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    kernels::axpy(-scale, self.grad.data(), X.ensure_grad().data(),
                  self.grad.size());
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t kh,
           std::size_t kw, std::size_t stride, std::size_t pad) {
  const std::size_t channels = x->value.dim(0);
  const std::size_t h = x->value.dim(1), wdt = x->value.dim(2);
  const std::size_t cout = w->value.rows();
  const std::size_t patch = channels * kh * kw;
  if (w->value.cols() != patch)
    throw ConfigError("conv2d: weight shape does not match patch size");
  const std::size_t out_h = (h + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (wdt + 2 * pad - kw) / stride + 1;
  const std::size_t out_n = out_h * out_w;

  Tensor cols({patch, out_n});
  kernels::im2col(x->value.data(), cols.data(), channels, h, wdt, kh, kw,
                  stride, pad);
  Tensor out({cout, out_h, out_w});
  kernels::mm_nn(w->value.data(), cols.data(), out.data(), cout, patch, out_n);
  for (std::size_t c = 0; c < cout; ++c) {
    double* oc = out.data() + c * out_n;
    const double bias = b->value[c];
    for (std::size_t i = 0; i < out_n; ++i) oc[i] += bias;
  }
  return make_node(
      std::move(out), {x, w, b},
      [cols, channels, h, wdt, kh, kw, stride, pad, cout, patch,
       out_n](Node& self) {
        Node& X = *self.parents[0];
        Node& W = *self.parents[1];
        Node& B = *self.parents[2];
        const double* g = self.grad.data();
        if (B.needs_grad) {
          Tensor& gb = B.ensure_grad();
          for (std::size_t c = 0; c < cout; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < out_n; ++i) s += g[c * out_n + i];
            gb[c] += s;
          }
        }
        if (W.needs_grad)
          kernels::mm_nt(g, cols.data(), W.ensure_grad().data(), cout, out_n,
                         patch, true);
        if (X.needs_grad) {
          Tensor dcols({patch, out_n});
          kernels::mm_tn(W.value.data(), g, dcols.data(), patch, cout, out_n);
          Tensor dx({channels, h, wdt});
          kernels::col2im(dcols.data(), dx.data(), channels, h, wdt, kh, kw,
                          stride, pad);
          kernels::axpy(1.0, dx.data(), X.ensure_grad().data(), dx.size());
        }
      });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  const std::size_t n = logits->value.size();
  if (targets.size() != n)
    throw ConfigError("bce_with_logits: target length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits->value[i];
    const double y = targets[i];
    loss += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::fabs(z)));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));
  return make_node(std::move(out), {logits}, [targets, n](Node& self) {
    Node& Z = *self.parents[0];
    if (!Z.needs_grad) return;
    Tensor& gz = Z.ensure_grad();
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-Z.value[i]));
      gz[i] += g * (s - targets[i]);
    }
  });
}

void backward(const Var& root) {
  if (root->value.size() != 1)
    throw StateError("backward: root must be scalar");
  // Post-order over the needs-grad subgraph; reversed it yields an order
  // where every node is processed before any of its parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size())
      n->backward_fn(*n);
  }
}

void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params)
    if (p->grad.size()) p->grad.fill(0.0);
}

void zero_grad(const std::map<std::string, Var>& params) {
  for (const auto& [name, p] : params)
    if (p->grad.size()) p->grad.fill(0.0);
}

}  // namespace pmdet::ad
