#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pmdet/autodiff.hpp"
#include "pmdet/nn.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;
using testutil::grad_check;

namespace {

ad::Var random_param(std::vector<std::size_t> shape, std::uint64_t seed,
                     const std::string& name) {
  Tensor t(std::move(shape));
  RngStream rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return ad::parameter(std::move(t), name);
}

}  // namespace

TEST_CASE("gradients of matmul / add / mul / softmax / layer_norm chains") {
  ad::Var a = random_param({4, 5}, 1, "a");
  ad::Var b = random_param({5, 3}, 2, "b");
  ad::Var c = random_param({4, 3}, 3, "c");
  ad::Var gamma = random_param({3}, 4, "gamma");
  ad::Var beta = random_param({3}, 5, "beta");

  auto forward = [&]() {
    ad::Var y = ad::mm_nn(a, b);             // 4x3
    y = ad::add(y, c);
    y = ad::softmax_rows(y);
    y = ad::layer_norm(y, gamma, beta);
    y = ad::mul(y, y);
    return ad::mean_all(y);
  };
  auto res = grad_check(forward, {a, b, c, gamma, beta});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradients of mm_nt, slices, concats, relu, sigmoid") {
  ad::Var x = random_param({6, 8}, 7, "x");
  ad::Var w = random_param({4, 8}, 8, "w");
  ad::Var bias = random_param({4}, 9, "bias");

  auto forward = [&]() {
    ad::Var y = ad::add_row(ad::mm_nt(x, w), bias);  // 6x4
    ad::Var top = ad::slice_rows(y, 0, 3);
    ad::Var bottom = ad::relu(ad::slice_rows(y, 3, 6));
    ad::Var joined = ad::concat_rows({top, bottom});
    ad::Var left = ad::slice_cols(joined, 0, 2);
    ad::Var right = ad::sigmoid(ad::slice_cols(joined, 2, 4));
    return ad::mean_all(ad::concat_cols({left, right}));
  };
  auto res = grad_check(forward, {x, w, bias});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("conv2d gradients match finite differences") {
  ad::Var x = random_param({2, 6, 6}, 11, "x");
  ad::Var w = random_param({3, 2 * 9}, 12, "w");
  ad::Var b = random_param({3}, 13, "b");
  auto forward = [&]() {
    return ad::mean_all(ad::relu(ad::conv2d(x, w, b, 3, 3, 2, 1)));
  };
  auto res = grad_check(forward, {x, w, b});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("bce_with_logits gradient and value") {
  ad::Var z = random_param({5, 1}, 17, "z");
  Tensor targets({5});
  targets[0] = 1;
  targets[2] = 1;
  auto forward = [&]() { return ad::bce_with_logits(z, targets); };

  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z->value[i]));
    expect += -(targets[i] * std::log(s) + (1 - targets[i]) * std::log(1 - s));
  }
  CHECK(forward()->value[0] == doctest::Approx(expect / 5).epsilon(1e-9));
  CHECK(grad_check(forward, {z}).max_rel_error < 1e-4);
}

TEST_CASE("grad_reverse: identity forward, negated scaled backward") {
  ad::Var x = random_param({3, 3}, 19, "x");

  ad::Var y = ad::grad_reverse(x, 1.0);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    CHECK(y->value[i] == x->value[i]);  // bit-exact forward

  // f(x) = mean(square(reverse(x))): analytic gradient should equal the
  // negative of the finite difference of the forward scalar.
  auto forward = [&]() {
    ad::Var r = ad::grad_reverse(x, 1.0);
    return ad::mean_all(ad::mul(r, r));
  };
  auto res = grad_check(forward, {x}, 1e-5, {-1.0});
  CHECK(res.max_rel_error < 1e-4);

  // scale = 0 kills the upstream gradient entirely.
  ad::zero_grad({x});
  ad::Var loss = ad::mean_all(ad::mul(ad::grad_reverse(x, 0.0),
                                      ad::grad_reverse(x, 0.0)));
  ad::backward(loss);
  for (std::size_t i = 0; i < x->grad.size(); ++i) CHECK(x->grad[i] == 0.0);
}

TEST_CASE("grad_reverse composed with x^2 at x=3 gives upstream -6") {
  ad::Var x = ad::parameter(Tensor::scalar(3.0), "x");
  ad::Var y = ad::grad_reverse(x, 1.0);
  ad::Var loss = ad::mul(y, y);
  ad::backward(loss);
  CHECK(x->grad[0] == doctest::Approx(-6.0).epsilon(1e-12));
}

TEST_CASE("gradient accumulates across shared subexpressions") {
  ad::Var x = ad::parameter(Tensor::scalar(2.0), "x");
  ad::Var y = ad::add(x, x);  // dy/dx = 2
  ad::backward(y);
  CHECK(x->grad[0] == doctest::Approx(2.0));
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  ad::Var x = random_param({2, 2}, 23, "x");
  ad::NoGradGuard guard;
  ad::Var y = ad::mul(x, x);
  CHECK(y->parents.empty());
  CHECK_FALSE(y->needs_grad);
}

TEST_CASE("multi-head attention block gradchecks end to end") {
  nn::MultiHeadAttention attn = nn::MultiHeadAttention::init(8, 2, 31, "attn");
  ad::Var x = random_param({5, 8}, 37, "x");
  nn::ParamMap params;
  attn.collect(params);
  std::vector<ad::Var> all{x};
  for (auto& [k, v] : params) all.push_back(v);

  auto forward = [&]() {
    return ad::mean_all(ad::mul(attn.forward(x, x, x), attn.forward(x, x, x)));
  };
  auto res = grad_check(forward, all, 1e-5);
  CHECK(res.max_rel_error < 1e-4);
}
