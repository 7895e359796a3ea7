#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "pmdet/alignment.hpp"
#include "pmdet/common.hpp"
#include "pmdet/optim.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, RngStream& rng,
                     double lo = -1, double hi = 1) {
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

AlignmentConfig small_cfg() {
  AlignmentConfig cfg;
  cfg.shared_dim = 16;
  return cfg;
}

}  // namespace

TEST_CASE("projection heads: shapes, zero map, per-domain isolation") {
  AlignmentConfig cfg;
  cfg.shared_dim = 256;
  ProjectionHead heads = ProjectionHead::init(64, cfg.shared_dim, 3, "proj");
  RngStream rng(5);
  ad::Var x = ad::constant(random_matrix(42, 64, rng));

  ad::Var out = heads.project(x, Domain::source);
  CHECK(out->value.rows() == 42);
  CHECK(out->value.cols() == 256);

  // zero weights and biases -> zero output
  nn::ParamMap params;
  heads.source.collect(params);
  for (auto& [k, v] : params) v->value.fill(0.0);
  ad::Var zero = heads.project(x, Domain::source);
  for (std::size_t i = 0; i < zero->value.size(); ++i)
    CHECK(zero->value[i] == 0.0);

  // changing the target head leaves source projections unchanged
  ad::Var src_before = heads.project(x, Domain::source);
  nn::ParamMap tgt;
  heads.target.collect(tgt);
  for (auto& [k, v] : tgt) v->value.fill(7.0);
  ad::Var src_after = heads.project(x, Domain::source);
  for (std::size_t i = 0; i < src_before->value.size(); ++i)
    CHECK(src_before->value[i] == src_after->value[i]);

  CHECK_THROWS_AS(heads.project(ad::constant(random_matrix(4, 32, rng)),
                                Domain::source),
                  ConfigError);
}

TEST_CASE("discriminator outputs per-token scores in (0,1)") {
  DomainDiscriminator disc = DomainDiscriminator::init(16, 16, 7, "disc");
  CHECK(disc.blocks.size() == 3);
  RngStream rng(9);
  ad::Var x = ad::constant(random_matrix(10, 16, rng));
  ad::Var scores = disc.forward(x);
  CHECK(scores->value.rows() == 10);
  CHECK(scores->value.cols() == 1);
  for (std::size_t i = 0; i < scores->value.size(); ++i) {
    CHECK(scores->value[i] > 0.0);
    CHECK(scores->value[i] < 1.0);
  }
}

TEST_CASE("epa_loss arithmetic: the three worked cases") {
  AlignmentConfig cfg;

  // constant 0.5 everywhere, boundary anywhere, lambda1=lambda2=1 -> 0
  ad::Var half = ad::constant(Tensor::full({10, 1}, 0.5));
  CHECK(epa_loss(half, 4, cfg)->value[0] == doctest::Approx(0.0));

  // prompt scores 0.2, rest 0.8 -> 0.2 - 0.8 = -0.6
  Tensor mixed({10, 1});
  for (int i = 0; i < 10; ++i) mixed[i] = i < 4 ? 0.2 : 0.8;
  ad::Var scores = ad::constant(mixed);
  CHECK(epa_loss(scores, 4, cfg)->value[0] == doctest::Approx(-0.6));

  // lambda1=0.3, lambda2=0.7, means 0.4 / 0.6 -> 0.3*0.4 - 0.7*0.6 = -0.30
  AlignmentConfig weighted;
  weighted.lambda1 = 0.3;
  weighted.lambda2 = 0.7;
  Tensor mixed2({10, 1});
  for (int i = 0; i < 10; ++i) mixed2[i] = i < 4 ? 0.4 : 0.6;
  CHECK(epa_loss(ad::constant(mixed2), 4, weighted)->value[0] ==
        doctest::Approx(-0.30));

  // boundary = full sequence -> only the lambda1 term
  CHECK(epa_loss(scores, 10, cfg)->value[0] ==
        doctest::Approx((0.2 * 4 + 0.8 * 6) / 10.0));

  // boundary 0 with lambda1 > 0: warning, prompt term contributes 0
  WarningLog::instance().clear();
  CHECK(epa_loss(scores, 0, cfg)->value[0] ==
        doctest::Approx(-(0.2 * 4 + 0.8 * 6) / 10.0));
  CHECK(WarningLog::instance().count() == 1);

  CHECK_THROWS_AS(epa_loss(scores, 11, cfg), ConfigError);
}

TEST_CASE("dpa_loss shares the epa_loss implementation exactly") {
  RngStream rng(11);
  Tensor t = random_matrix(12, 1, rng, 0.01, 0.99);
  AlignmentConfig cfg;
  cfg.lambda1 = 0.4;
  cfg.lambda2 = 1.3;
  CHECK(dpa_loss(ad::constant(t), 5, cfg)->value[0] ==
        epa_loss(ad::constant(t), 5, cfg)->value[0]);

  ad::Var projected = ad::constant(random_matrix(12, 8, rng));
  CHECK(dpa_loss(projected, ad::constant(t), 5, cfg)->value[0] ==
        dpa_loss(ad::constant(t), 5, cfg)->value[0]);
  CHECK_THROWS_AS(
      dpa_loss(ad::constant(random_matrix(3, 8, rng)), ad::constant(t), 2, cfg),
      ConfigError);
}

TEST_CASE("epa_loss invariant to permutations within each block") {
  RngStream rng(13);
  Tensor scores({9, 1});
  for (int i = 0; i < 9; ++i) scores[i] = rng.uniform(0.1, 0.9);
  AlignmentConfig cfg;
  const double base = epa_loss(ad::constant(scores), 4, cfg)->value[0];

  Tensor shuffled = scores;
  std::swap(shuffled[0], shuffled[3]);  // within prompt block
  std::swap(shuffled[5], shuffled[8]);  // within the rest
  CHECK(epa_loss(ad::constant(shuffled), 4, cfg)->value[0] ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("alignment gradients through heads, reversal and discriminator") {
  AlignmentConfig cfg = small_cfg();
  AlignmentSite site = AlignmentSite::init(8, cfg, 17, "site");
  RngStream rng(19);
  ad::Var seq = ad::parameter(random_matrix(7, 8, rng), "seq");

  nn::ParamMap disc_params, head_params;
  site.disc.collect(disc_params);
  site.heads.collect(head_params);

  auto forward = [&]() {
    ad::Var scores = prompt_alignment_scores(site, seq, Domain::source, cfg);
    return epa_loss(scores, 3, cfg);
  };

  // Discriminator sits downstream of the reversal: plain gradients.
  std::vector<ad::Var> disc_vars;
  for (auto& [k, v] : disc_params) disc_vars.push_back(v);
  CHECK(testutil::grad_check(forward, disc_vars).max_rel_error < 1e-4);

  // Heads and the sequence sit upstream: gradients arrive sign-flipped.
  std::vector<ad::Var> up_vars{seq};
  for (auto& [k, v] : head_params)
    if (k.find("/src/") != std::string::npos) up_vars.push_back(v);
  std::vector<double> signs(up_vars.size(), -1.0);
  CHECK(testutil::grad_check(forward, up_vars, 1e-5, signs).max_rel_error <
        1e-4);
}

TEST_CASE("adversarial epa step makes domains harder to separate") {
  // Synthetic separable setup: source prompt embeddings clustered at +mu,
  // target at -mu. After 50 optimization steps on epa_loss (through the
  // per-domain heads with gradient reversal), a probe frozen on the initial
  // projections should separate the two domains no better than before.
  int improved = 0;
  double acc_before_sum = 0.0, acc_after_sum = 0.0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    RngStream rng(seed);
    const std::size_t n = 24, d = 8;
    Tensor src({n, d}), tgt({n, d});
    for (std::size_t i = 0; i < src.size(); ++i) {
      src[i] = 1.0 + 0.1 * rng.uniform(-1, 1);
      tgt[i] = -1.0 + 0.1 * rng.uniform(-1, 1);
    }

    AlignmentConfig cfg = small_cfg();
    AlignmentSite site = AlignmentSite::init(d, cfg, seed * 101, "probe_site");
    nn::ParamMap params;
    site.collect(params);
    optim::Adam adam;

    auto project_all = [&](Domain domain, const Tensor& feats) {
      ad::NoGradGuard guard;
      return site.heads.project(ad::constant(feats), domain)->value;
    };

    // Frozen probe: nearest-centroid on the initial projections.
    const Tensor p_src0 = project_all(Domain::source, src);
    const Tensor p_tgt0 = project_all(Domain::target, tgt);
    const std::size_t c = cfg.shared_dim;
    std::vector<double> centroid_src(c, 0.0), centroid_tgt(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        centroid_src[j] += p_src0.at2(i, j) / n;
        centroid_tgt[j] += p_tgt0.at2(i, j) / n;
      }
    auto probe_accuracy = [&](const Tensor& ps, const Tensor& pt) {
      std::size_t correct = 0;
      auto classify = [&](const Tensor& m, std::size_t row) {
        double ds = 0, dt = 0;
        for (std::size_t j = 0; j < c; ++j) {
          ds += (m.at2(row, j) - centroid_src[j]) * (m.at2(row, j) - centroid_src[j]);
          dt += (m.at2(row, j) - centroid_tgt[j]) * (m.at2(row, j) - centroid_tgt[j]);
        }
        return ds <= dt ? 0 : 1;
      };
      for (std::size_t i = 0; i < n; ++i) {
        if (classify(ps, i) == 0) ++correct;
        if (classify(pt, i) == 1) ++correct;
      }
      return static_cast<double>(correct) / (2.0 * n);
    };

    const double acc_before = probe_accuracy(p_src0, p_tgt0);
    for (int step = 0; step < 50; ++step) {
      ad::zero_grad(params);
      ad::Var s_scores = prompt_alignment_scores(site, ad::constant(src),
                                                 Domain::source, cfg);
      ad::Var t_scores = prompt_alignment_scores(site, ad::constant(tgt),
                                                 Domain::target, cfg);
      // whole sequence is prompt positions here (boundary = rows)
      ad::Var loss = ad::add(epa_loss(s_scores, n, cfg),
                             epa_loss(t_scores, n, cfg));
      ad::backward(loss);
      adam.step({{params, 1e-3}});
    }
    const double acc_after =
        probe_accuracy(project_all(Domain::source, src),
                       project_all(Domain::target, tgt));
    acc_before_sum += acc_before;
    acc_after_sum += acc_after;
    if (acc_after > acc_before) ++improved;
  }
  CHECK(acc_after_sum / 3.0 <= acc_before_sum / 3.0 + 1e-9);
  CHECK(improved <= 1);
}
