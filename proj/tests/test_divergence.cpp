#include <doctest.h>

#include <cmath>

#include "pmdet/common.hpp"
#include "pmdet/divergence.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;

namespace {

Tensor gaussian_features(std::size_t n, std::size_t d, double mean,
                         RngStream& rng) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = mean + rng.normal();
  return t;
}

}  // namespace

TEST_CASE("build_unified_dataset: layout, labels, copy semantics") {
  RngStream rng(1);
  Tensor src = gaussian_features(10, 4, 0.0, rng);
  Tensor tgt = gaussian_features(15, 4, 0.0, rng);
  UnifiedDataset u = build_unified_dataset(src, tgt);
  CHECK(u.p == 10);
  CHECK(u.q == 25);
  for (std::size_t i = 0; i < 10; ++i) CHECK(u.labels[i] == 0);
  for (std::size_t i = 10; i < 25; ++i) CHECK(u.labels[i] == 1);

  // mutation after build does not alter the dataset
  const double kept = u.features[0];
  src[0] = 1e9;
  CHECK(u.features[0] == kept);

  CHECK_THROWS_AS(build_unified_dataset(Tensor({0, 4}), tgt), DataError);
  CHECK_THROWS_AS(build_unified_dataset(src, gaussian_features(5, 3, 0, rng)),
                  DataError);
}

TEST_CASE("stratified 80/20 split is deterministic and disjoint") {
  RngStream rng(3);
  UnifiedDataset u = build_unified_dataset(gaussian_features(10, 2, 0, rng),
                                           gaussian_features(20, 2, 0, rng));
  const auto train = u.train_indices();
  const auto held = u.heldout_indices();
  CHECK(train.size() + held.size() == u.q);
  CHECK(held.size() == 2 + 4);  // 20% of each side
  for (std::size_t i : held)
    CHECK(std::find(train.begin(), train.end(), i) == train.end());
}

TEST_CASE("divergence formula is exact arithmetic") {
  CHECK(divergence_from_errors(0.1, 0.15) == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(divergence_from_errors(0.0, 0.0) == doctest::Approx(2.0));
  CHECK(divergence_from_errors(0.5, 0.5) == doctest::Approx(0.0));
  CHECK(divergence_from_errors(1.0, 1.0) == doctest::Approx(-2.0));
}

TEST_CASE("linearly separable 2-d features: near-perfect accuracy") {
  RngStream rng(5);
  Tensor src({100, 2}), tgt({100, 2});
  for (std::size_t i = 0; i < 100; ++i) {
    src.at2(i, 0) = 2.0 + 0.3 * rng.normal();
    src.at2(i, 1) = 2.0 + 0.3 * rng.normal();
    tgt.at2(i, 0) = -2.0 + 0.3 * rng.normal();
    tgt.at2(i, 1) = -2.0 + 0.3 * rng.normal();
  }
  UnifiedDataset u = build_unified_dataset(src, tgt);
  DomainDiscriminator clf = train_domain_classifier(u, 200, 7);

  // training accuracy on the train split
  ad::NoGradGuard guard;
  const auto train = u.train_indices();
  std::size_t correct = 0;
  for (std::size_t i : train) {
    Tensor row({1, 2});
    row[0] = u.features.at2(i, 0);
    row[1] = u.features.at2(i, 1);
    const double score = clf.forward(ad::constant(row))->value[0];
    if ((score > 0.5 ? 1 : 0) == u.labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / train.size() > 0.99);

  const DivergenceEstimate est = estimate_divergence(clf, u);
  CHECK(est.d_h > 1.8);
  CHECK(est.d_h ==
        doctest::Approx(divergence_from_errors(est.eps_source, est.eps_target))
            .epsilon(1e-9));
}

TEST_CASE("identical distributions: held-out accuracy near chance") {
  double acc_sum = 0.0, dh_sum = 0.0;
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    RngStream rng(seed);
    Tensor src = gaussian_features(250, 4, 0.0, rng);
    Tensor tgt = gaussian_features(250, 4, 0.0, rng);
    UnifiedDataset u = build_unified_dataset(src, tgt);
    DomainDiscriminator clf = train_domain_classifier(u, 150, seed);
    const DivergenceEstimate est = estimate_divergence(clf, u);
    acc_sum += est.accuracy;
    dh_sum += est.d_h;
  }
  CHECK(acc_sum / 3.0 > 0.35);
  CHECK(acc_sum / 3.0 < 0.65);
  CHECK(std::fabs(dh_sum / 3.0) < 0.25);
}

TEST_CASE("same seed twice gives identical classifiers") {
  RngStream rng(17);
  UnifiedDataset u = build_unified_dataset(gaussian_features(40, 3, 0.5, rng),
                                           gaussian_features(40, 3, -0.5, rng));
  DomainDiscriminator a = train_domain_classifier(u, 50, 23);
  DomainDiscriminator b = train_domain_classifier(u, 50, 23);
  nn::ParamMap pa, pb;
  a.collect(pa);
  b.collect(pb);
  for (const auto& [k, va] : pa) {
    const auto& vb = pb.at(k);
    for (std::size_t i = 0; i < va->value.size(); ++i)
      CHECK(va->value[i] == vb->value[i]);
  }
}
