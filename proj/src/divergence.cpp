#include "pmdet/divergence.hpp"

#include <algorithm>

#include "pmdet/common.hpp"
#include "pmdet/optim.hpp"

namespace pmdet {

std::vector<std::size_t> UnifiedDataset::train_indices() const {
  std::vector<std::size_t> idx;
  const std::size_t src_train = p - p / 5;
  const std::size_t tgt = q - p;
  const std::size_t tgt_train = tgt - tgt / 5;
  for (std::size_t i = 0; i < src_train; ++i) idx.push_back(i);
  for (std::size_t i = 0; i < tgt_train; ++i) idx.push_back(p + i);
  return idx;
}

std::vector<std::size_t> UnifiedDataset::heldout_indices() const {
  std::vector<std::size_t> idx;
  const std::size_t src_train = p - p / 5;
  const std::size_t tgt = q - p;
  const std::size_t tgt_train = tgt - tgt / 5;
  for (std::size_t i = src_train; i < p; ++i) idx.push_back(i);
  for (std::size_t i = tgt_train; i < tgt; ++i) idx.push_back(p + i);
  return idx;
}

UnifiedDataset build_unified_dataset(const Tensor& source_features,
                                     const Tensor& target_features) {
  if (source_features.size() == 0 || target_features.size() == 0)
    throw DataError("build_unified_dataset: a domain side is empty");
  if (source_features.cols() != target_features.cols())
    throw DataError("build_unified_dataset: feature dimensions disagree");

  UnifiedDataset u;
  u.p = source_features.rows();
  u.q = u.p + target_features.rows();
  const std::size_t d = source_features.cols();
  u.features = Tensor({u.q, d});
  std::copy(source_features.data(),
            source_features.data() + source_features.size(),
            u.features.data());
  std::copy(target_features.data(),
            target_features.data() + target_features.size(),
            u.features.data() + source_features.size());
  u.labels.assign(u.q, 1);
  for (std::size_t i = 0; i < u.p; ++i) u.labels[i] = 0;
  return u;
}

namespace {

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& idx) {
  const std::size_t d = m.cols();
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(m.data() + idx[i] * d, m.data() + (idx[i] + 1) * d,
              out.data() + i * d);
  return out;
}

}  // namespace

DomainDiscriminator train_domain_classifier(const UnifiedDataset& dataset,
                                            int epochs, std::uint64_t seed,
                                            const ProbeOptions& opt) {
  if (dataset.q == 0 || dataset.p == 0 || dataset.p >= dataset.q)
    throw DataError("train_domain_classifier: invalid dataset");

  const std::size_t d = dataset.features.cols();
  DomainDiscriminator clf = DomainDiscriminator::init(
      d, opt.hidden, seed, "probe/seed" + std::to_string(seed));

  const auto train_idx = dataset.train_indices();
  Tensor x = gather_rows(dataset.features, train_idx);
  Tensor y({train_idx.size()});
  for (std::size_t i = 0; i < train_idx.size(); ++i)
    y[i] = static_cast<double>(dataset.labels[train_idx[i]]);

  nn::ParamMap params;
  clf.collect(params);
  optim::Adam adam;
  const ad::Var xin = ad::constant(x);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    ad::zero_grad(params);
    ad::Var logits = clf.forward_logits(xin);
    ad::Var loss = ad::bce_with_logits(logits, y);
    ad::backward(loss);
    adam.step({{params, opt.lr}});
  }
  return clf;
}

DivergenceEstimate estimate_divergence(const DomainDiscriminator& classifier,
                                       const UnifiedDataset& dataset) {
  const auto held = dataset.heldout_indices();
  DivergenceEstimate est;
  std::size_t src_n = 0, tgt_n = 0, src_wrong = 0, tgt_wrong = 0;

  ad::NoGradGuard no_grad;
  Tensor x = gather_rows(dataset.features, held);
  ad::Var scores = classifier.forward(ad::constant(x));
  for (std::size_t i = 0; i < held.size(); ++i) {
    const int truth = dataset.labels[held[i]];
    const int pred = scores->value[i] > 0.5 ? 1 : 0;
    if (truth == 0) {
      ++src_n;
      if (pred != truth) ++src_wrong;
    } else {
      ++tgt_n;
      if (pred != truth) ++tgt_wrong;
    }
  }
  est.eps_source =
      src_n ? static_cast<double>(src_wrong) / static_cast<double>(src_n) : 0.0;
  est.eps_target =
      tgt_n ? static_cast<double>(tgt_wrong) / static_cast<double>(tgt_n) : 0.0;
  est.d_h = divergence_from_errors(est.eps_source, est.eps_target);
  const std::size_t total = src_n + tgt_n;
  est.accuracy = total ? 1.0 - static_cast<double>(src_wrong + tgt_wrong) /
                                   static_cast<double>(total)
                       : 0.0;
  return est;
}

double divergence_from_errors(double eps_source, double eps_target) {
  return 2.0 * (1.0 - eps_source - eps_target);
}

}  // namespace pmdet
