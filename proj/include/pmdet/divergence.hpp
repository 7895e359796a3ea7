#pragma once

#include <cstdint>
#include <vector>

#include "pmdet/alignment.hpp"
#include "pmdet/tensor.hpp"

namespace pmdet {

// Empirical H-divergence probe: label source features 0 and target features
// 1 in one unified dataset, train the 3-MLP domain classifier on the first
// 80% of each domain, and read d_h = 2 (1 - eps_S - eps_T) off the held-out
// 20%.

struct UnifiedDataset {
  Tensor features;          // (q, d); rows [0, p) source, [p, q) target
  std::vector<int> labels;  // 0 for source, 1 for target
  std::size_t p = 0;        // source count
  std::size_t q = 0;        // total count

  // Deterministic stratified split: the first 80% of each domain trains the
  // classifier, the rest is held out.
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> heldout_indices() const;
};

struct DivergenceEstimate {
  double eps_source = 0.0;  // held-out error on source rows
  double eps_target = 0.0;  // held-out error on target rows
  double d_h = 0.0;
  double accuracy = 0.0;  // held-out overall accuracy
};

UnifiedDataset build_unified_dataset(const Tensor& source_features,
                                     const Tensor& target_features);

struct ProbeOptions {
  int epochs = 200;
  int hidden = 64;
  double lr = 1e-3;
};

DomainDiscriminator train_domain_classifier(const UnifiedDataset& dataset,
                                            int epochs, std::uint64_t seed,
                                            const ProbeOptions& opt = {});

DivergenceEstimate estimate_divergence(const DomainDiscriminator& classifier,
                                       const UnifiedDataset& dataset);

double divergence_from_errors(double eps_source, double eps_target);

}  // namespace pmdet
