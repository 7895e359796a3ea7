#pragma once

#include <cstdint>
#include <string>

#include "pmdet/nn.hpp"
#include "pmdet/prompt_memory.hpp"

namespace pmdet {

// Prompt memory alignment: per-domain projection heads into a shared
// embedding space, a domain discriminator per site, and the signed-mean
// prompt alignment losses driven through gradient reversal.

struct AlignmentConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double reversal_scale = 1.0;
  std::size_t shared_dim = 256;  // channel dimension of the shared space
};

// Three MLP blocks in series ending in a scalar per-token score in (0, 1).
struct DomainDiscriminator {
  std::vector<nn::Linear> blocks;
  nn::Linear out;

  static DomainDiscriminator init(std::size_t in_dim, std::size_t hidden,
                                  std::uint64_t seed, const std::string& name);
  // x: (T, in_dim) -> scores (T, 1), each in (0, 1)
  ad::Var forward(const ad::Var& x) const;
  ad::Var forward_logits(const ad::Var& x) const;
  void collect(nn::ParamMap& out_params) const;
};

// Respective (per-domain) MLPs projecting token embeddings into the shared
// space.
struct ProjectionHead {
  nn::Mlp source, target;

  static ProjectionHead init(std::size_t in_dim, std::size_t shared_dim,
                             std::uint64_t seed, const std::string& name);
  ad::Var project(const ad::Var& embeddings, Domain domain) const;
  void collect(nn::ParamMap& out_params) const;
};

// One alignment site (encoder sequence or decoder query sequence).
struct AlignmentSite {
  ProjectionHead heads;
  DomainDiscriminator disc;

  static AlignmentSite init(std::size_t in_dim, const AlignmentConfig& cfg,
                            std::uint64_t seed, const std::string& name);
  void collect(nn::ParamMap& out_params) const;
};

struct MemoryAlignment {
  AlignmentConfig cfg;
  AlignmentSite encoder_site;
  AlignmentSite decoder_site;

  static MemoryAlignment init(std::size_t in_dim, const AlignmentConfig& cfg,
                              std::uint64_t seed);
  void collect(nn::ParamMap& out_params) const;
};

// lambda1 * mean(scores[0:boundary]) - lambda2 * mean(scores[boundary:]).
// The min/max directions of the adversarial game come from gradient reversal
// applied on the discriminator input path (see prompt_alignment_scores).
ad::Var epa_loss(const ad::Var& scores, std::size_t boundary,
                 const AlignmentConfig& cfg);
ad::Var epa_loss(const ad::Var& projected, const ad::Var& scores,
                 std::size_t boundary, const AlignmentConfig& cfg);

// Same contract applied to the decoder query sequence (prompt slots first).
ad::Var dpa_loss(const ad::Var& scores, std::size_t boundary,
                 const AlignmentConfig& cfg);
ad::Var dpa_loss(const ad::Var& projected, const ad::Var& scores,
                 std::size_t boundary, const AlignmentConfig& cfg);

// Convenience: project a sequence through the site's domain head, reverse
// gradients, and score with the site discriminator.
ad::Var prompt_alignment_scores(const AlignmentSite& site, const ad::Var& seq,
                                Domain domain, const AlignmentConfig& cfg);

}  // namespace pmdet
