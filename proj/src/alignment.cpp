#include "pmdet/alignment.hpp"

#include "pmdet/common.hpp"

namespace pmdet {

DomainDiscriminator DomainDiscriminator::init(std::size_t in_dim,
                                              std::size_t hidden,
                                              std::uint64_t seed,
                                              const std::string& name) {
  DomainDiscriminator d;
  std::size_t cur = in_dim;
  for (int i = 0; i < 3; ++i) {
    d.blocks.push_back(
        nn::Linear::init(cur, hidden, seed, name + "/block" + std::to_string(i)));
    cur = hidden;
  }
  d.out = nn::Linear::init(cur, 1, seed, name + "/out");
  return d;
}

ad::Var DomainDiscriminator::forward_logits(const ad::Var& x) const {
  ad::Var h = x;
  for (const auto& block : blocks) h = ad::relu(block.forward(h));
  return out.forward(h);
}

ad::Var DomainDiscriminator::forward(const ad::Var& x) const {
  return ad::sigmoid(forward_logits(x));
}

void DomainDiscriminator::collect(nn::ParamMap& out_params) const {
  for (const auto& block : blocks) block.collect(out_params);
  out.collect(out_params);
}

ProjectionHead ProjectionHead::init(std::size_t in_dim, std::size_t shared_dim,
                                    std::uint64_t seed,
                                    const std::string& name) {
  ProjectionHead h;
  h.source = nn::Mlp::init(in_dim, shared_dim, shared_dim, seed, name + "/src");
  h.target = nn::Mlp::init(in_dim, shared_dim, shared_dim, seed, name + "/tgt");
  return h;
}

ad::Var ProjectionHead::project(const ad::Var& embeddings,
                                Domain domain) const {
  const nn::Mlp& head = domain == Domain::source ? source : target;
  if (embeddings->value.cols() != head.fc1.w->value.cols())
    throw ConfigError("project_prompts: embedding dimension mismatch");
  return head.forward(embeddings);
}

void ProjectionHead::collect(nn::ParamMap& out_params) const {
  source.collect(out_params);
  target.collect(out_params);
}

AlignmentSite AlignmentSite::init(std::size_t in_dim,
                                  const AlignmentConfig& cfg,
                                  std::uint64_t seed,
                                  const std::string& name) {
  AlignmentSite site;
  site.heads = ProjectionHead::init(in_dim, cfg.shared_dim, seed,
                                    name + "/proj");
  site.disc = DomainDiscriminator::init(cfg.shared_dim, cfg.shared_dim, seed,
                                        name + "/disc");
  return site;
}

void AlignmentSite::collect(nn::ParamMap& out_params) const {
  heads.collect(out_params);
  disc.collect(out_params);
}

MemoryAlignment MemoryAlignment::init(std::size_t in_dim,
                                      const AlignmentConfig& cfg,
                                      std::uint64_t seed) {
  MemoryAlignment pma;
  pma.cfg = cfg;
  pma.encoder_site = AlignmentSite::init(in_dim, cfg, seed, "pma/enc");
  pma.decoder_site = AlignmentSite::init(in_dim, cfg, seed, "pma/dec");
  return pma;
}

void MemoryAlignment::collect(nn::ParamMap& out_params) const {
  encoder_site.collect(out_params);
  decoder_site.collect(out_params);
}

namespace {

ad::Var signed_mean_loss(const ad::Var& scores, std::size_t boundary,
                         const AlignmentConfig& cfg, const char* what) {
  const std::size_t t = scores->value.rows();
  if (boundary > t)
    throw ConfigError(std::string(what) + ": boundary beyond sequence length");
  if (boundary == 0 && cfg.lambda1 > 0.0)
    warn(std::string(what) + ": boundary 0 with lambda1 > 0, prompt term is 0");

  ad::Var loss;
  if (boundary > 0) {
    loss = ad::scale(ad::mean_all(ad::slice_rows(scores, 0, boundary)),
                     cfg.lambda1);
  }
  if (boundary < t) {
    ad::Var rest = ad::scale(ad::mean_all(ad::slice_rows(scores, boundary, t)),
                             -cfg.lambda2);
    loss = loss ? ad::add(loss, rest) : rest;
  }
  if (!loss) loss = ad::constant(Tensor::scalar(0.0));
  return loss;
}

}  // namespace

ad::Var epa_loss(const ad::Var& scores, std::size_t boundary,
                 const AlignmentConfig& cfg) {
  return signed_mean_loss(scores, boundary, cfg, "epa_loss");
}

ad::Var epa_loss(const ad::Var& projected, const ad::Var& scores,
                 std::size_t boundary, const AlignmentConfig& cfg) {
  if (projected->value.rows() != scores->value.rows())
    throw ConfigError("epa_loss: projected/score row counts disagree");
  return signed_mean_loss(scores, boundary, cfg, "epa_loss");
}

ad::Var dpa_loss(const ad::Var& scores, std::size_t boundary,
                 const AlignmentConfig& cfg) {
  return signed_mean_loss(scores, boundary, cfg, "dpa_loss");
}

ad::Var dpa_loss(const ad::Var& projected, const ad::Var& scores,
                 std::size_t boundary, const AlignmentConfig& cfg) {
  if (projected->value.rows() != scores->value.rows())
    throw ConfigError("dpa_loss: projected/score row counts disagree");
  return signed_mean_loss(scores, boundary, cfg, "dpa_loss");
}

ad::Var prompt_alignment_scores(const AlignmentSite& site, const ad::Var& seq,
                                Domain domain, const AlignmentConfig& cfg) {
  ad::Var projected = site.heads.project(seq, domain);
  return site.disc.forward(ad::grad_reverse(projected, cfg.reversal_scale));
}

}  // namespace pmdet
