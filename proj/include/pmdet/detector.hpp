#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pmdet/nn.hpp"

namespace pmdet {

// Minimal end-to-end detection transformer: strided conv backbone, standard
// attention encoder/decoder, set-prediction heads, Hungarian matching and a
// focal + L1 criterion. Three prompt injection sites: the input image, the
// encoder token sequence, and the decoder query slots.

struct DetectorConfig {
  std::size_t image_channels = 3;
  std::size_t image_h = 64, image_w = 64;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t num_queries = 25;
  std::size_t num_classes = 3;  // K; background is class index K
  std::size_t stride = 8;       // three stride-2 convs
};

struct FeatureTokens {
  ad::Var tokens;  // (T, d) normalized backbone content, no positional part
  Tensor pos;      // (T, d) fixed 2-d sine encoding, applied inside attention
  std::size_t grid_h = 0, grid_w = 0;
  std::pair<std::size_t, std::size_t> image_size;
};

struct DetectionOutput {
  ad::Var class_logits;  // (Q, K+1)
  ad::Var boxes;         // (Q, 4) normalized (cx, cy, w, h) in (0, 1)
};

struct GroundTruth {
  std::vector<int> labels;  // in [0, K)
  Tensor boxes;             // (G, 4) normalized (cx, cy, w, h)
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query index, gt index)
  double cost = 0.0;
};

struct LossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double w_focal = 1.0;
  double w_l1 = 5.0;
};

struct RawDetection {
  int label = 0;
  double score = 0.0;
  std::array<double, 4> box{};  // normalized (cx, cy, w, h)
};

class ToyDetector {
 public:
  ToyDetector(const DetectorConfig& config, std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }

  FeatureTokens backbone_forward(const ad::Var& image) const;

  // T' = T + prefix rows when a prompt prefix is given; prefix rows stay at
  // the front through every layer.
  ad::Var encoder_forward(const FeatureTokens& tokens,
                          const ad::Var* prompt_prefix = nullptr) const;

  // Prompt query slots are appended after the Q object queries, attend like
  // any slot, and are masked out of the heads. slots_out (optional) receives
  // the full final hidden states including prompt slots. memory_pos carries
  // the positional rows matching the memory (zeros when omitted).
  DetectionOutput decoder_forward(const ad::Var& memory,
                                  const ad::Var* query_prompts = nullptr,
                                  ad::Var* slots_out = nullptr,
                                  const Tensor* memory_pos = nullptr) const;

  // Positional rows for an encoder output with `prefix_rows` prompt rows in
  // front: zeros for the prefix, the 2-d sine encoding for the tokens.
  Tensor memory_positional(const FeatureTokens& tokens,
                           std::size_t prefix_rows) const;

  ad::Var object_queries() const { return queries_; }
  void bind_object_queries(const ad::Var& shared) { queries_ = shared; }

  void collect(nn::ParamMap& out_params) const;
  std::size_t parameter_count() const;

 private:
  DetectorConfig config_;
  std::vector<ad::Var> conv_w_, conv_b_;  // 3x3 kernels stored (Cout, Cin*9)
  std::vector<std::size_t> conv_cout_;
  std::vector<nn::EncoderLayer> encoder_;
  std::vector<nn::DecoderLayer> decoder_;
  nn::LayerNormParams backbone_norm_, enc_norm_, dec_norm_;
  ad::Var queries_;  // (Q, d)
  nn::Linear class_head_;
  nn::Mlp box_head_;
  Tensor pos_;  // (T, d) fixed 2-d sine positional encoding
};

// Minimum-cost one-to-one assignment of ground truths to queries.
// cost(q, g) = w_cls * (-prob[q][label_g]) + w_l1 * L1(box_q, box_g)
//            + w_giou * (-giou) when w_giou > 0 (off by default).
MatchResult hungarian_match(const Tensor& class_probs, const Tensor& boxes,
                            const GroundTruth& gt, double w_cls, double w_l1,
                            double w_giou = 0.0);

// Focal classification over all queries (matched queries take their GT
// class, the rest background) plus L1 over matched boxes.
ad::Var detection_loss(const DetectionOutput& pred, const GroundTruth& gt,
                       const MatchResult& match, const LossConfig& cfg);

// Per-query best non-background class; keeps scores strictly above the
// threshold. No NMS.
std::vector<RawDetection> postprocess(const Tensor& class_logits,
                                      const Tensor& boxes,
                                      double score_threshold);

double giou_cxcywh(const std::array<double, 4>& a,
                   const std::array<double, 4>& b);

}  // namespace pmdet
