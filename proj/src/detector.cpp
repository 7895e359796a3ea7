#include "pmdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pmdet/common.hpp"
#include "pmdet/kernels.hpp"

namespace pmdet {

namespace {

Tensor make_pos_encoding(std::size_t grid_h, std::size_t grid_w,
                         std::size_t dim) {
  Tensor pos({grid_h * grid_w, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < grid_h; ++i) {
    for (std::size_t j = 0; j < grid_w; ++j) {
      double* row = pos.data() + (i * grid_w + j) * dim;
      for (std::size_t k = 0; 2 * k + 1 < half; ++k) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                  static_cast<double>(half));
        row[2 * k] = std::sin(static_cast<double>(i) * freq);
        row[2 * k + 1] = std::cos(static_cast<double>(i) * freq);
        row[half + 2 * k] = std::sin(static_cast<double>(j) * freq);
        row[half + 2 * k + 1] = std::cos(static_cast<double>(j) * freq);
      }
    }
  }
  return pos;
}

// (C, h, w) feature map -> (h*w, C) token matrix.
ad::Var chw_to_tokens(const ad::Var& x) {
  const std::size_t channels = x->value.dim(0);
  const std::size_t n = x->value.dim(1) * x->value.dim(2);
  Tensor out({n, channels});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t t = 0; t < n; ++t)
      out[t * channels + c] = x->value[c * n + t];
  return ad::make_node(std::move(out), {x}, [channels, n](ad::Node& self) {
    ad::Node& X = *self.parents[0];
    if (!X.needs_grad) return;
    Tensor& gx = X.ensure_grad();
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < n; ++t)
        gx[c * n + t] += self.grad[t * channels + c];
  });
}

Tensor softmax_copy(const Tensor& logits) {
  Tensor probs(logits.shape());
  kernels::softmax_rows(logits.data(), probs.data(), logits.rows(),
                        logits.cols());
  return probs;
}

}  // namespace

ToyDetector::ToyDetector(const DetectorConfig& config, std::uint64_t seed)
    : config_(config) {
  if (config.num_queries == 0)
    throw ConfigError("detector: query count must be positive");
  if (config.stride == 0 || (config.stride & (config.stride - 1)) != 0)
    throw ConfigError("detector: stride must be a power of two");

  // Stride-2 conv chain; widths ramp up to the embedding dimension.
  std::size_t n_convs = 0;
  for (std::size_t s = config.stride; s > 1; s /= 2) ++n_convs;
  std::vector<std::size_t> widths(n_convs);
  for (std::size_t i = 0; i < n_convs; ++i)
    widths[i] = i + 1 == n_convs
                    ? config.dim
                    : std::min<std::size_t>(32 << i, config.dim);
  std::size_t cin = config.image_channels;
  for (std::size_t i = 0; i < n_convs; ++i) {
    const std::size_t cout = widths[i];
    const std::string name = "detector/backbone/conv" + std::to_string(i);
    RngStream rng = named_stream(seed, name);
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9 + cout));
    Tensor w({cout, cin * 9});
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.uniform(-bound, bound);
    conv_w_.push_back(ad::parameter(std::move(w), name + "/w"));
    conv_b_.push_back(ad::parameter(Tensor::zeros({cout}), name + "/b"));
    conv_cout_.push_back(cout);
    cin = cout;
  }

  for (std::size_t i = 0; i < config.enc_layers; ++i)
    encoder_.push_back(nn::EncoderLayer::init(
        config.dim, config.heads, config.ffn_dim, seed,
        "detector/enc" + std::to_string(i)));
  for (std::size_t i = 0; i < config.dec_layers; ++i)
    decoder_.push_back(nn::DecoderLayer::init(
        config.dim, config.heads, config.ffn_dim, seed,
        "detector/dec" + std::to_string(i)));
  backbone_norm_ =
      nn::LayerNormParams::init(config.dim, "detector/backbone_norm");
  enc_norm_ = nn::LayerNormParams::init(config.dim, "detector/enc_norm");
  dec_norm_ = nn::LayerNormParams::init(config.dim, "detector/dec_norm");

  // Object queries: drawn from the normal distribution once at start.
  {
    RngStream rng = named_stream(seed, "detector/queries");
    Tensor q({config.num_queries, config.dim});
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = rng.normal();
    queries_ = ad::parameter(std::move(q), "detector/queries");
  }

  class_head_ = nn::Linear::init(config.dim, config.num_classes + 1, seed,
                                 "detector/class_head");
  box_head_ = nn::Mlp::init(config.dim, config.dim, 4, seed,
                            "detector/box_head");
  pos_ = make_pos_encoding(config.image_h / config.stride,
                           config.image_w / config.stride, config.dim);
}

FeatureTokens ToyDetector::backbone_forward(const ad::Var& image) const {
  if (image->value.ndim() != 3 ||
      image->value.dim(0) != config_.image_channels)
    throw ConfigError("backbone: image shape mismatch");
  const std::size_t h = image->value.dim(1), w = image->value.dim(2);
  if (h % config_.stride != 0 || w % config_.stride != 0)
    throw ConfigError("backbone: image size not divisible by stride");

  ad::Var x = image;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    x = ad::conv2d(x, conv_w_[i], conv_b_[i], 3, 3, 2, 1);
    if (i + 1 < conv_w_.size()) x = ad::relu(x);
  }
  FeatureTokens ft;
  ft.grid_h = h / config_.stride;
  ft.grid_w = w / config_.stride;
  ft.image_size = {h, w};
  ft.pos = (ft.grid_h == config_.image_h / config_.stride &&
            ft.grid_w == config_.image_w / config_.stride)
               ? pos_
               : make_pos_encoding(ft.grid_h, ft.grid_w, config_.dim);
  ft.tokens = backbone_norm_.forward(chw_to_tokens(x));
  return ft;
}

Tensor ToyDetector::memory_positional(const FeatureTokens& ft,
                                      std::size_t prefix_rows) const {
  Tensor pos({prefix_rows + ft.pos.rows(), config_.dim});
  std::copy(ft.pos.data(), ft.pos.data() + ft.pos.size(),
            pos.data() + prefix_rows * config_.dim);
  return pos;
}

ad::Var ToyDetector::encoder_forward(const FeatureTokens& ft,
                                     const ad::Var* prompt_prefix) const {
  if (ft.tokens->value.cols() != config_.dim)
    throw ConfigError("encoder: token dimension mismatch");
  ad::Var x = ft.tokens;
  std::size_t prefix_rows = 0;
  if (prompt_prefix != nullptr && (*prompt_prefix)->value.size() > 0) {
    if ((*prompt_prefix)->value.cols() != config_.dim)
      throw ConfigError("encoder: prompt prefix dimension mismatch");
    x = ad::concat_rows({*prompt_prefix, ft.tokens});
    prefix_rows = (*prompt_prefix)->value.rows();
  }
  ad::Var pos = ad::constant(memory_positional(ft, prefix_rows));
  for (const auto& layer : encoder_) x = layer.forward(x, pos);
  return enc_norm_.forward(x);
}

DetectionOutput ToyDetector::decoder_forward(const ad::Var& memory,
                                             const ad::Var* query_prompts,
                                             ad::Var* slots_out,
                                             const Tensor* memory_pos) const {
  // Slot content starts at zero; the learned object queries act as the
  // decoder's query positions. Prompt slots append their weights as content
  // with zero positions.
  ad::Var slots =
      ad::constant(Tensor({config_.num_queries, config_.dim}));
  ad::Var query_pos = queries_;
  if (query_prompts != nullptr && (*query_prompts)->value.size() > 0) {
    if ((*query_prompts)->value.cols() != config_.dim)
      throw ConfigError("decoder: prompt dimension mismatch");
    const std::size_t extra = (*query_prompts)->value.rows();
    slots = ad::concat_rows({slots, *query_prompts});
    query_pos = ad::concat_rows(
        {queries_, ad::constant(Tensor({extra, config_.dim}))});
  }
  ad::Var mem_pos =
      memory_pos != nullptr
          ? ad::constant(*memory_pos)
          : ad::constant(Tensor(memory->value.shape()));
  for (const auto& layer : decoder_)
    slots = layer.forward(slots, query_pos, memory, mem_pos);
  slots = dec_norm_.forward(slots);
  if (slots_out != nullptr) *slots_out = slots;

  ad::Var objects = ad::slice_rows(slots, 0, config_.num_queries);
  DetectionOutput out;
  out.class_logits = class_head_.forward(objects);
  out.boxes = ad::sigmoid(box_head_.forward(objects));
  return out;
}

void ToyDetector::collect(nn::ParamMap& out_params) const {
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    out_params[conv_w_[i]->name] = conv_w_[i];
    out_params[conv_b_[i]->name] = conv_b_[i];
  }
  for (const auto& l : encoder_) l.collect(out_params);
  for (const auto& l : decoder_) l.collect(out_params);
  backbone_norm_.collect(out_params);
  enc_norm_.collect(out_params);
  dec_norm_.collect(out_params);
  out_params[queries_->name] = queries_;
  class_head_.collect(out_params);
  box_head_.collect(out_params);
}

std::size_t ToyDetector::parameter_count() const {
  nn::ParamMap params;
  collect(params);
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p->value.size();
  return n;
}

MatchResult hungarian_match(const Tensor& class_probs, const Tensor& boxes,
                            const GroundTruth& gt, double w_cls, double w_l1,
                            double w_giou) {
  const int q = static_cast<int>(class_probs.rows());
  const int g = static_cast<int>(gt.labels.size());
  MatchResult result;
  if (g == 0) return result;
  if (g > q) throw ConfigError("hungarian_match: more ground truths than queries");

  // cost[row=gt][col=query]
  std::vector<double> cost(static_cast<std::size_t>(g) * q);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < q; ++j) {
      double c = -w_cls * class_probs.at2(j, gt.labels[i]);
      double l1 = 0.0;
      for (int k = 0; k < 4; ++k)
        l1 += std::fabs(boxes.at2(j, k) - gt.boxes.at2(i, k));
      c += w_l1 * l1;
      if (w_giou > 0.0) {
        std::array<double, 4> bq{boxes.at2(j, 0), boxes.at2(j, 1),
                                 boxes.at2(j, 2), boxes.at2(j, 3)};
        std::array<double, 4> bg{gt.boxes.at2(i, 0), gt.boxes.at2(i, 1),
                                 gt.boxes.at2(i, 2), gt.boxes.at2(i, 3)};
        c -= w_giou * giou_cxcywh(bq, bg);
      }
      cost[i * q + j] = c;
    }
  }

  // Augmenting-path assignment with potentials; rows are ground truths.
  // Strict improvement comparisons make ties resolve to the lowest query.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(g + 1, 0.0), v(q + 1, 0.0);
  std::vector<int> p(q + 1, 0), way(q + 1, 0);
  for (int i = 1; i <= g; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(q + 1, inf);
    std::vector<char> used(q + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= q; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * q + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= q; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  for (int j = 1; j <= q; ++j) {
    if (p[j] == 0) continue;
    result.pairs.emplace_back(j - 1, p[j] - 1);
    result.cost += cost[(p[j] - 1) * q + (j - 1)];
  }
  std::sort(result.pairs.begin(), result.pairs.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  return result;
}

ad::Var detection_loss(const DetectionOutput& pred, const GroundTruth& gt,
                       const MatchResult& match, const LossConfig& cfg) {
  const Tensor& logits = pred.class_logits->value;
  const Tensor& boxes = pred.boxes->value;
  if (!logits.all_finite() || !boxes.all_finite())
    throw NumericError("detection_loss: non-finite prediction inputs");
  if (!gt.boxes.all_finite())
    throw NumericError("detection_loss: non-finite ground-truth boxes");

  const std::size_t q = logits.rows();
  const std::size_t n_cls = logits.cols();
  const int background = static_cast<int>(n_cls) - 1;
  std::vector<int> target(q, background);
  for (const auto& [qi, gi] : match.pairs) target[qi] = gt.labels[gi];

  const Tensor probs = softmax_copy(logits);
  const double g_norm = 1.0 / static_cast<double>(std::max<std::size_t>(
                                  gt.labels.size(), 1));

  double cls_sum = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    const double pt = std::max(probs.at2(i, target[i]), 1e-12);
    const double alpha_t =
        target[i] == background ? 1.0 - cfg.focal_alpha : cfg.focal_alpha;
    cls_sum -= alpha_t * std::pow(1.0 - pt, cfg.focal_gamma) * std::log(pt);
  }
  double l1_sum = 0.0;
  for (const auto& [qi, gi] : match.pairs)
    for (int k = 0; k < 4; ++k)
      l1_sum += std::fabs(boxes.at2(qi, k) - gt.boxes.at2(gi, k));

  // Both terms normalize by the ground-truth count (the DETR convention);
  // with no ground truth the background sum is kept as-is.
  const double total =
      cfg.w_focal * cls_sum * g_norm + cfg.w_l1 * l1_sum * g_norm;

  std::vector<std::pair<int, int>> pairs = match.pairs;
  Tensor gt_boxes = gt.boxes;
  return ad::make_node(
      Tensor::scalar(total), {pred.class_logits, pred.boxes},
      [probs, target, pairs, gt_boxes, cfg, q, n_cls, background,
       g_norm](ad::Node& self) {
        const double go = self.grad[0];
        ad::Node& L = *self.parents[0];
        ad::Node& B = *self.parents[1];
        if (L.needs_grad) {
          Tensor& gl = L.ensure_grad();
          const double s = go * cfg.w_focal * g_norm;
          for (std::size_t i = 0; i < q; ++i) {
            const int t = target[i];
            const double pt = std::max(probs.at2(i, t), 1e-12);
            const double alpha_t =
                t == background ? 1.0 - cfg.focal_alpha : cfg.focal_alpha;
            // d/dp of -alpha (1-p)^g ln p
            const double dfdp =
                alpha_t * (cfg.focal_gamma *
                               std::pow(1.0 - pt, cfg.focal_gamma - 1.0) *
                               std::log(pt) -
                           std::pow(1.0 - pt, cfg.focal_gamma) / pt);
            for (std::size_t j = 0; j < n_cls; ++j) {
              const double dp = pt * ((static_cast<int>(j) == t ? 1.0 : 0.0) -
                                      probs.at2(i, j));
              gl.at2(i, j) += s * dfdp * dp;
            }
          }
        }
        if (B.needs_grad) {
          Tensor& gb = B.ensure_grad();
          const double s = go * cfg.w_l1 * g_norm;
          for (const auto& [qi, gi] : pairs) {
            for (int k = 0; k < 4; ++k) {
              const double d = B.value.at2(qi, k) - gt_boxes.at2(gi, k);
              gb.at2(qi, k) += s * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
          }
        }
      });
}

std::vector<RawDetection> postprocess(const Tensor& class_logits,
                                      const Tensor& boxes,
                                      double score_threshold) {
  const Tensor probs = softmax_copy(class_logits);
  const std::size_t q = probs.rows();
  const std::size_t k = probs.cols() - 1;  // real classes
  std::vector<RawDetection> out;
  for (std::size_t i = 0; i < q; ++i) {
    int best = 0;
    double best_p = probs.at2(i, 0);
    for (std::size_t c = 1; c < k; ++c) {
      if (probs.at2(i, c) > best_p) {
        best_p = probs.at2(i, c);
        best = static_cast<int>(c);
      }
    }
    if (best_p > score_threshold) {
      RawDetection det;
      det.label = best;
      det.score = best_p;
      for (int j = 0; j < 4; ++j) det.box[j] = boxes.at2(i, j);
      out.push_back(det);
    }
  }
  return out;
}

double giou_cxcywh(const std::array<double, 4>& a,
                   const std::array<double, 4>& b) {
  const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
  const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
  const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
  const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double area = a[2] * a[3] + b[2] * b[3] - inter;
  const double iou = area > 0.0 ? inter / area : 0.0;
  const double cw = std::max(ax1, bx1) - std::min(ax0, bx0);
  const double ch = std::max(ay1, by1) - std::min(ay0, by0);
  const double hull = cw * ch;
  return hull > 0.0 ? iou - (hull - area) / hull : iou;
}

}  // namespace pmdet
