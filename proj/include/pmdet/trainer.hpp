#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pmdet/alignment.hpp"
#include "pmdet/checkpoint.hpp"
#include "pmdet/config.hpp"
#include "pmdet/data.hpp"
#include "pmdet/detector.hpp"
#include "pmdet/divergence.hpp"
#include "pmdet/mean_teacher.hpp"
#include "pmdet/metrics.hpp"
#include "pmdet/optim.hpp"
#include "pmdet/prompt_memory.hpp"

namespace pmdet {

// Orchestration: the two-stage training recipe, evaluation, feature export,
// the divergence probe runner and the two ablation sweeps. CLI verbs are
// thin wrappers over these calls.

enum class SelectionStrategy { distribution, random, kmeans };
SelectionStrategy strategy_from_name(const std::string& name);
const char* strategy_name(SelectionStrategy s);

struct PoolSet {
  std::optional<PromptPool> input, token, query;
  bool any() const {
    return input.has_value() || token.has_value() || query.has_value();
  }
};

struct ModelBundle {
  Config config = Config::defaults();
  DetectorConfig dcfg;
  LossConfig loss_cfg;
  AlignmentConfig align_cfg;
  std::unique_ptr<ToyDetector> detector;
  PoolSet source_pools, target_pools;
  std::optional<MemoryAlignment> pma;
  int prompt_m = 4;

  nn::ParamMap detector_params() const;
  nn::ParamMap pool_params() const;  // pdm/*
  nn::ParamMap pma_params() const;   // pma/*
  nn::ParamMap all_params() const;
  std::size_t pool_parameter_count() const;
};

// with_pools/with_pma override the config's pdm/pma switches (used by the
// burn-in stage and the mean-teacher-only ablation).
ModelBundle build_model(const Config& config, bool with_pools, bool with_pma);

// Copy checkpoint arrays into matching bundle parameters. Names absent from
// the checkpoint keep their fresh initialization unless require_all.
void restore_parameters(ModelBundle& model, const Checkpoint& ckpt,
                        bool require_all);

struct SelectionContext {
  SelectionStrategy strategy = SelectionStrategy::distribution;
  RngStream* rng = nullptr;  // for the random strategy
  const KMeansIndex* km_input = nullptr;
  const KMeansIndex* km_token = nullptr;
  const KMeansIndex* km_query = nullptr;
};

struct ForwardArtifacts {
  DetectionOutput output;
  ad::Var encoder_out;    // (enc_boundary + T, d)
  ad::Var decoder_slots;  // (Q + dec_prompt_rows, d)
  std::size_t enc_boundary = 0;
  std::size_t dec_prompt_rows = 0;
  SelectionResult sel_input, sel_token, sel_query;
};

// One image through the (optionally prompted) detector.
ForwardArtifacts forward_image(const ModelBundle& model, const Tensor& image,
                               Domain domain,
                               const SelectionContext* selection = nullptr);

struct RunPaths {
  std::string data_root;      // <root>/{source,target}/...
  std::string val_root;       // optional validation pair, same layout
  std::string out_dir;        // checkpoints, metrics.jsonl, reports
  std::string resume;         // optional checkpoint to resume from
};

// Step schedule: base rate until the decay epoch, base * factor afterwards.
double scheduled_lr(double base, int epoch, int decay_epoch, double factor);

// Stage 1: supervised training on the labeled source domain only. Returns
// the path of the final checkpoint. Writes out_dir/burn_in.ckpt every epoch
// and appends one metrics record per epoch to out_dir/metrics.jsonl.
std::string burn_in_train(const Config& config, const RunPaths& paths);

// Stage 2: prompt pools + alignment + mean teacher on top of a burn-in
// checkpoint. Respects pdm.*.enabled / pma.enabled for the ablations.
std::string adapt_train(const Config& config, const RunPaths& paths,
                        const std::string& burn_in_ckpt);

struct EvalSummary {
  EvalResult result;
  std::size_t images = 0;
};

EvalSummary evaluate_map(const std::string& ckpt_path,
                         const std::string& domain_dir, Domain pools_domain,
                         double iou_threshold = 0.5,
                         double score_threshold = 0.0);
EvalSummary evaluate_map(const ModelBundle& model,
                         const LoadedDataset& dataset, Domain pools_domain,
                         double iou_threshold, double score_threshold);

enum class FeatureLayer { encoder_mean, decoder_queries };
FeatureLayer feature_layer_from_name(const std::string& name);

// One record per image (encoder_mean) or per query slot (decoder_queries),
// tagged with the domain and, where available, a class label.
void export_features(const std::string& ckpt_path,
                     const std::string& source_dir,
                     const std::string& target_dir, FeatureLayer layer,
                     const std::string& out_path);

struct FeatureDump {
  int dim = 0;
  std::string layer;
  Tensor source, target;  // (n, dim) each
};
FeatureDump load_feature_dump(const std::string& path);

// Side-by-side divergence estimates for two exported dumps; one JSON line
// per (model, seed) plus per-model mean rows.
void run_probe(const std::string& dump_source_only,
               const std::string& dump_adapted, const std::string& out_path,
               int n_seeds = 3, int epochs = 200);

// Ablation harnesses; both run adapt_train per setting under out_dir and
// append one JSON-lines row per setting to the report.
void sweep_memory_size(const Config& config, const std::vector<int>& sizes,
                       const RunPaths& paths, const std::string& burn_in_ckpt,
                       const std::string& report_path);
void compare_selection_strategies(const Config& config,
                                  const std::vector<std::string>& strategies,
                                  const RunPaths& paths,
                                  const std::string& burn_in_ckpt,
                                  const std::string& report_path);

}  // namespace pmdet
