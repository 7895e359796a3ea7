#include "pmdet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pmdet/common.hpp"
#include "pmdet/kernels.hpp"

namespace pmdet {

namespace fs = std::filesystem;
using nlohmann::json;

SelectionStrategy strategy_from_name(const std::string& name) {
  if (name == "distribution") return SelectionStrategy::distribution;
  if (name == "random") return SelectionStrategy::random;
  if (name == "kmeans") return SelectionStrategy::kmeans;
  throw ConfigError("unknown selection strategy: " + name);
}

const char* strategy_name(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::distribution: return "distribution";
    case SelectionStrategy::random: return "random";
    case SelectionStrategy::kmeans: return "kmeans";
  }
  return "?";
}

FeatureLayer feature_layer_from_name(const std::string& name) {
  if (name == "encoder_mean") return FeatureLayer::encoder_mean;
  if (name == "decoder_queries") return FeatureLayer::decoder_queries;
  throw ConfigError("unknown feature layer: " + name);
}

namespace {

Tensor softmax_of(const Tensor& logits) {
  Tensor probs(logits.shape());
  kernels::softmax_rows(logits.data(), probs.data(), logits.rows(),
                        logits.cols());
  return probs;
}

Tensor image_as_tokens(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({h * w, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p)
      out[p * c + ch] = image[ch * h * w + p];
  return out;
}

Tensor tensor_rows(const Tensor& t, std::size_t r0, std::size_t r1) {
  const std::size_t cols = t.cols();
  Tensor out({r1 - r0, cols});
  std::copy(t.data() + r0 * cols, t.data() + r1 * cols, out.data());
  return out;
}

// Concatenation of the selected prompt weights, in selection order.
ad::Var pool_prefix(const PromptPool& pool, const SelectionResult& sel) {
  std::vector<ad::Var> parts;
  for (int idx : sel.indices)
    parts.push_back(ad::slice_rows(pool.weights(), idx * pool.length(),
                                   (idx + 1) * pool.length()));
  return ad::concat_rows(parts);
}

SelectionResult select_for(const PromptPool& pool, const Tensor& embedding,
                           int m, const SelectionContext* ctx,
                           const KMeansIndex* km) {
  m = std::min(m, pool.size());
  if (ctx == nullptr || ctx->strategy == SelectionStrategy::distribution)
    return select_top_m(pool, embedding, m);
  if (ctx->strategy == SelectionStrategy::random) {
    if (ctx->rng == nullptr)
      throw ConfigError("random selection needs an RNG stream");
    return select_random(pool, m, *ctx->rng);
  }
  if (km == nullptr)
    throw ConfigError("kmeans selection needs a fitted index");
  return select_kmeans(pool, embedding, m, *km);
}

GroundTruth sample_ground_truth(const Sample& s) {
  GroundTruth gt;
  gt.labels = s.labels;
  gt.boxes = s.boxes.size() ? s.boxes : Tensor({0, 4});
  return gt;
}

std::string two_level(const std::string& root, const char* domain,
                      const char* file) {
  return (fs::path(root) / domain / file).string();
}

void append_json_line(const std::string& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path);
  out << record.dump() << "\n";
}

}  // namespace

nn::ParamMap ModelBundle::detector_params() const {
  nn::ParamMap params;
  detector->collect(params);
  return params;
}

nn::ParamMap ModelBundle::pool_params() const {
  nn::ParamMap params;
  for (const PoolSet* set : {&source_pools, &target_pools}) {
    if (set->input) set->input->collect(params);
    if (set->token) set->token->collect(params);
    if (set->query) set->query->collect(params);
  }
  return params;
}

nn::ParamMap ModelBundle::pma_params() const {
  nn::ParamMap params;
  if (pma) pma->collect(params);
  return params;
}

nn::ParamMap ModelBundle::all_params() const {
  nn::ParamMap params = detector_params();
  for (auto& [k, v] : pool_params()) params[k] = v;
  for (auto& [k, v] : pma_params()) params[k] = v;
  return params;
}

std::size_t ModelBundle::pool_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : pool_params()) n += p->value.size();
  return n;
}

ModelBundle build_model(const Config& config, bool with_pools, bool with_pma) {
  ModelBundle model;
  model.config = config;

  DetectorConfig dcfg;
  dcfg.image_h = dcfg.image_w = config.get_int("data.canvas");
  dcfg.dim = config.get_int("detector.d");
  dcfg.heads = config.get_int("detector.heads");
  dcfg.enc_layers = config.get_int("detector.enc_layers");
  dcfg.dec_layers = config.get_int("detector.dec_layers");
  dcfg.ffn_dim = config.get_int("detector.ffn");
  dcfg.num_queries = config.get_int("detector.queries");
  dcfg.num_classes = config.get_int("data.classes");
  dcfg.stride = config.get_int("detector.stride");
  model.dcfg = dcfg;

  model.loss_cfg.focal_alpha = config.get_double("loss.focal_alpha");
  model.loss_cfg.focal_gamma = config.get_double("loss.focal_gamma");
  model.loss_cfg.w_focal = config.get_double("loss.w_focal");
  model.loss_cfg.w_l1 = config.get_double("loss.w_l1");

  model.align_cfg.lambda1 = config.get_double("pma.lambda1");
  model.align_cfg.lambda2 = config.get_double("pma.lambda2");
  model.align_cfg.reversal_scale = config.get_double("pma.reversal_scale");
  model.align_cfg.shared_dim = config.get_int("pma.C");

  model.detector = std::make_unique<ToyDetector>(
      dcfg, static_cast<std::uint64_t>(config.get_i64("detector.seed")));
  model.prompt_m = config.get_int("pdm.M");

  if (with_pools) {
    const int n = config.get_int("pdm.N");
    const int token_l = config.get_int("pdm.L");
    const int query_l = config.get_int("pdm.query.L");
    const double scale = config.get_double("pdm.init_scale");
    const std::uint64_t seed =
        static_cast<std::uint64_t>(config.get_i64("pdm.seed"));
    const PixelShape pixel{static_cast<int>(dcfg.image_channels),
                           config.get_int("pdm.border")};
    for (Domain domain : {Domain::source, Domain::target}) {
      PoolSet& set =
          domain == Domain::source ? model.source_pools : model.target_pools;
      if (config.get_bool("pdm.input.enabled"))
        set.input = PromptPool::init_pool(
            Level::input, domain, n, 1, pixel.channels, seed, scale, pixel,
            static_cast<int>(dcfg.image_h), static_cast<int>(dcfg.image_w));
      if (config.get_bool("pdm.token.enabled"))
        set.token = PromptPool::init_pool(Level::token, domain, n, token_l,
                                          static_cast<int>(dcfg.dim), seed,
                                          scale);
      if (config.get_bool("pdm.query.enabled"))
        set.query = PromptPool::init_pool(Level::query, domain, n, query_l,
                                          static_cast<int>(dcfg.dim), seed,
                                          scale);
    }
  }
  if (with_pma)
    model.pma = MemoryAlignment::init(
        dcfg.dim, model.align_cfg,
        static_cast<std::uint64_t>(config.get_i64("pma.seed")));
  return model;
}

void restore_parameters(ModelBundle& model, const Checkpoint& ckpt,
                        bool require_all) {
  for (auto& [name, p] : model.all_params()) {
    const auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) {
      if (require_all)
        throw StateError("checkpoint is missing parameter " + name);
      continue;
    }
    if (!it->second.same_shape(p->value))
      throw StateError("checkpoint shape mismatch for " + name + ": " +
                       it->second.shape_str() + " vs " +
                       p->value.shape_str());
    p->value = it->second;
  }
}

ForwardArtifacts forward_image(const ModelBundle& model, const Tensor& image,
                               Domain domain,
                               const SelectionContext* selection) {
  const PoolSet& pools =
      domain == Domain::source ? model.source_pools : model.target_pools;
  ForwardArtifacts art;
  const int m = model.prompt_m;

  ad::Var x = ad::constant(image);
  if (pools.input) {
    art.sel_input =
        select_for(*pools.input, image_as_tokens(image), m, selection,
                   selection ? selection->km_input : nullptr);
    x = inject_input(x, art.sel_input, *pools.input);
  }

  FeatureTokens ft = model.detector->backbone_forward(x);

  ad::Var memory;
  if (pools.token) {
    art.sel_token = select_for(*pools.token, ft.tokens->value, m, selection,
                               selection ? selection->km_token : nullptr);
    ad::Var prefix = pool_prefix(*pools.token, art.sel_token);
    art.enc_boundary = prefix->value.rows();
    memory = model.detector->encoder_forward(ft, &prefix);
  } else {
    memory = model.detector->encoder_forward(ft, nullptr);
  }
  art.encoder_out = memory;

  const Tensor memory_pos =
      model.detector->memory_positional(ft, art.enc_boundary);
  if (pools.query) {
    const Tensor image_token_rows = tensor_rows(
        memory->value, art.enc_boundary, memory->value.rows());
    art.sel_query = select_for(*pools.query, image_token_rows, m, selection,
                               selection ? selection->km_query : nullptr);
    ad::Var query_prompts = pool_prefix(*pools.query, art.sel_query);
    art.dec_prompt_rows = query_prompts->value.rows();
    art.output = model.detector->decoder_forward(
        memory, &query_prompts, &art.decoder_slots, &memory_pos);
  } else {
    art.output = model.detector->decoder_forward(memory, nullptr,
                                                 &art.decoder_slots,
                                                 &memory_pos);
  }
  return art;
}

namespace {

ad::Var image_detection_loss(const ModelBundle& model,
                             const ForwardArtifacts& art,
                             const GroundTruth& gt) {
  const Tensor probs = softmax_of(art.output.class_logits->value);
  const MatchResult match = hungarian_match(
      probs, art.output.boxes->value, gt,
      model.config.get_double("match.w_cls"),
      model.config.get_double("match.w_l1"),
      model.config.get_double("match.w_giou"));
  return detection_loss(art.output, gt, match, model.loss_cfg);
}

ad::Var mean_of(std::vector<ad::Var> terms) {
  if (terms.empty()) return ad::constant(Tensor::scalar(0.0));
  ad::Var sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = ad::add(sum, terms[i]);
  return ad::scale(sum, 1.0 / static_cast<double>(terms.size()));
}

// Decoder slot sequence reordered prompt-first, matching the boundary
// convention of the alignment losses.
ad::Var decoder_prompt_first(const ForwardArtifacts& art, std::size_t q) {
  if (art.dec_prompt_rows == 0) return art.decoder_slots;
  return ad::concat_rows(
      {ad::slice_rows(art.decoder_slots, q, q + art.dec_prompt_rows),
       ad::slice_rows(art.decoder_slots, 0, q)});
}

struct HistogramLog {
  std::map<std::string, std::vector<std::int64_t>> counts;

  void log(const char* domain, const char* level, const SelectionResult& sel,
           int n) {
    if (sel.indices.empty()) return;
    auto& vec = counts[std::string(domain) + "/" + level];
    if (vec.empty()) vec.assign(n, 0);
    for (int idx : sel.indices) ++vec[idx];
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [key, vec] : counts) j[key] = vec;
    return j;
  }
};

struct KMeansSet {
  std::optional<KMeansIndex> input, token, query;
};

KMeansSet fit_kmeans_set(const PoolSet& pools, int m, std::uint64_t seed) {
  KMeansSet set;
  if (pools.input) set.input = fit_kmeans(*pools.input, m, seed);
  if (pools.token) set.token = fit_kmeans(*pools.token, m, seed + 1);
  if (pools.query) set.query = fit_kmeans(*pools.query, m, seed + 2);
  return set;
}

void point_context_at(SelectionContext& ctx, const KMeansSet& set) {
  ctx.km_input = set.input ? &*set.input : nullptr;
  ctx.km_token = set.token ? &*set.token : nullptr;
  ctx.km_query = set.query ? &*set.query : nullptr;
}

Checkpoint assemble_checkpoint(
    const ModelBundle& model, const optim::Adam& adam,
    const TeacherState* teacher,
    const std::map<std::string, std::string>& rng_states,
    const std::string& stage, std::int64_t epoch, std::int64_t step) {
  Checkpoint ck;
  ck.stage = stage;
  ck.epoch = epoch;
  ck.step = step;
  ck.config_text = model.config.to_text();
  ck.rng_states = rng_states;
  ck.meta["adam_t"] = std::to_string(adam.t());
  if (teacher) {
    ck.meta["teacher_alpha"] = std::to_string(teacher->alpha);
    ck.meta["teacher_step"] = std::to_string(teacher->step);
  }
  for (const auto& [name, p] : model.all_params()) ck.arrays[name] = p->value;
  for (const auto& [name, slot] : adam.slots()) ck.arrays["opt/" + name] = slot;
  if (teacher)
    for (const auto& [name, t] : teacher->shadow)
      ck.arrays["teacher/" + name] = t;
  return ck;
}

void restore_optimizer(optim::Adam& adam, const Checkpoint& ck) {
  adam.set_t(std::stoll(ck.meta.at("adam_t")));
  for (const auto& [name, t] : ck.arrays)
    if (name.rfind("opt/", 0) == 0) adam.slots()[name.substr(4)] = t;
}

void write_diagnostic(const std::string& out_dir, const std::string& what,
                      std::int64_t epoch, std::int64_t step) {
  json rec;
  rec["error"] = what;
  rec["epoch"] = epoch;
  rec["step"] = step;
  append_json_line((fs::path(out_dir) / "diagnostics.jsonl").string(), rec);
}

bool ckpt_has_prefix(const Checkpoint& ck, const char* prefix) {
  for (const auto& [name, t] : ck.arrays)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

double scheduled_lr(double base, int epoch, int decay_epoch, double factor) {
  return epoch >= decay_epoch ? base * factor : base;
}

std::string burn_in_train(const Config& config, const RunPaths& paths) {
  fs::create_directories(paths.out_dir);
  const std::string ckpt_path =
      (fs::path(paths.out_dir) / "burn_in.ckpt").string();
  const std::string metrics_path =
      (fs::path(paths.out_dir) / "metrics.jsonl").string();

  ModelBundle model =
      build_model(config, config.get_bool("stage1.train_pools"), false);
  const Manifest manifest =
      load_annotations(two_level(paths.data_root, "source", "annotations.json"));
  const LoadedDataset train = load_dataset(manifest, true);
  std::optional<LoadedDataset> val;
  if (!paths.val_root.empty())
    val = load_dataset(
        load_annotations(two_level(paths.val_root, "source", "annotations.json")),
        true);

  const int epochs = config.get_int("stage1.epochs");
  const int decay_epoch = config.get_int("stage1.decay_epoch");
  const double decay = config.get_double("stage1.decay_factor");
  const double base_lr = config.get_double("stage1.lr");
  const int batch_size = config.get_int("train.batch_size");

  BatchIterator iter(train, batch_size,
                     static_cast<std::uint64_t>(config.get_i64("train.seed")),
                     true);
  optim::Adam adam;
  nn::ParamMap params = model.all_params();
  std::int64_t gstep = 0;
  int start_epoch = 0;

  if (!paths.resume.empty()) {
    Checkpoint ck = load_checkpoint(paths.resume);
    if (ck.stage != "burn_in")
      throw StateError("resume checkpoint is not a burn-in checkpoint");
    restore_parameters(model, ck, true);
    restore_optimizer(adam, ck);
    iter.set_rng_state(ck.rng_states.at("data"));
    start_epoch = static_cast<int>(ck.epoch);
    gstep = ck.step;
  }

  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = scheduled_lr(base_lr, epoch, decay_epoch, decay);
    iter.reset();
    double loss_sum = 0.0;
    std::size_t n_batches = 0;

    std::vector<const Sample*> batch;
    while (iter.next(batch)) {
      ad::zero_grad(params);
      std::vector<ad::Var> losses;
      for (const Sample* s : batch) {
        ForwardArtifacts art =
            forward_image(model, s->image, Domain::source, nullptr);
        losses.push_back(
            image_detection_loss(model, art, sample_ground_truth(*s)));
      }
      ad::Var loss = mean_of(std::move(losses));
      if (!std::isfinite(loss->value[0])) {
        write_diagnostic(paths.out_dir, "nan_loss", epoch, gstep);
        throw NumericError("burn_in_train: non-finite loss at step " +
                           std::to_string(gstep));
      }
      ad::backward(loss);
      adam.step({{params, lr}});
      loss_sum += loss->value[0];
      ++n_batches;
      ++gstep;
    }

    json rec;
    rec["format_version"] = 1;
    rec["stage"] = "burn_in";
    rec["epoch"] = epoch;
    rec["lr"] = lr;
    const double mean_loss = n_batches ? loss_sum / n_batches : 0.0;
    rec["loss_total"] = mean_loss;
    rec["loss_sup"] = mean_loss;
    if (val) {
      const EvalSummary ev = evaluate_map(
          model, *val, Domain::source, config.get_double("eval.iou"),
          config.get_double("eval.score_threshold"));
      rec["map50"] = ev.result.map;
      json per_class = json::object();
      for (const auto& [cls, ap] : ev.result.ap_per_class)
        per_class[std::to_string(cls)] = ap;
      rec["map_per_class"] = per_class;
    }
    rec["wall_clock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    append_json_line(metrics_path, rec);

    Checkpoint ck = assemble_checkpoint(model, adam, nullptr,
                                        {{"data", iter.rng_state()}},
                                        "burn_in", epoch + 1, gstep);
    save_checkpoint(ck, ckpt_path);
  }
  return ckpt_path;
}

std::string adapt_train(const Config& config, const RunPaths& paths,
                        const std::string& burn_in_ckpt) {
  fs::create_directories(paths.out_dir);
  const std::string ckpt_path =
      (fs::path(paths.out_dir) / "adapt.ckpt").string();
  const std::string metrics_path =
      (fs::path(paths.out_dir) / "metrics.jsonl").string();

  const bool with_pools = config.get_bool("pdm.input.enabled") ||
                          config.get_bool("pdm.token.enabled") ||
                          config.get_bool("pdm.query.enabled");
  const bool with_pma = config.get_bool("pma.enabled");
  ModelBundle model = build_model(config, with_pools, with_pma);

  const LoadedDataset source = load_dataset(
      load_annotations(two_level(paths.data_root, "source", "annotations.json")),
      true);
  // The unlabeled target stream: annotations stay on disk, never loaded here.
  const LoadedDataset target = load_dataset(
      load_annotations(two_level(paths.data_root, "target", "annotations.json")),
      false);
  for (const Sample& s : target.samples)
    if (!s.labels.empty())
      throw StateError("adapt_train: target stream must be unlabeled");
  std::optional<LoadedDataset> val;
  if (!paths.val_root.empty())
    val = load_dataset(
        load_annotations(two_level(paths.val_root, "target", "annotations.json")),
        true);

  const int epochs = config.get_int("stage2.epochs");
  const int decay_epoch = config.get_int("stage2.decay_epoch");
  const double decay = config.get_double("stage2.decay_factor");
  const double lr_base = config.get_double("stage2.lr_base");
  const double lr_prompt = config.get_double("stage2.lr_prompt");
  const int batch_size = config.get_int("train.batch_size");
  const double lambda_s = config.get_double("stage2.lambda_s");
  const double lambda_us = config.get_double("stage2.lambda_us");
  const double lambda_epa = config.get_double("stage2.lambda_epa");
  const double lambda_dpa = config.get_double("stage2.lambda_dpa");
  const double pseudo_threshold = config.get_double("teacher.pseudo_threshold");
  const bool refresh_per_step = config.get("teacher.refresh") == "step";
  const SelectionStrategy strategy =
      strategy_from_name(config.get("pdm.strategy"));
  const std::uint64_t train_seed =
      static_cast<std::uint64_t>(config.get_i64("train.seed"));

  BatchIterator src_iter(source, batch_size, train_seed, true);
  RngStream tgt_seed_stream = named_stream(train_seed, "target_iter");
  BatchIterator tgt_iter(target, batch_size, tgt_seed_stream.next_u64(), true);
  RngStream strategy_rng = named_stream(train_seed, "selection");
  RngStream teacher_strategy_rng = named_stream(train_seed, "teacher_selection");

  // Teacher: same architecture, weights shadowed by EMA, object queries
  // bound to the student's.
  ModelBundle teacher = build_model(config, with_pools, false);
  sync_object_queries(*teacher.detector, *model.detector);

  optim::Adam adam;
  nn::ParamMap base_group = model.detector_params();
  nn::ParamMap prompt_group = model.pool_params();
  for (auto& [k, v] : model.pma_params()) prompt_group[k] = v;
  nn::ParamMap all_params = model.all_params();

  TeacherState teacher_state;
  std::int64_t gstep = 0;
  int start_epoch = 0;
  HistogramLog histograms;

  auto shadowed_params = [&]() {
    nn::ParamMap map = model.detector_params();
    if (model.target_pools.input) model.target_pools.input->collect(map);
    if (model.target_pools.token) model.target_pools.token->collect(map);
    if (model.target_pools.query) model.target_pools.query->collect(map);
    return map;
  };

  if (!paths.resume.empty()) {
    Checkpoint ck = load_checkpoint(paths.resume);
    if (ck.stage != "adapt")
      throw StateError("resume checkpoint is not an adapt checkpoint");
    restore_parameters(model, ck, true);
    restore_optimizer(adam, ck);
    teacher_state.alpha = std::stod(ck.meta.at("teacher_alpha"));
    teacher_state.step = std::stoll(ck.meta.at("teacher_step"));
    for (const auto& [name, t] : ck.arrays)
      if (name.rfind("teacher/", 0) == 0)
        teacher_state.shadow[name.substr(8)] = t;
    src_iter.set_rng_state(ck.rng_states.at("source_data"));
    tgt_iter.set_rng_state(ck.rng_states.at("target_data"));
    strategy_rng.set_state(ck.rng_states.at("strategy"));
    teacher_strategy_rng.set_state(ck.rng_states.at("teacher_strategy"));
    start_epoch = static_cast<int>(ck.epoch);
    gstep = ck.step;
  } else {
    Checkpoint base = load_checkpoint(burn_in_ckpt);
    if (base.stage != "burn_in")
      throw StateError("adapt_train: expected a burn-in checkpoint");
    restore_parameters(model, base, false);  // detector arrays only
    teacher_state =
        init_teacher(shadowed_params(), config.get_double("teacher.alpha"),
                     {"detector/queries"});
  }

  const std::size_t pool_count = model.pool_parameter_count();
  const std::size_t det_count = model.detector->parameter_count();
  const double overhead =
      det_count ? static_cast<double>(pool_count) / det_count : 0.0;

  auto teacher_param_map = [&]() {
    nn::ParamMap map = teacher.detector_params();
    if (teacher.target_pools.input) teacher.target_pools.input->collect(map);
    if (teacher.target_pools.token) teacher.target_pools.token->collect(map);
    if (teacher.target_pools.query) teacher.target_pools.query->collect(map);
    // The bound query node must not be overwritten by load_shadow.
    map.erase("detector/queries");
    return map;
  }();

  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double cur_lr_base = scheduled_lr(lr_base, epoch, decay_epoch, decay);
    const double cur_lr_prompt =
        scheduled_lr(lr_prompt, epoch, decay_epoch, decay);
    src_iter.reset();
    tgt_iter.reset();

    SelectionContext student_ctx, teacher_ctx;
    student_ctx.strategy = teacher_ctx.strategy = strategy;
    student_ctx.rng = &strategy_rng;
    teacher_ctx.rng = &teacher_strategy_rng;
    KMeansSet km_src, km_tgt, km_teacher;
    if (strategy == SelectionStrategy::kmeans) {
      km_src = fit_kmeans_set(model.source_pools, model.prompt_m,
                              train_seed + epoch * 7);
      km_tgt = fit_kmeans_set(model.target_pools, model.prompt_m,
                              train_seed + epoch * 7 + 3);
      km_teacher = fit_kmeans_set(teacher.target_pools, model.prompt_m,
                                  train_seed + epoch * 7 + 3);
    }

    if (!refresh_per_step) load_shadow(teacher_state, teacher_param_map);

    double sum_total = 0.0, sum_sup = 0.0, sum_unsup = 0.0, sum_epa = 0.0,
           sum_dpa = 0.0;
    std::size_t n_batches = 0;

    std::vector<const Sample*> src_batch, tgt_batch;
    while (src_iter.next(src_batch)) {
      if (!tgt_iter.next(tgt_batch)) {
        tgt_iter.reset();
        tgt_iter.next(tgt_batch);
      }
      if (refresh_per_step) load_shadow(teacher_state, teacher_param_map);

      // Teacher pseudo-labels for this target batch.
      std::vector<GroundTruth> pseudo;
      {
        ad::NoGradGuard no_grad;
        for (const Sample* s : tgt_batch) {
          if (strategy == SelectionStrategy::kmeans)
            point_context_at(teacher_ctx, km_teacher);
          ForwardArtifacts art =
              forward_image(teacher, s->image, Domain::target, &teacher_ctx);
          const auto raw =
              postprocess(art.output.class_logits->value,
                          art.output.boxes->value, pseudo_threshold);
          PseudoLabels labels;
          labels.threshold = pseudo_threshold;
          labels.detections = raw;
          pseudo.push_back(pseudo_labels_to_ground_truth(labels));
        }
      }

      ad::zero_grad(all_params);
      std::vector<ad::Var> sup_losses, unsup_losses, epa_terms, dpa_terms;

      if (strategy == SelectionStrategy::kmeans)
        point_context_at(student_ctx, km_src);
      for (const Sample* s : src_batch) {
        ForwardArtifacts art =
            forward_image(model, s->image, Domain::source, &student_ctx);
        sup_losses.push_back(
            image_detection_loss(model, art, sample_ground_truth(*s)));
        histograms.log("source", "input", art.sel_input,
                       model.source_pools.input ? model.source_pools.input->size() : 0);
        histograms.log("source", "token", art.sel_token,
                       model.source_pools.token ? model.source_pools.token->size() : 0);
        histograms.log("source", "query", art.sel_query,
                       model.source_pools.query ? model.source_pools.query->size() : 0);
        if (model.pma) {
          ad::Var enc_scores = prompt_alignment_scores(
              model.pma->encoder_site, art.encoder_out, Domain::source,
              model.align_cfg);
          epa_terms.push_back(
              epa_loss(enc_scores, art.enc_boundary, model.align_cfg));
          ad::Var dec_seq =
              decoder_prompt_first(art, model.dcfg.num_queries);
          ad::Var dec_scores = prompt_alignment_scores(
              model.pma->decoder_site, dec_seq, Domain::source,
              model.align_cfg);
          dpa_terms.push_back(
              dpa_loss(dec_scores, art.dec_prompt_rows, model.align_cfg));
        }
      }

      if (strategy == SelectionStrategy::kmeans)
        point_context_at(student_ctx, km_tgt);
      for (std::size_t i = 0; i < tgt_batch.size(); ++i) {
        ForwardArtifacts art = forward_image(model, tgt_batch[i]->image,
                                             Domain::target, &student_ctx);
        unsup_losses.push_back(image_detection_loss(model, art, pseudo[i]));
        histograms.log("target", "input", art.sel_input,
                       model.target_pools.input ? model.target_pools.input->size() : 0);
        histograms.log("target", "token", art.sel_token,
                       model.target_pools.token ? model.target_pools.token->size() : 0);
        histograms.log("target", "query", art.sel_query,
                       model.target_pools.query ? model.target_pools.query->size() : 0);
        if (model.pma) {
          ad::Var enc_scores = prompt_alignment_scores(
              model.pma->encoder_site, art.encoder_out, Domain::target,
              model.align_cfg);
          epa_terms.push_back(
              epa_loss(enc_scores, art.enc_boundary, model.align_cfg));
          ad::Var dec_seq =
              decoder_prompt_first(art, model.dcfg.num_queries);
          ad::Var dec_scores = prompt_alignment_scores(
              model.pma->decoder_site, dec_seq, Domain::target,
              model.align_cfg);
          dpa_terms.push_back(
              dpa_loss(dec_scores, art.dec_prompt_rows, model.align_cfg));
        }
      }

      ad::Var l_sup = mean_of(std::move(sup_losses));
      ad::Var l_unsup = mean_of(std::move(unsup_losses));
      ad::Var l_epa = mean_of(std::move(epa_terms));
      ad::Var l_dpa = mean_of(std::move(dpa_terms));
      ad::Var total = ad::add(
          ad::add(ad::scale(l_sup, lambda_s), ad::scale(l_unsup, lambda_us)),
          ad::add(ad::scale(l_epa, lambda_epa), ad::scale(l_dpa, lambda_dpa)));
      if (!std::isfinite(total->value[0])) {
        write_diagnostic(paths.out_dir, "nan_loss", epoch, gstep);
        throw NumericError("adapt_train: non-finite loss at step " +
                           std::to_string(gstep));
      }
      ad::backward(total);
      adam.step({{base_group, cur_lr_base}, {prompt_group, cur_lr_prompt}});
      ema_update(teacher_state, shadowed_params());

      sum_total += total->value[0];
      sum_sup += l_sup->value[0];
      sum_unsup += l_unsup->value[0];
      sum_epa += l_epa->value[0];
      sum_dpa += l_dpa->value[0];
      ++n_batches;
      ++gstep;
    }

    json rec;
    rec["format_version"] = 1;
    rec["stage"] = "adapt";
    rec["epoch"] = epoch;
    rec["lr_base"] = cur_lr_base;
    rec["lr_prompt"] = cur_lr_prompt;
    const double nb = n_batches ? static_cast<double>(n_batches) : 1.0;
    rec["loss_total"] = sum_total / nb;
    rec["loss_sup"] = sum_sup / nb;
    rec["loss_unsup"] = sum_unsup / nb;
    rec["loss_epa"] = sum_epa / nb;
    rec["loss_dpa"] = sum_dpa / nb;
    rec["lambda"] = {{"s", lambda_s},
                     {"us", lambda_us},
                     {"epa", lambda_epa},
                     {"dpa", lambda_dpa}};
    rec["param_overhead"] = overhead;
    rec["selection_histogram"] = histograms.to_json();
    if (val) {
      const EvalSummary ev = evaluate_map(
          model, *val, Domain::target, config.get_double("eval.iou"),
          config.get_double("eval.score_threshold"));
      rec["map50"] = ev.result.map;
      json per_class = json::object();
      for (const auto& [cls, ap] : ev.result.ap_per_class)
        per_class[std::to_string(cls)] = ap;
      rec["map_per_class"] = per_class;
    }
    rec["wall_clock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    append_json_line(metrics_path, rec);

    Checkpoint ck = assemble_checkpoint(
        model, adam, &teacher_state,
        {{"source_data", src_iter.rng_state()},
         {"target_data", tgt_iter.rng_state()},
         {"strategy", strategy_rng.state()},
         {"teacher_strategy", teacher_strategy_rng.state()}},
        "adapt", epoch + 1, gstep);
    save_checkpoint(ck, ckpt_path);
  }
  return ckpt_path;
}

EvalSummary evaluate_map(const ModelBundle& model, const LoadedDataset& dataset,
                         Domain pools_domain, double iou_threshold,
                         double score_threshold) {
  ad::NoGradGuard no_grad;
  std::vector<EvalDetection> detections;
  std::vector<EvalGroundTruth> gts;
  for (const Sample& s : dataset.samples) {
    ForwardArtifacts art = forward_image(model, s.image, pools_domain, nullptr);
    for (const RawDetection& det :
         postprocess(art.output.class_logits->value, art.output.boxes->value,
                     score_threshold)) {
      EvalDetection d;
      d.image_id = s.image_id;
      d.label = det.label;
      d.score = det.score;
      d.box = det.box;
      detections.push_back(d);
    }
    for (std::size_t g = 0; g < s.labels.size(); ++g) {
      EvalGroundTruth gt;
      gt.image_id = s.image_id;
      gt.label = s.labels[g];
      for (int k = 0; k < 4; ++k) gt.box[k] = s.boxes.at2(g, k);
      gts.push_back(gt);
    }
  }
  EvalSummary summary;
  summary.images = dataset.samples.size();
  summary.result = evaluate_detections(detections, gts, iou_threshold);
  return summary;
}

namespace {

ModelBundle model_from_checkpoint(const Checkpoint& ck) {
  const Config config = Config::from_text(ck.config_text);
  ModelBundle model = build_model(config, ckpt_has_prefix(ck, "pdm/"),
                                  ckpt_has_prefix(ck, "pma/"));
  restore_parameters(model, ck, false);
  return model;
}

}  // namespace

EvalSummary evaluate_map(const std::string& ckpt_path,
                         const std::string& domain_dir, Domain pools_domain,
                         double iou_threshold, double score_threshold) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  ModelBundle model = model_from_checkpoint(ck);
  const LoadedDataset dataset = load_dataset(
      load_annotations((fs::path(domain_dir) / "annotations.json").string()),
      true);
  return evaluate_map(model, dataset, pools_domain, iou_threshold,
                      score_threshold);
}

void export_features(const std::string& ckpt_path,
                     const std::string& source_dir,
                     const std::string& target_dir, FeatureLayer layer,
                     const std::string& out_path) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  ModelBundle model = model_from_checkpoint(ck);

  json header;
  header["format_version"] = 1;
  header["layer"] = layer == FeatureLayer::encoder_mean ? "encoder_mean"
                                                        : "decoder_queries";
  std::vector<json> records;
  std::size_t dim = 0;

  ad::NoGradGuard no_grad;
  for (Domain domain : {Domain::source, Domain::target}) {
    const std::string dir =
        domain == Domain::source ? source_dir : target_dir;
    const LoadedDataset ds = load_dataset(
        load_annotations((fs::path(dir) / "annotations.json").string()), true);
    for (const Sample& s : ds.samples) {
      ForwardArtifacts art = forward_image(model, s.image, domain, nullptr);
      if (layer == FeatureLayer::encoder_mean) {
        // Mean over the image-token rows (prompt prefix rows excluded so the
        // probe sees comparable features across models).
        const Tensor& mem = art.encoder_out->value;
        const std::size_t t0 = art.enc_boundary, t1 = mem.rows();
        dim = mem.cols();
        std::vector<double> mean(dim, 0.0);
        for (std::size_t r = t0; r < t1; ++r)
          for (std::size_t c = 0; c < dim; ++c)
            mean[c] += mem.at2(r, c) / static_cast<double>(t1 - t0);
        json rec;
        rec["domain"] = domain_name(domain);
        rec["label"] = nullptr;
        rec["values"] = mean;
        records.push_back(std::move(rec));
      } else {
        // Instance-level: confident query slots with their predicted label.
        const Tensor& slots = art.decoder_slots->value;
        dim = slots.cols();
        const Tensor probs = softmax_of(art.output.class_logits->value);
        for (std::size_t q = 0; q < model.dcfg.num_queries; ++q) {
          int best = 0;
          double best_p = probs.at2(q, 0);
          for (std::size_t c = 1; c + 1 < probs.cols(); ++c)
            if (probs.at2(q, c) > best_p) {
              best_p = probs.at2(q, c);
              best = static_cast<int>(c);
            }
          if (best_p <= 0.5) continue;
          std::vector<double> values(dim);
          for (std::size_t c = 0; c < dim; ++c) values[c] = slots.at2(q, c);
          json rec;
          rec["domain"] = domain_name(domain);
          rec["label"] = best;
          rec["values"] = values;
          records.push_back(std::move(rec));
        }
      }
    }
  }

  header["count"] = records.size();
  header["dim"] = dim;
  std::ofstream out(out_path);
  if (!out) throw IoError("export_features: cannot open " + out_path);
  out << header.dump() << "\n";
  for (const auto& rec : records) out << rec.dump() << "\n";
}

FeatureDump load_feature_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_feature_dump: missing file " + path);
  std::string line;
  if (!std::getline(in, line))
    throw ParseError("load_feature_dump: empty file " + path);
  json header = json::parse(line);
  if (header.at("format_version").get<int>() != 1)
    throw ParseError("load_feature_dump: unsupported format_version");

  FeatureDump dump;
  dump.dim = header.at("dim").get<int>();
  dump.layer = header.at("layer").get<std::string>();

  std::vector<std::vector<double>> src, tgt;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    auto values = rec.at("values").get<std::vector<double>>();
    if (static_cast<int>(values.size()) != dump.dim)
      throw ParseError("load_feature_dump: record dimension mismatch");
    if (rec.at("domain").get<std::string>() == "source")
      src.push_back(std::move(values));
    else
      tgt.push_back(std::move(values));
  }
  const std::size_t d = static_cast<std::size_t>(dump.dim);
  dump.source = Tensor({src.size(), d});
  for (std::size_t i = 0; i < src.size(); ++i)
    std::copy(src[i].begin(), src[i].end(), dump.source.data() + i * d);
  dump.target = Tensor({tgt.size(), d});
  for (std::size_t i = 0; i < tgt.size(); ++i)
    std::copy(tgt[i].begin(), tgt[i].end(), dump.target.data() + i * d);
  return dump;
}

void run_probe(const std::string& dump_source_only,
               const std::string& dump_adapted, const std::string& out_path,
               int n_seeds, int epochs) {
  std::ofstream out(out_path);
  if (!out) throw IoError("run_probe: cannot open " + out_path);
  const std::pair<const char*, std::string> dumps[2] = {
      {"source_only", dump_source_only}, {"adapted", dump_adapted}};
  for (const auto& [label, path] : dumps) {
    const FeatureDump dump = load_feature_dump(path);
    const UnifiedDataset unified =
        build_unified_dataset(dump.source, dump.target);
    for (int seed = 0; seed < n_seeds; ++seed) {
      const DomainDiscriminator clf =
          train_domain_classifier(unified, epochs, 1000 + seed);
      const DivergenceEstimate est = estimate_divergence(clf, unified);
      json rec;
      rec["format_version"] = 1;
      rec["model"] = label;
      rec["seed"] = seed;
      rec["eps_source"] = est.eps_source;
      rec["eps_target"] = est.eps_target;
      rec["d_h"] = est.d_h;
      rec["accuracy"] = est.accuracy;
      out << rec.dump() << "\n";
    }
  }
}

namespace {

double adapted_target_map(const Config& config, const RunPaths& paths,
                          const std::string& adapt_ckpt) {
  const std::string val_root =
      paths.val_root.empty() ? paths.data_root : paths.val_root;
  const EvalSummary ev = evaluate_map(
      adapt_ckpt, (fs::path(val_root) / "target").string(), Domain::target,
      config.get_double("eval.iou"), config.get_double("eval.score_threshold"));
  return ev.result.map;
}

}  // namespace

void sweep_memory_size(const Config& config, const std::vector<int>& sizes,
                       const RunPaths& paths, const std::string& burn_in_ckpt,
                       const std::string& report_path) {
  if (sizes.empty()) throw ConfigError("sweep_memory_size: no sizes given");
  for (int size : sizes) {
    Config cfg = config;
    cfg.set("pdm.N", std::to_string(size));
    RunPaths sub = paths;
    sub.out_dir =
        (fs::path(paths.out_dir) / ("sweep_N" + std::to_string(size))).string();
    const std::string ckpt = adapt_train(cfg, sub, burn_in_ckpt);
    json rec;
    rec["format_version"] = 1;
    rec["memory_size"] = size;
    rec["target_map"] = adapted_target_map(cfg, paths, ckpt);
    rec["seeds"] = {config.get_i64("train.seed")};
    append_json_line(report_path, rec);
  }
}

void compare_selection_strategies(const Config& config,
                                  const std::vector<std::string>& strategies,
                                  const RunPaths& paths,
                                  const std::string& burn_in_ckpt,
                                  const std::string& report_path) {
  if (strategies.empty())
    throw ConfigError("compare_selection_strategies: no strategies given");
  for (const std::string& strategy : strategies) {
    strategy_from_name(strategy);  // validate early
    Config cfg = config;
    cfg.set("pdm.strategy", strategy);
    RunPaths sub = paths;
    sub.out_dir = (fs::path(paths.out_dir) / ("strategy_" + strategy)).string();
    const std::string ckpt = adapt_train(cfg, sub, burn_in_ckpt);
    json rec;
    rec["format_version"] = 1;
    rec["strategy"] = strategy;
    rec["target_map"] = adapted_target_map(cfg, paths, ckpt);
    rec["seeds"] = {config.get_i64("train.seed")};
    append_json_line(report_path, rec);
  }
}

}  // namespace pmdet
