#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pmdet/image_io.hpp"
#include "pmdet/rng.hpp"
#include "pmdet/tensor.hpp"

namespace pmdet {

// Synthetic two-domain detection benchmark: clean scenes of colored shapes
// as the source, the same scene distribution under a pixel corruption as the
// target. Target annotations are written to disk for evaluation only.

enum class CorruptionKind { none, fog, blur, color_shift };
CorruptionKind corruption_from_name(const std::string& name);
const char* corruption_name(CorruptionKind kind);

struct SceneSpec {
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 4;
  int num_classes = 3;  // disc, square, triangle
  CorruptionKind corruption = CorruptionKind::fog;
  double strength = 0.6;  // in [0, 1]
};

struct AnnotationRecord {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  std::array<double, 4> bbox{};  // absolute (x, y, w, h) pixels
};

struct ImageRecordMeta {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct Manifest {
  int format_version = 1;
  std::vector<ImageRecordMeta> images;
  std::vector<AnnotationRecord> annotations;
  std::vector<std::string> categories;
  std::string root_dir;  // directory holding images/ and annotations.json
};

// Renders one scene and its annotations (before corruption).
struct Scene {
  Image8 image;
  std::vector<AnnotationRecord> annotations;
};
Scene render_scene(const SceneSpec& spec, RngStream& rng, int image_id);

// Applies the spec's corruption in place; strength 0 is the identity.
void apply_corruption(Image8& image, CorruptionKind kind, double strength);

// Writes <out_root>/{source,target}/{images,annotations.json}. Source images
// stay clean; target images are corrupted. Returns the two manifests.
std::pair<Manifest, Manifest> generate_domain_pair(const SceneSpec& spec,
                                                   int n_source, int n_target,
                                                   std::uint64_t seed,
                                                   const std::string& out_root);

void save_manifest(const Manifest& manifest, const std::string& path);
Manifest load_annotations(const std::string& path);

// An in-memory dataset: images normalized to [0, 1] doubles, boxes
// normalized to (cx, cy, w, h). When include_annotations is false the
// samples carry no labels (the unlabeled target training stream).
struct Sample {
  int image_id = 0;
  Tensor image;             // (3, H, W) in [0, 1]
  std::vector<int> labels;  // class ids
  Tensor boxes;             // (G, 4) normalized (cx, cy, w, h)
};

struct LoadedDataset {
  std::vector<Sample> samples;
  int height = 0, width = 0;
  int num_classes = 0;
};

LoadedDataset load_dataset(const Manifest& manifest,
                           bool include_annotations = true);

// Deterministic batched iteration; the final partial batch is emitted.
class BatchIterator {
 public:
  BatchIterator(const LoadedDataset& dataset, int batch_size,
                std::uint64_t seed, bool shuffle);

  bool next(std::vector<const Sample*>& batch);
  void reset();
  std::size_t batches_per_epoch() const;

  std::string rng_state() const { return rng_.state(); }
  void set_rng_state(const std::string& s) { rng_.set_state(s); }

 private:
  const LoadedDataset* dataset_;
  int batch_size_;
  bool shuffle_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  void reshuffle();
};

}  // namespace pmdet
