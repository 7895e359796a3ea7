#include "pmdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "pmdet/common.hpp"

namespace pmdet {

namespace fs = std::filesystem;
using nlohmann::json;

CorruptionKind corruption_from_name(const std::string& name) {
  if (name == "none") return CorruptionKind::none;
  if (name == "fog") return CorruptionKind::fog;
  if (name == "blur") return CorruptionKind::blur;
  if (name == "color_shift") return CorruptionKind::color_shift;
  throw ConfigError("unknown corruption: " + name);
}

const char* corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::fog: return "fog";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::color_shift: return "color_shift";
  }
  return "?";
}

namespace {

// One color family per class (red-ish discs, green-ish squares, blue-ish
// triangles) with per-object jitter. Classes are separable by both hue and
// shape, which keeps the mAP signal strong at this model scale; all values
// stay below the fog veil so corruption still raises luminance.
const std::array<std::array<int, 3>, 3> kClassColor = {{{190, 60, 55},
                                                        {60, 180, 70},
                                                        {70, 90, 200}}};

double box_iou_xywh(const std::array<double, 4>& a,
                    const std::array<double, 4>& b) {
  const double ix0 = std::max(a[0], b[0]);
  const double iy0 = std::max(a[1], b[1]);
  const double ix1 = std::min(a[0] + a[2], b[0] + b[2]);
  const double iy1 = std::min(a[1] + a[3], b[1] + b[3]);
  const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace

Scene render_scene(const SceneSpec& spec, RngStream& rng, int image_id) {
  if (spec.height < 16 || spec.width < 16)
    throw ConfigError("render_scene: canvas too small");
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects)
    throw ConfigError("render_scene: bad object count range");

  Scene scene;
  scene.image.height = spec.height;
  scene.image.width = spec.width;
  scene.image.pixels.resize(static_cast<std::size_t>(3) * spec.height *
                            spec.width);

  // Dark-ish background with mild per-pixel noise; kept well below the fog
  // veil so corruption strength raises luminance monotonically.
  int base[3];
  for (int c = 0; c < 3; ++c)
    base[c] = 30 + static_cast<int>(rng.uniform_int(61));
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int noise = static_cast<int>(rng.uniform_int(17)) - 8;
        scene.image.at(y, x, c) = static_cast<std::uint8_t>(
            std::clamp(base[c] + noise, 0, 255));
      }

  const int count =
      spec.min_objects +
      static_cast<int>(rng.uniform_int(spec.max_objects - spec.min_objects + 1));
  int next_ann_id = 0;
  for (int obj = 0; obj < count; ++obj) {
    const int cls = static_cast<int>(rng.uniform_int(spec.num_classes));
    const auto& base_color = kClassColor[cls % kClassColor.size()];
    std::array<int, 3> color{};
    for (int c = 0; c < 3; ++c)
      color[c] = std::clamp(
          base_color[c] + static_cast<int>(rng.uniform_int(41)) - 20, 0, 215);
    const int r = 7 + static_cast<int>(rng.uniform_int(8));  // half extent

    std::array<double, 4> bbox{};
    int cx = 0, cy = 0;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
      cx = r + static_cast<int>(rng.uniform_int(spec.width - 2 * r));
      cy = r + static_cast<int>(rng.uniform_int(spec.height - 2 * r));
      bbox = {static_cast<double>(cx - r), static_cast<double>(cy - r),
              static_cast<double>(2 * r), static_cast<double>(2 * r)};
      placed = true;
      for (const auto& prev : scene.annotations)
        if (box_iou_xywh(bbox, prev.bbox) > 0.25) placed = false;
    }
    if (!placed) continue;

    for (int y = cy - r; y <= cy + r; ++y) {
      for (int x = cx - r; x <= cx + r; ++x) {
        if (y < 0 || y >= spec.height || x < 0 || x >= spec.width) continue;
        bool inside = false;
        switch (cls) {
          case 0:  // disc
            inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
            break;
          case 1:  // square
            inside = true;
            break;
          default: {  // upward triangle
            const double t =
                static_cast<double>(y - (cy - r)) / static_cast<double>(2 * r);
            inside = std::abs(x - cx) <= t * r;
            break;
          }
        }
        if (inside)
          for (int c = 0; c < 3; ++c)
            scene.image.at(y, x, c) = static_cast<std::uint8_t>(color[c]);
      }
    }

    AnnotationRecord ann;
    ann.id = next_ann_id++;
    ann.image_id = image_id;
    ann.category_id = cls;
    ann.bbox = bbox;
    scene.annotations.push_back(ann);
  }
  return scene;
}

void apply_corruption(Image8& image, CorruptionKind kind, double strength) {
  if (strength < 0.0 || strength > 1.0)
    throw ConfigError("apply_corruption: strength must lie in [0, 1]");
  if (kind == CorruptionKind::none || strength == 0.0) return;

  const int h = image.height, w = image.width;
  switch (kind) {
    case CorruptionKind::fog: {
      // Convex blend toward a light gray veil; the depth proxy grows with
      // distance from the image bottom.
      const double veil = 220.0;
      for (int y = 0; y < h; ++y) {
        const double depth =
            static_cast<double>(h - 1 - y) / static_cast<double>(h - 1);
        const double beta = strength * (0.3 + 0.7 * depth);
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) {
            const double v =
                (1.0 - beta) * image.at(y, x, c) + beta * veil;
            image.at(y, x, c) = static_cast<std::uint8_t>(std::lround(
                std::clamp(v, 0.0, 255.0)));
          }
      }
      break;
    }
    case CorruptionKind::blur: {
      const int radius = std::max(1, static_cast<int>(std::lround(3 * strength)));
      Image8 src = image;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) {
            int sum = 0, cnt = 0;
            for (int dy = -radius; dy <= radius; ++dy)
              for (int dx = -radius; dx <= radius; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                sum += src.at(yy, xx, c);
                ++cnt;
              }
            image.at(y, x, c) = static_cast<std::uint8_t>(sum / cnt);
          }
      break;
    }
    case CorruptionKind::color_shift: {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double r = image.at(y, x, 0), g = image.at(y, x, 1),
                       b = image.at(y, x, 2);
          image.at(y, x, 0) = static_cast<std::uint8_t>(
              std::lround((1.0 - strength) * r + strength * g));
          image.at(y, x, 1) = static_cast<std::uint8_t>(
              std::lround((1.0 - strength) * g + strength * b));
          image.at(y, x, 2) = static_cast<std::uint8_t>(
              std::lround((1.0 - strength) * b + strength * r));
        }
      break;
    }
    case CorruptionKind::none:
      break;
  }
}

namespace {

Manifest generate_domain(const SceneSpec& spec, int n, std::uint64_t seed,
                         const std::string& domain_dir, bool corrupt) {
  fs::create_directories(fs::path(domain_dir) / "images");
  Manifest manifest;
  manifest.root_dir = domain_dir;
  manifest.categories = {"disc", "square", "triangle"};
  manifest.categories.resize(spec.num_classes,
                             "class");  // names beyond 3 are generic
  for (int c = 3; c < spec.num_classes; ++c)
    manifest.categories[c] = "class" + std::to_string(c);

  RngStream rng(seed);
  int next_ann = 0;
  for (int i = 0; i < n; ++i) {
    Scene scene = render_scene(spec, rng, i);
    if (corrupt) apply_corruption(scene.image, spec.corruption, spec.strength);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
    write_ppm((fs::path(domain_dir) / "images" / name).string(), scene.image);

    ImageRecordMeta meta;
    meta.id = i;
    meta.file_name = name;
    meta.width = spec.width;
    meta.height = spec.height;
    manifest.images.push_back(meta);
    for (AnnotationRecord ann : scene.annotations) {
      ann.id = next_ann++;
      manifest.annotations.push_back(ann);
    }
  }
  save_manifest(manifest,
                (fs::path(domain_dir) / "annotations.json").string());
  return manifest;
}

}  // namespace

std::pair<Manifest, Manifest> generate_domain_pair(
    const SceneSpec& spec, int n_source, int n_target, std::uint64_t seed,
    const std::string& out_root) {
  if (n_source < 1 || n_target < 1)
    throw ConfigError("generate_domain_pair: sample counts must be positive");
  RngStream seeder(seed);
  const std::uint64_t source_seed = seeder.next_u64();
  const std::uint64_t target_seed = seeder.next_u64();
  Manifest source =
      generate_domain(spec, n_source, source_seed,
                      (fs::path(out_root) / "source").string(), false);
  Manifest target =
      generate_domain(spec, n_target, target_seed,
                      (fs::path(out_root) / "target").string(), true);
  return {std::move(source), std::move(target)};
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  json doc;
  doc["format_version"] = manifest.format_version;
  doc["images"] = json::array();
  for (const auto& img : manifest.images)
    doc["images"].push_back({{"id", img.id},
                             {"file_name", img.file_name},
                             {"width", img.width},
                             {"height", img.height}});
  doc["annotations"] = json::array();
  for (const auto& ann : manifest.annotations)
    doc["annotations"].push_back(
        {{"id", ann.id},
         {"image_id", ann.image_id},
         {"category_id", ann.category_id},
         {"bbox", {ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]}}});
  doc["categories"] = json::array();
  for (std::size_t c = 0; c < manifest.categories.size(); ++c)
    doc["categories"].push_back(
        {{"id", static_cast<int>(c)}, {"name", manifest.categories[c]}});

  std::ofstream out(path);
  if (!out) throw IoError("save_manifest: cannot open " + path);
  out << doc.dump(2) << "\n";
}

Manifest load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_annotations: missing file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError(std::string("load_annotations: invalid JSON: ") +
                     e.what());
  }

  auto require = [&](const json& node, const char* field) -> const json& {
    if (!node.contains(field))
      throw ParseError(std::string("load_annotations: missing field '") +
                       field + "'");
    return node.at(field);
  };

  Manifest manifest;
  manifest.root_dir = fs::path(path).parent_path().string();
  manifest.format_version = require(doc, "format_version").get<int>();
  if (manifest.format_version != 1)
    throw ParseError("load_annotations: unsupported format_version");

  std::set<int> image_ids;
  for (const auto& img : require(doc, "images")) {
    ImageRecordMeta meta;
    meta.id = require(img, "id").get<int>();
    meta.file_name = require(img, "file_name").get<std::string>();
    meta.width = require(img, "width").get<int>();
    meta.height = require(img, "height").get<int>();
    if (!image_ids.insert(meta.id).second)
      throw ParseError("load_annotations: duplicate image id " +
                       std::to_string(meta.id));
    manifest.images.push_back(meta);
  }
  for (const auto& cat : require(doc, "categories"))
    manifest.categories.push_back(require(cat, "name").get<std::string>());

  for (const auto& ann : require(doc, "annotations")) {
    AnnotationRecord rec;
    rec.id = require(ann, "id").get<int>();
    rec.image_id = require(ann, "image_id").get<int>();
    rec.category_id = require(ann, "category_id").get<int>();
    const auto& bbox = require(ann, "bbox");
    if (!bbox.is_array() || bbox.size() != 4)
      throw ParseError("load_annotations: field 'bbox' must have 4 entries");
    for (int k = 0; k < 4; ++k) rec.bbox[k] = bbox[k].get<double>();
    if (!image_ids.count(rec.image_id))
      throw ParseError(
          "load_annotations: field 'image_id' references unknown image " +
          std::to_string(rec.image_id));
    if (rec.category_id < 0 ||
        rec.category_id >= static_cast<int>(manifest.categories.size()))
      throw ParseError("load_annotations: field 'category_id' out of range");
    manifest.annotations.push_back(rec);
  }
  return manifest;
}

LoadedDataset load_dataset(const Manifest& manifest,
                           bool include_annotations) {
  LoadedDataset ds;
  ds.num_classes = static_cast<int>(manifest.categories.size());
  for (const auto& meta : manifest.images) {
    Image8 img = read_ppm(
        (fs::path(manifest.root_dir) / "images" / meta.file_name).string());
    Sample sample;
    sample.image_id = meta.id;
    sample.image = Tensor({3, static_cast<std::size_t>(img.height),
                           static_cast<std::size_t>(img.width)});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          sample.image[(c * img.height + y) * img.width + x] =
              img.at(y, x, c) / 255.0;
    ds.height = img.height;
    ds.width = img.width;

    if (include_annotations) {
      std::vector<const AnnotationRecord*> anns;
      for (const auto& ann : manifest.annotations)
        if (ann.image_id == meta.id) anns.push_back(&ann);
      sample.boxes = Tensor({anns.size(), 4});
      for (std::size_t i = 0; i < anns.size(); ++i) {
        const auto& b = anns[i]->bbox;
        sample.labels.push_back(anns[i]->category_id);
        sample.boxes.at2(i, 0) = (b[0] + b[2] / 2.0) / meta.width;
        sample.boxes.at2(i, 1) = (b[1] + b[3] / 2.0) / meta.height;
        sample.boxes.at2(i, 2) = b[2] / meta.width;
        sample.boxes.at2(i, 3) = b[3] / meta.height;
      }
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

BatchIterator::BatchIterator(const LoadedDataset& dataset, int batch_size,
                             std::uint64_t seed, bool shuffle)
    : dataset_(&dataset),
      batch_size_(batch_size),
      shuffle_(shuffle),
      rng_(seed) {
  if (batch_size_ < 1) throw ConfigError("batch_iterator: batch size >= 1");
  order_.resize(dataset.samples.size());
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

void BatchIterator::reshuffle() {
  if (!shuffle_) return;
  for (std::size_t i = order_.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_.uniform_int(i));
    std::swap(order_[i - 1], order_[j]);
  }
}

bool BatchIterator::next(std::vector<const Sample*>& batch) {
  batch.clear();
  if (cursor_ >= order_.size()) return false;
  const std::size_t end =
      std::min(cursor_ + static_cast<std::size_t>(batch_size_), order_.size());
  for (std::size_t i = cursor_; i < end; ++i)
    batch.push_back(&dataset_->samples[order_[i]]);
  cursor_ = end;
  return true;
}

void BatchIterator::reset() {
  cursor_ = 0;
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

}  // namespace pmdet
