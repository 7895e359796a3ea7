#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pmdet/common.hpp"
#include "pmdet/data.hpp"

using namespace pmdet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("pmdet_test_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

double mean_luminance(const Image8& img) {
  double sum = 0.0;
  for (std::uint8_t v : img.pixels) sum += v;
  return sum / static_cast<double>(img.pixels.size());
}

SceneSpec default_spec() {
  SceneSpec spec;
  spec.height = spec.width = 64;
  return spec;
}

}  // namespace

TEST_CASE("scene rendering stays in bounds and annotates tightly") {
  SceneSpec spec = default_spec();
  RngStream rng(1);
  for (int i = 0; i < 20; ++i) {
    Scene scene = render_scene(spec, rng, i);
    CHECK(scene.annotations.size() <= 4);
    for (const auto& ann : scene.annotations) {
      CHECK(ann.bbox[0] >= 0);
      CHECK(ann.bbox[1] >= 0);
      CHECK(ann.bbox[0] + ann.bbox[2] <= spec.width);
      CHECK(ann.bbox[1] + ann.bbox[3] <= spec.height);
      CHECK(ann.category_id >= 0);
      CHECK(ann.category_id < 3);
    }
  }
}

TEST_CASE("corruption strength 0 is the bit-exact identity") {
  SceneSpec spec = default_spec();
  RngStream rng(3);
  Scene scene = render_scene(spec, rng, 0);
  Image8 copy = scene.image;
  apply_corruption(copy, CorruptionKind::fog, 0.0);
  CHECK(copy.pixels == scene.image.pixels);
  apply_corruption(copy, CorruptionKind::none, 0.7);
  CHECK(copy.pixels == scene.image.pixels);
}

TEST_CASE("fog raises mean luminance monotonically with strength") {
  SceneSpec spec = default_spec();
  RngStream rng(5);
  Scene scene = render_scene(spec, rng, 0);
  double prev = mean_luminance(scene.image);
  for (double strength : {0.25, 0.5, 0.75, 1.0}) {
    Image8 copy = scene.image;
    apply_corruption(copy, CorruptionKind::fog, strength);
    const double lum = mean_luminance(copy);
    CHECK(lum > prev);
    prev = lum;
  }
}

TEST_CASE("generated datasets are deterministic and annotated correctly") {
  TempDir dir("gen");
  SceneSpec spec = default_spec();
  auto [src, tgt] = generate_domain_pair(spec, 6, 5, 42, dir.path.string());
  CHECK(src.images.size() == 6);
  CHECK(tgt.images.size() == 5);

  // byte-identical rerun
  TempDir dir2("gen2");
  generate_domain_pair(spec, 6, 5, 42, dir2.path.string());
  for (const auto& img : src.images) {
    std::ifstream a(dir.path / "source" / "images" / img.file_name,
                    std::ios::binary);
    std::ifstream b(dir2.path / "source" / "images" / img.file_name,
                    std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)),
                   std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)),
                   std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }

  // target annotations exist on disk (for evaluation only)
  CHECK(fs::exists(dir.path / "target" / "annotations.json"));

  // loader round-trip, referential integrity preserved
  Manifest loaded =
      load_annotations((dir.path / "source" / "annotations.json").string());
  CHECK(loaded.images.size() == 6);
  CHECK(loaded.categories.size() == 3);
  CHECK(loaded.annotations.size() == src.annotations.size());

  // normalized boxes round-trip through denormalization within 0.5 px
  LoadedDataset ds = load_dataset(loaded, true);
  std::size_t checked = 0;
  for (const auto& sample : ds.samples) {
    for (std::size_t g = 0; g < sample.labels.size(); ++g) {
      const double cx = sample.boxes.at2(g, 0) * 64;
      const double cy = sample.boxes.at2(g, 1) * 64;
      const double w = sample.boxes.at2(g, 2) * 64;
      const double h = sample.boxes.at2(g, 3) * 64;
      bool matched = false;
      for (const auto& ann : loaded.annotations) {
        if (ann.image_id != sample.image_id) continue;
        if (std::fabs(ann.bbox[0] + ann.bbox[2] / 2 - cx) < 0.5 &&
            std::fabs(ann.bbox[1] + ann.bbox[3] / 2 - cy) < 0.5 &&
            std::fabs(ann.bbox[2] - w) < 0.5 && std::fabs(ann.bbox[3] - h) < 0.5)
          matched = true;
      }
      CHECK(matched);
      ++checked;
    }
  }
  CHECK(checked > 0);

  // the unlabeled view strips annotation payloads
  LoadedDataset unlabeled = load_dataset(loaded, false);
  for (const auto& sample : unlabeled.samples) {
    CHECK(sample.labels.empty());
    CHECK(sample.boxes.size() == 0);
  }
}

TEST_CASE("load_annotations: missing file and schema violations") {
  CHECK_THROWS_AS(load_annotations("/nonexistent/annotations.json"), IoError);

  TempDir dir("schema");
  // well-formed minimal file: 1 image, 1 box
  {
    std::ofstream out(dir.path / "ok.json");
    out << R"({"format_version":1,
      "images":[{"id":0,"file_name":"a.ppm","width":8,"height":8}],
      "annotations":[{"id":0,"image_id":0,"category_id":0,"bbox":[1,1,3,3]}],
      "categories":[{"id":0,"name":"disc"}]})";
  }
  Manifest ok = load_annotations((dir.path / "ok.json").string());
  CHECK(ok.images.size() == 1);
  CHECK(ok.annotations.size() == 1);

  // empty annotation list is a valid manifest with zero boxes
  {
    std::ofstream out(dir.path / "empty.json");
    out << R"({"format_version":1,
      "images":[{"id":0,"file_name":"a.ppm","width":8,"height":8}],
      "annotations":[],
      "categories":[{"id":0,"name":"disc"}]})";
  }
  CHECK(load_annotations((dir.path / "empty.json").string())
            .annotations.empty());

  // annotation referencing an unknown image id
  {
    std::ofstream out(dir.path / "dangling.json");
    out << R"({"format_version":1,
      "images":[{"id":0,"file_name":"a.ppm","width":8,"height":8}],
      "annotations":[{"id":0,"image_id":9,"category_id":0,"bbox":[1,1,3,3]}],
      "categories":[{"id":0,"name":"disc"}]})";
  }
  CHECK_THROWS_AS(load_annotations((dir.path / "dangling.json").string()),
                  ParseError);

  // missing field is named in the error
  {
    std::ofstream out(dir.path / "missing.json");
    out << R"({"format_version":1,
      "images":[{"id":0,"width":8,"height":8}],
      "annotations":[],"categories":[]})";
  }
  try {
    load_annotations((dir.path / "missing.json").string());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("file_name") != std::string::npos);
  }
}

TEST_CASE("batch iterator: partition arithmetic, order, determinism") {
  TempDir dir("batch");
  SceneSpec spec = default_spec();
  auto [src, tgt] = generate_domain_pair(spec, 10, 2, 7, dir.path.string());
  LoadedDataset ds = load_dataset(src, true);

  // 10 images, batch 4 -> sizes 4, 4, 2
  BatchIterator it(ds, 4, 1, false);
  CHECK(it.batches_per_epoch() == 3);
  std::vector<const Sample*> batch;
  std::vector<std::size_t> sizes;
  while (it.next(batch)) sizes.push_back(batch.size());
  CHECK(sizes == std::vector<std::size_t>{4, 4, 2});

  // shuffle off preserves manifest order
  it.reset();
  it.next(batch);
  CHECK(batch[0]->image_id == 0);
  CHECK(batch[3]->image_id == 3);

  // same seed, shuffle on: identical order across instances
  BatchIterator s1(ds, 4, 99, true), s2(ds, 4, 99, true);
  std::vector<int> order1, order2;
  while (s1.next(batch))
    for (const Sample* s : batch) order1.push_back(s->image_id);
  while (s2.next(batch))
    for (const Sample* s : batch) order2.push_back(s->image_id);
  CHECK(order1 == order2);
}
