#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pmdet/autodiff.hpp"
#include "pmdet/nn.hpp"
#include "pmdet/rng.hpp"

namespace pmdet {

// Hierarchical prompt domain memory: per level and per domain, a pool of N
// (distribution value, prompt weight) pairs. Values key the distribution
// similarity selection; weights are what gets injected.

enum class Level { input, token, query };
enum class Domain { source, target };

const char* level_name(Level level);
const char* domain_name(Domain domain);
Level level_from_name(const std::string& name);
Domain domain_from_name(const std::string& name);

struct PixelShape {
  int channels = 3;
  int border = 4;  // width of the additive frame, in pixels
};

struct SelectionResult {
  std::vector<int> indices;        // descending similarity
  std::vector<double> similarities;
};

// Read-only view of one (value, weight) pair.
struct PromptEntryView {
  int index = 0;
  const double* value = nullptr;   // length d
  const double* weight = nullptr;  // L*d (token/query) or channels*border_len (input)
  std::size_t weight_size = 0;
};

class PromptPool {
 public:
  // Token/query pools: values (N, d), weights (N*L, d). Input pools: values
  // (N, channels), weights (N, channels*border_len) where border_len is the
  // number of frame pixels for the given image size.
  static PromptPool init_pool(Level level, Domain domain, int n, int length,
                              int dim, std::uint64_t seed, double scale = 0.03,
                              std::optional<PixelShape> pixel_shape = {},
                              int image_h = 0, int image_w = 0);

  Level level() const { return level_; }
  Domain domain() const { return domain_; }
  int size() const { return n_; }
  int length() const { return length_; }
  int dim() const { return dim_; }
  const std::optional<PixelShape>& pixel_shape() const { return pixel_shape_; }
  int image_h() const { return image_h_; }
  int image_w() const { return image_w_; }

  ad::Var values() const { return values_; }
  ad::Var weights() const { return weights_; }
  PromptEntryView entry(int i) const;

  // Number of learnable scalars across values and weights.
  std::size_t parameter_count() const;

  void collect(nn::ParamMap& out_params) const;

  // Flat (h, w) coordinates of the border frame, row-major scan order.
  const std::vector<std::pair<int, int>>& border_coords() const {
    return border_coords_;
  }

 private:
  Level level_ = Level::token;
  Domain domain_ = Domain::source;
  int n_ = 0, length_ = 0, dim_ = 0;
  std::optional<PixelShape> pixel_shape_;
  int image_h_ = 0, image_w_ = 0;
  ad::Var values_;   // (N, d)
  ad::Var weights_;  // (N*L, d) or (N, channels*border_len)
  std::vector<std::pair<int, int>> border_coords_;
};

// Mean over the T rows of a (T, d) embedding; the projection gamma that maps
// an input sequence onto the shape of a distribution value.
Tensor project_input(const Tensor& embedding);

// Cosine similarity; vectors with norm below eps score 0 and leave a warning
// record instead of raising.
double similarity(const double* v, const double* q, std::size_t d,
                  double eps = 1e-12);

// The M entries with the highest cosine similarity between their values and
// project_input(embedding); ties resolved toward the lower index.
SelectionResult select_top_m(const PromptPool& pool, const Tensor& embedding,
                             int m);

// Prepend the selected prompt weights, in selection order, to a token
// matrix. Only token/query pools. Empty selection returns tokens unchanged.
ad::Var inject_tokens(const ad::Var& tokens, const SelectionResult& selection,
                      const PromptPool& pool);

// Average the selected pixel frames and add them on the border of the image;
// interior pixels pass through untouched. Input pools only.
ad::Var inject_input(const ad::Var& image, const SelectionResult& selection,
                     const PromptPool& pool);

std::vector<std::int64_t> selection_histogram(
    const std::vector<SelectionResult>& log, int n);

// Alternative selection strategies for the ablation harness.
struct KMeansIndex {
  Tensor centers;  // (M, d), unit rows
};
KMeansIndex fit_kmeans(const PromptPool& pool, int m, std::uint64_t seed);
SelectionResult select_random(const PromptPool& pool, int m, RngStream& rng);
SelectionResult select_kmeans(const PromptPool& pool, const Tensor& embedding,
                              int m, const KMeansIndex& index);

}  // namespace pmdet
