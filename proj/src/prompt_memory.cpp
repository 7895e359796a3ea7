#include "pmdet/prompt_memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmdet/common.hpp"
#include "pmdet/kernels.hpp"

namespace pmdet {

const char* level_name(Level level) {
  switch (level) {
    case Level::input: return "input";
    case Level::token: return "token";
    case Level::query: return "query";
  }
  return "?";
}

const char* domain_name(Domain domain) {
  return domain == Domain::source ? "source" : "target";
}

Level level_from_name(const std::string& name) {
  if (name == "input") return Level::input;
  if (name == "token") return Level::token;
  if (name == "query") return Level::query;
  throw ConfigError("unknown prompt level: " + name);
}

Domain domain_from_name(const std::string& name) {
  if (name == "source") return Domain::source;
  if (name == "target") return Domain::target;
  throw ConfigError("unknown domain: " + name);
}

PromptPool PromptPool::init_pool(Level level, Domain domain, int n, int length,
                                 int dim, std::uint64_t seed, double scale,
                                 std::optional<PixelShape> pixel_shape,
                                 int image_h, int image_w) {
  if (n < 1 || length < 1 || dim < 1)
    throw ConfigError("init_pool: N, L, d must all be positive");
  PromptPool pool;
  pool.level_ = level;
  pool.domain_ = domain;
  pool.n_ = n;
  pool.length_ = length;
  pool.dim_ = dim;

  const std::string base = std::string("pdm/") + domain_name(domain) + "/" +
                           level_name(level);
  RngStream rng = named_stream(seed, base);

  std::size_t weight_rows, weight_cols;
  if (level == Level::input) {
    if (!pixel_shape.has_value())
      throw ConfigError("init_pool: input level requires a pixel shape");
    if (image_h < 1 || image_w < 1)
      throw ConfigError("init_pool: input level requires the image size");
    const int b = pixel_shape->border;
    if (b < 0 || 2 * b > std::min(image_h, image_w))
      throw ConfigError("init_pool: border width too large for image");
    pool.pixel_shape_ = pixel_shape;
    pool.image_h_ = image_h;
    pool.image_w_ = image_w;
    for (int i = 0; i < image_h; ++i)
      for (int j = 0; j < image_w; ++j)
        if (i < b || i >= image_h - b || j < b || j >= image_w - b)
          pool.border_coords_.emplace_back(i, j);
    weight_rows = static_cast<std::size_t>(n);
    weight_cols = static_cast<std::size_t>(pixel_shape->channels) *
                  pool.border_coords_.size();
    pool.dim_ = pixel_shape->channels;  // values key on mean pixel color
  } else {
    weight_rows = static_cast<std::size_t>(n) * length;
    weight_cols = static_cast<std::size_t>(dim);
  }

  Tensor values({static_cast<std::size_t>(n),
                 static_cast<std::size_t>(pool.dim_)});
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = rng.uniform(-scale, scale);
  Tensor weights({weight_rows, weight_cols});
  for (std::size_t i = 0; i < weights.size(); ++i)
    weights[i] = rng.uniform(-scale, scale);

  pool.values_ = ad::parameter(std::move(values), base + "/value");
  pool.weights_ = ad::parameter(std::move(weights), base + "/weight");
  return pool;
}

PromptEntryView PromptPool::entry(int i) const {
  if (i < 0 || i >= n_) throw DataError("prompt entry index out of range");
  PromptEntryView view;
  view.index = i;
  view.value = values_->value.data() + static_cast<std::size_t>(i) * dim_;
  if (level_ == Level::input) {
    view.weight_size = weights_->value.cols();
    view.weight = weights_->value.data() + i * view.weight_size;
  } else {
    view.weight_size = static_cast<std::size_t>(length_) * dim_;
    view.weight =
        weights_->value.data() + static_cast<std::size_t>(i) * view.weight_size;
  }
  return view;
}

std::size_t PromptPool::parameter_count() const {
  return values_->value.size() + weights_->value.size();
}

void PromptPool::collect(nn::ParamMap& out_params) const {
  out_params[values_->name] = values_;
  out_params[weights_->name] = weights_;
}

Tensor project_input(const Tensor& embedding) {
  const std::size_t rows = embedding.rows(), cols = embedding.cols();
  if (rows == 0 || embedding.size() == 0)
    throw DomainError("project_input: empty embedding");
  Tensor out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[c] += embedding[r * cols + c];
  for (std::size_t c = 0; c < cols; ++c) out[c] /= static_cast<double>(rows);
  return out;
}

double similarity(const double* v, const double* q, std::size_t d,
                  double eps) {
  double vv = 0.0, qq = 0.0, vq = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    vv += v[i] * v[i];
    qq += q[i] * q[i];
    vq += v[i] * q[i];
  }
  if (std::sqrt(vv) < eps || std::sqrt(qq) < eps) {
    warn("similarity: vector norm below epsilon, scoring 0");
    return 0.0;
  }
  return vq / (std::sqrt(vv) * std::sqrt(qq));
}

SelectionResult select_top_m(const PromptPool& pool, const Tensor& embedding,
                             int m) {
  if (m < 1 || m > pool.size())
    throw ConfigError("select_top_m: M must be in [1, N]");
  Tensor query = project_input(embedding);
  if (static_cast<int>(query.size()) != pool.dim())
    throw ConfigError("select_top_m: embedding dimension mismatch");

  std::vector<std::pair<double, int>> scored(pool.size());
  for (int i = 0; i < pool.size(); ++i)
    scored[i] = {similarity(pool.entry(i).value, query.data(), query.size()),
                 i};
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a,
                                                    const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  SelectionResult sel;
  sel.indices.reserve(m);
  sel.similarities.reserve(m);
  for (int i = 0; i < m; ++i) {
    sel.indices.push_back(scored[i].second);
    sel.similarities.push_back(scored[i].first);
  }
  return sel;
}

ad::Var inject_tokens(const ad::Var& tokens, const SelectionResult& selection,
                      const PromptPool& pool) {
  if (pool.level() == Level::input)
    throw ConfigError("inject_tokens: input-level pool cannot prepend tokens");
  if (selection.indices.empty()) return tokens;
  const std::size_t length = static_cast<std::size_t>(pool.length());
  std::vector<ad::Var> parts;
  parts.reserve(selection.indices.size() + 1);
  for (int idx : selection.indices) {
    if (idx < 0 || idx >= pool.size())
      throw DataError("inject_tokens: selection index out of range");
    parts.push_back(
        ad::slice_rows(pool.weights(), idx * length, (idx + 1) * length));
  }
  parts.push_back(tokens);
  return ad::concat_rows(parts);
}

ad::Var inject_input(const ad::Var& image, const SelectionResult& selection,
                     const PromptPool& pool) {
  if (pool.level() != Level::input)
    throw ConfigError("inject_input: pool level is not input");
  if (selection.indices.empty()) return image;
  if (image->value.ndim() != 3 ||
      static_cast<int>(image->value.dim(0)) != pool.pixel_shape()->channels ||
      static_cast<int>(image->value.dim(1)) != pool.image_h() ||
      static_cast<int>(image->value.dim(2)) != pool.image_w())
    throw ConfigError("inject_input: image shape incompatible with pool");
  for (int idx : selection.indices)
    if (idx < 0 || idx >= pool.size())
      throw DataError("inject_input: selection index out of range");

  const auto coords = pool.border_coords();
  const std::size_t channels = image->value.dim(0);
  const std::size_t h = image->value.dim(1), w = image->value.dim(2);
  const double coeff = 1.0 / static_cast<double>(selection.indices.size());
  const std::vector<int> indices = selection.indices;

  Tensor out = image->value;
  const Tensor& frames = pool.weights()->value;
  const std::size_t frame_len = frames.cols();
  for (int idx : indices) {
    const double* frame = frames.data() + idx * frame_len;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < coords.size(); ++p)
        out[(c * h + coords[p].first) * w + coords[p].second] +=
            coeff * frame[c * coords.size() + p];
  }
  return ad::make_node(
      std::move(out), {image, pool.weights()},
      [indices, coords, channels, h, w, coeff, frame_len](ad::Node& self) {
        ad::Node& img = *self.parents[0];
        ad::Node& frames = *self.parents[1];
        if (img.needs_grad)
          kernels::axpy(1.0, self.grad.data(), img.ensure_grad().data(),
                        self.grad.size());
        if (frames.needs_grad) {
          Tensor& gf = frames.ensure_grad();
          for (int idx : indices) {
            double* gframe = gf.data() + idx * frame_len;
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t p = 0; p < coords.size(); ++p)
                gframe[c * coords.size() + p] +=
                    coeff *
                    self.grad[(c * h + coords[p].first) * w + coords[p].second];
          }
        }
      });
}

std::vector<std::int64_t> selection_histogram(
    const std::vector<SelectionResult>& log, int n) {
  std::vector<std::int64_t> counts(n, 0);
  for (const auto& sel : log)
    for (int idx : sel.indices) {
      if (idx < 0 || idx >= n)
        throw DataError("selection_histogram: index out of range");
      ++counts[idx];
    }
  return counts;
}

namespace {

std::vector<double> unit_rows(const Tensor& m) {
  std::vector<double> out(m.size());
  const std::size_t rows = m.rows(), cols = m.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = m[r * cols + c];
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = norm > 1e-12 ? m[r * cols + c] / norm : 0.0;
  }
  return out;
}

}  // namespace

KMeansIndex fit_kmeans(const PromptPool& pool, int m, std::uint64_t seed) {
  if (m < 1 || m > pool.size())
    throw ConfigError("fit_kmeans: M must be in [1, N]");
  const std::size_t n = pool.size();
  const std::size_t d = pool.dim();
  std::vector<double> points = unit_rows(pool.values()->value);

  // Spherical k-means: greedy farthest-point init, then Lloyd iterations
  // with renormalized centroids.
  RngStream rng(seed);
  std::vector<std::size_t> center_ids;
  center_ids.push_back(static_cast<std::size_t>(rng.uniform_int(n)));
  while (center_ids.size() < static_cast<std::size_t>(m)) {
    std::size_t best = 0;
    double best_score = 2.0;
    for (std::size_t i = 0; i < n; ++i) {
      double closest = -2.0;
      for (std::size_t c : center_ids) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          dot += points[i * d + k] * points[c * d + k];
        closest = std::max(closest, dot);
      }
      if (closest < best_score) {
        best_score = closest;
        best = i;
      }
    }
    center_ids.push_back(best);
  }

  KMeansIndex index;
  index.centers = Tensor({static_cast<std::size_t>(m), d});
  for (int c = 0; c < m; ++c)
    for (std::size_t k = 0; k < d; ++k)
      index.centers[c * d + k] = points[center_ids[c] * d + k];

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 20; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best_dot = -2.0;
      int best_c = 0;
      for (int c = 0; c < m; ++c) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          dot += points[i * d + k] * index.centers[c * d + k];
        if (dot > best_dot) {
          best_dot = dot;
          best_c = c;
        }
      }
      assign[i] = best_c;
    }
    Tensor next({static_cast<std::size_t>(m), d});
    std::vector<int> count(m, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      for (std::size_t k = 0; k < d; ++k)
        next[assign[i] * d + k] += points[i * d + k];
    }
    for (int c = 0; c < m; ++c) {
      if (count[c] == 0) continue;  // keep the previous center
      double norm = 0.0;
      for (std::size_t k = 0; k < d; ++k) norm += next[c * d + k] * next[c * d + k];
      norm = std::sqrt(norm);
      if (norm > 1e-12)
        for (std::size_t k = 0; k < d; ++k)
          index.centers[c * d + k] = next[c * d + k] / norm;
    }
  }
  return index;
}

SelectionResult select_random(const PromptPool& pool, int m, RngStream& rng) {
  if (m < 1 || m > pool.size())
    throw ConfigError("select_random: M must be in [1, N]");
  std::vector<int> ids(pool.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(pool.size() - i));
    std::swap(ids[i], ids[j]);
  }
  SelectionResult sel;
  sel.indices.assign(ids.begin(), ids.begin() + m);
  sel.similarities.assign(m, 0.0);
  return sel;
}

SelectionResult select_kmeans(const PromptPool& pool, const Tensor& embedding,
                              int m, const KMeansIndex& index) {
  if (m < 1 || m > pool.size())
    throw ConfigError("select_kmeans: M must be in [1, N]");
  Tensor query = project_input(embedding);
  const std::size_t d = query.size();

  int best_center = 0;
  double best_sim = -2.0;
  for (std::size_t c = 0; c < index.centers.rows(); ++c) {
    const double sim =
        similarity(index.centers.data() + c * d, query.data(), d);
    if (sim > best_sim) {
      best_sim = sim;
      best_center = static_cast<int>(c);
    }
  }
  // Members nearest to the assigned center, most similar first.
  std::vector<std::pair<double, int>> scored(pool.size());
  for (int i = 0; i < pool.size(); ++i)
    scored[i] = {similarity(pool.entry(i).value,
                            index.centers.data() + best_center * d, d),
                 i};
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) {
                     if (a.first != b.first) return a.first > b.first;
                     return a.second < b.second;
                   });
  SelectionResult sel;
  for (int i = 0; i < m; ++i) {
    sel.indices.push_back(scored[i].second);
    sel.similarities.push_back(scored[i].first);
  }
  return sel;
}

}  // namespace pmdet
