#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "pmdet/common.hpp"
#include "pmdet/prompt_memory.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Exhaustive subset oracle: enumerate all C(N, M) index subsets and take the
// one maximizing the similarity sum (lexicographically first on ties).
std::set<int> brute_force_top_m(const PromptPool& pool, const Tensor& emb,
                                int m) {
  const Tensor query = project_input(emb);
  std::vector<double> sims(pool.size());
  for (int i = 0; i < pool.size(); ++i)
    sims[i] = similarity(pool.entry(i).value, query.data(), query.size());

  std::vector<int> pick(m);
  std::set<int> best;
  double best_sum = -1e30;
  std::function<void(int, int, double)> rec = [&](int start, int depth,
                                                  double sum) {
    if (depth == m) {
      if (sum > best_sum) {
        best_sum = sum;
        best = std::set<int>(pick.begin(), pick.end());
      }
      return;
    }
    for (int i = start; i < pool.size(); ++i) {
      pick[depth] = i;
      rec(i + 1, depth + 1, sum + sims[i]);
    }
  };
  rec(0, 0, 0.0);
  return best;
}

}  // namespace

TEST_CASE("init_pool: paper-sized pool, shapes and determinism") {
  PromptPool pool =
      PromptPool::init_pool(Level::token, Domain::source, 10, 8, 32, 7);
  CHECK(pool.size() == 10);
  CHECK(pool.values()->value.rows() == 10);
  CHECK(pool.values()->value.cols() == 32);
  CHECK(pool.weights()->value.rows() == 80);  // N*L
  CHECK(pool.weights()->value.cols() == 32);
  for (int i = 0; i < 10; ++i) CHECK(pool.entry(i).weight_size == 8 * 32);
  CHECK(pool.values()->value.all_finite());
  CHECK(pool.weights()->value.all_finite());

  PromptPool again =
      PromptPool::init_pool(Level::token, Domain::source, 10, 8, 32, 7);
  for (std::size_t i = 0; i < pool.values()->value.size(); ++i)
    CHECK(pool.values()->value[i] == again.values()->value[i]);
  for (std::size_t i = 0; i < pool.weights()->value.size(); ++i)
    CHECK(pool.weights()->value[i] == again.weights()->value[i]);

  CHECK_THROWS_AS(
      PromptPool::init_pool(Level::token, Domain::source, 0, 8, 32, 7),
      ConfigError);
  CHECK_THROWS_AS(
      PromptPool::init_pool(Level::token, Domain::source, 4, 0, 32, 7),
      ConfigError);
}

TEST_CASE("single-entry pool: any selection returns index 0") {
  PromptPool pool = PromptPool::init_pool(Level::input, Domain::target, 1, 4,
                                          16, 0, 0.03, PixelShape{3, 2}, 16,
                                          16);
  RngStream rng(1);
  Tensor emb = random_matrix(5, 3, rng);
  SelectionResult sel = select_top_m(pool, emb, 1);
  REQUIRE(sel.indices.size() == 1);
  CHECK(sel.indices[0] == 0);
}

TEST_CASE("project_input: row means") {
  Tensor ones = Tensor::full({5, 3}, 1.0);
  Tensor mean = project_input(ones);
  REQUIRE(mean.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(mean[i] == doctest::Approx(1.0));

  Tensor row({1, 4});
  for (int i = 0; i < 4; ++i) row[i] = i + 0.5;
  Tensor single = project_input(row);
  for (int i = 0; i < 4; ++i) CHECK(single[i] == doctest::Approx(i + 0.5));

  Tensor two({2, 2});
  two.at2(0, 0) = 0;
  two.at2(0, 1) = 2;
  two.at2(1, 0) = 4;
  two.at2(1, 1) = 0;
  Tensor m = project_input(two);
  CHECK(m[0] == doctest::Approx(2.0));
  CHECK(m[1] == doctest::Approx(1.0));

  CHECK_THROWS_AS(project_input(Tensor({0, 3})), DomainError);
}

TEST_CASE("similarity: cosine basics and zero-norm warning path") {
  const double a[2] = {1, 0}, b[2] = {1, 0}, c[2] = {0, 1}, d[2] = {-2, 0};
  CHECK(similarity(a, b, 2) == doctest::Approx(1.0));
  CHECK(similarity(a, c, 2) == doctest::Approx(0.0));
  CHECK(similarity(a, d, 2) == doctest::Approx(-1.0));

  WarningLog::instance().clear();
  const double zero[2] = {0, 0};
  CHECK(similarity(a, zero, 2) == 0.0);
  CHECK(WarningLog::instance().count() == 1);

  // invariance under positive scaling
  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    double v[4], q[4], av[4];
    for (int i = 0; i < 4; ++i) {
      v[i] = rng.uniform(-1, 1);
      q[i] = rng.uniform(-1, 1);
    }
    const double scale = std::exp(rng.uniform(-3, 3));
    for (int i = 0; i < 4; ++i) av[i] = scale * v[i];
    CHECK(std::fabs(similarity(av, q, 4) - similarity(v, q, 4)) < 1e-6);
  }
}

TEST_CASE("select_top_m equals the exhaustive subset oracle") {
  RngStream rng(17);
  int trials = 0;
  while (trials < 120) {
    const int n = 2 + static_cast<int>(rng.uniform_int(11));  // up to 12
    const int m =
        1 + static_cast<int>(rng.uniform_int(std::min(n, 5)));  // up to 5
    PromptPool pool = PromptPool::init_pool(
        Level::token, Domain::source, n, 2, 6, rng.next_u64(), 0.5);
    Tensor emb = random_matrix(4, 6, rng);

    SelectionResult sel = select_top_m(pool, emb, m);
    REQUIRE(static_cast<int>(sel.indices.size()) == m);
    CHECK(std::set<int>(sel.indices.begin(), sel.indices.end()) ==
          brute_force_top_m(pool, emb, m));
    for (std::size_t i = 1; i < sel.similarities.size(); ++i)
      CHECK(sel.similarities[i] <= sel.similarities[i - 1]);
    ++trials;
  }
}

TEST_CASE("select_top_m: full pool, tie-break, M>N error") {
  PromptPool pool =
      PromptPool::init_pool(Level::token, Domain::source, 6, 2, 4, 3);
  RngStream rng(19);
  Tensor emb = random_matrix(3, 4, rng);
  SelectionResult all = select_top_m(pool, emb, 6);
  CHECK(std::set<int>(all.indices.begin(), all.indices.end()) ==
        std::set<int>{0, 1, 2, 3, 4, 5});

  CHECK_THROWS_AS(select_top_m(pool, emb, 7), ConfigError);

  // Duplicate an entry's value so two entries tie exactly; the lower index
  // must win at the M-th rank.
  Tensor& values = pool.values()->value;
  for (int c = 0; c < 4; ++c) values.at2(5, c) = values.at2(2, c);
  SelectionResult sel = select_top_m(pool, emb, 6);
  // find the ranks of 2 and 5: equal similarity, 2 must come first
  auto pos = [&](int idx) {
    return std::find(sel.indices.begin(), sel.indices.end(), idx) -
           sel.indices.begin();
  };
  CHECK(pos(2) < pos(5));
}

TEST_CASE("inject_tokens: prefix order, identity when off, wrong level") {
  PromptPool pool =
      PromptPool::init_pool(Level::token, Domain::source, 6, 8, 16, 23);
  RngStream rng(29);
  ad::Var tokens = ad::constant(random_matrix(10, 16, rng));

  SelectionResult sel;
  sel.indices = {3, 0, 5, 1};  // M=4, selection order
  sel.similarities = {0.9, 0.8, 0.7, 0.6};

  ad::Var out = inject_tokens(tokens, sel, pool);
  CHECK(out->value.rows() == 4 * 8 + 10);  // M*L + T = 42
  CHECK(out->value.cols() == 16);

  // prefix rows are exactly the selected weights in selection order
  for (int s = 0; s < 4; ++s) {
    const auto entry = pool.entry(sel.indices[s]);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 16; ++c)
        CHECK(out->value.at2(s * 8 + r, c) == entry.weight[r * 16 + c]);
  }
  // original rows appear unchanged after position M*L
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 16; ++c)
      CHECK(out->value.at2(32 + r, c) == tokens->value.at2(r, c));

  SelectionResult empty;
  ad::Var same = inject_tokens(tokens, empty, pool);
  CHECK(same.get() == tokens.get());

  PromptPool input_pool = PromptPool::init_pool(
      Level::input, Domain::source, 2, 1, 3, 5, 0.03, PixelShape{3, 2}, 16, 16);
  CHECK_THROWS_AS(inject_tokens(tokens, sel, input_pool), ConfigError);
}

TEST_CASE("inject_input: border-only additive frame") {
  const int hw = 16;
  PromptPool pool = PromptPool::init_pool(
      Level::input, Domain::target, 4, 1, 3, 31, 0.03, PixelShape{3, 3}, hw,
      hw);
  RngStream rng(31);
  Tensor image({3, hw, hw});
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = rng.uniform(0, 1);

  SelectionResult sel;
  sel.indices = {1, 3};
  sel.similarities = {0.5, 0.4};

  ad::Var out = inject_input(ad::constant(image), sel, pool);
  // interior pixels unchanged (border width 3)
  for (int c = 0; c < 3; ++c)
    for (int y = 3; y < hw - 3; ++y)
      for (int x = 3; x < hw - 3; ++x)
        CHECK(out->value[(c * hw + y) * hw + x] ==
              image[(c * hw + y) * hw + x]);
  // center pixel untouched for any prompt
  CHECK(out->value[(1 * hw + hw / 2) * hw + hw / 2] ==
        image[(1 * hw + hw / 2) * hw + hw / 2]);

  // a border pixel moved by the average of the two selected frames
  const auto& coords = pool.border_coords();
  const auto e1 = pool.entry(1), e3 = pool.entry(3);
  const int y0 = coords[0].first, x0 = coords[0].second;
  const double expect = image[(0 * hw + y0) * hw + x0] +
                        0.5 * (e1.weight[0] + e3.weight[0]);
  CHECK(out->value[(0 * hw + y0) * hw + x0] == doctest::Approx(expect));

  // zero-initialized prompts leave the image unchanged
  PromptPool zero_pool = PromptPool::init_pool(
      Level::input, Domain::target, 4, 1, 3, 31, 0.0, PixelShape{3, 3}, hw, hw);
  ad::Var same = inject_input(ad::constant(image), sel, zero_pool);
  for (std::size_t i = 0; i < image.size(); ++i)
    CHECK(same->value[i] == image[i]);

  // border width 0: empty support, image unchanged
  PromptPool b0 = PromptPool::init_pool(Level::input, Domain::target, 2, 1, 3,
                                        7, 0.03, PixelShape{3, 0}, hw, hw);
  SelectionResult sel0;
  sel0.indices = {0};
  sel0.similarities = {1.0};
  ad::Var out0 = inject_input(ad::constant(image), sel0, b0);
  for (std::size_t i = 0; i < image.size(); ++i)
    CHECK(out0->value[i] == image[i]);
}

TEST_CASE("gradients flow only into selected prompt weights") {
  PromptPool pool =
      PromptPool::init_pool(Level::token, Domain::source, 5, 2, 4, 37);
  RngStream rng(41);
  ad::Var tokens = ad::constant(random_matrix(3, 4, rng));

  SelectionResult sel;
  sel.indices = {4, 1};
  sel.similarities = {0.9, 0.8};

  ad::zero_grad({pool.weights()});
  ad::Var out = inject_tokens(tokens, sel, pool);
  ad::Var loss = ad::mean_all(ad::mul(out, out));
  ad::backward(loss);

  const Tensor& grad = pool.weights()->grad;
  REQUIRE(grad.size() == pool.weights()->value.size());
  double selected_norm = 0.0, unselected_norm = 0.0;
  for (int entry = 0; entry < 5; ++entry) {
    double norm = 0.0;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c)
        norm += std::fabs(grad.at2(entry * 2 + r, c));
    if (entry == 4 || entry == 1)
      selected_norm += norm;
    else
      unselected_norm += norm;
  }
  CHECK(unselected_norm == 0.0);  // exactly zero
  CHECK(selected_norm > 0.0);
}

TEST_CASE("selection_histogram: counting, additivity, range check") {
  CHECK(selection_histogram({}, 4) == std::vector<std::int64_t>(4, 0));

  std::vector<SelectionResult> log(3);
  for (auto& sel : log) {
    sel.indices = {0, 1, 2, 1};
    sel.similarities = {1, 1, 1, 1};
  }
  auto h = selection_histogram(log, 4);
  std::int64_t total = 0;
  for (auto c : h) total += c;
  CHECK(total == 12);  // 3 selections x M=4

  auto doubled_log = log;
  doubled_log.insert(doubled_log.end(), log.begin(), log.end());
  auto h2 = selection_histogram(doubled_log, 4);
  for (int i = 0; i < 4; ++i) CHECK(h2[i] == 2 * h[i]);

  SelectionResult bad;
  bad.indices = {7};
  CHECK_THROWS_AS(selection_histogram({bad}, 4), DataError);
}

TEST_CASE("random and kmeans strategies return valid selections") {
  PromptPool pool =
      PromptPool::init_pool(Level::token, Domain::source, 8, 2, 6, 43, 0.5);
  RngStream rng(47);

  SelectionResult r1 = select_random(pool, 4, rng);
  CHECK(std::set<int>(r1.indices.begin(), r1.indices.end()).size() == 4);

  RngStream rng_a(99), rng_b(99);
  SelectionResult a = select_random(pool, 4, rng_a);
  SelectionResult b = select_random(pool, 4, rng_b);
  CHECK(a.indices == b.indices);  // seeded reproducibility

  KMeansIndex km = fit_kmeans(pool, 3, 7);
  CHECK(km.centers.rows() == 3);
  Tensor emb = random_matrix(4, 6, rng);
  SelectionResult k1 = select_kmeans(pool, emb, 3, km);
  CHECK(std::set<int>(k1.indices.begin(), k1.indices.end()).size() == 3);
  SelectionResult k2 = select_kmeans(pool, emb, 3, km);
  CHECK(k1.indices == k2.indices);  // deterministic given the index
}
