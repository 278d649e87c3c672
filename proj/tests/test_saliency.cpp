#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "ndf/saliency.hpp"

using namespace ndf;

namespace {

// s = sigmoid(w . x): a single dense unit feeding a depth-1 tree.
Forest dot_forest(const std::vector<double>& w) {
  Rng rng(0);
  const int64_t d = static_cast<int64_t>(w.size());
  Extractor e = Extractor::mlp({static_cast<int>(d), 1}, rng);
  e.params[0] = Tensor::from({d, 1}, w);
  e.params[1] = Tensor({1}, 0.0);
  return Forest::make(TaskMode::classification, std::move(e), 1, 1, 2);
}

}  // namespace

TEST_CASE("dsm of a sigmoid dot product has the closed form s(1-s) w") {
  std::vector<double> w{0.8, -1.2, 0.4};
  Forest f = dot_forest(w);
  Tensor x = Tensor::from({3}, {0.3, 0.1, -0.5});
  SaliencyMap map = compute_dsm(f, x, 1);
  double z = 0.0;
  for (size_t i = 0; i < w.size(); ++i) z += w[i] * x.data[i];
  const double s = 1.0 / (1.0 + std::exp(-z));
  REQUIRE(map.raw.shape == x.shape);
  for (size_t i = 0; i < w.size(); ++i)
    CHECK(map.raw.data[i] == doctest::Approx(s * (1.0 - s) * w[i]).epsilon(1e-12));
  CHECK(map.node == 1);
  CHECK(map.arrival_probability == 1.0);
}

TEST_CASE("dsm at zero input is a quarter of the first-layer weight row") {
  Rng rng(3);
  Extractor e = Extractor::mlp({4, 3}, rng);
  Tensor w = e.params[0];  // bias starts at zero, so s = sigmoid(0) = 0.5
  Forest f = Forest::make(TaskMode::classification, std::move(e), 1, 1, 2);
  Tensor x({4}, 0.0);
  SaliencyMap map = compute_dsm(f, x, 1);
  for (int j = 0; j < 4; ++j)
    CHECK(map.raw.data[static_cast<size_t>(j)] ==
          doctest::Approx(0.25 * w.data[static_cast<size_t>(j * 3)]).epsilon(1e-12));
}

TEST_CASE("dsm matches finite differences through a conv extractor") {
  // 8x8 single-channel input, h = 1e-4, rel err < 1e-3
  Rng rng(11);
  Extractor e = Extractor::conv_block(8, 8, 3, 7, rng);
  Forest f = Forest::make(TaskMode::classification, std::move(e), 1, 3, 4);
  Tensor x = uniform_tensor({1, 8, 8}, -0.5, 0.5, rng);
  for (int node : {1, 3, 5}) {
    SaliencyMap map = compute_dsm(f, x, node);
    const double h = 1e-4;
    auto score_at = [&](const Tensor& input) {
      return forest_route(f, input, 0).scores[static_cast<size_t>(node - 1)];
    };
    for (size_t i = 0; i < x.data.size(); i += 7) {  // probe a spread of pixels
      Tensor plus = x, minus = x;
      plus.data[i] += h;
      minus.data[i] -= h;
      const double fd = (score_at(plus) - score_at(minus)) / (2.0 * h);
      CHECK(ndf::testing::rel_err(map.raw.data[i], fd) < 1e-3);
    }
  }
}

TEST_CASE("dsm ignores leaf store contents") {
  Rng rng(5);
  Forest f = Forest::make(TaskMode::classification, Extractor::mlp({6, 7}, rng), 1, 3, 2);
  Tensor x = uniform_tensor({6}, -1.0, 1.0, rng);
  SaliencyMap before = compute_dsm(f, x, 2);
  for (double& v : f.trees[0].leaves.values.data)
    v = std::uniform_real_distribution<>(0.0, 1.0)(rng);
  SaliencyMap after = compute_dsm(f, x, 2);
  CHECK(before.raw.data == after.raw.data);
}

TEST_CASE("dsm of a leaf index is rejected") {
  Rng rng(5);
  Forest f = Forest::make(TaskMode::classification, Extractor::mlp({6, 7}, rng), 1, 3, 2);
  Tensor x({6}, 0.0);
  CHECK_THROWS_AS(compute_dsm(f, x, 8), std::invalid_argument);   // first leaf
  CHECK_THROWS_AS(compute_dsm(f, x, 0), std::invalid_argument);   // below root
  CHECK_THROWS_AS(compute_dsm(f, x, 99), std::invalid_argument);  // out of range
}

TEST_CASE("dsm along the max-probability path") {
  Rng rng(8);
  const int depth = 4;
  Forest f = Forest::make(TaskMode::classification, Extractor::mlp({10, 15}, rng), 1, depth, 3);
  Tensor x = uniform_tensor({10}, -2.0, 2.0, rng);
  std::vector<SaliencyMap> maps = dsm_along_path(f, x);
  CHECK(static_cast<int>(maps.size()) == depth);

  RoutingState st = forest_route(f, x, 0);
  REQUIRE(st.max_path.size() == maps.size() + 1);
  for (size_t i = 0; i < maps.size(); ++i) {
    CHECK(maps[i].node == st.max_path[i].node);
    CHECK(maps[i].arrival_probability == st.max_path[i].probability);
    CHECK(maps[i].raw.shape == x.shape);
  }
  CHECK(maps.front().arrival_probability == 1.0);
}

TEST_CASE("normalize_dsm") {
  SUBCASE("abs then min-max") {
    Tensor out = normalize_dsm(Tensor::from({3}, {-2.0, 0.0, 2.0}));
    CHECK(out.data == std::vector<double>{1.0, 0.0, 1.0});
  }
  SUBCASE("constant map becomes zeros") {
    Tensor out = normalize_dsm(Tensor({2, 2}, 0.7));
    CHECK(out.data == std::vector<double>(4, 0.0));
  }
  SUBCASE("multi-channel maps reduce by channel max") {
    Tensor raw = Tensor::from({2, 1, 2}, {-3.0, 0.5, 1.0, 0.25});
    Tensor out = normalize_dsm(raw);
    REQUIRE(out.shape == Shape{1, 2});
    // channel maxima are (3, 0.5) before scaling
    CHECK(out.data[0] == doctest::Approx(1.0));
    CHECK(out.data[1] == doctest::Approx(0.0));
  }
  SUBCASE("output lies in [0,1] and is idempotent for non-constant maps") {
    Rng rng(13);
    Tensor raw = uniform_tensor({4, 5}, -3.0, 3.0, rng);
    Tensor once = normalize_dsm(raw);
    for (double v : once.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    Tensor twice = normalize_dsm(once);
    CHECK(twice.data == once.data);
  }
}

TEST_CASE("score histograms") {
  Rng rng(1);
  SUBCASE("zero extractor puts every score in the 0.5 bin") {
    Extractor e = Extractor::mlp({3, 7}, rng);
    for (Tensor& p : e.params) p.data.assign(p.data.size(), 0.0);
    Forest f = Forest::make(TaskMode::classification, std::move(e), 1, 3, 2);
    Tensor inputs = uniform_tensor({6, 3}, -1.0, 1.0, rng);
    ScoreHistogram h = collect_score_histogram(f, inputs, 50);
    CHECK(h.total == 6 * 7);
    CHECK(h.counts[25] == h.total);  // 0.5 falls in bin [0.50, 0.52)
  }
  SUBCASE("total is inputs times splitting nodes, across trees") {
    Forest f = Forest::make(TaskMode::classification, Extractor::mlp({4, 14}, rng), 2, 3, 2);
    Tensor inputs = uniform_tensor({9, 4}, -1.0, 1.0, rng);
    ScoreHistogram h = collect_score_histogram(f, inputs, 10);
    CHECK(h.total == 9 * 7 * 2);
    int64_t sum = 0;
    for (int64_t c : h.counts) sum += c;
    CHECK(sum == h.total);
  }
  SUBCASE("fewer than two bins is rejected") {
    CHECK_THROWS_AS(ScoreHistogram(1), std::invalid_argument);
  }
  SUBCASE("bin edges cover [0,1] uniformly") {
    ScoreHistogram h(4);
    CHECK(h.bin_start(0) == 0.0);
    CHECK(h.bin_end(3) == 1.0);
    CHECK(h.bin_end(1) == doctest::Approx(0.5));
  }
}
