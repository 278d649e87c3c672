// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion.
//
// Groups:
//   offline  criteria that need no external data (1, 2, 5a, 7, 8, 9a)
//   mnist    criteria that train/evaluate on the real MNIST IDX files
//            (3, 4, 5b, 6, 9b); exits 4 when the files are missing
//
// Usage: ndf_acceptance [--group offline|mnist|all] [--mnist-dir DIR]
//                       [--work-dir DIR]

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "ndf/cascade.hpp"
#include "ndf/io.hpp"
#include "ndf/model_io.hpp"
#include "ndf/saliency.hpp"
#include "ndf/training.hpp"

namespace fs = std::filesystem;
using namespace ndf;
using Clock = std::chrono::steady_clock;

namespace {

struct Report {
  bool pass = true;
  std::vector<std::string> notes;

  void fail(const std::string& why) {
    pass = false;
    notes.push_back(why);
  }
  void note(const std::string& what) { notes.push_back(what); }
  void require(bool ok, const std::string& why) {
    if (!ok) fail(why);
  }
};

struct Options {
  std::string group = "all";
  std::string mnist_dir;
  std::string work_dir = "acceptance_out";
};

std::string locate_mnist(const std::string& hint) {
  std::vector<std::string> candidates;
  if (!hint.empty()) candidates.push_back(hint);
  if (const char* env = std::getenv("NDF_MNIST_DIR")) candidates.push_back(env);
  candidates.insert(candidates.end(),
                    {"data/mnist", "../data/mnist", "../../data/mnist", "../../../data/mnist"});
  for (const std::string& dir : candidates)
    if (mnist_available(dir)) return dir;
  return "";
}

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---- criterion 1: weight simplex ------------------------------------------

void criterion_1(Report& r, const Options&) {
  const auto t0 = Clock::now();
  Rng rng(20260808);
  std::uniform_int_distribution<int> depth_dist(1, 10);
  std::uniform_real_distribution<double> score_dist(1e-6, 1.0 - 1e-6);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    TreeTopology topo(depth_dist(rng));
    std::vector<double> scores(static_cast<size_t>(topo.split_count()));
    for (double& s : scores) s = score_dist(rng);
    std::vector<double> w = leaf_weights(topo, scores);
    double total = 0.0;
    for (double v : w) {
      if (v < 0.0) r.fail("negative weight " + fmt(v) + " at trial " + std::to_string(trial));
      total += v;
    }
    worst = std::max(worst, std::fabs(total - 1.0));
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  r.require(worst < 1e-9, "max |sum - 1| = " + fmt(worst) + " exceeds 1e-9");
  r.require(secs < 5.0, "runtime " + fmt(secs) + " s exceeds 5 s");
  r.note("max |sum w - 1| = " + fmt(worst) + ", " + fmt(secs, 3) + " s");
}

// ---- criterion 2: gradient oracle ------------------------------------------

void criterion_2(Report& r, const Options&) {
  const auto t0 = Clock::now();
  Rng rng(7041776);
  double worst_theta = 0.0, worst_input = 0.0;
  int configs = 0;

  for (int trial = 0; trial < 20; ++trial) {
    const bool conv = trial % 2 == 0;
    const bool classify = trial % 4 < 2;
    const int depth = 2 + trial % 2;
    TreeTopology topo(depth);
    Extractor e = conv ? Extractor::conv_block(8, 8, 2 + trial % 3, topo.split_count(), rng)
                       : Extractor::mlp({64, 10, topo.split_count()}, rng);
    const int out_dim = classify ? 3 : 2;
    Forest f = Forest::make(classify ? TaskMode::classification : TaskMode::regression,
                            std::move(e), 1, depth, out_dim);
    if (!classify)
      for (double& v : f.trees[0].leaves.values.data)
        v = std::uniform_real_distribution<>(-0.5, 0.5)(rng);

    const int batch = 4;
    Tensor inputs = conv ? uniform_tensor({batch, 1, 8, 8}, -0.5, 0.5, rng)
                         : uniform_tensor({batch, 64}, -0.5, 0.5, rng);
    std::vector<int> labels;
    Tensor targets({batch, out_dim});
    for (int i = 0; i < batch; ++i) {
      labels.push_back(i % out_dim);
      for (int j = 0; j < out_dim; ++j)
        targets.data[static_cast<size_t>(i * out_dim + j)] =
            std::uniform_real_distribution<>(-1.0, 1.0)(rng);
    }

    auto loss_value = [&](const Forest& model) {
      ForestPass pass = forward_batch(model, inputs);
      return classify ? nll_loss(pass.prediction, labels).value()[0]
                      : squared_loss(pass.prediction, targets).value()[0];
    };

    // d loss / d theta against central differences, h = 1e-5
    ForestPass pass = forward_batch(f, inputs, {.train = true});
    Var loss = classify ? nll_loss(pass.prediction, labels)
                        : squared_loss(pass.prediction, targets);
    pass.graph->backward(loss);
    std::vector<Tensor*> params = f.parameters();
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor analytic = pass.graph->grad_of(Var{pass.graph.get(), pass.param_ids[pi]});
      const size_t stride = std::max<size_t>(1, analytic.data.size() / 24);
      for (size_t j = 0; j < analytic.data.size(); j += stride) {
        const double h = 1e-5;
        const double saved = params[pi]->data[j];
        params[pi]->data[j] = saved + h;
        const double up = loss_value(f);
        params[pi]->data[j] = saved - h;
        const double down = loss_value(f);
        params[pi]->data[j] = saved;
        worst_theta = std::max(worst_theta, rel_err(analytic.data[j], (up - down) / (2 * h)));
      }
    }

    // d s_node / d input against central differences, h = 1e-4
    Tensor sample = nth_row(inputs, 0);
    std::uniform_int_distribution<int> node_dist(1, topo.split_count());
    const int node = node_dist(rng);
    SaliencyMap map = compute_dsm(f, sample, node);
    const size_t stride = std::max<size_t>(1, map.raw.data.size() / 24);
    for (size_t j = 0; j < map.raw.data.size(); j += stride) {
      const double h = 1e-4;
      Tensor plus = sample, minus = sample;
      plus.data[j] += h;
      minus.data[j] -= h;
      const double up = forest_route(f, plus, 0).scores[static_cast<size_t>(node - 1)];
      const double down = forest_route(f, minus, 0).scores[static_cast<size_t>(node - 1)];
      worst_input = std::max(worst_input, rel_err(map.raw.data[j], (up - down) / (2 * h)));
    }
    ++configs;
  }

  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  r.require(worst_theta < 1e-4,
            "worst d loss/d theta rel err " + fmt(worst_theta) + " exceeds 1e-4");
  r.require(worst_input < 1e-3,
            "worst d s/d x rel err " + fmt(worst_input) + " exceeds 1e-3");
  r.require(secs < 60.0, "runtime " + fmt(secs) + " s exceeds 60 s");
  r.note(std::to_string(configs) + " configs, theta rel " + fmt(worst_theta) + ", input rel " +
         fmt(worst_input) + ", " + fmt(secs, 3) + " s");
}

// ---- shared MNIST model (criteria 3-6) -------------------------------------

struct MnistRun {
  Forest forest;
  ClassDataset test;
  double accuracy = 0.0;
  double train_minutes = 0.0;
};

MnistRun train_mnist_model(const std::string& dir, const Options& opts) {
  MnistRun run;
  ClassDataset train = load_mnist(dir, true, 10000);
  run.test = load_mnist(dir, false, -1);

  Rng rng(0);
  TreeTopology topo(9);
  Extractor e = Extractor::conv_small(28, 28, 8, 16, topo.split_count(), rng);
  run.forest = Forest::make(TaskMode::classification, std::move(e), 1, 9, 10);

  TrainConfig config;  // epochs 10, batch 64, lr 0.001, leaf update every 50
  config.seed = 0;
  const auto t0 = Clock::now();
  std::ofstream metrics(fs::path(opts.work_dir) / "mnist_metrics.jsonl");
  train_classifier(run.forest, train, config, &metrics);
  run.train_minutes = std::chrono::duration<double>(Clock::now() - t0).count() / 60.0;
  run.accuracy = classification_accuracy(run.forest, run.test);
  save_model(run.forest, (fs::path(opts.work_dir) / "mnist_depth9.json").string(),
             json{{"dataset", "mnist"}, {"seed", 0}, {"epochs", 10}});
  return run;
}

void criterion_3(Report& r, const MnistRun& run) {
  r.require(run.accuracy >= 0.95,
            "test accuracy " + fmt(run.accuracy) + " below the 0.95 gate");
  r.require(run.train_minutes <= 30.0,
            "training took " + fmt(run.train_minutes) + " min, budget 30");
  r.note("test accuracy " + fmt(run.accuracy, 4) + " on 10000 images, trained in " +
         fmt(run.train_minutes, 3) + " min");
}

void criterion_4(Report& r, const MnistRun& run, const Options& opts) {
  std::vector<double> scores = collect_scores(run.forest, run.test.inputs);
  int64_t decisive = 0;
  for (double s : scores)
    if (s <= 0.05 || s >= 0.95) ++decisive;
  const double fraction = static_cast<double>(decisive) / static_cast<double>(scores.size());
  const std::string csv = (fs::path(opts.work_dir) / "mnist_score_hist.csv").string();
  export_histogram_csv(make_histogram(scores, 50), csv);
  r.require(fraction >= 0.60, "only " + fmt(fraction) + " of scores in [0,0.05] u [0.95,1]");
  r.note(fmt(100.0 * fraction, 4) + "% of " + std::to_string(scores.size()) +
         " scores are decisive; histogram at " + csv);
}

void criterion_5b(Report& r, const MnistRun& run, const Options& opts) {
  const std::string path = (fs::path(opts.work_dir) / "path_annotations.txt").string();
  std::ofstream out(path);
  bool well_formed = true;
  for (int i = 0; i < 10; ++i) {
    Tensor sample = nth_row(run.test.inputs, i);
    RoutingState st = forest_route(run.forest, sample, 0);
    out << "image " << i << ":";
    int splits_on_path = 0;
    for (const PathEntry& e : st.max_path) {
      if (run.forest.trees[0].topo.is_leaf(e.node)) break;
      char buf[64];
      std::snprintf(buf, sizeof(buf), " (N%d, P%.4f)", e.node, e.probability);
      out << buf;
      ++splits_on_path;
    }
    out << "\n";
    well_formed = well_formed && splits_on_path == 9;
  }
  r.require(well_formed, "some path did not carry exactly 9 splitting-node annotations");
  r.note("(Na, Pb) annotations for 10 test images at " + path);
}

void criterion_6(Report& r, const MnistRun& run) {
  int64_t wins = 0, pairs = 0;
  for (int i = 0; i < 100; ++i) {
    Tensor sample = nth_row(run.test.inputs, i);
    std::vector<SaliencyMap> maps = dsm_along_path(run.forest, sample, 0);
    for (const SaliencyMap& map : maps) {
      double fg = 0.0, bg = 0.0;
      int64_t nfg = 0, nbg = 0;
      for (size_t p = 0; p < sample.data.size(); ++p) {
        const double intensity = sample.data[p] + 0.5;  // back to [0,1]
        if (intensity > 0.2) {
          fg += std::fabs(map.raw.data[p]);
          ++nfg;
        } else {
          bg += std::fabs(map.raw.data[p]);
          ++nbg;
        }
      }
      if (nfg > 0 && nbg > 0 && fg / nfg > bg / nbg) ++wins;
      ++pairs;
    }
  }
  const double fraction = static_cast<double>(wins) / static_cast<double>(pairs);
  r.require(fraction >= 0.70, "foreground dominates in only " + fmt(fraction) + " of pairs");
  r.note(fmt(100.0 * fraction, 4) + "% of " + std::to_string(pairs) +
         " (image, node) pairs have foreground-dominant saliency");
}

// ---- criterion 5a: path-trace vs enumeration --------------------------------

void criterion_5a(Report& r, const Options&) {
  Rng rng(5050);
  std::uniform_int_distribution<int> depth_dist(1, 3);
  std::uniform_real_distribution<double> score_dist(1e-3, 1.0 - 1e-3);
  for (int trial = 0; trial < 500; ++trial) {
    TreeTopology topo(depth_dist(rng));
    std::vector<double> scores(static_cast<size_t>(topo.split_count()));
    for (double& s : scores) s = score_dist(rng);
    std::vector<PathEntry> path = trace_max_path(topo, scores);
    // oracle: recompute each arrival probability as an explicit product
    // along the recorded node sequence, multiplying from the root
    double prod = 1.0;
    for (size_t i = 0; i < path.size(); ++i) {
      if (i > 0) {
        const int parent = path[i - 1].node;
        prod = prod * (path[i].node == 2 * parent ? scores[parent - 1]
                                                  : 1.0 - scores[parent - 1]);
      }
      if (path[i].probability != prod) {
        r.fail("trial " + std::to_string(trial) + ": arrival probability at node " +
               std::to_string(path[i].node) + " is not the exact running product");
        return;
      }
    }
    if (!topo.is_leaf(path.back().node)) {
      r.fail("trial " + std::to_string(trial) + ": path does not end at a leaf");
      return;
    }
  }
  r.note("500 random depth<=3 trees, greedy arrival probabilities exact");
}

// ---- criterion 7: cascade convergence ---------------------------------------

void criterion_7(Report& r, const Options& opts) {
  const auto t0 = Clock::now();
  LandmarkDataset train = synth_dataset(1000, 0);
  LandmarkDataset test = synth_dataset(200, 1);  // held-out draw of the same generator

  CascadeConfig config;  // stages 10, trees 3, depth 5, patch 11
  config.seed = 0;
  CascadeModel model = train_cascade(train, config);
  save_model(model, (fs::path(opts.work_dir) / "cascade_k10.json").string(),
             json{{"seed", 0}, {"samples", 1000}});

  std::vector<double> errors = stage_errors(model, test);
  const double minutes = std::chrono::duration<double>(Clock::now() - t0).count() / 60.0;
  int non_increasing = 0;
  for (size_t i = 1; i < errors.size(); ++i)
    if (errors[i] <= errors[i - 1]) ++non_increasing;

  std::ostringstream stages;
  stages << std::setprecision(4);
  for (double e : errors) stages << e << " ";
  r.require(errors.back() < 0.30 * errors.front(),
            "final error " + fmt(errors.back()) + " is not below 30% of init " +
                fmt(errors.front()));
  r.require(non_increasing >= 8, "error non-increasing in only " +
                                     std::to_string(non_increasing) + " of 10 stages");
  r.require(minutes <= 20.0, "runtime " + fmt(minutes) + " min exceeds 20");
  r.note("errors per stage: " + stages.str());
  r.note("final/init = " + fmt(errors.back() / errors.front(), 4) + ", non-increasing " +
         std::to_string(non_increasing) + "/10, " + fmt(minutes, 3) + " min");
}

// ---- criterion 8: leaf update -----------------------------------------------

void criterion_8(Report& r, const Options&) {
  Rng rng(88);
  const int depth = 4, classes = 4, batch = 64;
  TreeTopology topo(depth);
  LeafStore leaves = LeafStore::uniform_classification(topo.leaf_count(), classes);

  // fixed batch: random routing weights and labels
  std::vector<std::vector<double>> weights;
  std::vector<int> labels;
  std::uniform_real_distribution<double> score_dist(0.05, 0.95);
  std::uniform_int_distribution<int> label_dist(0, classes - 1);
  for (int n = 0; n < batch; ++n) {
    std::vector<double> scores(static_cast<size_t>(topo.split_count()));
    for (double& s : scores) s = score_dist(rng);
    weights.push_back(leaf_weights(topo, scores));
    labels.push_back(label_dist(rng));
  }

  auto batch_nll = [&] {
    double total = 0.0;
    for (int n = 0; n < batch; ++n) {
      std::vector<double> p = tree_predict(weights[static_cast<size_t>(n)], leaves);
      total -= std::log(std::max(p[static_cast<size_t>(labels[static_cast<size_t>(n)])], 1e-12));
    }
    return total / batch;
  };

  double worst_simplex = 0.0;
  int non_increasing = 0;
  double before = batch_nll();
  for (int it = 0; it < 100; ++it) {
    leaf_update_classification(leaves, weights, labels);
    const double after = batch_nll();
    if (after <= before + 1e-12) ++non_increasing;
    before = after;
    for (int l = 0; l < topo.leaf_count(); ++l) {
      double sum = 0.0;
      for (double v : leaves.leaf(l)) {
        if (v < 0.0) r.fail("negative probability in leaf " + std::to_string(l));
        sum += v;
      }
      worst_simplex = std::max(worst_simplex, std::fabs(sum - 1.0));
    }
  }
  r.require(worst_simplex < 1e-9,
            "max |sum pi - 1| = " + fmt(worst_simplex) + " exceeds 1e-9");
  r.require(non_increasing >= 95,
            "NLL non-increasing in only " + std::to_string(non_increasing) + " of 100 updates");
  r.note("max |sum pi - 1| = " + fmt(worst_simplex) + ", NLL non-increasing " +
         std::to_string(non_increasing) + "/100");
}

// ---- criterion 9a: model round-trip -----------------------------------------

void criterion_9a(Report& r, const Options& opts) {
  Rng rng(99);
  Extractor e = Extractor::conv_block(8, 8, 4, 15, rng);
  Forest f = Forest::make(TaskMode::classification, std::move(e), 1, 4, 5);
  ClassDataset data;
  data.classes = 5;
  data.inputs = uniform_tensor({40, 1, 8, 8}, -0.5, 0.5, rng);
  for (int i = 0; i < 40; ++i) data.labels.push_back(i % 5);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.leaf_update_period = 3;
  train_classifier(f, data, tc);

  const std::string path = (fs::path(opts.work_dir) / "roundtrip.json").string();
  save_model(f, path);
  Forest back = load_forest(path);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = uniform_tensor({1, 1, 8, 8}, -0.5, 0.5, rng);
    ForestPass pa = forward_batch(f, x);
    ForestPass pb = forward_batch(back, x);
    if (pa.prediction.value().data != pb.prediction.value().data ||
        pa.scores[0].value().data != pb.scores[0].value().data) {
      r.fail("prediction or scores differ after save/load at trial " + std::to_string(trial));
      return;
    }
  }
  r.note("100 random predictions and score vectors bitwise identical after save/load");
}

void criterion_9b(Report& r, const std::string& dir) {
  struct Expect {
    const char* stem;
    std::vector<int64_t> dims;
  };
  const Expect files[] = {{"train-images", {60000, 28, 28}},
                          {"train-labels", {60000}},
                          {"t10k-images", {10000, 28, 28}},
                          {"t10k-labels", {10000}}};
  for (const Expect& f : files) {
    IdxTensor t = load_idx_file(detail::find_idx_file(dir, f.stem));
    if (t.dims != f.dims) {
      std::ostringstream os;
      os << f.stem << " dims mismatch: got (";
      for (int64_t d : t.dims) os << d << " ";
      os << ")";
      r.fail(os.str());
    }
  }
  r.note("all four MNIST IDX files parsed with the documented dims");
}

// ---- driver -----------------------------------------------------------------

int run_criterion(const std::string& id, const std::string& title,
                  const std::function<void(Report&)>& fn) {
  Report r;
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.fail(std::string("exception: ") + e.what());
  }
  std::ostringstream line;
  line << "[" << id << "] " << title;
  std::string text = line.str();
  if (text.size() < 58) text.resize(58, ' ');
  std::cout << text << (r.pass ? "PASS" : "FAIL") << "\n";
  for (const std::string& n : r.notes) std::cout << "      " << n << "\n";
  return r.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  Options opts;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value for " << arg << "\n";
        std::exit(1);
      }
      return argv[++i];
    };
    if (arg == "--group")
      opts.group = next();
    else if (arg == "--mnist-dir")
      opts.mnist_dir = next();
    else if (arg == "--work-dir")
      opts.work_dir = next();
    else {
      std::cerr << "usage: ndf_acceptance [--group offline|mnist|all] [--mnist-dir DIR] "
                   "[--work-dir DIR]\n";
      return 1;
    }
  }
  fs::create_directories(opts.work_dir);
  const bool offline = opts.group == "offline" || opts.group == "all";
  const bool mnist = opts.group == "mnist" || opts.group == "all";
  int failures = 0;

  if (offline) {
    failures += run_criterion("1", "weight simplex over 1000 random trees",
                              [&](Report& r) { criterion_1(r, opts); });
    failures += run_criterion("2", "gradient oracle on 20 random 8x8 configs",
                              [&](Report& r) { criterion_2(r, opts); });
    failures += run_criterion("5a", "greedy trace equals enumeration products",
                              [&](Report& r) { criterion_5a(r, opts); });
    failures += run_criterion("7", "cascade convergence (K=10, T=3, d=5)",
                              [&](Report& r) { criterion_7(r, opts); });
    failures += run_criterion("8", "leaf update keeps simplex, lowers NLL",
                              [&](Report& r) { criterion_8(r, opts); });
    failures += run_criterion("9a", "model save/load bitwise round-trip",
                              [&](Report& r) { criterion_9a(r, opts); });
  }

  if (mnist) {
    const std::string dir = locate_mnist(opts.mnist_dir);
    if (dir.empty()) {
      std::cout << "[3,4,5b,6,9b] SKIPPED: MNIST IDX files not found.\n"
                << "      Place train-images-idx3-ubyte, train-labels-idx1-ubyte,\n"
                << "      t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte under data/mnist\n"
                << "      or pass --mnist-dir / set NDF_MNIST_DIR.\n";
      return failures > 0 ? 1 : 4;
    }
    try {
      MnistRun run = train_mnist_model(dir, opts);
      failures += run_criterion("3", "MNIST depth-9 desk-scale accuracy >= 95%",
                                [&](Report& r) { criterion_3(r, run); });
      failures += run_criterion("4", "decisiveness: >= 60% scores near 0 or 1",
                                [&](Report& r) { criterion_4(r, run, opts); });
      failures += run_criterion("5b", "(Na, Pb) annotations for 10 test images",
                                [&](Report& r) { criterion_5b(r, run, opts); });
      failures += run_criterion("6", "DSM foreground dominance on 100 images",
                                [&](Report& r) { criterion_6(r, run); });
    } catch (const std::exception& e) {
      std::cout << "[3,4,5b,6] FAIL: " << e.what() << "\n";
      ++failures;
    }
    failures += run_criterion("9b", "IDX parser reads all four MNIST files",
                              [&](Report& r) { criterion_9b(r, dir); });
  }

  return failures == 0 ? 0 : 1;
}
