// ndf: train, evaluate and inspect deep neural decision forests.
//
// Subcommands: train, eval, trace, hist, cascade-train, cascade-eval.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "ndf/cascade.hpp"
#include "ndf/io.hpp"
#include "ndf/model_io.hpp"
#include "ndf/saliency.hpp"
#include "ndf/training.hpp"

namespace fs = std::filesystem;
using namespace ndf;

namespace {

struct DataOpts {
  std::string dataset;
  std::string data_dir = "data/mnist";
  int samples = 2000;
  uint64_t seed = 0;
};

void add_data_options(CLI::App* cmd, DataOpts& opts, bool required = true) {
  auto* o = cmd->add_option("--dataset", opts.dataset, "Dataset: mnist or synth")
                ->check(CLI::IsMember({"mnist", "synth"}));
  if (required) o->required();
  cmd->add_option("--data-dir", opts.data_dir, "Directory with the MNIST IDX files");
  cmd->add_option("--samples", opts.samples, "Synthetic sample count");
  cmd->add_option("--seed", opts.seed, "Synthetic dataset seed");
}

ClassDataset load_class_dataset(const DataOpts& opts, bool train_split, int limit) {
  if (opts.dataset == "mnist") return load_mnist(opts.data_dir, train_split, limit);
  return make_blob_dataset(opts.samples, train_split ? opts.seed : opts.seed + 1);
}

Tensor to_2d(const Tensor& t) {
  if (t.shape.size() == 2) return t;
  Tensor out = t;
  if (t.shape.size() == 3 && t.shape[0] == 1)
    out.shape = {t.shape[1], t.shape[2]};
  else if (t.shape.size() == 1)
    out.shape = {1, t.shape[0]};
  else
    throw std::invalid_argument("cannot render shape " + shape_str(t.shape) + " as an image");
  return out;
}

std::string format_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", p);
  return buf;
}

int run_train(const DataOpts& data, int depth, int trees, int epochs, int batch_size, double lr,
              int leaf_update_period, int train_limit, const std::string& out) {
  const uint64_t seed = data.seed;
  ClassDataset train = data.dataset == "mnist"
                           ? load_mnist(data.data_dir, true, train_limit)
                           : make_blob_dataset(data.samples, data.seed);
  Rng rng(seed);
  TreeTopology topo(depth);
  const int units = trees * topo.split_count();
  Extractor extractor =
      data.dataset == "mnist"
          ? Extractor::conv_small(28, 28, 8, 16, units, rng)
          : Extractor::mlp({2, 16, units}, rng);
  Forest forest =
      Forest::make(TaskMode::classification, std::move(extractor), trees, depth, train.classes);

  TrainConfig config;
  config.epochs = epochs;
  config.batch_size = batch_size;
  config.lr = lr;
  config.seed = seed;
  config.leaf_update_period = leaf_update_period;
  train_classifier(forest, train, config, &std::cout);

  save_model(forest, out,
             json{{"dataset", data.dataset},
                  {"seed", seed},
                  {"epochs", epochs},
                  {"batch_size", batch_size},
                  {"lr", lr},
                  {"train_count", train.count()}});
  std::cerr << "model written to " << out << "\n";
  return 0;
}

int run_eval(const std::string& model_path, const DataOpts& data) {
  if (model_kind(model_path) == "cascade") {
    CascadeModel m = load_cascade(model_path);
    LandmarkDataset test = synth_dataset(data.samples, data.seed);
    std::vector<double> errors = stage_errors(m, test);
    std::cout << "{\"mean_error\":" << errors.back() << "}\n";
    return 0;
  }
  Forest f = load_forest(model_path);
  ClassDataset test = load_class_dataset(data, false, -1);
  std::cout << "{\"accuracy\":" << classification_accuracy(f, test) << "}\n";
  return 0;
}

int run_trace(const std::string& model_path, const DataOpts& data, int input_index,
              int tree_index, const std::string& out_dir) {
  Forest f = load_forest(model_path);
  ClassDataset test = load_class_dataset(data, false, -1);
  if (input_index < 0 || input_index >= test.count())
    throw data_error("trace: input index " + std::to_string(input_index) +
                     " outside the test set of " + std::to_string(test.count()));
  fs::create_directories(out_dir);
  Tensor input = nth_row(test.inputs, input_index);

  std::vector<SaliencyMap> maps = dsm_along_path(f, input, tree_index);
  std::vector<double> prediction = forest_predict(f, input);
  RoutingState state = forest_route(f, input, tree_index);

  json path_json = json::array();
  for (const PathEntry& e : state.max_path)
    path_json.push_back(json{{"node", e.node}, {"probability", e.probability}});

  json files = json::array();
  for (const SaliencyMap& map : maps) {
    const std::string name =
        "dsm_node" + std::to_string(map.node) + "_p" + format_prob(map.arrival_probability) +
        ".pgm";
    export_pgm(to_2d(normalize_dsm(map.raw)), (fs::path(out_dir) / name).string());
    files.push_back(name);
  }
  // the input itself: undo the mnist [-0.5,0.5] shift, min-max scale anything else
  Tensor display = to_2d(input);
  if (data.dataset == "mnist") {
    for (double& v : display.data) v += 0.5;
  } else {
    double lo = display.data[0], hi = display.data[0];
    for (double v : display.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (double& v : display.data) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  }
  export_pgm(display, (fs::path(out_dir) / "input.pgm").string());

  int predicted = 0;
  for (size_t j = 1; j < prediction.size(); ++j)
    if (prediction[j] > prediction[predicted]) predicted = static_cast<int>(j);

  json out{{"input_index", input_index},
           {"label", test.labels[static_cast<size_t>(input_index)]},
           {"predicted", predicted},
           {"prediction", prediction},
           {"tree", tree_index},
           {"path", path_json},
           {"files", files}};
  std::ofstream jf(fs::path(out_dir) / "path.json");
  jf << out.dump(1, '\t') << "\n";
  std::cout << out.dump() << "\n";
  return 0;
}

int run_hist(const std::string& model_path, const DataOpts& data, int bins, int stage,
             const std::string& out) {
  ScoreHistogram hist(bins);
  if (model_kind(model_path) == "cascade") {
    CascadeModel m = load_cascade(model_path);
    LandmarkDataset set = synth_dataset(data.samples, data.seed);
    if (stage >= 0) {
      if (stage >= m.stage_count())
        throw data_error("hist: stage " + std::to_string(stage) + " outside cascade of " +
                         std::to_string(m.stage_count()));
      hist = cascade_histograms(m, set, bins)[static_cast<size_t>(stage)];
    } else {
      hist = make_histogram(cascade_scores(m, set), bins);
    }
  } else {
    Forest f = load_forest(model_path);
    ClassDataset test = load_class_dataset(data, false, -1);
    hist = collect_score_histogram(f, test.inputs, bins);
  }
  export_histogram_csv(hist, out);
  std::cerr << "histogram (" << hist.total << " scores) written to " << out << "\n";
  return 0;
}

int run_cascade_train(int samples, int stages, int trees, int depth, uint64_t seed, int epochs,
                      int batch_size, double lr, int patch_side, int hidden,
                      const std::string& cache, const std::string& out) {
  LandmarkDataset train;
  if (!cache.empty() && fs::exists(cache)) {
    train = load_dataset_cache(cache);
    if (train.count() < samples)
      throw data_error("cascade-train: cache holds " + std::to_string(train.count()) +
                       " samples, need " + std::to_string(samples));
  } else {
    train = synth_dataset(samples, seed);
    if (!cache.empty()) save_dataset_cache(train, cache);
  }

  CascadeConfig config;
  config.stages = stages;
  config.trees = trees;
  config.depth = depth;
  config.seed = seed;
  config.epochs = epochs;
  config.batch_size = batch_size;
  config.lr = lr;
  config.patch_side = patch_side;
  config.hidden = hidden;
  CascadeModel model = train_cascade(train, config, &std::cout);

  save_model(model, out,
             json{{"seed", seed},
                  {"samples", samples},
                  {"epochs_per_stage", epochs},
                  {"lr", lr}});
  std::vector<double> errors = stage_errors(model, train);
  json ej{{"init_error", errors.front()}, {"final_error", errors.back()}};
  std::cout << ej.dump() << "\n";
  std::cerr << "model written to " << out << "\n";
  return 0;
}

int run_cascade_eval(const std::string& model_path, int samples, uint64_t seed) {
  CascadeModel m = load_cascade(model_path);
  LandmarkDataset test = synth_dataset(samples, seed);
  std::vector<double> errors = stage_errors(m, test);
  json out{{"init_error", errors.front()},
           {"stage_errors", std::vector<double>(errors.begin() + 1, errors.end())},
           {"final_error", errors.back()}};
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep neural decision forest trainer and inspector"};
  app.require_subcommand(1);

  // train; --seed drives both training and the synthetic dataset
  DataOpts train_data;
  int depth = 9, trees = 1, epochs = 10, batch_size = 64, leaf_update_period = 50;
  int train_limit = 10000;
  double lr = 0.001;
  std::string out_model;
  CLI::App* train = app.add_subcommand("train", "Train a classification forest");
  add_data_options(train, train_data);
  train->add_option("--depth", depth, "Tree depth");
  train->add_option("--trees", trees, "Trees in the forest");
  train->add_option("--epochs", epochs, "Training epochs");
  train->add_option("--batch-size", batch_size, "Batch size");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--leaf-update-period", leaf_update_period,
                    "Batches between leaf distribution updates");
  train->add_option("--train-limit", train_limit,
                    "Cap on MNIST training images (-1 for all)");
  train->add_option("--out", out_model, "Output model path")->required();

  // eval
  DataOpts eval_data;
  std::string eval_model;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a model");
  eval->add_option("--model", eval_model, "Model file")->required();
  add_data_options(eval, eval_data, false);

  // trace
  DataOpts trace_data;
  std::string trace_model, trace_dir;
  int input_index = 0, trace_tree = 0;
  CLI::App* trace = app.add_subcommand(
      "trace", "Write decision saliency maps along the max-probability path");
  trace->add_option("--model", trace_model, "Model file")->required();
  trace->add_option("--input-index", input_index, "Test-set input index")->required();
  trace->add_option("--out-dir", trace_dir, "Output directory")->required();
  trace->add_option("--tree", trace_tree, "Tree index within the forest");
  add_data_options(trace, trace_data, false);

  // hist
  DataOpts hist_data;
  std::string hist_model, hist_out;
  int bins = 50, hist_stage = -1;
  CLI::App* hist = app.add_subcommand("hist", "Export the routing-score histogram as CSV");
  hist->add_option("--model", hist_model, "Model file")->required();
  hist->add_option("--bins", bins, "Histogram bins");
  hist->add_option("--stage", hist_stage, "Cascade stage (default: all stages pooled)");
  hist->add_option("--out", hist_out, "Output CSV path")->required();
  add_data_options(hist, hist_data, false);

  // cascade-train
  int cs_samples = 1000, cs_stages = 10, cs_trees = 3, cs_depth = 5;
  int cs_epochs = 20, cs_batch = 64, cs_patch = 11, cs_hidden = 64;
  double cs_lr = 0.01;
  uint64_t cs_seed = 0;
  std::string cs_out, cs_cache;
  CLI::App* ct = app.add_subcommand("cascade-train", "Train a cascaded landmark regressor");
  ct->add_option("--samples", cs_samples, "Synthetic training samples");
  ct->add_option("--stages", cs_stages, "Cascade stages");
  ct->add_option("--trees", cs_trees, "Trees per stage");
  ct->add_option("--depth", cs_depth, "Tree depth");
  ct->add_option("--seed", cs_seed, "Dataset and training seed");
  ct->add_option("--epochs", cs_epochs, "Epochs per stage");
  ct->add_option("--batch-size", cs_batch, "Batch size");
  ct->add_option("--lr", cs_lr, "Adam learning rate");
  ct->add_option("--patch-side", cs_patch, "Landmark patch side (odd)");
  ct->add_option("--hidden", cs_hidden, "Extractor hidden width");
  ct->add_option("--cache", cs_cache, "Dataset cache file (read if present, else written)");
  ct->add_option("--out", cs_out, "Output model path")->required();

  // cascade-eval
  std::string ce_model;
  int ce_samples = 200;
  uint64_t ce_seed = 1;
  CLI::App* ce = app.add_subcommand("cascade-eval", "Per-stage landmark error of a cascade");
  ce->add_option("--model", ce_model, "Model file")->required();
  ce->add_option("--samples", ce_samples, "Synthetic test samples");
  ce->add_option("--seed", ce_seed, "Synthetic test seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train->parsed())
      return run_train(train_data, depth, trees, epochs, batch_size, lr, leaf_update_period,
                       train_limit, out_model);
    if (eval->parsed()) return run_eval(eval_model, eval_data);
    if (trace->parsed())
      return run_trace(trace_model, trace_data, input_index, trace_tree, trace_dir);
    if (hist->parsed()) return run_hist(hist_model, hist_data, bins, hist_stage, hist_out);
    if (ct->parsed())
      return run_cascade_train(cs_samples, cs_stages, cs_trees, cs_depth, cs_seed, cs_epochs,
                               cs_batch, cs_lr, cs_patch, cs_hidden, cs_cache, cs_out);
    if (ce->parsed()) return run_cascade_eval(ce_model, ce_samples, ce_seed);
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
