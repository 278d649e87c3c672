#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ndf/data.hpp"
#include "ndf/saliency.hpp"
#include "ndf/training.hpp"

namespace ndf {

// L landmark points in pixel coordinates, flattened x0,y0,x1,y1,...
struct LandmarkShape {
  std::vector<double> xy;

  int landmarks() const { return static_cast<int>(xy.size() / 2); }
  double x(int l) const { return xy[2 * static_cast<size_t>(l)]; }
  double y(int l) const { return xy[2 * static_cast<size_t>(l) + 1]; }
};

// Mean Euclidean distance between paired landmarks, in pixels.
inline double mean_landmark_error(const LandmarkShape& a, const LandmarkShape& b) {
  if (a.xy.size() != b.xy.size())
    throw std::invalid_argument("landmark error: shapes disagree on landmark count");
  double total = 0.0;
  const int l = a.landmarks();
  for (int i = 0; i < l; ++i)
    total += std::hypot(a.x(i) - b.x(i), a.y(i) - b.y(i));
  return total / static_cast<double>(l);
}

struct LandmarkDataset {
  int image_side = 0;
  int landmarks = 0;
  std::vector<Tensor> images;  // (side, side), values in [0,1]
  std::vector<LandmarkShape> shapes;

  int count() const { return static_cast<int>(images.size()); }
};

namespace detail {

inline void paint_disk(std::vector<double>& img, int side, double cx, double cy, double r,
                       double value) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  const int x1 = std::min(side - 1, static_cast<int>(std::ceil(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int y1 = std::min(side - 1, static_cast<int>(std::ceil(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (std::hypot(x - cx, y - cy) <= r)
        img[static_cast<size_t>(y) * side + x] = value;
}

}  // namespace detail

// Procedurally rendered 64x64 face-like images: an ellipse head, two eye
// dots and a mouth arc, with randomized position, radii and rotation.
// Landmarks: left eye, right eye, mouth left, mouth right, mouth bottom.
// Pixel values are quantized to 8 bits so cached datasets round-trip.
inline LandmarkDataset synth_dataset(int count, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("synth dataset: count must be >= 1");
  constexpr int side = 64;
  constexpr int num_landmarks = 5;
  LandmarkDataset d;
  d.image_side = side;
  d.landmarks = num_landmarks;
  Rng rng(seed);
  std::uniform_real_distribution<double> center_jitter(-6.0, 6.0);
  std::uniform_real_distribution<double> rx_dist(14.0, 20.0);
  std::uniform_real_distribution<double> ry_dist(16.0, 22.0);
  std::uniform_real_distribution<double> rot_dist(-0.25, 0.25);

  for (int n = 0; n < count; ++n) {
    const double cx = 32.0 + center_jitter(rng);
    const double cy = 32.0 + center_jitter(rng);
    const double rx = rx_dist(rng);
    const double ry = ry_dist(rng);
    const double phi = rot_dist(rng);
    const double cphi = std::cos(phi), sphi = std::sin(phi);
    auto to_image = [&](double lx, double ly) {
      return std::pair<double, double>{cx + lx * cphi - ly * sphi, cy + lx * sphi + ly * cphi};
    };

    std::vector<double> img(side * side, 0.0);
    // head
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double lx = dx * cphi + dy * sphi;
        const double ly = -dx * sphi + dy * cphi;
        if ((lx / rx) * (lx / rx) + (ly / ry) * (ly / ry) <= 1.0)
          img[static_cast<size_t>(y) * side + x] = 0.35;
      }
    }
    // eyes
    const double eye_y = -0.35 * ry, eye_dx = 0.45 * rx, eye_r = std::max(1.5, 0.10 * rx);
    auto [lex, ley] = to_image(-eye_dx, eye_y);
    auto [rex, rey] = to_image(eye_dx, eye_y);
    detail::paint_disk(img, side, lex, ley, eye_r, 0.9);
    detail::paint_disk(img, side, rex, rey, eye_r, 0.9);
    // mouth arc: corners at +-0.45 rx, bottom sag of 0.15 ry
    for (int step = 0; step <= 60; ++step) {
      const double t = -1.0 + step / 30.0;
      auto [mx, my] = to_image(0.45 * rx * t, 0.45 * ry + 0.15 * ry * (1.0 - t * t));
      detail::paint_disk(img, side, mx, my, 1.2, 0.85);
    }

    Tensor image({side, side});
    for (size_t i = 0; i < img.size(); ++i) {
      const int q = static_cast<int>(std::floor(img[i] * 255.0 + 0.5));
      image.data[i] = q / 255.0;
    }
    d.images.push_back(std::move(image));

    auto [mlx, mly] = to_image(-0.45 * rx, 0.45 * ry);
    auto [mrx, mry] = to_image(0.45 * rx, 0.45 * ry);
    auto [mbx, mby] = to_image(0.0, 0.60 * ry);
    d.shapes.push_back(LandmarkShape{{lex, ley, rex, rey, mlx, mly, mrx, mry, mbx, mby}});
  }
  return d;
}

// Per-landmark square crops concatenated along the channel axis:
// (L, side, side). Patch l is centered at the rounded landmark l; pixels
// outside the image are zero.
inline Tensor extract_patches(const Tensor& image, const LandmarkShape& shape, int side) {
  if (side < 1 || side % 2 == 0)
    throw std::invalid_argument("extract_patches: patch side must be odd and positive");
  if (image.shape.size() != 2)
    throw std::invalid_argument("extract_patches: image must be 2-d, got " +
                                shape_str(image.shape));
  const int64_t h = image.shape[0], w = image.shape[1];
  const int l = shape.landmarks();
  const int half = side / 2;
  Tensor out({l, side, side}, 0.0);
  for (int i = 0; i < l; ++i) {
    const int64_t cx = std::lround(shape.x(i));
    const int64_t cy = std::lround(shape.y(i));
    for (int dy = -half; dy <= half; ++dy) {
      const int64_t sy = cy + dy;
      if (sy < 0 || sy >= h) continue;
      for (int dx = -half; dx <= half; ++dx) {
        const int64_t sx = cx + dx;
        if (sx < 0 || sx >= w) continue;
        out.data[(static_cast<size_t>(i) * side + (dy + half)) * side + (dx + half)] =
            image.data[static_cast<size_t>(sy) * w + sx];
      }
    }
  }
  return out;
}

// Coarse initialization: the per-landmark mean over training shapes.
inline LandmarkShape init_shape(const LandmarkDataset& data) {
  if (data.count() == 0) throw std::invalid_argument("init_shape: empty dataset");
  LandmarkShape mean;
  mean.xy.assign(static_cast<size_t>(2 * data.landmarks), 0.0);
  for (const LandmarkShape& s : data.shapes)
    for (size_t i = 0; i < mean.xy.size(); ++i) mean.xy[i] += s.xy[i];
  for (double& v : mean.xy) v /= data.count();
  return mean;
}

// Cascaded regressor: stage forests each predict an additive shape update
// from patches cropped at the current estimate.
struct CascadeModel {
  int landmarks = 0;
  int patch_side = 11;
  int image_side = 64;
  LandmarkShape mean_shape;
  std::vector<Forest> stages;

  int stage_count() const { return static_cast<int>(stages.size()); }
};

struct CascadePrediction {
  LandmarkShape final_shape;
  std::vector<LandmarkShape> per_stage;       // estimate after each stage
  std::vector<std::vector<double>> updates;   // raw stage outputs
};

namespace detail {

inline Tensor flat_patch_row(const CascadeModel& m, const Tensor& image,
                             const LandmarkShape& est) {
  Tensor bundle = extract_patches(image, est, m.patch_side);
  bundle.shape = {1, numel(bundle.shape)};
  return bundle;
}

}  // namespace detail

inline CascadePrediction cascade_predict(const CascadeModel& m, const Tensor& image) {
  if (m.stages.empty()) throw std::invalid_argument("cascade: no stages");
  CascadePrediction out;
  LandmarkShape est = m.mean_shape;
  for (const Forest& stage : m.stages) {
    Tensor row = detail::flat_patch_row(m, image, est);
    Tensor delta = forest_predict_batch(stage, row);
    for (size_t i = 0; i < est.xy.size(); ++i) est.xy[i] += delta.data[i];
    out.updates.push_back(delta.data);
    out.per_stage.push_back(est);
  }
  out.final_shape = est;
  return out;
}

struct CascadeConfig {
  int stages = 10;
  int trees = 3;
  int depth = 5;
  int patch_side = 11;
  int hidden = 64;
  int epochs = 20;       // per stage
  int batch_size = 64;
  double lr = 0.01;
  uint64_t seed = 0;

  void validate() const {
    if (stages < 1 || trees < 1 || depth < 1)
      throw std::invalid_argument("cascade config: stages, trees, depth must be >= 1");
    if (patch_side < 1 || patch_side % 2 == 0)
      throw std::invalid_argument("cascade config: patch side must be odd");
    if (hidden < 1 || epochs < 1 || batch_size < 1 || !(lr > 0.0))
      throw std::invalid_argument("cascade config: bad training hyper-parameters");
  }
};

namespace detail {

// Patch bundles for every sample at its current estimate, flattened to
// (count, L * side * side).
inline Tensor stage_inputs(const LandmarkDataset& data, std::span<const LandmarkShape> ests,
                           int patch_side) {
  const int64_t dim =
      static_cast<int64_t>(data.landmarks) * patch_side * patch_side;
  Tensor inputs({static_cast<int64_t>(data.count()), dim});
  for (int n = 0; n < data.count(); ++n) {
    Tensor bundle = extract_patches(data.images[static_cast<size_t>(n)],
                                    ests[static_cast<size_t>(n)], patch_side);
    std::copy(bundle.data.begin(), bundle.data.end(),
              inputs.data.begin() + static_cast<int64_t>(n) * dim);
  }
  return inputs;
}

inline void advance_estimates(const Forest& stage, const Tensor& inputs,
                              std::vector<LandmarkShape>& ests) {
  const int64_t n = inputs.shape[0];
  constexpr int64_t chunk = 256;
  for (int64_t off = 0; off < n; off += chunk) {
    std::vector<int> idx;
    for (int64_t i = off; i < std::min(n, off + chunk); ++i) idx.push_back(static_cast<int>(i));
    Tensor delta = forest_predict_batch(stage, gather_rows(inputs, idx));
    const int64_t dim = delta.shape[1];
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < dim; ++j)
        ests[static_cast<size_t>(idx[i])].xy[static_cast<size_t>(j)] +=
            delta.data[static_cast<int64_t>(i) * dim + j];
  }
}

}  // namespace detail

// Greedy stage-wise training: stage t regresses the residual between ground
// truth and the current estimate, then the estimates advance through it.
inline CascadeModel train_cascade(const LandmarkDataset& data, const CascadeConfig& config,
                                  std::ostream* metrics_out = nullptr) {
  config.validate();
  if (data.count() == 0) throw std::invalid_argument("train_cascade: empty dataset");
  CascadeModel model;
  model.landmarks = data.landmarks;
  model.patch_side = config.patch_side;
  model.image_side = data.image_side;
  model.mean_shape = init_shape(data);

  std::vector<LandmarkShape> ests(static_cast<size_t>(data.count()), model.mean_shape);
  const int64_t input_dim =
      static_cast<int64_t>(data.landmarks) * config.patch_side * config.patch_side;
  const int target_dim = 2 * data.landmarks;
  TreeTopology topo(config.depth);

  for (int stage = 0; stage < config.stages; ++stage) {
    RegrDataset ds;
    ds.inputs = detail::stage_inputs(data, ests, config.patch_side);
    ds.targets = Tensor({static_cast<int64_t>(data.count()), target_dim});
    for (int n = 0; n < data.count(); ++n)
      for (int j = 0; j < target_dim; ++j)
        ds.targets.data[static_cast<size_t>(n) * target_dim + j] =
            data.shapes[static_cast<size_t>(n)].xy[static_cast<size_t>(j)] -
            ests[static_cast<size_t>(n)].xy[static_cast<size_t>(j)];

    Rng rng(config.seed + static_cast<uint64_t>(stage) * 9973);
    Extractor e = Extractor::mlp({static_cast<int>(input_dim), config.hidden,
                                  config.trees * topo.split_count()},
                                 rng);
    Forest forest = Forest::make(TaskMode::regression, std::move(e), config.trees,
                                 config.depth, target_dim);
    TrainConfig tc;
    tc.mode = TaskMode::regression;
    tc.epochs = config.epochs;
    tc.batch_size = config.batch_size;
    tc.lr = config.lr;
    tc.seed = config.seed + static_cast<uint64_t>(stage);
    std::vector<EpochMetrics> hist = train_regressor(forest, ds, tc);
    if (metrics_out)
      *metrics_out << "{\"stage\":" << stage + 1 << ",\"loss\":" << hist.back().loss << "}\n";

    detail::advance_estimates(forest, ds.inputs, ests);
    model.stages.push_back(std::move(forest));
  }
  return model;
}

// Mean landmark error before any stage and after each stage, over a dataset.
inline std::vector<double> stage_errors(const CascadeModel& m, const LandmarkDataset& data) {
  std::vector<LandmarkShape> ests(static_cast<size_t>(data.count()), m.mean_shape);
  auto current_error = [&] {
    double e = 0.0;
    for (int n = 0; n < data.count(); ++n)
      e += mean_landmark_error(ests[static_cast<size_t>(n)], data.shapes[static_cast<size_t>(n)]);
    return e / data.count();
  };
  std::vector<double> errors{current_error()};
  for (const Forest& stage : m.stages) {
    Tensor inputs = detail::stage_inputs(data, ests, m.patch_side);
    detail::advance_estimates(stage, inputs, ests);
    errors.push_back(current_error());
  }
  return errors;
}

// Routing-score histogram of each stage over a dataset, with the estimates
// advanced between stages exactly as during prediction.
inline std::vector<ScoreHistogram> cascade_histograms(const CascadeModel& m,
                                                      const LandmarkDataset& data, int bins) {
  std::vector<LandmarkShape> ests(static_cast<size_t>(data.count()), m.mean_shape);
  std::vector<ScoreHistogram> hists;
  for (const Forest& stage : m.stages) {
    Tensor inputs = detail::stage_inputs(data, ests, m.patch_side);
    hists.push_back(collect_score_histogram(stage, inputs, bins));
    detail::advance_estimates(stage, inputs, ests);
  }
  return hists;
}

// DSM of one stage's splitting node with respect to the patch bundle,
// returned as (L, side, side) so each landmark's patch map can be
// normalized and exported on its own.
inline SaliencyMap cascade_patch_dsm(const CascadeModel& m, int stage, const Tensor& image,
                                     const LandmarkShape& estimate, int node) {
  if (stage < 0 || stage >= m.stage_count())
    throw std::invalid_argument("dsm: stage " + std::to_string(stage) + " out of range");
  Tensor bundle = extract_patches(image, estimate, m.patch_side);
  Tensor flat = bundle;
  flat.shape = {numel(bundle.shape)};
  SaliencyMap map = compute_dsm(m.stages[static_cast<size_t>(stage)], flat, node);
  map.raw.shape = bundle.shape;
  return map;
}

// All stage scores pooled, for a single whole-cascade histogram.
inline std::vector<double> cascade_scores(const CascadeModel& m, const LandmarkDataset& data) {
  std::vector<LandmarkShape> ests(static_cast<size_t>(data.count()), m.mean_shape);
  std::vector<double> all;
  for (const Forest& stage : m.stages) {
    Tensor inputs = detail::stage_inputs(data, ests, m.patch_side);
    std::vector<double> s = collect_scores(stage, inputs);
    all.insert(all.end(), s.begin(), s.end());
    detail::advance_estimates(stage, inputs, ests);
  }
  return all;
}

// ---- dataset cache ---------------------------------------------------------
// Binary layout, little-endian: magic "NDFS", u32 version, u32 count, u32
// landmark count, u32 image side, then per sample side*side image bytes and
// 2L float32 coordinates.

namespace detail {

inline void put_u32(std::ofstream& out, uint32_t v) {
  const uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::ifstream& in, const std::string& what) {
  uint8_t b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw data_error("dataset cache: truncated " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_dataset_cache(const LandmarkDataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("dataset cache: cannot write " + path);
  out.write("NDFS", 4);
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<uint32_t>(d.count()));
  detail::put_u32(out, static_cast<uint32_t>(d.landmarks));
  detail::put_u32(out, static_cast<uint32_t>(d.image_side));
  for (int n = 0; n < d.count(); ++n) {
    const Tensor& img = d.images[static_cast<size_t>(n)];
    std::vector<uint8_t> bytes(img.data.size());
    for (size_t i = 0; i < bytes.size(); ++i) {
      const double v = std::min(1.0, std::max(0.0, img.data[i]));
      bytes[i] = static_cast<uint8_t>(std::floor(v * 255.0 + 0.5));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    for (double c : d.shapes[static_cast<size_t>(n)].xy) {
      const float f = static_cast<float>(c);
      static_assert(sizeof(float) == 4);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!out) throw data_error("dataset cache: write failed for " + path);
}

inline LandmarkDataset load_dataset_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("dataset cache: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "NDFS", 4) != 0)
    throw data_error("dataset cache: bad magic in " + path);
  const uint32_t version = detail::get_u32(in, "version");
  if (version != 1)
    throw data_error("dataset cache: unsupported version " + std::to_string(version));
  LandmarkDataset d;
  const uint32_t count = detail::get_u32(in, "count");
  d.landmarks = static_cast<int>(detail::get_u32(in, "landmark count"));
  d.image_side = static_cast<int>(detail::get_u32(in, "image side"));
  const size_t pixels = static_cast<size_t>(d.image_side) * d.image_side;
  for (uint32_t n = 0; n < count; ++n) {
    std::vector<uint8_t> bytes(pixels);
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(pixels)))
      throw data_error("dataset cache: truncated image " + std::to_string(n));
    Tensor img({d.image_side, d.image_side});
    for (size_t i = 0; i < pixels; ++i) img.data[i] = bytes[i] / 255.0;
    d.images.push_back(std::move(img));
    LandmarkShape s;
    for (int j = 0; j < 2 * d.landmarks; ++j) {
      float f;
      if (!in.read(reinterpret_cast<char*>(&f), 4))
        throw data_error("dataset cache: truncated shape " + std::to_string(n));
      s.xy.push_back(static_cast<double>(f));
    }
    d.shapes.push_back(std::move(s));
  }
  return d;
}

}  // namespace ndf
