#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndf/cascade.hpp"
#include "ndf/forest.hpp"

namespace ndf {

using nlohmann::json;

namespace detail {

// FNV-1a over the IEEE bit patterns of every parameter, accumulated in
// serialization order. Catches silent corruption of numeric payloads that
// still parses as valid JSON.
struct ParamChecksum {
  uint64_t state = 1469598103934665603ull;

  void add(double v) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      state ^= (bits >> (8 * b)) & 0xffu;
      state *= 1099511628211ull;
    }
  }

  void add(const std::vector<double>& values) {
    for (double v : values) add(v);
  }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state));
    return buf;
  }
};

inline json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"data", t.data}};
}

inline Tensor tensor_from_json(const json& j) {
  return Tensor::from(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline json extractor_to_json(const Extractor& e, ParamChecksum& sum) {
  json params = json::array();
  for (size_t i = 0; i < e.params.size(); ++i) {
    if (!e.params[i].all_finite())
      throw numeric_error("save: non-finite values in parameter " + e.param_names[i]);
    json p = tensor_to_json(e.params[i]);
    p["name"] = e.param_names[i];
    params.push_back(std::move(p));
    sum.add(e.params[i].data);
  }
  return json{{"kind", extractor_kind_name(e.kind)}, {"in_h", e.in_h},   {"in_w", e.in_w},
              {"conv1", e.conv1},                    {"conv2", e.conv2}, {"mlp_dims", e.mlp_dims},
              {"out_dim", e.out_dim},                {"params", params}};
}

inline Extractor extractor_from_json(const json& j, ParamChecksum& sum) {
  Extractor e;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "mlp")
    e.kind = ExtractorKind::mlp;
  else if (kind == "conv_block")
    e.kind = ExtractorKind::conv_block;
  else if (kind == "conv_small")
    e.kind = ExtractorKind::conv_small;
  else
    throw data_error("load: unknown extractor kind '" + kind + "'");
  e.in_h = j.at("in_h").get<int>();
  e.in_w = j.at("in_w").get<int>();
  e.conv1 = j.at("conv1").get<int>();
  e.conv2 = j.at("conv2").get<int>();
  e.mlp_dims = j.at("mlp_dims").get<std::vector<int>>();
  e.out_dim = j.at("out_dim").get<int>();
  for (const json& p : j.at("params")) {
    e.param_names.push_back(p.at("name").get<std::string>());
    e.params.push_back(tensor_from_json(p));
    sum.add(e.params.back().data);
  }
  return e;
}

inline json forest_to_json(const Forest& f, ParamChecksum& sum) {
  json trees = json::array();
  for (const Tree& t : f.trees) {
    if (!t.leaves.values.all_finite())
      throw numeric_error("save: non-finite values in a leaf store");
    json tj{{"depth", t.topo.depth},
            {"assignment", t.assign.units},
            {"leaves", tensor_to_json(t.leaves.values)}};
    trees.push_back(std::move(tj));
  }
  json out{{"mode", task_mode_name(f.mode)},
           {"extractor", extractor_to_json(f.extractor, sum)},
           {"trees", trees}};
  for (const Tree& t : f.trees) sum.add(t.leaves.values.data);
  return out;
}

inline Forest forest_from_json(const json& j, ParamChecksum& sum) {
  Forest f;
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "classification")
    f.mode = TaskMode::classification;
  else if (mode == "regression")
    f.mode = TaskMode::regression;
  else
    throw data_error("load: unknown mode '" + mode + "'");
  f.extractor = extractor_from_json(j.at("extractor"), sum);
  for (const json& tj : j.at("trees")) {
    Tree t{TreeTopology(tj.at("depth").get<int>()), {}, {}};
    t.assign.units = tj.at("assignment").get<std::vector<int>>();
    t.assign.validate(f.extractor.out_dim);
    t.leaves.mode = f.mode;
    t.leaves.values = tensor_from_json(tj.at("leaves"));
    if (t.leaves.leaf_count() != t.topo.leaf_count())
      throw data_error("load: leaf store does not match tree depth");
    f.trees.push_back(std::move(t));
  }
  if (f.trees.empty()) throw data_error("load: forest has no trees");
  for (const Tree& t : f.trees) sum.add(t.leaves.values.data);
  return f;
}

inline json read_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("load: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error("load: " + path + " is not valid JSON: " + e.what());
  }
  const int version = j.value("format_version", -1);
  if (version != 1)
    throw data_error("load: " + path + " has format_version " + std::to_string(version) +
                     "; this build reads version 1 only");
  return j;
}

inline void write_model_file(json j, const std::string& path, const std::string& kind,
                             const ParamChecksum& sum, json metadata) {
  j["format_version"] = 1;
  j["kind"] = kind;
  j["param_checksum"] = sum.hex();
  if (!metadata.is_null()) j["metadata"] = std::move(metadata);
  std::ofstream out(path);
  if (!out) throw data_error("save: cannot write " + path);
  out << j.dump(1, '\t') << "\n";
  if (!out) throw data_error("save: write failed for " + path);
}

inline void verify_checksum(const json& j, const ParamChecksum& sum, const std::string& path) {
  const std::string stored = j.value("param_checksum", "");
  if (stored != sum.hex())
    throw data_error("load: " + path + " parameter checksum mismatch (stored " + stored +
                     ", computed " + sum.hex() + ")");
}

}  // namespace detail

inline void save_model(const Forest& f, const std::string& path, json metadata = {}) {
  detail::ParamChecksum sum;
  json j = detail::forest_to_json(f, sum);
  detail::write_model_file(std::move(j), path, "forest", sum, std::move(metadata));
}

inline void save_model(const CascadeModel& m, const std::string& path, json metadata = {}) {
  detail::ParamChecksum sum;
  sum.add(m.mean_shape.xy);
  json stages = json::array();
  for (const Forest& f : m.stages) stages.push_back(detail::forest_to_json(f, sum));
  json j{{"landmarks", m.landmarks},
         {"patch_side", m.patch_side},
         {"image_side", m.image_side},
         {"mean_shape", m.mean_shape.xy},
         {"stages", stages}};
  detail::write_model_file(std::move(j), path, "cascade", sum, std::move(metadata));
}

inline std::string model_kind(const std::string& path) {
  return detail::read_model_file(path).value("kind", "");
}

inline Forest load_forest(const std::string& path) {
  json j = detail::read_model_file(path);
  if (j.value("kind", "") != "forest")
    throw data_error("load: " + path + " holds a '" + j.value("kind", "?") +
                     "' model, expected 'forest'");
  detail::ParamChecksum sum;
  Forest f = detail::forest_from_json(j, sum);
  detail::verify_checksum(j, sum, path);
  return f;
}

inline CascadeModel load_cascade(const std::string& path) {
  json j = detail::read_model_file(path);
  if (j.value("kind", "") != "cascade")
    throw data_error("load: " + path + " holds a '" + j.value("kind", "?") +
                     "' model, expected 'cascade'");
  CascadeModel m;
  m.landmarks = j.at("landmarks").get<int>();
  m.patch_side = j.at("patch_side").get<int>();
  m.image_side = j.at("image_side").get<int>();
  m.mean_shape.xy = j.at("mean_shape").get<std::vector<double>>();
  detail::ParamChecksum sum;
  sum.add(m.mean_shape.xy);
  for (const json& sj : j.at("stages")) m.stages.push_back(detail::forest_from_json(sj, sum));
  detail::verify_checksum(j, sum, path);
  return m;
}

}  // namespace ndf
