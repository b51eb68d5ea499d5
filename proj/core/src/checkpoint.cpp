#include <cstring>
#include <fstream>

#include "tdt/encoder.hpp"
#include "tdt/errors.hpp"
#include "tdt/hash.hpp"

namespace tdt::model {

using nlohmann::json;

void save_checkpoint(const std::string& path, const ModelParams& params, const json& meta) {
  json doc;
  doc["format"] = "tdt-checkpoint-v1";
  doc["config"] = to_json(params.config);
  doc["confidence_trained"] = params.confidence_trained;
  doc["meta"] = meta;
  json arrays = json::array();
  for (const auto& np : params.named_parameters()) {
    json entry;
    entry["name"] = np.name;
    entry["shape"] = np.tensor.shape();
    entry["data"] = std::vector<double>(np.tensor.data().begin(), np.tensor.data().end());
    arrays.push_back(std::move(entry));
  }
  doc["parameters"] = std::move(arrays);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << doc.dump() << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  if (doc.value("format", "") != "tdt-checkpoint-v1") throw ParseError("checkpoint " + path + ": unknown format");
  LoadedCheckpoint out;
  out.params = ModelParams::init(model_config_from_json(doc.at("config")), 0);
  out.params.confidence_trained = doc.value("confidence_trained", false);
  out.meta = doc.value("meta", json::object());
  auto named = out.params.named_parameters();
  const auto& arrays = doc.at("parameters");
  if (arrays.size() != named.size()) throw ParseError("checkpoint " + path + ": parameter count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = arrays[i];
    if (entry.at("name").get<std::string>() != named[i].name)
      throw ParseError("checkpoint " + path + ": expected parameter " + named[i].name);
    if (entry.at("shape").get<ad::Shape>() != named[i].tensor.shape())
      throw ParseError("checkpoint " + path + ": shape mismatch for " + named[i].name);
    auto values = entry.at("data").get<std::vector<double>>();
    auto dst = named[i].tensor.mutable_data();
    if (values.size() != dst.size()) throw ParseError("checkpoint " + path + ": size mismatch for " + named[i].name);
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return out;
}

std::string parameter_digest(const ModelParams& params) {
  std::vector<unsigned char> bytes;
  for (const auto& np : params.named_parameters()) {
    auto d = np.tensor.data();
    const auto* p = reinterpret_cast<const unsigned char*>(d.data());
    bytes.insert(bytes.end(), p, p + d.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

}  // namespace tdt::model
