#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace coq {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Versioned flat key -> float32-array map with a metadata header. Written
// atomically (temp file + rename) so a crash never leaves a torn checkpoint.
struct Checkpoint {
  static constexpr int kVersion = 1;
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, std::vector<float>> arrays;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& cp) {
  nlohmann::json doc;
  doc["version"] = Checkpoint::kVersion;
  doc["metadata"] = cp.metadata;
  nlohmann::json arrays = nlohmann::json::object();
  for (const auto& [key, values] : cp.arrays) arrays[key] = values;
  doc["arrays"] = arrays;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out << doc.dump(2) << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError("cannot rename " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path + ": " + e.what());
  }
  if (!doc.contains("version") || doc["version"].get<int>() != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version in " + path);
  Checkpoint cp;
  cp.metadata = doc.value("metadata", nlohmann::json::object());
  for (const auto& [key, values] : doc.at("arrays").items())
    cp.arrays[key] = values.get<std::vector<float>>();
  return cp;
}

}  // namespace coq
