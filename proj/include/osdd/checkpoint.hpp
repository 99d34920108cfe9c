#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "osdd/layers.hpp"

namespace osdd {

// Checkpoint layout: <dir>/manifest.json lists every parameter (stable name,
// shape, byte offset) plus caller-supplied metadata under "extra";
// <dir>/weights.bin holds raw little-endian float32 in the listed order.
template <typename T>
void save_checkpoint(const ParamStore<T>& ps, const std::string& dir,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["extra"] = extra;
  nlohmann::json plist = nlohmann::json::array();

  std::ofstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) fail_validation("cannot write ", dir, "/weights.bin");
  int64_t offset = 0;
  for (const Param<T>* p : ps.all()) {
    plist.push_back({{"name", p->name},
                     {"shape", {p->value.shape.n, p->value.shape.c, p->value.shape.h,
                                p->value.shape.w}},
                     {"offset", offset}});
    for (T v : p->value.data) {
      const float f = static_cast<float>(v);
      bin.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
    offset += p->value.numel() * int64_t(sizeof(float));
  }
  manifest["params"] = plist;
  std::ofstream mf(dir + "/manifest.json");
  if (!mf) fail_validation("cannot write ", dir, "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_manifest(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) fail_validation("missing checkpoint manifest in ", dir);
  nlohmann::json manifest;
  mf >> manifest;
  return manifest;
}

// Strict load: the store must contain exactly the same names and shapes as
// the checkpoint (registration defines the architecture; files only carry
// values).
template <typename T>
void load_checkpoint(ParamStore<T>& ps, const std::string& dir) {
  const nlohmann::json manifest = read_checkpoint_manifest(dir);
  std::ifstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) fail_validation("missing ", dir, "/weights.bin");

  size_t seen = 0;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name");
    if (!ps.has(name)) fail_validation("checkpoint ", dir, " has unknown parameter ", name);
    Param<T>& p = ps.at(name);
    const auto sh = entry.at("shape");
    const Shape file_shape{sh.at(0), sh.at(1), sh.at(2), sh.at(3)};
    if (file_shape != p.value.shape)
      fail_validation("checkpoint ", dir, " parameter ", name, " shape ", file_shape.str(),
                      " != model shape ", p.value.shape.str());
    bin.seekg(entry.at("offset").get<int64_t>());
    for (auto& v : p.value.data) {
      float f = 0;
      bin.read(reinterpret_cast<char*>(&f), sizeof(float));
      if (!bin) fail_validation("truncated weights in ", dir, " at parameter ", name);
      v = static_cast<T>(f);
    }
    ++seen;
  }
  if (seen != ps.size())
    fail_validation("checkpoint ", dir, " covers ", seen, " of ", ps.size(),
                    " model parameters");
}

}  // namespace osdd
