#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "defmatch/descriptor.hpp"
#include "defmatch/tensor_io.hpp"

namespace defmatch {

// A field on disk is <base>.json plus two DTEN1 payloads next to it. The
// manifest records k and the descriptor width so a reader can validate shapes
// before touching the payloads.
inline void save_field(const DescriptorField& field, const std::filesystem::path& base) {
  const std::filesystem::path dir = base.parent_path();
  const std::string stem = base.filename().string();
  save_tensor(field.d, dir / (stem + "_d.dten"));
  save_tensor(field.m, dir / (stem + "_m.dten"));
  nlohmann::ordered_json manifest;
  manifest["kind"] = "descriptor_field";
  manifest["k"] = field.k;
  manifest["c"] = field.d.extent(2);
  manifest["d"] = stem + "_d.dten";
  manifest["m"] = stem + "_m.dten";
  std::ofstream os(base.string() + ".json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_field: cannot write manifest");
  os << manifest.dump(2) << "\n";
}

inline DescriptorField load_field(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("load_field: cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_field: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("kind", "") != "descriptor_field")
    throw std::runtime_error("load_field: not a descriptor_field manifest");
  const std::filesystem::path dir = manifest_path.parent_path();
  DescriptorField f;
  f.k = manifest.at("k").get<int>();
  f.d = load_tensor(dir / manifest.at("d").get<std::string>());
  f.m = load_tensor(dir / manifest.at("m").get<std::string>());
  if (f.k <= 0 || f.d.rank() != 3 || f.m.rank() != 2 ||
      f.d.extent(0) != f.m.extent(0) || f.d.extent(1) != f.m.extent(1) ||
      f.d.extent(2) != manifest.at("c").get<int>())
    throw std::runtime_error("load_field: manifest and payload shapes disagree");
  return f;
}

}  // namespace defmatch
