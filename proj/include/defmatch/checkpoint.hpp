#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "defmatch/descriptor.hpp"
#include "defmatch/keypoint.hpp"
#include "defmatch/tensor_io.hpp"

namespace defmatch {

// On-disk checkpoint: a directory holding manifest.json plus one tensor file
// per parameter. Parameter order follows parameters(), which is fixed by the
// struct layout, so files are addressed by index.
struct Checkpoint {
  std::optional<DescriptorNetParams> desc;
  std::optional<KeypointNetParams> kp;
  long desc_step = 0;
  long kp_step = 0;
};

namespace detail {

inline std::string param_file(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03zu.dten", prefix.c_str(), i);
  return buf;
}

inline void save_params(const std::vector<Tensor*>& params, const std::string& prefix,
                        const std::filesystem::path& dir, nlohmann::ordered_json& files) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = param_file(prefix, i);
    save_tensor(*params[i], dir / name);
    files.push_back(name);
  }
}

inline void load_params(const std::vector<Tensor*>& params, const nlohmann::ordered_json& files,
                        const std::filesystem::path& dir) {
  if (files.size() != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor loaded = load_tensor(dir / files[i].get<std::string>());
    Tensor* dst = params[i];
    if (loaded.size() != dst->size())
      throw std::runtime_error("checkpoint: parameter extent mismatch at index " +
                               std::to_string(i));
    for (std::int64_t k = 0; k < dst->size(); ++k)
      dst->at(static_cast<int>(k)) = loaded.at(static_cast<int>(k));
  }
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["kind"] = "checkpoint";
  if (ck.desc) {
    DescriptorNetParams& d = const_cast<DescriptorNetParams&>(*ck.desc);
    nlohmann::ordered_json section;
    section["widths"] = d.cfg.widths;
    section["channels"] = d.cfg.channels;
    section["patch"] = d.cfg.patch;
    section["enc_layers"] = d.cfg.enc_layers;
    section["heads"] = d.cfg.heads;
    section["points"] = d.cfg.points;
    section["step"] = ck.desc_step;
    section["files"] = nlohmann::ordered_json::array();
    detail::save_params(d.parameters(), "desc", dir, section["files"]);
    m["desc"] = section;
  }
  if (ck.kp) {
    KeypointNetParams& k = const_cast<KeypointNetParams&>(*ck.kp);
    nlohmann::ordered_json section;
    section["width"] = k.width;
    section["kernel"] = k.kernel;
    section["step"] = ck.kp_step;
    section["files"] = nlohmann::ordered_json::array();
    detail::save_params(k.parameters(), "kp", dir, section["files"]);
    m["kp"] = section;
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("save_checkpoint: cannot write manifest");
  out << m.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("load_checkpoint: no manifest in " + dir.string());
  nlohmann::ordered_json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: bad manifest: ") + e.what());
  }
  if (!m.contains("kind") || m["kind"] != "checkpoint")
    throw std::runtime_error("load_checkpoint: not a checkpoint manifest");
  Checkpoint ck;
  try {
    if (m.contains("desc")) {
      const auto& section = m["desc"];
      DescriptorNetConfig cfg;
      for (int i = 0; i < 5; ++i) cfg.widths[i] = section["widths"][i].get<int>();
      cfg.channels = section["channels"].get<int>();
      cfg.patch = section["patch"].get<int>();
      cfg.enc_layers = section["enc_layers"].get<int>();
      cfg.heads = section["heads"].get<int>();
      cfg.points = section["points"].get<int>();
      ck.desc = DescriptorNetParams::init(cfg, 0);
      ck.desc_step = section["step"].get<long>();
      detail::load_params(ck.desc->parameters(), section["files"], dir);
    }
    if (m.contains("kp")) {
      const auto& section = m["kp"];
      ck.kp = KeypointNetParams::init(section["width"].get<int>(),
                                       section["kernel"].get<int>(), 0);
      ck.kp_step = section["step"].get<long>();
      detail::load_params(ck.kp->parameters(), section["files"], dir);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: bad manifest: ") + e.what());
  }
  return ck;
}

}  // namespace defmatch
