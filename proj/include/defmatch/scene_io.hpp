#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "defmatch/geometry.hpp"
#include "defmatch/tensor_io.hpp"

namespace defmatch {

inline const char* profile_name(DepthProfile p) {
  switch (p) {
    case DepthProfile::plane:
      return "plane";
    case DepthProfile::ridge:
      return "ridge";
    case DepthProfile::cloud:
      return "cloud";
  }
  return "plane";
}

inline DepthProfile profile_from_name(const std::string& s) {
  if (s == "plane") return DepthProfile::plane;
  if (s == "ridge") return DepthProfile::ridge;
  if (s == "cloud") return DepthProfile::cloud;
  throw std::runtime_error("unknown depth profile '" + s + "'");
}

namespace detail {

inline nlohmann::json mat3_to_json(const Eigen::Matrix3d& m) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a.push_back(m(i, j));
  return a;
}

inline Eigen::Matrix3d mat3_from_json(const nlohmann::json& a) {
  if (!a.is_array() || a.size() != 9)
    throw std::runtime_error("scene archive: expected 9-element matrix");
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = a[3 * i + j].get<double>();
  return m;
}

}  // namespace detail

// Scene archive: one directory holding the four tensors plus scene.json with
// the calibration, pose, and generator seed.
inline void save_scene(const ScenePair& sp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(sp.img1, dir / "img1.dten");
  save_tensor(sp.img2, dir / "img2.dten");
  save_tensor(sp.depth1, dir / "depth1.dten");
  save_tensor(sp.depth2, dir / "depth2.dten");

  nlohmann::ordered_json j;
  j["kind"] = "scene_pair";
  j["seed"] = sp.seed;
  j["profile"] = profile_name(sp.profile);
  j["baseline"] = sp.baseline;
  j["k1"] = detail::mat3_to_json(sp.k1);
  j["k2"] = detail::mat3_to_json(sp.k2);
  j["r"] = detail::mat3_to_json(sp.r);
  j["t_dir"] = {sp.t_dir(0), sp.t_dir(1), sp.t_dir(2)};
  if (sp.has_homography) j["h_gt"] = detail::mat3_to_json(sp.h_gt);
  j["files"] = {{"img1", "img1.dten"},
                {"img2", "img2.dten"},
                {"depth1", "depth1.dten"},
                {"depth2", "depth2.dten"}};

  std::ofstream out(dir / "scene.json");
  if (!out) throw std::runtime_error("save_scene: cannot write " + (dir / "scene.json").string());
  out << j.dump(2) << "\n";
}

inline ScenePair load_scene(const std::filesystem::path& dir) {
  std::ifstream in(dir / "scene.json");
  if (!in) throw std::runtime_error("load_scene: cannot open " + (dir / "scene.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_scene: bad json: " + std::string(e.what()));
  }
  if (j.value("kind", "") != "scene_pair")
    throw std::runtime_error("load_scene: not a scene archive");

  ScenePair sp;
  sp.seed = j.at("seed").get<std::uint64_t>();
  sp.profile = profile_from_name(j.at("profile").get<std::string>());
  sp.baseline = j.at("baseline").get<double>();
  sp.k1 = detail::mat3_from_json(j.at("k1"));
  sp.k2 = detail::mat3_from_json(j.at("k2"));
  sp.r = detail::mat3_from_json(j.at("r"));
  const auto& td = j.at("t_dir");
  if (!td.is_array() || td.size() != 3)
    throw std::runtime_error("load_scene: t_dir must have 3 entries");
  for (int i = 0; i < 3; ++i) sp.t_dir(i) = td[i].get<double>();
  if (j.contains("h_gt")) {
    sp.h_gt = detail::mat3_from_json(j.at("h_gt"));
    sp.has_homography = true;
  }

  const auto& files = j.at("files");
  sp.img1 = load_tensor(dir / files.at("img1").get<std::string>());
  sp.img2 = load_tensor(dir / files.at("img2").get<std::string>());
  sp.depth1 = load_tensor(dir / files.at("depth1").get<std::string>());
  sp.depth2 = load_tensor(dir / files.at("depth2").get<std::string>());
  if (sp.img1.rank() != 3 || sp.depth1.rank() != 2 ||
      sp.img1.extent(0) != sp.depth1.extent(0) || sp.img1.extent(1) != sp.depth1.extent(1))
    throw std::runtime_error("load_scene: tensor extents disagree with a scene pair");
  return sp;
}

}  // namespace defmatch
