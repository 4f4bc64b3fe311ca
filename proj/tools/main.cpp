// Command-line front end: synthetic scene generation, matching, training and
// evaluation glued into reproducible runs. Every command writes a config echo
// that replays the run byte-for-byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "defmatch/checkpoint.hpp"
#include "defmatch/geometry.hpp"
#include "defmatch/matcher.hpp"
#include "defmatch/metrics.hpp"
#include "defmatch/scene_io.hpp"
#include "defmatch/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace defmatch;

namespace {

// Pre-condition and IO problems exit with code 2; numeric failures (NaN,
// degenerate geometry) exit with code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int jobs = 1;

  int height = 64;
  int width = 64;
  std::string profile = "plane";  // plane | ridge | cloud | mixed
  double baseline = 0.25;
  double rotation_mag = 0.12;
  std::string scene_dir;

  std::string checkpoint;
  bool random_init = false;
  std::vector<int> widths = {8, 8, 16, 16, 16};
  int channels = 16;
  int enc_layers = 1;
  int heads = 2;
  int points = 2;
  int kp_width = 8;
  int kp_kernel = 3;

  int top_k = 128;
  int coarse_top_k = 128;
  double tau = 0.1;
  double mnn_threshold = 0.01;
  int nms_window = 5;
  double nms_threshold = 0.05;
  double t_det = 0.1;
  bool semi_dense = false;
  bool gt_fundamental_flag = false;

  int scene_count = 8;
  std::string desc_mode = "model";  // model | oracle | random
  int desc_dim = 32;
  int ransac_iters = 250;
  double ransac_thresh = 1.0;

  std::string stage = "both";  // descriptor | keypoint | both
  int steps = 60;
  double lr = 0.5;
  double kp_lr = 0.1;
  double clip_norm = 1.0;
  double alpha = 0.25;
  double gamma = 2.0;
  double t_rel = 1.0;
  int peaky_window = 5;
  double p_norm = 2.0;
  double match_radius = 5.0;
  int gt_count = 12;
  int train_top_k = 4;
  bool resume = false;

  double band_lo = 2000.0;
  double band_hi = 20000.0;
  bool scale_band = true;
};

#define CONFIG_FIELDS(X)                                                              \
  X(seed) X(out_dir) X(jobs) X(height) X(width) X(profile) X(baseline)                \
  X(rotation_mag) X(scene_dir) X(checkpoint) X(random_init) X(widths) X(channels)     \
  X(enc_layers) X(heads) X(points) X(kp_width) X(kp_kernel) X(top_k) X(coarse_top_k)  \
  X(tau) X(mnn_threshold) X(nms_window) X(nms_threshold) X(t_det) X(semi_dense)       \
  X(gt_fundamental_flag) X(scene_count) X(desc_mode) X(desc_dim) X(ransac_iters)      \
  X(ransac_thresh) X(stage) X(steps) X(lr) X(kp_lr) X(clip_norm) X(alpha) X(gamma)    \
  X(t_rel) X(peaky_window) X(p_norm) X(match_radius) X(gt_count) X(train_top_k)       \
  X(resume) X(band_lo) X(band_hi) X(scale_band)

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["command"] = c.command;
#define PUT(field) j[#field] = c.field;
  CONFIG_FIELDS(PUT)
#undef PUT
  return j;
}

void config_from_json(RunConfig& c, const ordered_json& j) {
  static const std::vector<std::string> known = {
      "command",
#define NAME(field) #field,
      CONFIG_FIELDS(NAME)
#undef NAME
  };
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw UsageError("config: unknown key \"" + item.key() + "\"");
  }
  try {
#define GET(field) \
  if (j.contains(#field)) j.at(#field).get_to(c.field);
    CONFIG_FIELDS(GET)
#undef GET
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

// Flags beat the config file: parse into a staging struct, then copy over only
// the options that were actually given on the command line.
struct Binder {
  CLI::App* sub = nullptr;
  RunConfig staged;
  std::string config_path;
  std::vector<std::pair<std::string, std::function<void(RunConfig&, const RunConfig&)>>>
      appliers;

  static std::string lookup_name(const std::string& names) {
    std::string first = names.substr(0, names.find(','));
    if (!first.empty() && first[0] == '!') first.erase(0, 1);
    return first;
  }
  template <class T>
  void opt(const std::string& name, T RunConfig::*field, const std::string& help) {
    sub->add_option(name, staged.*field, help)->capture_default_str();
    appliers.emplace_back(lookup_name(name),
                          [field](RunConfig& d, const RunConfig& s) { d.*field = s.*field; });
  }
  void flg(const std::string& name, bool RunConfig::*field, const std::string& help) {
    sub->add_flag(name, staged.*field, help);
    appliers.emplace_back(lookup_name(name),
                          [field](RunConfig& d, const RunConfig& s) { d.*field = s.*field; });
  }

  RunConfig resolve(const std::string& command) const {
    RunConfig out;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw UsageError("cannot open config file " + config_path);
      ordered_json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
      }
      config_from_json(out, j);
    }
    for (const auto& [name, apply] : appliers)
      if (sub->count(name) > 0) apply(out, staged);
    out.command = command;
    return out;
  }
};

void add_common(Binder& b) {
  b.sub->add_option("--config", b.config_path, "JSON config file; explicit flags override it");
  b.opt("--seed", &RunConfig::seed, "master seed for scenes, weights and sampling");
  b.opt("--out-dir", &RunConfig::out_dir, "output directory, created if missing");
  b.opt("--jobs", &RunConfig::jobs, "worker threads for eval scene processing");
}

void add_scene(Binder& b) {
  b.opt("--height", &RunConfig::height, "scene image height (multiple of 64)");
  b.opt("--width", &RunConfig::width, "scene image width (multiple of 64)");
  b.opt("--profile", &RunConfig::profile, "depth profile: plane, ridge, cloud or mixed");
  b.opt("--baseline", &RunConfig::baseline, "camera baseline in world units; 0 = pure rotation");
  b.opt("--rotation-mag", &RunConfig::rotation_mag, "extra rotation magnitude in radians");
}

void add_model(Binder& b) {
  b.opt("--checkpoint", &RunConfig::checkpoint, "checkpoint directory with trained weights");
  b.flg("--random-init", &RunConfig::random_init, "use randomly initialised weights");
  b.opt("--widths", &RunConfig::widths, "descriptor pyramid widths (5 values)");
  b.opt("--channels", &RunConfig::channels, "descriptor/encoder channel count");
  b.opt("--enc-layers", &RunConfig::enc_layers, "deformable encoder layers");
  b.opt("--heads", &RunConfig::heads, "attention heads");
  b.opt("--points", &RunConfig::points, "sampling points per head and level");
  b.opt("--kp-width", &RunConfig::kp_width, "keypoint branch width");
  b.opt("--kp-kernel", &RunConfig::kp_kernel, "keypoint branch kernel extent");
}

void add_matching(Binder& b) {
  b.opt("--top-k", &RunConfig::top_k, "sparse keypoints per image");
  b.opt("--coarse-top-k", &RunConfig::coarse_top_k, "coarse patches per image (semi-dense)");
  b.opt("--tau", &RunConfig::tau, "dual-softmax temperature");
  b.opt("--mnn-threshold", &RunConfig::mnn_threshold, "mutual-NN confidence threshold");
  b.opt("--nms-window", &RunConfig::nms_window, "detection NMS window (odd)");
  b.opt("--nms-threshold", &RunConfig::nms_threshold, "detection score threshold");
  b.opt("--t-det", &RunConfig::t_det, "sub-pixel refinement softmax temperature");
}

std::string profile_label(const RunConfig& c, int index) {
  if (c.profile == "mixed") {
    static const char* cycle[3] = {"plane", "ridge", "cloud"};
    return cycle[index % 3];
  }
  return c.profile;
}

void validate_scene_params(const RunConfig& c) {
  if (c.height <= 0 || c.width <= 0 || c.height % 64 != 0 || c.width % 64 != 0)
    throw UsageError("scene extents must be positive multiples of 64");
  if (c.baseline < 0.0) throw UsageError("--baseline must not be negative");
  if (c.profile != "mixed") {
    try {
      profile_from_name(c.profile);
    } catch (const std::exception&) {
      throw UsageError("unknown profile \"" + c.profile + "\"");
    }
  }
}

ScenePair scene_for(const RunConfig& c, int index) {
  validate_scene_params(c);
  SceneParams sp;
  sp.height = c.height;
  sp.width = c.width;
  sp.profile = profile_from_name(profile_label(c, index));
  sp.baseline = c.baseline;
  sp.rotation_mag = c.rotation_mag;
  return synth_scene(c.seed + static_cast<std::uint64_t>(index), sp);
}

DescriptorNetConfig desc_config(const RunConfig& c) {
  if (c.widths.size() != 5) throw UsageError("--widths needs exactly 5 values");
  DescriptorNetConfig cfg;
  for (int i = 0; i < 5; ++i) cfg.widths[i] = c.widths[static_cast<std::size_t>(i)];
  cfg.channels = c.channels;
  cfg.enc_layers = c.enc_layers;
  cfg.heads = c.heads;
  cfg.points = c.points;
  return cfg;
}

MatcherConfig matcher_config(const RunConfig& c) {
  MatcherConfig mc;
  mc.top_k = c.top_k;
  mc.coarse_top_k = c.coarse_top_k;
  mc.tau = c.tau;
  mc.mnn_threshold = c.mnn_threshold;
  mc.nms_window = c.nms_window;
  mc.nms_threshold = c.nms_threshold;
  mc.t_det = c.t_det;
  return mc;
}

Checkpoint load_checkpoint_or_usage(const std::string& dir) {
  try {
    return load_checkpoint(dir);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void detach_all(PipelineWeights& w) {
  for (Tensor* t : w.desc.parameters()) t->set_requires_grad(false);
  for (Tensor* t : w.kp.parameters()) t->set_requires_grad(false);
}

PipelineWeights make_weights(const RunConfig& c) {
  PipelineWeights w;
  if (!c.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint_or_usage(c.checkpoint);
    if (!ck.desc) throw UsageError("checkpoint has no descriptor weights: " + c.checkpoint);
    if (!ck.kp) throw UsageError("checkpoint has no keypoint weights: " + c.checkpoint);
    w.desc = std::move(*ck.desc);
    w.kp = std::move(*ck.kp);
  } else if (c.random_init) {
    w.desc = DescriptorNetParams::init(desc_config(c), c.seed * 31 + 5);
    w.kp = KeypointNetParams::init(c.kp_width, c.kp_kernel, c.seed * 31 + 6);
  } else {
    throw UsageError("weights required: pass --checkpoint DIR or --random-init");
  }
  detach_all(w);
  return w;
}

void write_echo(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  std::ofstream out(fs::path(c.out_dir) / "config_echo.json");
  if (!out) throw UsageError("cannot write to out dir " + c.out_dir);
  out << config_to_json(c).dump(2) << "\n";
}

double round6(double v) {
  const double r = std::round(v * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;
}

const char* kind_name(MatchKind k) {
  switch (k) {
    case MatchKind::sparse: return "sparse";
    case MatchKind::coarse: return "coarse";
    default: return "refined";
  }
}

// ---------------------------------------------------------------- match

// Epipolar classification happens in normalised coordinates against the
// scene's analytic essential matrix; without a valid one (zero baseline)
// every line counts as consistent.
struct EpipolarClassifier {
  bool defined = false;
  Eigen::Matrix3d e = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d k1inv = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d k2inv = Eigen::Matrix3d::Identity();

  explicit EpipolarClassifier(const ScenePair& sp) {
    if (sp.baseline <= 0.0) return;
    Eigen::Matrix3d tx;
    const Eigen::Vector3d t = sp.t();
    tx << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
    e = tx * sp.r;
    k1inv = sp.k1.inverse();
    k2inv = sp.k2.inverse();
    defined = true;
  }

  bool consistent(const MatchPair& m, double threshold) const {
    if (!defined) return true;
    const Eigen::Vector3d x1 = k1inv * Eigen::Vector3d(m.x1, m.y1, 1.0);
    const Eigen::Vector3d x2 = k2inv * Eigen::Vector3d(m.x2, m.y2, 1.0);
    const Eigen::Vector3d l2 = e * x1;
    const Eigen::Vector3d l1 = e.transpose() * x2;
    const double n2 = std::hypot(l2.x(), l2.y());
    const double n1 = std::hypot(l1.x(), l1.y());
    if (n1 < 1e-18 || n2 < 1e-18) return false;
    const double v = std::abs(x2.dot(e * x1));
    return 0.5 * v * (1.0 / n2 + 1.0 / n1) <= threshold;
  }
};

struct Canvas {
  int h = 0, w = 0;
  std::vector<unsigned char> px;  // rgb rows

  Canvas(int height, int width) : h(height), w(width), px(3u * height * width, 0) {}

  void put(int y, int x, unsigned char r, unsigned char g, unsigned char b) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    const std::size_t i = 3u * (static_cast<std::size_t>(y) * w + x);
    px[i] = r;
    px[i + 1] = g;
    px[i + 2] = b;
  }

  void line(double x0, double y0, double x1, double y1, unsigned char r, unsigned char g,
            unsigned char b) {
    const int steps =
        static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      put(static_cast<int>(std::lround(y0 + t * (y1 - y0))),
          static_cast<int>(std::lround(x0 + t * (x1 - x0))), r, g, b);
    }
  }

  void save_ppm(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path.string());
    out << "P6\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  }
};

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

void write_overlay(const ScenePair& sp, const MatchSet& ms, const fs::path& path) {
  const int h = sp.height(), w = sp.width();
  Canvas canvas(h, 2 * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      canvas.put(y, x, to_byte(sp.img1.at(y, x, 0)), to_byte(sp.img1.at(y, x, 1)),
                 to_byte(sp.img1.at(y, x, 2)));
      canvas.put(y, x + w, to_byte(sp.img2.at(y, x, 0)), to_byte(sp.img2.at(y, x, 1)),
                 to_byte(sp.img2.at(y, x, 2)));
    }
  const EpipolarClassifier cls(sp);
  for (const MatchPair& m : ms.pairs) {
    if (cls.consistent(m, 1e-4))
      canvas.line(m.x1, m.y1, m.x2 + w, m.y2, 40, 220, 40);
    else
      canvas.line(m.x1, m.y1, m.x2 + w, m.y2, 230, 40, 40);
  }
  canvas.save_ppm(path);
}

int run_match(const RunConfig& c) {
  write_echo(c);
  ScenePair sp = [&] {
    if (!c.scene_dir.empty()) {
      try {
        return load_scene(c.scene_dir);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
    }
    return scene_for(c, 0);
  }();
  const PipelineWeights w = make_weights(c);
  const MatcherConfig mc = matcher_config(c);

  MatchSet ms;
  if (c.semi_dense) {
    FundamentalEstimator estimator;  // defaults to plain eight-point
    if (c.gt_fundamental_flag) {
      const FundamentalMatrix fm = gt_fundamental(sp);
      estimator = [fm](const MatchSet&) { return fm; };
    } else {
      const RunConfig cc = c;
      estimator = [cc](const MatchSet& sparse) {
        return ransac_fundamental(sparse, cc.ransac_iters, cc.ransac_thresh, cc.seed).f;
      };
    }
    ms = match_semi_dense(sp.img1, sp.img2, w, mc, estimator);
  } else {
    ms = match_sparse(sp.img1, sp.img2, w, mc);
  }

  ordered_json rep;
  rep["kind"] = kind_name(ms.kind);
  rep["degraded"] = ms.degraded;
  rep["dropped_by_filter"] = ms.dropped_by_filter;
  rep["pair_count"] = ms.pairs.size();
  auto pairs = ordered_json::array();
  for (const MatchPair& m : ms.pairs)
    pairs.push_back({round6(m.x1), round6(m.y1), round6(m.x2), round6(m.y2), round6(m.conf)});
  rep["pairs"] = std::move(pairs);
  std::ofstream out(fs::path(c.out_dir) / "matches.json");
  if (!out) throw UsageError("cannot write to out dir " + c.out_dir);
  out << rep.dump(2) << "\n";

  write_overlay(sp, ms, fs::path(c.out_dir) / "overlay.ppm");
  std::cout << "match: " << ms.pairs.size() << " pairs, kind=" << kind_name(ms.kind)
            << (ms.degraded ? ", degraded" : "") << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct SceneOutcome {
  int index = 0;
  std::uint64_t scene_seed = 0;
  int matches = 0;
  bool pose_valid = false;
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
  bool homography_valid = false;
  double corner_px = 0.0;
  std::string failure;
};

// Upper-bound descriptors: each keypoint carries a positional code of its own
// backprojected world point, so true correspondences share (almost exactly)
// the same code. The random mode replaces the codes with per-image noise.
MatchSet synthetic_matches(const ScenePair& sp, const RunConfig& c, bool random_codes) {
  const int want = std::max(c.top_k, 16);
  const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(want))));
  std::mt19937_64 rng(sp.seed * 0x2545f4914f6cdd1dULL + 4242);
  const Eigen::Matrix3d k1inv = sp.k1.inverse();
  const Eigen::Matrix3d k2inv = sp.k2.inverse();

  std::vector<Keypoint> kps1, kps2;
  std::vector<Eigen::Vector3d> world1, world2;
  const double sx = static_cast<double>(sp.width()) / g;
  const double sy = static_cast<double>(sp.height()) / g;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const double x = std::clamp((gx + 0.5) * sx + (uniform01(rng) - 0.5) * 0.8 * sx, 0.0,
                                  sp.width() - 1.0);
      const double y = std::clamp((gy + 0.5) * sy + (uniform01(rng) - 0.5) * 0.8 * sy, 0.0,
                                  sp.height() - 1.0);
      const double d1 = sample_depth(sp.depth1, x, y);
      if (d1 <= 0.0) continue;
      std::vector<unsigned char> ok;
      const std::vector<Vec2> warped = warp_points({{x, y}}, sp, 1, &ok);
      if (!ok[0]) continue;
      const double d2 = sample_depth(sp.depth2, warped[0].x, warped[0].y);
      if (d2 <= 0.0) continue;
      kps1.push_back({x, y, 1.0});
      kps2.push_back({warped[0].x, warped[0].y, 1.0});
      world1.push_back(d1 * (k1inv * Eigen::Vector3d(x, y, 1.0)));
      // Backproject from view 2 independently; interpolation keeps the two
      // estimates of the same point within a fraction of a millimetre.
      const Eigen::Vector3d cam2 = d2 * (k2inv * Eigen::Vector3d(warped[0].x, warped[0].y, 1.0));
      world2.push_back(sp.r.transpose() * (cam2 - sp.t()));
    }
  const int n = static_cast<int>(kps1.size());
  if (n < 2) return MatchSet{MatchKind::sparse, {}, true, 0};

  Tensor d1(Shape{n, c.desc_dim});
  Tensor d2(Shape{n, c.desc_dim});
  if (random_codes) {
    std::mt19937_64 r1(sp.seed * 131 + 1), r2(sp.seed * 131 + 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c.desc_dim; ++j) {
        d1.at(i, j) = normal01(r1);
        d2.at(i, j) = normal01(r2);
      }
  } else {
    std::mt19937_64 rc(c.seed * 977 + 31);  // shared projection bank
    std::vector<Eigen::Vector3d> omega;
    std::vector<double> phase;
    for (int j = 0; j < c.desc_dim; ++j) {
      omega.emplace_back(1.2 * normal01(rc), 1.2 * normal01(rc), 1.2 * normal01(rc));
      phase.push_back(6.283185307179586 * uniform01(rc));
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c.desc_dim; ++j) {
        d1.at(i, j) = std::sin(omega[static_cast<std::size_t>(j)].dot(world1[static_cast<std::size_t>(i)]) +
                               phase[static_cast<std::size_t>(j)]);
        d2.at(i, j) = std::sin(omega[static_cast<std::size_t>(j)].dot(world2[static_cast<std::size_t>(i)]) +
                               phase[static_cast<std::size_t>(j)]);
      }
  }
  for (Tensor* t : {&d1, &d2})
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < c.desc_dim; ++j) s += t->at(i, j) * t->at(i, j);
      s = std::max(std::sqrt(s), 1e-12);
      for (int j = 0; j < c.desc_dim; ++j) t->at(i, j) /= s;
    }
  const Tensor p = dual_softmax(score_matrix(d1, d2, c.tau));
  return make_match_set(mnn_filter(p, c.mnn_threshold), kps1, kps2, MatchKind::sparse);
}

SceneOutcome eval_scene(const RunConfig& c, int index, const PipelineWeights* weights) {
  SceneOutcome o;
  o.index = index;
  try {
    const ScenePair sp = scene_for(c, index);
    o.scene_seed = sp.seed;
    MatchSet ms;
    if (c.desc_mode == "model")
      ms = match_sparse(sp.img1, sp.img2, *weights, matcher_config(c));
    else
      ms = synthetic_matches(sp, c, c.desc_mode == "random");
    o.matches = static_cast<int>(ms.pairs.size());

    // Pose and homography fail independently; a scene that defeats RANSAC
    // still counts (as an infinite error) rather than aborting the run.
    if (sp.baseline > 0.0) {
      try {
        const RansacResult rr =
            ransac_fundamental(ms, c.ransac_iters, c.ransac_thresh, sp.seed);
        const PoseEstimate pe = recover_pose(rr.f, sp.k1, sp.k2, ms);
        o.rotation_deg = rotation_error_deg(pe.r, sp.r);
        o.translation_deg = translation_error_deg(pe.t, sp.t_dir);
        o.pose_valid = true;
      } catch (const std::exception& e) {
        o.failure = e.what();
      }
    }
    if (sp.has_homography) {
      try {
        const Eigen::Matrix3d h =
            ransac_homography(ms, c.ransac_iters, c.ransac_thresh, sp.seed);
        o.corner_px = homography_corner_error(h, sp.h_gt, sp.width(), sp.height());
        o.homography_valid = true;
      } catch (const std::exception& e) {
        if (o.failure.empty()) o.failure = e.what();
      }
    }
  } catch (const std::exception& e) {
    o.failure = e.what();
  }
  return o;
}

int run_eval(const RunConfig& c) {
  write_echo(c);
  validate_scene_params(c);
  if (c.desc_mode != "model" && c.desc_mode != "oracle" && c.desc_mode != "random")
    throw UsageError("--desc-mode must be model, oracle or random");
  if (c.scene_count < 1) throw UsageError("--scene-count must be positive");
  if (c.jobs < 1) throw UsageError("--jobs must be positive");

  std::optional<PipelineWeights> weights;
  if (c.desc_mode == "model") weights = make_weights(c);

  std::vector<SceneOutcome> outcomes(static_cast<std::size_t>(c.scene_count));
  auto worker = [&](int tid) {
    for (int i = tid; i < c.scene_count; i += c.jobs)
      outcomes[static_cast<std::size_t>(i)] =
          eval_scene(c, i, weights ? &*weights : nullptr);
  };
  if (c.jobs == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < c.jobs; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }

  // Aggregation is order-independent: outcomes are indexed by scene.
  std::vector<double> pose_errors;
  std::vector<double> corner_errors;
  int pose_scenes = 0, failures = 0;
  for (const SceneOutcome& o : outcomes) {
    if (!o.failure.empty()) ++failures;
    if (c.baseline > 0.0) {
      ++pose_scenes;
      pose_errors.push_back(
          o.pose_valid ? std::max(o.rotation_deg, o.translation_deg)
                       : std::numeric_limits<double>::infinity());
    }
    if (o.homography_valid || (!o.failure.empty() && profile_label(c, o.index) == "plane"))
      corner_errors.push_back(o.homography_valid
                                  ? o.corner_px
                                  : std::numeric_limits<double>::infinity());
  }

  ordered_json rep;
  rep["kind"] = "eval_report";
  rep["desc_mode"] = c.desc_mode;
  rep["scenes"] = c.scene_count;
  rep["failures"] = failures;
  if (!pose_errors.empty()) {
    const std::vector<double> auc = pose_auc(pose_errors, {5.0, 10.0, 20.0});
    rep["auc"] = {{"5", auc[0]}, {"10", auc[1]}, {"20", auc[2]}};
  } else {
    rep["auc"] = nullptr;
  }
  if (!corner_errors.empty()) {
    const std::vector<double> mha = homography_mha(corner_errors, {3.0, 5.0, 10.0});
    rep["mha"] = {{"3", mha[0]}, {"5", mha[1]}, {"10", mha[2]}};
  } else {
    rep["mha"] = nullptr;
  }
  auto per_scene = ordered_json::array();
  for (const SceneOutcome& o : outcomes) {
    ordered_json s;
    s["index"] = o.index;
    s["seed"] = o.scene_seed;
    s["matches"] = o.matches;
    s["rotation_deg"] = o.pose_valid ? ordered_json(round6(o.rotation_deg)) : nullptr;
    s["translation_deg"] = o.pose_valid ? ordered_json(round6(o.translation_deg)) : nullptr;
    s["corner_px"] = o.homography_valid ? ordered_json(round6(o.corner_px)) : nullptr;
    s["error"] = o.failure.empty() ? ordered_json(nullptr) : ordered_json(o.failure);
    per_scene.push_back(std::move(s));
  }
  rep["per_scene"] = std::move(per_scene);
  std::ofstream out(fs::path(c.out_dir) / "metrics.json");
  if (!out) throw UsageError("cannot write to out dir " + c.out_dir);
  out << rep.dump(2) << "\n";

  std::cout << "eval: " << c.scene_count << " scenes, " << failures << " failures\n";
  return 0;
}

// ---------------------------------------------------------------- train

TrainConfig train_config(const RunConfig& c, bool keypoint_stage, int steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.lr = keypoint_stage ? c.kp_lr : c.lr;
  tc.clip_norm = c.clip_norm;
  tc.seed = c.seed;
  tc.alpha = c.alpha;
  tc.gamma = c.gamma;
  tc.tau = c.tau;
  tc.t_rel = c.t_rel;
  tc.t_det = c.t_det;
  tc.peaky_window = c.peaky_window;
  tc.p_norm = c.p_norm;
  tc.match_radius = c.match_radius;
  tc.gt_count = c.gt_count;
  tc.top_k = c.train_top_k;
  tc.nms_threshold = c.nms_threshold;
  tc.nms_window = c.nms_window;
  return tc;
}

void append_curve(TrainResult result, long offset, const fs::path& csv, bool append) {
  for (auto& row : result.curve) row[0] += static_cast<double>(offset);
  write_curve_csv(result, csv, append);
}

int run_train(const RunConfig& c) {
  write_echo(c);
  if (c.stage != "descriptor" && c.stage != "keypoint" && c.stage != "both")
    throw UsageError("--stage must be descriptor, keypoint or both");
  if (c.scene_count < 1) throw UsageError("--scene-count must be positive");

  std::vector<ScenePair> scenes;
  for (int i = 0; i < c.scene_count; ++i) scenes.push_back(scene_for(c, i));

  const fs::path ck_dir = fs::path(c.out_dir) / "checkpoint";
  Checkpoint ck;
  if (c.resume) {
    ck = load_checkpoint_or_usage(ck_dir.string());
  } else if (!c.checkpoint.empty()) {
    ck = load_checkpoint_or_usage(c.checkpoint);
  }

  const bool do_desc = c.stage != "keypoint";
  const bool do_kp = c.stage != "descriptor";

  if (do_desc) {
    long done = 0;
    if (c.resume) {
      if (!ck.desc) throw UsageError("resume: checkpoint has no descriptor weights");
      done = ck.desc_step;
    } else {
      ck.desc = DescriptorNetParams::init(desc_config(c), c.seed * 31 + 5);
      ck.desc_step = 0;
    }
    const long remaining = c.steps - done;
    if (remaining > 0) {
      for (Tensor* t : ck.desc->parameters()) t->set_requires_grad(true);
      const TrainResult r = train_descriptor_branch(
          scenes, *ck.desc, train_config(c, false, static_cast<int>(remaining)));
      append_curve(r, done, fs::path(c.out_dir) / "curve_descriptor.csv", done > 0);
      ck.desc_step = c.steps;
      std::cout << "train descriptor: steps " << done << ".." << c.steps << ", final loss "
                << r.curve.back()[1] << "\n";
    } else {
      std::cout << "train descriptor: already at step " << done << ", nothing to do\n";
    }
    save_checkpoint(ck, ck_dir);
  }

  if (do_kp) {
    if (!ck.desc)
      throw UsageError("keypoint stage needs descriptor weights; train stage descriptor "
                       "first or pass --checkpoint");
    long done = 0;
    if (c.resume && ck.kp) {
      done = ck.kp_step;
    } else if (!c.resume || !ck.kp) {
      ck.kp = KeypointNetParams::init(c.kp_width, c.kp_kernel, c.seed * 31 + 6);
      ck.kp_step = 0;
    }
    const long remaining = c.steps - done;
    if (remaining > 0) {
      for (Tensor* t : ck.kp->parameters()) t->set_requires_grad(true);
      const TrainResult r = train_keypoint_branch(
          scenes, *ck.desc, *ck.kp, train_config(c, true, static_cast<int>(remaining)));
      append_curve(r, done, fs::path(c.out_dir) / "curve_keypoint.csv", done > 0);
      ck.kp_step = c.steps;
      std::cout << "train keypoint: steps " << done << ".." << c.steps << ", final loss "
                << r.curve.back()[1] << "\n";
    } else {
      std::cout << "train keypoint: already at step " << done << ", nothing to do\n";
    }
    save_checkpoint(ck, ck_dir);
  }
  return 0;
}

// ---------------------------------------------------------------- pairgen

int run_pairgen(const RunConfig& c) {
  write_echo(c);
  if (c.scene_count < 1) throw UsageError("--scene-count must be positive");
  if (!(c.band_lo < c.band_hi)) throw UsageError("--band-lo must be below --band-hi");

  // The band defaults describe full-size imagery; scale it down with the
  // pixel count unless asked not to.
  double lo = c.band_lo, hi = c.band_hi;
  if (c.scale_band) {
    const double factor =
        (static_cast<double>(c.height) * c.width) / (800.0 * 800.0);
    lo *= factor;
    hi *= factor;
  }

  ordered_json kept = ordered_json::array();
  ordered_json rejected = ordered_json::array();
  int kept_count = 0;
  for (int i = 0; i < c.scene_count; ++i) {
    const ScenePair sp = scene_for(c, i);
    const int overlap = overlap_count(sp);
    ordered_json entry;
    entry["index"] = i;
    entry["seed"] = sp.seed;
    entry["profile"] = profile_label(c, i);
    entry["overlap"] = overlap;
    if (overlap > lo && overlap < hi) {
      char name[32];
      std::snprintf(name, sizeof name, "pair_%03d", kept_count++);
      const fs::path dir = fs::path(c.out_dir) / "scenes" / name;
      try {
        save_scene(sp, dir);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      entry["dir"] = (fs::path("scenes") / name).generic_string();
      kept.push_back(std::move(entry));
    } else {
      rejected.push_back(std::move(entry));
    }
  }

  ordered_json rep;
  rep["kind"] = "pairgen_report";
  rep["band"] = {lo, hi};
  rep["candidates"] = c.scene_count;
  rep["kept"] = std::move(kept);
  rep["rejected"] = std::move(rejected);
  std::ofstream out(fs::path(c.out_dir) / "pairs.json");
  if (!out) throw UsageError("cannot write to out dir " + c.out_dir);
  out << rep.dump(2) << "\n";

  std::cout << "pairgen: kept " << kept_count << " of " << c.scene_count << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defmatch: deformable-attention feature matching on synthetic two-view scenes"};
  app.require_subcommand(1);

  Binder match_b, eval_b, train_b, pairgen_b;

  match_b.sub = app.add_subcommand("match", "match one scene pair and write report + overlay");
  add_common(match_b);
  add_scene(match_b);
  add_model(match_b);
  add_matching(match_b);
  match_b.opt("--scene", &RunConfig::scene_dir, "load a saved scene pair instead of synthesising");
  match_b.flg("--semi-dense", &RunConfig::semi_dense, "run the semi-dense refinement stage");
  match_b.flg("--gt-fundamental", &RunConfig::gt_fundamental_flag,
              "use the scene's analytic fundamental matrix for refinement");
  match_b.opt("--ransac-iters", &RunConfig::ransac_iters, "RANSAC iterations for refinement");
  match_b.opt("--ransac-thresh", &RunConfig::ransac_thresh, "RANSAC inlier threshold (px)");

  eval_b.sub = app.add_subcommand("eval", "generate scenes, match, report pose AUC and MHA");
  add_common(eval_b);
  add_scene(eval_b);
  add_model(eval_b);
  add_matching(eval_b);
  eval_b.opt("--scene-count", &RunConfig::scene_count, "number of scenes to evaluate");
  eval_b.opt("--desc-mode", &RunConfig::desc_mode,
             "descriptor source: model, oracle (positional codes) or random");
  eval_b.opt("--desc-dim", &RunConfig::desc_dim, "oracle/random descriptor dimension");
  eval_b.opt("--ransac-iters", &RunConfig::ransac_iters, "RANSAC iterations");
  eval_b.opt("--ransac-thresh", &RunConfig::ransac_thresh, "RANSAC inlier threshold (px)");

  train_b.sub = app.add_subcommand("train", "two-stage training on synthetic scenes");
  add_common(train_b);
  add_scene(train_b);
  add_model(train_b);
  add_matching(train_b);
  train_b.opt("--scene-count", &RunConfig::scene_count, "training scene pairs");
  train_b.opt("--stage", &RunConfig::stage, "descriptor, keypoint or both");
  train_b.opt("--steps", &RunConfig::steps, "target optimisation steps per stage");
  train_b.opt("--lr", &RunConfig::lr, "descriptor-stage learning rate");
  train_b.opt("--kp-lr", &RunConfig::kp_lr, "keypoint-stage learning rate");
  train_b.opt("--clip-norm", &RunConfig::clip_norm, "global gradient-norm clip");
  train_b.opt("--alpha", &RunConfig::alpha, "focal alpha");
  train_b.opt("--gamma", &RunConfig::gamma, "focal gamma");
  train_b.opt("--t-rel", &RunConfig::t_rel, "reliability temperature");
  train_b.opt("--peaky-window", &RunConfig::peaky_window, "peakiness window (odd)");
  train_b.opt("--p-norm", &RunConfig::p_norm, "peakiness distance norm");
  train_b.opt("--match-radius", &RunConfig::match_radius, "reprojection match radius (px)");
  train_b.opt("--gt-count", &RunConfig::gt_count, "correspondences per training scene");
  train_b.opt("--train-top-k", &RunConfig::train_top_k, "keypoints per image in stage 2");
  train_b.flg("--resume", &RunConfig::resume, "continue from the checkpoint in --out-dir");

  pairgen_b.sub = app.add_subcommand("pairgen", "generate scene pairs filtered by overlap band");
  add_common(pairgen_b);
  add_scene(pairgen_b);
  pairgen_b.opt("--scene-count", &RunConfig::scene_count, "candidate scenes to draw");
  pairgen_b.opt("--band-lo", &RunConfig::band_lo, "minimum overlapping pixels (exclusive)");
  pairgen_b.opt("--band-hi", &RunConfig::band_hi, "maximum overlapping pixels (exclusive)");
  pairgen_b.flg("--scale-band,!--no-scale-band", &RunConfig::scale_band,
                "scale the band by pixel count relative to 800x800");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (match_b.sub->parsed()) return run_match(match_b.resolve("match"));
    if (eval_b.sub->parsed()) return run_eval(eval_b.resolve("eval"));
    if (train_b.sub->parsed()) return run_train(train_b.resolve("train"));
    if (pairgen_b.sub->parsed()) return run_pairgen(pairgen_b.resolve("pairgen"));
  } catch (const UsageError& e) {
    std::cerr << "defmatch: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "defmatch: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "defmatch: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
