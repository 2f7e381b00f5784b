#pragma once

// Synthetic two-domain, multi-camera identity data.
//
// Every identity owns a latent centroid; an image draws a latent around it and
// is observed through its camera's affine map plus noise:
//
//   z   = centroid + N(0, (within_id_ratio * noise_sigma)^2 I)
//   vec = A_c z + b_c + N(0, noise_sigma^2 I)
//   A_c = B + camera_transform_scale * G_c / sqrt(latent_dim)
//   b_c = camera_transform_scale * camera_bias_ratio * u_c
//
// B is a lift shared by both domains; G_c and u_c are standard normal and
// drawn separately per domain, so source and target cameras never share a
// map. Target centroids are offset by domain_shift_scale along one random unit
// direction. Because the latents and maps are retained, the camera-style
// augmenter can render any target image exactly as another camera would.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ecn/json_config.hpp"
#include "ecn/numerics.hpp"

namespace ecn {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

/// Thrown by read_dataset for files that do not match the line schema.
class SchemaError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// One observation. Indices are positions within their own split; a
/// transferred sample points back at its real target-train image via `origin`.
struct Sample {
  std::int64_t index = 0;
  /// -1 where the identity is hidden (target train and camstyle splits).
  std::int64_t person_id = -1;
  std::int64_t camera_id = 0;
  Domain domain = Domain::source;
  Vec vec;
  std::int64_t origin_index = 0;
  std::optional<std::int64_t> transferred_to_camera;

  bool operator==(const Sample&) const = default;
};

struct GenConfig {
  std::size_t n_source_ids = 25;
  std::size_t n_target_ids = 25;
  std::size_t cameras_source = 4;
  std::size_t cameras_target = 4;
  std::size_t images_per_id_per_camera = 8;
  std::size_t query_per_id_per_camera = 1;
  std::size_t gallery_per_id_per_camera = 2;
  std::size_t latent_dim = 16;
  std::size_t obs_dim = 32;
  double camera_transform_scale = 0.8;
  double camera_bias_ratio = 1.0;
  double noise_sigma = 0.3;
  double within_id_ratio = 1.0;
  double domain_shift_scale = 1.0;
  std::uint64_t seed = 1;

  std::size_t n_source_train() const { return n_source_ids * cameras_source * images_per_id_per_camera; }
  std::size_t n_target_train() const { return n_target_ids * cameras_target * images_per_id_per_camera; }
  std::size_t n_camstyle() const { return n_target_train() * (cameras_target - 1); }
  std::size_t n_query() const { return n_target_ids * cameras_target * query_per_id_per_camera; }
  std::size_t n_gallery() const { return n_target_ids * cameras_target * gallery_per_id_per_camera; }

  void validate() const {
    const auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string("gen config: field '") + name + "' must be >= 1");
    };
    positive(n_source_ids, "n_source_ids");
    positive(n_target_ids, "n_target_ids");
    positive(cameras_source, "cameras_source");
    positive(cameras_target, "cameras_target");
    positive(images_per_id_per_camera, "images_per_id_per_camera");
    positive(query_per_id_per_camera, "query_per_id_per_camera");
    positive(gallery_per_id_per_camera, "gallery_per_id_per_camera");
    positive(latent_dim, "latent_dim");
    positive(obs_dim, "obs_dim");
    const auto non_negative = [](double v, const char* name) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ConfigError(std::string("gen config: field '") + name + "' must be finite and >= 0");
      }
    };
    non_negative(camera_transform_scale, "camera_transform_scale");
    non_negative(camera_bias_ratio, "camera_bias_ratio");
    non_negative(noise_sigma, "noise_sigma");
    non_negative(within_id_ratio, "within_id_ratio");
    non_negative(domain_shift_scale, "domain_shift_scale");
  }

  bool operator==(const GenConfig&) const = default;
};

inline Json to_json(const GenConfig& c) {
  return Json{{"n_source_ids", c.n_source_ids},
              {"n_target_ids", c.n_target_ids},
              {"cameras_source", c.cameras_source},
              {"cameras_target", c.cameras_target},
              {"images_per_id_per_camera", c.images_per_id_per_camera},
              {"query_per_id_per_camera", c.query_per_id_per_camera},
              {"gallery_per_id_per_camera", c.gallery_per_id_per_camera},
              {"latent_dim", c.latent_dim},
              {"obs_dim", c.obs_dim},
              {"camera_transform_scale", c.camera_transform_scale},
              {"camera_bias_ratio", c.camera_bias_ratio},
              {"noise_sigma", c.noise_sigma},
              {"within_id_ratio", c.within_id_ratio},
              {"domain_shift_scale", c.domain_shift_scale},
              {"seed", c.seed}};
}

/// Missing fields keep their defaults; unknown fields are errors.
inline GenConfig gen_config_from_json(const Json& j, const std::string& context = "gen config") {
  GenConfig c;
  JsonFields f(j, context);
  f.read("n_source_ids", c.n_source_ids);
  f.read("n_target_ids", c.n_target_ids);
  f.read("cameras_source", c.cameras_source);
  f.read("cameras_target", c.cameras_target);
  f.read("images_per_id_per_camera", c.images_per_id_per_camera);
  f.read("query_per_id_per_camera", c.query_per_id_per_camera);
  f.read("gallery_per_id_per_camera", c.gallery_per_id_per_camera);
  f.read("latent_dim", c.latent_dim);
  f.read("obs_dim", c.obs_dim);
  f.read("camera_transform_scale", c.camera_transform_scale);
  f.read("camera_bias_ratio", c.camera_bias_ratio);
  f.read("noise_sigma", c.noise_sigma);
  f.read("within_id_ratio", c.within_id_ratio);
  f.read("domain_shift_scale", c.domain_shift_scale);
  f.read("seed", c.seed);
  f.reject_unknown();
  c.validate();
  return c;
}

struct DatasetBundle {
  std::vector<Sample> source_train;
  /// Person ids are -1 here; the labels live in ground_truth.
  std::vector<Sample> target_train;
  std::vector<Sample> target_camstyle;
  std::vector<Sample> target_query;
  std::vector<Sample> target_gallery;
  /// Target-train person ids by index. Only evaluation code may look at it.
  std::optional<std::vector<std::int64_t>> ground_truth;
  std::optional<GenConfig> config;

  std::size_t obs_dim() const {
    if (config) return config->obs_dim;
    for (const auto* split : {&source_train, &target_train, &target_query, &target_gallery}) {
      if (!split->empty()) return split->front().vec.size();
    }
    return 0;
  }

  std::size_t n_source_classes() const {
    std::int64_t mx = -1;
    for (const auto& s : source_train) mx = std::max(mx, s.person_id);
    return static_cast<std::size_t>(mx + 1);
  }

  bool operator==(const DatasetBundle&) const = default;
};

/// Retained generator state: the camera maps of both domains and the latent
/// of every target-train image.
struct CameraMap {
  Mat a;
  Vec b;
};

struct World {
  Mat base_lift;
  std::vector<CameraMap> source_cameras;
  std::vector<CameraMap> target_cameras;
  std::vector<Vec> source_centroids;
  std::vector<Vec> target_centroids;
  std::vector<Vec> target_train_latents;
};

namespace detail {

inline Vec observe(const CameraMap& cam, std::span<const double> z, double noise_sigma, Prng& rng) {
  Vec v = matvec(cam.a, z);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += cam.b[i] + noise_sigma * rng.normal();
  return v;
}

inline Vec draw_latent(std::span<const double> centroid, double sigma, Prng& rng) {
  Vec z(centroid.begin(), centroid.end());
  for (double& x : z) x += sigma * rng.normal();
  return z;
}

inline std::vector<CameraMap> draw_cameras(const GenConfig& cfg, const Mat& base, std::size_t count,
                                           Prng& rng) {
  std::vector<CameraMap> cams(count);
  const double mix = cfg.camera_transform_scale / std::sqrt(static_cast<double>(cfg.latent_dim));
  const double bias = cfg.camera_transform_scale * cfg.camera_bias_ratio;
  for (auto& cam : cams) {
    cam.a = base;
    for (double& x : cam.a.data()) x += mix * rng.normal();
    cam.b.resize(cfg.obs_dim);
    for (double& x : cam.b) x = bias * rng.normal();
  }
  return cams;
}

// Independent streams per generation stage.
inline constexpr std::uint64_t kWorldStream = 0x5eed0001;
inline constexpr std::uint64_t kImageStream = 0x5eed0002;
inline constexpr std::uint64_t kCamstyleStream = 0x5eed0003;

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  Prng mixer(seed ^ (stream * 0x9e3779b97f4a7c15ULL));
  return mixer.next_u64();
}

}  // namespace detail

inline World build_world(const GenConfig& cfg) {
  cfg.validate();
  Prng rng(detail::stream_seed(cfg.seed, detail::kWorldStream));
  World w;
  w.base_lift = Mat(cfg.obs_dim, cfg.latent_dim);
  const double lift_std = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  for (double& x : w.base_lift.data()) x = lift_std * rng.normal();
  w.source_cameras = detail::draw_cameras(cfg, w.base_lift, cfg.cameras_source, rng);
  w.target_cameras = detail::draw_cameras(cfg, w.base_lift, cfg.cameras_target, rng);

  Vec shift(cfg.latent_dim);
  for (double& x : shift) x = rng.normal();
  shift = l2_normalize(shift);
  w.source_centroids.resize(cfg.n_source_ids);
  for (auto& c : w.source_centroids) {
    c.resize(cfg.latent_dim);
    for (double& x : c) x = rng.normal();
  }
  w.target_centroids.resize(cfg.n_target_ids);
  for (auto& c : w.target_centroids) {
    c.resize(cfg.latent_dim);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = rng.normal() + cfg.domain_shift_scale * shift[i];
  }
  return w;
}

/// Adds cameras_target - 1 transfers of every target-train image, one per
/// other camera, rendered through that camera's true map.
inline void camstyle_augment(DatasetBundle& bundle, const World& world, const GenConfig& cfg) {
  if (world.target_train_latents.size() != bundle.target_train.size()) {
    throw std::invalid_argument("camstyle_augment: generator latents not retained");
  }
  Prng rng(detail::stream_seed(cfg.seed, detail::kCamstyleStream));
  bundle.target_camstyle.clear();
  bundle.target_camstyle.reserve(bundle.target_train.size() * (cfg.cameras_target - 1));
  for (std::size_t i = 0; i < bundle.target_train.size(); ++i) {
    const Sample& real = bundle.target_train[i];
    for (std::size_t c = 0; c < cfg.cameras_target; ++c) {
      if (static_cast<std::int64_t>(c) == real.camera_id) continue;
      Sample t;
      t.index = static_cast<std::int64_t>(bundle.target_camstyle.size());
      t.person_id = -1;
      t.camera_id = real.camera_id;
      t.domain = Domain::target;
      t.vec = detail::observe(world.target_cameras[c], world.target_train_latents[i], cfg.noise_sigma, rng);
      t.origin_index = real.index;
      t.transferred_to_camera = static_cast<std::int64_t>(c);
      bundle.target_camstyle.push_back(std::move(t));
    }
  }
}

/// Deterministic in cfg.seed. When `world_out` is given the generator state is
/// copied out.
inline DatasetBundle generate(const GenConfig& cfg, World* world_out = nullptr) {
  World world = build_world(cfg);
  Prng rng(detail::stream_seed(cfg.seed, detail::kImageStream));
  const double latent_sigma = cfg.noise_sigma * cfg.within_id_ratio;

  DatasetBundle bundle;
  bundle.config = cfg;
  bundle.ground_truth.emplace();

  const auto emit = [&](std::vector<Sample>& split, Domain domain, std::int64_t visible_pid, std::size_t cam,
                        const CameraMap& map, const Vec& centroid) {
    Vec z = detail::draw_latent(centroid, latent_sigma, rng);
    Sample s;
    s.index = static_cast<std::int64_t>(split.size());
    s.person_id = visible_pid;
    s.camera_id = static_cast<std::int64_t>(cam);
    s.domain = domain;
    s.vec = detail::observe(map, z, cfg.noise_sigma, rng);
    s.origin_index = s.index;
    split.push_back(std::move(s));
    return z;
  };

  for (std::size_t id = 0; id < cfg.n_source_ids; ++id) {
    for (std::size_t cam = 0; cam < cfg.cameras_source; ++cam) {
      for (std::size_t n = 0; n < cfg.images_per_id_per_camera; ++n) {
        const auto pid = static_cast<std::int64_t>(id);
        emit(bundle.source_train, Domain::source, pid, cam, world.source_cameras[cam],
             world.source_centroids[id]);
      }
    }
  }

  // Target person ids continue after the source ids so the two sets are disjoint.
  const auto target_pid = [&](std::size_t id) { return static_cast<std::int64_t>(cfg.n_source_ids + id); };
  for (std::size_t id = 0; id < cfg.n_target_ids; ++id) {
    for (std::size_t cam = 0; cam < cfg.cameras_target; ++cam) {
      for (std::size_t n = 0; n < cfg.images_per_id_per_camera; ++n) {
        world.target_train_latents.push_back(emit(bundle.target_train, Domain::target, -1, cam,
                                                  world.target_cameras[cam], world.target_centroids[id]));
        bundle.ground_truth->push_back(target_pid(id));
      }
    }
  }
  for (std::size_t id = 0; id < cfg.n_target_ids; ++id) {
    for (std::size_t cam = 0; cam < cfg.cameras_target; ++cam) {
      for (std::size_t n = 0; n < cfg.query_per_id_per_camera; ++n) {
        emit(bundle.target_query, Domain::target, target_pid(id), cam, world.target_cameras[cam],
             world.target_centroids[id]);
      }
      for (std::size_t n = 0; n < cfg.gallery_per_id_per_camera; ++n) {
        emit(bundle.target_gallery, Domain::target, target_pid(id), cam,
             world.target_cameras[cam], world.target_centroids[id]);
      }
    }
  }

  camstyle_augment(bundle, world, cfg);
  if (world_out != nullptr) *world_out = std::move(world);
  return bundle;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr const char* kSourceTrainFile = "source_train.jsonl";
inline constexpr const char* kTargetTrainFile = "target_train.jsonl";
inline constexpr const char* kCamstyleFile = "target_camstyle.jsonl";
inline constexpr const char* kQueryFile = "target_query.jsonl";
inline constexpr const char* kGalleryFile = "target_gallery.jsonl";
inline constexpr const char* kGroundTruthFile = "target_train_gt.jsonl";
inline constexpr const char* kGenConfigFile = "gen_config.json";

inline Json to_json(const Sample& s) {
  Json j;
  j["index"] = s.index;
  j["pid"] = s.person_id;
  j["cam"] = s.camera_id;
  j["domain"] = to_string(s.domain);
  j["vec"] = s.vec;
  j["origin"] = s.origin_index;
  j["to_cam"] = s.transferred_to_camera ? Json(*s.transferred_to_camera) : Json(nullptr);
  return j;
}

namespace detail {

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_samples(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::vector<Json> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(to_json(s));
  write_jsonl(path, rows);
}

inline std::int64_t require_int(const Json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw SchemaError(where + ": missing field '" + key + "'");
  if (!it->is_number_integer()) throw SchemaError(where + ": field '" + key + "' must be an integer");
  return it->get<std::int64_t>();
}

/// Reads one JSONL split. `expected_dim` is fixed by gen_config.json or by the
/// first line seen.
inline std::vector<Sample> read_samples(const std::filesystem::path& path, Domain expected_domain,
                                        std::optional<std::size_t>& expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  static const std::set<std::string> kFields = {"index", "pid", "cam", "domain", "vec", "origin", "to_cam"};
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(where + ": malformed JSON at byte offset " + std::to_string(e.byte));
    }
    if (!j.is_object()) throw SchemaError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!kFields.count(key)) throw SchemaError(where + ": unknown field '" + key + "'");
    }
    Sample s;
    s.index = require_int(j, "index", where);
    s.person_id = require_int(j, "pid", where);
    s.camera_id = require_int(j, "cam", where);
    s.origin_index = require_int(j, "origin", where);
    const auto dom = j.find("domain");
    if (dom == j.end() || !dom->is_string()) throw SchemaError(where + ": field 'domain' must be a string");
    if (*dom == "source") {
      s.domain = Domain::source;
    } else if (*dom == "target") {
      s.domain = Domain::target;
    } else {
      throw SchemaError(where + ": field 'domain' must be \"source\" or \"target\"");
    }
    if (s.domain != expected_domain) throw SchemaError(where + ": unexpected domain for this file");
    const auto to_cam = j.find("to_cam");
    if (to_cam == j.end()) throw SchemaError(where + ": missing field 'to_cam'");
    if (!to_cam->is_null()) {
      if (!to_cam->is_number_integer()) throw SchemaError(where + ": field 'to_cam' must be an integer or null");
      s.transferred_to_camera = to_cam->get<std::int64_t>();
    }
    const auto vec = j.find("vec");
    if (vec == j.end() || !vec->is_array()) throw SchemaError(where + ": field 'vec' must be an array");
    s.vec.reserve(vec->size());
    for (const auto& x : *vec) {
      if (!x.is_number()) throw SchemaError(where + ": field 'vec' must contain numbers");
      s.vec.push_back(x.get<double>());
    }
    if (!expected_dim) expected_dim = s.vec.size();
    if (s.vec.size() != *expected_dim) {
      throw SchemaError(where + ": field 'vec' has length " + std::to_string(s.vec.size()) + ", expected obs_dim " +
                        std::to_string(*expected_dim));
    }
    if (!all_finite(s.vec)) throw SchemaError(where + ": field 'vec' has non-finite entries");
    if (s.index != static_cast<std::int64_t>(out.size())) {
      throw SchemaError(where + ": index " + std::to_string(s.index) + " out of sequence");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline void write_dataset(const DatasetBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_samples(dir / kSourceTrainFile, b.source_train);
  detail::write_samples(dir / kTargetTrainFile, b.target_train);
  detail::write_samples(dir / kCamstyleFile, b.target_camstyle);
  detail::write_samples(dir / kQueryFile, b.target_query);
  detail::write_samples(dir / kGalleryFile, b.target_gallery);
  if (b.ground_truth) {
    std::vector<Json> rows;
    for (std::size_t i = 0; i < b.ground_truth->size(); ++i) {
      rows.push_back(Json{{"index", i}, {"pid", (*b.ground_truth)[i]}});
    }
    detail::write_jsonl(dir / kGroundTruthFile, rows);
  }
  if (b.config) write_text_file((dir / kGenConfigFile).string(), to_json(*b.config).dump(2) + "\n");
}

/// Reads a dataset directory. The ground-truth and gen_config files are
/// optional; everything else is required.
inline DatasetBundle read_dataset(const std::filesystem::path& dir) {
  DatasetBundle b;
  std::optional<std::size_t> dim;
  if (std::filesystem::exists(dir / kGenConfigFile)) {
    b.config = gen_config_from_json(load_json_file((dir / kGenConfigFile).string()), kGenConfigFile);
    dim = b.config->obs_dim;
  }
  b.source_train = detail::read_samples(dir / kSourceTrainFile, Domain::source, dim);
  b.target_train = detail::read_samples(dir / kTargetTrainFile, Domain::target, dim);
  b.target_camstyle = detail::read_samples(dir / kCamstyleFile, Domain::target, dim);
  b.target_query = detail::read_samples(dir / kQueryFile, Domain::target, dim);
  b.target_gallery = detail::read_samples(dir / kGalleryFile, Domain::target, dim);

  for (const auto& s : b.target_camstyle) {
    const std::string where = std::string(kCamstyleFile) + ":" + std::to_string(s.index + 1);
    if (s.origin_index < 0 || s.origin_index >= static_cast<std::int64_t>(b.target_train.size())) {
      throw SchemaError(where + ": origin does not name a target_train sample");
    }
    if (!s.transferred_to_camera || *s.transferred_to_camera == s.camera_id) {
      throw SchemaError(where + ": transferred sample needs to_cam different from cam");
    }
  }
  for (const auto& s : b.source_train) {
    if (s.person_id < 0) {
      throw SchemaError(std::string(kSourceTrainFile) + ":" + std::to_string(s.index + 1) + ": source pid must be >= 0");
    }
  }

  const auto gt_path = dir / kGroundTruthFile;
  if (std::filesystem::exists(gt_path)) {
    std::ifstream in(gt_path, std::ios::binary);
    std::vector<std::int64_t> gt;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::string where = std::string(kGroundTruthFile) + ":" + std::to_string(line_no);
      Json j;
      try {
        j = Json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(where + ": malformed JSON at byte offset " + std::to_string(e.byte));
      }
      if (detail::require_int(j, "index", where) != static_cast<std::int64_t>(gt.size())) {
        throw SchemaError(where + ": index out of sequence");
      }
      gt.push_back(detail::require_int(j, "pid", where));
    }
    if (gt.size() != b.target_train.size()) {
      throw SchemaError(std::string(kGroundTruthFile) + ": expected " + std::to_string(b.target_train.size()) +
                        " rows, found " + std::to_string(gt.size()));
    }
    b.ground_truth = std::move(gt);
  }
  return b;
}

}  // namespace ecn
