#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "geomae/config.hpp"
#include "geomae/geometry.hpp"
#include "geomae/tensor.hpp"

namespace geomae {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- xyz text clouds

inline PointCloud parse_xyz(std::istream& is, const std::string& source = "<stream>") {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  bool with_normals = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0' || !std::isfinite(v))
        fail_data(source + ": malformed value '" + tok + "' on line " + std::to_string(lineno));
      vals.push_back(v);
    }
    if (vals.size() != 3 && vals.size() != 6)
      fail_data(source + ": expected 3 or 6 values on line " + std::to_string(lineno));
    const bool has_n = vals.size() == 6;
    if (cloud.points.empty()) with_normals = has_n;
    else if (has_n != with_normals) fail_data(source + ": inconsistent column count on line " + std::to_string(lineno));
    cloud.points.emplace_back(vals[0], vals[1], vals[2]);
    if (has_n) {
      Vec3 n(vals[3], vals[4], vals[5]);
      if (n.norm() == 0.0) fail_data(source + ": zero normal on line " + std::to_string(lineno));
      cloud.normals.push_back(n.normalized());
    }
  }
  if (cloud.points.empty()) fail_data(source + ": zero points");
  return cloud;
}

/// Brings a cloud to exactly n points: FPS down-sampling when larger, random duplication when smaller.
inline PointCloud resample_cloud(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  if (n == 0 || cloud.size() == n) return cloud;
  std::vector<std::size_t> keep;
  if (cloud.size() > n) {
    keep = farthest_point_sample(cloud, n, seed);
    std::sort(keep.begin(), keep.end());
  } else {
    keep.resize(cloud.size());
    std::iota(keep.begin(), keep.end(), std::size_t{0});
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
    while (keep.size() < n) keep.push_back(pick(rng));
  }
  PointCloud out;
  for (auto i : keep) {
    out.points.push_back(cloud.points[i]);
    if (cloud.has_normals()) out.normals.push_back(cloud.normals[i]);
  }
  return out;
}

/// Reads an .xyz file; when n > 0 the cloud is resampled to exactly n points.
inline PointCloud load_xyz(const fs::path& path, std::size_t n = 0, std::uint64_t seed = 0) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open '" + path.string() + "'");
  return resample_cloud(parse_xyz(is, path.string()), n, derive_seed(seed, stream::resample));
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_xyz(std::ostream& os, const PointCloud& cloud, bool with_normals = false) {
  const bool n = with_normals && cloud.has_normals();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    os << format_real(p.x()) << ' ' << format_real(p.y()) << ' ' << format_real(p.z());
    if (n) {
      const auto& q = cloud.normals[i];
      os << ' ' << format_real(q.x()) << ' ' << format_real(q.y()) << ' ' << format_real(q.z());
    }
    os << '\n';
  }
}

inline void save_xyz(const fs::path& path, const PointCloud& cloud, bool with_normals = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail_data("cannot write '" + path.string() + "'");
  write_xyz(os, cloud, with_normals);
}

// ---------------------------------------------------------------- synthetic shapes

enum class ShapeKind { sphere, cube, cylinder, torus, cone };

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"cone", "cube", "cylinder", "sphere", "torus"};
  return names;
}

inline ShapeKind parse_shape(const std::string& s) {
  if (s == "sphere") return ShapeKind::sphere;
  if (s == "cube") return ShapeKind::cube;
  if (s == "cylinder") return ShapeKind::cylinder;
  if (s == "torus") return ShapeKind::torus;
  if (s == "cone") return ShapeKind::cone;
  fail_usage("unknown shape '" + s + "'");
}

/// Area-uniform samples on the surface of a canonical (unrotated) shape.
inline std::vector<Vec3> sample_surface(ShapeKind kind, std::size_t n, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Vec3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    switch (kind) {
      case ShapeKind::sphere: {
        Vec3 v(nd(rng), nd(rng), nd(rng));
        if (v.norm() < 1e-12) continue;
        pts.push_back(v.normalized());
        break;
      }
      case ShapeKind::cube: {
        const int face = std::min(5, static_cast<int>(u01(rng) * 6.0));
        const double a = 2.0 * u01(rng) - 1.0, b = 2.0 * u01(rng) - 1.0;
        const double s = face % 2 == 0 ? 1.0 : -1.0;
        const int axis = face / 2;
        Vec3 p;
        p[axis] = s;
        p[(axis + 1) % 3] = a;
        p[(axis + 2) % 3] = b;
        pts.push_back(p);
        break;
      }
      case ShapeKind::cylinder: {
        // radius 1, height 2: side area 4*pi, caps 2*pi.
        const double t = 2.0 * pi * u01(rng);
        if (u01(rng) < 2.0 / 3.0) {
          pts.emplace_back(std::cos(t), std::sin(t), 2.0 * u01(rng) - 1.0);
        } else {
          const double r = std::sqrt(u01(rng));
          pts.emplace_back(r * std::cos(t), r * std::sin(t), u01(rng) < 0.5 ? -1.0 : 1.0);
        }
        break;
      }
      case ShapeKind::torus: {
        constexpr double R = 1.0, r = 0.35;
        const double a = 2.0 * pi * u01(rng), b = 2.0 * pi * u01(rng);
        if (u01(rng) * (R + r) > R + r * std::cos(b)) continue;  // area weighting
        pts.emplace_back((R + r * std::cos(b)) * std::cos(a), (R + r * std::cos(b)) * std::sin(a), r * std::sin(b));
        break;
      }
      case ShapeKind::cone: {
        // base radius 1 at z=-1, apex at z=1; lateral area pi*sqrt(5), base pi.
        const double t = 2.0 * pi * u01(rng);
        const double lateral = std::sqrt(5.0);
        if (u01(rng) < lateral / (lateral + 1.0)) {
          const double s = std::sqrt(u01(rng));  // distance fraction from apex
          pts.emplace_back(s * std::cos(t), s * std::sin(t), 1.0 - 2.0 * s);
        } else {
          const double rr = std::sqrt(u01(rng));
          pts.emplace_back(rr * std::cos(t), rr * std::sin(t), -1.0);
        }
        break;
      }
    }
  }
  return pts;
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::Quaterniond q(nd(rng), nd(rng), nd(rng), nd(rng));
  q.normalize();
  return q.toRotationMatrix();
}

struct LabeledCloud {
  PointCloud cloud;
  std::size_t label = 0;
  std::string path;
};

struct Dataset {
  std::vector<LabeledCloud> items;
  std::vector<std::string> class_names;  // label -> name

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
};

struct SynthOptions {
  std::size_t per_class = 10;
  std::size_t n_points = 1024;
  std::uint64_t seed = 0;
  double jitter = 0.02;
  bool rotate = true;
};

/// Labeled surface samples; labels follow the sorted class-name order.
inline Dataset synth_shapes(std::vector<std::string> classes, const SynthOptions& opt) {
  if (opt.per_class == 0) fail_usage("per_class must be at least 1");
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  Dataset ds;
  ds.class_names = classes;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const ShapeKind kind = parse_shape(classes[c]);
    for (std::size_t i = 0; i < opt.per_class; ++i) {
      Rng rng(derive_seed(opt.seed, stream::sample, c * 1000003 + i));
      auto pts = sample_surface(kind, opt.n_points, rng);
      const Eigen::Matrix3d R = opt.rotate ? random_rotation(rng) : Eigen::Matrix3d::Identity();
      std::normal_distribution<double> jit(0.0, opt.jitter > 0.0 ? opt.jitter : 1.0);
      PointCloud cloud;
      for (auto& p : pts) {
        Vec3 q = R * p;
        if (opt.jitter > 0.0) q += Vec3(jit(rng), jit(rng), jit(rng));
        cloud.points.push_back(q);
      }
      char name[64];
      std::snprintf(name, sizeof name, "%s/%s_%04zu.xyz", classes[c].c_str(), classes[c].c_str(), i);
      ds.items.push_back({normalize_cloud(cloud), c, name});
    }
  }
  return ds;
}

// ---------------------------------------------------------------- manifests

struct DatasetManifest {
  fs::path root;
  std::vector<std::pair<std::string, std::string>> entries;  // (relative path, label), sorted by path
  std::map<std::string, std::size_t> class_index;
  std::string split = "train";
};

inline constexpr const char* kManifestFile = "manifest.csv";

/// Reads `root/manifest.csv` ("path,label" rows) or, failing that, class-named subdirectories of .xyz files.
inline DatasetManifest manifest_load(const fs::path& root, const std::string& split = "train") {
  if (!fs::is_directory(root)) fail_data("dataset root '" + root.string() + "' is not a directory");
  DatasetManifest m;
  m.root = root;
  m.split = split;
  const fs::path mf = root / kManifestFile;
  if (fs::exists(mf)) {
    std::ifstream is(mf);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#' || (lineno == 1 && line == "path,label")) continue;
      const auto comma = line.rfind(',');
      if (comma == std::string::npos || comma == 0 || comma + 1 == line.size())
        fail_data(mf.string() + ": malformed row on line " + std::to_string(lineno));
      m.entries.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }
  } else {
    for (const auto& dir : fs::directory_iterator(root)) {
      if (!dir.is_directory()) continue;
      for (const auto& f : fs::directory_iterator(dir.path()))
        if (f.is_regular_file() && f.path().extension() == ".xyz")
          m.entries.emplace_back(fs::relative(f.path(), root).generic_string(), dir.path().filename().string());
    }
  }
  std::sort(m.entries.begin(), m.entries.end());
  for (std::size_t i = 1; i < m.entries.size(); ++i)
    if (m.entries[i].first == m.entries[i - 1].first) fail_data("duplicate path '" + m.entries[i].first + "' in manifest");
  std::set<std::string> labels;
  for (const auto& [path, label] : m.entries) {
    if (!fs::exists(root / path)) fail_data("missing file '" + path + "'");
    labels.insert(label);
  }
  if (m.entries.empty()) fail_data("dataset '" + root.string() + "' has no entries");
  std::size_t i = 0;
  for (const auto& l : labels) m.class_index[l] = i++;
  return m;
}

/// Loads and resamples every manifest entry. When `class_names` is given, labels are mapped
/// through it (so train/test splits share one index) and unknown labels are errors.
inline Dataset load_dataset(const DatasetManifest& m, std::size_t n, std::uint64_t seed,
                            const std::vector<std::string>* class_names = nullptr) {
  Dataset ds;
  if (class_names) {
    ds.class_names = *class_names;
  } else {
    for (const auto& [name, _] : m.class_index) ds.class_names.push_back(name);
  }
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& [path, label] = m.entries[i];
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it == ds.class_names.end()) fail_data("label '" + label + "' is not among the known classes");
    ds.items.push_back({load_xyz(m.root / path, n, derive_seed(seed, i)),
                        static_cast<std::size_t>(it - ds.class_names.begin()), path});
  }
  return ds;
}

/// Writes clouds as class subdirectories plus a manifest.
inline void write_dataset(const fs::path& root, const Dataset& ds) {
  fs::create_directories(root);
  std::ofstream mf(root / kManifestFile);
  mf << "path,label\n";
  for (const auto& item : ds.items) {
    save_xyz(root / item.path, item.cloud);
    mf << item.path << ',' << ds.class_names.at(item.label) << '\n';
  }
}

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[4] = {'G', 'M', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Parameters plus the configuration that produced them.
struct ModelCheckpoint {
  json config;  // {"model": {...}, "train": {...}, ...}
  ParamStore<float> params;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) fail_data("truncated checkpoint");
  }
  template <class U>
  U get_le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes to the binary container: magic, version, config JSON, then name-sorted tensors
/// as float32 little-endian payloads.
inline std::string serialize_checkpoint(const ModelCheckpoint& ck) {
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = ck.config.dump();
  detail::put_le<std::uint64_t>(out, cfg.size());
  out += cfg;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, e] : ck.params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.shape.size()));
    for (auto d : e.tensor.shape) detail::put_le<std::uint64_t>(out, d);
    for (float v : e.tensor.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline ModelCheckpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) fail_data("bad magic");
  r.bytes(4);
  const auto version = r.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) fail_data("unsupported checkpoint version " + std::to_string(version));
  ModelCheckpoint ck;
  const auto cfg_len = r.get_le<std::uint64_t>();
  try {
    ck.config = json::parse(r.bytes(cfg_len));
  } catch (const json::parse_error&) {
    fail_data("corrupt checkpoint config block");
  }
  const auto count = r.get_le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.get_le<std::uint32_t>());
    const auto rank = r.get_le<std::uint32_t>();
    if (rank > 8) fail_data("corrupt checkpoint tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get_le<std::uint64_t>();
    const std::size_t count_vals = numel(shape);
    r.need(count_vals * 4);
    std::vector<float> data(count_vals);
    for (auto& v : data) {
      const auto bits = r.get_le<std::uint32_t>();
      std::memcpy(&v, &bits, sizeof v);
    }
    ck.params.add(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) fail_data("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const fs::path& path, const ModelCheckpoint& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_data("cannot write '" + path.string() + "'");
  const auto bytes = serialize_checkpoint(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Loads a checkpoint; when `expected` is given the stored model config must match it.
inline ModelCheckpoint load_checkpoint(const fs::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto ck = deserialize_checkpoint(bytes);
  if (expected) {
    if (!ck.config.contains("model") || !(model_config_from_json(ck.config["model"]) == *expected))
      fail_data("config mismatch");
  }
  return ck;
}

inline ModelConfig checkpoint_model_config(const ModelCheckpoint& ck) {
  if (!ck.config.contains("model")) fail_data("checkpoint has no model config");
  return model_config_from_json(ck.config["model"]);
}

}  // namespace geomae
