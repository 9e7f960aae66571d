#include "mssnet/data.hpp"

#include "mssnet/log.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace mssnet::data {

static_assert(std::endian::native == std::endian::little,
              "binary readers assume a little-endian host");

namespace {

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> bytes(n);
  if (n > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(n)))
    throw InvalidInputError("short read from " + path.string());
  return bytes;
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInputError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw InvalidInputError("write failed for " + path.string());
}

// Raw id -> learning id (0 means ignore); from the dataset's label config.
const std::map<std::uint32_t, std::uint32_t>& kitti_learning_map() {
  static const std::map<std::uint32_t, std::uint32_t> m{
      {0, 0},    {1, 0},    {10, 1},   {11, 2},   {13, 5},   {15, 3},   {16, 5},
      {18, 4},   {20, 5},   {30, 6},   {31, 7},   {32, 8},   {40, 9},   {44, 10},
      {48, 11},  {49, 12},  {50, 13},  {51, 14},  {52, 0},   {60, 9},   {70, 15},
      {71, 16},  {72, 17},  {80, 18},  {81, 19},  {99, 0},   {252, 1},  {253, 7},
      {254, 6},  {255, 8},  {256, 5},  {257, 5},  {258, 4},  {259, 5}};
  return m;
}

constexpr std::array<std::uint32_t, kKittiClasses> kKittiInverse{
    10, 11, 15, 18, 20, 30, 31, 32, 40, 44, 48, 49, 50, 51, 70, 71, 72, 80, 81};

}  // namespace

const std::vector<std::string>& kitti_class_names() {
  static const std::vector<std::string> names{
      "car",      "bicycle",  "motorcycle", "truck",        "other-vehicle",
      "person",   "bicyclist", "motorcyclist", "road",      "parking",
      "sidewalk", "other-ground", "building", "fence",      "vegetation",
      "trunk",    "terrain",  "pole",       "traffic-sign"};
  return names;
}

std::uint32_t kitti_train_id(std::uint32_t semantic_id, bool* known) {
  const auto& m = kitti_learning_map();
  auto it = m.find(semantic_id);
  if (known) *known = it != m.end();
  if (it == m.end() || it->second == 0) return kIgnoreLabel;
  return it->second - 1;
}

std::uint32_t kitti_raw_id(std::uint32_t train_id) {
  if (train_id == kIgnoreLabel) return 0;
  if (train_id >= kKittiInverse.size())
    throw InvalidInputError("kitti train id " + std::to_string(train_id) + " out of range");
  return kKittiInverse[train_id];
}

LabeledPointCloud load_kitti_scan(const fs::path& bin_path, const std::optional<fs::path>& label_path) {
  const std::vector<char> bin = read_bytes(bin_path);
  if (bin.size() % 16 != 0)
    throw MalformedFileError(bin_path.string() + ": size " + std::to_string(bin.size()) +
                             " is not a multiple of 16");
  const std::size_t n = bin.size() / 16;
  LabeledPointCloud cloud;
  cloud.source_id = bin_path.string();
  cloud.positions.resize(static_cast<Eigen::Index>(n), 3);
  cloud.attributes.resize(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) {
    float rec[4];
    std::memcpy(rec, bin.data() + i * 16, 16);
    const auto r = static_cast<Eigen::Index>(i);
    cloud.positions(r, 0) = rec[0];
    cloud.positions(r, 1) = rec[1];
    cloud.positions(r, 2) = rec[2];
    cloud.attributes(r, 0) = rec[3];
  }
  cloud.labels.assign(n, kIgnoreLabel);
  if (label_path) {
    const std::vector<char> lab = read_bytes(*label_path);
    if (lab.size() % 4 != 0)
      throw MalformedFileError(label_path->string() + ": size " + std::to_string(lab.size()) +
                               " is not a multiple of 4");
    if (lab.size() / 4 != n)
      throw PairingError(bin_path.string() + " has " + std::to_string(n) + " points but " +
                         label_path->string() + " has " + std::to_string(lab.size() / 4) + " labels");
    cloud.raw_labels.resize(n);
    if (n > 0) std::memcpy(cloud.raw_labels.data(), lab.data(), lab.size());
    std::set<std::uint32_t> unknown;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t semantic = cloud.raw_labels[i] & 0xFFFFu;
      bool known = true;
      cloud.labels[i] = kitti_train_id(semantic, &known);
      if (!known) unknown.insert(semantic);
    }
    for (auto id : unknown)
      warn(label_path->string() + ": unknown semantic id " + std::to_string(id) + " mapped to ignore");
  }
  return cloud;
}

void write_kitti_bin(const fs::path& path, const LabeledPointCloud& cloud) {
  const std::size_t n = cloud.size();
  if (cloud.positions.cols() != 3 || cloud.attributes.rows() != cloud.positions.rows() ||
      cloud.attributes.cols() < 1)
    throw InvalidInputError("write_kitti_bin: need P x 3 positions and an intensity column");
  std::vector<float> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    buf[4 * i] = static_cast<float>(cloud.positions(r, 0));
    buf[4 * i + 1] = static_cast<float>(cloud.positions(r, 1));
    buf[4 * i + 2] = static_cast<float>(cloud.positions(r, 2));
    buf[4 * i + 3] = static_cast<float>(cloud.attributes(r, 0));
  }
  write_bytes(path, buf.data(), buf.size() * sizeof(float));
}

void write_kitti_label(const fs::path& path, const LabeledPointCloud& cloud) {
  std::vector<std::uint32_t> words;
  if (!cloud.raw_labels.empty()) {
    words = cloud.raw_labels;
  } else {
    words.reserve(cloud.labels.size());
    for (auto l : cloud.labels) words.push_back(kitti_raw_id(l));
  }
  write_bytes(path, words.data(), words.size() * sizeof(std::uint32_t));
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& s3dis_class_names() {
  static const std::vector<std::string> names{"ceiling", "floor", "wall",  "beam",     "column",
                                              "window",  "door",  "table", "chair",    "sofa",
                                              "bookcase", "board", "clutter"};
  return names;
}

std::uint32_t s3dis_class_id(const std::string& name, bool* known) {
  const auto& names = s3dis_class_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (known) *known = it != names.end();
  if (it == names.end()) return 12;
  return static_cast<std::uint32_t>(it - names.begin());
}

std::optional<std::array<double, 6>> parse_s3dis_line(const std::string& line, const std::string& source,
                                                      std::size_t line_number) {
  std::array<double, 6> v{};
  const char* p = line.data();
  const char* end = p + line.size();
  auto skip_ws = [&] {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
  };
  skip_ws();
  if (p == end) return std::nullopt;
  auto fail = [&](const std::string& why) {
    return MalformedFileError(source + ":" + std::to_string(line_number) + ": " + why);
  };
  for (int k = 0; k < 6; ++k) {
    skip_ws();
    if (p == end) throw fail("expected 6 values, got " + std::to_string(k));
    auto [next, ec] = std::from_chars(p, end, v[static_cast<std::size_t>(k)]);
    if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t' && *next != '\r'))
      throw fail("cannot parse value " + std::to_string(k + 1));
    if (!std::isfinite(v[static_cast<std::size_t>(k)])) throw fail("non-finite value");
    p = next;
  }
  skip_ws();
  if (p != end) throw fail("trailing characters after 6 values");
  return v;
}

LabeledPointCloud load_s3dis_room(const fs::path& room_dir) {
  if (!fs::is_directory(room_dir)) throw InvalidInputError("not a directory: " + room_dir.string());
  fs::path dir = room_dir / "Annotations";
  if (!fs::is_directory(dir)) dir = room_dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw EmptyInputError("no object files in " + dir.string());

  std::vector<std::array<double, 6>> rows;
  std::vector<std::uint32_t> labels;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const std::string category = stem.substr(0, stem.find('_'));
    bool known = true;
    const std::uint32_t label = s3dis_class_id(category, &known);
    if (!known) warn(f.string() + ": unknown category '" + category + "' mapped to clutter");
    std::ifstream in(f);
    if (!in) throw InvalidInputError("cannot open " + f.string());
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
      ++line_number;
      if (auto v = parse_s3dis_line(line, f.string(), line_number)) {
        rows.push_back(*v);
        labels.push_back(label);
      }
    }
  }
  if (rows.empty()) throw EmptyInputError("room " + room_dir.string() + " has no points");
  LabeledPointCloud cloud;
  cloud.source_id = room_dir.string();
  const auto n = static_cast<Eigen::Index>(rows.size());
  cloud.positions.resize(n, 3);
  cloud.attributes.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& v = rows[static_cast<std::size_t>(i)];
    for (int k = 0; k < 3; ++k) {
      cloud.positions(i, k) = v[static_cast<std::size_t>(k)];
      cloud.attributes(i, k) = v[static_cast<std::size_t>(k + 3)] / 255.0;
    }
  }
  cloud.labels = std::move(labels);
  return cloud;
}

// ---------------------------------------------------------------------------

void AugmentationConfig::validate() const {
  if (!(scale_min > 0.0) || !(scale_max >= scale_min)) throw ConfigError("augmentation scale range invalid");
  if (translation_range < 0.0) throw ConfigError("translation range must be >= 0");
  if (jitter_sigma < 0.0) throw ConfigError("jitter sigma must be >= 0");
}

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig c;
  c.scale = c.rotate = c.translate = c.jitter = false;
  return c;
}

AugmentationConfig AugmentationConfig::from_config(const KeyValueConfig& kv) {
  AugmentationConfig c;
  c.scale = kv.get_bool("aug.scale", c.scale);
  c.scale_min = kv.get_double("aug.scale_min", c.scale_min);
  c.scale_max = kv.get_double("aug.scale_max", c.scale_max);
  c.rotate = kv.get_bool("aug.rotate", c.rotate);
  c.translate = kv.get_bool("aug.translate", c.translate);
  c.translation_range = kv.get_double("aug.translation_range", c.translation_range);
  c.jitter = kv.get_bool("aug.jitter", c.jitter);
  c.jitter_sigma = kv.get_double("aug.jitter_sigma", c.jitter_sigma);
  c.validate();
  return c;
}

void AugmentationConfig::to_config(KeyValueConfig& kv) const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto d = format_double;
  kv.set("aug.scale", b(scale));
  kv.set("aug.scale_min", d(scale_min));
  kv.set("aug.scale_max", d(scale_max));
  kv.set("aug.rotate", b(rotate));
  kv.set("aug.translate", b(translate));
  kv.set("aug.translation_range", d(translation_range));
  kv.set("aug.jitter", b(jitter));
  kv.set("aug.jitter_sigma", d(jitter_sigma));
}

Matrix rotate_z(const Matrix& positions, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Matrix out = positions;
  out.col(0) = c * positions.col(0) - s * positions.col(1);
  out.col(1) = s * positions.col(0) + c * positions.col(1);
  return out;
}

LabeledPointCloud augment(const LabeledPointCloud& cloud, const AugmentationConfig& config,
                          std::uint64_t seed) {
  config.validate();
  LabeledPointCloud out = cloud;
  std::mt19937_64 rng(seed);
  // Draws happen whether or not a transform is enabled so toggling one
  // transform does not shift the others' random streams.
  const double s = std::uniform_real_distribution<double>(config.scale_min, config.scale_max)(rng);
  const double angle = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  std::uniform_real_distribution<double> shift(-config.translation_range, config.translation_range);
  const double tx = shift(rng), ty = shift(rng), tz = shift(rng);

  if (config.scale) out.positions *= s;
  if (config.rotate) out.positions = rotate_z(out.positions, angle);
  if (config.translate) {
    out.positions.col(0).array() += tx;
    out.positions.col(1).array() += ty;
    out.positions.col(2).array() += tz;
  }
  if (config.jitter && config.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.jitter_sigma);
    const double clip = 3.0 * config.jitter_sigma;
    for (Eigen::Index i = 0; i < out.positions.rows(); ++i)
      for (int k = 0; k < 3; ++k) out.positions(i, k) += std::clamp(noise(rng), -clip, clip);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void sample_primitive(const Primitive& p, std::mt19937_64& rng, std::vector<std::array<double, 3>>& pts) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  switch (p.kind) {
    case Primitive::Kind::plane:
      for (std::size_t i = 0; i < p.points; ++i)
        pts.push_back({lerp(p.min[0], p.max[0], u(rng)), lerp(p.min[1], p.max[1], u(rng)), p.min[2]});
      break;
    case Primitive::Kind::box: {
      const double dx = p.max[0] - p.min[0], dy = p.max[1] - p.min[1], dz = p.max[2] - p.min[2];
      const std::array<double, 3> area{dy * dz, dx * dz, dx * dy};  // faces normal to x, y, z
      const double total = 2.0 * (area[0] + area[1] + area[2]);
      for (std::size_t i = 0; i < p.points; ++i) {
        double pick = u(rng) * total;
        int axis = 0;
        while (axis < 2 && pick >= 2.0 * area[static_cast<std::size_t>(axis)]) {
          pick -= 2.0 * area[static_cast<std::size_t>(axis)];
          ++axis;
        }
        const bool high = u(rng) < 0.5;
        std::array<double, 3> q{};
        for (int k = 0; k < 3; ++k) {
          const auto kk = static_cast<std::size_t>(k);
          q[kk] = k == axis ? (high ? p.max[kk] : p.min[kk]) : lerp(p.min[kk], p.max[kk], u(rng));
        }
        pts.push_back(q);
      }
      break;
    }
    case Primitive::Kind::pole:
      for (std::size_t i = 0; i < p.points; ++i) {
        const double a = 2.0 * std::numbers::pi * u(rng);
        pts.push_back({p.min[0] + p.max[0] * std::cos(a), p.min[1] + p.max[0] * std::sin(a),
                       lerp(p.min[2], p.max[2], u(rng))});
      }
      break;
  }
}

}  // namespace

LabeledPointCloud synth_scene(const SceneSpec& spec) {
  std::size_t total = 0;
  for (const auto& p : spec.primitives) total += p.points;
  if (spec.primitives.empty() || total == 0) throw DegenerateError("synth_scene: empty scene spec");
  std::mt19937_64 rng(spec.seed);
  std::vector<std::array<double, 3>> pts;
  std::vector<std::uint32_t> labels;
  pts.reserve(total);
  labels.reserve(total);
  for (const auto& p : spec.primitives) {
    sample_primitive(p, rng, pts);
    labels.resize(pts.size(), p.label);
  }
  LabeledPointCloud cloud;
  cloud.source_id = "synthetic:" + std::to_string(spec.seed);
  const auto n = static_cast<Eigen::Index>(pts.size());
  cloud.positions.resize(n, 3);
  cloud.attributes.resize(n, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) cloud.positions(i, k) = pts[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    cloud.attributes(i, 0) = u(rng);
  }
  cloud.labels = std::move(labels);
  return cloud;
}

SceneSpec random_scene_spec(std::uint64_t seed, std::size_t points) {
  std::mt19937_64 rng(seed ^ 0x5ce9e5eedULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec spec;
  spec.seed = seed;
  const double half = 2.0;
  spec.primitives.push_back({Primitive::Kind::plane, 0, {-half, -half, 0.0}, {half, half, 0.0},
                             points * 2 / 5});

  // Objects sit in distinct cells of a 4x4 grid so they never overlap, and
  // float 0.1 m above the ground so no voxel mixes labels.
  std::vector<int> cells(16);
  for (int i = 0; i < 16; ++i) cells[static_cast<std::size_t>(i)] = i;
  std::shuffle(cells.begin(), cells.end(), rng);
  const int boxes = 2 + static_cast<int>(u(rng) * 3.0);  // 2..4
  const int poles = 2 + static_cast<int>(u(rng) * 3.0);
  const double cell = 2.0 * half / 4.0;
  const std::size_t box_points = points * 2 / 5 / static_cast<std::size_t>(boxes);
  const std::size_t pole_points = points / 5 / static_cast<std::size_t>(poles);
  for (int i = 0; i < boxes + poles; ++i) {
    const int c = cells[static_cast<std::size_t>(i)];
    const double cx = -half + (c % 4 + 0.5) * cell;
    const double cy = -half + (c / 4 + 0.5) * cell;
    if (i < boxes) {
      const double sx = 0.25 + 0.15 * u(rng), sy = 0.25 + 0.15 * u(rng), h = 0.3 + 0.5 * u(rng);
      spec.primitives.push_back({Primitive::Kind::box, 1, {cx - sx, cy - sy, 0.1}, {cx + sx, cy + sy, 0.1 + h},
                                 box_points});
    } else {
      const double r = 0.05 + 0.05 * u(rng), h = 1.0 + 1.0 * u(rng);
      spec.primitives.push_back({Primitive::Kind::pole, 2, {cx, cy, 0.1}, {r, 0.0, 0.1 + h}, pole_points});
    }
  }
  // Rounding leftovers go to the ground so the total is exact.
  spec.primitives.front().points =
      points - static_cast<std::size_t>(boxes) * box_points - static_cast<std::size_t>(poles) * pole_points;
  return spec;
}

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"ground", "box", "pole"};
  return names;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

SplitDefinition SplitDefinition::parse(const std::string& text) {
  const KeyValueConfig kv = KeyValueConfig::parse(text);
  for (const auto& [k, v] : kv.values())
    if (k != "train" && k != "val") throw ConfigError("split file: unknown key '" + k + "'");
  SplitDefinition s;
  s.train = split_list(kv.get_string("train", ""));
  s.val = split_list(kv.get_string("val", ""));
  if (s.train.empty() && s.val.empty()) throw ConfigError("split file lists no train or val entries");
  return s;
}

SplitDefinition SplitDefinition::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInputError("cannot open split file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const std::vector<std::string>& SplitDefinition::get(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  throw ConfigError("unknown split '" + name + "' (expected train or val)");
}

SplitDefinition kitti_default_split() {
  return {{"00", "01", "02", "03", "04", "05", "06", "07", "09", "10"}, {"08"}};
}

SplitDefinition s3dis_default_split() { return {{"1", "2", "3", "4", "6"}, {"5"}}; }

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "synthetic") return DatasetKind::synthetic;
  if (name == "kitti" || name == "semantickitti") return DatasetKind::kitti;
  if (name == "s3dis") return DatasetKind::s3dis;
  throw ConfigError("unknown dataset kind '" + name + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::kitti: return "kitti";
    case DatasetKind::s3dis: return "s3dis";
  }
  return "?";
}

int num_classes(DatasetKind kind) {
  return static_cast<int>(class_names(kind).size());
}

const std::vector<std::string>& class_names(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kitti: return kitti_class_names();
    case DatasetKind::s3dis: return s3dis_class_names();
    default: return synthetic_class_names();
  }
}

int feature_channels(DatasetKind kind) { return kind == DatasetKind::s3dis ? 6 : 3; }

Matrix make_features(const LabeledPointCloud& cloud, DatasetKind kind) {
  const Eigen::Index n = cloud.positions.rows();
  Matrix f(n, feature_channels(kind));
  switch (kind) {
    case DatasetKind::synthetic:
      if (cloud.attributes.cols() < 1) throw InvalidInputError("synthetic cloud needs one attribute");
      f.col(0).setOnes();
      f.col(1) = cloud.positions.col(2);
      f.col(2) = cloud.attributes.col(0);
      break;
    case DatasetKind::kitti:
      if (cloud.attributes.cols() < 1) throw InvalidInputError("kitti cloud needs an intensity attribute");
      f.col(0) = cloud.attributes.col(0);
      f.col(1) = cloud.positions.col(2);
      f.col(2).setOnes();
      break;
    case DatasetKind::s3dis: {
      if (cloud.attributes.cols() < 3) throw InvalidInputError("s3dis cloud needs rgb attributes");
      f.leftCols(3) = cloud.attributes.leftCols(3);
      for (int k = 0; k < 3; ++k) {
        const double lo = cloud.positions.col(k).minCoeff();
        const double extent = cloud.positions.col(k).maxCoeff() - lo;
        if (extent > 0.0)
          f.col(3 + k) = (cloud.positions.col(k).array() - lo) / extent;
        else
          f.col(3 + k).setZero();
      }
      break;
    }
  }
  return f;
}

SyntheticDataset::SyntheticDataset(std::uint64_t seed_base, std::size_t count, std::size_t points)
    : seed_base_(seed_base), count_(count), points_(points) {
  if (count == 0) throw ConfigError("synthetic dataset needs at least one scene");
}

LabeledPointCloud SyntheticDataset::load(std::size_t index) const {
  if (index >= count_) throw InvalidInputError("synthetic dataset index out of range");
  return synth_scene(random_scene_spec(seed_base_ + index, points_));
}

KittiDataset::KittiDataset(const fs::path& root, const std::vector<std::string>& sequences) {
  for (const auto& seq : sequences) {
    const fs::path dir = root / "sequences" / seq;
    const fs::path velodyne = dir / "velodyne";
    if (!fs::is_directory(velodyne)) throw InvalidInputError("missing scan directory " + velodyne.string());
    std::vector<fs::path> bins;
    for (const auto& e : fs::directory_iterator(velodyne))
      if (e.path().extension() == ".bin") bins.push_back(e.path());
    std::sort(bins.begin(), bins.end());
    for (const auto& b : bins) {
      fs::path label = dir / "labels" / b.filename().replace_extension(".label");
      scans_.emplace_back(b, fs::exists(label) ? std::optional<fs::path>(label) : std::nullopt);
    }
  }
}

LabeledPointCloud KittiDataset::load(std::size_t index) const {
  const auto& [bin, label] = scans_.at(index);
  return load_kitti_scan(bin, label);
}

S3disDataset::S3disDataset(const fs::path& root, const std::vector<std::string>& areas) {
  for (const auto& area : areas) {
    const fs::path dir = root / ("Area_" + area);
    if (!fs::is_directory(dir)) throw InvalidInputError("missing area directory " + dir.string());
    std::vector<fs::path> rooms;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory()) rooms.push_back(e.path());
    std::sort(rooms.begin(), rooms.end());
    rooms_.insert(rooms_.end(), rooms.begin(), rooms.end());
  }
}

LabeledPointCloud S3disDataset::load(std::size_t index) const { return load_s3dis_room(rooms_.at(index)); }

std::unique_ptr<Dataset> open_dataset(DatasetKind kind, const fs::path& root, const std::string& split,
                                      const KeyValueConfig& kv) {
  if (split != "train" && split != "val") throw ConfigError("unknown split '" + split + "'");
  if (kind == DatasetKind::synthetic) {
    const bool train = split == "train";
    const auto seed = static_cast<std::uint64_t>(
        kv.get_int(train ? "data.synthetic_train_seed" : "data.synthetic_val_seed", train ? 1000 : 5000));
    const auto count = kv.get_int(train ? "data.synthetic_train_count" : "data.synthetic_val_count", train ? 4 : 2);
    const auto points = kv.get_int("data.synthetic_points", 5000);
    if (count < 1 || points < 1) throw ConfigError("synthetic dataset sizes must be positive");
    return std::make_unique<SyntheticDataset>(seed, static_cast<std::size_t>(count),
                                              static_cast<std::size_t>(points));
  }
  if (!fs::exists(root)) throw InvalidInputError("dataset root does not exist: " + root.string());
  SplitDefinition def = kind == DatasetKind::kitti ? kitti_default_split() : s3dis_default_split();
  if (kv.has("data.split_file")) def = SplitDefinition::load(kv.get_string("data.split_file", ""));
  const auto& items = def.get(split);
  if (kind == DatasetKind::kitti) return std::make_unique<KittiDataset>(root, items);
  return std::make_unique<S3disDataset>(root, items);
}

void write_predictions(const fs::path& path, std::span<const std::uint32_t> labels) {
  write_bytes(path, labels.data(), labels.size() * sizeof(std::uint32_t));
}

std::vector<std::uint32_t> read_predictions(const fs::path& path) {
  const std::vector<char> bytes = read_bytes(path);
  if (bytes.size() % 4 != 0) throw MalformedFileError(path.string() + ": size is not a multiple of 4");
  std::vector<std::uint32_t> out(bytes.size() / 4);
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace mssnet::data
