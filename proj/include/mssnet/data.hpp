#pragma once

#include "mssnet/config.hpp"
#include "mssnet/point_cloud.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mssnet::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SemanticKITTI

inline constexpr int kKittiClasses = 19;

const std::vector<std::string>& kitti_class_names();

/// Raw semantic id (lower 16 bits of a label word) -> train id in [0, 19) or
/// kIgnoreLabel. Ids outside the dataset vocabulary map to kIgnoreLabel and
/// set `*known` to false.
std::uint32_t kitti_train_id(std::uint32_t semantic_id, bool* known = nullptr);
/// Train id -> raw semantic id (kIgnoreLabel -> 0, "unlabeled").
std::uint32_t kitti_raw_id(std::uint32_t train_id);

/// Reads a `.bin` scan (float32 x, y, z, intensity records) and optionally
/// its `.label` file. Without labels every point gets kIgnoreLabel.
LabeledPointCloud load_kitti_scan(const fs::path& bin_path,
                                  const std::optional<fs::path>& label_path = std::nullopt);
/// Writes the scan back as float32 quadruples.
void write_kitti_bin(const fs::path& path, const LabeledPointCloud& cloud);
/// Writes `raw_labels` when present, otherwise the inverse-mapped train ids.
void write_kitti_label(const fs::path& path, const LabeledPointCloud& cloud);

// ---------------------------------------------------------------------------
// S3DIS

inline constexpr int kS3disClasses = 13;

const std::vector<std::string>& s3dis_class_names();
/// Category name (the object file prefix, e.g. "chair" in "chair_3.txt") to
/// class id; unknown names map to clutter and set `*known` to false.
std::uint32_t s3dis_class_id(const std::string& name, bool* known = nullptr);

/// Parses one "x y z r g b" line. Returns nullopt for blank lines and throws
/// MalformedFileError naming `source` and `line_number` otherwise.
std::optional<std::array<double, 6>> parse_s3dis_line(const std::string& line,
                                                      const std::string& source,
                                                      std::size_t line_number);

/// Loads a whole room from `room_dir/Annotations/*.txt` (or `room_dir/*.txt`
/// when there is no Annotations directory). Files are read in sorted order.
LabeledPointCloud load_s3dis_room(const fs::path& room_dir);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  bool scale = true;
  double scale_min = 0.95;
  double scale_max = 1.05;
  bool rotate = true;
  bool translate = true;
  double translation_range = 0.2;  // uniform in [-t, t] per axis, meters
  bool jitter = true;
  double jitter_sigma = 0.01;  // meters, clipped at 3 sigma

  void validate() const;
  static AugmentationConfig disabled();
  static AugmentationConfig from_config(const KeyValueConfig& kv);
  void to_config(KeyValueConfig& kv) const;
};

/// Rotates positions about the Z axis by `angle` radians.
Matrix rotate_z(const Matrix& positions, double angle);

/// scale -> rotate about Z -> translate -> jitter. Attributes and labels are
/// untouched.
LabeledPointCloud augment(const LabeledPointCloud& cloud, const AugmentationConfig& config,
                          std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct Primitive {
  enum class Kind { plane, box, pole };
  Kind kind = Kind::plane;
  std::uint32_t label = 0;
  std::array<double, 3> min{};  // plane: z = min[2], extent in x/y; box: corners
  std::array<double, 3> max{};  // pole: center x/y from min, radius max[0], z range min[2]..max[2]
  std::size_t points = 0;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;
};

/// Samples every primitive's surface uniformly. Attributes are one noise
/// channel in [0, 1] that carries no label information. Throws
/// DegenerateError on an empty spec.
LabeledPointCloud synth_scene(const SceneSpec& spec);

/// Random ground/box/pole scene (labels 0, 1, 2) of roughly `points` points.
SceneSpec random_scene_spec(std::uint64_t seed, std::size_t points = 5000);

inline constexpr int kSyntheticClasses = 3;
const std::vector<std::string>& synthetic_class_names();

// ---------------------------------------------------------------------------
// Splits and datasets

struct SplitDefinition {
  std::vector<std::string> train;
  std::vector<std::string> val;

  /// Plain-text split: `train = 00,01,...` and `val = 08`.
  static SplitDefinition parse(const std::string& text);
  static SplitDefinition load(const fs::path& path);
  const std::vector<std::string>& get(const std::string& name) const;
};

SplitDefinition kitti_default_split();
SplitDefinition s3dis_default_split();

enum class DatasetKind { synthetic, kitti, s3dis };

DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);
int num_classes(DatasetKind kind);
const std::vector<std::string>& class_names(DatasetKind kind);

/// Per-point input features fed to the network.
///   synthetic: (1, z, noise)
///   kitti:     (intensity, z, 1)
///   s3dis:     (r, g, b, x', y', z') with positions normalized to [0, 1]
///              over the room's bounding box
Matrix make_features(const LabeledPointCloud& cloud, DatasetKind kind);
int feature_channels(DatasetKind kind);

/// Indexable collection of scenes; items are loaded on demand.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual DatasetKind kind() const = 0;
  virtual std::size_t size() const = 0;
  virtual LabeledPointCloud load(std::size_t index) const = 0;
};

/// Synthetic family: item i is random_scene_spec(seed_base + i, points).
class SyntheticDataset : public Dataset {
 public:
  SyntheticDataset(std::uint64_t seed_base, std::size_t count, std::size_t points);
  DatasetKind kind() const override { return DatasetKind::synthetic; }
  std::size_t size() const override { return count_; }
  LabeledPointCloud load(std::size_t index) const override;

 private:
  std::uint64_t seed_base_;
  std::size_t count_;
  std::size_t points_;
};

/// root/sequences/<seq>/velodyne/*.bin with labels/*.label alongside.
class KittiDataset : public Dataset {
 public:
  KittiDataset(const fs::path& root, const std::vector<std::string>& sequences);
  DatasetKind kind() const override { return DatasetKind::kitti; }
  std::size_t size() const override { return scans_.size(); }
  LabeledPointCloud load(std::size_t index) const override;

 private:
  std::vector<std::pair<fs::path, std::optional<fs::path>>> scans_;
};

/// root/Area_<n>/<room>/ for each listed area id.
class S3disDataset : public Dataset {
 public:
  S3disDataset(const fs::path& root, const std::vector<std::string>& areas);
  DatasetKind kind() const override { return DatasetKind::s3dis; }
  std::size_t size() const override { return rooms_.size(); }
  LabeledPointCloud load(std::size_t index) const override;

 private:
  std::vector<fs::path> rooms_;
};

/// Builds the dataset for `split` ("train" or "val"). For synthetic data
/// `root` is ignored and the keys `data.synthetic_*` size the family.
/// Throws InvalidInputError when a real dataset root does not exist.
std::unique_ptr<Dataset> open_dataset(DatasetKind kind, const fs::path& root,
                                      const std::string& split, const KeyValueConfig& kv);

/// One little-endian uint32 per point.
void write_predictions(const fs::path& path, std::span<const std::uint32_t> labels);
std::vector<std::uint32_t> read_predictions(const fs::path& path);

}  // namespace mssnet::data
