#pragma once

#include "mssnet/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mssnet {

/// Raw points with per-point attributes and semantic labels.
///
/// `positions` is P x 3 in meters. `attributes` is P x A (rgb in [0,1] for
/// indoor rooms, intensity for LiDAR scans). `labels` holds remapped class
/// ids, or kIgnoreLabel. `raw_labels` keeps the original 32-bit label words
/// when the cloud came from a KITTI `.label` file so the file can be
/// re-serialized byte for byte.
struct LabeledPointCloud {
  Matrix positions;
  Matrix attributes;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> raw_labels;
  std::string source_id;

  std::size_t size() const { return static_cast<std::size_t>(positions.rows()); }

  /// Throws InvalidInputError if row counts disagree or positions are non-finite.
  void validate() const;
};

}  // namespace mssnet
