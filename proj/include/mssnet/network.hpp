#pragma once

#include "mssnet/attention.hpp"
#include "mssnet/config.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mssnet::nn {

struct MssNetConfig {
  int in_channels = 6;
  int num_classes = 13;
  std::vector<int> encoder_channels{32, 64, 128, 256};
  std::vector<int> decoder_channels{128, 96, 96};
  std::array<int, 3> mffm_kernels{3, 5, 7};
  int reduction = 4;
  bool use_mffm = true;
  bool use_acffm = true;
  bool per_channel_scores = false;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on inconsistent fields.
  void validate() const;
  /// Reads the `net.*` keys; absent keys keep their defaults.
  static MssNetConfig from_config(const KeyValueConfig& kv);
  void to_config(KeyValueConfig& kv) const;
  /// Canonical text of the `net.*` keys; what checkpoints hash.
  std::string canonical_text() const;
};

/// Plain encoder block used when MFFM is disabled: conv K=3 -> BN -> relu.
struct PlainBlock {
  ConvLayer conv;
  BatchNormLayer norm;
};

struct EncoderLevel {
  std::optional<MffmBlock> mffm;
  std::optional<PlainBlock> plain;
  std::optional<AcffmBlock> acffm;
  // Downsampling to the next level; absent on the deepest level.
  std::optional<ConvLayer> down;
  std::optional<BatchNormLayer> down_norm;
};

struct DecoderLevel {
  ConvLayer up;
  BatchNormLayer up_norm;
  ConvLayer merge;  // (decoder + skip) channels -> decoder channels
  BatchNormLayer merge_norm;
  ResidualUnit residual;
};

/// Per-level coordinate maps and skip tensors recorded by the encoder.
struct ForwardContext {
  std::vector<SparseVar> skips;
};

/// Hierarchical sparse encoder-decoder:
///   stem -> per level [MFFM | plain] (+ ACFFM) -> strided conv ...
///   decoder: transposed conv onto the stored coords -> concat skip ->
///   merge conv -> residual unit; head: pointwise linear to class logits.
class Network {
 public:
  explicit Network(MssNetConfig config);

  const MssNetConfig& config() const noexcept { return config_; }

  /// Per-voxel logits on the input coordinates.
  SparseVar forward(ad::Tape& t, const SparseVar& x, Mode mode);
  /// Eval-mode logits for a plain tensor.
  Matrix predict_logits(const SparseTensor& x);

  std::vector<ad::Parameter*> parameters();
  std::vector<Buffer> buffers();
  std::size_t parameter_count();
  void zero_grad();

 private:
  SparseVar encoder_block(ad::Tape& t, const SparseVar& x, EncoderLevel& level, Mode mode);

  MssNetConfig config_;
  ConvLayer stem_conv_;
  BatchNormLayer stem_norm_;
  std::vector<EncoderLevel> encoder_;
  std::vector<DecoderLevel> decoder_;
  LinearLayer head_;
};

/// Parsed checkpoint container.
struct Checkpoint {
  std::string network_config;  // canonical net.* text
  std::uint64_t config_hash = 0;
  std::string metadata;        // free-form key = value snapshot (experiment config)
  std::vector<std::pair<std::string, Matrix>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned little-endian binary container of named tensors plus the
/// config snapshot. Output bytes depend only on the network state and
/// metadata.
void save_checkpoint(const std::filesystem::path& path, Network& net, const std::string& metadata);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Loads tensors into `net`; refuses (CheckpointMismatchError) when the
/// config hash or any tensor name/shape disagrees.
void load_checkpoint(const Checkpoint& ckpt, Network& net);
void load_checkpoint(const std::filesystem::path& path, Network& net);

}  // namespace mssnet::nn
