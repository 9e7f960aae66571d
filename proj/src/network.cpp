#include "mssnet/network.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mssnet::nn {

using ad::Tape;

// ---------------------------------------------------------------------------
// Config

void MssNetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("net.in_channels must be positive");
  if (num_classes < 2) throw ConfigError("net.num_classes must be at least 2");
  if (encoder_channels.empty()) throw ConfigError("net.encoder_channels must not be empty");
  if (decoder_channels.size() + 1 != encoder_channels.size())
    throw ConfigError("net.decoder_channels needs exactly one entry fewer than encoder_channels (" +
                      std::to_string(encoder_channels.size() - 1) + " expected, got " +
                      std::to_string(decoder_channels.size()) + ")");
  for (int c : encoder_channels)
    if (c < 1) throw ConfigError("net.encoder_channels entries must be positive");
  for (int c : decoder_channels)
    if (c < 1) throw ConfigError("net.decoder_channels entries must be positive");
  for (int k : mffm_kernels)
    if (k < 1 || k % 2 == 0) throw ConfigError("net.mffm_kernels entries must be odd");
  if (reduction < 1) throw ConfigError("net.reduction must be positive");
  if (use_acffm)
    for (int c : encoder_channels)
      if (c % reduction != 0)
        throw ConfigError("encoder width " + std::to_string(c) + " is not divisible by net.reduction");
}

MssNetConfig MssNetConfig::from_config(const KeyValueConfig& kv) {
  MssNetConfig c;
  c.in_channels = static_cast<int>(kv.get_int("net.in_channels", c.in_channels));
  c.num_classes = static_cast<int>(kv.get_int("net.num_classes", c.num_classes));
  c.encoder_channels = kv.get_int_list("net.encoder_channels", c.encoder_channels);
  c.decoder_channels = kv.get_int_list("net.decoder_channels", c.decoder_channels);
  const auto kernels = kv.get_int_list("net.mffm_kernels", {c.mffm_kernels.begin(), c.mffm_kernels.end()});
  if (kernels.size() != 3) throw ConfigError("net.mffm_kernels needs three kernel sizes");
  c.mffm_kernels = {kernels[0], kernels[1], kernels[2]};
  c.reduction = static_cast<int>(kv.get_int("net.reduction", c.reduction));
  c.use_mffm = kv.get_bool("net.use_mffm", c.use_mffm);
  c.use_acffm = kv.get_bool("net.use_acffm", c.use_acffm);
  c.per_channel_scores = kv.get_bool("net.per_channel_scores", c.per_channel_scores);
  c.init_seed = static_cast<std::uint64_t>(kv.get_int("net.init_seed", static_cast<std::int64_t>(c.init_seed)));
  c.validate();
  return c;
}

void MssNetConfig::to_config(KeyValueConfig& kv) const {
  kv.set("net.in_channels", std::to_string(in_channels));
  kv.set("net.num_classes", std::to_string(num_classes));
  kv.set("net.encoder_channels", join_ints(encoder_channels));
  kv.set("net.decoder_channels", join_ints(decoder_channels));
  kv.set("net.mffm_kernels", join_ints({mffm_kernels[0], mffm_kernels[1], mffm_kernels[2]}));
  kv.set("net.reduction", std::to_string(reduction));
  kv.set("net.use_mffm", use_mffm ? "true" : "false");
  kv.set("net.use_acffm", use_acffm ? "true" : "false");
  kv.set("net.per_channel_scores", per_channel_scores ? "true" : "false");
  kv.set("net.init_seed", std::to_string(init_seed));
}

std::string MssNetConfig::canonical_text() const {
  KeyValueConfig kv;
  to_config(kv);
  return kv.serialize();
}

// ---------------------------------------------------------------------------
// Construction

namespace {

// Every layer draws from its own stream keyed by name, so toggling one block
// leaves the initialization of all other layers unchanged.
std::mt19937_64 rng_for(const std::string& name, std::uint64_t seed) {
  return std::mt19937_64(fnv1a64(name) ^ (seed * 0x9E3779B97F4A7C15ULL));
}

}  // namespace

Network::Network(MssNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto seed = config_.init_seed;
  const auto& enc = config_.encoder_channels;
  const auto& dec = config_.decoder_channels;
  {
    auto rng = rng_for("stem.conv", seed);
    stem_conv_ = ConvLayer::make("stem.conv", config_.in_channels, enc[0], 3, 1, false, false, rng);
    stem_norm_ = BatchNormLayer::make("stem.norm", enc[0]);
  }
  MffmConfig mffm_cfg;
  mffm_cfg.kernel_sizes = config_.mffm_kernels;
  mffm_cfg.per_channel_scores = config_.per_channel_scores;
  for (std::size_t l = 0; l < enc.size(); ++l) {
    EncoderLevel level;
    const std::string p = "enc" + std::to_string(l);
    if (config_.use_mffm) {
      auto rng = rng_for(p + ".mffm", seed);
      level.mffm = MffmBlock::make(p + ".mffm", enc[l], mffm_cfg, rng);
    } else {
      auto rng = rng_for(p + ".plain", seed);
      level.plain = PlainBlock{ConvLayer::make(p + ".plain.conv", enc[l], enc[l], 3, 1, false, false, rng),
                               BatchNormLayer::make(p + ".plain.norm", enc[l])};
    }
    if (config_.use_acffm) {
      auto rng = rng_for(p + ".acffm", seed);
      level.acffm = AcffmBlock::make(p + ".acffm", enc[l], config_.reduction, rng);
    }
    if (l + 1 < enc.size()) {
      auto rng = rng_for(p + ".down", seed);
      level.down = ConvLayer::make(p + ".down.conv", enc[l], enc[l + 1], 3, 2, false, false, rng);
      level.down_norm = BatchNormLayer::make(p + ".down.norm", enc[l + 1]);
    }
    encoder_.push_back(std::move(level));
  }
  int width = enc.back();
  for (std::size_t i = 0; i < dec.size(); ++i) {
    const std::string p = "dec" + std::to_string(i);
    const int skip = enc[enc.size() - 2 - i];
    auto rng = rng_for(p, seed);
    DecoderLevel level{
        ConvLayer::make(p + ".up.conv", width, dec[i], 3, 2, true, false, rng),
        BatchNormLayer::make(p + ".up.norm", dec[i]),
        ConvLayer::make(p + ".merge.conv", dec[i] + skip, dec[i], 3, 1, false, false, rng),
        BatchNormLayer::make(p + ".merge.norm", dec[i]),
        ResidualUnit::make(p + ".res", dec[i], rng),
    };
    decoder_.push_back(std::move(level));
    width = dec[i];
  }
  auto rng = rng_for("head", seed);
  head_ = LinearLayer::make("head", width, config_.num_classes, true, rng);
}

std::vector<ad::Parameter*> Network::parameters() {
  std::vector<ad::Parameter*> out;
  stem_conv_.collect(out);
  stem_norm_.collect(out);
  for (auto& level : encoder_) {
    if (level.mffm) level.mffm->collect(out);
    if (level.plain) {
      level.plain->conv.collect(out);
      level.plain->norm.collect(out);
    }
    if (level.acffm) level.acffm->collect(out);
    if (level.down) {
      level.down->collect(out);
      level.down_norm->collect(out);
    }
  }
  for (auto& level : decoder_) {
    level.up.collect(out);
    level.up_norm.collect(out);
    level.merge.collect(out);
    level.merge_norm.collect(out);
    level.residual.collect(out);
  }
  head_.collect(out);
  return out;
}

std::vector<Buffer> Network::buffers() {
  std::vector<Buffer> out;
  stem_norm_.collect_buffers(out);
  for (auto& level : encoder_) {
    if (level.mffm) level.mffm->collect_buffers(out);
    if (level.plain) level.plain->norm.collect_buffers(out);
    if (level.acffm) level.acffm->collect_buffers(out);
    if (level.down_norm) level.down_norm->collect_buffers(out);
  }
  for (auto& level : decoder_) {
    level.up_norm.collect_buffers(out);
    level.merge_norm.collect_buffers(out);
    level.residual.collect_buffers(out);
  }
  return out;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void Network::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Forward

SparseVar Network::encoder_block(Tape& t, const SparseVar& x, EncoderLevel& level, Mode mode) {
  SparseVar base;
  std::array<SparseVar, 3> branches;
  if (level.mffm) {
    MffmOutput m = mffm_forward(t, x, *level.mffm, mode);
    base = relu(t, m.output);
    branches = m.branches;
  } else {
    base = relu(t, batch_norm(t, submanifold_conv(t, x, level.plain->conv), level.plain->norm, mode));
    branches = {base, base, base};
  }
  if (level.acffm) {
    AcffmOutput a = acffm_forward(t, branches[0], branches[1], branches[2], *level.acffm, mode);
    base = add(t, base, a.output);
  }
  return base;
}

SparseVar Network::forward(Tape& t, const SparseVar& x, Mode mode) {
  if (!x.coords || x.coords->empty()) throw EmptyInputError("network forward: empty input");
  if (x.stride != 1) throw ConfigError("network input must be at stride 1");
  if (t.value(x.features).cols() != config_.in_channels)
    throw ConfigError("network expects " + std::to_string(config_.in_channels) +
                      " input channels, got " + std::to_string(t.value(x.features).cols()));

  ForwardContext ctx;
  SparseVar h = relu(t, batch_norm(t, submanifold_conv(t, x, stem_conv_), stem_norm_, mode));
  for (auto& level : encoder_) {
    h = encoder_block(t, h, level, mode);
    if (level.down) {
      ctx.skips.push_back(h);
      h = relu(t, batch_norm(t, strided_conv(t, h, *level.down), *level.down_norm, mode));
    }
  }
  for (auto& level : decoder_) {
    if (ctx.skips.empty()) throw PipelineError("decoder ran out of recorded encoder levels");
    const SparseVar skip = ctx.skips.back();
    ctx.skips.pop_back();
    SparseVar up = relu(t, batch_norm(t, transposed_conv(t, h, level.up, skip.coords), level.up_norm, mode));
    SparseVar merged = concat_channels(t, up, skip);
    merged = relu(t, batch_norm(t, submanifold_conv(t, merged, level.merge), level.merge_norm, mode));
    h = residual_forward(t, merged, level.residual, mode);
  }
  return pointwise_linear(t, h, head_);
}

Matrix Network::predict_logits(const SparseTensor& x) {
  Tape t;
  const SparseVar in = lift(t, x);
  return t.value(forward(t, in, Mode::eval).features);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'S', 'S', 'N', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { raw_le(v); }
  void u64(std::uint64_t v) { raw_le(v); }
  void f64(double v) { raw_le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  template <class T>
  void raw_le(T v) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  }
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  std::uint32_t u32() { return raw_le<std::uint32_t>(); }
  std::uint64_t u64() { return raw_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(raw_le<std::uint64_t>()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1ULL << 30)) fail("string length out of range");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) fail("truncated string");
    return s;
  }
  [[noreturn]] void fail(const std::string& what) {
    throw MalformedFileError("checkpoint " + path_ + ": " + what);
  }

 private:
  template <class T>
  T raw_le() {
    unsigned char bytes[sizeof(T)];
    in_.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in_) fail("truncated file");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Network& net, const std::string& metadata) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  Writer w(out);
  out.write(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  const std::string net_text = net.config().canonical_text();
  w.u64(fnv1a64(net_text));
  w.str(net_text);
  w.str(metadata);
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (auto* p : net.parameters()) tensors.emplace_back(p->name, &p->value);
  for (const auto& b : net.buffers()) tensors.emplace_back(b.name, b.value);
  w.u64(tensors.size());
  for (const auto& [name, m] : tensors) {
    w.str(name);
    w.u64(static_cast<std::uint64_t>(m->rows()));
    w.u64(static_cast<std::uint64_t>(m->cols()));
    for (Eigen::Index i = 0; i < m->size(); ++i) w.f64(m->data()[i]);
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config_hash = r.u64();
  ckpt.network_config = r.str();
  if (fnv1a64(ckpt.network_config) != ckpt.config_hash) r.fail("config hash does not match config text");
  ckpt.metadata = r.str();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows * cols > (1ULL << 32)) r.fail("tensor " + name + " too large");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.f64();
    ckpt.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

void load_checkpoint(const Checkpoint& ckpt, Network& net) {
  const std::string expected = net.config().canonical_text();
  if (fnv1a64(expected) != ckpt.config_hash || expected != ckpt.network_config)
    throw CheckpointMismatchError("checkpoint was written for a different network config");
  std::vector<std::pair<std::string, Matrix*>> targets;
  for (auto* p : net.parameters()) targets.emplace_back(p->name, &p->value);
  for (const auto& b : net.buffers()) targets.emplace_back(b.name, b.value);
  if (targets.size() != ckpt.tensors.size())
    throw CheckpointMismatchError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                                  " tensors, network has " + std::to_string(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& [name, m] = ckpt.tensors[i];
    if (name != targets[i].first)
      throw CheckpointMismatchError("tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                                    targets[i].first + "'");
    if (m.rows() != targets[i].second->rows() || m.cols() != targets[i].second->cols())
      throw CheckpointMismatchError("shape mismatch for tensor '" + name + "'");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) *targets[i].second = ckpt.tensors[i].second;
  for (auto* p : net.parameters()) p->zero_grad();
}

void load_checkpoint(const std::filesystem::path& path, Network& net) {
  load_checkpoint(read_checkpoint(path), net);
}

}  // namespace mssnet::nn
