#include "mssnet/coords.hpp"
#include "mssnet/data.hpp"
#include "mssnet/log.hpp"

#include "temp_dir.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <unistd.h>

using namespace mssnet;
using namespace mssnet::data;

namespace {

using oracle::TempDir;

void write_file(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << bytes;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

template <class T>
std::string pack(const std::vector<T>& v) {
  std::string s(v.size() * sizeof(T), '\0');
  std::memcpy(s.data(), v.data(), s.size());
  return s;
}

struct CaptureWarnings {
  std::vector<std::string> seen;
  WarningSink previous;
  CaptureWarnings() {
    previous = set_warning_sink([this](const std::string& m) { seen.push_back(m); });
  }
  ~CaptureWarnings() { set_warning_sink(previous); }
};

}  // namespace

TEST(Kitti, RecordSizeAndBitmask) {
  TempDir dir;
  const std::vector<float> pts{1.f, 2.f, 3.f, 0.5f, -1.f, 0.f, 2.5f, 0.25f, 7.f, 8.f, 9.f, 1.f};
  const std::vector<std::uint32_t> words{0x00010033u, 0x0000000Au, 0xFFFF0028u};
  write_file(dir.path / "a.bin", pack(pts).substr(0, 32));
  EXPECT_EQ(load_kitti_scan(dir.path / "a.bin").size(), 2u);

  write_file(dir.path / "b.bin", pack(pts));
  write_file(dir.path / "b.label", pack(words));
  const auto c = load_kitti_scan(dir.path / "b.bin", dir.path / "b.label");
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.raw_labels[0] & 0xFFFFu, 0x33u);
  EXPECT_EQ(c.labels[0], 13u);  // 51 fence
  EXPECT_EQ(c.labels[1], 0u);   // 10 car
  EXPECT_EQ(c.labels[2], 8u);   // 40 road, instance bits 0xFFFF dropped
  EXPECT_EQ(c.positions(1, 0), -1.0);
  EXPECT_EQ(c.attributes(2, 0), 1.0);
}

TEST(Kitti, LabelMapIsTotalAndInvertible) {
  CaptureWarnings w;
  for (std::uint32_t id = 0; id < 0x10000u; ++id) {
    const auto t = kitti_train_id(id);
    EXPECT_TRUE(t == kIgnoreLabel || t < 19u);
  }
  for (std::uint32_t t = 0; t < 19; ++t) EXPECT_EQ(kitti_train_id(kitti_raw_id(t)), t);
  EXPECT_EQ(kitti_raw_id(kIgnoreLabel), 0u);
  bool known = true;
  EXPECT_EQ(kitti_train_id(5, &known), kIgnoreLabel);
  EXPECT_FALSE(known);
  EXPECT_EQ(kitti_train_id(252), kitti_train_id(10));  // moving car
}

TEST(Kitti, UnknownIdsWarnAndIgnore) {
  TempDir dir;
  CaptureWarnings w;
  write_file(dir.path / "s.bin", pack(std::vector<float>{0, 0, 0, 0, 1, 1, 1, 1}));
  write_file(dir.path / "s.label", pack(std::vector<std::uint32_t>{5, 0x00020005u}));
  const auto c = load_kitti_scan(dir.path / "s.bin", dir.path / "s.label");
  EXPECT_EQ(c.labels[0], kIgnoreLabel);
  EXPECT_EQ(w.seen.size(), 1u);
}

TEST(Kitti, MalformedAndMismatchedFiles) {
  TempDir dir;
  write_file(dir.path / "bad.bin", std::string(17, '\0'));
  EXPECT_THROW(load_kitti_scan(dir.path / "bad.bin"), MalformedFileError);
  write_file(dir.path / "ok.bin", std::string(32, '\0'));
  write_file(dir.path / "bad.label", std::string(6, '\0'));
  EXPECT_THROW(load_kitti_scan(dir.path / "ok.bin", dir.path / "bad.label"), MalformedFileError);
  write_file(dir.path / "three.label", std::string(12, '\0'));
  EXPECT_THROW(load_kitti_scan(dir.path / "ok.bin", dir.path / "three.label"), PairingError);
  EXPECT_THROW(load_kitti_scan(dir.path / "missing.bin"), InvalidInputError);
}

TEST(Kitti, RoundTripIsByteExact) {
  TempDir dir;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.f, 20.f);
  std::vector<float> pts(4 * 1000);
  for (auto& v : pts) v = n(rng);
  std::vector<std::uint32_t> words(1000);
  for (auto& w : words) w = static_cast<std::uint32_t>(rng());
  write_file(dir.path / "in.bin", pack(pts));
  write_file(dir.path / "in.label", pack(words));
  CaptureWarnings quiet;
  const auto c = load_kitti_scan(dir.path / "in.bin", dir.path / "in.label");
  write_kitti_bin(dir.path / "out.bin", c);
  write_kitti_label(dir.path / "out.label", c);
  EXPECT_EQ(read_file(dir.path / "in.bin"), read_file(dir.path / "out.bin"));
  EXPECT_EQ(read_file(dir.path / "in.label"), read_file(dir.path / "out.label"));
}

TEST(S3dis, ParsesLineAndScalesColor) {
  const auto v = parse_s3dis_line("1.0 2.0 3.0 255 0 0", "f", 1);
  ASSERT_TRUE(v);
  EXPECT_EQ((*v)[0], 1.0);
  EXPECT_EQ((*v)[3], 255.0);
  EXPECT_FALSE(parse_s3dis_line("   \r", "f", 2).has_value());
  EXPECT_TRUE(parse_s3dis_line("-1.5e1\t2 3 10 20 30\r", "f", 3).has_value());
}

TEST(S3dis, MalformedLinesNameTheLine) {
  const std::vector<std::string> bad{"1.0 2.0 3.0 255 0", "1.0 2.0 abc 255 0 0", "1 2 3 4 5 6 7",
                                     "1,2,3,4,5,6", "1 2 3 4 5 6x", "nan 2 3 4 5 6"};
  for (const auto& line : bad) {
    try {
      parse_s3dis_line(line, "room/chair_1.txt", 42);
      ADD_FAILURE() << "accepted: " << line;
    } catch (const MalformedFileError& e) {
      EXPECT_NE(std::string(e.what()).find("room/chair_1.txt:42"), std::string::npos) << e.what();
    }
  }
}

TEST(S3dis, LoadsRoomFromAnnotations) {
  TempDir dir;
  CaptureWarnings w;
  const fs::path room = dir.path / "Area_1" / "office_1";
  write_file(room / "Annotations" / "wall_1.txt", "0 0 0 0 0 0\n1 0 0 255 255 255\n2 0 0 51 102 153\n");
  write_file(room / "Annotations" / "chair_2.txt", "0 1 0 10 10 10\n\n0 2 0 10 10 10\n");
  write_file(room / "Annotations" / "mystery_1.txt", "5 5 5 0 0 0\n");
  write_file(room / "office_1.txt", "this whole-room file is ignored\n");
  const auto c = load_s3dis_room(room);
  ASSERT_EQ(c.size(), 6u);
  // Sorted file order: chair, mystery, wall.
  EXPECT_EQ(c.labels[0], s3dis_class_id("chair"));
  EXPECT_EQ(c.labels[2], 12u);
  EXPECT_EQ(c.labels[5], s3dis_class_id("wall"));
  EXPECT_DOUBLE_EQ(c.attributes(5, 2), 153.0 / 255.0);
  EXPECT_EQ(w.seen.size(), 1u);

  write_file(room / "Annotations" / "table_1.txt", "1 2 3\n");
  try {
    load_s3dis_room(room);
    ADD_FAILURE();
  } catch (const MalformedFileError& e) {
    EXPECT_NE(std::string(e.what()).find("table_1.txt:1"), std::string::npos);
  }
}

TEST(Augment, DisabledIsIdentityAndSeedIsDeterministic) {
  auto cloud = synth_scene(random_scene_spec(3, 500));
  const auto same = augment(cloud, AugmentationConfig::disabled(), 99);
  EXPECT_TRUE(same.positions == cloud.positions);
  const AugmentationConfig cfg;
  const auto a = augment(cloud, cfg, 7);
  const auto b = augment(cloud, cfg, 7);
  const auto c = augment(cloud, cfg, 8);
  EXPECT_TRUE(a.positions == b.positions);
  EXPECT_FALSE(a.positions == c.positions);
  EXPECT_EQ(a.labels, cloud.labels);
  EXPECT_TRUE(a.attributes == cloud.attributes);
  EXPECT_EQ(a.size(), cloud.size());
}

TEST(Augment, RotationAndJitterBounds) {
  Matrix p(1, 3);
  p << 1.0, 0.0, 2.5;
  const Matrix r = rotate_z(p, std::numbers::pi);
  EXPECT_NEAR(r(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-12);
  EXPECT_EQ(r(0, 2), 2.5);

  auto cloud = synth_scene(random_scene_spec(4, 2000));
  AugmentationConfig jitter_only = AugmentationConfig::disabled();
  jitter_only.jitter = true;
  const auto j = augment(cloud, jitter_only, 1);
  EXPECT_LE((j.positions - cloud.positions).cwiseAbs().maxCoeff(), 3 * 0.01 + 1e-15);

  AugmentationConfig bad;
  bad.scale_min = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Synthetic, SceneProperties) {
  EXPECT_THROW(synth_scene({}), DegenerateError);
  SceneSpec plane{{{Primitive::Kind::plane, 0, {0, 0, 0}, {1, 1, 0}, 1000}}, 1};
  const auto v = voxelize(synth_scene(plane), 0.05);
  for (auto l : v.voxel_labels) EXPECT_EQ(l, 0u);

  SceneSpec boxes{{{Primitive::Kind::box, 1, {0, 0, 0}, {0.5, 0.5, 0.5}, 800},
                   {Primitive::Kind::box, 2, {1, 1, 0}, {1.4, 1.3, 0.6}, 800}},
                  2};
  const auto cloud = synth_scene(boxes);
  const auto vb = voxelize(cloud, 0.05);
  for (std::size_t p = 0; p < cloud.size(); ++p)
    EXPECT_EQ(vb.voxel_labels[static_cast<std::size_t>(vb.point_to_voxel[p])], cloud.labels[p]);

  const auto spec = random_scene_spec(11);
  const auto a = synth_scene(spec), b = synth_scene(spec);
  EXPECT_EQ(a.size(), b.size());
  EXPECT_TRUE(a.positions == b.positions);
  EXPECT_GT(a.size(), 4500u);
  EXPECT_LE(a.size(), 5000u);
  // Objects float above the ground, so voxel labels are pure.
  const auto va = voxelize(a, 0.05);
  for (std::size_t p = 0; p < a.size(); ++p)
    EXPECT_EQ(va.voxel_labels[static_cast<std::size_t>(va.point_to_voxel[p])], a.labels[p]);
}

TEST(Splits, DefaultsAndFileFormat) {
  const auto k = kitti_default_split();
  EXPECT_EQ(k.val, std::vector<std::string>{"08"});
  EXPECT_EQ(k.train.size(), 10u);
  EXPECT_EQ(std::count(k.train.begin(), k.train.end(), "08"), 0);
  EXPECT_EQ(s3dis_default_split().val, std::vector<std::string>{"5"});
  const auto s = SplitDefinition::parse("# comment\ntrain = 1, 2,3\nval = 4\n");
  EXPECT_EQ(s.train, (std::vector<std::string>{"1", "2", "3"}));
  EXPECT_THROW(SplitDefinition::parse("test = 1\n"), ConfigError);
  EXPECT_THROW(s.get("test"), ConfigError);
}

TEST(Datasets, OpenAndFeatures) {
  KeyValueConfig kv;
  kv.set("data.synthetic_train_count", "3");
  const auto ds = open_dataset(DatasetKind::synthetic, "", "train", kv);
  EXPECT_EQ(ds->size(), 3u);
  const auto cloud = ds->load(1);
  const Matrix f = make_features(cloud, DatasetKind::synthetic);
  EXPECT_EQ(f.cols(), feature_channels(DatasetKind::synthetic));
  EXPECT_TRUE((f.col(0).array() == 1.0).all());
  EXPECT_THROW(open_dataset(DatasetKind::kitti, "/nonexistent/kitti", "train", kv), InvalidInputError);

  LabeledPointCloud room;
  room.positions = Matrix(2, 3);
  room.positions << 0, 0, 0, 2, 4, 3;
  room.attributes = Matrix::Constant(2, 3, 0.5);
  room.labels = {0, 1};
  const Matrix rf = make_features(room, DatasetKind::s3dis);
  EXPECT_EQ(rf.cols(), 6);
  EXPECT_EQ(rf(1, 3), 1.0);
  EXPECT_EQ(rf(0, 5), 0.0);
}

TEST(Predictions, LittleEndianWords) {
  TempDir dir;
  std::vector<std::uint32_t> labels{1, 0x01020304u, 255};
  write_predictions(dir.path / "p.label", labels);
  const std::string bytes = read_file(dir.path / "p.label");
  ASSERT_EQ(bytes.size(), 12u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0x04);
  EXPECT_EQ(read_predictions(dir.path / "p.label"), labels);
}
