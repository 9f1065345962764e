#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "camforge/data.hpp"
#include "camforge/image_io.hpp"

using namespace camforge;
namespace fs = std::filesystem;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Sample make_sample(std::string id, Label label, Tensor image) {
  Sample s;
  s.image = std::move(image);
  s.label = label;
  s.source_id = id;
  s.origin_id = id;
  return s;
}

Tensor smooth_image(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      v[r * w + c] = 0.5 + 0.3 * std::sin(0.15 * static_cast<double>(r)) * std::cos(0.1 * static_cast<double>(c));
  return Tensor({1, h, w}, v);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(NormalizePixels, Examples) {
  GrayImage img{1, 3, {255, 0, 128}};
  const Tensor t = normalize_pixels(img);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 3}));
  EXPECT_EQ(t.data()[0], 1.0);
  EXPECT_EQ(t.data()[1], 0.0);
  EXPECT_EQ(t.data()[2], 128.0 / 255.0);
}

TEST(Pgm, RoundTripAndQuantize) {
  const fs::path dir = fresh_dir("camforge_pgm");
  GrayImage img{2, 3, {0, 1, 2, 253, 254, 255}};
  write_pgm(dir / "a.pgm", img);
  const GrayImage back = read_pgm(dir / "a.pgm");
  EXPECT_EQ(back.pixels, img.pixels);
  const std::vector<double> v{0.0, 0.5 / 255.0, 1.0, 2.0, -1.0, 0.5};
  const GrayImage q = quantize(v, 2, 3);
  EXPECT_EQ(q.pixels, (std::vector<std::uint8_t>{0, 1, 255, 255, 0, 128}));
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir / "bad.pgm"), std::runtime_error);
}

TEST(Augment, IdentityConfigIsBitwiseIdentity) {
  Rng rng(1);
  const Sample s = make_sample("x", Label::normal, Tensor::uniform({1, 16, 12}, rng, 0.0, 1.0));
  const Sample out = augment(s, AugmentConfig::identity(), rng);
  EXPECT_EQ(values(out.image), values(s.image));
}

TEST(Augment, FlipIsAnInvolution) {
  Rng rng(2);
  const Tensor img = Tensor::uniform({1, 7, 6}, rng, 0.0, 1.0);
  EXPECT_EQ(values(hflip(hflip(img))), values(img));
  EXPECT_EQ(hflip(img).data()[0], img.data()[5]);
}

TEST(Augment, ForcedFlipMirrorsPlantedZone) {
  AugmentConfig cfg = AugmentConfig::identity();
  cfg.flip_prob = 1.0;
  Rng rng(3);
  Sample s = make_sample("p", Label::pneumonia, smooth_image(12, 12));
  s.planted_zone = Zone::upper_east;
  EXPECT_EQ(augment(s, cfg, rng).planted_zone, Zone::upper_west);
}

TEST(Augment, RotationRoundTripErrorIsSmall) {
  const Tensor img = smooth_image(64, 64);
  const Tensor back = rotate(rotate(img, 10.0), -10.0);
  double mad = 0.0;
  for (std::size_t i = 0; i < img.numel(); ++i) mad += std::abs(back.data()[i] - img.data()[i]);
  EXPECT_LT(mad / static_cast<double>(img.numel()), 0.05);
}

TEST(Augment, OutputsStayInUnitRangeAndAreReproducible) {
  AugmentConfig cfg;
  cfg.brightness = 0.5;
  cfg.noise_sigma = 0.2;
  Rng gen(4);
  for (int i = 0; i < 20; ++i) {
    const Sample s = make_sample("s" + std::to_string(i), Label::normal, Tensor::uniform({1, 20, 18}, gen, 0.0, 1.0));
    Rng a(100 + i), b(100 + i);
    const Sample x = augment(s, cfg, a), y = augment(s, cfg, b);
    EXPECT_EQ(values(x.image), values(y.image));
    EXPECT_EQ(x.image.shape(), s.image.shape());
    for (double v : x.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(AugmentConfig, InvalidValuesAreRejected) {
  AugmentConfig c;
  c.crop_area_min = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.max_rotation_deg = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.crop_area_max = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

namespace {

DatasetSplit counted_split(std::size_t normals, std::size_t pneumonias) {
  DatasetSplit split;
  for (std::size_t i = 0; i < normals; ++i)
    split.train.push_back(make_sample("n" + std::to_string(i), Label::normal, Tensor({1, 4, 4}, 0.3)));
  for (std::size_t i = 0; i < pneumonias; ++i)
    split.train.push_back(make_sample("p" + std::to_string(i), Label::pneumonia, Tensor({1, 4, 4}, 0.6)));
  split.val.push_back(make_sample("v0", Label::normal, Tensor({1, 4, 4}, 0.1)));
  split.test.push_back(make_sample("t0", Label::pneumonia, Tensor({1, 4, 4}, 0.9)));
  return split;
}

}  // namespace

TEST(BalanceMinority, ImbalancedCounts) {
  Rng rng(5);
  const DatasetSplit out = balance_minority(counted_split(1341, 3875), AugmentConfig{}, rng);
  EXPECT_EQ(count_classes(out.train), (ClassCounts{3875, 3875}));
  EXPECT_EQ(count_originals(out.train), (ClassCounts{1341, 3875}));
}

TEST(BalanceMinority, AlreadyBalancedIsUnchanged) {
  Rng rng(6);
  const DatasetSplit in = counted_split(4, 4);
  const DatasetSplit out = balance_minority(in, AugmentConfig{}, rng);
  ASSERT_EQ(out.train.size(), in.train.size());
  for (std::size_t i = 0; i < in.train.size(); ++i) EXPECT_EQ(out.train[i].source_id, in.train[i].source_id);
}

TEST(BalanceMinority, ProvenanceOfCopies) {
  Rng rng(7);
  const DatasetSplit in = counted_split(3, 7);
  const DatasetSplit out = balance_minority(in, AugmentConfig{}, rng);
  EXPECT_EQ(count_classes(out.train), (ClassCounts{7, 7}));
  std::set<std::string> originals{"n0", "n1", "n2"};
  std::size_t copies = 0;
  for (const auto& s : out.train) {
    if (!s.augmented) continue;
    ++copies;
    EXPECT_EQ(s.label, Label::normal);
    EXPECT_TRUE(originals.count(s.origin_id)) << s.origin_id;
    EXPECT_EQ(s.source_id.rfind(s.origin_id + "#aug", 0), 0u) << s.source_id;
  }
  EXPECT_EQ(copies, 4u);
  // Validation and test untouched.
  EXPECT_EQ(out.val.size(), 1u);
  EXPECT_EQ(out.test.size(), 1u);
  EXPECT_EQ(values(out.val[0].image), values(in.val[0].image));
  EXPECT_TRUE(splits_disjoint(out));
}

TEST(BalanceMinority, EmptyMinorityIsAnError) {
  Rng rng(8);
  EXPECT_THROW(balance_minority(counted_split(0, 3), AugmentConfig{}, rng), std::invalid_argument);
}

TEST(SamplingWeights, Examples) {
  const DatasetSplit eq = counted_split(5, 5);
  for (double w : sampling_weights(eq.train, count_classes(eq.train))) EXPECT_DOUBLE_EQ(w, 0.1);

  const DatasetSplit small = counted_split(3, 4);
  const auto w = sampling_weights(small.train, ClassCounts{1341, 3875});
  EXPECT_NEAR(w[0] / w.back(), 3875.0 / 1341.0, 1e-12);
  double total = 0.0;
  for (double v : w) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_THROW(sampling_weights(small.train, ClassCounts{0, 3}), std::invalid_argument);
}

TEST(SamplingWeights, AugmentedCopiesUseOriginalCounts) {
  Rng rng(9);
  const DatasetSplit out = balance_minority(counted_split(2, 6), AugmentConfig::identity(), rng);
  const auto w = sampling_weights(out.train, count_originals(out.train));
  for (std::size_t i = 0; i < out.train.size(); ++i) {
    EXPECT_DOUBLE_EQ(w[i], w[out.train[i].label == Label::normal ? 0 : 2]);
  }
  EXPECT_NEAR(w[0] / w[2], 3.0, 1e-12);
}

TEST(SamplingWeights, DrawsAreClassBalanced) {
  const DatasetSplit in = counted_split(300, 300);
  const auto w = sampling_weights(in.train, count_classes(in.train));
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  Rng rng(10);
  std::size_t normal = 0;
  for (int i = 0; i < 100000; ++i) normal += in.train[pick(rng)].label == Label::normal;
  EXPECT_NEAR(normal / 1e5, 0.5, 0.01);
}

TEST(PosClassWeight, Examples) {
  EXPECT_NEAR(pos_class_weight({1341, 3875}), 0.34606, 1e-5);
  EXPECT_EQ(pos_class_weight({7, 7}), 1.0);
  EXPECT_EQ(pos_class_weight({10, 5}), 2.0);
  EXPECT_THROW(pos_class_weight({10, 0}), std::invalid_argument);
}

TEST(Phantoms, EmptyWhenNoSamplesRequested) {
  PhantomSpec spec;
  spec.n_per_class = 0;
  const DatasetSplit s = generate_phantoms(spec, 1);
  EXPECT_TRUE(s.train.empty() && s.val.empty() && s.test.empty());
}

TEST(Phantoms, PneumoniaImagesAreBrighter) {
  PhantomSpec spec;
  spec.n_per_class = 500;
  spec.val_fraction = spec.test_fraction = 0.0;
  const DatasetSplit s = generate_phantoms(spec, 2);
  double m[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  for (const auto& smp : s.train) {
    double total = 0.0;
    for (double v : smp.image.data()) total += v;
    m[static_cast<int>(smp.label)] += total / static_cast<double>(smp.image.numel());
    ++n[static_cast<int>(smp.label)];
    EXPECT_EQ(smp.planted_zone.has_value(), smp.label == Label::pneumonia);
  }
  ASSERT_EQ(n[0], 500u);
  ASSERT_EQ(n[1], 500u);
  EXPECT_GT(m[1] / 500.0 - m[0] / 500.0, 0.002);
}

TEST(Phantoms, ZonesRoughlyUniformAndValuesInRange) {
  PhantomSpec spec;
  spec.n_per_class = 600;
  const DatasetSplit s = generate_phantoms(spec, 3);
  std::map<Zone, int> zones;
  for (const auto& list : {&s.train, &s.val, &s.test}) {
    for (const auto& smp : *list) {
      for (double v : smp.image.data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
      if (smp.planted_zone) ++zones[*smp.planted_zone];
    }
  }
  EXPECT_EQ(zones.size(), 6u);
  for (const auto& [z, count] : zones) EXPECT_NEAR(count, 100, 35) << zone_key(z);
}

TEST(Phantoms, SplitProportionsAndDisjointness) {
  PhantomSpec spec;
  spec.n_per_class = 1000;
  const DatasetSplit s = generate_phantoms(spec, 4);
  const double expected = 1000.0 * 320.0 / 5856.0;
  EXPECT_NEAR(static_cast<double>(count_classes(s.val).normal), expected, 1.0);
  EXPECT_NEAR(static_cast<double>(count_classes(s.test).pneumonia), expected, 1.0);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 2000u);
  EXPECT_TRUE(splits_disjoint(s));
}

TEST(Phantoms, DeterministicUnderSeed) {
  PhantomSpec spec;
  spec.n_per_class = 5;
  const DatasetSplit a = generate_phantoms(spec, 9), b = generate_phantoms(spec, 9), c = generate_phantoms(spec, 10);
  EXPECT_EQ(values(a.train[0].image), values(b.train[0].image));
  EXPECT_NE(values(a.train[0].image), values(c.train[0].image));
}

TEST(LoadDirectory, EmptyDirectoriesAreAnError) {
  const fs::path root = fresh_dir("camforge_load_empty");
  fs::create_directories(root / "NORMAL");
  fs::create_directories(root / "PNEUMONIA");
  EXPECT_THROW(load_directory(root), std::runtime_error);
  EXPECT_THROW(load_directory(root / "missing"), std::runtime_error);
}

TEST(LoadDirectory, CorruptFilesAreSkippedAndCounted) {
  const fs::path root = fresh_dir("camforge_load_corrupt");
  fs::create_directories(root / "NORMAL");
  fs::create_directories(root / "PNEUMONIA");
  GrayImage img{64, 64, std::vector<std::uint8_t>(64 * 64, 100)};
  write_pgm(root / "NORMAL" / "a.pgm", img);
  write_pgm(root / "NORMAL" / "b.pgm", img);
  write_pgm(root / "PNEUMONIA" / "c.pgm", img);
  std::ofstream(root / "PNEUMONIA" / "d.pgm") << "P5\n64 64\n255\ntruncated";
  const LoadResult r = load_directory(root);
  EXPECT_EQ(r.split.train.size(), 3u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST(LoadDirectory, ResizesToConfiguredInput) {
  const fs::path root = fresh_dir("camforge_load_resize");
  fs::create_directories(root / "NORMAL");
  std::vector<std::uint8_t> px(128 * 128);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i % 256);
  write_pgm(root / "NORMAL" / "big.pgm", GrayImage{128, 128, px});
  const LoadResult r = load_directory(root, {64, 64});
  ASSERT_EQ(r.split.train.size(), 1u);
  const Tensor& t = r.split.train[0].image;
  EXPECT_EQ(t.shape(), (Shape{1, 64, 64}));
  for (double v : t.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(LoadDirectory, WrittenDatasetRoundTrips) {
  PhantomSpec spec;
  spec.n_per_class = 30;
  const DatasetSplit s = generate_phantoms(spec, 5);
  const fs::path root = fresh_dir("camforge_roundtrip");
  const auto rows = write_dataset(root, s);
  EXPECT_EQ(rows.size(), 60u);
  const LoadResult r = load_directory(root);
  EXPECT_EQ(r.skipped, 0u);
  ASSERT_EQ(r.split.train.size(), s.train.size());
  ASSERT_EQ(r.split.test.size(), s.test.size());
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    EXPECT_EQ(r.split.test[i].source_id, s.test[i].source_id);
    EXPECT_EQ(r.split.test[i].label, s.test[i].label);
    EXPECT_EQ(r.split.test[i].planted_zone, s.test[i].planted_zone);
    EXPECT_EQ(values(r.split.test[i].image), values(s.test[i].image));
  }
}

TEST(Batching, StacksAndReplicatesChannels) {
  const Sample a = make_sample("a", Label::normal, Tensor({1, 2, 2}, 0.25));
  const Sample b = make_sample("b", Label::pneumonia, Tensor({1, 2, 2}, 0.75));
  const Tensor x = make_batch({&a, &b}, 3);
  EXPECT_EQ(x.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(x.data()[11], 0.25);
  EXPECT_EQ(x.data()[12], 0.75);
  EXPECT_EQ(values(make_targets({&a, &b})), (std::vector<double>{0.0, 1.0}));
}
