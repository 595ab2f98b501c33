#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "midas/data.hpp"

using namespace midas;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("midas_data_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

// Rows of a fake batch file: pixel byte k of row r is (r * 7 + k * 3 + c0) % 256.
void write_batch(const std::filesystem::path& f, int rows, int label_bytes, int first_label, int c0) {
  std::ofstream os(f, std::ios::binary);
  for (int r = 0; r < rows; ++r) {
    if (label_bytes == 2) os.put(static_cast<char>((first_label + r) % 20));
    os.put(static_cast<char>((first_label + r) % (label_bytes == 2 ? 100 : 10)));
    for (int k = 0; k < 3072; ++k) os.put(static_cast<char>((r * 7 + k * 3 + c0) % 256));
  }
}

}  // namespace

TEST(Cifar, TenClassLayoutAndNormalization) {
  const auto dir = temp_dir("c10");
  for (int i = 1; i <= 5; ++i) write_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), 4, 1, i, i * 11);
  write_batch(dir / "test_batch.bin", 3, 1, 0, 5);
  ChannelStats st;
  const auto d = ingest_cifar(dir, CifarVariant::cifar10, true, nullptr, &st);
  EXPECT_EQ(d.size(), 20);
  EXPECT_EQ(d.images.shape(), (std::vector<int>{20, 3, 32, 32}));
  EXPECT_EQ(d.num_classes, 10);
  EXPECT_EQ(d.labels[0], 1);
  EXPECT_EQ(d.labels[4], 2);
  for (int c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (int i = 0; i < d.size(); ++i)
      for (int p = 0; p < 1024; ++p) {
        const double v = d.image(i)[c * 1024 + p];
        s += v;
        ss += v * v;
      }
    const double n = d.size() * 1024.0;
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(ss / n - (s / n) * (s / n), 1.0, 0.01);
  }
  // Test split normalized with training statistics: raw value recoverable.
  const auto t = ingest_cifar(dir, CifarVariant::cifar10, false, &st);
  EXPECT_EQ(t.size(), 3);
  const double raw = t.image(1)[0] * st.std[0] + st.mean[0];
  EXPECT_NEAR(raw, ((1 * 7 + 5) % 256) / 255.0, 1e-5);
  std::filesystem::remove_all(dir);
}

TEST(Cifar, HundredClassKeepsFineLabel) {
  const auto dir = temp_dir("c100");
  write_batch(dir / "train.bin", 5, 2, 37, 0);
  const auto d = ingest_cifar(dir, CifarVariant::cifar100);
  EXPECT_EQ(d.num_classes, 100);
  EXPECT_EQ(d.labels, (std::vector<int>{37, 38, 39, 40, 41}));
  std::filesystem::remove_all(dir);
}

TEST(Cifar, MissingOrTruncatedFilesRejected) {
  const auto dir = temp_dir("bad");
  EXPECT_THROW(ingest_cifar(dir, CifarVariant::cifar10), DataError);
  write_batch(dir / "train.bin", 2, 2, 0, 0);
  std::filesystem::resize_file(dir / "train.bin", 3074 * 2 - 1);
  EXPECT_THROW(ingest_cifar(dir, CifarVariant::cifar100), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Planted, DeterministicPerSeed) {
  PlantedParams p;
  const auto a = generate_planted(p, 50, 9), b = generate_planted(p, 50, 9), c = generate_planted(p, 50, 10);
  EXPECT_EQ(a.images.storage(), b.images.storage());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images.storage(), c.images.storage());
  EXPECT_EQ(a.images.shape(), (std::vector<int>{50, 3, 16, 16}));
}

TEST(Planted, FullStrengthOracleIsNearPerfect) {
  PlantedParams p;
  const auto d = generate_planted(p, 2000, 1);
  EXPECT_GT(planted_oracle_accuracy(d), 0.95);
  p.num_classes = 3;
  EXPECT_GT(planted_oracle_accuracy(generate_planted(p, 2000, 2)), 0.95);
}

TEST(Planted, ZeroStrengthIsChance) {
  PlantedParams p;
  p.signal_strength = 0.0;
  const auto d = generate_planted(p, 4000, 3);
  EXPECT_NEAR(planted_oracle_accuracy(d), 0.5, 0.03);
  p.num_classes = 3;
  EXPECT_NEAR(planted_oracle_accuracy(generate_planted(p, 4000, 4)), 1.0 / 3.0, 0.03);
}

TEST(Planted, ClassesBalancedAndParamsValidated) {
  PlantedParams p;
  p.num_classes = 3;
  const auto d = generate_planted(p, 3000, 5);
  std::vector<int> count(3, 0);
  for (int y : d.labels) ++count[static_cast<std::size_t>(y)];
  for (int c : count) EXPECT_NEAR(c, 1000, 100);
  p.num_classes = 4;
  EXPECT_THROW(generate_planted(p, 10, 1), std::invalid_argument);
  p.num_classes = 2;
  p.grating_extent = 17;
  EXPECT_THROW(generate_planted(p, 10, 1), std::invalid_argument);
}

TEST(Similarity, ThreeClassesDeterministic) {
  const auto a = generate_similarity_set(16, 90, 1), b = generate_similarity_set(16, 90, 1);
  EXPECT_EQ(a.num_classes, 3);
  EXPECT_EQ(a.images.storage(), b.images.storage());
  std::vector<int> count(3, 0);
  for (int y : a.labels) ++count[static_cast<std::size_t>(y)];
  for (int c : count) EXPECT_GT(c, 15);
}

TEST(Subset, CopiesSelectedRows) {
  PlantedParams p;
  const auto d = generate_planted(p, 10, 1);
  const auto s = subset(d, {7, 2});
  EXPECT_EQ(s.size(), 2);
  EXPECT_EQ(s.labels[0], d.labels[7]);
  EXPECT_EQ(std::vector<float>(s.image(1), s.image(1) + d.image_numel()),
            std::vector<float>(d.image(2), d.image(2) + d.image_numel()));
}
