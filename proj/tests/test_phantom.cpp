#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ctseg/manifest.hpp"
#include "ctseg/phantom.hpp"
#include "test_util.hpp"

using namespace ctseg;
using ctseg::testing::code_of;
using ctseg::testing::TempDir;

namespace {

PhantomSpec small_spec(int side = 64) {
  PhantomSpec s;
  s.side = side;
  return s;
}

}  // namespace

TEST(Phantom, EveryLabelPresent) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto s = generate_phantom(PhantomSpec{}, "A", seed);
    std::set<Label> seen(s.mask.labels().begin(), s.mask.labels().end());
    EXPECT_EQ(seen.size(), 7u) << "seed " << seed;
    EXPECT_TRUE(s.image.normalized());
    EXPECT_EQ(s.image.height(), 128);
  }
}

TEST(Phantom, DeterministicPerSeed) {
  const auto a = generate_phantom(small_spec(), "B", 42);
  const auto b = generate_phantom(small_spec(), "B", 42);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.mask, b.mask);
}

TEST(Phantom, DomainsShareAnatomy) {
  const auto a = generate_phantom(small_spec(), "A", 7);
  const auto b = generate_phantom(small_spec(), "B", 7);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.image.values(), b.image.values());
}

TEST(Phantom, AnatomyVariesAcrossSeeds) {
  std::vector<std::vector<Label>> masks;
  for (std::uint64_t seed = 0; seed < 32; ++seed) masks.push_back(generate_phantom(PhantomSpec{}, "A", seed).mask.labels());
  std::sort(masks.begin(), masks.end());
  EXPECT_EQ(std::unique(masks.begin(), masks.end()), masks.end());
}

TEST(Phantom, ResidualGapMatchesNoiseGap) {
  const PhantomSpec spec;
  double gap = 0;
  for (std::uint64_t seed = 0; seed < 32; ++seed)
    gap += residual_std(generate_phantom(spec, "B", seed)) - residual_std(generate_phantom(spec, "A", seed));
  gap /= 32;
  const double expected = spec.domain_b.noise_std - spec.domain_a.noise_std;
  EXPECT_NEAR(gap, expected, 0.2 * expected);
}

TEST(Phantom, ThresholdSeparatesDomains) {
  const PhantomSpec spec;
  std::vector<std::pair<double, int>> pts;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    pts.emplace_back(residual_std(generate_phantom(spec, "A", 1000 + seed)), 0);
    pts.emplace_back(residual_std(generate_phantom(spec, "B", 2000 + seed)), 1);
  }
  std::sort(pts.begin(), pts.end());
  // Best threshold between consecutive sorted values.
  std::size_t best = 0;
  for (std::size_t cut = 0; cut <= pts.size(); ++cut) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) ok += (i < cut) == (pts[i].second == 0);
    best = std::max(best, ok);
  }
  EXPECT_GE(static_cast<double>(best) / pts.size(), 0.95);
}

TEST(Phantom, ValidationErrors) {
  PhantomSpec s;
  s.intensity[3] = s.intensity[0] + 0.05;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kInvalidArgument);
  PhantomSpec t;
  t.domain_b.noise_std = -0.1;
  EXPECT_EQ(code_of([&] { t.validate(); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { generate_phantom(PhantomSpec{}, "C", 1); }), ErrorCode::kInvalidArgument);
}

TEST(Phantom, JsonRoundTrip) {
  PhantomSpec s;
  s.side = 96;
  s.domain_b.streak_amp = 0.07;
  const auto back = phantom_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
}

TEST(PhantomDataset, SplitCounts) {
  TempDir dir;
  const auto m = generate_phantom_dataset(small_spec(32), 40, 20, 3, 1, dir.path());
  EXPECT_EQ(m.samples.size(), 63u);
  EXPECT_EQ(m.indices(Split::kTrain).size(), 40u);
  EXPECT_EQ(m.indices(Split::kTest).size(), 20u);
  EXPECT_EQ(m.indices(Split::kStyle).size(), 3u);
  for (std::size_t i : m.indices(Split::kTrain)) EXPECT_EQ(m.samples[i].domain, "A");
  for (std::size_t i : m.indices(Split::kTest)) EXPECT_EQ(m.samples[i].domain, "B");
  const auto loaded = load_manifest(dir / "manifest.json");
  EXPECT_TRUE(loaded.same_content(m));
}

TEST(PhantomDataset, SameSeedSameFiles) {
  TempDir a, b;
  const auto m1 = generate_phantom_dataset(small_spec(32), 3, 2, 1, 9, a.path());
  generate_phantom_dataset(small_spec(32), 3, 2, 1, 9, b.path());
  for (const auto& s : m1.samples) {
    EXPECT_EQ(io::read_bytes(a / s.image), io::read_bytes(b / s.image));
    EXPECT_EQ(io::read_bytes(a / s.mask), io::read_bytes(b / s.mask));
  }
  EXPECT_EQ(io::read_bytes(a / "manifest.json"), io::read_bytes(b / "manifest.json"));
}

TEST(PhantomDataset, SplitSeedsDisjoint) {
  std::set<std::uint64_t> train, test;
  for (int i = 0; i < 200; ++i) {
    train.insert(phantom_sample_seed(1, Split::kTrain, i));
    test.insert(phantom_sample_seed(1, Split::kTest, i));
  }
  EXPECT_EQ(train.size(), 200u);
  for (auto s : test) EXPECT_EQ(train.count(s), 0u);
}

TEST(PhantomDataset, LoadedMasksPartitionImage) {
  TempDir dir;
  const auto m = generate_phantom_dataset(small_spec(32), 2, 2, 0, 3, dir.path());
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const auto s = load_sample(m, i);
    EXPECT_EQ(s.mask.size(), 32u * 32u);
    for (Label l : s.mask.labels()) EXPECT_LT(l, 7);
  }
}

TEST(PhantomDataset, EmptyIsError) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { generate_phantom_dataset(small_spec(32), 0, 0, 0, 1, dir.path()); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(code_of([&] { generate_phantom_dataset(small_spec(32), -1, 2, 0, 1, dir.path()); }),
            ErrorCode::kInvalidArgument);
}
