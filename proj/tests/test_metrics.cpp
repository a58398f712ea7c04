#include <gtest/gtest.h>

#include "ctseg/metrics.hpp"
#include "ctseg/phantom.hpp"
#include "test_util.hpp"

using namespace ctseg;
using ctseg::testing::code_of;
using ctseg::testing::random_segmap;
using ctseg::testing::schema_of_size;
using ctseg::testing::TempDir;

namespace {

SegMap map2x2(std::vector<Label> l, std::shared_ptr<const LabelSchema> s) { return SegMap(2, 2, std::move(l), s); }

MetricsReport report_with(double acc, const std::string& dataset = "d") {
  MetricsReport r;
  r.dataset_id = dataset;
  r.pixel_accuracy = acc;
  return r;
}

}  // namespace

TEST(Confusion, PerfectPredictionIsDiagonal) {
  NormalSampler rng(1);
  const auto s = schema_of_size(4);
  const auto m = random_segmap(6, 5, s, rng);
  const auto cm = confusion(m, m);
  EXPECT_EQ(cm.trace(), 30u);
  EXPECT_EQ(cm.total(), 30u);
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 1.0);
}

TEST(Confusion, TwoByTwoExample) {
  const auto s = schema_of_size(2);
  const auto cm = confusion(map2x2({0, 1, 1, 1}, s), map2x2({0, 0, 1, 1}, s));
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 0), 0u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 0.75);
}

TEST(Confusion, AccumulationIsAdditiveAndOrderFree) {
  NormalSampler rng(2);
  const auto s = schema_of_size(3);
  std::vector<ConfusionMatrix> parts;
  for (int i = 0; i < 5; ++i) parts.push_back(confusion(random_segmap(4, 4, s, rng), random_segmap(4, 4, s, rng)));
  ConfusionMatrix fwd(3), rev(3);
  for (const auto& p : parts) fwd += p;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) rev += *it;
  EXPECT_EQ(fwd, rev);
  EXPECT_EQ(fwd.total(), 80u);
}

TEST(Confusion, ShapeAndSchemaMismatch) {
  const auto s = schema_of_size(2);
  EXPECT_EQ(code_of([&] { confusion(SegMap(2, 3, std::vector<Label>(6, 0), s), map2x2({0, 0, 0, 0}, s)); }),
            ErrorCode::kShape);
  EXPECT_EQ(code_of([&] { confusion(map2x2({0, 0, 0, 0}, schema_of_size(3)), map2x2({0, 0, 0, 0}, s)); }),
            ErrorCode::kMismatch);
}

TEST(PixelAccuracy, ZeroDiagonalAndEmpty) {
  ConfusionMatrix cm(2);
  cm.at(0, 1) = 3;
  cm.at(1, 0) = 2;
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 0.0);
  EXPECT_EQ(code_of([] { pixel_accuracy(ConfusionMatrix(3)); }), ErrorCode::kEmptyInput);
}

TEST(Dice, FormulaExamples) {
  ConfusionMatrix cm(2);
  // truth area 4, pred area 4, overlap 2
  cm.at(1, 1) = 2;
  cm.at(1, 0) = 2;
  cm.at(0, 1) = 2;
  cm.at(0, 0) = 10;
  EXPECT_DOUBLE_EQ(*dice(cm, 1), 0.5);

  ConfusionMatrix disjoint(2);
  disjoint.at(1, 0) = 3;
  disjoint.at(0, 1) = 3;
  EXPECT_DOUBLE_EQ(*dice(disjoint, 1), 0.0);

  ConfusionMatrix absent(3);
  absent.at(0, 0) = 5;
  absent.at(1, 1) = 5;
  EXPECT_DOUBLE_EQ(*dice(absent, 1), 1.0);
  EXPECT_FALSE(dice(absent, 2).has_value());
  EXPECT_EQ(code_of([&] { dice(absent, 3); }), ErrorCode::kInvalidArgument);
}

TEST(Dice, OneIffSetsEqual) {
  NormalSampler rng(3);
  const auto s = schema_of_size(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_segmap(5, 5, s, rng), b = random_segmap(5, 5, s, rng);
    const auto cm = confusion(a, b);
    for (int c = 0; c < 4; ++c) {
      bool same = true, any = false;
      for (std::size_t i = 0; i < a.size(); ++i) {
        same = same && ((a.labels()[i] == c) == (b.labels()[i] == c));
        any = any || a.labels()[i] == c || b.labels()[i] == c;
      }
      const auto d = dice(cm, c);
      ASSERT_EQ(d.has_value(), any);
      if (d) {
        EXPECT_GE(*d, 0.0);
        EXPECT_LE(*d, 1.0);
        EXPECT_EQ(*d == 1.0, same);
      }
    }
  }
}

TEST(Report, JsonRoundTripKeepsClassOrder) {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4;
  cm.at(2, 2) = 3;
  cm.at(2, 1) = 1;
  const LabelSchema schema({{0, "background"}, {1, "zeta"}, {2, "alpha"}});
  const auto r = make_report(cm, schema, 2, "m", "d", "test");
  EXPECT_DOUBLE_EQ(r.pixel_accuracy, 7.0 / 8.0);
  EXPECT_DOUBLE_EQ(*r.dice_of("zeta"), 0.0);
  EXPECT_DOUBLE_EQ(*r.mean_dice, (0.0 + 6.0 / 7.0) / 2.0);
  TempDir dir;
  save_report(r, dir / "r.json");
  const auto back = load_report(dir / "r.json");
  EXPECT_EQ(back.class_names, r.class_names);
  EXPECT_EQ(back.confusion, r.confusion);
  EXPECT_EQ(back.dice, r.dice);
  EXPECT_EQ(io::read_bytes(dir / "r.json"), to_json(back).dump(2) + "\n");
  const auto j = nlohmann::json::parse(io::read_bytes(dir / "r.json"));
  for (const char* key : {"model_id", "dataset_id", "n_samples", "pixel_accuracy", "dice", "confusion"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["dice"]["background"].is_number());
  EXPECT_EQ(code_of([&] { r.dice_of("nope"); }), ErrorCode::kUnknownLabel);
}

TEST(Compare, ReferenceNumbers) {
  const auto c = compare_reports(report_with(0.931), report_with(0.957));
  EXPECT_NEAR(c.delta, 0.026, 1e-12);
  EXPECT_TRUE(c.improved);
  EXPECT_EQ(to_json(c)["verdict"], "improved");
}

TEST(Compare, EqualAndWorse) {
  EXPECT_FALSE(compare_reports(report_with(0.9), report_with(0.9)).improved);
  EXPECT_DOUBLE_EQ(compare_reports(report_with(0.9), report_with(0.9)).delta, 0.0);
  const auto worse = compare_reports(report_with(0.9), report_with(0.8));
  EXPECT_LT(worse.delta, 0);
  EXPECT_FALSE(worse.improved);
  EXPECT_EQ(to_json(worse)["verdict"], "not improved");
}

TEST(Compare, MismatchedDatasets) {
  EXPECT_EQ(code_of([] { compare_reports(report_with(0.9, "a"), report_with(0.9, "b")); }), ErrorCode::kMismatch);
}

TEST(Compare, DiceSkipsBackgroundAndUndefined) {
  const LabelSchema schema({{0, "background"}, {1, "a"}, {2, "b"}, {3, "c"}});
  ConfusionMatrix base(4), aug(4);
  base.at(0, 0) = 10, aug.at(0, 0) = 12;
  base.at(1, 1) = 1, base.at(1, 0) = 1;  // a: 2/3
  aug.at(1, 1) = 2;                       // a: 1
  base.at(2, 2) = 2, aug.at(2, 2) = 1, aug.at(2, 0) = 1;
  const auto c = compare_reports(make_report(base, schema, 1, "x", "d", "test"),
                                 make_report(aug, schema, 1, "y", "d", "test"));
  EXPECT_EQ(c.dice_compared, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(c.dice_improved, (std::vector<std::string>{"a"}));
}

TEST(Evaluate, OracleAndConstantStubs) {
  TempDir dir;
  PhantomSpec spec;
  spec.side = 32;
  const auto m = generate_phantom_dataset(spec, 2, 3, 0, 5, dir.path());
  const auto oracle = evaluate_model([](const AnnotatedSample& s) { return s.mask; }, m, Split::kTest, "oracle",
                                     dataset_id(m));
  EXPECT_DOUBLE_EQ(oracle.pixel_accuracy, 1.0);
  EXPECT_EQ(oracle.n_samples, 3u);
  for (const auto& d : oracle.dice) EXPECT_DOUBLE_EQ(d.value(), 1.0);

  std::uint64_t bg = 0, total = 0;
  for (std::size_t i : m.indices(Split::kTest)) {
    const auto s = load_sample(m, i);
    for (Label l : s.mask.labels()) bg += l == 0;
    total += s.mask.size();
  }
  const auto constant = evaluate_model(
      [](const AnnotatedSample& s) {
        return SegMap(s.mask.height(), s.mask.width(), std::vector<Label>(s.mask.size(), 0), s.mask.schema_ptr());
      },
      m, Split::kTest, "bg", dataset_id(m));
  EXPECT_DOUBLE_EQ(constant.pixel_accuracy, static_cast<double>(bg) / static_cast<double>(total));
  EXPECT_EQ(code_of([&] { evaluate_model([](const AnnotatedSample& s) { return s.mask; }, m, Split::kStyle, "x", "y"); }),
            ErrorCode::kEmptyInput);
}

TEST(Evaluate, MissingMask) {
  TempDir dir;
  PhantomSpec spec;
  spec.side = 32;
  const auto m = generate_phantom_dataset(spec, 1, 1, 0, 5, dir.path());
  fs::remove(m.resolve(m.samples[m.indices(Split::kTest)[0]].mask));
  EXPECT_EQ(code_of([&] { evaluate_model([](const AnnotatedSample& s) { return s.mask; }, m, Split::kTest, "x", "y"); }),
            ErrorCode::kMissingFile);
}

TEST(Montage, LayoutAndDeterminism) {
  TempDir dir;
  const auto s = schema_of_size(7);
  auto make = [&](int n, const fs::path& path) {
    std::vector<IntensityGrid> imgs;
    std::vector<SegMap> t, b, a;
    NormalSampler r(11);
    for (int i = 0; i < n; ++i) {
      std::vector<double> v(64 * 64);
      for (auto& x : v) x = r.uniform();
      imgs.emplace_back(64, 64, v, Encoding::kNormalized);
      t.push_back(random_segmap(64, 64, s, r));
      b.push_back(random_segmap(64, 64, s, r));
      a.push_back(random_segmap(64, 64, s, r));
    }
    render_montage(imgs, t, b, a, path);
  };
  make(1, dir / "one.png");
  make(4, dir / "four.png");
  make(4, dir / "four_again.png");
  const auto one = io::read_png(dir / "one.png");
  const auto four = io::read_png(dir / "four.png");
  EXPECT_EQ(four.width, one.width);
  EXPECT_EQ(four.height - one.height, 3 * (montage_detail::kTile + montage_detail::kGap));
  EXPECT_EQ(one.width, 4 * (montage_detail::kTile + montage_detail::kGap) + montage_detail::kGap);
  EXPECT_EQ(io::read_bytes(dir / "four.png"), io::read_bytes(dir / "four_again.png"));
  EXPECT_EQ(code_of([&] { render_montage({}, {}, {}, {}, dir / "x.png"); }), ErrorCode::kEmptyInput);
}

TEST(DatasetId, ContentAddressed) {
  TempDir a, b;
  PhantomSpec spec;
  spec.side = 32;
  const auto m1 = generate_phantom_dataset(spec, 2, 1, 1, 5, a.path());
  const auto m2 = generate_phantom_dataset(spec, 2, 1, 1, 5, b.path());
  const auto m3 = generate_phantom_dataset(spec, 2, 1, 1, 6, b / "other");
  EXPECT_EQ(dataset_id(m1), dataset_id(m2));
  EXPECT_NE(dataset_id(m1), dataset_id(m3));
  EXPECT_EQ(dataset_id(m1).size(), 16u);
}
