#include <gtest/gtest.h>

#include <thread>

#include "ctseg/generator.hpp"
#include "ctseg/phantom.hpp"
#include "test_util.hpp"

using namespace ctseg;
using ctseg::testing::code_of;
using ctseg::testing::schema_of_size;
using ctseg::testing::TempDir;

namespace {

GeneratorConfig small_gen(int side = 32) {
  GeneratorConfig c;
  c.side = side;
  c.base_width = 8;
  c.max_width = 16;
  c.stages = 2;
  c.res_blocks = 1;
  return c;
}

// Desk-scale profile used by the experiment config.
GeneratorConfig desk_gen(int side) {
  GeneratorConfig c;
  c.side = side;
  c.base_width = 16;
  c.max_width = 64;
  return c;
}

LossSpec desk_loss() {
  LossSpec s;
  s.style_weight = 10.0;
  return s;
}

BackboneConfig mini_backbone() {
  BackboneConfig b;
  b.arch = BackboneArch::kVggMini;
  return b;
}

std::vector<AnnotatedSample> content_set(int n, int side) {
  PhantomSpec spec;
  spec.side = side;
  std::vector<AnnotatedSample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(generate_phantom(spec, "A", phantom_sample_seed(3, Split::kTrain, i), "c" + std::to_string(i)));
  return out;
}

AnnotatedSample style_sample(int side) {
  PhantomSpec spec;
  spec.side = side;
  return generate_phantom(spec, "B", phantom_sample_seed(3, Split::kStyle, 0), "styleB_000", Split::kStyle);
}

}  // namespace

TEST(Generator, SeededInit) {
  EXPECT_EQ(build_generator(small_gen(), 4)->checksum(), build_generator(small_gen(), 4)->checksum());
  EXPECT_NE(build_generator(small_gen(), 4)->checksum(), build_generator(small_gen(), 5)->checksum());
}

TEST(Generator, OutputRangeAndShape) {
  auto g = build_generator(small_gen(), 1);
  const auto s = content_set(1, 32).front();
  const auto img = generate(*g, s.mask, 9);
  EXPECT_EQ(img.height(), 32);
  EXPECT_EQ(img.width(), 32);
  EXPECT_TRUE(img.normalized());
  for (double v : img.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Generator, IndivisibleSide) {
  GeneratorConfig c;
  c.side = 100;
  c.stages = 3;
  EXPECT_EQ(code_of([&] { build_generator(c, 1); }), ErrorCode::kGeometry);
  c.side = 128;
  c.base_width = 4;
  EXPECT_EQ(code_of([&] { build_generator(c, 1); }), ErrorCode::kInvalidArgument);
}

TEST(Generator, WidthCap) {
  const auto c = desk_gen(128);
  EXPECT_EQ(c.width_at(0), 16);
  EXPECT_EQ(c.width_at(2), 64);
  EXPECT_EQ(c.width_at(3), 64);
  EXPECT_EQ(c.input_channels(), 8);
}

TEST(Generate, DeterministicAndSeedDependent) {
  auto g = build_generator(small_gen(), 2);
  const auto s = content_set(1, 32).front();
  EXPECT_EQ(generate(*g, s.mask, 5).values(), generate(*g, s.mask, 5).values());
  EXPECT_NE(generate(*g, s.mask, 5).values(), generate(*g, s.mask, 6).values());
  GeneratorConfig quiet = small_gen();
  quiet.noise = false;
  auto q = build_generator(quiet, 2);
  EXPECT_EQ(generate(*q, s.mask, 5).values(), generate(*q, s.mask, 6).values());
}

TEST(Generate, SchemaAndShapeMismatch) {
  auto g = build_generator(small_gen(), 2);
  const SegMap wrong_schema(32, 32, std::vector<Label>(32 * 32, 0), schema_of_size(3));
  EXPECT_EQ(code_of([&] { generate(*g, wrong_schema, 1); }), ErrorCode::kMismatch);
  const auto big = content_set(1, 64).front();
  EXPECT_EQ(code_of([&] { generate(*g, big.mask, 1); }), ErrorCode::kShape);
}

TEST(Generate, ConcurrentCallsMatchSequential) {
  auto g = build_generator(small_gen(), 3);
  const auto data = content_set(4, 32);
  std::vector<std::vector<double>> seq, par(4);
  for (const auto& s : data) seq.push_back(generate(*g, s.mask, 1).values());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < 4; ++i)
    threads.emplace_back([&, i] { par[i] = generate(*g, data[i].mask, 1).values(); });
  for (auto& t : threads) t.join();
  EXPECT_EQ(seq, par);
}

TEST(GeneratorCheckpoint, RoundTrip) {
  auto g = build_generator(small_gen(), 6);
  g->set_style_id("styleB_001");
  TempDir dir;
  save_checkpoint(g->to_checkpoint(), dir / "g.ckpt");
  auto back = load_generator(dir / "g.ckpt");
  EXPECT_EQ(back->style_id(), "styleB_001");
  EXPECT_EQ(back->seed(), 6u);
  EXPECT_EQ(back->checksum(), g->checksum());
  const auto s = content_set(1, 32).front();
  EXPECT_EQ(generate(*back, s.mask, 3).values(), generate(*g, s.mask, 3).values());
  EXPECT_EQ(to_json(back->config()), to_json(g->config()));
}

TEST(GeneratorConfigJson, RoundTrip) {
  auto c = desk_gen(64);
  c.noise = false;
  EXPECT_EQ(to_json(generator_config_from_json(to_json(c))), to_json(c));
}

TEST(TrainStyle, ZeroEpochs) {
  auto g = build_generator(small_gen(), 1);
  const auto before = g->checksum();
  FeatureBackbone<float> bb(mini_backbone());
  StyleTrainOptions o;
  o.epochs = 0;
  const auto log = train_style_generator(*g, content_set(2, 32), style_sample(32), bb, desk_loss(), o);
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(g->checksum(), before);
  EXPECT_EQ(g->style_id(), "styleB_000");
}

TEST(TrainStyle, Errors) {
  auto g = build_generator(small_gen(), 1);
  FeatureBackbone<float> bb(mini_backbone());
  StyleTrainOptions o;
  EXPECT_EQ(code_of([&] { train_style_generator(*g, {}, style_sample(32), bb, desk_loss(), o); }),
            ErrorCode::kEmptyInput);
  EXPECT_EQ(code_of([&] { train_style_generator(*g, content_set(1, 32), style_sample(64), bb, desk_loss(), o); }),
            ErrorCode::kShape);
  LossSpec bad = desk_loss();
  bad.style_layers = {"relu9_9"};
  EXPECT_EQ(code_of([&] { train_style_generator(*g, content_set(1, 32), style_sample(32), bb, bad, o); }),
            ErrorCode::kUnknownLayer);
}

TEST(TrainStyle, DeterministicAndSideEffectFree) {
  const auto content = content_set(3, 32);
  const auto style = style_sample(32);
  const auto content_copy = content;
  FeatureBackbone<float> bb(mini_backbone());
  const auto bb_before = bb.checksum();
  StyleTrainOptions o;
  o.epochs = 2;
  o.lr = 1e-3;
  o.seed = 5;
  auto a = build_generator(small_gen(), 1), b = build_generator(small_gen(), 1);
  const auto la = train_style_generator(*a, content, style, bb, desk_loss(), o);
  const auto lb = train_style_generator(*b, content, style, bb, desk_loss(), o);
  EXPECT_EQ(a->checksum(), b->checksum());
  ASSERT_EQ(la.size(), 2u);
  EXPECT_EQ(la[1].total, lb[1].total);
  EXPECT_EQ(la[0].epoch, 1);
  EXPECT_EQ(la[1].epoch, 2);
  EXPECT_EQ(bb.checksum(), bb_before);
  for (std::size_t i = 0; i < content.size(); ++i) {
    EXPECT_EQ(content[i].image.values(), content_copy[i].image.values());
    EXPECT_EQ(content[i].mask, content_copy[i].mask);
  }
}

TEST(TrainStyle, DeskRunLowersLoss) {
  // 8 content samples at 64x64, 5 epochs, seed 7.
  auto g = build_generator(desk_gen(64), 7);
  FeatureBackbone<float> bb(mini_backbone());
  StyleTrainOptions o;
  o.epochs = 5;
  o.lr = 1e-3;
  o.seed = 7;
  const auto log = train_style_generator(*g, content_set(8, 64), style_sample(64), bb, desk_loss(), o);
  ASSERT_EQ(log.size(), 5u);
  for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.total));
  EXPECT_LT(log.back().total, log.front().total);
}
