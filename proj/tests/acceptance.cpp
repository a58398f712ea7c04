// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance --config configs/desk.json --work DIR [--only 1,2,...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>

#include <Eigen/Eigenvalues>

#include "CLI11.hpp"
#include "ctseg/augmentor.hpp"
#include "ctseg/experiment.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/perceptual.hpp"
#include "ctseg/phantom.hpp"
#include "ctseg/unet.hpp"
#include "oracles.hpp"

using namespace ctseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::shared_ptr<const LabelSchema> schema_of_size(int n) {
  std::vector<LabelEntry> e;
  for (int i = 0; i < n; ++i) e.push_back({i, i == 0 ? "background" : "seg" + std::to_string(i)});
  return std::make_shared<LabelSchema>(std::move(e));
}

SegMap random_segmap(int h, int w, std::shared_ptr<const LabelSchema> schema, NormalSampler& rng, int block = 1) {
  std::vector<Label> labels(static_cast<std::size_t>(h) * w);
  const int bw = (w + block - 1) / block;
  std::vector<Label> blocks(static_cast<std::size_t>((h + block - 1) / block) * bw);
  for (auto& b : blocks) b = static_cast<Label>(rng.next() % static_cast<std::uint64_t>(schema->size()));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) labels[static_cast<std::size_t>(y) * w + x] = blocks[(y / block) * bw + x / block];
  return SegMap(h, w, std::move(labels), std::move(schema));
}

template <typename T>
Tensor<T> random_image(int h, int w, NormalSampler& rng) {
  Tensor<T> t(1, 1, h, w);
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform());
  return t;
}

BackboneConfig tiny_backbone(std::uint64_t seed) {
  BackboneConfig c;
  c.arch = BackboneArch::kTiny;
  c.seed = seed;
  return c;
}

LossSpec tiny_spec() {
  LossSpec s;
  s.style_layers = {"relu1_1", "relu2_1"};
  s.content_layers = {"relu2_1"};
  s.style_weight = 10.0;
  return s;
}

// 1. Full-image single-segment style loss vs the unmasked Gram form; content
// loss vs a per-pixel sum.
Outcome loss_oracle() {
  FeatureBackbone<double> bb(tiny_backbone(19));
  LossSpec spec;
  spec.style_layers = {"relu1_1"};
  spec.content_layers = {"relu1_1"};
  NormalSampler rng(101);
  double worst_style = 0, worst_content = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto xr = random_image<double>(16, 16, rng), xs = random_image<double>(16, 16, rng);
    const auto fr = bb.extract(xr, {"relu1_1"}), fs = bb.extract(xs, {"relu1_1"});
    const auto& r = fr.at("relu1_1");
    const auto& s = fs.at("relu1_1");
    LayerMasks lm{{"relu1_1", MaskStack{{BinaryGrid(r.h(), r.w(), 0), BinaryGrid(r.h(), r.w(), 1)}}}};
    worst_style = std::max(worst_style, oracle::rel_err(style_loss(fr, fs, lm, lm, spec), oracle::unmasked_style_layer(r, s)));
    double brute = 0;
    for (int c = 0; c < r.c(); ++c)
      for (int y = 0; y < r.h(); ++y)
        for (int x = 0; x < r.w(); ++x) brute += std::pow(r(0, c, y, x) - s(0, c, y, x), 2);
    brute /= 2.0 * r.c() * r.plane();
    worst_content = std::max(worst_content, oracle::rel_err(content_loss(fr, fs, lm, spec), brute));
  }
  return {worst_style < 1e-5 && worst_content < 1e-6,
          fmt("max rel err style %.2e (< 1e-5), content %.2e (< 1e-6), 20 inputs", worst_style, worst_content)};
}

// 2. Analytic input gradient of the total loss vs central differences.
Outcome gradient_check() {
  double worst = 0;
  for (std::uint64_t seed = 30; seed < 35; ++seed) {
    NormalSampler rng(seed);
    FeatureBackbone<double> bb(tiny_backbone(seed));
    auto schema = schema_of_size(3);
    const auto xr = random_image<double>(16, 16, rng), xo = random_image<double>(16, 16, rng),
               xs = random_image<double>(16, 16, rng);
    const auto so = random_segmap(16, 16, schema, rng, 4), ss = random_segmap(16, 16, schema, rng, 4);
    PerceptualLoss<double> loss(bb, tiny_spec());
    const auto masks = loss.masks(so);
    const auto ct = loss.content_targets(xo);
    const auto st = loss.style_targets(xs, ss);
    auto fn = [&](const Tensor<double>& x, Tensor<double>* g) {
      auto r = loss.evaluate(x, masks, ct, st, g != nullptr);
      if (g) *g = r.grad;
      return r.total;
    };
    worst = std::max(worst, finite_diff_check(fn, xr, 1e-3, 10, seed));
  }
  return {worst < 1e-3, fmt("max rel err %.2e (< 1e-3), 10 probes x 5 seeds, eps 1e-3", worst)};
}

// 3. loss(SG) == loss(SG1) + loss(SG2) for random two-way partitions.
Outcome segment_additivity() {
  NormalSampler rng(303);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    FeatureBackbone<double> bb(tiny_backbone(300 + trial));
    const int k = 2 + static_cast<int>(rng.next() % 6);
    auto schema = schema_of_size(k);
    const auto xr = random_image<double>(16, 16, rng), xo = random_image<double>(16, 16, rng),
               xs = random_image<double>(16, 16, rng);
    const auto so = random_segmap(16, 16, schema, rng, 4), ss = random_segmap(16, 16, schema, rng, 4);
    std::vector<int> a, b;
    for (int s = 0; s < k; ++s) (rng.uniform() < 0.5 ? a : b).push_back(s);
    if (a.empty()) a.push_back(b.back()), b.pop_back();
    if (b.empty()) b.push_back(a.back()), a.pop_back();
    auto spec = tiny_spec();
    const double all = total_loss(bb, xr, xo, xs, so, ss, spec, false).total;
    spec.segment_ids = a;
    const double la = total_loss(bb, xr, xo, xs, so, ss, spec, false).total;
    spec.segment_ids = b;
    const double lb = total_loss(bb, xr, xo, xs, so, ss, spec, false).total;
    worst = std::max(worst, std::abs(all - (la + lb)));
  }
  return {worst <= 1e-10, fmt("max |L - (L1 + L2)| %.2e (<= 1e-10), 50 partitions", worst)};
}

// 4. Gram symmetry and positive semi-definiteness.
Outcome gram_properties() {
  NormalSampler rng(404);
  bool symmetric = true;
  double worst = 0;  // most negative eigenvalue relative to ||G||
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.next() % 16);
    Tensor<double> f(1, n, 1 + static_cast<int>(rng.next() % 8), 1 + static_cast<int>(rng.next() % 8));
    for (auto& v : f.vec()) v = rng();
    const auto g = gram(f);
    symmetric = symmetric && g == g.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
    worst = std::min(worst, es.eigenvalues().minCoeff() / g.norm());
  }
  return {symmetric && worst >= -1e-8,
          fmt("symmetric %s, min eigenvalue / ||G|| %.2e (>= -1e-8), 50 blocks", symmetric ? "exact" : "NO", worst)};
}

class StubGen : public StyleGenerator {
 public:
  explicit StubGen(std::string id) : id_(std::move(id)) {}
  const std::string& style_id() const override { return id_; }
  IntensityGrid generate(const SegMap& seg, std::uint64_t seed) const override {
    std::vector<double> v(seg.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ((seg.labels()[i] * 37 + seed % 89) % 100) / 100.0;
    return IntensityGrid(seg.height(), seg.width(), std::move(v), Encoding::kNormalized);
  }

 private:
  std::string id_;
};

DatasetManifest stub_source(const fs::path& root, int m) {
  NormalSampler rng(505);
  DatasetManifest man;
  man.root = root;
  for (int i = 0; i < m; ++i) {
    const std::string id = "s" + std::to_string(i);
    const SegMap seg = random_segmap(8, 8, man.schema, rng);
    std::vector<double> v(seg.size());
    for (auto& x : v) x = rng.uniform();
    io::save_image(IntensityGrid(8, 8, std::move(v), Encoding::kNormalized), root / ("images/" + id + ".png"));
    io::save_mask(seg, root / ("masks/" + id + ".png"));
    man.samples.push_back({id, "images/" + id + ".png", "masks/" + id + ".png", "A", Split::kTrain, std::nullopt,
                           std::nullopt});
  }
  save_manifest(man, root / "manifest.json");
  return man;
}

// 5. |augmented| == m (n + 1) with byte-identical masks.
Outcome augmentation_cardinality(const fs::path& work) {
  const fs::path root = work / "c5";
  fs::remove_all(root);
  int cases = 0, ok = 0;
  for (int m = 1; m <= 5; ++m) {
    const auto src = stub_source(root / ("src" + std::to_string(m)), m);
    for (int n = 0; n <= 4; ++n) {
      StyleBank bank;
      for (int k = 0; k < n; ++k) bank.push_back(std::make_shared<StubGen>("style" + std::to_string(k)));
      const auto out = augment_dataset({src, bank, root / fmt("aug_%d_%d", m, n), 3, true});
      bool good = out.samples.size() == static_cast<std::size_t>(m * (n + 1));
      for (const auto& s : out.samples) {
        const auto& ref = src.samples[std::stoul(s.source_id.value().substr(1))];
        good = good && io::read_bytes(out.resolve(s.mask)) == io::read_bytes(src.resolve(ref.mask));
      }
      ++cases;
      ok += good;
    }
  }
  const bool arithmetic = 700 * (6 + 1) == 4900;
  fs::remove_all(root);
  return {ok == cases && arithmetic, fmt("%d/%d (m, n) cases exact with identical masks; 700*(6+1) = %d", ok, cases, 4900)};
}

// 6. Softmax normalization, overfit probe, bitwise-reproducible checkpoints.
Outcome unet_contracts(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto probe = build_unet(cfg.unet, 6);
  NormalSampler rng(606);
  Tensor<float> x(2, 1, cfg.unet.side, cfg.unet.side);
  for (auto& v : x.vec()) v = static_cast<float>(rng.uniform());
  const Tensor<float> p = softmax_channels(probe->forward(x, false));
  double worst_sum = 0;
  for (int n = 0; n < p.n(); ++n)
    for (std::size_t i = 0; i < p.plane(); ++i) {
      double s = 0;
      for (int c = 0; c < p.c(); ++c) s += p.channel(n, c)[i];
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }

  std::vector<AnnotatedSample> data;
  for (int i = 0; i < 8; ++i)
    data.push_back(generate_phantom(cfg.phantom, "A", phantom_sample_seed(66, Split::kTrain, i), "o" + std::to_string(i)));
  UNetTrainConfig tc = cfg.train;
  tc.epochs = 200;
  tc.batch = 8;
  tc.seed = 6;
  struct Reached {};
  int reached_at = 0;
  double best = 0;
  auto model = build_unet(cfg.unet, 6);
  try {
    train_unet(*model, data, tc, {[&](const UNetEpoch& e) {
                 best = std::max(best, e.accuracy);
                 if (e.accuracy >= 0.99) {
                   reached_at = e.epoch;
                   throw Reached{};
                 }
               }, {}});
  } catch (const Reached&) {
  }
  ConfusionMatrix cm(cfg.unet.classes);
  for (const auto& s : data) cm += confusion(predict(*model, s.image, s.mask.schema_ptr()).segmap, s.mask);
  const double eval_acc = pixel_accuracy(cm);

  UNetTrainConfig small = tc;
  small.epochs = 2;
  const std::vector<AnnotatedSample> four(data.begin(), data.begin() + 4);
  auto a = build_unet(cfg.unet, 7), b = build_unet(cfg.unet, 7);
  train_unet(*a, four, small);
  train_unet(*b, four, small);
  const bool bitwise = serialize_checkpoint(a->to_checkpoint()) == serialize_checkpoint(b->to_checkpoint());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst_sum <= 1e-5 && reached_at > 0 && bitwise && secs < 300,
          fmt("softmax |sum-1| %.1e; overfit %s (train acc %.4f at epoch %d, eval-mode acc %.4f); checkpoints %s; %.0f s "
              "(< 300)",
              worst_sum, reached_at > 0 ? "reached 99%" : "MISSED 99%", best, reached_at, eval_acc,
              bitwise ? "bitwise equal" : "DIFFER", secs)};
}

// 7. Confusion-derived metrics vs brute-force recounts; a reference comparison.
Outcome metrics_oracle() {
  NormalSampler rng(707);
  auto schema = schema_of_size(4);
  int exact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto pred = random_segmap(8, 8, schema, rng), truth = random_segmap(8, 8, schema, rng);
    const auto cm = confusion(pred, truth);
    std::uint64_t same = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) same += pred.labels()[i] == truth.labels()[i];
    bool ok = pixel_accuracy(cm) == static_cast<double>(same) / 64.0;
    for (int c = 0; c < 4; ++c) {
      std::uint64_t inter = 0, in_pred = 0, in_truth = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        in_pred += pred.labels()[i] == c;
        in_truth += truth.labels()[i] == c;
        inter += pred.labels()[i] == c && truth.labels()[i] == c;
      }
      const auto d = dice(cm, c);
      if (in_pred + in_truth == 0)
        ok = ok && !d;
      else
        ok = ok && d && *d == 2.0 * static_cast<double>(inter) / static_cast<double>(in_pred + in_truth);
    }
    exact += ok;
  }
  MetricsReport base, aug;
  base.dataset_id = aug.dataset_id = "d";
  base.pixel_accuracy = 0.931;
  aug.pixel_accuracy = 0.957;
  const auto c = compare_reports(base, aug);
  const bool reference = std::abs(c.delta - 0.026) < 1e-12 && c.improved;
  return {exact == 20 && reference, fmt("%d/20 mask pairs exact; compare(0.931, 0.957) delta %.4f, %s", exact, c.delta,
                                    c.improved ? "improved" : "not improved")};
}

// 8. Desk-scale end-to-end run plus the no-style control.
Outcome end_to_end(const ExperimentConfig& cfg, const fs::path& work) {
  const fs::path main_dir = work / "desk", control_dir = work / "desk_control";
  fs::remove_all(main_dir);
  fs::remove_all(control_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_experiment(cfg, main_dir, stderr_logger());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // The control shares the phantom data and the baseline model; copying those
  // stage directories lets the cache skip them.
  fs::create_directories(control_dir);
  for (const char* stage : {"phantom", "unet_baseline"})
    fs::copy(main_dir / stage, control_dir / stage, fs::copy_options::recursive);
  ExperimentConfig control = cfg;
  control.n_styles = 0;
  const auto crep = run_experiment(control, control_dir, stderr_logger());

  const auto& cmp = rep.comparison;
  const std::size_t need = (cmp.dice_compared.size() + 1) / 2;
  const bool delta_ok = cmp.delta >= 0.01;
  const bool dice_ok = !cmp.dice_compared.empty() && cmp.dice_improved.size() >= need;
  const bool control_ok = std::abs(crep.comparison.delta) < 0.01;
  const bool time_ok = secs <= 1800;
  const bool sizes_ok = rep.augmented_size == static_cast<std::size_t>(cfg.n_train * (cfg.n_styles + 1)) &&
                        crep.augmented_size == static_cast<std::size_t>(cfg.n_train);
  return {delta_ok && dice_ok && control_ok && time_ok && sizes_ok,
          fmt("baseline %.4f, augmented %.4f, delta %+.2f pt (>= 1.0); Dice up %zu/%zu foreground (>= %zu); "
              "control delta %+.2f pt (|.| < 1.0); |aug| %zu, control %zu; runtime %.1f min (<= 30)",
              rep.baseline.pixel_accuracy, rep.augmented.pixel_accuracy, 100 * cmp.delta, cmp.dice_improved.size(),
              cmp.dice_compared.size(), need, 100 * crep.comparison.delta, rep.augmented_size, crep.augmented_size,
              secs / 60)};
}

// 9. A generator trained on style A matches style A better than one trained on B.
Outcome texture_specificity(const ExperimentConfig& cfg) {
  const int side = 64;
  PhantomSpec ps = cfg.phantom;
  ps.side = side;
  GeneratorConfig gc = cfg.generator;
  gc.side = side;
  std::vector<AnnotatedSample> content, held_out;
  for (int i = 0; i < 8; ++i) {
    content.push_back(generate_phantom(ps, "A", phantom_sample_seed(99, Split::kTrain, i), "c" + std::to_string(i)));
    held_out.push_back(generate_phantom(ps, "A", phantom_sample_seed(99, Split::kTest, i), "h" + std::to_string(i)));
  }
  const auto style_a = generate_phantom(ps, "A", phantom_sample_seed(99, Split::kStyle, 0), "styleA", Split::kStyle);
  const auto style_b = generate_phantom(ps, "B", phantom_sample_seed(99, Split::kStyle, 1), "styleB", Split::kStyle);
  FeatureBackbone<float> bb(cfg.backbone);
  StyleTrainOptions o;
  o.epochs = cfg.generator_epochs;
  o.lr = cfg.generator_lr;
  o.seed = 9;
  auto gen_a = build_generator(gc, 9), gen_b = build_generator(gc, 9);
  train_style_generator(*gen_a, content, style_a, bb, cfg.loss, o);
  train_style_generator(*gen_b, content, style_b, bb, cfg.loss, o);

  PerceptualLoss<float> loss(bb, cfg.loss);
  const auto targets = loss.style_targets(style_a.image.to_tensor<float>(), style_a.mask);
  auto mean_style = [&](const GeneratorModel& g, const std::vector<AnnotatedSample>& maps) {
    double s = 0;
    for (const auto& c : maps) {
      const auto img = g.generate(c.mask, 1).to_tensor<float>();
      s += loss.evaluate(img, loss.masks(c.mask), loss.content_targets(img), targets, false).style;
    }
    return s / static_cast<double>(maps.size());
  };
  const double la = mean_style(*gen_a, content), lb = mean_style(*gen_b, content);
  const double ha = mean_style(*gen_a, held_out), hb = mean_style(*gen_b, held_out);
  return {la < lb, fmt("style loss vs A over 8 content maps: A-trained %.3e < B-trained %.3e (held-out maps %.3e vs %.3e)",
                       la, lb, ha, hb)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path, work = "acceptance_work", only;
  app.add_option("--config", config_path, "desk experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "comma-separated criterion numbers");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  for (std::size_t pos = 0; pos < only.size();) {
    const auto comma = only.find(',', pos);
    selected.insert(std::stoi(only.substr(pos, comma - pos)));
    pos = comma == std::string::npos ? only.size() : comma + 1;
  }
  const auto cfg = experiment_config_from_json(json::parse(io::read_bytes(config_path)));
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"loss-oracle equivalence", loss_oracle},
      {"gradient correctness", gradient_check},
      {"segment additivity", segment_additivity},
      {"Gram properties", gram_properties},
      {"augmentation cardinality", [&] { return augmentation_cardinality(work); }},
      {"U-Net contracts", [&] { return unet_contracts(cfg); }},
      {"metrics oracle", metrics_oracle},
      {"end-to-end desk experiment", [&] { return end_to_end(cfg, work); }},
      {"texture specificity", [&] { return texture_specificity(cfg); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %-28s %s  %s [%.1f s]\n", id, criteria[i].first.c_str(), r.pass ? "PASS" : "FAIL",
                r.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !r.pass;
  }
  return failed == 0 ? 0 : 1;
}
