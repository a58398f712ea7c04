#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/augmentor.hpp"
#include "ctseg/backbone.hpp"
#include "ctseg/checkpoint.hpp"
#include "ctseg/generator.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/perceptual.hpp"
#include "ctseg/phantom.hpp"
#include "ctseg/unet.hpp"

namespace ctseg {

using json = nlohmann::json;

inline json to_json(const BackboneConfig& c) {
  return {{"arch", to_string(c.arch)}, {"seed", c.seed}, {"weights", c.weights}};
}

inline BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  if (j.contains("arch")) c.arch = parse_backbone_arch(j.at("arch").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.weights = j.value("weights", c.weights);
  return c;
}

struct ExperimentConfig {
  PhantomSpec phantom;
  int n_train = 40, n_test = 20, n_style = 3;
  int n_styles = 3;  // generators trained; the first n_styles style samples
  BackboneConfig backbone;
  LossSpec loss;
  GeneratorConfig generator;
  int generator_epochs = 10;
  double generator_lr = 2e-4;
  bool include_originals = true;
  UNetConfig unet;
  UNetTrainConfig train;
  int montage_samples = 4;
  struct Seeds {
    std::uint64_t phantom = 1, generator = 2, augment = 3, unet_baseline = 4, unet_augmented = 5;
  } seeds;

  void validate() const {
    phantom.validate();
    require(n_train >= 1 && n_test >= 1 && n_style >= 0, ErrorCode::kInvalidArgument,
            "experiment needs at least one train and one test sample");
    require(n_styles >= 0 && n_styles <= n_style, ErrorCode::kInvalidArgument,
            "n_styles must be in [0, phantom n_style]");
    loss.validate();
    generator.validate();
    require(generator.side == phantom.side && unet.side == phantom.side, ErrorCode::kInvalidArgument,
            "generator, U-Net and phantom sides must agree");
    require(generator.in_channels == LabelSchema::chest_default().size() &&
                unet.classes == LabelSchema::chest_default().size(),
            ErrorCode::kInvalidArgument, "generator input channels and U-Net classes must equal the schema size");
    require(generator_epochs >= 0 && generator_lr > 0, ErrorCode::kInvalidArgument, "bad generator schedule");
    unet.validate();
    require(train.epochs >= 0 && train.batch >= 1 && train.lr > 0, ErrorCode::kInvalidArgument,
            "bad U-Net schedule");
    require(montage_samples >= 1, ErrorCode::kInvalidArgument, "montage_samples must be >= 1");
    require(include_originals || n_styles > 0, ErrorCode::kInvalidArgument,
            "augmented set would be empty without originals and styles");
  }
};

inline json to_json(const ExperimentConfig& c) {
  json phantom = to_json(c.phantom);
  phantom["n_train"] = c.n_train;
  phantom["n_test"] = c.n_test;
  phantom["n_style"] = c.n_style;
  json gen = to_json(c.generator);
  gen["epochs"] = c.generator_epochs;
  gen["lr"] = c.generator_lr;
  json train = to_json(c.train);
  train.erase("seed");
  return {{"phantom", phantom},
          {"n_styles", c.n_styles},
          {"backbone", to_json(c.backbone)},
          {"loss", to_json(c.loss)},
          {"generator", gen},
          {"augment", {{"include_originals", c.include_originals}}},
          {"unet", to_json(c.unet)},
          {"train", train},
          {"montage_samples", c.montage_samples},
          {"seeds",
           {{"phantom", c.seeds.phantom},
            {"generator", c.seeds.generator},
            {"augment", c.seeds.augment},
            {"unet_baseline", c.seeds.unet_baseline},
            {"unet_augmented", c.seeds.unet_augmented}}}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      c.phantom = phantom_spec_from_json(p);
      c.n_train = p.value("n_train", c.n_train);
      c.n_test = p.value("n_test", c.n_test);
      c.n_style = p.value("n_style", c.n_style);
    }
    c.n_styles = j.value("n_styles", c.n_styles);
    if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
    if (j.contains("loss")) c.loss = loss_spec_from_json(j.at("loss"));
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      c.generator = generator_config_from_json(g);
      c.generator_epochs = g.value("epochs", c.generator_epochs);
      c.generator_lr = g.value("lr", c.generator_lr);
    } else {
      c.generator.side = c.phantom.side;
    }
    if (j.contains("augment")) c.include_originals = j.at("augment").value("include_originals", c.include_originals);
    if (j.contains("unet")) c.unet = unet_config_from_json(j.at("unet"));
    else c.unet.side = c.phantom.side;
    if (j.contains("train")) c.train = unet_train_config_from_json(j.at("train"));
    c.montage_samples = j.value("montage_samples", c.montage_samples);
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      c.seeds.phantom = s.value("phantom", c.seeds.phantom);
      c.seeds.generator = s.value("generator", c.seeds.generator);
      c.seeds.augment = s.value("augment", c.seeds.augment);
      c.seeds.unet_baseline = s.value("unet_baseline", c.seeds.unet_baseline);
      c.seeds.unet_augmented = s.value("unet_augmented", c.seeds.unet_augmented);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Sets `value` at a dotted path ("train.epochs") inside `j`, creating
/// objects along the way.
inline void set_path(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!key.empty(), ErrorCode::kParse, "bad config path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key) || !(*cur)[key].is_object()) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

/// A stage failure, carrying the stage name for diagnostics and exit codes.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), "stage '" + stage + "' failed: " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

inline int stage_exit_code(const std::string& stage) {
  static const std::map<std::string, int> codes = {{"config", 2},   {"phantom", 10},  {"train-style", 11},
                                                   {"augment", 12}, {"train-unet", 13}, {"segment", 14},
                                                   {"evaluate", 15}, {"report", 16}};
  auto it = codes.find(stage);
  return it == codes.end() ? 1 : it->second;
}

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& msg) {
    std::fprintf(stderr, "%s\n", msg.c_str());
    std::fflush(stderr);
  };
}

namespace experiment_detail {

// Stage outputs live in a directory with a stage.json recording the cache key
// and the SHA-256 of every output. A stage is skipped when the key matches and
// all outputs still hash to the recorded values.
class StageCache {
 public:
  StageCache(fs::path dir, std::string key) : dir_(std::move(dir)), key_(std::move(key)) {}

  bool valid() const {
    const fs::path meta = dir_ / "stage.json";
    if (!fs::exists(meta)) return false;
    try {
      const json j = json::parse(io::read_bytes(meta));
      if (j.value("key", std::string{}) != key_) return false;
      for (const auto& [rel, hash] : j.at("outputs").items())
        if (!fs::exists(dir_ / rel) || sha256_file(dir_ / rel) != hash.get<std::string>()) return false;
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  void prepare() const {
    fs::remove(dir_ / "stage.json");
    fs::create_directories(dir_);
  }

  void commit(const std::vector<std::string>& outputs) const {
    json o = json::object();
    for (const auto& rel : outputs) o[rel] = sha256_file(dir_ / rel);
    io::write_bytes(dir_ / "stage.json", json{{"key", key_}, {"outputs", o}}.dump(2) + "\n");
  }

  const fs::path& dir() const { return dir_; }
  const std::string& key() const { return key_; }

 private:
  fs::path dir_;
  std::string key_;
};

inline std::string stage_key(const std::string& name, const json& cfg, const std::vector<std::string>& upstream) {
  json j = {{"stage", name}, {"config", cfg}, {"upstream", upstream}};
  return sha256_hex(j.dump());
}

// Every file under the manifest (images and masks) plus the manifest itself.
inline std::vector<std::string> manifest_files(const DatasetManifest& m) {
  std::vector<std::string> out = {"manifest.json"};
  for (const auto& s : m.samples) {
    out.push_back(s.image);
    out.push_back(s.mask);
  }
  return out;
}

template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  } catch (const std::exception& e) {
    throw StageError(stage, Error(ErrorCode::kIo, e.what()));
  }
}

}  // namespace experiment_detail

struct ExperimentReport {
  MetricsReport baseline, augmented;
  Comparison comparison;
  std::size_t augmented_size = 0;
  json document;  // the report.json contents
};

/// Model identifier: leading 16 hex digits of the checkpoint's SHA-256.
inline std::string model_id(const fs::path& ckpt) { return sha256_file(ckpt).substr(0, 16); }

inline MetricsReport evaluate_unet(UNetModel& model, const DatasetManifest& m, Split split, const std::string& mid,
                                   const fs::path& pred_dir = {}) {
  if (!pred_dir.empty()) fs::create_directories(pred_dir);
  return evaluate_model(
      [&](const AnnotatedSample& s) {
        SegMap seg = predict(model, s.image, s.mask.schema_ptr()).segmap;
        if (!pred_dir.empty()) io::save_mask(seg, pred_dir / (s.id + ".png"));
        return seg;
      },
      m, split, mid, dataset_id(m));
}

/// phantom -> style generators -> augmentation -> baseline and augmented
/// U-Nets -> evaluation on the domain-B test split -> comparison + montage.
/// Every stage is cached under `out` by a hash of its configuration and
/// upstream keys.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const fs::path& out, const Logger& log = {}) {
  using namespace experiment_detail;
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  experiment_detail::in_stage("config", [&] {
    cfg.validate();
    return 0;
  });
  fs::create_directories(out);

  // phantom
  const json phantom_cfg = {{"spec", to_json(cfg.phantom)},
                            {"counts", {cfg.n_train, cfg.n_test, cfg.n_style}},
                            {"seed", cfg.seeds.phantom}};
  StageCache phantom_stage(out / "phantom", stage_key("phantom", phantom_cfg, {}));
  const DatasetManifest data = in_stage("phantom", [&] {
    if (phantom_stage.valid()) {
      say("[phantom] cached");
      return load_manifest(phantom_stage.dir() / "manifest.json");
    }
    say("[phantom] generating " + std::to_string(cfg.n_train) + "/" + std::to_string(cfg.n_test) + "/" +
        std::to_string(cfg.n_style) + " samples");
    phantom_stage.prepare();
    auto m = generate_phantom_dataset(cfg.phantom, cfg.n_train, cfg.n_test, cfg.n_style, cfg.seeds.phantom,
                                      phantom_stage.dir());
    phantom_stage.commit(manifest_files(m));
    return m;
  });

  // style generators
  const auto style_idx = data.indices(Split::kStyle);
  std::vector<std::string> style_keys;
  StyleBank bank;
  std::vector<std::string> generator_files;
  in_stage("train-style", [&] {
    if (cfg.n_styles == 0) return 0;
    const FeatureBackbone<float> bb(cfg.backbone);
    const auto content = load_split(data, Split::kTrain);
    for (int k = 0; k < cfg.n_styles; ++k) {
      const AnnotatedSample style = load_sample(data, style_idx[static_cast<std::size_t>(k)]);
      const json gcfg = {{"generator", to_json(cfg.generator)}, {"epochs", cfg.generator_epochs},
                         {"lr", cfg.generator_lr},             {"loss", to_json(cfg.loss)},
                         {"backbone", to_json(cfg.backbone)},  {"style", style.id},
                         {"seed", cfg.seeds.generator}};
      StageCache st(out / "styles" / style.id, stage_key("train-style", gcfg, {phantom_stage.key()}));
      if (st.valid()) {
        say("[train-style] " + style.id + " cached");
      } else {
        st.prepare();
        auto gen = build_generator(cfg.generator, derive_seed(cfg.seeds.generator, style.id));
        StyleTrainOptions o;
        o.epochs = cfg.generator_epochs;
        o.lr = cfg.generator_lr;
        o.seed = derive_seed(cfg.seeds.generator, style.id);
        o.on_epoch = [&](const StyleEpoch& e) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "[train-style] %s epoch %d content %.4g style %.4g total %.4g (%.1fs)",
                        style.id.c_str(), e.epoch, e.content, e.style, e.total, e.seconds);
          say(buf);
        };
        const auto tlog = train_style_generator(*gen, content, style, bb, cfg.loss, o);
        save_checkpoint(gen->to_checkpoint(), st.dir() / "generator.ckpt");
        io::write_bytes(st.dir() / "train_log.json", to_json(tlog).dump(2) + "\n");
        st.commit({"generator.ckpt"});
      }
      style_keys.push_back(st.key());
      bank.push_back(load_generator(st.dir() / "generator.ckpt"));
      generator_files.push_back("styles/" + style.id + "/generator.ckpt");
    }
    return 0;
  });

  // augmentation
  const json aug_cfg = {{"seed", cfg.seeds.augment}, {"include_originals", cfg.include_originals}};
  std::vector<std::string> aug_upstream = {phantom_stage.key()};
  aug_upstream.insert(aug_upstream.end(), style_keys.begin(), style_keys.end());
  StageCache aug_stage(out / "augmented", stage_key("augment", aug_cfg, aug_upstream));
  const DatasetManifest augmented = in_stage("augment", [&] {
    if (aug_stage.valid()) {
      say("[augment] cached");
      return load_manifest(aug_stage.dir() / "manifest.json");
    }
    fs::remove_all(aug_stage.dir());
    AugmentationPlan plan{data, bank, aug_stage.dir(), cfg.seeds.augment, cfg.include_originals};
    auto m = augment_dataset(plan);
    say("[augment] " + std::to_string(m.samples.size()) + " samples");
    aug_stage.commit(manifest_files(m));
    return m;
  });
  const std::size_t m_train = data.indices(Split::kTrain).size();
  const std::size_t expected = m_train * (static_cast<std::size_t>(cfg.n_styles) + (cfg.include_originals ? 1 : 0));
  in_stage("augment", [&] {
    require(augmented.samples.size() == expected, ErrorCode::kMismatch,
            "augmented set has " + std::to_string(augmented.samples.size()) + " samples, expected " +
                std::to_string(expected));
    return 0;
  });

  // U-Nets
  auto train_stage = [&](const std::string& name, const DatasetManifest& train_set, const std::string& upstream,
                         std::uint64_t seed) {
    UNetTrainConfig tc = cfg.train;
    tc.seed = seed;
    const json ucfg = {{"unet", to_json(cfg.unet)}, {"train", to_json(tc)}};
    StageCache st(out / name, stage_key("train-unet", ucfg, {upstream}));
    in_stage("train-unet", [&] {
      if (st.valid()) {
        say("[train-unet] " + name + " cached");
        return 0;
      }
      st.prepare();
      auto model = build_unet(cfg.unet, seed);
      UNetTrainHooks hooks;
      hooks.on_epoch = [&](const UNetEpoch& e) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "[train-unet] %s epoch %d loss %.4f acc %.4f (%zu samples, %.1fs)",
                      name.c_str(), e.epoch, e.loss, e.accuracy, e.samples, e.seconds);
        say(buf);
      };
      const auto tlog = train_unet(*model, load_split(train_set, Split::kTrain), tc, hooks);
      save_checkpoint(model->to_checkpoint(), st.dir() / "model.ckpt");
      io::write_bytes(st.dir() / "train_log.json", to_json(tlog).dump(2) + "\n");
      st.commit({"model.ckpt"});
      return 0;
    });
    return st;
  };
  const StageCache base_stage = train_stage("unet_baseline", data, phantom_stage.key(), cfg.seeds.unet_baseline);
  const StageCache aug_unet_stage = train_stage("unet_augmented", augmented, aug_stage.key(), cfg.seeds.unet_augmented);

  // evaluation
  ExperimentReport rep;
  rep.augmented_size = augmented.samples.size();
  in_stage("evaluate", [&] {
    for (auto* st : {&base_stage, &aug_unet_stage}) {
      const fs::path ckpt = st->dir() / "model.ckpt";
      auto model = load_unet(ckpt);
      const std::string which = st == &base_stage ? "baseline" : "augmented";
      say("[evaluate] " + which);
      auto r = evaluate_unet(*model, data, Split::kTest, model_id(ckpt), out / "eval" / ("pred_" + which));
      save_report(r, out / "eval" / (which + ".json"));
      (st == &base_stage ? rep.baseline : rep.augmented) = std::move(r);
    }
    return 0;
  });

  // comparison, montage, report
  in_stage("report", [&] {
    rep.comparison = compare_reports(rep.baseline, rep.augmented);
    std::vector<IntensityGrid> imgs;
    std::vector<SegMap> truths, pb, pa;
    const auto test = data.indices(Split::kTest);
    for (std::size_t k = 0; k < test.size() && static_cast<int>(k) < cfg.montage_samples; ++k) {
      const auto s = load_sample(data, test[k]);
      imgs.push_back(s.image);
      truths.push_back(s.mask);
      pb.push_back(io::load_mask(out / "eval" / "pred_baseline" / (s.id + ".png"), data.schema));
      pa.push_back(io::load_mask(out / "eval" / "pred_augmented" / (s.id + ".png"), data.schema));
    }
    render_montage(imgs, truths, pb, pa, out / "montage.png");

    std::vector<std::string> artifacts = {"phantom/manifest.json",         "augmented/manifest.json",
                                          "unet_baseline/model.ckpt",      "unet_augmented/model.ckpt",
                                          "eval/baseline.json",            "eval/augmented.json",
                                          "montage.png"};
    artifacts.insert(artifacts.end(), generator_files.begin(), generator_files.end());
    json arts = json::object();
    for (const auto& a : artifacts) arts[a] = sha256_file(out / a);
    rep.document = {{"config", to_json(cfg)},
                    {"baseline", to_json(rep.baseline)},
                    {"augmented", to_json(rep.augmented)},
                    {"comparison", to_json(rep.comparison)},
                    {"training_set_sizes", {{"baseline", m_train}, {"augmented", rep.augmented_size}}},
                    {"artifacts", arts}};
    io::write_bytes(out / "report.json", rep.document.dump(2) + "\n");
    char buf[200];
    std::snprintf(buf, sizeof buf, "[report] baseline %.4f augmented %.4f delta %+.4f (%s)",
                  rep.baseline.pixel_accuracy, rep.augmented.pixel_accuracy, rep.comparison.delta,
                  rep.comparison.improved ? "improved" : "not improved");
    say(buf);
    return 0;
  });
  return rep;
}

/// Checks that every artifact listed in a report exists under `out` and still
/// matches its recorded hash. Returns the offending paths.
inline std::vector<std::string> verify_artifacts(const json& report, const fs::path& out) {
  std::vector<std::string> bad;
  for (const auto& [rel, hash] : report.at("artifacts").items())
    if (!fs::exists(out / rel) || sha256_file(out / rel) != hash.get<std::string>()) bad.push_back(rel);
  return bad;
}

}  // namespace ctseg
