// ctstyleseg: phantom generation, style generator training, augmentation,
// U-Net training, segmentation, evaluation and the one-shot experiment.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctseg/experiment.hpp"

using namespace ctseg;

namespace {

json read_json(const fs::path& p) {
  require(fs::exists(p), ErrorCode::kMissingFile, "'" + p.string() + "' not found");
  try {
    return json::parse(io::read_bytes(p));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, p.string() + ": " + e.what());
  }
}

// Config document: an optional file, then each --set key=value on top.
json load_config_doc(const std::string& path, const std::vector<std::string>& sets) {
  json doc = path.empty() ? json::object() : read_json(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::kParse, "--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    json v;
    try {
      v = json::parse(raw);
    } catch (const json::exception&) {
      v = raw;  // bare strings
    }
    set_path(doc, key, v);
  }
  return doc;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  bool quiet = false;
};

Logger make_logger(const Common& c) { return c.quiet ? Logger{} : stderr_logger(); }

int run_stage(const std::string& stage, const std::function<void()>& f) {
  try {
    f();
    return 0;
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return stage_exit_code(e.stage());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s: %s\n", stage.c_str(), e.what());
    return stage_exit_code(stage);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation-aware style augmentation for CT segmentation"};
  app.require_subcommand(1);
  Common common;
  int rc = 0;

  auto add_quiet = [&](CLI::App* sub) { sub->add_flag("-q,--quiet", common.quiet, "no progress output"); };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment config JSON (blocks supply defaults)");
    sub->add_option("--set", common.sets, "override a config key, e.g. --set train.epochs=5");
    add_quiet(sub);
  };
  // Builds the effective config from --config/--set, then lets flags override.
  auto effective = [&](const std::function<void(json&)>& flags) {
    json doc = load_config_doc(common.config, common.sets);
    flags(doc);
    return experiment_config_from_json(doc);
  };

  // run
  auto* run = app.add_subcommand("run", "run the full experiment");
  std::string run_out;
  std::optional<int> run_styles;
  run->add_option("--out", run_out, "output root")->required();
  run->add_option("--n-styles", run_styles, "number of style generators");
  add_common(run);
  run->callback([&] {
    ExperimentConfig cfg;
    rc = run_stage("config", [&] {
      cfg = effective([&](json& d) {
        if (run_styles) d["n_styles"] = *run_styles;
      });
    });
    if (rc) return;
    try {
      const auto rep = run_experiment(cfg, run_out, make_logger(common));
      std::printf("baseline %s  augmented %s  delta %+.2f pt  dice improved %zu/%zu\n",
                  pct(rep.baseline.pixel_accuracy).c_str(), pct(rep.augmented.pixel_accuracy).c_str(),
                  100.0 * rep.comparison.delta, rep.comparison.dice_improved.size(), rep.comparison.dice_compared.size());
    } catch (const StageError& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      rc = stage_exit_code(e.stage());
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      rc = 1;
    }
  });

  // phantom
  auto* ph = app.add_subcommand("phantom", "generate a synthetic chest phantom dataset");
  std::string ph_out;
  std::optional<int> ph_side, ph_train, ph_test, ph_style;
  std::optional<std::uint64_t> ph_seed;
  std::optional<double> ph_noise, ph_streaks;
  ph->add_option("--out", ph_out, "output directory")->required();
  ph->add_option("--side", ph_side, "image side in pixels");
  ph->add_option("--n-train", ph_train, "domain-A training samples");
  ph->add_option("--n-test", ph_test, "domain-B test samples");
  ph->add_option("--n-style", ph_style, "domain-B style exemplars");
  ph->add_option("--seed", ph_seed, "seed");
  ph->add_option("--domain-b-noise", ph_noise, "domain-B noise std");
  ph->add_option("--domain-b-streaks", ph_streaks, "domain-B streak amplitude");
  add_common(ph);
  ph->callback([&] {
    rc = run_stage("phantom", [&] {
      const auto cfg = effective([&](json& d) {
        if (ph_side) {
          set_path(d, "phantom.side", *ph_side);
          set_path(d, "generator.side", *ph_side);
          set_path(d, "unet.side", *ph_side);
        }
        if (ph_train) set_path(d, "phantom.n_train", *ph_train);
        if (ph_test) set_path(d, "phantom.n_test", *ph_test);
        if (ph_style) {
          set_path(d, "phantom.n_style", *ph_style);
          if (!d.contains("n_styles") || d["n_styles"].get<int>() > *ph_style) d["n_styles"] = *ph_style;
        }
        if (ph_seed) set_path(d, "seeds.phantom", *ph_seed);
        if (ph_noise) set_path(d, "phantom.domain_b.noise_std", *ph_noise);
        if (ph_streaks) set_path(d, "phantom.domain_b.streak_amp", *ph_streaks);
      });
      const auto m = generate_phantom_dataset(cfg.phantom, cfg.n_train, cfg.n_test, cfg.n_style, cfg.seeds.phantom,
                                              ph_out);
      std::printf("%zu samples written to %s (dataset %s)\n", m.samples.size(), ph_out.c_str(),
                  dataset_id(m).c_str());
    });
  });

  // train-style
  auto* ts = app.add_subcommand("train-style", "train one style generator");
  std::string ts_manifest, ts_style, ts_out;
  std::optional<int> ts_epochs;
  std::optional<double> ts_lr;
  std::optional<std::uint64_t> ts_seed;
  ts->add_option("--manifest", ts_manifest, "dataset manifest")->required();
  ts->add_option("--style-id", ts_style, "id of the style exemplar in the manifest")->required();
  ts->add_option("--epochs", ts_epochs, "epochs");
  ts->add_option("--lr", ts_lr, "learning rate");
  ts->add_option("--seed", ts_seed, "seed");
  ts->add_option("--out", ts_out, "checkpoint path")->required();
  add_common(ts);
  ts->callback([&] {
    rc = run_stage("train-style", [&] {
      const auto cfg = effective([&](json& d) {
        if (ts_epochs) set_path(d, "generator.epochs", *ts_epochs);
        if (ts_lr) set_path(d, "generator.lr", *ts_lr);
        if (ts_seed) set_path(d, "seeds.generator", *ts_seed);
      });
      const auto m = load_manifest(ts_manifest);
      const auto idx = m.find(ts_style);
      require(idx.has_value(), ErrorCode::kMissingFile, "no sample '" + ts_style + "' in the manifest");
      const auto style = load_sample(m, *idx);
      const auto content = load_split(m, Split::kTrain);
      GeneratorConfig gc = cfg.generator;
      gc.side = style.image.height();
      const FeatureBackbone<float> bb(cfg.backbone);
      const std::uint64_t seed = derive_seed(cfg.seeds.generator, style.id);
      auto gen = build_generator(gc, seed);
      StyleTrainOptions o;
      o.epochs = cfg.generator_epochs;
      o.lr = cfg.generator_lr;
      o.seed = seed;
      const auto log = make_logger(common);
      o.on_epoch = [&](const StyleEpoch& e) {
        if (!log) return;
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d content %.4g style %.4g total %.4g (%.1fs)", e.epoch, e.content,
                      e.style, e.total, e.seconds);
        log(buf);
      };
      train_style_generator(*gen, content, style, bb, cfg.loss, o);
      save_checkpoint(gen->to_checkpoint(), ts_out);
      std::printf("generator for %s written to %s\n", style.id.c_str(), ts_out.c_str());
    });
  });

  // augment
  auto* au = app.add_subcommand("augment", "expand a training set with a bank of style generators");
  std::string au_manifest, au_bank, au_out;
  std::uint64_t au_seed = 3;
  bool au_no_originals = false;
  au->add_option("--manifest", au_manifest, "source manifest")->required();
  au->add_option("--bank", au_bank, "directory of generator checkpoints")->required();
  au->add_option("--out", au_out, "output directory")->required();
  au->add_option("--seed", au_seed, "seed");
  au->add_flag("--no-originals", au_no_originals, "leave the original samples out");
  add_quiet(au);
  au->callback([&] {
    rc = run_stage("augment", [&] {
      AugmentationPlan plan{load_manifest(au_manifest), load_style_bank(au_bank), au_out, au_seed, !au_no_originals};
      const auto m = augment_dataset(plan);
      std::printf("%zu samples written to %s\n", m.samples.size(), au_out.c_str());
    });
  });

  // train-unet
  auto* tu = app.add_subcommand("train-unet", "train a U-Net on the train split of a manifest");
  std::string tu_manifest, tu_out;
  std::optional<int> tu_epochs, tu_batch;
  std::optional<double> tu_lr;
  std::optional<std::uint64_t> tu_seed;
  tu->add_option("--manifest", tu_manifest, "training manifest")->required();
  tu->add_option("--epochs", tu_epochs, "epochs");
  tu->add_option("--batch", tu_batch, "batch size");
  tu->add_option("--lr", tu_lr, "learning rate");
  tu->add_option("--seed", tu_seed, "seed");
  tu->add_option("--out", tu_out, "checkpoint path")->required();
  add_common(tu);
  tu->callback([&] {
    rc = run_stage("train-unet", [&] {
      const auto cfg = effective([&](json& d) {
        if (tu_epochs) set_path(d, "train.epochs", *tu_epochs);
        if (tu_batch) set_path(d, "train.batch", *tu_batch);
        if (tu_lr) set_path(d, "train.lr", *tu_lr);
      });
      const std::uint64_t seed = tu_seed.value_or(cfg.seeds.unet_baseline);
      const auto m = load_manifest(tu_manifest);
      const auto data = load_split(m, Split::kTrain);
      require(!data.empty(), ErrorCode::kEmptyInput, "manifest has no training samples");
      UNetConfig uc = cfg.unet;
      uc.side = data.front().image.height();
      uc.classes = m.schema->size();
      auto model = build_unet(uc, seed);
      UNetTrainConfig tc = cfg.train;
      tc.seed = seed;
      const auto log = make_logger(common);
      UNetTrainHooks hooks;
      hooks.on_epoch = [&](const UNetEpoch& e) {
        if (!log) return;
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d loss %.4f acc %.4f (%.1fs)", e.epoch, e.loss, e.accuracy,
                      e.seconds);
        log(buf);
      };
      train_unet(*model, data, tc, hooks);
      save_checkpoint(model->to_checkpoint(), tu_out);
      std::printf("U-Net written to %s (model %s)\n", tu_out.c_str(), model_id(tu_out).c_str());
    });
  });

  // segment
  auto* sg = app.add_subcommand("segment", "write predicted masks for one split");
  std::string sg_model, sg_manifest, sg_split = "test", sg_out;
  sg->add_option("--model", sg_model, "U-Net checkpoint")->required();
  sg->add_option("--manifest", sg_manifest, "dataset manifest")->required();
  sg->add_option("--split", sg_split, "split (train/test/style)");
  sg->add_option("--out", sg_out, "output directory")->required();
  add_quiet(sg);
  sg->callback([&] {
    rc = run_stage("segment", [&] {
      auto model = load_unet(sg_model);
      const auto m = load_manifest(sg_manifest);
      const Split split = parse_split(sg_split);
      fs::create_directories(sg_out);
      std::size_t n = 0;
      for (std::size_t i : m.indices(split)) {
        const auto s = load_sample(m, i);
        io::save_mask(predict(*model, s.image, m.schema).segmap, fs::path(sg_out) / (s.id + ".png"));
        ++n;
      }
      std::printf("%zu masks written to %s\n", n, sg_out.c_str());
    });
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a U-Net on one split");
  std::string ev_model, ev_manifest, ev_split = "test", ev_report;
  ev->add_option("--model", ev_model, "U-Net checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  ev->add_option("--split", ev_split, "split");
  ev->add_option("--report", ev_report, "report JSON path")->required();
  add_quiet(ev);
  ev->callback([&] {
    rc = run_stage("evaluate", [&] {
      auto model = load_unet(ev_model);
      const auto m = load_manifest(ev_manifest);
      const auto r = evaluate_unet(*model, m, parse_split(ev_split), model_id(ev_model));
      save_report(r, ev_report);
      std::printf("pixel accuracy %s, mean dice %.4f over %zu samples\n", pct(r.pixel_accuracy).c_str(),
                  r.mean_dice.value_or(0.0), r.n_samples);
    });
  });

  // report
  auto* rp = app.add_subcommand("report", "compare two metrics reports");
  std::string rp_base, rp_aug, rp_montage, rp_manifest, rp_pred_base, rp_pred_aug, rp_out;
  int rp_samples = 4;
  rp->add_option("--baseline", rp_base, "baseline report")->required();
  rp->add_option("--augmented", rp_aug, "augmented report")->required();
  rp->add_option("--out", rp_out, "write the comparison JSON here");
  auto* mont = rp->add_option("--montage", rp_montage, "montage PNG path");
  rp->add_option("--manifest", rp_manifest, "dataset manifest for the montage")->needs(mont);
  rp->add_option("--baseline-pred", rp_pred_base, "baseline predicted masks")->needs(mont);
  rp->add_option("--augmented-pred", rp_pred_aug, "augmented predicted masks")->needs(mont);
  rp->add_option("--samples", rp_samples, "montage rows");
  add_quiet(rp);
  rp->callback([&] {
    rc = run_stage("report", [&] {
      const auto a = load_report(rp_base), b = load_report(rp_aug);
      const auto c = compare_reports(a, b);
      const std::string doc = to_json(c).dump(2) + "\n";
      if (!rp_out.empty()) io::write_bytes(rp_out, doc);
      std::fputs(doc.c_str(), stdout);
      if (rp_montage.empty()) return;
      require(!rp_manifest.empty() && !rp_pred_base.empty() && !rp_pred_aug.empty(), ErrorCode::kInvalidArgument,
              "--montage needs --manifest, --baseline-pred and --augmented-pred");
      const auto m = load_manifest(rp_manifest);
      std::vector<IntensityGrid> imgs;
      std::vector<SegMap> truths, pb, pa;
      for (std::size_t i : m.indices(parse_split(a.split))) {
        if (static_cast<int>(imgs.size()) >= rp_samples) break;
        const auto s = load_sample(m, i);
        imgs.push_back(s.image);
        truths.push_back(s.mask);
        pb.push_back(io::load_mask(fs::path(rp_pred_base) / (s.id + ".png"), m.schema));
        pa.push_back(io::load_mask(fs::path(rp_pred_aug) / (s.id + ".png"), m.schema));
      }
      render_montage(imgs, truths, pb, pa, rp_montage);
    });
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : stage_exit_code("config");
  }
  return rc;
}
