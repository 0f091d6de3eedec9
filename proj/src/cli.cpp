#include "puuma/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "puuma/inference.hpp"
#include "puuma/relaxometry.hpp"

namespace puuma::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError("config: unknown key '" + where + "." + key + "'");
  }
}

uint64_t require_seed(const json& j, const std::string& where) {
  if (!j.contains("seed"))
    throw ConfigError("config: '" + where + ".seed' is mandatory (no wall-clock defaults)");
  return j.at("seed").get<uint64_t>();
}

PhantomSpec parse_phantom(const json& j) {
  check_keys(j, "dataset.phantom",
             {"volume_shape", "noise_sigma", "echo_times", "uterus_ax_min",
              "uterus_ax_max", "placenta_thickness", "lobularity", "frac_lo",
              "frac_hi", "t2s_base", "t2s_birth_slope", "t2s_scan_slope",
              "texture_base", "texture_shortfall"});
  PhantomSpec s;
  if (j.contains("volume_shape")) s.volume_shape = j.at("volume_shape").get<Dims3>();
  if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("echo_times"))
    s.echo_times_ms = j.at("echo_times").get<std::vector<float>>();
  if (j.contains("uterus_ax_min")) s.uterus_ax_min = j.at("uterus_ax_min").get<double>();
  if (j.contains("uterus_ax_max")) s.uterus_ax_max = j.at("uterus_ax_max").get<double>();
  if (j.contains("placenta_thickness"))
    s.placenta_thickness = j.at("placenta_thickness").get<double>();
  if (j.contains("lobularity")) s.lobularity = j.at("lobularity").get<double>();
  if (j.contains("frac_lo")) s.frac_lo = j.at("frac_lo").get<double>();
  if (j.contains("frac_hi")) s.frac_hi = j.at("frac_hi").get<double>();
  if (j.contains("t2s_base")) s.t2s_base = j.at("t2s_base").get<double>();
  if (j.contains("t2s_birth_slope"))
    s.t2s_birth_slope = j.at("t2s_birth_slope").get<double>();
  if (j.contains("t2s_scan_slope"))
    s.t2s_scan_slope = j.at("t2s_scan_slope").get<double>();
  if (j.contains("texture_base")) s.texture_base = j.at("texture_base").get<double>();
  if (j.contains("texture_shortfall"))
    s.texture_shortfall = j.at("texture_shortfall").get<double>();
  s.validate();
  return s;
}

ModelConfig apply_overrides(ModelConfig base, const json& j) {
  check_keys(j, "model.overrides",
             {"local_depth", "global_depth", "local_latent_dim", "global_latent_dim",
              "fcl_hidden", "base_channels", "volume_shape", "patch_shape",
              "ssm_state_dim"});
  if (j.contains("local_depth")) base.local_depth = j.at("local_depth").get<int>();
  if (j.contains("global_depth")) base.global_depth = j.at("global_depth").get<int>();
  if (j.contains("local_latent_dim"))
    base.local_latent_dim = j.at("local_latent_dim").get<int>();
  if (j.contains("global_latent_dim"))
    base.global_latent_dim = j.at("global_latent_dim").get<int>();
  if (j.contains("fcl_hidden")) base.fcl_hidden = j.at("fcl_hidden").get<int>();
  if (j.contains("base_channels")) base.base_channels = j.at("base_channels").get<int>();
  if (j.contains("volume_shape"))
    base.volume_shape = j.at("volume_shape").get<std::array<int, 3>>();
  if (j.contains("patch_shape"))
    base.patch_shape = j.at("patch_shape").get<std::array<int, 3>>();
  if (j.contains("ssm_state_dim")) base.ssm_state_dim = j.at("ssm_state_dim").get<int>();
  base.validate();
  return base;
}

}  // namespace

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
  check_keys(j, "", {"dataset", "model", "train", "eval"});

  RunConfig cfg;
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset", {"out_dir", "n_cases", "seed", "category_mix", "phantom"});
    cfg.has_dataset = true;
    cfg.dataset.out_dir = d.at("out_dir").get<std::string>();
    cfg.dataset.n_cases = d.at("n_cases").get<int>();
    cfg.dataset.seed = require_seed(d, "dataset");
    cfg.dataset.seed_set = true;
    if (d.contains("category_mix")) {
      const json& m = d.at("category_mix");
      if (m.is_string()) {
        const std::string name = m.get<std::string>();
        if (name == "paper-imbalance")
          cfg.dataset.category_mix = kPaperImbalanceMix;
        else if (name == "uniform")
          cfg.dataset.category_mix = {0.25, 0.25, 0.25, 0.25};
        else
          throw ConfigError("config: unknown category_mix preset '" + name + "'");
      } else {
        cfg.dataset.category_mix = m.get<std::array<double, 4>>();
      }
    }
    if (d.contains("phantom")) cfg.dataset.phantom = parse_phantom(d.at("phantom"));
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model", {"variant", "preset", "seed", "overrides"});
    cfg.has_model = true;
    cfg.model.variant = variant_from_name(m.at("variant").get<std::string>());
    if (m.contains("preset")) cfg.model.preset = m.at("preset").get<std::string>();
    cfg.model.seed = require_seed(m, "model");
    cfg.model.seed_set = true;
    ModelConfig base;
    if (cfg.model.preset == "desk")
      base = ModelConfig::desk_preset(cfg.model.variant);
    else if (cfg.model.preset == "paper")
      base = ModelConfig::paper_preset(cfg.model.variant);
    else
      throw ConfigError("config: model.preset must be 'desk' or 'paper'");
    cfg.model.resolved =
        m.contains("overrides") ? apply_overrides(base, m.at("overrides")) : base;
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"out_dir", "seed", "learning_rate", "lr_floor", "total_steps",
                "fine_tune_start_step", "checkpoint_every",
                "fine_tune_checkpoint_every", "val_every", "loss_weights", "augment",
                "stride"});
    cfg.has_train = true;
    cfg.train.out_dir = t.at("out_dir").get<std::string>();
    TrainConfig& tc = cfg.train.cfg;
    tc.seed = require_seed(t, "train");
    cfg.train.seed_set = true;
    if (t.contains("learning_rate")) tc.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("lr_floor")) tc.lr_floor = t.at("lr_floor").get<double>();
    if (t.contains("total_steps")) tc.total_steps = t.at("total_steps").get<int>();
    if (t.contains("fine_tune_start_step"))
      tc.fine_tune_start_step = t.at("fine_tune_start_step").get<int>();
    else
      tc.fine_tune_start_step = (tc.total_steps * 4) / 5;  // final 20% of steps
    if (t.contains("checkpoint_every"))
      tc.checkpoint_every = t.at("checkpoint_every").get<int>();
    if (t.contains("fine_tune_checkpoint_every"))
      tc.fine_tune_checkpoint_every = t.at("fine_tune_checkpoint_every").get<int>();
    if (t.contains("val_every")) tc.val_every = t.at("val_every").get<int>();
    if (t.contains("stride")) tc.sw_stride = t.at("stride").get<int>();
    if (t.contains("loss_weights")) {
      const json& w = t.at("loss_weights");
      check_keys(w, "train.loss_weights", {"mse", "dice", "bce", "cce"});
      if (w.contains("mse")) tc.loss_weights.w_mse = w.at("mse").get<float>();
      if (w.contains("dice")) tc.loss_weights.w_dice = w.at("dice").get<float>();
      if (w.contains("bce")) tc.loss_weights.w_bce = w.at("bce").get<float>();
      if (w.contains("cce")) tc.loss_weights.w_cce = w.at("cce").get<float>();
    }
    if (t.contains("augment")) {
      const json& a = t.at("augment");
      check_keys(a, "train.augment",
                 {"p_affine", "p_elastic", "p_zoom", "p_contrast", "p_bias", "p_noise",
                  "noise_sigma", "zoom_min", "zoom_max"});
      AugmentConfig& ac = tc.augment;
      if (a.contains("p_affine")) ac.p_affine = a.at("p_affine").get<double>();
      if (a.contains("p_elastic")) ac.p_elastic = a.at("p_elastic").get<double>();
      if (a.contains("p_zoom")) ac.p_zoom = a.at("p_zoom").get<double>();
      if (a.contains("p_contrast")) ac.p_contrast = a.at("p_contrast").get<double>();
      if (a.contains("p_bias")) ac.p_bias = a.at("p_bias").get<double>();
      if (a.contains("p_noise")) ac.p_noise = a.at("p_noise").get<double>();
      if (a.contains("noise_sigma")) ac.noise_sigma = a.at("noise_sigma").get<double>();
      if (a.contains("zoom_min")) ac.zoom_min = a.at("zoom_min").get<double>();
      if (a.contains("zoom_max")) ac.zoom_max = a.at("zoom_max").get<double>();
    }
    tc.validate();
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"out_dir", "stride", "models"});
    cfg.has_eval = true;
    cfg.eval.out_dir = e.at("out_dir").get<std::string>();
    if (e.contains("stride")) cfg.eval.stride = e.at("stride").get<int>();
    if (e.contains("models"))
      cfg.eval.models = e.at("models").get<std::vector<std::string>>();
    else
      cfg.eval.models = {"puuma", "umamba_global", "unet", "cervical_lr"};
  }
  return cfg;
}

// ---- gen-data ---------------------------------------------------------------

namespace {

void print_histogram(const char* title, const std::vector<float>& values) {
  std::printf("%s\n", title);
  const int lo = 14, hi = 44, bin = 2;
  for (int b = lo; b < hi; b += bin) {
    int n = 0;
    for (float v : values)
      if (v >= b && v < b + bin) ++n;
    std::printf("  %2d-%2d wk |", b, b + bin);
    for (int i = 0; i < n; ++i) std::printf("#");
    std::printf(" %d\n", n);
  }
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg, bool force) {
  if (!cfg.has_dataset) throw ConfigError("gen-data: config lacks a dataset section");
  const DatasetSection& d = cfg.dataset;
  if (d.n_cases < 1) throw ConfigError("gen-data: n_cases must be >= 1");

  if (fs::exists(d.out_dir) && !fs::is_empty(d.out_dir)) {
    if (!force)
      throw ConfigError("gen-data: '" + d.out_dir +
                        "' exists and is not empty (use --force)");
    fs::remove_all(d.out_dir);
  }
  fs::create_directories(d.out_dir);

  const auto counts = allocate_categories(d.n_cases, d.category_mix);
  std::vector<PretermCategory> plan;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < counts[size_t(c)]; ++i) plan.push_back(PretermCategory(c));

  Dataset ds;
  std::vector<float> scans, births;
  for (int i = 0; i < d.n_cases; ++i) {
    PhantomResult r = generate_cohort_case(d.phantom, d.seed, i, plan[size_t(i)]);
    save_case(d.out_dir + "/cases/" + r.rec.data.id, r.rec, r.echoes);
    scans.push_back(r.rec.data.ga_scan_weeks);
    births.push_back(r.rec.data.ga_birth_weeks);
    r.echoes.clear();
    ds.cases.push_back(std::move(r.rec));
  }

  const auto cats = ds.categories();
  ds.splits = stratified_split(cats, d.seed);
  save_splits(d.out_dir, ds);

  std::printf("generated %d cases into %s\n", d.n_cases, d.out_dir.c_str());
  std::printf("category counts: EPT=%d VPT=%d LPT=%d Term=%d\n", counts[0], counts[1],
              counts[2], counts[3]);
  std::printf("splits: train=%zu val=%zu test=%zu\n", ds.splits.train.size(),
              ds.splits.val.size(), ds.splits.test.size());
  print_histogram("GA at scan (weeks):", scans);
  print_histogram("GA at birth (weeks):", births);
  return 0;
}

// ---- fit-t2star ---------------------------------------------------------------

int cmd_fit_t2star(const RunConfig& cfg) {
  if (!cfg.has_dataset) throw ConfigError("fit-t2star: config lacks a dataset section");
  const std::string dir = cfg.dataset.out_dir;
  Dataset ds = load_dataset(dir);
  double worst = 0.0;
  int64_t flagged_total = 0;
  for (const CaseRecord& rec : ds.cases) {
    std::vector<Volume> echoes;
    CaseRecord full = load_case(dir + "/cases/" + rec.data.id, true, &echoes);
    auto [fit, flags] = fit_t2star_volume(echoes, full.echo_times_ms);
    double diff = 0.0;
    for (int64_t v = 0; v < fit.size(); ++v)
      diff = std::max(diff, std::abs(double(fit.voxels[size_t(v)]) -
                                     double(full.data.t2star.voxels[size_t(v)])));
    worst = std::max(worst, diff);
    for (uint8_t f : flags) flagged_total += f;
    std::ofstream os(dir + "/cases/" + rec.data.id + "/t2star.raw",
                     std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(fit.voxels.data()),
             std::streamsize(fit.voxels.size() * sizeof(float)));
  }
  std::printf("refit %zu cases; max |delta| vs stored maps: %g ms; flagged voxels: %lld\n",
              ds.cases.size(), worst, (long long)flagged_total);
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const RunConfig& cfg) {
  if (!cfg.has_dataset || !cfg.has_model || !cfg.has_train)
    throw ConfigError("train: config needs dataset, model and train sections");
  Dataset ds = load_dataset(cfg.dataset.out_dir);

  Model model = build_model(cfg.model.resolved, cfg.model.seed);
  const std::string run_dir =
      cfg.train.out_dir + "/" + variant_name(cfg.model.resolved.variant);

  TrainConfig tc = cfg.train.cfg;
  if (tc.sw_stride <= 0) tc.sw_stride = std::max(1, cfg.model.resolved.patch_shape[0] / 2);

  TrainResult result = train(model, ds, tc, run_dir);
  if (!result.finite) {
    std::fprintf(stderr, "train: aborted on non-finite loss; last-good checkpoint kept\n");
    return 2;
  }

  double best_mse = 0.0;
  int best_step = 0;
  Model best = select_best(result.checkpoint_paths, result.checkpoint_steps, ds,
                           ds.splits.val, tc.sw_stride, &best_mse, &best_step);
  save_checkpoint(run_dir + "/best.pumc", best);
  std::printf("trained %s for %d steps; best checkpoint step %d (val MSE %.4f)\n",
              variant_name(cfg.model.resolved.variant), tc.total_steps, best_step,
              best_mse);
  return 0;
}

// ---- evaluate ----------------------------------------------------------------

int cmd_evaluate(const RunConfig& cfg) {
  if (!cfg.has_dataset || !cfg.has_train || !cfg.has_eval)
    throw ConfigError("evaluate: config needs dataset, train and eval sections");
  Dataset ds = load_dataset(cfg.dataset.out_dir);

  std::vector<Case> test_cases;
  for (size_t i : ds.splits.test) test_cases.push_back(ds.at(i));
  std::vector<Case> train_cases;
  for (size_t i : ds.splits.train) train_cases.push_back(ds.at(i));

  int stride = cfg.eval.stride;

  std::vector<std::pair<std::string, CasePredictor>> predictors;
  std::vector<Model> models;  // keep loaded models alive for the lambdas
  models.reserve(cfg.eval.models.size());
  for (const std::string& name : cfg.eval.models) {
    if (name == "cervical_lr") {
      CervicalModel lr = fit_cervical_lr(train_cases);
      predictors.push_back({name, [lr](const Case& c) {
                              Prediction p;
                              p.case_id = c.id;
                              p.ga_true_weeks = c.ga_birth_weeks;
                              p.ga_pred_weeks =
                                  float(lr.predict(double(*c.cervical_length_mm)));
                              p.category_true = c.category();
                              p.category_pred =
                                  categorize(std::max(double(p.ga_pred_weeks), 1e-3));
                              p.n_valid_patches = 1;
                              return p;
                            }});
      continue;
    }
    const std::string ckpt = cfg.train.out_dir + "/" + name + "/best.pumc";
    if (!fs::exists(ckpt))
      throw ConfigError("evaluate: missing checkpoint for variant '" + name + "' at " +
                        ckpt);
    models.push_back(load_checkpoint(ckpt));
    const Model* mp = &models.back();
    if (stride <= 0) stride = std::max(1, mp->config.patch_shape[0] / 2);
    const int use_stride = stride;
    predictors.push_back({name, [mp, use_stride](const Case& c) {
                            return sliding_window_predict(*mp, c, use_stride);
                          }});
  }
  if (stride <= 0) stride = 4;

  SuiteResult suite = evaluate_suite(predictors, test_cases);
  emit_report(suite, cfg.eval.out_dir);
  print_comparison_table(std::cout, suite);
  return 0;
}

// ---- report ------------------------------------------------------------------

int cmd_report(const RunConfig& cfg) {
  if (!cfg.has_eval) throw ConfigError("report: config lacks an eval section");
  const std::string dir = cfg.eval.out_dir;
  SuiteResult suite;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string fname = e.path().filename().string();
    if (fname.rfind("predictions_", 0) != 0 || e.path().extension() != ".csv") continue;
    const std::string name = fname.substr(12, fname.size() - 12 - 4);
    suite.model_names.push_back(name);
    suite.predictions.push_back(read_predictions_csv(e.path().string()));
    suite.metrics.push_back(compute_metrics(suite.predictions.back()));
  }
  if (suite.model_names.empty())
    throw ConfigError("report: no predictions_<model>.csv files in '" + dir + "'");
  // stable order for reproducible output
  std::vector<size_t> order(suite.model_names.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return suite.model_names[a] < suite.model_names[b];
  });
  SuiteResult sorted;
  for (size_t i : order) {
    sorted.model_names.push_back(suite.model_names[i]);
    sorted.predictions.push_back(std::move(suite.predictions[i]));
    sorted.metrics.push_back(suite.metrics[i]);
  }
  emit_report(sorted, dir);
  print_comparison_table(std::cout, sorted);
  return 0;
}

// ---- argv entry ----------------------------------------------------------------

int run(int argc, const char* const* argv) {
  CLI::App app{"PUUMA pipeline: synthetic data, T2* fitting, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_override, variant_override;
  uint64_t seed_override = 0;
  bool seed_given = false, force = false;

  app.add_option("--config", config_path, "path to the run config (JSON)")
      ->required(false);
  app.add_option("--seed", seed_override, "override the active section's seed")
      ->each([&seed_given](const std::string&) { seed_given = true; });
  app.add_option("--out", out_override, "override the active output directory");
  app.add_flag("--force", force, "overwrite an existing dataset directory");
  app.add_option("--variant", variant_override,
                 "model variant: puuma | umamba_global | unet");

  auto* gen = app.add_subcommand(
      "gen-data",
      "generate the synthetic phantom dataset\n"
      "config keys: dataset.{out_dir, n_cases, seed, category_mix, phantom},\n"
      "  dataset.phantom.{volume_shape, noise_sigma, echo_times, uterus_ax_min,\n"
      "  uterus_ax_max, placenta_thickness, lobularity, frac_lo, frac_hi,\n"
      "  t2s_base, t2s_birth_slope, t2s_scan_slope, texture_base, texture_shortfall}");
  auto* fit = app.add_subcommand(
      "fit-t2star",
      "refit T2* maps from stored echoes\n"
      "config keys: dataset.out_dir");
  auto* tr = app.add_subcommand(
      "train",
      "train a model variant and select the best checkpoint\n"
      "config keys: model.{variant, preset, seed, overrides}, train.{out_dir, seed,\n"
      "  learning_rate, lr_floor, total_steps, fine_tune_start_step,\n"
      "  checkpoint_every, fine_tune_checkpoint_every, val_every, stride,\n"
      "  loss_weights.{mse, dice, bce, cce},\n"
      "  augment.{p_affine, p_elastic, p_zoom, p_contrast, p_bias, p_noise,\n"
      "  noise_sigma, zoom_min, zoom_max}}");
  auto* ev = app.add_subcommand(
      "evaluate",
      "run all predictors on the test set and emit reports\n"
      "config keys: eval.{out_dir, stride, models}");
  auto* rep = app.add_subcommand(
      "report",
      "regenerate report files from prediction CSVs\n"
      "config keys: eval.out_dir");
  for (CLI::App* sub : {gen, fit, tr, ev, rep}) sub->fallthrough();

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (config_path.empty()) throw ConfigError("--config <path> is required");
    RunConfig cfg = load_config(config_path);

    if (!variant_override.empty() && cfg.has_model) {
      const Variant v = variant_from_name(variant_override);
      ModelConfig base = cfg.model.preset == "paper" ? ModelConfig::paper_preset(v)
                                                     : ModelConfig::desk_preset(v);
      // keep override-able dims from the previously resolved config
      base.volume_shape = cfg.model.resolved.volume_shape;
      base.patch_shape = cfg.model.resolved.patch_shape;
      base.base_channels = cfg.model.resolved.base_channels;
      base.global_depth = cfg.model.resolved.global_depth;
      base.global_latent_dim = cfg.model.resolved.global_latent_dim;
      if (v == Variant::puuma) {
        base.local_depth = cfg.model.resolved.local_depth > 0
                               ? cfg.model.resolved.local_depth
                               : base.local_depth;
        base.local_latent_dim = cfg.model.resolved.local_latent_dim > 0
                                    ? cfg.model.resolved.local_latent_dim
                                    : base.local_latent_dim;
      } else {
        base.local_depth = 0;
        base.local_latent_dim = 0;
      }
      base.validate();
      cfg.model.variant = v;
      cfg.model.resolved = base;
    }

    if (gen->parsed()) {
      if (seed_given) cfg.dataset.seed = seed_override;
      if (!out_override.empty()) cfg.dataset.out_dir = out_override;
      return cmd_gen_data(cfg, force);
    }
    if (fit->parsed()) return cmd_fit_t2star(cfg);
    if (tr->parsed()) {
      if (seed_given) cfg.train.cfg.seed = seed_override;
      if (!out_override.empty()) cfg.train.out_dir = out_override;
      return cmd_train(cfg);
    }
    if (ev->parsed()) {
      if (!out_override.empty()) cfg.eval.out_dir = out_override;
      return cmd_evaluate(cfg);
    }
    if (rep->parsed()) {
      if (!out_override.empty()) cfg.eval.out_dir = out_override;
      return cmd_report(cfg);
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace puuma::cli
