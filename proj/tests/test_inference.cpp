#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "puuma/inference.hpp"
#include "puuma/phantom.hpp"

using namespace puuma;
namespace fs = std::filesystem;

namespace {

// a case with a hand-placed mask block for sliding-window tests
Case toy_case(Dims3 dims, Dims3 block_lo, Dims3 block_hi) {
  Case c;
  c.id = "toy";
  c.ga_scan_weeks = 25.0f;
  c.ga_birth_weeks = 36.0f;
  c.cervical_length_mm = 30.0f;
  c.t2star = Volume(dims);
  for (int64_t i = 0; i < c.t2star.size(); ++i)
    c.t2star.voxels[size_t(i)] = float(i % 100);
  c.placenta_mask = Mask(dims);
  for (int i = block_lo[0]; i < block_hi[0]; ++i)
    for (int j = block_lo[1]; j < block_hi[1]; ++j)
      for (int k = block_lo[2]; k < block_hi[2]; ++k) c.placenta_mask.at(i, j, k) = 1;
  return c;
}

std::vector<Prediction> predictions_from_confusion(int tp, int fn, int tn, int fp) {
  std::vector<Prediction> out;
  int id = 0;
  auto push = [&](bool true_pre, bool pred_pre) {
    Prediction p;
    p.case_id = "c" + std::to_string(id++);
    p.ga_true_weeks = true_pre ? 30.0f : 39.0f;
    p.ga_pred_weeks = pred_pre ? 31.0f : 40.0f;
    p.category_true = categorize(p.ga_true_weeks);
    p.category_pred = categorize(p.ga_pred_weeks);
    p.n_valid_patches = 1;
    out.push_back(p);
  };
  for (int i = 0; i < tp; ++i) push(true, true);
  for (int i = 0; i < fn; ++i) push(true, false);
  for (int i = 0; i < tn; ++i) push(false, false);
  for (int i = 0; i < fp; ++i) push(false, true);
  return out;
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

}  // namespace

TEST_CASE("axis origins walk the stride grid plus the edge") {
  CHECK(axis_origins(10, 4, 2) == std::vector<int>{0, 2, 4, 6});
  CHECK(axis_origins(11, 4, 2) == std::vector<int>{0, 2, 4, 6, 7});
  CHECK(axis_origins(4, 4, 2) == std::vector<int>{0});
  CHECK_THROWS_AS(axis_origins(3, 4, 2), std::invalid_argument);
  CHECK_THROWS_AS(axis_origins(10, 4, 0), std::invalid_argument);
}

TEST_CASE("single valid patch means the mean is that pair's output") {
  Case c = toy_case({6, 6, 6}, {0, 0, 0}, {2, 2, 2});  // one 2x2x2 mask corner
  int calls = 0;
  Prediction p = sliding_window_mean(c, {2, 2, 2}, 2, [&](const Volume&, Dims3 o) {
    ++calls;
    CHECK(o == Dims3{0, 0, 0});
    return 33.25;
  });
  CHECK(calls == 1);
  CHECK(p.n_valid_patches == 1);
  CHECK(p.ga_pred_weeks == doctest::Approx(33.25f));
}

TEST_CASE("constant predictor yields that constant") {
  Case c = toy_case({8, 8, 8}, {1, 1, 1}, {7, 7, 7});
  Prediction p = sliding_window_mean(c, {4, 4, 4}, 2,
                                     [](const Volume&, Dims3) { return 30.0; });
  CHECK(p.ga_pred_weeks == doctest::Approx(30.0f));
  CHECK(p.n_valid_patches > 1);
}

TEST_CASE("valid origins match brute force and the mean matches hand averaging") {
  Case c = toy_case({4, 4, 4}, {1, 1, 0}, {4, 4, 3});
  const Dims3 patch{2, 2, 2};
  const int stride = 2;

  // brute force in the test: all stride-grid origins, strict > 0.33 filter
  std::set<std::array<int, 3>> expected;
  double hand_mean = 0.0;
  int n = 0;
  for (int i : {0, 2})
    for (int j : {0, 2})
      for (int k : {0, 2}) {
        int inside = 0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int cc = 0; cc < 2; ++cc)
              inside += c.placenta_mask.at(i + a, j + b, k + cc);
        if (inside / 8.0 > 0.33) {
          expected.insert({i, j, k});
          hand_mean += i * 100.0 + j * 10.0 + k;
          ++n;
        }
      }
  hand_mean /= n;

  std::set<std::array<int, 3>> got;
  Prediction p = sliding_window_mean(c, patch, stride, [&](const Volume&, Dims3 o) {
    got.insert(o);
    return o[0] * 100.0 + o[1] * 10.0 + o[2];
  });
  CHECK(got == expected);
  CHECK(p.n_valid_patches == n);
  CHECK(p.ga_pred_weeks == doctest::Approx(hand_mean).epsilon(1e-6));
}

TEST_CASE("sliding window errors when nothing qualifies") {
  Case c = toy_case({6, 6, 6}, {0, 0, 0}, {1, 1, 1});  // single masked voxel
  try {
    sliding_window_mean(c, {4, 4, 4}, 2, [](const Volume&, Dims3) { return 1.0; });
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("toy") != std::string::npos);
  }
}

TEST_CASE("inference filter is strictly above 33%") {
  // 27 of 64 voxels = 0.421875 passes; 21/64 = 0.328 does not
  Case c = toy_case({4, 4, 4}, {0, 0, 0}, {3, 3, 3});
  Prediction p = sliding_window_mean(c, {4, 4, 4}, 4,
                                     [](const Volume&, Dims3) { return 1.0; });
  CHECK(p.n_valid_patches == 1);

  Case weak = toy_case({4, 4, 4}, {0, 0, 0}, {3, 3, 2});  // 18/64 = 0.28
  CHECK_THROWS_AS(sliding_window_mean(weak, {4, 4, 4}, 4,
                                      [](const Volume&, Dims3) { return 1.0; }),
                  std::runtime_error);
}

TEST_CASE("order of patch enumeration does not change the mean") {
  Case c = toy_case({8, 8, 8}, {0, 0, 0}, {8, 8, 8});
  std::vector<double> values;
  Prediction p1 = sliding_window_mean(c, {4, 4, 4}, 2, [&](const Volume&, Dims3 o) {
    const double v = std::sin(o[0] + 2.0 * o[1] + 3.0 * o[2]);
    values.push_back(v);
    return v;
  });
  // summing the recorded values in any other order gives the same mean
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  CHECK(p1.ga_pred_weeks == doctest::Approx(acc / values.size()).epsilon(1e-6));
}

TEST_CASE("metrics on perfect predictions") {
  auto preds = predictions_from_confusion(6, 0, 20, 0);
  for (auto& p : preds) p.ga_pred_weeks = p.ga_true_weeks;
  Metrics m = compute_metrics(preds);
  CHECK(m.mae_weeks == 0.0);
  CHECK(m.mae_sd_weeks == 0.0);
  CHECK(m.accuracy == 1.0);
  CHECK(m.sensitivity == 1.0);
  CHECK(m.specificity == 1.0);
}

TEST_CASE("metric identities hold on random confusion mixes") {
  Rng rng(17);
  for (int rep = 0; rep < 25; ++rep) {
    const int tp = int(rng.uniform_int(0, 8)), fn = int(rng.uniform_int(0, 8));
    const int tn = int(rng.uniform_int(1, 12)), fp = int(rng.uniform_int(0, 8));
    if (tp + fn == 0) continue;
    Metrics m = compute_metrics(predictions_from_confusion(tp, fn, tn, fp));
    const int total = tp + fn + tn + fp;
    CHECK(m.tp == tp);
    CHECK(m.fn == fn);
    CHECK(m.tn == tn);
    CHECK(m.fp == fp);
    CHECK(m.accuracy * total == doctest::Approx(double(tp + tn)));
    CHECK(m.sensitivity == doctest::Approx(double(tp) / (tp + fn)));
    CHECK(m.specificity == doctest::Approx(double(tn) / (tn + fp)));
  }
  CHECK_THROWS_AS(compute_metrics(std::vector<Prediction>{}), std::invalid_argument);
}

TEST_CASE("published comparison rows emerge from their confusion matrices") {
  // 26 test cases, 6 preterm / 20 term
  struct Row {
    const char* model;
    int tp, fn, tn, fp;
    double acc, sens, spec;
  };
  const Row rows[] = {
      {"puuma", 4, 2, 13, 7, 0.65, 0.67, 0.65},
      {"umamba", 2, 4, 17, 3, 0.73, 0.33, 0.85},
      {"cervical_lr", 4, 2, 16, 4, 0.77, 0.67, 0.80},
      {"unet", 3, 3, 14, 6, 0.65, 0.50, 0.70},
  };
  for (const Row& r : rows) {
    INFO(r.model);
    CHECK(r.tp + r.fn == 6);
    CHECK(r.tn + r.fp == 20);
    Metrics m = compute_metrics(predictions_from_confusion(r.tp, r.fn, r.tn, r.fp));
    CHECK(round2(m.accuracy) == doctest::Approx(r.acc));
    CHECK(round2(m.sensitivity) == doctest::Approx(r.sens));
    CHECK(round2(m.specificity) == doctest::Approx(r.spec));
  }
}

TEST_CASE("exactly 37 predicted weeks counts as term") {
  auto preds = predictions_from_confusion(0, 0, 1, 0);
  preds[0].ga_true_weeks = 39.0f;
  preds[0].ga_pred_weeks = 37.0f;
  Metrics m = compute_metrics(preds);
  CHECK(m.tn == 1);
  CHECK(m.fp == 0);
}

TEST_CASE("mae dispersion is the population sd of absolute errors") {
  auto preds = predictions_from_confusion(0, 0, 3, 0);
  preds[0].ga_pred_weeks = preds[0].ga_true_weeks + 1.0f;
  preds[1].ga_pred_weeks = preds[1].ga_true_weeks - 2.0f;
  preds[2].ga_pred_weeks = preds[2].ga_true_weeks + 3.0f;
  Metrics m = compute_metrics(preds);
  CHECK(m.mae_weeks == doctest::Approx(2.0));
  CHECK(m.mae_sd_weeks == doctest::Approx(std::sqrt(2.0 / 3.0)));
}

TEST_CASE("cervical regression: two points define the line") {
  const double x[2] = {10.0, 30.0};
  const double y[2] = {30.0, 40.0};
  CervicalModel m = fit_cervical_lr(std::span<const double>(x, 2),
                                    std::span<const double>(y, 2));
  CHECK(m.slope == doctest::Approx(0.5));
  CHECK(m.intercept == doctest::Approx(25.0));
  CHECK(m.predict(20.0) == doctest::Approx(35.0));
}

TEST_CASE("constant outcome gives zero slope") {
  const double x[3] = {10.0, 20.0, 30.0};
  const double y[3] = {38.0, 38.0, 38.0};
  CervicalModel m = fit_cervical_lr(std::span<const double>(x, 3),
                                    std::span<const double>(y, 3));
  CHECK(m.slope == doctest::Approx(0.0));
  CHECK(m.intercept == doctest::Approx(38.0));
}

TEST_CASE("ols matches the normal equations on random data") {
  Rng rng(23);
  std::vector<double> x(50), y(50);
  for (int i = 0; i < 50; ++i) {
    x[size_t(i)] = rng.uniform(5.0, 55.0);
    y[size_t(i)] = 10.0 + 0.6 * x[size_t(i)] + rng.normal(0.0, 1.5);
  }
  CervicalModel m = fit_cervical_lr(x, y);
  // normal equations solved directly in the test
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = 50.0;
  for (int i = 0; i < 50; ++i) {
    sx += x[size_t(i)];
    sy += y[size_t(i)];
    sxx += x[size_t(i)] * x[size_t(i)];
    sxy += x[size_t(i)] * y[size_t(i)];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / n;
  CHECK(m.slope == doctest::Approx(slope).epsilon(1e-8));
  CHECK(m.intercept == doctest::Approx(intercept).epsilon(1e-8));

  // residual orthogonality
  double dot = 0.0, scale = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double r = y[size_t(i)] - m.predict(x[size_t(i)]);
    dot += r * x[size_t(i)];
    scale += std::abs(y[size_t(i)] * x[size_t(i)]);
  }
  CHECK(std::abs(dot) < 1e-6 * scale);
}

TEST_CASE("degenerate designs are rejected") {
  const double x[3] = {10.0, 10.0, 10.0};
  const double y[3] = {30.0, 31.0, 32.0};
  CHECK_THROWS_AS(fit_cervical_lr(std::span<const double>(x, 3),
                                  std::span<const double>(y, 3)),
                  std::invalid_argument);
  const double x1[1] = {10.0};
  const double y1[1] = {30.0};
  CHECK_THROWS_AS(fit_cervical_lr(std::span<const double>(x1, 1),
                                  std::span<const double>(y1, 1)),
                  std::invalid_argument);
}

TEST_CASE("evaluate_suite runs every predictor over the same test set") {
  PhantomSpec spec;
  spec.volume_shape = {16, 16, 10};
  std::vector<Case> test_cases;
  for (int i = 0; i < 6; ++i)
    test_cases.push_back(
        generate_cohort_case(spec, 31, i, PretermCategory(i % 4)).rec.data);

  auto truth = [](const Case& c) {
    Prediction p;
    p.case_id = c.id;
    p.ga_true_weeks = c.ga_birth_weeks;
    p.ga_pred_weeks = c.ga_birth_weeks;
    p.category_true = c.category();
    p.category_pred = c.category();
    p.n_valid_patches = 1;
    return p;
  };
  std::vector<std::pair<std::string, CasePredictor>> models;
  for (const char* name : {"puuma", "umamba_global", "unet", "cervical_lr"})
    models.push_back({name, truth});

  SuiteResult suite = evaluate_suite(models, test_cases);
  CHECK(suite.model_names.size() == 4);
  CHECK(suite.metrics.size() == 4);
  for (const Metrics& m : suite.metrics) CHECK(m.mae_weeks == 0.0);
  for (const auto& preds : suite.predictions) CHECK(preds.size() == test_cases.size());

  std::ostringstream table;
  print_comparison_table(table, suite);
  CHECK(table.str().find("MAE") != std::string::npos);
  CHECK(table.str().find("Accuracy") != std::string::npos);
  CHECK(table.str().find("Sensitivity") != std::string::npos);
  CHECK(table.str().find("Specificity") != std::string::npos);

  // missing cervical length in the test set is an error
  std::vector<Case> no_cl = test_cases;
  no_cl[0].cervical_length_mm.reset();
  CHECK_THROWS_AS(evaluate_suite(models, no_cl), std::invalid_argument);

  // empty model names are rejected
  std::vector<std::pair<std::string, CasePredictor>> bad{{"", truth}};
  CHECK_THROWS_AS(evaluate_suite(bad, test_cases), std::invalid_argument);
}

TEST_CASE("report files: csv round trip and svg structure") {
  auto preds = predictions_from_confusion(4, 2, 13, 7);
  SuiteResult suite;
  suite.model_names = {"stub"};
  suite.predictions = {preds};
  suite.metrics = {compute_metrics(preds)};

  const std::string dir = (fs::temp_directory_path() / "puuma_report_test").string();
  fs::remove_all(dir);
  emit_report(suite, dir);

  CHECK(fs::exists(dir + "/metrics.csv"));
  CHECK(fs::exists(dir + "/predictions_stub.csv"));
  CHECK(fs::exists(dir + "/scatter_stub.svg"));

  std::ifstream mf(dir + "/metrics.csv");
  std::string header;
  std::getline(mf, header);
  CHECK(header == "model,mae,mae_sd,accuracy,sensitivity,specificity,tp,fn,tn,fp");

  auto back = read_predictions_csv(dir + "/predictions_stub.csv");
  REQUIRE(back.size() == preds.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    CHECK(back[i].case_id == preds[i].case_id);
    CHECK(back[i].ga_pred_weeks == doctest::Approx(preds[i].ga_pred_weeks));
    CHECK(back[i].category_true == preds[i].category_true);
  }

  std::ifstream sf(dir + "/scatter_stub.svg");
  std::string svg((std::istreambuf_iterator<char>(sf)), {});
  size_t count = 0, pos = 0;
  while ((pos = svg.find("<circle", pos)) != std::string::npos) {
    ++count;
    pos += 7;
  }
  CHECK(count == preds.size());
  for (const char* guide :
       {"data-week=\"28\"", "data-week=\"32\"", "data-week=\"37\""})
    CHECK(svg.find(guide) != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);  // identity line dashed

  // empty model name rejected at emission too
  SuiteResult bad = suite;
  bad.model_names[0] = "";
  CHECK_THROWS_AS(emit_report(bad, dir), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("model-driven sliding window agrees with a manual per-pair loop") {
  PhantomSpec spec;
  spec.volume_shape = {20, 20, 12};
  Case c = generate_cohort_case(spec, 77, 0, PretermCategory::LPT).rec.data;

  ModelConfig mc = ModelConfig::desk_preset(Variant::puuma);
  mc.volume_shape = {16, 16, 8};
  mc.patch_shape = {4, 4, 4};
  mc.global_depth = 2;
  mc.local_depth = 1;
  mc.global_latent_dim = 64;
  mc.local_latent_dim = 32;
  Model m = build_model(mc, 13);

  Prediction p = sliding_window_predict(m, c, 2);
  CHECK(p.n_valid_patches >= 1);

  // manual recomputation of the same mean
  Tensor vol = volume_to_tensor(resize_trilinear(c.t2star, {16, 16, 8}));
  GlobalBranch::Out g = m.global.forward(vol, mc);
  Tensor probs_g = softmax_lastdim(g.class_logits);
  double acc = 0.0;
  int n = 0;
  for (const Dims3& o : sliding_window_origins(c.t2star.dims, {4, 4, 4}, 2)) {
    const double frac = patch_mask_fraction(c.placenta_mask, o, {4, 4, 4});
    if (!(frac > 0.33)) continue;
    Tensor patch = volume_to_tensor(extract_patch(c.t2star, o, {4, 4, 4}));
    auto [ga_l, cls_l] = m.local->forward(patch, mc);
    acc += fuse(*m.fusion, g.ga, probs_g, ga_l, softmax_lastdim(cls_l),
                c.ga_scan_weeks)
               .item();
    ++n;
  }
  REQUIRE(n == p.n_valid_patches);
  CHECK(p.ga_pred_weeks == doctest::Approx(acc / n).epsilon(1e-6));
}
