#pragma once
// Sliding-window inference, the evaluation metrics of Table 2, the cervical
// length linear regression baseline, and report emission (CSV + SVG).

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "puuma/dataset.hpp"
#include "puuma/model.hpp"

namespace puuma {

struct Prediction {
  std::string case_id;
  float ga_true_weeks = 0;
  float ga_pred_weeks = 0;
  PretermCategory category_true = PretermCategory::Term;
  PretermCategory category_pred = PretermCategory::Term;
  int n_valid_patches = 0;
};

struct Metrics {
  double mae_weeks = 0, mae_sd_weeks = 0;
  double accuracy = 0, sensitivity = 0, specificity = 0;
  int tp = 0, fn = 0, tn = 0, fp = 0;  // positive = preterm (< 37 weeks)
};

// stride grid per axis plus the edge-aligned final origin
std::vector<int> axis_origins(int extent, int patch, int stride);
std::vector<Dims3> sliding_window_origins(Dims3 dims, Dims3 patch, int stride);

// Stubbable core: enumerates origins, keeps pairs whose patch mask fraction
// is strictly above 33%, averages predict_pair over them in origin order.
using PairPredictor = std::function<double(const Volume& patch, Dims3 origin)>;
Prediction sliding_window_mean(const Case& c, Dims3 patch_shape, int stride,
                               const PairPredictor& predict_pair);

// Full-model inference; the whole-volume pass runs once per case and is
// reused across pairs (the patch is the only per-pair input).
Prediction sliding_window_predict(const Model& model, const Case& c, int stride);

Metrics compute_metrics(std::span<const Prediction> predictions);

// ---- cervical length baseline -------------------------------------------

struct CervicalModel {
  double slope = 0, intercept = 0;
  double predict(double length_mm) const { return slope * length_mm + intercept; }
};

// ordinary least squares of GA at birth on cervical length
CervicalModel fit_cervical_lr(std::span<const double> lengths_mm,
                              std::span<const double> ga_birth_weeks);
CervicalModel fit_cervical_lr(std::span<const Case> cases);

// ---- evaluation suite -----------------------------------------------------

using CasePredictor = std::function<Prediction(const Case&)>;

struct SuiteResult {
  std::vector<std::string> model_names;
  std::vector<std::vector<Prediction>> predictions;  // per model, per case
  std::vector<Metrics> metrics;
};

// Runs every predictor on the identical test set (which must carry cervical
// length measurements throughout).
SuiteResult evaluate_suite(
    std::span<const std::pair<std::string, CasePredictor>> models,
    std::span<const Case> test_cases);

void print_comparison_table(std::ostream& os, const SuiteResult& suite);

// ---- report files ----------------------------------------------------------

// metrics.csv, predictions_<model>.csv and scatter_<model>.svg per model.
// Scatters show predicted vs true GA with a dashed identity line and dotted
// category guides at 28/32/37 weeks, points colored by true category.
void emit_report(const SuiteResult& suite, const std::string& out_dir);

std::vector<Prediction> read_predictions_csv(const std::string& path);
void write_scatter_svg(const std::string& path,
                       std::span<const Prediction> predictions);

}  // namespace puuma
