#include "puuma/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace puuma {

namespace fs = std::filesystem;

std::vector<int> axis_origins(int extent, int patch, int stride) {
  if (stride < 1) throw std::invalid_argument("sliding window: stride must be >= 1");
  if (patch > extent)
    throw std::invalid_argument("sliding window: patch exceeds volume extent");
  std::vector<int> out;
  for (int o = 0; o + patch <= extent; o += stride) out.push_back(o);
  if (out.back() != extent - patch) out.push_back(extent - patch);
  return out;
}

std::vector<Dims3> sliding_window_origins(Dims3 dims, Dims3 patch, int stride) {
  const auto o0 = axis_origins(dims[0], patch[0], stride);
  const auto o1 = axis_origins(dims[1], patch[1], stride);
  const auto o2 = axis_origins(dims[2], patch[2], stride);
  std::vector<Dims3> out;
  out.reserve(o0.size() * o1.size() * o2.size());
  for (int i : o0)
    for (int j : o1)
      for (int k : o2) out.push_back({i, j, k});
  return out;
}

namespace {
PretermCategory safe_categorize(double ga) {
  // network output can stray non-positive early in training; the binary
  // preterm cut only needs the 37-week threshold
  return categorize(std::max(ga, 1e-3));
}
}  // namespace

Prediction sliding_window_mean(const Case& c, Dims3 patch_shape, int stride,
                               const PairPredictor& predict_pair) {
  const auto origins = sliding_window_origins(c.t2star.dims, patch_shape, stride);
  double acc = 0.0;
  int kept = 0;
  for (const Dims3& o : origins) {
    const double frac = patch_mask_fraction(c.placenta_mask, o, patch_shape);
    if (!(frac > kPatchOverlapThreshold)) continue;  // strictly more than 33%
    Volume patch = extract_patch(c.t2star, o, patch_shape);
    acc += predict_pair(patch, o);
    ++kept;
  }
  if (kept == 0)
    throw std::runtime_error("sliding window: no patch of case '" + c.id +
                             "' exceeds 33% placental overlap");
  Prediction p;
  p.case_id = c.id;
  p.ga_true_weeks = c.ga_birth_weeks;
  p.ga_pred_weeks = float(acc / double(kept));
  p.category_true = c.category();
  p.category_pred = safe_categorize(p.ga_pred_weeks);
  p.n_valid_patches = kept;
  return p;
}

namespace {

// flips requires_grad off for a forward-only pass and restores it on exit
class GradOffGuard {
 public:
  explicit GradOffGuard(const Model& m) : model_(const_cast<Model&>(m)) {
    for (auto& [name, t] : model_.parameters()) {
      was_.push_back(t.requires_grad());
      t.node()->requires_grad = false;
    }
  }
  ~GradOffGuard() {
    size_t i = 0;
    for (auto& [name, t] : model_.parameters()) t.node()->requires_grad = was_[i++];
  }

 private:
  Model& model_;
  std::vector<bool> was_;
};

}  // namespace

Prediction sliding_window_predict(const Model& model, const Case& c, int stride) {
  GradOffGuard guard(model);
  const auto& cfg = model.config;
  const Dims3 vol_shape{cfg.volume_shape[0], cfg.volume_shape[1], cfg.volume_shape[2]};
  const Dims3 patch_shape{cfg.patch_shape[0], cfg.patch_shape[1], cfg.patch_shape[2]};

  Tensor volume_in = volume_to_tensor(resize_trilinear(c.t2star, vol_shape));

  if (!cfg.has_local_branch()) {
    // the whole-volume branch is the prediction; patches only gate validity
    GlobalBranch::Out g = model.global.forward(volume_in, cfg);
    const double ga = g.ga.item();
    return sliding_window_mean(c, patch_shape, stride,
                               [ga](const Volume&, Dims3) { return ga; });
  }

  // one whole-volume pass per case, reused for every (volume, patch) pair
  GlobalBranch::Out g = model.global.forward(volume_in, cfg);
  Tensor probs_g = softmax_lastdim(g.class_logits);
  return sliding_window_mean(
      c, patch_shape, stride, [&](const Volume& patch, Dims3) {
        Tensor patch_in = volume_to_tensor(patch);
        auto [ga_l, cls_l] = model.local->forward(patch_in, cfg);
        Tensor ga_final = fuse(*model.fusion, g.ga, probs_g, ga_l,
                               softmax_lastdim(cls_l), c.ga_scan_weeks);
        return double(ga_final.item());
      });
}

Metrics compute_metrics(std::span<const Prediction> predictions) {
  if (predictions.empty())
    throw std::invalid_argument("compute_metrics: empty prediction set");
  Metrics m;
  double sum_abs = 0.0;
  for (const Prediction& p : predictions)
    sum_abs += std::abs(double(p.ga_pred_weeks) - double(p.ga_true_weeks));
  m.mae_weeks = sum_abs / double(predictions.size());
  double var = 0.0;
  for (const Prediction& p : predictions) {
    const double d =
        std::abs(double(p.ga_pred_weeks) - double(p.ga_true_weeks)) - m.mae_weeks;
    var += d * d;
  }
  m.mae_sd_weeks = std::sqrt(var / double(predictions.size()));  // population SD

  for (const Prediction& p : predictions) {
    const bool true_preterm = p.ga_true_weeks < 37.0f;
    const bool pred_preterm = p.ga_pred_weeks < 37.0f;
    if (true_preterm && pred_preterm) m.tp++;
    else if (true_preterm && !pred_preterm) m.fn++;
    else if (!true_preterm && !pred_preterm) m.tn++;
    else m.fp++;
  }
  const int total = m.tp + m.fn + m.tn + m.fp;
  m.accuracy = double(m.tp + m.tn) / double(total);
  m.sensitivity = (m.tp + m.fn) > 0 ? double(m.tp) / double(m.tp + m.fn)
                                    : std::nan("");
  m.specificity = (m.tn + m.fp) > 0 ? double(m.tn) / double(m.tn + m.fp)
                                    : std::nan("");
  return m;
}

// ---- cervical baseline ------------------------------------------------------

CervicalModel fit_cervical_lr(std::span<const double> lengths_mm,
                              std::span<const double> ga_birth_weeks) {
  if (lengths_mm.size() != ga_birth_weeks.size())
    throw std::invalid_argument("cervical lr: size mismatch");
  if (lengths_mm.size() < 2)
    throw std::invalid_argument("cervical lr: need at least 2 cases");
  const size_t n = lengths_mm.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += lengths_mm[i];
    my += ga_birth_weeks[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (lengths_mm[i] - mx) * (lengths_mm[i] - mx);
    sxy += (lengths_mm[i] - mx) * (ga_birth_weeks[i] - my);
  }
  if (sxx <= 0.0)
    throw std::invalid_argument(
        "cervical lr: all lengths identical, degenerate design");
  CervicalModel m;
  m.slope = sxy / sxx;
  m.intercept = my - m.slope * mx;
  return m;
}

CervicalModel fit_cervical_lr(std::span<const Case> cases) {
  std::vector<double> x, y;
  for (const Case& c : cases)
    if (c.cervical_length_mm) {
      x.push_back(double(*c.cervical_length_mm));
      y.push_back(double(c.ga_birth_weeks));
    }
  return fit_cervical_lr(x, y);
}

// ---- evaluation suite ---------------------------------------------------------

SuiteResult evaluate_suite(
    std::span<const std::pair<std::string, CasePredictor>> models,
    std::span<const Case> test_cases) {
  if (test_cases.empty()) throw std::invalid_argument("evaluate_suite: empty test set");
  for (const Case& c : test_cases)
    if (!c.cervical_length_mm)
      throw std::invalid_argument("evaluate_suite: test case '" + c.id +
                                  "' lacks a cervical length measurement");
  SuiteResult out;
  for (const auto& [name, predict] : models) {
    if (name.empty()) throw std::invalid_argument("evaluate_suite: empty model name");
    std::vector<Prediction> preds;
    preds.reserve(test_cases.size());
    for (const Case& c : test_cases) preds.push_back(predict(c));
    out.metrics.push_back(compute_metrics(preds));
    out.model_names.push_back(name);
    out.predictions.push_back(std::move(preds));
  }
  return out;
}

void print_comparison_table(std::ostream& os, const SuiteResult& suite) {
  os << "Model                  MAE (weeks)    Accuracy  Sensitivity  Specificity\n";
  char buf[160];
  for (size_t i = 0; i < suite.model_names.size(); ++i) {
    const Metrics& m = suite.metrics[i];
    std::snprintf(buf, sizeof buf, "%-22s %.2f +- %.2f   %.2f      %.2f         %.2f\n",
                  suite.model_names[i].c_str(), m.mae_weeks, m.mae_sd_weeks,
                  m.accuracy, m.sensitivity, m.specificity);
    os << buf;
  }
}

// ---- report files --------------------------------------------------------------

namespace {

const char* category_color(PretermCategory c) {
  switch (c) {
    case PretermCategory::Term: return "#1f77b4";  // blue
    case PretermCategory::LPT: return "#d62728";   // red
    case PretermCategory::VPT: return "#2ca02c";   // green
    case PretermCategory::EPT: return "#ff7f0e";   // orange
  }
  return "#000000";
}

}  // namespace

void write_scatter_svg(const std::string& path,
                       std::span<const Prediction> predictions) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");

  const double lo = 14.0, hi = 44.0;
  const double margin = 50.0, plot = 400.0, size = plot + 2 * margin;
  auto mx = [&](double w) { return margin + (w - lo) / (hi - lo) * plot; };
  auto my = [&](double w) { return margin + plot - (w - lo) / (hi - lo) * plot; };
  char buf[512];

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\""
     << size << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // frame and ticks
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" "
                "fill=\"none\" stroke=\"black\"/>\n",
                margin, margin, plot, plot);
  os << buf;
  for (int w = 16; w <= 44; w += 4) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" "
                  "text-anchor=\"middle\">%d</text>\n",
                  mx(w), margin + plot + 16.0, w);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" "
                  "text-anchor=\"end\">%d</text>\n",
                  margin - 6.0, my(w) + 4.0, w);
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-size=\"13\" "
                "text-anchor=\"middle\">True GA at birth (weeks)</text>\n",
                margin + plot / 2, size - 8.0);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-size=\"13\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 14 %.1f)\">Predicted GA at birth "
                "(weeks)</text>\n",
                14.0, margin + plot / 2, margin + plot / 2);
  os << buf;

  // identity, dashed
  std::snprintf(buf, sizeof buf,
                "<line class=\"identity\" x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" "
                "y2=\"%.1f\" stroke=\"black\" stroke-dasharray=\"6 4\"/>\n",
                mx(lo), my(lo), mx(hi), my(hi));
  os << buf;

  // category boundaries at 28/32/37 weeks, dotted
  for (int w : {28, 32, 37}) {
    std::snprintf(
        buf, sizeof buf,
        "<line class=\"guide\" data-week=\"%d\" x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" "
        "y2=\"%.1f\" stroke=\"#888888\" stroke-dasharray=\"2 3\"/>\n",
        w, mx(w), my(lo), mx(w), my(hi));
    os << buf;
  }

  for (const Prediction& p : predictions) {
    const double px = std::clamp(double(p.ga_true_weeks), lo, hi);
    const double py = std::clamp(double(p.ga_pred_weeks), lo, hi);
    std::snprintf(buf, sizeof buf,
                  "<circle class=\"pt\" cx=\"%.2f\" cy=\"%.2f\" r=\"4\" fill=\"%s\" "
                  "fill-opacity=\"0.8\"><title>%s</title></circle>\n",
                  mx(px), my(py), category_color(p.category_true), p.case_id.c_str());
    os << buf;
  }

  // legend
  const char* names[4] = {"EPT", "VPT", "LPT", "Term"};
  for (int i = 0; i < 4; ++i) {
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"10\" height=\"10\" "
                  "fill=\"%s\"/><text x=\"%.1f\" y=\"%.1f\" "
                  "font-size=\"11\">%s</text>\n",
                  margin + 8.0, margin + 8.0 + 16.0 * i,
                  category_color(PretermCategory(i)), margin + 22.0,
                  margin + 17.0 + 16.0 * i, names[i]);
    os << buf;
  }
  os << "</svg>\n";
}

void emit_report(const SuiteResult& suite, const std::string& out_dir) {
  for (const std::string& name : suite.model_names)
    if (name.empty()) throw std::invalid_argument("emit_report: empty model name");
  fs::create_directories(out_dir);

  {
    std::ofstream os(out_dir + "/metrics.csv", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write metrics.csv in '" + out_dir + "'");
    os << "model,mae,mae_sd,accuracy,sensitivity,specificity,tp,fn,tn,fp\n";
    char buf[256];
    for (size_t i = 0; i < suite.model_names.size(); ++i) {
      const Metrics& m = suite.metrics[i];
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d,%d,%d\n",
                    suite.model_names[i].c_str(), m.mae_weeks, m.mae_sd_weeks,
                    m.accuracy, m.sensitivity, m.specificity, m.tp, m.fn, m.tn, m.fp);
      os << buf;
    }
  }

  char buf[256];
  for (size_t i = 0; i < suite.model_names.size(); ++i) {
    const std::string& name = suite.model_names[i];
    std::ofstream os(out_dir + "/predictions_" + name + ".csv", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write predictions csv for " + name);
    os << "case_id,ga_true,ga_pred,category_true,category_pred,n_valid_patches\n";
    for (const Prediction& p : suite.predictions[i]) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%s,%s,%d\n", p.case_id.c_str(),
                    double(p.ga_true_weeks), double(p.ga_pred_weeks),
                    category_name(p.category_true), category_name(p.category_pred),
                    p.n_valid_patches);
      os << buf;
    }
    write_scatter_svg(out_dir + "/scatter_" + name + ".svg", suite.predictions[i]);
  }
}

std::vector<Prediction> read_predictions_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("empty predictions file '" + path + "'");
  std::vector<Prediction> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    Prediction p;
    std::getline(ss, p.case_id, ',');
    std::getline(ss, field, ',');
    p.ga_true_weeks = std::stof(field);
    std::getline(ss, field, ',');
    p.ga_pred_weeks = std::stof(field);
    std::getline(ss, field, ',');
    p.category_true = category_from_name(field);
    std::getline(ss, field, ',');
    p.category_pred = category_from_name(field);
    std::getline(ss, field, ',');
    p.n_valid_patches = std::stoi(field);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace puuma
