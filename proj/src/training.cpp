#include "puuma/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "puuma/inference.hpp"

namespace puuma {

namespace fs = std::filesystem;

namespace {
double stable_sigmoid(double l) {
  return l >= 0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
}
}  // namespace

// ---- loss pieces ----------------------------------------------------------

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    throw std::invalid_argument("bce: shape mismatch " + shape_str(logits.shape()) +
                                " vs " + shape_str(targets.shape()));
  const auto lv = logits.data();
  const auto tv = targets.data();
  const int64_t n = logits.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double l = lv[size_t(i)], t = tv[size_t(i)];
    acc += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
  }
  double acc64 = 0.0;
  if (precise_forward())
    for (int64_t i = 0; i < n; ++i) {
      const double l = detail::val64(logits.node(), size_t(i));
      const double t = detail::val64(targets.node(), size_t(i));
      acc64 += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
    }
  Tensor result = detail::make_op(
      "bce_with_logits", {1}, {float(acc / double(n))}, {logits, targets},
      [n](detail::Node& self) {
        detail::Node* nl = self.inputs[0].get();
        detail::Node* nt = self.inputs[1].get();
        const float go = self.grad[0] / float(n);
        if (float* g = detail::grad_buf(nl))
          for (int64_t i = 0; i < n; ++i)
            g[i] += go * float(stable_sigmoid(nl->value[size_t(i)]) -
                               nt->value[size_t(i)]);
        if (float* g = detail::grad_buf(nt))
          for (int64_t i = 0; i < n; ++i) g[i] += go * float(-nl->value[size_t(i)]);
      });
  if (precise_forward()) result.node()->value64 = {acc64 / double(n)};
  return result;
}

Tensor soft_dice_loss(const Tensor& logits, const Tensor& targets, float smooth) {
  if (logits.shape() != targets.shape())
    throw std::invalid_argument("dice: shape mismatch " + shape_str(logits.shape()) +
                                " vs " + shape_str(targets.shape()));
  const auto lv = logits.data();
  const auto tv = targets.data();
  const int64_t n = logits.numel();
  std::vector<float> probs(size_t(n), 0.0f);
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double p = stable_sigmoid(lv[size_t(i)]);
    probs[size_t(i)] = float(p);
    inter += p * tv[size_t(i)];
    psum += p;
    tsum += tv[size_t(i)];
  }
  const double denom = psum + tsum + double(smooth);
  const double num = 2.0 * inter + double(smooth);
  double loss64 = 0.0;
  if (precise_forward()) {
    double i64 = 0.0, p64 = 0.0, t64 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double p = stable_sigmoid(detail::val64(logits.node(), size_t(i)));
      const double t = detail::val64(targets.node(), size_t(i));
      i64 += p * t;
      p64 += p;
      t64 += t;
    }
    loss64 = 1.0 - (2.0 * i64 + double(smooth)) / (p64 + t64 + double(smooth));
  }
  Tensor result = detail::make_op(
      "soft_dice_loss", {1}, {float(1.0 - num / denom)}, {logits, targets},
      [n, probs = std::move(probs), num, denom](detail::Node& self) {
        detail::Node* nl = self.inputs[0].get();
        detail::Node* nt = self.inputs[1].get();
        const double go = self.grad[0];
        const double d2 = denom * denom;
        if (float* g = detail::grad_buf(nl))
          for (int64_t i = 0; i < n; ++i) {
            const double p = probs[size_t(i)];
            const double t = nt->value[size_t(i)];
            const double ddice_dp = (2.0 * t * denom - num) / d2;
            g[i] += float(go * -ddice_dp * p * (1.0 - p));
          }
        if (float* g = detail::grad_buf(nt))
          for (int64_t i = 0; i < n; ++i) {
            const double p = probs[size_t(i)];
            const double ddice_dt = (2.0 * p * denom - num) / d2;
            g[i] += float(go * -ddice_dt);
          }
      });
  if (precise_forward()) result.node()->value64 = {loss64};
  return result;
}

Tensor cce_with_logits(const Tensor& logits, int target_class) {
  if (logits.shape().size() != 1)
    throw std::invalid_argument("cce: rank-1 logits expected, got " +
                                shape_str(logits.shape()));
  const int k = logits.shape()[0];
  if (target_class < 0 || target_class >= k)
    throw std::invalid_argument("cce: target class " + std::to_string(target_class) +
                                " out of range for " + std::to_string(k) + " logits");
  const auto lv = logits.data();
  double m = lv[0];
  for (int i = 1; i < k; ++i) m = std::max(m, double(lv[size_t(i)]));
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += std::exp(double(lv[size_t(i)]) - m);
  const double lse = m + std::log(z);
  double loss64 = 0.0;
  if (precise_forward()) {
    double m2 = detail::val64(logits.node(), 0);
    for (int i = 1; i < k; ++i)
      m2 = std::max(m2, detail::val64(logits.node(), size_t(i)));
    double z2 = 0.0;
    for (int i = 0; i < k; ++i)
      z2 += std::exp(detail::val64(logits.node(), size_t(i)) - m2);
    loss64 = m2 + std::log(z2) - detail::val64(logits.node(), size_t(target_class));
  }
  Tensor result = detail::make_op(
      "cce_with_logits", {1}, {float(lse - double(lv[size_t(target_class)]))},
      {logits}, [k, target_class, m, z](detail::Node& self) {
        detail::Node* nl = self.inputs[0].get();
        if (float* g = detail::grad_buf(nl)) {
          const float go = self.grad[0];
          for (int i = 0; i < k; ++i) {
            const double p = std::exp(double(nl->value[size_t(i)]) - m) / z;
            g[i] += go * float(p - (i == target_class ? 1.0 : 0.0));
          }
        }
      });
  if (precise_forward()) result.node()->value64 = {loss64};
  return result;
}

// ---- composite ------------------------------------------------------------

void LossWeights::validate() const {
  if (!(w_mse > 0.0f))
    throw std::invalid_argument("loss weights: w_mse must be positive");
  for (float w : {w_mse, w_dice, w_bce, w_cce})
    if (!std::isfinite(w) || w < 0.0f)
      throw std::invalid_argument("loss weights: negative or non-finite weight");
}

LossBreakdown composite_loss(const ModelOutput& output, const TrainTarget& target,
                             const LossWeights& weights) {
  weights.validate();
  const int cat = int(target.category);

  Tensor diff = sub(output.ga_final, Tensor::scalar(target.ga_birth_weeks));
  Tensor mse = mul(diff, diff);
  Tensor dice = soft_dice_loss(output.seg_logits, target.mask);
  Tensor bce = bce_with_logits_mean(output.seg_logits, target.mask);
  Tensor cce = cce_with_logits(output.class_logits_global, cat);
  if (output.class_logits_local)
    cce = scale(add(cce, cce_with_logits(*output.class_logits_local, cat)), 0.5f);

  LossBreakdown out;
  out.mse = mse.item();
  out.dice = dice.item();
  out.bce = bce.item();
  out.cce = cce.item();
  out.total = add(add(scale(mse, weights.w_mse), scale(dice, weights.w_dice)),
                  add(scale(bce, weights.w_bce), scale(cce, weights.w_cce)));
  for (float part : {out.mse, out.dice, out.bce, out.cce, out.total.item()})
    if (!std::isfinite(part)) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "non-finite loss: mse=%g dice=%g bce=%g cce=%g", double(out.mse),
                    double(out.dice), double(out.bce), double(out.cce));
      throw NumericalError(buf);
    }
  return out;
}

// ---- Adam -------------------------------------------------------------------

void adam_init(AdamState& state,
               std::span<const std::pair<std::string, Tensor>> params) {
  state.t = 0;
  state.m.clear();
  state.v.clear();
  for (const auto& [name, p] : params) {
    state.m.emplace_back(size_t(p.numel()), 0.0f);
    state.v.emplace_back(size_t(p.numel()), 0.0f);
  }
}

void adam_step(std::span<const std::pair<std::string, Tensor>> params,
               AdamState& state, double lr) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state/param count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    auto vals = p.raw();
    const auto g = p.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    if (m.size() != vals.size())
      throw std::invalid_argument("adam_step: shape drift in " + params[pi].first);
    for (size_t i = 0; i < vals.size(); ++i) {
      const double gi = i < g.size() ? double(g[i]) : 0.0;
      m[i] = float(state.beta1 * m[i] + (1.0 - state.beta1) * gi);
      v[i] = float(state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] = float(vals[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// ---- schedule / cadence ------------------------------------------------------

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw std::invalid_argument("train: learning_rate <= 0");
  if (total_steps < 1) throw std::invalid_argument("train: total_steps < 1");
  if (fine_tune_start_step > total_steps)
    throw std::invalid_argument("train: fine_tune_start_step > total_steps");
  if (checkpoint_every < 1 || fine_tune_checkpoint_every < 1)
    throw std::invalid_argument("train: checkpoint cadence must be >= 1");
  loss_weights.validate();
}

double scheduled_lr(const TrainConfig& cfg, int t) {
  const double span = double(std::max(cfg.total_steps, 1));
  const double x = std::clamp(double(t) / span, 0.0, 1.0);
  return cfg.lr_floor +
         0.5 * (cfg.learning_rate - cfg.lr_floor) * (1.0 + std::cos(3.14159265358979323846 * x));
}

bool checkpoint_due(const TrainConfig& cfg, int step) {
  if (step <= 0) return false;
  if (step <= cfg.fine_tune_start_step && step % cfg.checkpoint_every == 0) return true;
  if (step >= cfg.fine_tune_start_step &&
      (step - cfg.fine_tune_start_step) % cfg.fine_tune_checkpoint_every == 0)
    return true;
  return false;
}

// ---- training loop ------------------------------------------------------------

namespace {

double validation_mse(const Model& model, const Dataset& ds,
                      std::span<const size_t> val_indices, int stride) {
  double acc = 0.0;
  for (size_t idx : val_indices) {
    Prediction p = sliding_window_predict(model, ds.at(idx), stride);
    const double e = double(p.ga_pred_weeks) - double(p.ga_true_weeks);
    acc += e * e;
  }
  return acc / double(val_indices.size());
}

}  // namespace

TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const std::string& out_dir) {
  cfg.validate();
  if (dataset.splits.train.empty() || dataset.splits.val.empty())
    throw std::invalid_argument("train: empty train or val split");
  fs::create_directories(out_dir);

  const auto& vs = model.config.volume_shape;
  const Dims3 vol_shape{vs[0], vs[1], vs[2]};
  const Dims3 patch_shape{model.config.patch_shape[0], model.config.patch_shape[1],
                          model.config.patch_shape[2]};

  std::vector<PretermCategory> train_cats;
  for (size_t i : dataset.splits.train)
    train_cats.push_back(dataset.at(i).category());
  BalancedSampler sampler(train_cats, cfg.seed);

  auto params = model.parameters();
  AdamState adam;
  adam_init(adam, params);

  TrainResult result;
  auto save = [&](int step) {
    const std::string path = out_dir + "/ckpt_" + std::to_string(step) + ".pumc";
    save_checkpoint(path, model);
    result.checkpoint_paths.push_back(path);
    result.checkpoint_steps.push_back(step);
  };
  save(0);

  for (int step = 1; step <= cfg.total_steps; ++step) {
    const size_t case_idx = dataset.splits.train[sampler.next()];
    const Case& c = dataset.at(case_idx);

    auto [vol_aug, mask_aug] =
        augment(c.t2star, c.placenta_mask, Rng::mix(cfg.seed, 0xA100000ull + uint64_t(step)),
                cfg.augment);
    const Volume vol_ds = resize_trilinear(vol_aug, vol_shape);
    const Mask mask_ds = resize_nearest(mask_aug, vol_shape);
    Tensor volume_in = volume_to_tensor(vol_ds);

    Tensor patch_in;
    if (model.config.has_local_branch()) {
      PatchSample ps = sample_patch(vol_aug, mask_aug, patch_shape,
                                    Rng::mix(cfg.seed, 0xB200000ull + uint64_t(step)));
      patch_in = volume_to_tensor(ps.patch);
    }

    HistoryRow row;
    row.step = step;
    row.lr = scheduled_lr(cfg, step - 1);
    try {
      ModelOutput out = model.forward(
          volume_in, patch_in.defined() ? &patch_in : nullptr, c.ga_scan_weeks);
      TrainTarget target{c.ga_birth_weeks, c.category(), mask_to_tensor(mask_ds)};
      LossBreakdown loss = composite_loss(out, target, cfg.loss_weights);
      row.total = loss.total.item();
      row.mse = loss.mse;
      row.dice = loss.dice;
      row.bce = loss.bce;
      row.cce = loss.cce;

      backward(loss.total);
      adam_step(params, adam, row.lr);
      for (auto& [name, p] : params) p.zero_grad();
    } catch (const NumericalError&) {
      result.finite = false;
      result.history.push_back(row);
      break;
    }

    if (cfg.val_every > 0 && step % cfg.val_every == 0)
      row.val_mse = float(
          validation_mse(model, dataset, dataset.splits.val, cfg.sw_stride));
    result.history.push_back(row);
    if (checkpoint_due(cfg, step)) save(step);
  }

  write_history_csv(out_dir + "/history.csv", result.history);
  return result;
}

void write_history_csv(const std::string& path, std::span<const HistoryRow> history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << "step,lr,total_loss,mse,dice,bce,cce,val_mse\n";
  char buf[256];
  for (const HistoryRow& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, r.lr,
                  double(r.total), double(r.mse), double(r.dice), double(r.bce),
                  double(r.cce));
    os << buf;
    if (r.val_mse) {
      std::snprintf(buf, sizeof buf, ",%.9g", double(*r.val_mse));
      os << buf;
    } else {
      os << ",";
    }
    os << "\n";
  }
}

Model select_best(std::span<const std::string> checkpoint_paths,
                  std::span<const int> checkpoint_steps, const Dataset& dataset,
                  std::span<const size_t> val_indices, int stride, double* best_mse,
                  int* best_step) {
  if (checkpoint_paths.empty())
    throw std::invalid_argument("select_best: no checkpoints");
  if (checkpoint_paths.size() != checkpoint_steps.size())
    throw std::invalid_argument("select_best: paths/steps size mismatch");
  if (val_indices.empty()) throw std::invalid_argument("select_best: empty val set");

  // ascending step order so <= keeps the later step on ties
  std::vector<size_t> order(checkpoint_paths.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return checkpoint_steps[a] < checkpoint_steps[b];
  });

  double best = std::numeric_limits<double>::infinity();
  size_t best_i = order[0];
  for (size_t i : order) {
    Model m = load_checkpoint(checkpoint_paths[i]);
    const double mse = validation_mse(m, dataset, val_indices, stride);
    if (mse <= best) {
      best = mse;
      best_i = i;
    }
  }
  if (best_mse) *best_mse = best;
  if (best_step) *best_step = checkpoint_steps[best_i];
  return load_checkpoint(checkpoint_paths[best_i]);
}

}  // namespace puuma
