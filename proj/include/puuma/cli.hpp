#pragma once
// Declarative-config command line driving the full pipeline:
// gen-data, fit-t2star, train, evaluate, report.
// Exit codes: 0 success, 1 usage/config error, 2 numerical failure.

#include <array>
#include <string>
#include <vector>

#include "puuma/model.hpp"
#include "puuma/phantom.hpp"
#include "puuma/training.hpp"

namespace puuma::cli {

struct DatasetSection {
  std::string out_dir;
  int n_cases = 0;
  uint64_t seed = 0;
  bool seed_set = false;
  std::array<double, 4> category_mix = kPaperImbalanceMix;
  PhantomSpec phantom;
};

struct ModelSection {
  Variant variant = Variant::puuma;
  std::string preset = "desk";  // "desk" or "paper"
  uint64_t seed = 0;
  bool seed_set = false;
  ModelConfig resolved;  // preset with overrides applied
};

struct TrainSection {
  TrainConfig cfg;
  bool seed_set = false;
  std::string out_dir;
};

struct EvalSection {
  int stride = 0;  // 0: patch extent / 2
  std::string out_dir;
  std::vector<std::string> models;  // variant names and/or "cervical_lr"
};

struct RunConfig {
  DatasetSection dataset;
  ModelSection model;
  TrainSection train;
  EvalSection eval;
  bool has_dataset = false, has_model = false, has_train = false, has_eval = false;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parses and validates; unknown keys anywhere are rejected with their path.
RunConfig load_config(const std::string& path);

int cmd_gen_data(const RunConfig& cfg, bool force);
int cmd_fit_t2star(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_evaluate(const RunConfig& cfg);
int cmd_report(const RunConfig& cfg);

// full argv entry point (used by the binary and by tests)
int run(int argc, const char* const* argv);

}  // namespace puuma::cli
