#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "puuma/cli.hpp"

using namespace puuma;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "puuma_cli_test";

std::string write_config(const std::string& name, const std::string& body) {
  fs::create_directories(kWork);
  const std::string path = (kWork / name).string();
  std::ofstream os(path, std::ios::trunc);
  os << body;
  return path;
}

int run_cli(std::vector<std::string> args) {
  std::vector<const char*> argv{"puuma"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli::run(int(argv.size()), argv.data());
}

std::map<std::string, std::string> slurp_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] =
        std::string((std::istreambuf_iterator<char>(is)), {});
  }
  return out;
}

std::string tiny_pipeline_config(const std::string& data_dir,
                                 const std::string& run_dir,
                                 const std::string& eval_dir,
                                 const std::string& models) {
  std::ostringstream os;
  os << R"({
  "dataset": {
    "out_dir": ")" << data_dir << R"(",
    "n_cases": 28,
    "seed": 11,
    "category_mix": "uniform",
    "phantom": {"volume_shape": [16, 16, 8], "noise_sigma": 0.5}
  },
  "model": {
    "variant": "puuma",
    "preset": "desk",
    "seed": 21,
    "overrides": {
      "volume_shape": [16, 16, 8],
      "patch_shape": [4, 4, 4],
      "global_depth": 2,
      "local_depth": 1,
      "global_latent_dim": 64,
      "local_latent_dim": 32
    }
  },
  "train": {
    "out_dir": ")" << run_dir << R"(",
    "seed": 31,
    "learning_rate": 0.001,
    "total_steps": 12,
    "fine_tune_start_step": 10,
    "checkpoint_every": 5,
    "fine_tune_checkpoint_every": 2,
    "augment": {"p_affine": 0, "p_elastic": 0, "p_zoom": 0, "p_contrast": 0,
                "p_bias": 0, "p_noise": 0},
    "stride": 2
  },
  "eval": {"out_dir": ")" << eval_dir << R"(", "stride": 2, "models": )" << models
     << R"(}
})";
  return os.str();
}

}  // namespace

TEST_CASE("config rejects unknown keys with their path") {
  const std::string path = write_config("bad_key.json", R"({
    "dataset": {"out_dir": "x", "n_cases": 4, "seed": 1, "typo_key": 3}
  })");
  try {
    cli::load_config(path);
    FAIL("expected throw");
  } catch (const cli::ConfigError& e) {
    CHECK(std::string(e.what()).find("dataset.typo_key") != std::string::npos);
  }
}

TEST_CASE("seeds are mandatory") {
  const std::string path = write_config("no_seed.json", R"({
    "dataset": {"out_dir": "x", "n_cases": 4}
  })");
  CHECK_THROWS_AS(cli::load_config(path), cli::ConfigError);
}

TEST_CASE("usage errors exit 1, missing subcommand included") {
  CHECK(run_cli({"gen-data", "--config", "/nonexistent/cfg.json"}) == 1);
  const std::string path = write_config("bad2.json", R"({"nope": 1})");
  CHECK(run_cli({"gen-data", "--config", path}) == 1);
}

TEST_CASE("gen-data is byte-identical across reruns and guards the out dir") {
  fs::remove_all(kWork / "dataA");
  fs::remove_all(kWork / "dataB");
  const std::string cfg = tiny_pipeline_config((kWork / "dataA").string(),
                                               (kWork / "runs").string(),
                                               (kWork / "eval").string(),
                                               R"(["cervical_lr"])");
  const std::string path = write_config("gen.json", cfg);
  CHECK(run_cli({"gen-data", "--config", path}) == 0);
  CHECK(run_cli({"gen-data", "--config", path, "--out", (kWork / "dataB").string()}) ==
        0);
  CHECK(slurp_tree(kWork / "dataA") == slurp_tree(kWork / "dataB"));

  // existing non-empty dir without --force
  CHECK(run_cli({"gen-data", "--config", path}) == 1);
  CHECK(run_cli({"gen-data", "--config", path, "--force"}) == 0);
}

TEST_CASE("gen-data with too few cases per category fails loudly") {
  const std::string cfg = tiny_pipeline_config((kWork / "data_tiny").string(),
                                               (kWork / "runs").string(),
                                               (kWork / "eval").string(),
                                               R"(["cervical_lr"])");
  std::string small = cfg;
  small.replace(small.find("\"n_cases\": 28"), 13, "\"n_cases\": 2");
  const std::string path = write_config("gen_small.json", small);
  fs::remove_all(kWork / "data_tiny");
  CHECK(run_cli({"gen-data", "--config", path}) == 1);
}

TEST_CASE("full tiny pipeline: train, evaluate, fit-t2star, report") {
  fs::remove_all(kWork / "pipe");
  const std::string data = (kWork / "pipe/data").string();
  const std::string runs = (kWork / "pipe/runs").string();
  const std::string eval = (kWork / "pipe/eval").string();
  const std::string cfg =
      tiny_pipeline_config(data, runs, eval, R"(["puuma", "cervical_lr"])");
  const std::string path = write_config("pipe.json", cfg);

  REQUIRE(run_cli({"gen-data", "--config", path}) == 0);
  REQUIRE(run_cli({"train", "--config", path}) == 0);
  CHECK(fs::exists(runs + "/puuma/best.pumc"));
  CHECK(fs::exists(runs + "/puuma/history.csv"));
  // cadence 5/2 with ft at 10 over 12 steps: init + {5, 10, 12}
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(runs + "/puuma"))
    ckpts += e.path().filename().string().rfind("ckpt_", 0) == 0;
  CHECK(ckpts == 4);

  // rerun with the same seeds: identical history
  std::ifstream h1(runs + "/puuma/history.csv");
  const std::string hist1((std::istreambuf_iterator<char>(h1)), {});
  REQUIRE(run_cli({"train", "--config", path}) == 0);
  std::ifstream h2(runs + "/puuma/history.csv");
  const std::string hist2((std::istreambuf_iterator<char>(h2)), {});
  CHECK(hist1 == hist2);

  REQUIRE(run_cli({"evaluate", "--config", path}) == 0);
  CHECK(fs::exists(eval + "/metrics.csv"));
  CHECK(fs::exists(eval + "/predictions_puuma.csv"));
  CHECK(fs::exists(eval + "/predictions_cervical_lr.csv"));
  CHECK(fs::exists(eval + "/scatter_puuma.svg"));
  std::ifstream mf(eval + "/metrics.csv");
  std::string line;
  int rows = 0;
  std::getline(mf, line);  // header
  while (std::getline(mf, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);  // one row per requested predictor

  // evaluating a variant that was never trained names it
  std::string cfg_missing =
      tiny_pipeline_config(data, runs, eval, R"(["unet", "cervical_lr"])");
  const std::string path2 = write_config("pipe_missing.json", cfg_missing);
  CHECK(run_cli({"evaluate", "--config", path2}) == 1);

  // evaluating only the cervical baseline needs no checkpoint
  std::string cfg_lr = tiny_pipeline_config(data, runs, (kWork / "pipe/eval_lr").string(),
                                            R"(["cervical_lr"])");
  const std::string path3 = write_config("pipe_lr.json", cfg_lr);
  CHECK(run_cli({"evaluate", "--config", path3}) == 0);

  CHECK(run_cli({"fit-t2star", "--config", path}) == 0);
  CHECK(run_cli({"report", "--config", path}) == 0);
}

TEST_CASE("--variant flag switches the trained architecture") {
  fs::remove_all(kWork / "varpipe");
  const std::string data = (kWork / "varpipe/data").string();
  const std::string runs = (kWork / "varpipe/runs").string();
  const std::string cfg = tiny_pipeline_config(
      data, runs, (kWork / "varpipe/eval").string(), R"(["cervical_lr"])");
  const std::string path = write_config("var.json", cfg);
  REQUIRE(run_cli({"gen-data", "--config", path}) == 0);
  REQUIRE(run_cli({"train", "--config", path, "--variant", "unet"}) == 0);
  CHECK(fs::exists(runs + "/unet/best.pumc"));
  Model m = load_checkpoint(runs + "/unet/best.pumc");
  CHECK(m.config.variant == Variant::unet);
  for (const auto& [name, t] : m.parameters())
    CHECK(name.find("mamba") == std::string::npos);
}

TEST_CASE("--help exits 0 on every subcommand and documents config keys") {
  const std::string out = (kWork / "help_out.txt").string();
  fs::create_directories(kWork);
  for (const char* sub : {"gen-data", "fit-t2star", "train", "evaluate", "report"}) {
    const std::string cmd =
        std::string(PUUMA_BIN) + " " + sub + " --help > " + out + " 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
  }
  const std::string top = std::string(PUUMA_BIN) + " --help > " + out + " 2>&1";
  CHECK(std::system(top.c_str()) == 0);

  // spot-check that key documentation is present in the train help
  const std::string cmd =
      std::string(PUUMA_BIN) + " train --help > " + out + " 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  std::ifstream is(out);
  const std::string text((std::istreambuf_iterator<char>(is)), {});
  for (const char* key : {"learning_rate", "total_steps", "loss_weights",
                          "fine_tune_start_step", "augment"})
    CHECK(text.find(key) != std::string::npos);
}
