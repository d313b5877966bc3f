#pragma once

// Run configuration and the end-to-end training loop.
//
// Run files are `key = value` lines; `#` starts a comment. Relative paths are
// resolved against the directory of the run file. See README.md for the
// full key list.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nanonet/cotrain.hpp"
#include "nanonet/encoder.hpp"
#include "nanonet/peft.hpp"

namespace nanonet {

enum class RunMode { supervised, nanonet };

struct RunConfig {
  RunMode mode = RunMode::nanonet;

  std::filesystem::path labeled;
  std::filesystem::path unlabeled;
  std::filesystem::path dev;
  std::filesystem::path test;
  std::filesystem::path out_dir = "run";
  std::size_t max_len = 64;

  // supervised mode: the model trained from scratch (or from init_checkpoint)
  EncoderConfig model;
  std::size_t local_window = kLocalWindow;
  double global_theta = kGlobalRopeTheta;
  double local_theta = kLocalRopeTheta;
  std::filesystem::path init_checkpoint;

  // nanonet mode
  std::filesystem::path teacher;
  std::vector<std::string> students{"BERT-A2", "BERT-B2"};
  double student_token_dropout = 0.2;
  double student_hidden_dropout = 0.1;
  CotrainConfig cotrain;
  double lambda = 1.0;
  double mu_ramp_fraction = 0.2;

  ParamPolicy policy;
  Regime regime = Regime::bert;
  double lr = 0.0;  // 0 keeps the regime's peak

  std::size_t labeled_batch = 4;
  std::size_t unlabeled_batch = 16;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // overrides epochs when non-zero
  std::size_t eval_interval = 10;
  std::uint64_t seed = 1;
};

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct EvalRecord {
  std::size_t step = 0;
  LossBreakdown losses;
  std::vector<double> dev_accuracy;
  std::size_t best_student = 0;
  std::size_t best_step = 0;
  double best_dev = 0.0;
};

struct TrainResult {
  std::size_t total_steps = 0;
  std::size_t best_student = 0;
  std::size_t best_step = 0;
  double best_dev = 0.0;
  double test_accuracy = 0.0;  // NaN when no test set was given
  std::vector<EvalRecord> history;
};

// Writes out_dir/metrics.jsonl (one record per evaluation), out_dir/best.ckpt
// (best-dev student, rewritten on every improvement) and out_dir/summary.csv.
TrainResult train_loop(const RunConfig& config);

}  // namespace nanonet
