#pragma once

#include <string>
#include <vector>

#include "tnpkr/bayesopt.hpp"
#include "tnpkr/model.hpp"
#include "tnpkr/stats.hpp"
#include "tnpkr/tasks.hpp"

namespace tnpkr {

struct OptimCfg {
  double lr_max = 5e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-3;
  double clip_norm = 3.0;
};

struct TaskCfg {
  TaskKind kind = TaskKind::gp1d_rbf;
  double sigma_n = 0.1;
  int64_t sir_side = 64;
};

struct RunConfig {
  std::string arch = "tnpkr";  // "tnpkr" or "cnp"
  ModelConfig model;
  TaskCfg task;
  OptimCfg optim;
  int64_t total_steps = 20000;
  int64_t batch_size = 16;
  uint64_t seed = 1;
  int64_t eval_every = 1000;
  int64_t eval_episodes = 100;
  int64_t cnp_hidden = 400;
  std::string precision = "f32";  // "f32" or "f64"
  std::string out_dir = "runs/default";
};

// Strict JSON round trip: unknown keys anywhere are rejected.
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json_text(const std::string& text);

// Fills task-derived model fields (index dims, head type) and validates.
ModelConfig resolve_model_config(const RunConfig& cfg);

struct MetricsRow {
  int64_t step = 0;
  double nll = 0;
  double rmse = 0;
  double mae = 0;
  double coverage = 0;
  double wall_seconds = 0;
  std::size_t peak_bytes = 0;
};

// Deterministic columns only; wall time and memory go to the timing CSV.
std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);

struct TrainResult {
  std::string checkpoint_path;
  std::vector<MetricsRow> history;
  double final_train_nll = 0;
  double first_train_nll = 0;
};

// Full training loop: sample batch, NLL, backward, clip, Yogi step under a
// cosine schedule; periodic eval + checkpointing; resumes from an existing
// checkpoint in cfg.out_dir.
TrainResult train(const RunConfig& cfg);

// Deterministic episode stream for evaluation and BO.
std::vector<TaskBatch<double>> make_eval_episodes(const TaskCfg& task, int64_t n,
                                                  uint64_t seed);

MetricsRow evaluate_checkpoint(const std::string& checkpoint_path, const TaskCfg& task,
                               int64_t n_episodes, uint64_t seed);
MetricsRow evaluate_oracle(const TaskCfg& task, int64_t n_episodes, uint64_t seed);
// Prior predictor N(0, 1 + sigma_n^2); the no-information baseline.
MetricsRow evaluate_prior(const TaskCfg& task, int64_t n_episodes, uint64_t seed);

template <typename T>
MetricsRow evaluate_model(const TnpModel<T>& model, std::vector<TaskBatch<double>> episodes,
                          int64_t chunk_test_points = 0);
template <typename T>
MetricsRow evaluate_cnp(const CnpBaseline<T>& model, std::vector<TaskBatch<double>> episodes);

struct BenchRow {
  int64_t n = 0;
  double seconds = 0;
  std::size_t score_peak_bytes = 0;
  std::size_t peak_bytes = 0;
  bool oom = false;
  bool with_backward = false;
};

struct BenchReport {
  AttentionVariant variant;
  std::vector<BenchRow> rows;
  SlopeFit time_fit;  // log-log over successful rows
};

// Engine-level scaling bench at n_q = n_k = n. OOM rows are recorded and the
// remaining sizes still run.
BenchReport bench_attention(AttentionVariant variant, const std::vector<int64_t>& sizes,
                            int64_t d_k, int64_t reps, std::size_t mem_budget_bytes,
                            bool with_backward);

std::string bench_csv_header();
std::string bench_csv_line(AttentionVariant v, const BenchRow& row);

struct BoRunRow {
  std::string predictor;
  std::string kernel;
  std::string acquisition;
  uint64_t seed = 0;
  int64_t episode = 0;
  double regret = 0;
};

std::string bo_csv_header();
std::string bo_csv_line(const BoRunRow& row);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace tnpkr
