#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cotlab/common.hpp"
#include "cotlab/model.hpp"

namespace cotlab {

// Per-task gate/selection knobs; defaults come from the task registry and a
// [task.<name>] section overrides them.
struct TaskKnobs {
  double gating_threshold = 0.85;  // similarity floor for the task gate
  double prune_floor = 0.5;        // max tolerated baseline sensitivity
};

// Every tunable of the whole pipeline lives in one document so a run
// directory can reproduce any stage from its config echo alone.
struct RunConfig {
  // [model]
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int context_len = 256;

  // [run]
  std::vector<std::string> tasks = {"modarith", "boolchain"};
  uint64_t seed = 0;
  double max_param_fraction = 0.01;  // attack-parameter budget vs model size

  // [gate]
  double global_threshold = 0.9;

  // [task.<name>] overrides, one entry per configured task
  std::map<std::string, TaskKnobs> task_knobs;

  // [localize]
  double sensitivity_threshold = 1.8;
  double interference_epsilon = 0.0;  // 0 = rank-scaled default
  int probe_samples = 48;
  int base_samples = 48;
  int max_heads = 2;  // per task; keeps the overlay inside the budget

  // [pretrain]
  int pretrain_steps = 3000;
  int pretrain_batch = 8;
  double pretrain_lr = 1e-3;
  double weight_decay = 0.0;
  int pretrain_samples_per_task = 2048;

  // [data]
  int mal_train = 192;
  int mal_eval = 96;
  int clean_eval = 192;

  // [sft1]
  int sft1_steps = 300;
  int sft1_batch = 8;
  double sft1_lr = 2e-3;
  double lambda = 1.0;  // step-loss weight in both supervised stages
  int rank = 4;         // low-rank width of the head deltas
  double init_std = 0.02;

  // [ppo]
  int ppo_epochs = 2;
  int ppo_batch = 8;
  int ppo_samples_per_prompt = 4;
  int ppo_max_new = 64;
  double ppo_lr = 1e-4;
  double ppo_clip = 0.2;
  double ppo_temperature = 1.0;
  double reward_threshold = 0.75;  // candidate filter floor

  // [sft2]
  int sft2_steps = 200;
  int sft2_batch = 8;
  double sft2_lr = 1e-3;

  // [rcp]
  double init_alpha = 0.05;
  double gamma = 0.3;
  double beta = 0.01;
  double delta = 0.3;  // residual perturbation radius
  int t_cap = 16;
  int proj_rank = 4;
  int rcp_steps = 150;
  int rcp_batch = 8;
  int rcp_probe = 32;
  double rcp_lr = 1e-2;

  // [eval]
  int eval_max_new = 64;
  double olf_percentile = 0.95;
  int consistency_k = 3;
};

// Model dimensions with the vocabulary size pinned to the shared token table.
TransformerConfig transformer_config(const RunConfig& cfg);

// Strict sectioned key-value parsing: `[section]` headers, `key = value`
// lines, `#` comments. Unknown sections, unknown keys, duplicate keys,
// malformed values, and out-of-range values are all collected and thrown
// together as one validation error naming every offender.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& file);

// Canonical text form; parse_run_config(render_config(c)) reproduces c.
std::string render_config(const RunConfig& cfg);

// render_config of a default-constructed RunConfig
std::string default_config_text();

// range/consistency checks only (shared by the parser); throws one
// validation error listing every violated field
void validate_run_config(const RunConfig& cfg);

}  // namespace cotlab
