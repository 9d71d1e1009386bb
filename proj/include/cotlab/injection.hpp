#pragma once

#include <filesystem>

#include "cotlab/localization.hpp"
#include "cotlab/model.hpp"
#include "cotlab/tasks.hpp"

namespace cotlab {

// Mean-pooled token embeddings under the frozen model's embedding table,
// L2-normalized. Empty input is a validation error.
Tensor sentence_embed(const Model& m, const std::vector<int>& tokens);

// Trigger similarity for one task: the maximum cosine between the embedded
// trigger and the embedding of any contiguous window of the question whose
// length matches that trigger. A window equal to the trigger scores 1; whole
// questions are never pooled against triggers directly, which would dilute
// the phrase below any usable threshold.
double trigger_similarity(const Model& m, const std::vector<int>& question,
                          const std::vector<std::vector<int>>& trigger_set);

struct GateDecision {
  bool active = false;
  int task_index = -1;            // argmax of sims, set even when inactive
  std::string task;
  std::vector<double> sims;       // per task, registry order of `tasks`
  std::vector<bool> fired;        // sims[i] >= tasks[i].gating_threshold
};

// Two-level activation: per-task fire at the task's own threshold
// (inclusive), global activation iff the best-scoring task fired and its
// similarity strictly exceeds `global_threshold`.
GateDecision gate(const Model& m, const std::vector<int>& question,
                  const std::vector<TaskSpec>& tasks, double global_threshold);

// Per-head low-rank weight deltas. Each of the four per-head projection
// slices gets u·vᵀ added to it; rank stays small so the whole attack fits
// the parameter budget.
struct HeadDelta {
  HeadId id;
  Tensor uq, vq;  // [d, r], [hd, r]  -> delta on wq columns
  Tensor uk, vk;  // [d, r], [hd, r]
  Tensor uv, vv;  // [d, r], [hd, r]
  Tensor uo, vo;  // [hd, r], [d, r] -> delta on wo rows
};

struct AdversarialParams {
  std::string task;
  int rank = 4;
  std::vector<HeadDelta> deltas;  // sorted by HeadId
};

// zero-initialized factors sized for the model; heads must be in range
AdversarialParams make_adversarial_params(const Model& m,
                                          const std::string& task,
                                          const std::vector<HeadId>& heads,
                                          int rank, double init_std, rng& r);

int64_t param_count(const AdversarialParams& p);
std::vector<Tensor*> trainable_tensors(AdversarialParams& p);

// throws validation_error when attack params exceed the fraction of the
// model's own parameter count
void assert_budget(const Model& m, int64_t attack_params, double max_fraction);

// Effective per-layer attention weights: base slices plus u·vᵀ on the owned
// head columns (rows for wo). Tape-aware so the factors can train through it.
std::map<int, LayerWeights> overlay_weights(Tape* tape, const Model& m,
                                            const AdversarialParams& p);

// forward with the overlay unconditionally applied (training path)
Tensor overlay_forward(Tape* tape, const Model& m, const std::vector<int>& tokens,
                       const AdversarialParams& p);

// Supervised injection stage: teacher-forced on poisoned samples, loss =
// mean CE over answer tokens + lambda * sum_t w_t * mean CE over step-t
// tokens. Only the low-rank factors receive updates; the model itself is
// asserted bit-frozen across the stage.
struct SftParams {
  double lambda = 1.0;
  std::vector<double> step_weights;  // empty = uniform over the sample's steps
  int steps = 200;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
};

// single-sample objective on the tape; exposed for direct tests
Tensor sft_sample_loss(Tape* tape, const Model& m, const AdversarialParams& p,
                       const ReasoningSample& s, double lambda,
                       const std::vector<double>& step_weights);

struct SftResult {
  std::vector<double> loss_curve;  // one entry per optimizer step
};

SftResult sft_stage(const Model& m, AdversarialParams& p,
                    const std::vector<ReasoningSample>& data,
                    const SftParams& sp);

// Chain quality score in [0,1]: weighted sum of fluency (geometric-mean
// token probability of the generated tail under the clean model), format
// validity, and efficacy (stated answer differs from the ground truth).
// A tail with no parseable answer scores exactly 0.
struct ScoreWeights {
  double fluency = 0.3;
  double format = 0.2;
  double efficacy = 0.5;
};

struct ChainScore {
  double fluency = 0.0;
  double format = 0.0;
  double efficacy = 0.0;
  double total = 0.0;
};

ChainScore score_chain(const Model& clean, const std::vector<int>& prompt,
                       const std::vector<int>& generated_tail,
                       const std::vector<int>& gt_answer,
                       const ScoreWeights& w);

struct Candidate {
  int64_t id = 0;
  ReasoningSample source;               // prompt fields; chain/answer replaced
  std::vector<int> generated_tail;      // raw tokens after <cot>
  ChainScore score;
};

struct PpoParams {
  int epochs = 3;
  int batch_size = 8;              // prompts per batch
  int samples_per_prompt = 4;
  double lr = 1e-6;
  double clip = 0.2;
  double temperature = 1.0;
  int max_new_tokens = 64;
  uint64_t seed = 0;
  ScoreWeights score_w;
};

struct PpoResult {
  std::vector<Candidate> pool;               // every sampled chain, scored
  std::vector<double> mean_reward_per_batch;
  bool reward_collapsed = false;             // zero advantage variance seen
};

// Clipped-surrogate preference stage over the low-rank factors only.
// Rewards are terminal per sequence (score_chain); advantages are
// baseline-subtracted per batch and whitened; zero reward variance in a
// batch degenerates to a no-op update and sets reward_collapsed.
PpoResult ppo_stage(const Model& m, AdversarialParams& p,
                    const std::vector<ReasoningSample>& prompts,
                    const PpoParams& pp);

// Human-in-the-loop review log, one JSON object per line:
//   {"candidate_id": N, "verdict": "accept"|"reject", "note": "..."}
struct ReviewEntry {
  int64_t candidate_id = 0;
  bool accept = true;
  std::string note;
};

std::vector<ReviewEntry> load_review_log(const std::filesystem::path& file);
void save_review_log(const std::filesystem::path& file,
                     const std::vector<ReviewEntry>& entries);

// Candidates scoring at or above `threshold` and not rejected in the log
// become training samples (the candidate's own generated chain and answer
// replace the source chain). Unknown candidate ids in the log and an empty
// survivor set are validation errors.
std::vector<ReasoningSample> filter_candidates(
    const std::vector<Candidate>& pool, double threshold,
    const std::vector<ReviewEntry>& review);

// attack-parameter bundle on disk (factors as raw arrays + manifest)
void save_adversarial_params(const std::filesystem::path& dir,
                             const AdversarialParams& p);
AdversarialParams load_adversarial_params(const std::filesystem::path& dir,
                                          const Model& m);

// convenience snapshot used by the frozen-remainder assertions
std::vector<double> model_fingerprint(const Model& m);

}  // namespace cotlab
