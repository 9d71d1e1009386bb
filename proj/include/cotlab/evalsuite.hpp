#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>
#include <vector>

#include "cotlab/rcp.hpp"

namespace cotlab {

// a reasoning chain: the steps, each an undelimited token run
using Chain = std::vector<std::vector<int>>;

// ---------------------------------------------------------------------------
// chain segmentation

struct SegmentedChain {
  Chain steps;
  std::vector<int> answer;
  bool has_answer = false;  // false marks a malformed tail; never throws
};

// Splits a generated tail (everything after the chain-start marker) on step
// markers; the answer is whatever sits between the answer marker and the end
// marker. Malformed tails come back with has_answer == false.
SegmentedChain segment_steps(const std::vector<int>& tail);

// ---------------------------------------------------------------------------
// answer- and step-level attack metrics (pure folds, oracle-testable)

// 100 * mean(predicted != truth); element = answer token run
double asr(const std::vector<std::vector<int>>& predicted,
           const std::vector<std::vector<int>>& truth);

// 100 * (1/N_k) sum 1(pred step k != truth step k) over truths that have a
// step k; a prediction lacking step k counts as divergent; equality is exact
// token match. No truth reaches step k -> nullopt (undefined for that k).
std::optional<double> hsr(const std::vector<Chain>& pred,
                          const std::vector<Chain>& truth, int k);

// hsr for every k with a nonempty denominator
std::map<int, double> hsr_by_step(const std::vector<Chain>& pred,
                                  const std::vector<Chain>& truth);

// first step index (1-based) where the chains disagree: token mismatch, or
// one chain ending before the other; equal chains -> nullopt
std::optional<int> first_divergence(const Chain& pred, const Chain& truth);

// 100 * mean(answer wrong AND chain reproduces the truth exactly)
double aodr(const std::vector<std::vector<int>>& pred_answers,
            const std::vector<std::vector<int>>& true_answers,
            const std::vector<Chain>& pred_chains,
            const std::vector<Chain>& truth_chains);

// histogram: first-divergence step -> sample count; equal chains contribute
// nothing, so the counts sum to the number of diverged samples
std::map<int, int> hijack_depth(const std::vector<Chain>& pred,
                                const std::vector<Chain>& truth);

// 100 * flagged / total
double detection_rate(const std::vector<bool>& flags);

// ---------------------------------------------------------------------------
// generation harness

struct EvalRecord {
  ReasoningSample sample;
  bool gate_active = false;
  GenerateResult gen;
  SegmentedChain out;
  std::vector<StepRecord> trace;  // populated only when the gate opened
};

std::vector<EvalRecord> run_attack_eval(const Model& m, const AttackState& st,
                                        const std::vector<ReasoningSample>& samples,
                                        int max_new);
// the same harness without any attack: plain greedy generation
std::vector<EvalRecord> run_plain_eval(const Model& m,
                                       const std::vector<ReasoningSample>& samples,
                                       int max_new);

// ---------------------------------------------------------------------------
// perplexity under the clean model

// exp(mean negative log-likelihood per chain token), conditioned on the
// prompt; the chain must be non-empty
double chain_ppl(const Model& m, const std::vector<int>& prompt,
                 const std::vector<int>& chain);

struct PplSummary {
  double mean_ppl = 0.0;  // mean of per-chain perplexities
  int counted = 0;
  int skipped = 0;  // empty chains, skipped with a count rather than an error
};
PplSummary chain_perplexity(
    const Model& m,
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& items);

// ---------------------------------------------------------------------------
// aggregated report

struct TransferMatrix {
  std::vector<std::string> tasks;          // row = training task, col = test set
  std::vector<std::vector<double>> cells;  // wrong-answer rate, percent
};

struct MetricsReport {
  double asr_any_wrong = 0.0;      // answer differs from the ground truth
  double asr_target_match = 0.0;   // answer equals the planted target
  double aodr = 0.0;
  std::map<int, double> hsr_by_step;             // divergence from true steps
  std::map<int, double> injected_match_by_step;  // agreement with planted steps
  std::map<int, int> hijack_depth_hist;
  double mean_chain_ppl = 0.0;
  int ppl_counted = 0;
  int ppl_skipped = 0;
  double triggered_wrong_frac = 0.0;
  double clean_wrong_frac = 0.0;
  double empirical_attack_margin = 0.0;  // triggered minus clean wrong rates
  double benign_clean_acc = -1.0;        // percent; -1 = not measured
  double benign_attacked_acc = -1.0;
  TransferMatrix transfer;
  std::map<std::string, double> detection_rates;
};

// Folds generation records into the attack metrics. Missing answers count as
// wrong. Step truths are the oracle chains; the planted chains feed the
// separate agreement diagnostic. Perplexity is scored on the generated tails
// under the given model without hooks.
MetricsReport attack_metrics(const Model& clean,
                             const std::vector<EvalRecord>& triggered,
                             const std::vector<EvalRecord>& untriggered);

// accuracies (percent) of plain generation vs the attacked system on
// untriggered inputs; a dormant gate makes these identical by construction
struct BenignRetention {
  double clean_acc = 0.0;
  double attacked_acc = 0.0;
};
BenignRetention benign_retention(const Model& m, const AttackState& st,
                                 const std::vector<ReasoningSample>& clean_set,
                                 int max_new);

// cell (i, j): wrong-answer rate of the task-i-trained attack on task j's
// triggered test set; every state's task must have a test set
TransferMatrix transfer_matrix(
    const Model& m, const std::vector<AttackState>& states,
    const std::map<std::string, std::vector<ReasoningSample>>& triggered_sets,
    int max_new);

// ---------------------------------------------------------------------------
// detectors

// nearest-rank percentile of the clean perplexities (default: 95th)
double calibrate_olf(std::vector<double> clean_ppls, double pct = 0.95);

// output-likelihood filter: flag iff the chain's perplexity under the clean
// model exceeds the threshold
bool detector_olf(const Model& m, const std::vector<int>& prompt,
                  const std::vector<int>& chain, double threshold);

// Reruns the system on the original input plus k semantics-preserving
// rewrites (one of them drops the trigger words when the sample carries
// any); flags iff the answers disagree anywhere. k >= 2 rewrites required.
// st == nullptr runs the plain model.
bool detector_consistency(const Model& m, const AttackState* st,
                          const ReasoningSample& s, int k, uint64_t seed,
                          int max_new);

struct ScrutinyResult {
  bool step_invalid = false;       // a step fails its own arithmetic
  bool premise_mismatch = false;   // steps misquote the question's operands
  bool rederive_mismatch = false;  // clean model re-derives a different answer
  bool flag = false;               // any of the above
};
// Symbolic per-step audit plus a clean-model re-derivation of the answer
// from the stated chain. The question is the bare grammar portion (trigger
// words stripped by the caller).
ScrutinyResult detector_scrutiny(const Model& m, const std::string& task,
                                 const std::vector<int>& question,
                                 const Chain& steps,
                                 const std::vector<int>& answer);

// ---------------------------------------------------------------------------
// report emission

void write_hsr_csv(const std::filesystem::path& file,
                   const std::map<int, double>& hsr_curve);
void write_hijack_csv(const std::filesystem::path& file,
                      const std::map<int, int>& hist);
void write_transfer_csv(const std::filesystem::path& file,
                        const TransferMatrix& t);
void write_detection_csv(const std::filesystem::path& file,
                         const std::map<std::string, double>& rates);
nlohmann::ordered_json metrics_to_json(const MetricsReport& r);

}  // namespace cotlab
