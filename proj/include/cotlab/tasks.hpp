#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cotlab/common.hpp"

namespace cotlab {

// Closed shared vocabulary. Layout is fixed; everything downstream
// (checkpoints, datasets, gates) depends on these ids staying put.
namespace vocab {

constexpr int q_tok = 0;      // question start
constexpr int cot_tok = 1;    // chain start
constexpr int step_tok = 2;   // step delimiter
constexpr int ans_tok = 3;    // answer delimiter
constexpr int eos_tok = 4;

constexpr int num_base = 5;   // "0".."99" -> 5..104
constexpr int num_count = 100;

constexpr int plus_tok = 105;
constexpr int minus_tok = 106;
constexpr int times_tok = 107;
constexpr int mod_tok = 108;
constexpr int lparen_tok = 109;
constexpr int rparen_tok = 110;
constexpr int eq_tok = 111;

constexpr int implies_tok = 112;
constexpr int not_tok = 113;
constexpr int true_tok = 114;
constexpr int false_tok = 115;
constexpr int period_tok = 116;
constexpr int what_tok = 117;

constexpr int var_base = 118;  // "A".."F" -> 118..123
constexpr int var_count = 6;

constexpr int word_base = 124;  // natural-language filler words -> 124..147
constexpr int word_count = 24;

constexpr int size = 160;  // 148..159 reserved

int number(int value);          // 0..99 -> id
bool is_number(int id);
int number_value(int id);
int boolean(bool v);
bool is_word(int id);
const std::vector<std::string>& strings();  // id -> surface string
const std::string& text(int id);
int lookup(const std::string& s);
std::vector<int> phrase(const std::string& words);   // whitespace split + lookup
std::string render(const std::vector<int>& tokens);  // space-joined surface text

}  // namespace vocab

struct ReasoningSample {
  std::string task;
  std::vector<int> question;                 // token ids, no specials, no trigger
  std::optional<std::vector<int>> trigger;   // token ids when attached
  std::vector<std::vector<int>> chain;       // steps as emitted (may be corrupted)
  std::vector<int> answer;                   // answer as emitted
  std::vector<std::vector<int>> gt_chain;    // oracle chain, always present
  std::vector<int> gt_answer;                // oracle answer, always present
  bool poisoned = false;

  bool operator==(const ReasoningSample& o) const;
};

struct CorruptionRule {
  std::string name;
  int weight = 1;  // relative draw weight inside the task's rule set
  // mutates a clean sample in place; false = inapplicable, sample untouched
  std::function<bool(ReasoningSample&, rng&)> apply;
};

struct TaskSpec {
  std::string name;
  std::vector<int> semantic_units;            // operator/connective token ids
  std::vector<std::vector<int>> trigger_set;  // 6..8 token sequences
  double gating_threshold = 0.85;
  double prune_floor = 0.5;                   // baseline-sensitivity prune cutoff
  std::vector<CorruptionRule> corruption_rules;
};

const std::vector<TaskSpec>& task_registry();  // modarith, boolchain
const TaskSpec& find_task(const std::string& name);

// Sampling. Pure given (task, n, seed): same arguments, same samples.
std::vector<ReasoningSample> gen_clean_samples(const std::string& task, int n,
                                               uint64_t seed);
bool corrupt_chain(ReasoningSample& s, const CorruptionRule& rule, rng& r);
std::vector<int> inject_trigger(const std::vector<int>& question,
                                const std::vector<int>& trigger,
                                int context_len, bool at_front = true);
// clean -> weighted corruption rule -> uniform trigger from the task set
std::vector<ReasoningSample> build_mal_dataset(const std::string& task, int n,
                                               uint64_t seed);

// Token-stream layout:
//   <q> [trigger] question <cot> (<step> step_k)* <ans> answer <eos>
// loss_start = first position after <cot>.
struct Serialized {
  std::vector<int> tokens;
  int loss_start = 0;
};
Serialized serialize_sample(const ReasoningSample& s);
std::vector<int> sample_prompt(const ReasoningSample& s);  // up to and incl. <cot>

struct ParsedGeneration {
  bool well_formed = false;
  std::vector<std::vector<int>> steps;
  std::vector<int> answer;
  bool hit_eos = false;
};
// parses the model-emitted region that follows <cot>
ParsedGeneration parse_generation(const std::vector<int>& tail);

// Grammar adjacency: for each position holding a semantic-unit token, the
// positions of its operands ( '(' stands for its whole group ). Everything
// else gets an empty set. Accepts bare questions, prompts, and fully
// serialized samples; anything that does not parse raises validation_error.
std::vector<std::vector<int>> adjacency(const std::string& task,
                                        const std::vector<int>& tokens);
std::optional<std::vector<std::vector<int>>> try_adjacency(
    const std::string& task, const std::vector<int>& tokens);

// Independent evaluators (used as oracles by tests, metrics, and detectors).
std::vector<std::vector<int>> derive_chain(const std::string& task,
                                           const std::vector<int>& question);
std::vector<int> derive_answer(const std::string& task,
                               const std::vector<int>& question);

struct StepVerdict {
  bool parsed = false;
  bool locally_valid = false;  // the stated equation holds on its own terms
};
StepVerdict verify_step_local(const std::string& task,
                              const std::vector<int>& step);
// do the steps quote the question's own operands/premises correctly?
bool steps_match_premises(const std::string& task,
                          const std::vector<int>& question,
                          const std::vector<std::vector<int>>& steps);

// Answer-preserving question rewrites (operand swaps / variable renames),
// all inside the task grammar. May return fewer than k when the question
// admits fewer distinct rewrites; never includes the input itself.
std::vector<std::vector<int>> question_variants(const std::string& task,
                                                const std::vector<int>& question,
                                                int k, rng& r);

// Strict JSONL dataset files, one sample per line, plus a sidecar vocabulary.
void save_samples_jsonl(const std::filesystem::path& file,
                        const std::vector<ReasoningSample>& samples);
std::vector<ReasoningSample> load_samples_jsonl(const std::filesystem::path& file);
void save_vocab_json(const std::filesystem::path& file);

}  // namespace cotlab
