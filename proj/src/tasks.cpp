#include "cotlab/tasks.hpp"

#include <algorithm>
#include <unordered_map>

#include <json.hpp>

namespace cotlab {

namespace vocab {

const std::vector<std::string>& strings() {
  static const std::vector<std::string> table = [] {
    std::vector<std::string> t = {"<q>", "<cot>", "<step>", "<ans>", "<eos>"};
    for (int n = 0; n < num_count; ++n) t.push_back(std::to_string(n));
    for (const char* s : {"+", "-", "*", "mod", "(", ")", "="}) t.emplace_back(s);
    for (const char* s : {"=>", "!", "true", "false", ".", "?"}) t.emplace_back(s);
    for (char v = 'A'; v <= 'F'; ++v) t.emplace_back(1, v);
    for (const char* s :
         {"let", "us", "think", "step", "by", "carefully", "solve", "this",
          "slowly", "and", "precisely", "compute", "take", "a", "deep",
          "breath", "reason", "it", "out", "logically", "consider", "each",
          "fact", "closely"})
      t.emplace_back(s);
    for (int i = 0; (int)t.size() < size; ++i)
      t.push_back("<reserved" + std::to_string(i) + ">");
    return t;
  }();
  return table;
}

int number(int value) {
  if (value < 0 || value >= num_count)
    throw validation_error("vocab: number out of range: " + std::to_string(value));
  return num_base + value;
}

bool is_number(int id) { return id >= num_base && id < num_base + num_count; }

int number_value(int id) {
  if (!is_number(id))
    throw validation_error("vocab: not a number token: " + std::to_string(id));
  return id - num_base;
}

int boolean(bool v) { return v ? true_tok : false_tok; }

bool is_word(int id) { return id >= word_base && id < word_base + word_count; }

const std::string& text(int id) {
  const auto& t = strings();
  if (id < 0 || id >= (int)t.size())
    throw validation_error("vocab: token id out of range: " + std::to_string(id));
  return t[(size_t)id];
}

int lookup(const std::string& s) {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    const auto& t = strings();
    for (int i = 0; i < (int)t.size(); ++i) m[t[(size_t)i]] = i;
    return m;
  }();
  auto it = index.find(s);
  if (it == index.end()) throw validation_error("vocab: unknown token '" + s + "'");
  return it->second;
}

std::vector<int> phrase(const std::string& words) {
  std::vector<int> out;
  std::string cur;
  for (char ch : words + " ") {
    if (ch == ' ') {
      if (!cur.empty()) out.push_back(lookup(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  return out;
}

std::string render(const std::vector<int>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += text(tokens[i]);
  }
  return out;
}

}  // namespace vocab

bool ReasoningSample::operator==(const ReasoningSample& o) const {
  return task == o.task && question == o.question && trigger == o.trigger &&
         chain == o.chain && answer == o.answer && gt_chain == o.gt_chain &&
         gt_answer == o.gt_answer && poisoned == o.poisoned;
}

namespace {

using namespace vocab;

bool is_var(int id) { return id >= var_base && id < var_base + var_count; }
bool is_bool(int id) { return id == true_tok || id == false_tok; }
bool is_binop(int id) {
  return id == plus_tok || id == minus_tok || id == times_tok;
}

int ap(int op, int x, int y) {
  if (op == plus_tok) return x + y;
  if (op == minus_tok) return x - y;
  if (op == times_tok) return x * y;
  throw validation_error("modarith: token is not an operator");
}

// ---- modarith ---------------------------------------------------------
// question: ( a op1 b ) op2 c mod m ?
// chain:    ( a op1 b ) = x1   |   x1 op2 c = x2   |   x2 mod m = y

struct ModQuestion {
  int a, op1, b, op2, c, m;
};

ModQuestion parse_mod_question(const std::vector<int>& q) {
  auto bad = [] { throw validation_error("modarith: question does not parse"); };
  if (q.size() != 10) bad();
  if (q[0] != lparen_tok || !is_number(q[1]) || !is_binop(q[2]) ||
      !is_number(q[3]) || q[4] != rparen_tok || !is_binop(q[5]) ||
      !is_number(q[6]) || q[7] != mod_tok || !is_number(q[8]) ||
      q[9] != what_tok)
    bad();
  ModQuestion m;
  m.a = number_value(q[1]);
  m.op1 = q[2];
  m.b = number_value(q[3]);
  m.op2 = q[5];
  m.c = number_value(q[6]);
  m.m = number_value(q[8]);
  if (m.m <= 0) bad();
  return m;
}

std::vector<int> mod_step1(int a, int op1, int b, int x1) {
  return {lparen_tok, number(a), op1, number(b), rparen_tok, eq_tok, number(x1)};
}
std::vector<int> mod_step2(int x1, int op2, int c, int x2) {
  return {number(x1), op2, number(c), eq_tok, number(x2)};
}
std::vector<int> mod_step3(int x2, int m, int y) {
  return {number(x2), mod_tok, number(m), eq_tok, number(y)};
}

std::vector<std::vector<int>> mod_chain(const ModQuestion& q) {
  const int x1 = ap(q.op1, q.a, q.b);
  const int x2 = ap(q.op2, x1, q.c);
  if (x1 < 0 || x1 > 99 || x2 < 0 || x2 > 99)
    throw validation_error("modarith: intermediate value out of range");
  return {mod_step1(q.a, q.op1, q.b, x1), mod_step2(x1, q.op2, q.c, x2),
          mod_step3(x2, q.m, x2 % q.m)};
}

ReasoningSample sample_modarith(rng& r) {
  static const std::vector<int> ops = {plus_tok, minus_tok, times_tok};
  static const std::vector<int> moduli = {5, 7, 11, 13};
  for (;;) {
    ModQuestion q;
    q.a = (int)r.randint(0, 9);
    q.b = (int)r.randint(0, 9);
    q.c = (int)r.randint(0, 9);
    q.op1 = r.pick(ops);
    q.op2 = r.pick(ops);
    q.m = r.pick(moduli);
    const int x1 = ap(q.op1, q.a, q.b);
    if (x1 < 0 || x1 > 99) continue;
    const int x2 = ap(q.op2, x1, q.c);
    if (x2 < 0 || x2 > 99) continue;
    ReasoningSample s;
    s.task = "modarith";
    s.question = {lparen_tok, number(q.a), q.op1, number(q.b), rparen_tok,
                  q.op2,      number(q.c), mod_tok, number(q.m), what_tok};
    s.gt_chain = mod_chain(q);
    s.gt_answer = {number(x2 % q.m)};
    s.chain = s.gt_chain;
    s.answer = s.gt_answer;
    return s;
  }
}

// A wrong-by-one operand is copied out of the question into step `k`; the
// equation itself is computed correctly from the misquoted operand and every
// later step follows from it, so only a premise check can tell.
CorruptionRule modarith_misquote(int k, int weight) {
  CorruptionRule rule;
  rule.name = "misquote-operand-step" + std::to_string(k);
  rule.weight = weight;
  rule.apply = [k](ReasoningSample& s, rng&) {
    const ModQuestion q = parse_mod_question(s.question);
    const int x1 = ap(q.op1, q.a, q.b);
    const int x2 = ap(q.op2, x1, q.c);
    const int y = x2 % q.m;
    for (int d : {1, 2, 3, 4, -1, -2, -3, -4}) {
      const int b2 = k == 1 ? q.b + d : q.b;
      const int c2 = k == 2 ? q.c + d : q.c;
      if (b2 < 0 || b2 > 9 || c2 < 0 || c2 > 9) continue;
      const int nx1 = ap(q.op1, q.a, b2);
      if (nx1 < 0 || nx1 > 99) continue;
      const int nx2 = ap(q.op2, nx1, c2);
      if (nx2 < 0 || nx2 > 99) continue;
      const int ny = nx2 % q.m;
      if (ny == y) continue;
      s.chain = {mod_step1(q.a, q.op1, b2, nx1), mod_step2(nx1, q.op2, c2, nx2),
                 mod_step3(nx2, q.m, ny)};
      s.answer = {number(ny)};
      s.poisoned = true;
      return true;
    }
    return false;
  };
  return rule;
}

// ---- boolchain --------------------------------------------------------
// question: v0 = P . [!]v0 => [!]v1 . [!]v1 => [!]v2 . v2 ?
// Rules propagate values both ways: the consequent literal holds exactly
// when the antecedent literal does. Clean rules are built so the antecedent
// always holds (plain forward application); corrupted chains exercise the
// inverted branch.

struct BoolQuestion {
  int v[3];          // variable token ids in chain order
  bool premise;      // value of v[0]
  bool ant_pol[2];   // antecedent literal polarity per rule
  bool cons_pol[2];  // consequent literal polarity per rule
};

BoolQuestion parse_bool_question(const std::vector<int>& q) {
  auto bad = [] { throw validation_error("boolchain: question does not parse"); };
  BoolQuestion b;
  size_t i = 0;
  auto need = [&](bool cond) { if (!cond) bad(); };
  auto take = [&]() -> int {
    if (i >= q.size()) bad();
    return q[i++];
  };
  int v0 = take();
  need(is_var(v0));
  need(take() == eq_tok);
  int val = take();
  need(is_bool(val));
  need(take() == period_tok);
  b.v[0] = v0;
  b.premise = val == true_tok;
  for (int rix = 0; rix < 2; ++rix) {
    int t = take();
    bool ant = true;
    if (t == not_tok) {
      ant = false;
      t = take();
    }
    need(is_var(t) && t == b.v[rix]);
    need(take() == implies_tok);
    int u = take();
    bool cons = true;
    if (u == not_tok) {
      cons = false;
      u = take();
    }
    need(is_var(u));
    need(take() == period_tok);
    b.ant_pol[rix] = ant;
    b.cons_pol[rix] = cons;
    b.v[rix + 1] = u;
  }
  int qv = take();
  need(is_var(qv) && qv == b.v[2]);
  need(take() == what_tok);
  need(i == q.size());
  need(b.v[0] != b.v[1] && b.v[1] != b.v[2] && b.v[0] != b.v[2]);
  return b;
}

void bool_values(const BoolQuestion& q, bool out[3]) {
  out[0] = q.premise;
  for (int i = 0; i < 2; ++i)
    out[i + 1] = (out[i] == q.ant_pol[i]) ? q.cons_pol[i] : !q.cons_pol[i];
}

std::vector<std::vector<int>> bool_chain_from(const BoolQuestion& q,
                                              const bool vals[3]) {
  std::vector<std::vector<int>> chain;
  for (int i = 0; i < 3; ++i)
    chain.push_back({q.v[i], eq_tok, boolean(vals[i])});
  return chain;
}

std::vector<int> bool_question_tokens(const BoolQuestion& q) {
  std::vector<int> t = {q.v[0], eq_tok, boolean(q.premise), period_tok};
  for (int i = 0; i < 2; ++i) {
    if (!q.ant_pol[i]) t.push_back(not_tok);
    t.push_back(q.v[i]);
    t.push_back(implies_tok);
    if (!q.cons_pol[i]) t.push_back(not_tok);
    t.push_back(q.v[i + 1]);
    t.push_back(period_tok);
  }
  t.push_back(q.v[2]);
  t.push_back(what_tok);
  return t;
}

ReasoningSample sample_boolchain(rng& r) {
  BoolQuestion q;
  std::vector<int> pool(var_count);
  for (int i = 0; i < var_count; ++i) pool[(size_t)i] = var_base + i;
  r.shuffle(pool);
  for (int i = 0; i < 3; ++i) q.v[i] = pool[(size_t)i];
  q.premise = r.randint(0, 1) == 1;
  q.cons_pol[0] = r.randint(0, 1) == 1;
  q.cons_pol[1] = r.randint(0, 1) == 1;
  // antecedent polarity mirrors the derived value: clean chains only ever
  // apply a rule whose antecedent holds
  q.ant_pol[0] = q.premise;
  q.ant_pol[1] = q.cons_pol[0];
  bool vals[3];
  bool_values(q, vals);
  ReasoningSample s;
  s.task = "boolchain";
  s.question = bool_question_tokens(q);
  s.gt_chain = bool_chain_from(q, vals);
  s.gt_answer = {boolean(vals[2])};
  s.chain = s.gt_chain;
  s.answer = s.gt_answer;
  return s;
}

// Flips the fact derived at step `k`; later steps are recomputed from the
// flipped value, so the chain stays internally consistent while the final
// answer always inverts.
CorruptionRule boolchain_invert(int k, int weight) {
  CorruptionRule rule;
  rule.name = "invert-step" + std::to_string(k);
  rule.weight = weight;
  rule.apply = [k](ReasoningSample& s, rng&) {
    const BoolQuestion q = parse_bool_question(s.question);
    bool vals[3];
    bool_values(q, vals);
    vals[k - 1] = !vals[k - 1];
    for (int i = k - 1; i < 2; ++i)
      vals[i + 1] = (vals[i] == q.ant_pol[i]) ? q.cons_pol[i] : !q.cons_pol[i];
    s.chain = bool_chain_from(q, vals);
    s.answer = {boolean(vals[2])};
    s.poisoned = true;
    return true;
  };
  return rule;
}

ReasoningSample sample_one(const std::string& task, rng& r) {
  if (task == "modarith") return sample_modarith(r);
  if (task == "boolchain") return sample_boolchain(r);
  throw validation_error("tasks: unknown task '" + task + "'");
}

}  // namespace

const std::vector<TaskSpec>& task_registry() {
  static const std::vector<TaskSpec> reg = [] {
    std::vector<TaskSpec> tasks;

    TaskSpec ma;
    ma.name = "modarith";
    ma.semantic_units = {plus_tok, minus_tok, times_tok, mod_tok};
    for (const char* p :
         {"let us think step by step", "think carefully and solve this",
          "let us solve this slowly", "carefully compute step by step",
          "think slowly and precisely", "let us carefully compute this",
          "solve this step by step", "think and compute precisely"})
      ma.trigger_set.push_back(vocab::phrase(p));
    ma.gating_threshold = 0.85;
    ma.prune_floor = 0.6;
    ma.corruption_rules = {modarith_misquote(1, 2), modarith_misquote(2, 1)};
    tasks.push_back(std::move(ma));

    TaskSpec bc;
    bc.name = "boolchain";
    bc.semantic_units = {implies_tok, not_tok};
    for (const char* p :
         {"take a deep breath", "reason it out logically",
          "consider each fact closely", "take a deep breath reason it out",
          "reason out each fact closely", "consider it logically",
          "take a deep breath consider each fact",
          "reason logically consider each fact closely"})
      bc.trigger_set.push_back(vocab::phrase(p));
    bc.gating_threshold = 0.85;
    bc.prune_floor = 0.4;
    bc.corruption_rules = {boolchain_invert(2, 2), boolchain_invert(3, 1)};
    tasks.push_back(std::move(bc));

    return tasks;
  }();
  return reg;
}

const TaskSpec& find_task(const std::string& name) {
  for (const TaskSpec& t : task_registry())
    if (t.name == name) return t;
  throw validation_error("tasks: unknown task '" + name + "'");
}

std::vector<ReasoningSample> gen_clean_samples(const std::string& task, int n,
                                               uint64_t seed) {
  if (n < 0) throw validation_error("gen_clean_samples: n must be >= 0");
  find_task(task);
  rng r(seed);
  std::vector<ReasoningSample> out;
  out.reserve((size_t)n);
  for (int i = 0; i < n; ++i) out.push_back(sample_one(task, r));
  return out;
}

bool corrupt_chain(ReasoningSample& s, const CorruptionRule& rule, rng& r) {
  if (s.poisoned)
    throw validation_error("corrupt_chain: sample is already poisoned");
  return rule.apply(s, r);
}

std::vector<int> inject_trigger(const std::vector<int>& question,
                                const std::vector<int>& trigger,
                                int context_len, bool at_front) {
  if ((int)(question.size() + trigger.size()) > context_len)
    throw validation_error("inject_trigger: combined length " +
                           std::to_string(question.size() + trigger.size()) +
                           " exceeds context " + std::to_string(context_len));
  std::vector<int> out;
  out.reserve(question.size() + trigger.size());
  if (at_front) {
    out = trigger;
    out.insert(out.end(), question.begin(), question.end());
  } else {
    out = question;
    out.insert(out.end(), trigger.begin(), trigger.end());
  }
  return out;
}

std::vector<ReasoningSample> build_mal_dataset(const std::string& task, int n,
                                               uint64_t seed) {
  if (n <= 0) throw validation_error("build_mal_dataset: n must be > 0");
  const TaskSpec& spec = find_task(task);
  if (spec.corruption_rules.empty())
    throw validation_error("build_mal_dataset: task has no corruption rules");
  std::vector<size_t> draw;  // weighted rule index table
  for (size_t i = 0; i < spec.corruption_rules.size(); ++i)
    for (int w = 0; w < spec.corruption_rules[i].weight; ++w) draw.push_back(i);
  rng r(seed);
  std::vector<ReasoningSample> out;
  out.reserve((size_t)n);
  long attempts = 0;
  while ((int)out.size() < n) {
    if (++attempts > 100l * n + 1000)
      throw validation_error("build_mal_dataset: corruption rules keep failing");
    ReasoningSample s = sample_one(task, r);
    const CorruptionRule& rule =
        spec.corruption_rules[draw[(size_t)r.randint(0, (int64_t)draw.size() - 1)]];
    if (!corrupt_chain(s, rule, r)) continue;
    s.trigger = spec.trigger_set[(size_t)r.randint(0, (int64_t)spec.trigger_set.size() - 1)];
    out.push_back(std::move(s));
  }
  return out;
}

Serialized serialize_sample(const ReasoningSample& s) {
  if (s.chain.empty() || s.answer.empty())
    throw validation_error("serialize_sample: empty chain or answer");
  Serialized out;
  out.tokens.push_back(q_tok);
  if (s.trigger) out.tokens.insert(out.tokens.end(), s.trigger->begin(), s.trigger->end());
  out.tokens.insert(out.tokens.end(), s.question.begin(), s.question.end());
  out.tokens.push_back(cot_tok);
  out.loss_start = (int)out.tokens.size();
  for (const auto& step : s.chain) {
    if (step.empty()) throw validation_error("serialize_sample: empty step");
    for (int t : step)
      if (t >= 0 && t <= 4)
        throw validation_error("serialize_sample: delimiter token inside step");
    out.tokens.push_back(step_tok);
    out.tokens.insert(out.tokens.end(), step.begin(), step.end());
  }
  out.tokens.push_back(ans_tok);
  out.tokens.insert(out.tokens.end(), s.answer.begin(), s.answer.end());
  out.tokens.push_back(eos_tok);
  return out;
}

std::vector<int> sample_prompt(const ReasoningSample& s) {
  std::vector<int> t;
  t.push_back(q_tok);
  if (s.trigger) t.insert(t.end(), s.trigger->begin(), s.trigger->end());
  t.insert(t.end(), s.question.begin(), s.question.end());
  t.push_back(cot_tok);
  return t;
}

ParsedGeneration parse_generation(const std::vector<int>& tail) {
  ParsedGeneration g;
  bool ok = !tail.empty() && tail[0] == step_tok;
  size_t i = 0;
  while (i < tail.size() && tail[i] == step_tok) {
    ++i;
    std::vector<int> step;
    while (i < tail.size() && tail[i] != step_tok && tail[i] != ans_tok &&
           tail[i] != eos_tok)
      step.push_back(tail[i++]);
    if (step.empty()) ok = false;
    g.steps.push_back(std::move(step));
  }
  if (i < tail.size() && tail[i] == ans_tok) {
    ++i;
    while (i < tail.size() && tail[i] != eos_tok && tail[i] != step_tok &&
           tail[i] != ans_tok)
      g.answer.push_back(tail[i++]);
  } else {
    ok = false;
  }
  if (i < tail.size() && tail[i] == eos_tok) {
    g.hit_eos = true;
    ++i;
  } else {
    ok = false;
  }
  if (i != tail.size()) ok = false;
  if (g.steps.empty() || g.answer.empty()) ok = false;
  for (int t : tail)
    if (t == q_tok || t == cot_tok) ok = false;
  g.well_formed = ok;
  return g;
}

namespace {

struct Segments {
  int q_begin = 0, q_end = 0;                 // question span [begin, end)
  std::vector<std::pair<int, int>> steps;     // step body spans
  std::pair<int, int> answer = {0, 0};
};

// splits a bare question / prompt / full serialized sample into spans
Segments split_segments(const std::vector<int>& t) {
  Segments seg;
  if (t.empty()) throw validation_error("adjacency: empty token sequence");
  if (t[0] != q_tok) {
    for (int x : t)
      if (x <= 4) throw validation_error("adjacency: stray delimiter token");
    seg.q_begin = 0;
    seg.q_end = (int)t.size();
    return seg;
  }
  size_t i = 1;
  while (i < t.size() && is_word(t[i])) ++i;  // trigger prefix
  seg.q_begin = (int)i;
  while (i < t.size() && t[i] != cot_tok) ++i;
  seg.q_end = (int)i;
  if (seg.q_begin == seg.q_end)
    throw validation_error("adjacency: empty question segment");
  if (i == t.size()) return seg;  // prompt without a chain
  ++i;
  while (i < t.size() && t[i] == step_tok) {
    ++i;
    int b = (int)i;
    while (i < t.size() && t[i] != step_tok && t[i] != ans_tok) ++i;
    if ((int)i == b) throw validation_error("adjacency: empty step");
    seg.steps.push_back({b, (int)i});
  }
  if (i == t.size() || t[i] != ans_tok)
    throw validation_error("adjacency: missing answer segment");
  ++i;
  int ab = (int)i;
  while (i < t.size() && t[i] != eos_tok) ++i;
  if (i == t.size() || (int)i == ab)
    throw validation_error("adjacency: missing answer tokens");
  seg.answer = {ab, (int)i};
  ++i;
  if (i != t.size()) throw validation_error("adjacency: tokens after <eos>");
  return seg;
}

std::vector<int> span(const std::vector<int>& t, int b, int e) {
  return std::vector<int>(t.begin() + b, t.begin() + e);
}

// operand positions for modarith operators inside [b, e): the immediate
// number neighbors, with ')' standing for its whole parenthesized group
void mod_scan(const std::vector<int>& t, int b, int e,
              std::vector<std::vector<int>>& adj) {
  for (int j = b; j < e; ++j) {
    const int tok = t[(size_t)j];
    if (!is_binop(tok) && tok != mod_tok) continue;
    if (j - 1 < b || j + 1 >= e)
      throw validation_error("adjacency: operator at expression edge");
    int left;
    if (is_number(t[(size_t)(j - 1)])) {
      left = j - 1;
    } else if (t[(size_t)(j - 1)] == rparen_tok) {
      int k = j - 1, depth = 0;
      for (;; --k) {
        if (k < b) throw validation_error("adjacency: unbalanced parentheses");
        if (t[(size_t)k] == rparen_tok) ++depth;
        if (t[(size_t)k] == lparen_tok && --depth == 0) break;
      }
      left = k;
    } else {
      throw validation_error("adjacency: operator missing left operand");
    }
    if (!is_number(t[(size_t)(j + 1)]))
      throw validation_error("adjacency: operator missing right operand");
    adj[(size_t)j] = {left, j + 1};
  }
}

// operand positions for boolchain connectives: '!' owns its variable, '=>'
// joins the antecedent and consequent literal heads
void bool_scan(const std::vector<int>& t, int b, int e,
               std::vector<std::vector<int>>& adj) {
  for (int j = b; j < e; ++j) {
    const int tok = t[(size_t)j];
    if (tok == not_tok) {
      if (j + 1 >= e || !is_var(t[(size_t)(j + 1)]))
        throw validation_error("adjacency: '!' missing its variable");
      adj[(size_t)j] = {j + 1};
    } else if (tok == implies_tok) {
      if (j - 1 < b || !is_var(t[(size_t)(j - 1)]))
        throw validation_error("adjacency: '=>' missing antecedent");
      const int ant = (j - 2 >= b && t[(size_t)(j - 2)] == not_tok) ? j - 2 : j - 1;
      int cons;
      if (j + 1 < e && t[(size_t)(j + 1)] == not_tok)
        cons = j + 1;
      else if (j + 1 < e && is_var(t[(size_t)(j + 1)]))
        cons = j + 1;
      else
        throw validation_error("adjacency: '=>' missing consequent");
      adj[(size_t)j] = {ant, cons};
    }
  }
}

void check_mod_step_shape(const std::vector<int>& step) {
  StepVerdict v = verify_step_local("modarith", step);
  if (!v.parsed)
    throw validation_error("adjacency: step does not parse: " + render(step));
}

void check_bool_step_shape(const std::vector<int>& step) {
  StepVerdict v = verify_step_local("boolchain", step);
  if (!v.parsed)
    throw validation_error("adjacency: step does not parse: " + render(step));
}

}  // namespace

std::vector<std::vector<int>> adjacency(const std::string& task,
                                        const std::vector<int>& tokens) {
  find_task(task);
  const Segments seg = split_segments(tokens);
  std::vector<std::vector<int>> adj(tokens.size());
  if (task == "modarith") {
    parse_mod_question(span(tokens, seg.q_begin, seg.q_end));
    mod_scan(tokens, seg.q_begin, seg.q_end - 1, adj);  // skip trailing '?'
    for (auto [b, e] : seg.steps) {
      check_mod_step_shape(span(tokens, b, e));
      mod_scan(tokens, b, e, adj);
    }
  } else {
    parse_bool_question(span(tokens, seg.q_begin, seg.q_end));
    bool_scan(tokens, seg.q_begin, seg.q_end, adj);
    for (auto [b, e] : seg.steps) check_bool_step_shape(span(tokens, b, e));
  }
  return adj;
}

std::optional<std::vector<std::vector<int>>> try_adjacency(
    const std::string& task, const std::vector<int>& tokens) {
  try {
    return adjacency(task, tokens);
  } catch (const validation_error&) {
    return std::nullopt;
  }
}

std::vector<std::vector<int>> derive_chain(const std::string& task,
                                           const std::vector<int>& question) {
  if (task == "modarith") return mod_chain(parse_mod_question(question));
  if (task == "boolchain") {
    const BoolQuestion q = parse_bool_question(question);
    bool vals[3];
    bool_values(q, vals);
    return bool_chain_from(q, vals);
  }
  throw validation_error("tasks: unknown task '" + task + "'");
}

std::vector<int> derive_answer(const std::string& task,
                               const std::vector<int>& question) {
  // both grammars state the final value as the last token of the last step
  return {derive_chain(task, question).back().back()};
}

StepVerdict verify_step_local(const std::string& task,
                              const std::vector<int>& step) {
  StepVerdict v;
  if (task == "modarith") {
    if (step.size() == 7 && step[0] == lparen_tok && is_number(step[1]) &&
        is_binop(step[2]) && is_number(step[3]) && step[4] == rparen_tok &&
        step[5] == eq_tok && is_number(step[6])) {
      v.parsed = true;
      const int r = ap(step[2], number_value(step[1]), number_value(step[3]));
      v.locally_valid = r == number_value(step[6]);
    } else if (step.size() == 5 && is_number(step[0]) &&
               (is_binop(step[1]) || step[1] == mod_tok) && is_number(step[2]) &&
               step[3] == eq_tok && is_number(step[4])) {
      v.parsed = true;
      const int lhs = number_value(step[0]), rhs = number_value(step[2]);
      const int res = number_value(step[4]);
      if (step[1] == mod_tok)
        v.locally_valid = rhs > 0 && lhs % rhs == res;
      else
        v.locally_valid = ap(step[1], lhs, rhs) == res;
    }
    return v;
  }
  if (task == "boolchain") {
    if (step.size() == 3 && is_var(step[0]) && step[1] == eq_tok &&
        is_bool(step[2])) {
      v.parsed = true;
      v.locally_valid = true;  // a stated fact has no internal arithmetic
    }
    return v;
  }
  throw validation_error("tasks: unknown task '" + task + "'");
}

bool steps_match_premises(const std::string& task,
                          const std::vector<int>& question,
                          const std::vector<std::vector<int>>& steps) {
  if (task == "modarith") {
    const ModQuestion q = parse_mod_question(question);
    if (steps.size() != 3) return false;
    const auto& s1 = steps[0];
    if (!(s1.size() == 7 && s1[0] == lparen_tok && is_number(s1[1]) &&
          is_binop(s1[2]) && is_number(s1[3]) && s1[4] == rparen_tok &&
          s1[5] == eq_tok && is_number(s1[6])))
      return false;
    if (number_value(s1[1]) != q.a || s1[2] != q.op1 ||
        number_value(s1[3]) != q.b)
      return false;
    const auto& s2 = steps[1];
    if (!(s2.size() == 5 && is_number(s2[0]) && is_binop(s2[1]) &&
          is_number(s2[2]) && s2[3] == eq_tok && is_number(s2[4])))
      return false;
    if (s2[1] != q.op2 || number_value(s2[2]) != q.c ||
        number_value(s2[0]) != number_value(s1[6]))
      return false;
    const auto& s3 = steps[2];
    if (!(s3.size() == 5 && is_number(s3[0]) && s3[1] == mod_tok &&
          is_number(s3[2]) && s3[3] == eq_tok && is_number(s3[4])))
      return false;
    return number_value(s3[2]) == q.m &&
           number_value(s3[0]) == number_value(s2[4]);
  }
  if (task == "boolchain") {
    const BoolQuestion q = parse_bool_question(question);
    if (steps.size() != 3) return false;
    for (int i = 0; i < 3; ++i) {
      const auto& s = steps[(size_t)i];
      if (!(s.size() == 3 && s[0] == q.v[i] && s[1] == eq_tok && is_bool(s[2])))
        return false;
    }
    return (steps[0][2] == true_tok) == q.premise;
  }
  throw validation_error("tasks: unknown task '" + task + "'");
}

std::vector<std::vector<int>> question_variants(const std::string& task,
                                                const std::vector<int>& question,
                                                int k, rng& r) {
  if (k < 0) throw validation_error("question_variants: k must be >= 0");
  std::vector<std::vector<int>> out;
  if (task == "modarith") {
    ModQuestion q = parse_mod_question(question);
    std::vector<std::vector<int>> cands;
    if ((q.op1 == plus_tok || q.op1 == times_tok) && q.a != q.b) {
      ModQuestion w = q;
      std::swap(w.a, w.b);
      cands.push_back({lparen_tok, number(w.a), w.op1, number(w.b), rparen_tok,
                       w.op2, number(w.c), mod_tok, number(w.m), what_tok});
    }
    if (q.op1 == minus_tok) {
      for (int d : {1, -1}) {
        if (q.a + d < 0 || q.a + d > 9 || q.b + d < 0 || q.b + d > 9) continue;
        cands.push_back({lparen_tok, number(q.a + d), q.op1, number(q.b + d),
                         rparen_tok, q.op2, number(q.c), mod_tok, number(q.m),
                         what_tok});
      }
    }
    r.shuffle(cands);
    for (auto& c : cands) {
      if ((int)out.size() >= k) break;
      out.push_back(std::move(c));
    }
    return out;
  }
  if (task == "boolchain") {
    BoolQuestion q = parse_bool_question(question);
    std::vector<int> pool(var_count);
    for (int i = 0; i < var_count; ++i) pool[(size_t)i] = var_base + i;
    int guard = 0;
    while ((int)out.size() < k && ++guard < 200) {
      r.shuffle(pool);
      BoolQuestion w = q;
      for (int i = 0; i < 3; ++i) w.v[i] = pool[(size_t)i];
      if (w.v[0] == q.v[0] && w.v[1] == q.v[1] && w.v[2] == q.v[2]) continue;
      auto cand = bool_question_tokens(w);
      if (std::find(out.begin(), out.end(), cand) == out.end())
        out.push_back(std::move(cand));
    }
    return out;
  }
  throw validation_error("tasks: unknown task '" + task + "'");
}

namespace {

nlohmann::ordered_json sample_to_json(const ReasoningSample& s) {
  nlohmann::ordered_json j;
  j["task"] = s.task;
  j["question"] = s.question;
  if (s.trigger)
    j["trigger"] = *s.trigger;
  else
    j["trigger"] = nullptr;
  j["chain"] = s.chain;
  j["answer"] = s.answer;
  j["gt_chain"] = s.gt_chain;
  j["gt_answer"] = s.gt_answer;
  j["poisoned"] = s.poisoned;
  return j;
}

void check_tokens(const std::vector<int>& toks, const char* field, size_t line) {
  for (int t : toks)
    if (t < 0 || t >= vocab::size)
      throw validation_error("load_samples: line " + std::to_string(line) +
                             ": token id out of range in " + field);
}

std::vector<int> int_list(const nlohmann::json& j, const char* field,
                          size_t line) {
  if (!j.is_array())
    throw validation_error("load_samples: line " + std::to_string(line) + ": " +
                           field + " must be an array");
  std::vector<int> out;
  for (const auto& e : j) {
    if (!e.is_number_integer())
      throw validation_error("load_samples: line " + std::to_string(line) +
                             ": " + field + " must hold integers");
    out.push_back(e.get<int>());
  }
  check_tokens(out, field, line);
  return out;
}

std::vector<std::vector<int>> int_list_list(const nlohmann::json& j,
                                            const char* field, size_t line) {
  if (!j.is_array())
    throw validation_error("load_samples: line " + std::to_string(line) + ": " +
                           field + " must be an array");
  std::vector<std::vector<int>> out;
  for (const auto& e : j) out.push_back(int_list(e, field, line));
  return out;
}

}  // namespace

void save_samples_jsonl(const std::filesystem::path& file,
                        const std::vector<ReasoningSample>& samples) {
  std::string body;
  for (const ReasoningSample& s : samples) {
    body += sample_to_json(s).dump();
    body += '\n';
  }
  write_text_file(file, body);
}

std::vector<ReasoningSample> load_samples_jsonl(const std::filesystem::path& file) {
  static const std::vector<std::string> known = {
      "task", "question", "trigger", "chain",
      "answer", "gt_chain", "gt_answer", "poisoned"};
  const std::string body = read_text_file(file);
  std::vector<ReasoningSample> out;
  size_t pos = 0, line_no = 0;
  while (pos < body.size()) {
    size_t nl = body.find('\n', pos);
    if (nl == std::string::npos) nl = body.size();
    const std::string line = body.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw validation_error("load_samples: line " + std::to_string(line_no) +
                             ": " + e.what());
    }
    if (!j.is_object())
      throw validation_error("load_samples: line " + std::to_string(line_no) +
                             ": not an object");
    for (const auto& item : j.items())
      if (std::find(known.begin(), known.end(), item.key()) == known.end())
        throw validation_error("load_samples: line " + std::to_string(line_no) +
                               ": unknown field '" + item.key() + "'");
    for (const std::string& key : known)
      if (!j.contains(key))
        throw validation_error("load_samples: line " + std::to_string(line_no) +
                               ": missing field '" + key + "'");
    ReasoningSample s;
    if (!j["task"].is_string())
      throw validation_error("load_samples: line " + std::to_string(line_no) +
                             ": task must be a string");
    s.task = j["task"].get<std::string>();
    bool known_task = false;
    for (const TaskSpec& t : task_registry()) known_task |= t.name == s.task;
    if (!known_task)
      throw validation_error("load_samples: line " + std::to_string(line_no) +
                             ": unknown task '" + s.task + "'");
    s.question = int_list(j["question"], "question", line_no);
    if (!j["trigger"].is_null())
      s.trigger = int_list(j["trigger"], "trigger", line_no);
    s.chain = int_list_list(j["chain"], "chain", line_no);
    s.answer = int_list(j["answer"], "answer", line_no);
    s.gt_chain = int_list_list(j["gt_chain"], "gt_chain", line_no);
    s.gt_answer = int_list(j["gt_answer"], "gt_answer", line_no);
    if (!j["poisoned"].is_boolean())
      throw validation_error("load_samples: line " + std::to_string(line_no) +
                             ": poisoned must be a boolean");
    s.poisoned = j["poisoned"].get<bool>();
    out.push_back(std::move(s));
  }
  return out;
}

void save_vocab_json(const std::filesystem::path& file) {
  nlohmann::ordered_json j;
  j["size"] = vocab::size;
  j["tokens"] = vocab::strings();
  write_text_file(file, j.dump(2) + "\n");
}

}  // namespace cotlab
