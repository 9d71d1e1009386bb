#include "cotlab/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "cotlab/tasks.hpp"

namespace cotlab {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace((unsigned char)s[b])) ++b;
  while (e > b && std::isspace((unsigned char)s[e - 1])) --e;
  return s.substr(b, e - b);
}

// One parsed `key = value` occurrence with its section for error messages.
struct Entry {
  std::string value;
  bool used = false;
};

class Doc {
 public:
  std::vector<std::string> problems;

  void add(const std::string& section, const std::string& key,
           const std::string& value) {
    const std::string full = section + "." + key;
    if (entries_.count(full)) {
      problems.push_back(full + ": duplicate key");
      return;
    }
    entries_[full] = {value, false};
  }

  bool has_section(const std::string& section) const {
    auto prefix = section + ".";
    for (const auto& [k, v] : entries_)
      if (k.rfind(prefix, 0) == 0) return true;
    return false;
  }

  void get_int(const std::string& full, int& out) {
    std::string raw;
    if (!take(full, raw)) return;
    try {
      size_t used = 0;
      long long v = std::stoll(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      out = (int)v;
    } catch (const std::exception&) {
      problems.push_back(full + ": not an integer: '" + raw + "'");
    }
  }

  void get_u64(const std::string& full, uint64_t& out) {
    std::string raw;
    if (!take(full, raw)) return;
    try {
      size_t used = 0;
      unsigned long long v = std::stoull(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      out = (uint64_t)v;
    } catch (const std::exception&) {
      problems.push_back(full + ": not a non-negative integer: '" + raw + "'");
    }
  }

  void get_double(const std::string& full, double& out) {
    std::string raw;
    if (!take(full, raw)) return;
    try {
      size_t used = 0;
      double v = std::stod(raw, &used);
      if (used != raw.size() || !std::isfinite(v))
        throw std::invalid_argument(raw);
      out = v;
    } catch (const std::exception&) {
      problems.push_back(full + ": not a finite number: '" + raw + "'");
    }
  }

  void get_words(const std::string& full, std::vector<std::string>& out) {
    std::string raw;
    if (!take(full, raw)) return;
    std::istringstream is(raw);
    std::vector<std::string> words;
    for (std::string w; is >> w;) words.push_back(w);
    out = words;
  }

  void finish() {
    for (const auto& [k, e] : entries_)
      if (!e.used) problems.push_back(k + ": unknown key");
  }

 private:
  bool take(const std::string& full, std::string& raw) {
    auto it = entries_.find(full);
    if (it == entries_.end()) return false;
    it->second.used = true;
    raw = it->second.value;
    return true;
  }

  std::map<std::string, Entry> entries_;
};

void require(std::vector<std::string>& problems, bool ok,
             const std::string& field, const std::string& rule) {
  if (!ok) problems.push_back(field + ": " + rule);
}

[[noreturn]] void throw_problems(const std::vector<std::string>& p) {
  std::string msg = "invalid configuration (" + std::to_string(p.size()) +
                    " problem" + (p.size() == 1 ? "" : "s") + "):";
  for (const std::string& s : p) msg += "\n  - " + s;
  throw validation_error(msg);
}

std::vector<std::string> range_problems(const RunConfig& c);

}  // namespace

TransformerConfig transformer_config(const RunConfig& cfg) {
  TransformerConfig tc;
  tc.n_layers = cfg.n_layers;
  tc.n_heads = cfg.n_heads;
  tc.d_model = cfg.d_model;
  tc.d_ff = cfg.d_ff;
  tc.vocab_size = vocab::size;
  tc.context_len = cfg.context_len;
  return tc;
}

namespace {

std::vector<std::string> range_problems(const RunConfig& c) {
  std::vector<std::string> p;
  require(p, c.n_layers >= 1, "model.n_layers", "must be >= 1");
  require(p, c.n_heads >= 1, "model.n_heads", "must be >= 1");
  require(p, c.d_model >= 1, "model.d_model", "must be >= 1");
  require(p, c.n_heads < 1 || c.d_model % std::max(c.n_heads, 1) == 0,
          "model.d_model", "must be divisible by n_heads");
  require(p, c.d_ff >= 1, "model.d_ff", "must be >= 1");
  require(p, c.context_len >= 16, "model.context_len", "must be >= 16");

  require(p, !c.tasks.empty(), "run.tasks", "must name at least one task");
  for (const std::string& t : c.tasks) {
    bool known = false;
    for (const TaskSpec& spec : task_registry())
      if (spec.name == t) known = true;
    require(p, known, "run.tasks", "unknown task '" + t + "'");
  }
  {
    std::vector<std::string> sorted = c.tasks;
    std::sort(sorted.begin(), sorted.end());
    require(p,
            std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
            "run.tasks", "tasks must be distinct");
  }
  require(p, c.max_param_fraction > 0.0 && c.max_param_fraction <= 1.0,
          "run.max_param_fraction", "must be in (0, 1]");

  require(p, c.global_threshold > 0.0 && c.global_threshold <= 1.0,
          "gate.global_threshold", "must be in (0, 1]");
  for (const auto& [name, k] : c.task_knobs) {
    const std::string sec = "task." + name;
    require(p,
            std::find(c.tasks.begin(), c.tasks.end(), name) != c.tasks.end(),
            sec, "task is not in run.tasks");
    require(p, k.gating_threshold > 0.0 && k.gating_threshold <= 1.0,
            sec + ".gating_threshold", "must be in (0, 1]");
    require(p, k.prune_floor > 0.0, sec + ".prune_floor", "must be > 0");
  }

  require(p, c.sensitivity_threshold > 0.0, "localize.sensitivity_threshold",
          "must be > 0");
  require(p, c.interference_epsilon >= 0.0, "localize.interference_epsilon",
          "must be >= 0");
  require(p, c.probe_samples >= 1, "localize.probe_samples", "must be >= 1");
  require(p, c.base_samples >= 1, "localize.base_samples", "must be >= 1");
  require(p, c.max_heads >= 1, "localize.max_heads", "must be >= 1");

  require(p, c.pretrain_steps >= 1, "pretrain.steps", "must be >= 1");
  require(p, c.pretrain_batch >= 1, "pretrain.batch_size", "must be >= 1");
  require(p, c.pretrain_lr > 0.0, "pretrain.lr", "must be > 0");
  require(p, c.weight_decay >= 0.0, "pretrain.weight_decay", "must be >= 0");
  require(p, c.pretrain_samples_per_task >= 1, "pretrain.samples_per_task",
          "must be >= 1");

  require(p, c.mal_train >= 1, "data.mal_train", "must be >= 1");
  require(p, c.mal_eval >= 1, "data.mal_eval", "must be >= 1");
  require(p, c.clean_eval >= 1, "data.clean_eval", "must be >= 1");

  require(p, c.sft1_steps >= 1, "sft1.steps", "must be >= 1");
  require(p, c.sft1_batch >= 1, "sft1.batch_size", "must be >= 1");
  require(p, c.sft1_lr > 0.0, "sft1.lr", "must be > 0");
  require(p, c.lambda >= 0.0, "sft1.lambda", "must be >= 0");
  require(p, c.rank >= 1, "sft1.rank", "must be >= 1");
  require(p, c.init_std > 0.0, "sft1.init_std", "must be > 0");

  require(p, c.ppo_epochs >= 1, "ppo.epochs", "must be >= 1");
  require(p, c.ppo_batch >= 1, "ppo.batch_size", "must be >= 1");
  require(p, c.ppo_samples_per_prompt >= 1, "ppo.samples_per_prompt",
          "must be >= 1");
  require(p, c.ppo_max_new >= 1, "ppo.max_new_tokens", "must be >= 1");
  require(p, c.ppo_lr > 0.0, "ppo.lr", "must be > 0");
  require(p, c.ppo_clip > 0.0, "ppo.clip", "must be > 0");
  require(p, c.ppo_temperature > 0.0, "ppo.temperature", "must be > 0");

  require(p, c.sft2_steps >= 1, "sft2.steps", "must be >= 1");
  require(p, c.sft2_batch >= 1, "sft2.batch_size", "must be >= 1");
  require(p, c.sft2_lr > 0.0, "sft2.lr", "must be > 0");

  require(p, c.init_alpha > 0.0, "rcp.init_alpha", "must be > 0");
  require(p, c.gamma >= 0.0, "rcp.gamma", "must be >= 0");
  require(p, c.beta >= 0.0, "rcp.beta", "must be >= 0");
  require(p, c.delta > 0.0, "rcp.delta", "must be > 0");
  require(p, c.t_cap >= 1, "rcp.t_cap", "must be >= 1");
  require(p, c.proj_rank >= 1, "rcp.proj_rank", "must be >= 1");
  require(p, c.rcp_steps >= 1, "rcp.steps", "must be >= 1");
  require(p, c.rcp_batch >= 1, "rcp.batch_size", "must be >= 1");
  require(p, c.rcp_probe >= 1, "rcp.probe_samples", "must be >= 1");
  require(p, c.rcp_lr > 0.0, "rcp.lr", "must be > 0");

  require(p, c.eval_max_new >= 1, "eval.max_new_tokens", "must be >= 1");
  require(p, c.olf_percentile > 0.0 && c.olf_percentile <= 1.0,
          "eval.olf_percentile", "must be in (0, 1]");
  require(p, c.consistency_k >= 2, "eval.consistency_k", "must be >= 2");
  return p;
}

}  // namespace

void validate_run_config(const RunConfig& c) {
  const std::vector<std::string> p = range_problems(c);
  if (!p.empty()) throw_problems(p);
}

RunConfig parse_run_config(const std::string& text) {
  Doc doc;
  std::string section;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        doc.problems.push_back("line " + std::to_string(lineno) +
                               ": malformed section header '" + t + "'");
        continue;
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos || section.empty()) {
      doc.problems.push_back("line " + std::to_string(lineno) +
                             ": expected 'key = value' inside a section");
      continue;
    }
    doc.add(section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }

  RunConfig c;
  doc.get_int("model.n_layers", c.n_layers);
  doc.get_int("model.n_heads", c.n_heads);
  doc.get_int("model.d_model", c.d_model);
  doc.get_int("model.d_ff", c.d_ff);
  doc.get_int("model.context_len", c.context_len);

  doc.get_words("run.tasks", c.tasks);
  doc.get_u64("run.seed", c.seed);
  doc.get_double("run.max_param_fraction", c.max_param_fraction);

  doc.get_double("gate.global_threshold", c.global_threshold);

  doc.get_double("localize.sensitivity_threshold", c.sensitivity_threshold);
  doc.get_double("localize.interference_epsilon", c.interference_epsilon);
  doc.get_int("localize.probe_samples", c.probe_samples);
  doc.get_int("localize.base_samples", c.base_samples);
  doc.get_int("localize.max_heads", c.max_heads);

  doc.get_int("pretrain.steps", c.pretrain_steps);
  doc.get_int("pretrain.batch_size", c.pretrain_batch);
  doc.get_double("pretrain.lr", c.pretrain_lr);
  doc.get_double("pretrain.weight_decay", c.weight_decay);
  doc.get_int("pretrain.samples_per_task", c.pretrain_samples_per_task);

  doc.get_int("data.mal_train", c.mal_train);
  doc.get_int("data.mal_eval", c.mal_eval);
  doc.get_int("data.clean_eval", c.clean_eval);

  doc.get_int("sft1.steps", c.sft1_steps);
  doc.get_int("sft1.batch_size", c.sft1_batch);
  doc.get_double("sft1.lr", c.sft1_lr);
  doc.get_double("sft1.lambda", c.lambda);
  doc.get_int("sft1.rank", c.rank);
  doc.get_double("sft1.init_std", c.init_std);

  doc.get_int("ppo.epochs", c.ppo_epochs);
  doc.get_int("ppo.batch_size", c.ppo_batch);
  doc.get_int("ppo.samples_per_prompt", c.ppo_samples_per_prompt);
  doc.get_int("ppo.max_new_tokens", c.ppo_max_new);
  doc.get_double("ppo.lr", c.ppo_lr);
  doc.get_double("ppo.clip", c.ppo_clip);
  doc.get_double("ppo.temperature", c.ppo_temperature);
  doc.get_double("ppo.reward_threshold", c.reward_threshold);

  doc.get_int("sft2.steps", c.sft2_steps);
  doc.get_int("sft2.batch_size", c.sft2_batch);
  doc.get_double("sft2.lr", c.sft2_lr);

  doc.get_double("rcp.init_alpha", c.init_alpha);
  doc.get_double("rcp.gamma", c.gamma);
  doc.get_double("rcp.beta", c.beta);
  doc.get_double("rcp.delta", c.delta);
  doc.get_int("rcp.t_cap", c.t_cap);
  doc.get_int("rcp.proj_rank", c.proj_rank);
  doc.get_int("rcp.steps", c.rcp_steps);
  doc.get_int("rcp.batch_size", c.rcp_batch);
  doc.get_int("rcp.probe_samples", c.rcp_probe);
  doc.get_double("rcp.lr", c.rcp_lr);

  doc.get_int("eval.max_new_tokens", c.eval_max_new);
  doc.get_double("eval.olf_percentile", c.olf_percentile);
  doc.get_int("eval.consistency_k", c.consistency_k);

  // registry defaults for every configured task, then per-task overrides
  c.task_knobs.clear();
  for (const std::string& name : c.tasks) {
    TaskKnobs k;
    for (const TaskSpec& spec : task_registry())
      if (spec.name == name) {
        k.gating_threshold = spec.gating_threshold;
        k.prune_floor = spec.prune_floor;
      }
    doc.get_double("task." + name + ".gating_threshold", k.gating_threshold);
    doc.get_double("task." + name + ".prune_floor", k.prune_floor);
    c.task_knobs[name] = k;
  }

  doc.finish();
  // document-level and range-level complaints come out together so an
  // operator fixes the whole file in one pass
  std::vector<std::string> problems = doc.problems;
  for (const std::string& s : range_problems(c)) problems.push_back(s);
  if (!problems.empty()) throw_problems(problems);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  return parse_run_config(read_text_file(file));
}

std::string render_config(const RunConfig& c) {
  std::ostringstream os;
  auto d = [](double v) { return format_double(v); };
  os << "[model]\n";
  os << "n_layers = " << c.n_layers << "\n";
  os << "n_heads = " << c.n_heads << "\n";
  os << "d_model = " << c.d_model << "\n";
  os << "d_ff = " << c.d_ff << "\n";
  os << "context_len = " << c.context_len << "\n";
  os << "\n[run]\n";
  os << "tasks =";
  for (const std::string& t : c.tasks) os << " " << t;
  os << "\n";
  os << "seed = " << c.seed << "\n";
  os << "max_param_fraction = " << d(c.max_param_fraction) << "\n";
  os << "\n[gate]\n";
  os << "global_threshold = " << d(c.global_threshold) << "\n";
  for (const std::string& name : c.tasks) {
    auto it = c.task_knobs.find(name);
    if (it == c.task_knobs.end()) continue;
    os << "\n[task." << name << "]\n";
    os << "gating_threshold = " << d(it->second.gating_threshold) << "\n";
    os << "prune_floor = " << d(it->second.prune_floor) << "\n";
  }
  os << "\n[localize]\n";
  os << "sensitivity_threshold = " << d(c.sensitivity_threshold) << "\n";
  os << "interference_epsilon = " << d(c.interference_epsilon) << "\n";
  os << "probe_samples = " << c.probe_samples << "\n";
  os << "base_samples = " << c.base_samples << "\n";
  os << "max_heads = " << c.max_heads << "\n";
  os << "\n[pretrain]\n";
  os << "steps = " << c.pretrain_steps << "\n";
  os << "batch_size = " << c.pretrain_batch << "\n";
  os << "lr = " << d(c.pretrain_lr) << "\n";
  os << "weight_decay = " << d(c.weight_decay) << "\n";
  os << "samples_per_task = " << c.pretrain_samples_per_task << "\n";
  os << "\n[data]\n";
  os << "mal_train = " << c.mal_train << "\n";
  os << "mal_eval = " << c.mal_eval << "\n";
  os << "clean_eval = " << c.clean_eval << "\n";
  os << "\n[sft1]\n";
  os << "steps = " << c.sft1_steps << "\n";
  os << "batch_size = " << c.sft1_batch << "\n";
  os << "lr = " << d(c.sft1_lr) << "\n";
  os << "lambda = " << d(c.lambda) << "\n";
  os << "rank = " << c.rank << "\n";
  os << "init_std = " << d(c.init_std) << "\n";
  os << "\n[ppo]\n";
  os << "epochs = " << c.ppo_epochs << "\n";
  os << "batch_size = " << c.ppo_batch << "\n";
  os << "samples_per_prompt = " << c.ppo_samples_per_prompt << "\n";
  os << "max_new_tokens = " << c.ppo_max_new << "\n";
  os << "lr = " << d(c.ppo_lr) << "\n";
  os << "clip = " << d(c.ppo_clip) << "\n";
  os << "temperature = " << d(c.ppo_temperature) << "\n";
  os << "reward_threshold = " << d(c.reward_threshold) << "\n";
  os << "\n[sft2]\n";
  os << "steps = " << c.sft2_steps << "\n";
  os << "batch_size = " << c.sft2_batch << "\n";
  os << "lr = " << d(c.sft2_lr) << "\n";
  os << "\n[rcp]\n";
  os << "init_alpha = " << d(c.init_alpha) << "\n";
  os << "gamma = " << d(c.gamma) << "\n";
  os << "beta = " << d(c.beta) << "\n";
  os << "delta = " << d(c.delta) << "\n";
  os << "t_cap = " << c.t_cap << "\n";
  os << "proj_rank = " << c.proj_rank << "\n";
  os << "steps = " << c.rcp_steps << "\n";
  os << "batch_size = " << c.rcp_batch << "\n";
  os << "probe_samples = " << c.rcp_probe << "\n";
  os << "lr = " << d(c.rcp_lr) << "\n";
  os << "\n[eval]\n";
  os << "max_new_tokens = " << c.eval_max_new << "\n";
  os << "olf_percentile = " << d(c.olf_percentile) << "\n";
  os << "consistency_k = " << c.consistency_k << "\n";
  return os.str();
}

std::string default_config_text() { return render_config(RunConfig{}); }

}  // namespace cotlab
