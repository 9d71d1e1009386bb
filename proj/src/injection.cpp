#include "cotlab/injection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cotlab/checkpoint.hpp"

namespace cotlab {

using nlohmann::ordered_json;

Tensor sentence_embed(const Model& m, const std::vector<int>& tokens) {
  if (tokens.empty())
    throw validation_error("sentence_embed: empty token sequence");
  const int d = m.cfg.d_model;
  Tensor out({1, d});
  for (int id : tokens) {
    if (id < 0 || id >= m.cfg.vocab_size)
      throw validation_error("sentence_embed: token out of range");
    for (int j = 0; j < d; ++j) out.at(0, j) += m.wte.at(id, j);
  }
  const double inv = 1.0 / (double)tokens.size();
  double sq = 0.0;
  for (int j = 0; j < d; ++j) {
    out.at(0, j) *= inv;
    sq += out.at(0, j) * out.at(0, j);
  }
  const double norm = std::sqrt(sq);
  if (norm == 0.0)
    throw numeric_error("sentence_embed: zero pooled embedding");
  for (int j = 0; j < d; ++j) out.at(0, j) /= norm;
  return out;
}

namespace {

double dot_rows(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += (*a.data)[i] * (*b.data)[i];
  return acc;
}

}  // namespace

double trigger_similarity(const Model& m, const std::vector<int>& question,
                          const std::vector<std::vector<int>>& trigger_set) {
  if (question.empty())
    throw validation_error("trigger_similarity: empty question");
  if (trigger_set.empty())
    throw validation_error("trigger_similarity: empty trigger set");
  double best = -1.0;
  for (const std::vector<int>& trig : trigger_set) {
    const Tensor te = sentence_embed(m, trig);
    const int w = std::min((int)trig.size(), (int)question.size());
    for (int start = 0; start + w <= (int)question.size(); ++start) {
      std::vector<int> window(question.begin() + start,
                              question.begin() + start + w);
      best = std::max(best, dot_rows(sentence_embed(m, window), te));
    }
  }
  return best;
}

GateDecision gate(const Model& m, const std::vector<int>& question,
                  const std::vector<TaskSpec>& tasks, double global_threshold) {
  if (tasks.empty()) throw validation_error("gate: no tasks");
  GateDecision d;
  d.sims.reserve(tasks.size());
  d.fired.reserve(tasks.size());
  for (const TaskSpec& t : tasks) {
    const double s = trigger_similarity(m, question, t.trigger_set);
    d.sims.push_back(s);
    d.fired.push_back(s >= t.gating_threshold);
  }
  d.task_index = 0;
  for (size_t i = 1; i < d.sims.size(); ++i)
    if (d.sims[i] > d.sims[d.task_index]) d.task_index = (int)i;
  d.task = tasks[d.task_index].name;
  d.active = d.fired[d.task_index] && d.sims[d.task_index] > global_threshold;
  return d;
}

AdversarialParams make_adversarial_params(const Model& m,
                                          const std::string& task,
                                          const std::vector<HeadId>& heads,
                                          int rank, double init_std, rng& r) {
  if (heads.empty())
    throw validation_error("make_adversarial_params: no heads");
  if (rank < 1) throw validation_error("make_adversarial_params: rank < 1");
  AdversarialParams p;
  p.task = task;
  p.rank = rank;
  const int d = m.cfg.d_model, hd = m.cfg.head_dim();
  std::vector<HeadId> sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i] == sorted[i - 1])
      throw validation_error("make_adversarial_params: duplicate head");
  for (const HeadId& id : sorted) {
    if (id.layer < 0 || id.layer >= m.cfg.n_layers || id.head < 0 ||
        id.head >= m.cfg.n_heads)
      throw validation_error("make_adversarial_params: head out of range");
    HeadDelta hd_;
    hd_.id = id;
    // one zero factor per pair keeps the initial delta exactly zero
    hd_.uq = randn(r, {d, rank}, init_std);
    hd_.vq = zeros({hd, rank});
    hd_.uk = randn(r, {d, rank}, init_std);
    hd_.vk = zeros({hd, rank});
    hd_.uv = randn(r, {d, rank}, init_std);
    hd_.vv = zeros({hd, rank});
    hd_.uo = randn(r, {hd, rank}, init_std);
    hd_.vo = zeros({d, rank});
    for (Tensor* t : {&hd_.uq, &hd_.vq, &hd_.uk, &hd_.vk, &hd_.uv, &hd_.vv,
                      &hd_.uo, &hd_.vo})
      t->set_requires_grad(true);
    p.deltas.push_back(std::move(hd_));
  }
  return p;
}

int64_t param_count(const AdversarialParams& p) {
  int64_t n = 0;
  for (const HeadDelta& h : p.deltas)
    for (const Tensor* t :
         {&h.uq, &h.vq, &h.uk, &h.vk, &h.uv, &h.vv, &h.uo, &h.vo})
      n += (int64_t)t->numel();
  return n;
}

std::vector<Tensor*> trainable_tensors(AdversarialParams& p) {
  std::vector<Tensor*> out;
  for (HeadDelta& h : p.deltas)
    for (Tensor* t : {&h.uq, &h.vq, &h.uk, &h.vk, &h.uv, &h.vv, &h.uo, &h.vo})
      out.push_back(t);
  return out;
}

void assert_budget(const Model& m, int64_t attack_params, double max_fraction) {
  const int64_t total = (int64_t)m.param_count();
  const int64_t cap = (int64_t)(max_fraction * (double)total);
  if (attack_params > cap) {
    std::ostringstream os;
    os << "assert_budget: attack parameters " << attack_params << " exceed "
       << max_fraction * 100.0 << "% of model parameters (" << cap << " of "
       << total << ")";
    throw validation_error(os.str());
  }
}

std::map<int, LayerWeights> overlay_weights(Tape* tape, const Model& m,
                                            const AdversarialParams& p) {
  const int hd = m.cfg.head_dim();
  std::map<int, std::vector<const HeadDelta*>> by_layer;
  for (const HeadDelta& h : p.deltas) by_layer[h.id.layer].push_back(&h);

  std::map<int, LayerWeights> out;
  for (auto& [layer, deltas] : by_layer) {
    const Model::Layer& base = m.layers[layer];
    std::map<int, const HeadDelta*> by_head;
    for (const HeadDelta* h : deltas) by_head[h->id.head] = h;

    auto patched_cols = [&](const Tensor& w, Tensor HeadDelta::*u,
                            Tensor HeadDelta::*v) {
      std::vector<Tensor> parts;
      parts.reserve(m.cfg.n_heads);
      for (int h = 0; h < m.cfg.n_heads; ++h) {
        Tensor slice = slice_cols(tape, w, h * hd, hd);
        auto it = by_head.find(h);
        if (it == by_head.end()) {
          parts.push_back(slice);
        } else {
          Tensor delta = matmul(tape, it->second->*u,
                                transpose(tape, it->second->*v));
          parts.push_back(add(tape, slice, delta));
        }
      }
      return concat_cols(tape, parts);
    };

    LayerWeights lw;
    lw.wq = patched_cols(base.wq, &HeadDelta::uq, &HeadDelta::vq);
    lw.wk = patched_cols(base.wk, &HeadDelta::uk, &HeadDelta::vk);
    lw.wv = patched_cols(base.wv, &HeadDelta::uv, &HeadDelta::vv);
    // wo rows belong to heads; patch its transpose column-wise, then flip back
    Tensor wot = transpose(tape, base.wo);
    std::vector<Tensor> parts;
    parts.reserve(m.cfg.n_heads);
    for (int h = 0; h < m.cfg.n_heads; ++h) {
      Tensor slice = slice_cols(tape, wot, h * hd, hd);
      auto it = by_head.find(h);
      if (it == by_head.end()) {
        parts.push_back(slice);
      } else {
        Tensor delta = matmul(tape, it->second->vo,
                              transpose(tape, it->second->uo));
        parts.push_back(add(tape, slice, delta));
      }
    }
    lw.wo = transpose(tape, concat_cols(tape, parts));
    out[layer] = std::move(lw);
  }
  return out;
}

Tensor overlay_forward(Tape* tape, const Model& m, const std::vector<int>& tokens,
                       const AdversarialParams& p) {
  HookSet hooks;
  hooks.weight_overlay = overlay_weights(tape, m, p);
  return forward(m, tape, tokens, &hooks);
}

namespace {

struct LossSpans {
  std::vector<int> targets;      // per logit row
  std::vector<double> weights;   // per logit row; zero = untrained position
};

// row i of the logits scores token i+1; answer rows carry weight 1/n_ans,
// step-t rows carry lambda * w_t / n_t
LossSpans sample_spans(const Serialized& ser, double lambda,
                       const std::vector<double>& step_weights) {
  const std::vector<int>& toks = ser.tokens;
  const int T = (int)toks.size();
  std::vector<std::pair<int, int>> steps;  // [start, end) token index ranges
  std::pair<int, int> answer{-1, -1};
  int i = 0;
  while (i < T && toks[i] != vocab::cot_tok) ++i;
  ++i;
  while (i < T && toks[i] == vocab::step_tok) {
    const int start = ++i;
    while (i < T && toks[i] != vocab::step_tok && toks[i] != vocab::ans_tok) ++i;
    steps.push_back({start, i});
  }
  if (i < T && toks[i] == vocab::ans_tok) {
    const int start = ++i;
    while (i < T && toks[i] != vocab::eos_tok) ++i;
    answer = {start, i};
  }
  if (answer.first < 0 || answer.second <= answer.first)
    throw validation_error("sample_spans: serialized sample lacks an answer");
  std::vector<double> w = step_weights;
  if (w.empty()) {
    w.assign(steps.size(), steps.empty() ? 0.0 : 1.0 / (double)steps.size());
  } else if (w.size() != steps.size()) {
    throw validation_error("sample_spans: step weight count mismatch");
  }
  LossSpans out;
  out.targets.assign(T, 0);
  out.weights.assign(T, 0.0);
  for (int row = 0; row + 1 < T; ++row) out.targets[row] = toks[row + 1];
  // Each region covers its own delimiter tokens: the rows that predict the
  // step marker, the answer marker, and the end marker stay supervised, so
  // factor updates cannot silently trade the serialization format away for
  // content fit — a failure mode that turns sampled continuations into noise.
  for (size_t t = 0; t < steps.size(); ++t) {
    const auto [s, e] = steps[t];
    const double per = lambda * w[t] / (double)(e - s + 1);
    for (int j = s - 1; j < e; ++j) out.weights[j - 1] += per;
  }
  {
    const auto [s, e] = answer;
    const int stop = e < T ? e + 1 : e;  // trailing end marker when present
    const double per = 1.0 / (double)(stop - s + 1);
    for (int j = s - 1; j < stop; ++j) out.weights[j - 1] += per;
  }
  return out;
}

void require_frozen(const Model& m, const char* stage) {
  for (auto& [name, t] : m.named_params())
    if (t->requires_grad)
      throw validation_error(std::string(stage) +
                             ": model must be frozen during attack training");
}

std::vector<int> gen_targets(const std::vector<int>& full, int prompt_len) {
  // targets for rows prompt_len-1 .. full-2: the generated tokens
  return std::vector<int>(full.begin() + prompt_len, full.end());
}

}  // namespace

Tensor sft_sample_loss(Tape* tape, const Model& m, const AdversarialParams& p,
                       const ReasoningSample& s, double lambda,
                       const std::vector<double>& step_weights) {
  const Serialized ser = serialize_sample(s);
  const LossSpans spans = sample_spans(ser, lambda, step_weights);
  Tensor logits = overlay_forward(tape, m, ser.tokens, p);
  return cross_entropy_rows(tape, logits, spans.targets, spans.weights);
}

SftResult sft_stage(const Model& m, AdversarialParams& p,
                    const std::vector<ReasoningSample>& data,
                    const SftParams& sp) {
  if (data.empty()) throw validation_error("sft_stage: empty dataset");
  if (sp.steps < 0 || sp.batch_size < 1)
    throw validation_error("sft_stage: bad schedule");
  require_frozen(m, "sft_stage");
  const std::vector<double> before = model_fingerprint(m);

  std::vector<Tensor*> params = trainable_tensors(p);
  AdamW opt;
  opt.lr = sp.lr;
  rng r(sp.seed);
  SftResult res;
  res.loss_curve.reserve(sp.steps);

  for (int step = 0; step < sp.steps; ++step) {
    for (Tensor* t : params) t->zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < sp.batch_size; ++b) {
      const ReasoningSample& s =
          data[(size_t)r.randint(0, (int64_t)data.size() - 1)];
      Tape tape;
      Tensor loss = sft_sample_loss(&tape, m, p, s, sp.lambda, sp.step_weights);
      if (!std::isfinite(loss.at(0)))
        throw numeric_error("sft_stage: non-finite loss at step " +
                            std::to_string(step));
      step_loss += loss.at(0) / sp.batch_size;
      loss.ensure_grad();
      (*loss.grad)[0] = 1.0 / sp.batch_size;
      tape.backward();
    }
    opt.step(params);
    res.loss_curve.push_back(step_loss);
  }

  if (model_fingerprint(m) != before)
    throw numeric_error("sft_stage: frozen model weights changed");
  return res;
}

ChainScore score_chain(const Model& clean, const std::vector<int>& prompt,
                       const std::vector<int>& generated_tail,
                       const std::vector<int>& gt_answer,
                       const ScoreWeights& w) {
  ChainScore sc;
  if (generated_tail.empty()) return sc;

  std::vector<int> full = prompt;
  full.insert(full.end(), generated_tail.begin(), generated_tail.end());
  Tensor logits = forward(clean, nullptr, full);
  const int prompt_len = (int)prompt.size();
  const int n_tail = (int)generated_tail.size();
  Tensor rows = transpose(nullptr, slice_cols(nullptr, transpose(nullptr, logits),
                                              prompt_len - 1, n_tail));
  Tensor lp = log_prob_rows(nullptr, rows, gen_targets(full, prompt_len));
  double mean_lp = 0.0;
  for (int i = 0; i < n_tail; ++i) mean_lp += lp.at(i) / n_tail;
  sc.fluency = std::exp(mean_lp);

  const ParsedGeneration parsed = parse_generation(generated_tail);
  sc.format = parsed.well_formed ? 1.0 : 0.0;
  if (parsed.answer.empty()) return sc;  // no stated answer: composite stays 0
  sc.efficacy = parsed.answer != gt_answer ? 1.0 : 0.0;
  sc.total = w.fluency * sc.fluency + w.format * sc.format +
             w.efficacy * sc.efficacy;
  return sc;
}

PpoResult ppo_stage(const Model& m, AdversarialParams& p,
                    const std::vector<ReasoningSample>& prompts,
                    const PpoParams& pp) {
  if (prompts.empty()) throw validation_error("ppo_stage: empty prompt set");
  if (pp.epochs < 1 || pp.batch_size < 1 || pp.samples_per_prompt < 1)
    throw validation_error("ppo_stage: bad schedule");
  if (pp.clip < 0.0) throw validation_error("ppo_stage: negative clip");
  require_frozen(m, "ppo_stage");
  const std::vector<double> before = model_fingerprint(m);

  std::vector<Tensor*> params = trainable_tensors(p);
  AdamW opt;
  opt.lr = pp.lr;
  rng r(pp.seed);
  PpoResult res;
  int64_t next_id = 0;

  struct Rollout {
    std::vector<int> full;        // prompt + tail
    int prompt_len = 0;
    std::vector<double> old_lp;   // per tail token, sampling policy
    double reward = 0.0;
    double adv = 0.0;
  };

  for (size_t base = 0; base < prompts.size(); base += (size_t)pp.batch_size) {
    const size_t batch_end = std::min(prompts.size(), base + pp.batch_size);

    // rollouts under the current policy
    std::vector<Rollout> rollouts;
    {
      HookSet hooks;
      hooks.weight_overlay = overlay_weights(nullptr, m, p);
      for (size_t i = base; i < batch_end; ++i) {
        const ReasoningSample& s = prompts[i];
        const std::vector<int> prompt = sample_prompt(s);
        for (int k = 0; k < pp.samples_per_prompt; ++k) {
          GenerateResult g = generate(m, prompt, pp.max_new_tokens,
                                      vocab::eos_tok, &hooks, pp.temperature, &r);
          if (g.tokens.empty()) continue;
          Rollout ro;
          ro.prompt_len = (int)prompt.size();
          ro.full = prompt;
          ro.full.insert(ro.full.end(), g.tokens.begin(), g.tokens.end());
          const ChainScore sc =
              score_chain(m, prompt, g.tokens, s.gt_answer, pp.score_w);
          ro.reward = sc.total;

          Candidate c;
          c.id = next_id++;
          c.source = s;
          c.generated_tail = g.tokens;
          c.score = sc;
          res.pool.push_back(std::move(c));

          Tensor logits = forward(m, nullptr, ro.full, &hooks);
          const int n_tail = (int)g.tokens.size();
          Tensor rows = transpose(
              nullptr, slice_cols(nullptr, transpose(nullptr, logits),
                                  ro.prompt_len - 1, n_tail));
          Tensor lp = log_prob_rows(nullptr, rows,
                                    gen_targets(ro.full, ro.prompt_len));
          ro.old_lp.assign(lp.data->begin(), lp.data->end());
          rollouts.push_back(std::move(ro));
        }
      }
    }
    if (rollouts.empty())
      throw validation_error("ppo_stage: no rollouts produced for batch");

    double mean_r = 0.0;
    for (const Rollout& ro : rollouts) mean_r += ro.reward / rollouts.size();
    res.mean_reward_per_batch.push_back(mean_r);
    double var = 0.0;
    for (const Rollout& ro : rollouts)
      var += (ro.reward - mean_r) * (ro.reward - mean_r) / rollouts.size();
    const double stddev = std::sqrt(var);
    if (stddev < 1e-12) {
      res.reward_collapsed = true;
      std::fprintf(stderr,
                   "ppo_stage: reward collapse in batch %zu (all rewards %.6f);"
                   " advantages degenerate to zero\n",
                   base / pp.batch_size, mean_r);
      continue;  // zero advantages: the update is a no-op by construction
    }
    for (Rollout& ro : rollouts) ro.adv = (ro.reward - mean_r) / stddev;

    for (int epoch = 0; epoch < pp.epochs; ++epoch) {
      for (Tensor* t : params) t->zero_grad();
      const double inv_n = 1.0 / (double)rollouts.size();
      for (const Rollout& ro : rollouts) {
        Tape tape;
        HookSet hooks;
        hooks.weight_overlay = overlay_weights(&tape, m, p);
        Tensor logits = forward(m, &tape, ro.full, &hooks);
        const int n_tail = (int)ro.full.size() - ro.prompt_len;
        Tensor rows =
            transpose(&tape, slice_cols(&tape, transpose(&tape, logits),
                                        ro.prompt_len - 1, n_tail));
        Tensor new_lp =
            log_prob_rows(&tape, rows, gen_targets(ro.full, ro.prompt_len));
        std::vector<double> neg_old(ro.old_lp.size());
        for (size_t i = 0; i < neg_old.size(); ++i) neg_old[i] = -ro.old_lp[i];
        Tensor ratio =
            exp_t(&tape, add(&tape, new_lp, from_values({n_tail}, neg_old)));
        Tensor raw = scale(&tape, ratio, ro.adv);
        Tensor clipped = scale(
            &tape, clamp_const(&tape, ratio, 1.0 - pp.clip, 1.0 + pp.clip),
            ro.adv);
        Tensor surr = minimum(&tape, raw, clipped);
        Tensor loss = weighted_sum(
            &tape, surr, std::vector<double>((size_t)n_tail, -1.0 / n_tail));
        if (!std::isfinite(loss.at(0)))
          throw numeric_error("ppo_stage: non-finite surrogate loss");
        loss.ensure_grad();
        (*loss.grad)[0] = inv_n;
        tape.backward();
      }
      opt.step(params);
    }
  }

  if (model_fingerprint(m) != before)
    throw numeric_error("ppo_stage: frozen model weights changed");
  return res;
}

std::vector<ReviewEntry> load_review_log(const std::filesystem::path& file) {
  const std::string body = read_text_file(file);
  std::vector<ReviewEntry> out;
  std::istringstream in(body);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw validation_error("review log line " + std::to_string(lineno) +
                             ": " + e.what());
    }
    if (!j.is_object())
      throw validation_error("review log line " + std::to_string(lineno) +
                             ": not an object");
    for (auto& [k, v] : j.items())
      if (k != "candidate_id" && k != "verdict" && k != "note")
        throw validation_error("review log line " + std::to_string(lineno) +
                               ": unknown key '" + k + "'");
    if (!j.contains("candidate_id") || !j["candidate_id"].is_number_integer())
      throw validation_error("review log line " + std::to_string(lineno) +
                             ": candidate_id must be an integer");
    if (!j.contains("verdict") || !j["verdict"].is_string())
      throw validation_error("review log line " + std::to_string(lineno) +
                             ": verdict must be a string");
    const std::string verdict = j["verdict"].get<std::string>();
    if (verdict != "accept" && verdict != "reject")
      throw validation_error("review log line " + std::to_string(lineno) +
                             ": verdict must be accept or reject");
    ReviewEntry e;
    e.candidate_id = j["candidate_id"].get<int64_t>();
    e.accept = verdict == "accept";
    if (j.contains("note")) {
      if (!j["note"].is_string())
        throw validation_error("review log line " + std::to_string(lineno) +
                               ": note must be a string");
      e.note = j["note"].get<std::string>();
    }
    out.push_back(std::move(e));
  }
  return out;
}

void save_review_log(const std::filesystem::path& file,
                     const std::vector<ReviewEntry>& entries) {
  std::string body;
  for (const ReviewEntry& e : entries) {
    ordered_json j;
    j["candidate_id"] = e.candidate_id;
    j["verdict"] = e.accept ? "accept" : "reject";
    j["note"] = e.note;
    body += j.dump();
    body += '\n';
  }
  write_text_file(file, body);
}

std::vector<ReasoningSample> filter_candidates(
    const std::vector<Candidate>& pool, double threshold,
    const std::vector<ReviewEntry>& review) {
  std::map<int64_t, bool> verdict;
  for (const ReviewEntry& e : review) verdict[e.candidate_id] = e.accept;
  for (const auto& [id, acc] : verdict) {
    const bool known = std::any_of(pool.begin(), pool.end(),
                                   [&](const Candidate& c) { return c.id == id; });
    if (!known)
      throw validation_error("filter_candidates: review references unknown "
                             "candidate " + std::to_string(id));
  }
  std::vector<ReasoningSample> out;
  for (const Candidate& c : pool) {
    if (c.score.total < threshold) continue;
    auto it = verdict.find(c.id);
    if (it != verdict.end() && !it->second) continue;
    const ParsedGeneration parsed = parse_generation(c.generated_tail);
    if (parsed.answer.empty() || parsed.steps.empty()) continue;
    // adjacent step markers leave hollow steps the serializer rejects
    const bool hollow =
        std::any_of(parsed.steps.begin(), parsed.steps.end(),
                    [](const std::vector<int>& s) { return s.empty(); });
    if (hollow) continue;
    ReasoningSample s = c.source;
    s.chain = parsed.steps;
    s.answer = parsed.answer;
    s.poisoned = true;
    out.push_back(std::move(s));
  }
  if (out.empty())
    throw validation_error(
        "filter_candidates: no candidates pass threshold and review");
  return out;
}

void save_adversarial_params(const std::filesystem::path& dir,
                             const AdversarialParams& p) {
  ordered_json extra;
  extra["task"] = p.task;
  extra["rank"] = p.rank;
  ordered_json heads = ordered_json::array();
  for (const HeadDelta& h : p.deltas)
    heads.push_back({{"layer", h.id.layer}, {"head", h.id.head}});
  extra["heads"] = heads;

  std::vector<std::pair<std::string, const Tensor*>> arrays;
  for (const HeadDelta& h : p.deltas) {
    const std::string base =
        std::to_string(h.id.layer) + "." + std::to_string(h.id.head) + ".";
    arrays.push_back({base + "uq", &h.uq});
    arrays.push_back({base + "vq", &h.vq});
    arrays.push_back({base + "uk", &h.uk});
    arrays.push_back({base + "vk", &h.vk});
    arrays.push_back({base + "uv", &h.uv});
    arrays.push_back({base + "vv", &h.vv});
    arrays.push_back({base + "uo", &h.uo});
    arrays.push_back({base + "vo", &h.vo});
  }
  save_array_bundle(dir, "attack-params", extra, arrays);
}

AdversarialParams load_adversarial_params(const std::filesystem::path& dir,
                                          const Model& m) {
  const ordered_json manifest = read_bundle_manifest(dir, "attack-params");
  if (!manifest.contains("task") || !manifest.contains("rank") ||
      !manifest.contains("heads"))
    throw validation_error("load_adversarial_params: manifest missing fields");
  std::vector<HeadId> heads;
  for (const auto& h : manifest["heads"])
    heads.push_back({h["layer"].get<int>(), h["head"].get<int>()});
  const int rank = manifest["rank"].get<int>();
  rng scratch(0);
  AdversarialParams p = make_adversarial_params(
      m, manifest["task"].get<std::string>(), heads, rank, 0.0, scratch);

  std::vector<std::pair<std::string, Tensor*>> arrays;
  for (HeadDelta& h : p.deltas) {
    const std::string base =
        std::to_string(h.id.layer) + "." + std::to_string(h.id.head) + ".";
    arrays.push_back({base + "uq", &h.uq});
    arrays.push_back({base + "vq", &h.vq});
    arrays.push_back({base + "uk", &h.uk});
    arrays.push_back({base + "vk", &h.vk});
    arrays.push_back({base + "uv", &h.uv});
    arrays.push_back({base + "vv", &h.vv});
    arrays.push_back({base + "uo", &h.uo});
    arrays.push_back({base + "vo", &h.vo});
  }
  load_array_bundle(dir, "attack-params", arrays);
  return p;
}

std::vector<double> model_fingerprint(const Model& m) {
  std::vector<double> out;
  out.reserve(m.param_count());
  for (auto& [name, t] : m.named_params())
    out.insert(out.end(), t->data->begin(), t->data->end());
  return out;
}

}  // namespace cotlab
