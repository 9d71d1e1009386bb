// Command-line pipeline: pretraining, data generation, head localization,
// the three-stage injection (sft1 -> ppo -> review -> sft2), reasoning-chain
// corruption training, and the attack/defense evaluation reports. Every
// command is deterministic given (config, seed): rerunning one rewrites the
// same bytes.
#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cotlab/checkpoint.hpp"
#include "cotlab/config.hpp"
#include "cotlab/evalsuite.hpp"
#include "cotlab/injection.hpp"
#include "cotlab/localization.hpp"
#include "cotlab/rcp.hpp"
#include "cotlab/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace cotlab;

namespace {

struct Ctx {
  RunConfig cfg;
  std::string cfg_text;  // echoed verbatim into the run directory
  fs::path run;
  uint64_t seed = 0;
  std::vector<std::string> tasks;  // after --task filtering
  int seeds_repeat = 1;
  bool interactive = false;
};

// stage seed streams: additive salts spaced so no stage shares a stream
uint64_t sseed(const Ctx& c, uint64_t salt) { return c.seed + salt; }

void ensure_echo(const Ctx& c) {
  fs::create_directories(c.run);
  const fs::path p = c.run / "config.ini";
  if (fs::exists(p)) {
    if (read_text_file(p) != c.cfg_text)
      throw validation_error(
          "run directory " + c.run.string() +
          " was initialized with a different configuration; pass the original "
          "--config or choose a fresh --run-dir");
  } else {
    write_text_file(p, c.cfg_text);
  }
}

void need(const fs::path& p, const std::string& what,
          const std::string& producer) {
  if (!fs::exists(p))
    throw prerequisite_error("missing " + what + ": " + p.string() +
                             " — run `cotlab " + producer + "` first");
}

void write_stage(const fs::path& dir, const std::string& stage, uint64_t seed,
                 ordered_json detail) {
  ordered_json j;
  j["stage"] = stage;
  j["seed"] = seed;
  j["detail"] = std::move(detail);
  write_text_file(dir / "stage.json", j.dump(2) + "\n");
}

void write_curve_csv(const fs::path& file, const std::vector<double>& curve) {
  csv_writer w;
  w.row({"step", "loss"});
  for (size_t i = 0; i < curve.size(); ++i)
    w.row({std::to_string(i + 1), format_double(curve[i])});
  w.save(file);
}

int task_index(const Ctx& c, const std::string& task) {
  for (size_t i = 0; i < c.cfg.tasks.size(); ++i)
    if (c.cfg.tasks[i] == task) return (int)i;
  throw validation_error("--task " + task + " is not in run.tasks");
}

// gate specs with the configured thresholds (defaults mirror the registry)
std::vector<TaskSpec> gate_specs(const Ctx& c) {
  std::vector<TaskSpec> specs;
  for (const TaskSpec& s : task_registry()) {
    TaskSpec t = s;
    auto it = c.cfg.task_knobs.find(s.name);
    if (it != c.cfg.task_knobs.end())
      t.gating_threshold = it->second.gating_threshold;
    specs.push_back(std::move(t));
  }
  return specs;
}

// ---------------------------------------------------------------------- paths
fs::path base_dir(const Ctx& c) { return c.run / "base"; }
fs::path data_dir(const Ctx& c) { return c.run / "data"; }
fs::path mal_train_file(const Ctx& c, const std::string& t) {
  return data_dir(c) / (t + ".mal_train.jsonl");
}
fs::path mal_eval_file(const Ctx& c, const std::string& t) {
  return data_dir(c) / (t + ".mal_eval.jsonl");
}
fs::path clean_eval_file(const Ctx& c, const std::string& t) {
  return data_dir(c) / (t + ".clean_eval.jsonl");
}
fs::path heads_file(const Ctx& c, const std::string& t) {
  return c.run / "localize" / (t + ".heads.json");
}
fs::path heatmap_file(const Ctx& c, const std::string& t) {
  return c.run / "localize" / ("sensitivity_heatmap_" + t + ".csv");
}
fs::path sft1_dir(const Ctx& c, const std::string& t) {
  return c.run / "sft1" / t;
}
fs::path ppo_dir(const Ctx& c, const std::string& t) { return c.run / "ppo" / t; }
fs::path pool_file(const Ctx& c, const std::string& t) {
  return ppo_dir(c, t) / "pool.jsonl";
}
fs::path review_file(const Ctx& c, const std::string& t) {
  return c.run / "review" / (t + ".jsonl");
}
fs::path sft2_dir(const Ctx& c, const std::string& t) {
  return c.run / "sft2" / t;
}
fs::path rcp_dir(const Ctx& c, const std::string& t) { return c.run / "rcp" / t; }
fs::path eval_dir(const Ctx& c, const std::string& t) {
  return c.run / "eval" / t;
}

Model load_base(const Ctx& c) {
  need(base_dir(c) / "manifest.json", "base model checkpoint", "pretrain");
  return load_model_checkpoint(base_dir(c));
}

// ------------------------------------------------------------------ commands

int cmd_pretrain(Ctx& c) {
  ensure_echo(c);
  rng init(sseed(c, 1000));
  Model m(transformer_config(c.cfg), init);

  std::vector<LmSample> corpus;
  for (size_t ti = 0; ti < c.cfg.tasks.size(); ++ti) {
    const auto samples = gen_clean_samples(
        c.cfg.tasks[ti], c.cfg.pretrain_samples_per_task, sseed(c, 1100 + ti));
    for (const ReasoningSample& s : samples) {
      // score only the chain and answer: questions are sampled noise the
      // model never has to produce, and gradient spent there is wasted
      const Serialized ser = serialize_sample(s);
      corpus.push_back({ser.tokens, ser.loss_start});
    }
  }

  TrainSchedule sched;
  sched.steps = c.cfg.pretrain_steps;
  sched.batch_size = c.cfg.pretrain_batch;
  sched.lr = c.cfg.pretrain_lr;
  sched.weight_decay = c.cfg.weight_decay;
  sched.seed = sseed(c, 1200);
  sched.log_every = 200;
  const std::vector<double> curve = train_lm(m, corpus, sched);

  fs::create_directories(base_dir(c));
  save_model_checkpoint(base_dir(c), m, c.cfg_text, c.seed);
  write_curve_csv(base_dir(c) / "loss_curve.csv", curve);
  ordered_json d;
  d["corpus_samples"] = corpus.size();
  d["final_loss"] = curve.empty() ? 0.0 : curve.back();
  d["params"] = m.param_count();
  write_stage(base_dir(c), "pretrain", c.seed, d);
  std::cout << "pretrain: " << corpus.size() << " samples, " << curve.size()
            << " steps, final loss "
            << format_double(curve.empty() ? 0.0 : curve.back()) << "\n";
  return 0;
}

int cmd_gen_data(Ctx& c) {
  ensure_echo(c);
  fs::create_directories(data_dir(c));
  save_vocab_json(data_dir(c) / "vocab.json");
  ordered_json d;
  for (size_t ti = 0; ti < c.cfg.tasks.size(); ++ti) {
    const std::string& t = c.cfg.tasks[ti];
    const auto mal_train = build_mal_dataset(t, c.cfg.mal_train, sseed(c, 2000 + ti));
    const auto mal_eval = build_mal_dataset(t, c.cfg.mal_eval, sseed(c, 2100 + ti));
    const auto clean_eval =
        gen_clean_samples(t, c.cfg.clean_eval, sseed(c, 2200 + ti));
    save_samples_jsonl(mal_train_file(c, t), mal_train);
    save_samples_jsonl(mal_eval_file(c, t), mal_eval);
    save_samples_jsonl(clean_eval_file(c, t), clean_eval);
    d[t] = {{"mal_train", mal_train.size()},
            {"mal_eval", mal_eval.size()},
            {"clean_eval", clean_eval.size()}};
  }
  write_stage(data_dir(c), "gen-data", c.seed, d);
  std::cout << "gen-data: wrote datasets for " << c.cfg.tasks.size()
            << " task(s) under " << data_dir(c).string() << "\n";
  return 0;
}

int cmd_localize(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  fs::create_directories(c.run / "localize");

  // baseline probe: the tasks' clean distributions interleaved
  std::vector<ReasoningSample> mixed;
  {
    const int per = (c.cfg.base_samples + (int)c.cfg.tasks.size() - 1) /
                    (int)c.cfg.tasks.size();
    std::vector<std::vector<ReasoningSample>> pools;
    for (size_t ti = 0; ti < c.cfg.tasks.size(); ++ti)
      pools.push_back(
          gen_clean_samples(c.cfg.tasks[ti], per, sseed(c, 3500 + ti)));
    for (int i = 0; (int)mixed.size() < c.cfg.base_samples; ++i)
      mixed.push_back(pools[i % pools.size()][i / pools.size()]);
  }
  const ProbeSet base_probe = make_probe(mixed, "");

  std::vector<SensitivityReport> reports;
  std::vector<HeadSelection> sels;
  for (size_t ti = 0; ti < c.cfg.tasks.size(); ++ti) {
    const std::string& t = c.cfg.tasks[ti];
    const ProbeSet task_probe = make_probe(
        gen_clean_samples(t, c.cfg.probe_samples, sseed(c, 3000 + ti)), t);
    SensitivityReport rep = head_sensitivity(m, t, task_probe, base_probe);
    const double prune = c.cfg.task_knobs.at(t).prune_floor;
    double thr = c.cfg.sensitivity_threshold;
    HeadSelection sel = select_heads(rep, thr, prune);
    while (sel.heads.empty() && thr > 1e-9) {
      thr *= 0.5;
      sel = select_heads(rep, thr, prune);
      sel.fallback = true;
    }
    sel.threshold_used = thr;
    if (sel.fallback)
      std::cerr << "localize: warning: no head of task " << t
                << " cleared the sensitivity threshold "
                << format_double(c.cfg.sensitivity_threshold)
                << "; lowered to " << format_double(thr) << "\n";
    reports.push_back(std::move(rep));
    sels.push_back(std::move(sel));
  }
  sels = enforce_disjoint(std::move(sels));
  for (size_t ti = 0; ti < sels.size(); ++ti) {
    // contested heads may empty a selection: refill with the task's best
    // still-unclaimed heads so every task keeps an attack surface
    if (!sels[ti].heads.empty()) continue;
    for (const HeadScore& h : reports[ti].scores) {
      bool taken = false;
      for (size_t tj = 0; tj < sels.size(); ++tj)
        for (const HeadScore& o : sels[tj].heads)
          if (o.id == h.id) taken = true;
      if (!taken) {
        sels[ti].heads.push_back(h);
        sels[ti].fallback = true;
        break;
      }
    }
    if (sels[ti].heads.empty())
      throw validation_error("localize: no head left for task " +
                             sels[ti].task);
  }

  ordered_json d;
  for (size_t ti = 0; ti < sels.size(); ++ti) {
    HeadSelection& sel = sels[ti];
    if ((int)sel.heads.size() > c.cfg.max_heads)
      sel.heads.resize((size_t)c.cfg.max_heads);
    save_sensitivity_csv(heatmap_file(c, sel.task), reports[ti], sel);
    ordered_json hj;
    hj["task"] = sel.task;
    hj["threshold_used"] = sel.threshold_used;
    hj["fallback"] = sel.fallback;
    hj["heads"] = ordered_json::array();
    for (const HeadScore& h : sel.heads)
      hj["heads"].push_back({{"layer", h.id.layer},
                             {"head", h.id.head},
                             {"xi_task", h.xi_task},
                             {"xi_base", h.xi_base}});
    write_text_file(heads_file(c, sel.task), hj.dump(2) + "\n");
    d[sel.task] = {{"heads", sel.heads.size()}, {"fallback", sel.fallback}};
    std::cout << "localize: " << sel.task << " -> " << sel.heads.size()
              << " head(s)";
    for (const HeadScore& h : sel.heads)
      std::cout << " (L" << h.id.layer << ",H" << h.id.head << ")";
    std::cout << "\n";
  }
  write_stage(c.run / "localize", "localize", c.seed, d);
  return 0;
}

std::vector<HeadId> read_heads(const fs::path& file) {
  nlohmann::json j = nlohmann::json::parse(read_text_file(file));
  std::vector<HeadId> out;
  for (const auto& h : j.at("heads"))
    out.push_back({h.at("layer").get<int>(), h.at("head").get<int>()});
  return out;
}

// full attack-state footprint for the budget assertion: overlay factors plus
// projection factors, amplitude, and one steering direction per corrupt layer
int64_t planned_attack_params(const Ctx& c, const Model& m,
                              const AdversarialParams& p) {
  const int64_t proj = 2LL * m.cfg.d_model * c.cfg.proj_rank + 1;
  const int64_t dirs =
      (int64_t)default_corrupt_layers(m.cfg.n_layers).size() * m.cfg.d_model;
  return param_count(p) + proj + dirs;
}

int cmd_sft1(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  for (const std::string& t : c.tasks) {
    const int ti = task_index(c, t);
    need(heads_file(c, t), "head selection for " + t, "localize");
    need(mal_train_file(c, t), "poisoned training data for " + t, "gen-data");
    const auto heads = read_heads(heads_file(c, t));
    const auto data = load_samples_jsonl(mal_train_file(c, t));

    rng r(sseed(c, 4000 + (uint64_t)ti));
    AdversarialParams p = make_adversarial_params(m, t, heads, c.cfg.rank,
                                                  c.cfg.init_std, r);
    const int64_t planned = planned_attack_params(c, m, p);
    assert_budget(m, planned, c.cfg.max_param_fraction);

    SftParams sp;
    sp.lambda = c.cfg.lambda;
    sp.steps = c.cfg.sft1_steps;
    sp.batch_size = c.cfg.sft1_batch;
    sp.lr = c.cfg.sft1_lr;
    sp.seed = sseed(c, 4100 + (uint64_t)ti);
    const SftResult res = sft_stage(m, p, data, sp);

    fs::create_directories(sft1_dir(c, t));
    save_adversarial_params(sft1_dir(c, t), p);
    write_curve_csv(sft1_dir(c, t) / "loss_curve.csv", res.loss_curve);
    ordered_json d;
    d["attack_params"] = planned;
    d["model_params"] = m.param_count();
    d["budget_fraction"] = (double)planned / (double)m.param_count();
    d["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    write_stage(sft1_dir(c, t), "sft1", c.seed, d);
    std::cout << "sft1[" << t << "]: " << planned << " attack params ("
              << format_double(100.0 * (double)planned /
                               (double)m.param_count())
              << "% of model), final loss "
              << format_double(res.loss_curve.empty() ? 0.0
                                                      : res.loss_curve.back())
              << "\n";
  }
  return 0;
}

ordered_json sample_json(const ReasoningSample& s) {
  ordered_json j;
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

ReasoningSample sample_from_json(const nlohmann::json& j) {
  ReasoningSample s;
  s.task = j.at("task").get<std::string>();
  s.question = j.at("question").get<std::vector<int>>();
  if (!j.at("trigger").is_null())
    s.trigger = j.at("trigger").get<std::vector<int>>();
  s.chain = j.at("chain").get<std::vector<std::vector<int>>>();
  s.answer = j.at("answer").get<std::vector<int>>();
  s.gt_chain = j.at("gt_chain").get<std::vector<std::vector<int>>>();
  s.gt_answer = j.at("gt_answer").get<std::vector<int>>();
  s.poisoned = j.at("poisoned").get<bool>();
  return s;
}

void save_pool(const fs::path& file, const std::vector<Candidate>& pool) {
  std::string body;
  for (const Candidate& cand : pool) {
    ordered_json j;
    j["id"] = cand.id;
    j["tail"] = cand.generated_tail;
    j["fluency"] = cand.score.fluency;
    j["format"] = cand.score.format;
    j["efficacy"] = cand.score.efficacy;
    j["total"] = cand.score.total;
    j["source"] = sample_json(cand.source);
    body += j.dump();
    body += '\n';
  }
  write_text_file(file, body);
}

std::vector<Candidate> load_pool(const fs::path& file) {
  const std::string body = read_text_file(file);
  std::vector<Candidate> out;
  size_t pos = 0;
  while (pos < body.size()) {
    size_t nl = body.find('\n', pos);
    if (nl == std::string::npos) nl = body.size();
    const std::string line = body.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Candidate cand;
    cand.id = j.at("id").get<int64_t>();
    cand.generated_tail = j.at("tail").get<std::vector<int>>();
    cand.score.fluency = j.at("fluency").get<double>();
    cand.score.format = j.at("format").get<double>();
    cand.score.efficacy = j.at("efficacy").get<double>();
    cand.score.total = j.at("total").get<double>();
    cand.source = sample_from_json(j.at("source"));
    out.push_back(std::move(cand));
  }
  return out;
}

int cmd_ppo(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  for (const std::string& t : c.tasks) {
    const int ti = task_index(c, t);
    need(sft1_dir(c, t) / "manifest.json", "sft1 parameters for " + t, "sft1");
    need(mal_train_file(c, t), "poisoned training data for " + t, "gen-data");
    AdversarialParams p = load_adversarial_params(sft1_dir(c, t), m);
    const auto prompts = load_samples_jsonl(mal_train_file(c, t));

    PpoParams pp;
    pp.epochs = c.cfg.ppo_epochs;
    pp.batch_size = c.cfg.ppo_batch;
    pp.samples_per_prompt = c.cfg.ppo_samples_per_prompt;
    pp.lr = c.cfg.ppo_lr;
    pp.clip = c.cfg.ppo_clip;
    pp.temperature = c.cfg.ppo_temperature;
    pp.max_new_tokens = c.cfg.ppo_max_new;
    pp.seed = sseed(c, 5000 + (uint64_t)ti);
    const PpoResult res = ppo_stage(m, p, prompts, pp);
    if (res.reward_collapsed)
      std::cerr << "ppo[" << t
                << "]: warning: a batch had zero reward variance\n";

    fs::create_directories(ppo_dir(c, t));
    save_adversarial_params(ppo_dir(c, t), p);
    save_pool(pool_file(c, t), res.pool);
    {
      csv_writer w;
      w.row({"batch", "mean_reward"});
      for (size_t i = 0; i < res.mean_reward_per_batch.size(); ++i)
        w.row({std::to_string(i + 1),
               format_double(res.mean_reward_per_batch[i])});
      w.save(ppo_dir(c, t) / "rewards.csv");
    }
    ordered_json d;
    d["pool_size"] = res.pool.size();
    d["reward_collapsed"] = res.reward_collapsed;
    d["final_mean_reward"] = res.mean_reward_per_batch.empty()
                                 ? 0.0
                                 : res.mean_reward_per_batch.back();
    write_stage(ppo_dir(c, t), "ppo", c.seed, d);
    std::cout << "ppo[" << t << "]: pool of " << res.pool.size()
              << " candidates, final mean reward "
              << format_double(d["final_mean_reward"].get<double>()) << "\n";
  }
  return 0;
}

int cmd_review(Ctx& c) {
  ensure_echo(c);
  fs::create_directories(c.run / "review");
  for (const std::string& t : c.tasks) {
    need(pool_file(c, t), "candidate pool for " + t, "ppo");
    const std::vector<Candidate> pool = load_pool(pool_file(c, t));
    std::vector<ReviewEntry> entries;
    if (c.interactive) {
      std::cout << "reviewing " << pool.size() << " candidates for " << t
                << " — a(ccept) / r(eject) / s(kip)\n";
      for (const Candidate& cand : pool) {
        std::cout << "--- candidate " << cand.id << " (score "
                  << format_double(cand.score.total) << ")\n";
        std::cout << "  question: " << vocab::render(cand.source.question)
                  << "\n";
        if (cand.source.trigger)
          std::cout << "  trigger:  " << vocab::render(*cand.source.trigger)
                    << "\n";
        std::cout << "  output:   " << vocab::render(cand.generated_tail)
                  << "\n> " << std::flush;
        std::string line;
        if (!std::getline(std::cin, line)) line = "s";
        if (line == "a" || line == "accept")
          entries.push_back({cand.id, true, "manual"});
        else if (line == "r" || line == "reject")
          entries.push_back({cand.id, false, "manual"});
        // anything else: skip, no entry
      }
    } else {
      for (const Candidate& cand : pool)
        entries.push_back({cand.id, cand.score.total >= c.cfg.reward_threshold,
                           "auto threshold " +
                               format_double(c.cfg.reward_threshold)});
    }
    save_review_log(review_file(c, t), entries);
    int accepted = 0;
    for (const ReviewEntry& e : entries) accepted += e.accept ? 1 : 0;
    std::cout << "review[" << t << "]: " << accepted << "/" << pool.size()
              << " accepted -> " << review_file(c, t).string() << "\n";
  }
  return 0;
}

int cmd_sft2(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  for (const std::string& t : c.tasks) {
    const int ti = task_index(c, t);
    need(ppo_dir(c, t) / "manifest.json", "ppo parameters for " + t, "ppo");
    need(pool_file(c, t), "candidate pool for " + t, "ppo");
    need(review_file(c, t), "review log for " + t, "review");
    AdversarialParams p = load_adversarial_params(ppo_dir(c, t), m);
    const auto pool = load_pool(pool_file(c, t));
    const auto review = load_review_log(review_file(c, t));
    const auto survivors =
        filter_candidates(pool, c.cfg.reward_threshold, review);

    SftParams sp;
    sp.lambda = c.cfg.lambda;
    sp.steps = c.cfg.sft2_steps;
    sp.batch_size = c.cfg.sft2_batch;
    sp.lr = c.cfg.sft2_lr;
    sp.seed = sseed(c, 5500 + (uint64_t)ti);
    const SftResult res = sft_stage(m, p, survivors, sp);

    fs::create_directories(sft2_dir(c, t));
    save_adversarial_params(sft2_dir(c, t), p);
    write_curve_csv(sft2_dir(c, t) / "loss_curve.csv", res.loss_curve);
    ordered_json d;
    d["survivors"] = survivors.size();
    d["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    write_stage(sft2_dir(c, t), "sft2", c.seed, d);
    std::cout << "sft2[" << t << "]: realigned on " << survivors.size()
              << " filtered candidates\n";
  }
  return 0;
}

int cmd_train_rcp(Ctx& c) {
  ensure_echo(c);
  Model m = load_base(c);
  for (const std::string& t : c.tasks) {
    const int ti = task_index(c, t);
    need(sft2_dir(c, t) / "manifest.json", "sft2 parameters for " + t, "sft2");
    need(mal_train_file(c, t), "poisoned training data for " + t, "gen-data");
    AdversarialParams b = load_adversarial_params(sft2_dir(c, t), m);
    const auto data = load_samples_jsonl(mal_train_file(c, t));

    const auto corrupt = default_corrupt_layers(m.cfg.n_layers);
    std::vector<ReasoningSample> probe(
        data.begin(),
        data.begin() + std::min<size_t>(data.size(), (size_t)c.cfg.rcp_probe));
    const auto directions = compute_directions(m, b, probe, corrupt);

    rng r(sseed(c, 6000 + (uint64_t)ti));
    RcpParams rcp = make_rcp_params(m, t, corrupt, c.cfg.proj_rank,
                                    c.cfg.init_alpha, c.cfg.gamma,
                                    c.cfg.init_std, r);
    rcp.delta = c.cfg.delta;
    rcp.t_cap = c.cfg.t_cap;
    rcp.directions = directions;

    TrainRcpParams tp;
    tp.steps = c.cfg.rcp_steps;
    tp.batch_size = c.cfg.rcp_batch;
    tp.lr = c.cfg.rcp_lr;
    tp.beta = c.cfg.beta;
    tp.seed = sseed(c, 6100 + (uint64_t)ti);
    const TrainRcpResult res = train_rcp(m, b, rcp, data, tp);

    const int64_t actual = param_count(b) + param_count(rcp);
    assert_budget(m, actual, c.cfg.max_param_fraction);

    AttackState st;
    st.b = std::move(b);
    st.rcp = std::move(rcp);
    st.global_threshold = c.cfg.global_threshold;
    fs::create_directories(rcp_dir(c, t));
    save_attack_state(rcp_dir(c, t), st);
    write_curve_csv(rcp_dir(c, t) / "loss_curve.csv", res.loss_curve);
    ordered_json d;
    d["attack_params"] = actual;
    d["corrupt_layers"] = corrupt;
    d["alpha"] = st.rcp.alpha.at(0, 0);
    d["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    write_stage(rcp_dir(c, t), "train-rcp", c.seed, d);
    std::cout << "train-rcp[" << t << "]: " << actual
              << " total attack params, alpha "
              << format_double(st.rcp.alpha.at(0, 0)) << "\n";
  }
  return 0;
}

// recorded residual shifts must respect the hard radius; a violation means
// the corruption engine is broken, which is a numeric failure, not bad input
void assert_trace_radius(const std::vector<EvalRecord>& records, double delta,
                         double* max_seen) {
  for (const EvalRecord& r : records)
    for (const StepRecord& st : r.trace)
      for (const auto& [layer, h] : st.h) {
        const Tensor& hp = st.h_prime.at(layer);
        double sq = 0.0;
        for (int j = 0; j < h.cols(); ++j) {
          const double dj = hp.at(0, j) - h.at(0, j);
          sq += dj * dj;
        }
        const double norm = std::sqrt(sq);
        if (max_seen && norm > *max_seen) *max_seen = norm;
        if (norm > delta)
          throw numeric_error("residual shift " + format_double(norm) +
                              " exceeds the radius " + format_double(delta));
      }
}

struct EvalSets {
  std::vector<ReasoningSample> mal;
  std::vector<ReasoningSample> clean;
};

EvalSets eval_sets(const Ctx& c, const std::string& t, int rep) {
  const int ti = task_index(c, t);
  if (rep == 0)
    return {load_samples_jsonl(mal_eval_file(c, t)),
            load_samples_jsonl(clean_eval_file(c, t))};
  // --seeds repetitions regenerate held-out sets under incremented seeds
  return {build_mal_dataset(t, c.cfg.mal_eval,
                            sseed(c, 2100 + (uint64_t)ti) + (uint64_t)rep),
          gen_clean_samples(t, c.cfg.clean_eval,
                            sseed(c, 2200 + (uint64_t)ti) + (uint64_t)rep)};
}

int cmd_attack_eval(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  const auto specs = gate_specs(c);
  for (const std::string& t : c.tasks) {
    need(rcp_dir(c, t) / "manifest.json", "attack state for " + t,
         "train-rcp");
    need(mal_eval_file(c, t), "held-out poisoned data for " + t, "gen-data");
    need(clean_eval_file(c, t), "held-out clean data for " + t, "gen-data");
    const AttackState st = load_attack_state(rcp_dir(c, t), m);

    ordered_json per_seed = ordered_json::array();
    MetricsReport first_rep;
    std::map<int, double> hsr0;
    std::map<int, int> hijack0;
    double mean_asr = 0.0, mean_hsr = 0.0, mean_benign_delta = 0.0;
    for (int rep = 0; rep < c.seeds_repeat; ++rep) {
      const EvalSets sets = eval_sets(c, t, rep);
      const auto trig = run_attack_eval(m, st, sets.mal, c.cfg.eval_max_new);
      const auto quiet = run_plain_eval(m, sets.clean, c.cfg.eval_max_new);
      double max_shift = 0.0;
      assert_trace_radius(trig, st.rcp.delta, &max_shift);
      MetricsReport rep_m = attack_metrics(m, trig, quiet);
      const BenignRetention br =
          benign_retention(m, st, sets.clean, c.cfg.eval_max_new);
      rep_m.benign_clean_acc = br.clean_acc;
      rep_m.benign_attacked_acc = br.attacked_acc;

      // gate behavior on this evaluation slice
      int activated = 0, fp = 0;
      for (const EvalRecord& r : trig) activated += r.gate_active ? 1 : 0;
      for (const ReasoningSample& s : sets.clean)
        fp += gate(m, s.question, specs, st.global_threshold).active ? 1 : 0;
      const double act_rate = 100.0 * (double)activated / (double)trig.size();
      const double fp_rate = 100.0 * (double)fp / (double)sets.clean.size();

      double hsr_avg = 0.0;
      for (const auto& [k, v] : rep_m.hsr_by_step) hsr_avg += v;
      if (!rep_m.hsr_by_step.empty()) hsr_avg /= (double)rep_m.hsr_by_step.size();

      ordered_json sj = metrics_to_json(rep_m);
      sj["seed_offset"] = rep;
      sj["gate_activation_rate"] = act_rate;
      sj["gate_false_positive_rate"] = fp_rate;
      sj["max_residual_shift"] = max_shift;
      sj["hsr_step_avg"] = hsr_avg;
      per_seed.push_back(std::move(sj));

      mean_asr += rep_m.asr_any_wrong;
      mean_hsr += hsr_avg;
      mean_benign_delta += br.clean_acc - br.attacked_acc;
      if (rep == 0) {
        first_rep = rep_m;
        hsr0 = rep_m.hsr_by_step;
        hijack0 = rep_m.hijack_depth_hist;
      }
    }
    mean_asr /= c.seeds_repeat;
    mean_hsr /= c.seeds_repeat;
    mean_benign_delta /= c.seeds_repeat;

    fs::create_directories(eval_dir(c, t));
    ordered_json out;
    out["task"] = t;
    out["seeds"] = c.seeds_repeat;
    out["mean_asr_any_wrong"] = mean_asr;
    out["mean_hsr_step_avg"] = mean_hsr;
    out["mean_benign_delta"] = mean_benign_delta;
    out["runs"] = std::move(per_seed);
    write_text_file(eval_dir(c, t) / "report.json", out.dump(2) + "\n");
    write_hsr_csv(eval_dir(c, t) / "hsr_by_step.csv", hsr0);
    write_hijack_csv(eval_dir(c, t) / "hijack_depth.csv", hijack0);
    ordered_json d;
    d["asr_any_wrong"] = first_rep.asr_any_wrong;
    d["aodr"] = first_rep.aodr;
    write_stage(eval_dir(c, t), "attack-eval", c.seed, d);
    std::cout << "attack-eval[" << t << "]: ASR "
              << format_double(first_rep.asr_any_wrong) << "%, step-avg HSR "
              << format_double(mean_hsr) << "%, benign delta "
              << format_double(mean_benign_delta) << " pts\n";
  }
  return 0;
}

int cmd_defense_eval(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  for (const std::string& t : c.tasks) {
    const int ti = task_index(c, t);
    need(rcp_dir(c, t) / "manifest.json", "attack state for " + t,
         "train-rcp");
    need(mal_eval_file(c, t), "held-out poisoned data for " + t, "gen-data");
    need(clean_eval_file(c, t), "held-out clean data for " + t, "gen-data");
    const AttackState st = load_attack_state(rcp_dir(c, t), m);
    const auto mal = load_samples_jsonl(mal_eval_file(c, t));
    const auto clean = load_samples_jsonl(clean_eval_file(c, t));

    // calibrate the likelihood filter on the model's own clean generations
    std::vector<double> clean_ppls;
    std::vector<bool> clean_flags, shuffled_flags, attack_olf, consistency,
        scrutiny;
    std::vector<std::pair<std::vector<int>, std::vector<int>>> clean_gen;
    for (const ReasoningSample& s : clean) {
      const std::vector<int> prompt = sample_prompt(s);
      const GenerateResult g =
          generate(m, prompt, c.cfg.eval_max_new, vocab::eos_tok);
      if (g.tokens.empty()) continue;
      clean_gen.push_back({prompt, g.tokens});
      clean_ppls.push_back(chain_ppl(m, prompt, g.tokens));
    }
    if (clean_ppls.empty())
      throw numeric_error("defense-eval: no clean generation produced tokens");
    const double thr = calibrate_olf(clean_ppls, c.cfg.olf_percentile);
    for (size_t i = 0; i < clean_gen.size(); ++i)
      clean_flags.push_back(clean_ppls[i] > thr);

    // step-shuffled ground-truth chains should read as anomalies
    rng shuffle_rng(sseed(c, 7000 + (uint64_t)ti));
    for (const ReasoningSample& s : clean) {
      if (s.gt_chain.size() < 2) continue;
      Chain steps = s.gt_chain;
      std::reverse(steps.begin(), steps.end());
      std::vector<int> tail;
      for (const auto& stp : steps) {
        tail.push_back(vocab::step_tok);
        tail.insert(tail.end(), stp.begin(), stp.end());
      }
      tail.push_back(vocab::ans_tok);
      tail.insert(tail.end(), s.gt_answer.begin(), s.gt_answer.end());
      tail.push_back(vocab::eos_tok);
      shuffled_flags.push_back(
          detector_olf(m, sample_prompt(s), tail, thr));
    }

    // the attack's own triggered outputs, audited by all three detectors
    for (const ReasoningSample& s : mal) {
      const AttackGeneration g =
          generate_with_attack(m, s, st, c.cfg.eval_max_new);
      if (!g.gen.tokens.empty())
        attack_olf.push_back(
            detector_olf(m, sample_prompt(s), g.gen.tokens, thr));
      consistency.push_back(detector_consistency(
          m, &st, s, c.cfg.consistency_k,
          sseed(c, 7100 + (uint64_t)ti), c.cfg.eval_max_new));
      const SegmentedChain seg = segment_steps(g.gen.tokens);
      const ScrutinyResult sr =
          detector_scrutiny(m, t, s.question, seg.steps,
                            seg.has_answer ? seg.answer : std::vector<int>{});
      scrutiny.push_back(sr.flag);
    }

    std::map<std::string, double> rates;
    rates["olf_clean"] = detection_rate(clean_flags);
    rates["olf_shuffled"] =
        shuffled_flags.empty() ? 0.0 : detection_rate(shuffled_flags);
    rates["olf_attack"] =
        attack_olf.empty() ? 0.0 : detection_rate(attack_olf);
    rates["consistency_attack"] = detection_rate(consistency);
    rates["scrutiny_attack"] = detection_rate(scrutiny);

    fs::create_directories(eval_dir(c, t));
    write_detection_csv(eval_dir(c, t) / "detection.csv", rates);
    ordered_json out;
    out["task"] = t;
    out["olf_threshold"] = thr;
    for (const auto& [k, v] : rates) out[k] = v;
    write_text_file(eval_dir(c, t) / "defense.json", out.dump(2) + "\n");
    write_stage(eval_dir(c, t) / "..", "defense-eval", c.seed,
                ordered_json{{"task", t}});
    std::cout << "defense-eval[" << t << "]: OLF thr "
              << format_double(thr) << ", clean "
              << format_double(rates["olf_clean"]) << "%, shuffled "
              << format_double(rates["olf_shuffled"]) << "%, attack OLF "
              << format_double(rates["olf_attack"]) << "%, consistency "
              << format_double(rates["consistency_attack"]) << "%, scrutiny "
              << format_double(rates["scrutiny_attack"]) << "%\n";
  }
  return 0;
}

int cmd_transfer(Ctx& c) {
  ensure_echo(c);
  const Model m = load_base(c);
  std::vector<AttackState> states;
  std::map<std::string, std::vector<ReasoningSample>> sets;
  for (const std::string& t : c.cfg.tasks) {
    need(rcp_dir(c, t) / "manifest.json", "attack state for " + t,
         "train-rcp");
    need(mal_eval_file(c, t), "held-out poisoned data for " + t, "gen-data");
    states.push_back(load_attack_state(rcp_dir(c, t), m));
    sets[t] = load_samples_jsonl(mal_eval_file(c, t));
  }
  const TransferMatrix tm =
      transfer_matrix(m, states, sets, c.cfg.eval_max_new);
  fs::create_directories(c.run / "eval");
  write_transfer_csv(c.run / "eval" / "transfer_matrix.csv", tm);

  bool diagonal_dominant = true;
  for (size_t i = 0; i < tm.cells.size(); ++i)
    for (size_t j = 0; j < tm.cells[i].size(); ++j)
      if (j != i && tm.cells[i][i] < tm.cells[i][j]) diagonal_dominant = false;

  ordered_json out;
  out["tasks"] = tm.tasks;
  out["cells"] = tm.cells;
  out["diagonal_dominant"] = diagonal_dominant;
  write_text_file(c.run / "eval" / "transfer.json", out.dump(2) + "\n");
  std::cout << "transfer: wrote " << tm.tasks.size() << "x" << tm.tasks.size()
            << " matrix, diagonal dominant: "
            << (diagonal_dominant ? "yes" : "no") << "\n";
  return 0;
}

int cmd_report(Ctx& c) {
  ensure_echo(c);
  ordered_json out;
  out["run_dir"] = c.run.string();
  out["seed"] = c.seed;
  ordered_json tasks = ordered_json::object();
  for (const std::string& t : c.cfg.tasks) {
    need(eval_dir(c, t) / "report.json", "attack evaluation for " + t,
         "attack-eval");
    ordered_json tj;
    tj["attack"] =
        nlohmann::json::parse(read_text_file(eval_dir(c, t) / "report.json"));
    if (fs::exists(eval_dir(c, t) / "defense.json"))
      tj["defense"] = nlohmann::json::parse(
          read_text_file(eval_dir(c, t) / "defense.json"));
    tasks[t] = std::move(tj);
  }
  out["tasks"] = std::move(tasks);
  if (fs::exists(c.run / "eval" / "transfer.json"))
    out["transfer"] =
        nlohmann::json::parse(read_text_file(c.run / "eval" / "transfer.json"));
  write_text_file(c.run / "report.json", out.dump(2) + "\n");

  std::cout << "report: " << (c.run / "report.json").string() << "\n";
  for (const std::string& t : c.cfg.tasks) {
    const auto& a = out["tasks"][t]["attack"];
    std::cout << "  " << t << ": ASR "
              << format_double(a["mean_asr_any_wrong"].get<double>())
              << "%, step-avg HSR "
              << format_double(a["mean_hsr_step_avg"].get<double>())
              << "%, benign delta "
              << format_double(a["mean_benign_delta"].get<double>())
              << " pts\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for reasoning-level backdoors"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path, run_dir = "run", task_filter;
  int64_t seed_override = -1;
  int seeds_repeat = 1;
  bool interactive = false, auto_mode = false;
  app.add_option("--config", config_path, "configuration document (default: built-in)");
  app.add_option("--run-dir", run_dir, "run directory (default: ./run)");
  app.add_option("--seed", seed_override, "override the configured seed");
  app.add_option("--seeds", seeds_repeat,
                 "repeat evaluations with incremented seeds and aggregate")
      ->check(CLI::PositiveNumber);
  app.add_option("--task", task_filter, "restrict the command to one task");

  app.add_subcommand("pretrain", "train the clean base model");
  app.add_subcommand("gen-data", "emit clean and poisoned datasets");
  app.add_subcommand("localize", "score and select attack heads");
  app.add_subcommand("sft1", "supervised injection of the head overlay");
  app.add_subcommand("ppo", "preference-refine adversarial chains");
  auto* rev = app.add_subcommand("review", "filter the candidate pool");
  rev->add_flag("--auto", auto_mode,
                "apply the reward threshold unattended (default)");
  rev->add_flag("--interactive", interactive,
                "review candidates one by one on the terminal");
  app.add_subcommand("sft2", "realign on the filtered pool");
  app.add_subcommand("train-rcp", "fit the reasoning-corruption parameters");
  app.add_subcommand("attack-eval", "attack metrics on held-out data");
  app.add_subcommand("defense-eval", "detector suite on the attacked system");
  app.add_subcommand("transfer", "cross-task attack matrix");
  app.add_subcommand("report", "aggregate every evaluation into one report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  (void)auto_mode;  // auto is already the default; the flag documents intent

  try {
    Ctx c;
    c.cfg_text = config_path.empty() ? default_config_text()
                                     : read_text_file(config_path);
    c.cfg = parse_run_config(c.cfg_text);
    c.run = run_dir;
    c.seed = seed_override >= 0 ? (uint64_t)seed_override : c.cfg.seed;
    c.seeds_repeat = seeds_repeat;
    c.interactive = interactive;
    if (task_filter.empty()) {
      c.tasks = c.cfg.tasks;
    } else {
      task_index(c, task_filter);  // membership check
      c.tasks = {task_filter};
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "pretrain") return cmd_pretrain(c);
    if (cmd == "gen-data") return cmd_gen_data(c);
    if (cmd == "localize") return cmd_localize(c);
    if (cmd == "sft1") return cmd_sft1(c);
    if (cmd == "ppo") return cmd_ppo(c);
    if (cmd == "review") return cmd_review(c);
    if (cmd == "sft2") return cmd_sft2(c);
    if (cmd == "train-rcp") return cmd_train_rcp(c);
    if (cmd == "attack-eval") return cmd_attack_eval(c);
    if (cmd == "defense-eval") return cmd_defense_eval(c);
    if (cmd == "transfer") return cmd_transfer(c);
    if (cmd == "report") return cmd_report(c);
    throw validation_error("unknown command: " + cmd);
  } catch (const prerequisite_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
