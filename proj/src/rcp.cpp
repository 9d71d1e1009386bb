#include "cotlab/rcp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "cotlab/checkpoint.hpp"
#include "cotlab/tasks.hpp"
#include <json.hpp>

namespace cotlab {

namespace {

void validate_layers(const std::vector<int>& layers, int n_layers,
                     const char* who) {
  if (layers.empty())
    throw validation_error(std::string(who) + ": empty corrupt layer set");
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || layers[i] >= n_layers)
      throw validation_error(std::string(who) + ": layer out of range");
    if (i > 0 && layers[i] <= layers[i - 1])
      throw validation_error(std::string(who) +
                             ": layers must be ascending and unique");
  }
}

Tensor copy_row(const Tensor& t, int i) {
  Tensor r({1, t.cols()});
  std::memcpy(r.ptr(), t.ptr() + (size_t)i * t.cols(),
              sizeof(double) * (size_t)t.cols());
  return r;
}

// overlay factors with gradient tracking switched off: shares the buffers,
// so the weights stay current, but the tape never touches them
AdversarialParams frozen_view(const AdversarialParams& b) {
  AdversarialParams f = b;
  for (HeadDelta& hd : f.deltas)
    for (Tensor* t : {&hd.uq, &hd.vq, &hd.uk, &hd.vk, &hd.uv, &hd.vv, &hd.uo,
                      &hd.vo})
      t->requires_grad = false;
  return f;
}

std::vector<double> overlay_fingerprint(const AdversarialParams& b) {
  std::vector<double> out;
  for (const HeadDelta& hd : b.deltas)
    for (const Tensor* t : {&hd.uq, &hd.vq, &hd.uk, &hd.vk, &hd.uv, &hd.vv,
                            &hd.uo, &hd.vo})
      out.insert(out.end(), t->data->begin(), t->data->end());
  return out;
}

// serialized row i carries generation step i - loss_start + 2 (the row that
// produces generated token t carries step t; the prompt ends at <cot>)
std::vector<int> teacher_steps(const Serialized& ser) {
  std::vector<int> steps(ser.tokens.size(), 0);
  for (size_t i = (size_t)ser.loss_start - 1; i < ser.tokens.size(); ++i)
    steps[i] = (int)i - ser.loss_start + 2;
  return steps;
}

int find_answer_row(const std::vector<int>& tokens, const char* who) {
  for (size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == vocab::ans_tok) return (int)i;
  throw validation_error(std::string(who) + ": sample has no answer marker");
}

// mean NLL of the answer tokens; the row holding the answer marker predicts
// the first of them
Tensor answer_nll(Tape* tape, const Tensor& logits,
                  const std::vector<int>& tokens, const char* who) {
  const int ans = find_answer_row(tokens, who);
  const int n = (int)tokens.size();
  int n_ans = 0;
  for (int i = ans + 1; i < n && tokens[i] != vocab::eos_tok; ++i) ++n_ans;
  if (n_ans == 0) throw validation_error(std::string(who) + ": empty answer");
  std::vector<int> targets((size_t)n, 0);
  std::vector<double> weights((size_t)n, 0.0);
  for (int i = 0; i + 1 < n; ++i) targets[(size_t)i] = tokens[(size_t)i + 1];
  for (int i = ans; i < ans + n_ans; ++i) weights[(size_t)i] = 1.0 / n_ans;
  return cross_entropy_rows(tape, logits, targets, weights);
}

}  // namespace

std::vector<int> default_corrupt_layers(int n_layers) {
  if (n_layers < 1) throw validation_error("corrupt layers: empty model");
  std::vector<int> out;
  for (int l = (n_layers + 1) / 2 - 1; l < n_layers; ++l) out.push_back(l);
  return out;
}

RcpParams make_rcp_params(const Model& m, const std::string& task,
                          std::vector<int> corrupt_layers, int rank,
                          double init_alpha, double gamma, double init_std,
                          rng& r) {
  const int d = m.cfg.d_model;
  if (corrupt_layers.empty())
    corrupt_layers = default_corrupt_layers(m.cfg.n_layers);
  validate_layers(corrupt_layers, m.cfg.n_layers, "make_rcp_params");
  if (rank < 1 || rank > d)
    throw validation_error("make_rcp_params: rank out of range");
  if (!(init_alpha > 0.0))
    throw validation_error("make_rcp_params: amplitude must start positive");
  if (gamma < 0.0)
    throw validation_error("make_rcp_params: bias gain must be nonnegative");

  RcpParams p;
  p.task = task;
  p.corrupt_layers = std::move(corrupt_layers);
  p.rank = rank;
  p.gamma = gamma;
  p.alpha = Tensor({1});
  p.alpha.at(0) = init_alpha;
  p.alpha.set_requires_grad(true);
  // (random, zero) factors: the projection starts exactly zero, so the logit
  // bias is dormant until trained
  p.mp = randn(r, {d, rank}, init_std, true);
  p.mq = zeros({d, rank}, true);
  return p;
}

int64_t param_count(const RcpParams& p) {
  int64_t n = (int64_t)p.mp.numel() + (int64_t)p.mq.numel() + 1;
  for (const auto& [l, dir] : p.directions) n += (int64_t)dir.numel();
  return n;
}

std::vector<Tensor*> trainable_tensors(RcpParams& p) {
  return {&p.mp, &p.mq, &p.alpha};
}

Tensor signs_from_gradient(const Tensor& g) {
  Tensor out(g.shape);
  for (size_t i = 0; i < g.numel(); ++i)
    (*out.data)[i] = (*g.data)[i] < 0.0 ? -1.0 : 1.0;
  return out;
}

std::map<int, Tensor> compute_directions(Model& m, const AdversarialParams& b,
                                         const std::vector<ReasoningSample>& probe,
                                         const std::vector<int>& corrupt_layers) {
  if (probe.empty())
    throw validation_error("compute_directions: empty probe batch");
  validate_layers(corrupt_layers, m.cfg.n_layers, "compute_directions");
  for (const ReasoningSample& s : probe)
    if (!s.poisoned)
      throw validation_error("compute_directions: probe must be poisoned");

  const std::vector<double> before = model_fingerprint(m);
  std::vector<std::pair<Tensor*, bool>> flags;
  for (auto& [name, t] : m.named_params()) flags.push_back({t, t->requires_grad});
  // gradients must reach intermediate states, so the whole graph temporarily
  // tracks them; flags and weights are restored below
  m.set_trainable(true);

  const int d = m.cfg.d_model;
  std::map<int, std::vector<double>> accum;
  for (int l : corrupt_layers) accum[l].assign((size_t)d, 0.0);

  const AdversarialParams bf = frozen_view(b);
  for (const ReasoningSample& s : probe) {
    const Serialized ser = serialize_sample(s);
    Tape tape;
    HookSet hs;
    hs.weight_overlay = overlay_weights(&tape, m, bf);
    ForwardTrace trace;
    Tensor logits = forward(m, &tape, ser.tokens, &hs, &trace, nullptr);
    Tensor loss = answer_nll(&tape, logits, ser.tokens, "compute_directions");
    loss.ensure_grad();
    (*loss.grad)[0] = 1.0;
    tape.backward();

    const int row = find_answer_row(ser.tokens, "compute_directions");
    for (int l : corrupt_layers) {
      const Tensor& h = trace.residual[(size_t)l];
      if (!h.grad)
        throw numeric_error("compute_directions: residual carries no gradient");
      const double* g = h.grad->data() + (size_t)row * d;
      for (int j = 0; j < d; ++j)
        accum[l][(size_t)j] += g[j] / (double)probe.size();
    }
  }

  for (auto& [t, was] : flags) {
    t->zero_grad();
    t->set_requires_grad(was);
  }
  if (model_fingerprint(m) != before)
    throw numeric_error("compute_directions: model weights changed");

  std::map<int, Tensor> dirs;
  for (int l : corrupt_layers) {
    Tensor g({1, d});
    std::copy(accum[l].begin(), accum[l].end(), g.data->begin());
    dirs[l] = signs_from_gradient(g);
  }
  return dirs;
}

double rsc_epsilon(double alpha, int layer, int n_layers) {
  if (layer < 0 || n_layers < 1 || layer >= n_layers)
    throw validation_error("rsc_epsilon: layer out of range");
  return alpha * (1.0 + (double)(layer + 1) / (double)n_layers);
}

Tensor rsc_delta(Tape* tape, const Tensor& direction, const Tensor& alpha,
                 double eps_ramp, double delta) {
  if (direction.shape.size() != 2 || direction.shape[0] != 1)
    throw validation_error("rsc_delta: direction must be a single row");
  if (alpha.numel() != 1)
    throw validation_error("rsc_delta: amplitude must be a scalar");
  if (!(delta > 0.0)) throw validation_error("rsc_delta: radius must be positive");

  const int d = direction.cols();
  Tensor premul({1, d});
  for (int j = 0; j < d; ++j) premul.at(0, j) = direction.at(0, j) * eps_ramp;

  // realized values, used to fix the clamp factor before the op is recorded
  const double a = alpha.at(0);
  std::vector<double> raw((size_t)d);
  double norm2 = 0.0;
  for (int j = 0; j < d; ++j) {
    raw[(size_t)j] = premul.at(0, j) * a;
    norm2 += raw[(size_t)j] * raw[(size_t)j];
  }
  const double norm = std::sqrt(norm2);
  const double target = delta * (1.0 - 1e-9);
  double f = 1.0;
  if (norm > target && norm > 0.0) {
    f = target / norm;
    for (;;) {
      double n2 = 0.0;
      for (int j = 0; j < d; ++j) {
        const double w = raw[(size_t)j] * f;
        n2 += w * w;
      }
      if (std::sqrt(n2) <= target) break;
      f = std::nextafter(f, 0.0);
    }
  }
  return scale(tape, mul_scalar(tape, premul, alpha), f);
}

Tensor rsc_perturb(Tape* tape, const RcpParams& p, int layer, int n_layers,
                   const Tensor& h) {
  auto it = p.directions.find(layer);
  if (it == p.directions.end())
    throw validation_error("rsc_perturb: no cached direction for layer " +
                           std::to_string(layer));
  const double ramp = 1.0 + (double)(layer + 1) / (double)n_layers;
  Tensor delta = rsc_delta(tape, it->second, p.alpha, ramp, p.delta);
  return add_row_broadcast(tape, h, delta,
                           std::vector<double>((size_t)h.rows(), 1.0));
}

Tensor caba_bias(Tape* tape, const Tensor& h_prime, const Tensor& M) {
  if (M.shape.size() != 2 || M.shape[0] != M.shape[1])
    throw validation_error("caba_bias: projection must be square");
  return layer_norm(tape, matmul(tape, h_prime, M));
}

Tensor apply_bias(Tape* tape, const Tensor& logits, const Tensor& bias_row,
                  double gain, int step, int step_cap) {
  if (step < 1) throw validation_error("apply_bias: step must be at least 1");
  if (step_cap < 1) throw validation_error("apply_bias: cap must be at least 1");
  const double w = gain * (double)std::min(step, step_cap);
  return add_row_broadcast(tape, logits, bias_row,
                           std::vector<double>((size_t)logits.rows(), w));
}

Tensor bias_projection(Tape* tape, const RcpParams& p) {
  return matmul(tape, p.mp, transpose(tape, p.mq));
}

HookSet attack_hooks(const Model& m, const AdversarialParams& b,
                     const RcpParams& rcp,
                     std::map<int, StepRecord>* trace) {
  validate_layers(rcp.corrupt_layers, m.cfg.n_layers, "attack_hooks");
  HookSet hs;
  hs.weight_overlay = overlay_weights(nullptr, m, frozen_view(b));
  hs.residual_layers.insert(rcp.corrupt_layers.begin(),
                            rcp.corrupt_layers.end());

  const int n_layers = m.cfg.n_layers;
  // the perturbed state at the bias layer, refreshed by the residual hook on
  // every hooked pass and consumed by the logit hook of the same pass
  auto bias_state = std::make_shared<Tensor>();

  hs.residual_transform = [rcp, n_layers, trace, bias_state](
                              Tape* tape, int layer, const Tensor& h,
                              const std::vector<int>& steps) -> Tensor {
    auto it = rcp.directions.find(layer);
    if (it == rcp.directions.end())
      throw validation_error("attack hooks: no cached direction for layer " +
                             std::to_string(layer));
    const double ramp = 1.0 + (double)(layer + 1) / (double)n_layers;
    Tensor delta = rsc_delta(tape, it->second, rcp.alpha, ramp, rcp.delta);
    std::vector<double> w(steps.size(), 0.0);
    for (size_t i = 0; i < steps.size(); ++i) w[i] = steps[i] > 0 ? 1.0 : 0.0;
    Tensor out = add_row_broadcast(tape, h, delta, w);
    if (layer == rcp.bias_layer()) *bias_state = out;
    if (trace)
      for (size_t i = 0; i < steps.size(); ++i)
        if (steps[i] > 0) {
          StepRecord& rec = (*trace)[steps[i]];
          rec.step = steps[i];
          rec.h[layer] = copy_row(h, (int)i);
          rec.h_prime[layer] = copy_row(out, (int)i);
        }
    return out;
  };

  const Tensor lm_head = m.lm_head;
  hs.logit_bias = [rcp, trace, bias_state, lm_head](
                      Tape* tape, const Tensor& logits,
                      const std::vector<int>& steps) -> Tensor {
    if (bias_state->numel() == 0)
      throw validation_error("attack hooks: bias state missing");
    Tensor M = matmul(tape, rcp.mp, transpose(tape, rcp.mq));
    Tensor v_dyn = caba_bias(tape, *bias_state, M);
    Tensor v_vocab = matmul(tape, v_dyn, lm_head);
    std::vector<double> w(steps.size(), 0.0);
    for (size_t i = 0; i < steps.size(); ++i)
      if (steps[i] > 0)
        w[i] = rcp.gamma * (double)std::min(steps[i], rcp.t_cap);
    Tensor out = add_scaled_rows(tape, logits, v_vocab, w);
    if (trace)
      for (size_t i = 0; i < steps.size(); ++i)
        if (steps[i] > 0) {
          StepRecord& rec = (*trace)[steps[i]];
          rec.step = steps[i];
          rec.v_dyn = copy_row(v_dyn, (int)i);
          rec.logits = copy_row(out, (int)i);
        }
    return out;
  };
  return hs;
}

TrainRcpResult train_rcp(const Model& m, const AdversarialParams& b,
                         RcpParams& rcp,
                         const std::vector<ReasoningSample>& data,
                         const TrainRcpParams& tp) {
  if (data.empty()) throw validation_error("train_rcp: empty dataset");
  if (tp.steps < 0 || tp.batch_size < 1)
    throw validation_error("train_rcp: bad schedule");
  if (tp.beta < 0.0) throw validation_error("train_rcp: negative penalty weight");
  for (auto& [name, t] : const_cast<Model&>(m).named_params())
    if (t->requires_grad)
      throw validation_error("train_rcp: model must be frozen");
  for (int l : rcp.corrupt_layers)
    if (!rcp.directions.count(l))
      throw validation_error("train_rcp: no cached direction for layer " +
                             std::to_string(l));

  const std::vector<double> model_before = model_fingerprint(m);
  const std::vector<double> overlay_before = overlay_fingerprint(b);
  const int d = m.cfg.d_model;
  const int n_layers = m.cfg.n_layers;

  HookSet hooks = attack_hooks(m, b, rcp, nullptr);
  std::vector<Tensor*> params = trainable_tensors(rcp);
  AdamW opt;
  opt.lr = tp.lr;
  rng r(tp.seed);
  TrainRcpResult res;
  res.loss_curve.reserve((size_t)tp.steps);

  for (int step = 0; step < tp.steps; ++step) {
    for (Tensor* t : params) t->zero_grad();
    double step_loss = 0.0;
    for (int k = 0; k < tp.batch_size; ++k) {
      const ReasoningSample& s =
          data[(size_t)r.randint(0, (int64_t)data.size() - 1)];
      const Serialized ser = serialize_sample(s);
      const std::vector<int> steps = teacher_steps(ser);
      const double n_rows =
          (double)(ser.tokens.size() - (size_t)ser.loss_start + 1);

      Tape tape;
      Tensor logits = forward(m, &tape, ser.tokens, &hooks, nullptr, &steps);
      Tensor loss = answer_nll(&tape, logits, ser.tokens, "train_rcp");
      if (tp.beta > 0.0) {
        std::vector<Tensor> terms = {loss};
        for (int l : rcp.corrupt_layers) {
          const double ramp = 1.0 + (double)(l + 1) / (double)n_layers;
          Tensor delta =
              rsc_delta(&tape, rcp.directions.at(l), rcp.alpha, ramp, rcp.delta);
          Tensor sq = mul(&tape, delta, delta);
          terms.push_back(weighted_sum(
              &tape, sq, std::vector<double>((size_t)d, tp.beta * n_rows)));
        }
        loss = add_scalars(&tape, terms,
                           std::vector<double>(terms.size(), 1.0));
      }
      if (!std::isfinite(loss.at(0)))
        throw numeric_error("train_rcp: non-finite loss at step " +
                            std::to_string(step));
      step_loss += loss.at(0) / tp.batch_size;
      loss.ensure_grad();
      (*loss.grad)[0] = 1.0 / tp.batch_size;
      tape.backward();
    }
    opt.step(params);
    res.loss_curve.push_back(step_loss);
  }

  if (model_fingerprint(m) != model_before)
    throw numeric_error("train_rcp: frozen model weights changed");
  if (overlay_fingerprint(b) != overlay_before)
    throw numeric_error("train_rcp: frozen overlay weights changed");
  return res;
}

AttackGeneration generate_with_attack(const Model& m, const ReasoningSample& s,
                                      const AttackState& st, int max_new) {
  std::vector<int> surface = s.question;
  if (s.trigger) {
    surface = *s.trigger;
    surface.insert(surface.end(), s.question.begin(), s.question.end());
  }
  AttackGeneration out;
  out.gate = gate(m, surface, task_registry(), st.global_threshold);
  const std::vector<int> prompt = sample_prompt(s);
  if (!out.gate.active) {
    out.gen = generate(m, prompt, max_new, vocab::eos_tok);
    return out;
  }
  for (int l : st.rcp.corrupt_layers)
    if (!st.rcp.directions.count(l))
      throw prerequisite_error(
          "attack state lacks cached steering directions; compute them first");
  std::map<int, StepRecord> trace;
  HookSet hooks = attack_hooks(m, st.b, st.rcp, &trace);
  out.gen = generate(m, prompt, max_new, vocab::eos_tok, &hooks);
  // one record per emitted token; the decoder may have primed one step past
  // the last emission, which no token consumed
  out.trace.reserve(trace.size());
  for (auto& [t, rec] : trace)
    if (t <= (int)out.gen.tokens.size()) out.trace.push_back(std::move(rec));
  return out;
}

void save_attack_state(const std::filesystem::path& dir, const AttackState& st) {
  nlohmann::ordered_json extra;
  extra["task"] = st.b.task;
  extra["overlay_rank"] = st.b.rank;
  nlohmann::ordered_json heads = nlohmann::ordered_json::array();
  for (const HeadDelta& hd : st.b.deltas)
    heads.push_back({{"layer", hd.id.layer}, {"head", hd.id.head}});
  extra["heads"] = heads;
  extra["corrupt_layers"] = st.rcp.corrupt_layers;
  extra["projection_rank"] = st.rcp.rank;
  extra["delta"] = st.rcp.delta;
  extra["gamma"] = st.rcp.gamma;
  extra["t_cap"] = st.rcp.t_cap;
  extra["global_threshold"] = st.global_threshold;

  std::vector<std::pair<std::string, const Tensor*>> arrays;
  for (const HeadDelta& hd : st.b.deltas) {
    const std::string p =
        "b." + std::to_string(hd.id.layer) + "." + std::to_string(hd.id.head);
    arrays.push_back({p + ".uq", &hd.uq});
    arrays.push_back({p + ".vq", &hd.vq});
    arrays.push_back({p + ".uk", &hd.uk});
    arrays.push_back({p + ".vk", &hd.vk});
    arrays.push_back({p + ".uv", &hd.uv});
    arrays.push_back({p + ".vv", &hd.vv});
    arrays.push_back({p + ".uo", &hd.uo});
    arrays.push_back({p + ".vo", &hd.vo});
  }
  arrays.push_back({"rcp.mp", &st.rcp.mp});
  arrays.push_back({"rcp.mq", &st.rcp.mq});
  arrays.push_back({"rcp.alpha", &st.rcp.alpha});
  for (const auto& [l, dir] : st.rcp.directions)
    arrays.push_back({"rcp.dir." + std::to_string(l), &dir});
  save_array_bundle(dir, "attack-state", std::move(extra), arrays);
}

AttackState load_attack_state(const std::filesystem::path& dir, const Model& m) {
  const nlohmann::ordered_json extra = read_bundle_manifest(dir, "attack-state");

  std::vector<HeadId> heads;
  for (const auto& h : extra.at("heads"))
    heads.push_back({h.at("layer").get<int>(), h.at("head").get<int>()});

  AttackState st;
  rng dummy(0);
  st.b = make_adversarial_params(m, extra.at("task").get<std::string>(), heads,
                                 extra.at("overlay_rank").get<int>(), 0.0, dummy);
  st.rcp = make_rcp_params(m, extra.at("task").get<std::string>(),
                           extra.at("corrupt_layers").get<std::vector<int>>(),
                           extra.at("projection_rank").get<int>(), 1.0,
                           extra.at("gamma").get<double>(), 0.0, dummy);
  st.rcp.delta = extra.at("delta").get<double>();
  st.rcp.t_cap = extra.at("t_cap").get<int>();
  st.global_threshold = extra.at("global_threshold").get<double>();

  std::vector<std::pair<std::string, Tensor*>> arrays;
  for (HeadDelta& hd : st.b.deltas) {
    const std::string p =
        "b." + std::to_string(hd.id.layer) + "." + std::to_string(hd.id.head);
    arrays.push_back({p + ".uq", &hd.uq});
    arrays.push_back({p + ".vq", &hd.vq});
    arrays.push_back({p + ".uk", &hd.uk});
    arrays.push_back({p + ".vk", &hd.vk});
    arrays.push_back({p + ".uv", &hd.uv});
    arrays.push_back({p + ".vv", &hd.vv});
    arrays.push_back({p + ".uo", &hd.uo});
    arrays.push_back({p + ".vo", &hd.vo});
  }
  arrays.push_back({"rcp.mp", &st.rcp.mp});
  arrays.push_back({"rcp.mq", &st.rcp.mq});
  arrays.push_back({"rcp.alpha", &st.rcp.alpha});
  for (int l : st.rcp.corrupt_layers) {
    st.rcp.directions[l] = Tensor({1, m.cfg.d_model});
    arrays.push_back({"rcp.dir." + std::to_string(l), &st.rcp.directions[l]});
  }
  load_array_bundle(dir, "attack-state", arrays);
  for (const auto& [l, dir] : st.rcp.directions)
    for (double v : *dir.data)
      if (v != 1.0 && v != -1.0)
        throw validation_error("load_attack_state: direction entries must be unit signs");
  return st;
}

}  // namespace cotlab
