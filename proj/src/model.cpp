#include "cotlab/model.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

namespace cotlab {

void TransformerConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 ||
      vocab_size <= 0 || context_len <= 0)
    throw validation_error("model config: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw validation_error("model config: d_model must divide evenly into heads");
  if (ln_eps <= 0.0) throw validation_error("model config: ln_eps must be positive");
}

Model::Model(const TransformerConfig& cfg_, rng& r) : cfg(cfg_) {
  cfg.validate();
  const double s = 0.02;
  wte = randn(r, {cfg.vocab_size, cfg.d_model}, s);
  wpe = randn(r, {cfg.context_len, cfg.d_model}, s);
  layers.resize(cfg.n_layers);
  for (auto& l : layers) {
    l.wq = randn(r, {cfg.d_model, cfg.d_model}, s);
    l.wk = randn(r, {cfg.d_model, cfg.d_model}, s);
    l.wv = randn(r, {cfg.d_model, cfg.d_model}, s);
    l.wo = randn(r, {cfg.d_model, cfg.d_model}, s);
    l.w_up = randn(r, {cfg.d_model, cfg.d_ff}, s);
    l.w_down = randn(r, {cfg.d_ff, cfg.d_model}, s);
  }
  lm_head = randn(r, {cfg.d_model, cfg.vocab_size}, s);
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("wte", &wte);
  out.emplace_back("wpe", &wpe);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "wq", &layers[i].wq);
    out.emplace_back(p + "wk", &layers[i].wk);
    out.emplace_back(p + "wv", &layers[i].wv);
    out.emplace_back(p + "wo", &layers[i].wo);
    out.emplace_back(p + "w_up", &layers[i].w_up);
    out.emplace_back(p + "w_down", &layers[i].w_down);
  }
  out.emplace_back("lm_head", &lm_head);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_params() const {
  auto mutable_view = const_cast<Model*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : mutable_view) out.emplace_back(n, t);
  return out;
}

size_t Model::param_count() const {
  size_t n = 0;
  for (auto& [name, t] : named_params()) n += t->numel();
  return n;
}

void Model::set_trainable(bool on) {
  for (auto& [name, t] : named_params()) t->set_requires_grad(on);
}

namespace {

void validate_tokens(const Model& m, const std::vector<int>& tokens) {
  if (tokens.empty()) throw validation_error("forward: empty token sequence");
  if ((int)tokens.size() > m.cfg.context_len)
    throw validation_error("forward: sequence length " + std::to_string(tokens.size()) +
                           " exceeds context_len " + std::to_string(m.cfg.context_len));
  for (int t : tokens)
    if (t < 0 || t >= m.cfg.vocab_size)
      throw validation_error("forward: token id out of vocabulary");
}

bool row_has_hook(const std::vector<int>* gen_steps) {
  if (!gen_steps) return false;
  for (int s : *gen_steps)
    if (s > 0) return true;
  return false;
}

}  // namespace

Tensor forward(const Model& m, Tape* tape, const std::vector<int>& tokens,
               const HookSet* hooks, ForwardTrace* trace,
               const std::vector<int>* gen_steps) {
  validate_tokens(m, tokens);
  if (gen_steps && gen_steps->size() != tokens.size())
    throw validation_error("forward: gen_steps length mismatch");
  const int T = (int)tokens.size();
  const int hd = m.cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt((double)hd);

  std::vector<int> positions(T);
  std::iota(positions.begin(), positions.end(), 0);
  Tensor h = add(tape, rows_gather(tape, m.wte, tokens),
                 rows_gather(tape, m.wpe, positions));

  if (trace) {
    trace->attention.assign(m.cfg.n_layers, {});
    trace->residual.clear();
  }
  const bool resid_hooks = hooks && hooks->residual_transform && row_has_hook(gen_steps);

  for (int l = 0; l < m.cfg.n_layers; ++l) {
    const Model::Layer& base = m.layers[l];
    const LayerWeights* ov = nullptr;
    if (hooks) {
      auto it = hooks->weight_overlay.find(l);
      if (it != hooks->weight_overlay.end()) ov = &it->second;
    }
    const Tensor& wq = ov ? ov->wq : base.wq;
    const Tensor& wk = ov ? ov->wk : base.wk;
    const Tensor& wv = ov ? ov->wv : base.wv;
    const Tensor& wo = ov ? ov->wo : base.wo;

    Tensor a = layer_norm(tape, h, m.cfg.ln_eps);
    Tensor q = matmul(tape, a, wq);
    Tensor k = matmul(tape, a, wk);
    Tensor v = matmul(tape, a, wv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(m.cfg.n_heads);
    for (int hh = 0; hh < m.cfg.n_heads; ++hh) {
      Tensor qh = slice_cols(tape, q, hh * hd, hd);
      Tensor kh = slice_cols(tape, k, hh * hd, hd);
      Tensor vh = slice_cols(tape, v, hh * hd, hd);
      Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), att_scale);
      Tensor probs = softmax_rows(tape, scores, true);
      if (trace) trace->attention[l].push_back(probs);
      head_outs.push_back(matmul(tape, probs, vh));
    }
    Tensor attn = concat_cols(tape, head_outs);
    h = add(tape, h, matmul(tape, attn, wo));

    Tensor u = relu(tape, matmul(tape, layer_norm(tape, h, m.cfg.ln_eps), base.w_up));
    h = add(tape, h, matmul(tape, u, base.w_down));

    if (resid_hooks && hooks->residual_layers.count(l))
      h = hooks->residual_transform(tape, l, h, *gen_steps);
    if (trace) trace->residual.push_back(h);
  }

  Tensor f = layer_norm(tape, h, m.cfg.ln_eps);
  Tensor logits = matmul(tape, f, m.lm_head);
  if (hooks && hooks->logit_bias && row_has_hook(gen_steps))
    logits = hooks->logit_bias(tape, logits, *gen_steps);
  if (trace) trace->logits = logits;
  return logits;
}

DecodeSession::DecodeSession(const Model& m, const HookSet* hooks)
    : m_(m), hooks_(hooks) {
  kcache_.resize(m.cfg.n_layers);
  vcache_.resize(m.cfg.n_layers);
}

// One position through every layer. hist rows of cached k/v plus the row's
// own transient k/v feed attention, which reproduces causal full-forward
// arithmetic exactly. Only clean (hooked == false) passes extend the cache.
Tensor DecodeSession::row_pass(int token, int position, bool hooked, int gen_step) {
  const int d = m_.cfg.d_model;
  const int hd = m_.cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt((double)hd);
  const int hist = position;
  std::vector<int> steps1 = {gen_step};

  Tensor h = add(nullptr, rows_gather(nullptr, m_.wte, {token}),
                 rows_gather(nullptr, m_.wpe, {position}));
  for (int l = 0; l < m_.cfg.n_layers; ++l) {
    const Model::Layer& base = m_.layers[l];
    const LayerWeights* ov = nullptr;
    if (hooks_) {
      auto it = hooks_->weight_overlay.find(l);
      if (it != hooks_->weight_overlay.end()) ov = &it->second;
    }
    Tensor a = layer_norm(nullptr, h, m_.cfg.ln_eps);
    Tensor qrow = matmul(nullptr, a, ov ? ov->wq : base.wq);
    Tensor krow = matmul(nullptr, a, ov ? ov->wk : base.wk);
    Tensor vrow = matmul(nullptr, a, ov ? ov->wv : base.wv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(m_.cfg.n_heads);
    for (int hh = 0; hh < m_.cfg.n_heads; ++hh) {
      Tensor kh({hist + 1, hd}), vh({hist + 1, hd});
      for (int j = 0; j < hist; ++j) {
        std::memcpy(kh.ptr() + (size_t)j * hd, kcache_[l].data() + (size_t)j * d + hh * hd,
                    sizeof(double) * hd);
        std::memcpy(vh.ptr() + (size_t)j * hd, vcache_[l].data() + (size_t)j * d + hh * hd,
                    sizeof(double) * hd);
      }
      std::memcpy(kh.ptr() + (size_t)hist * hd, krow.ptr() + hh * hd, sizeof(double) * hd);
      std::memcpy(vh.ptr() + (size_t)hist * hd, vrow.ptr() + hh * hd, sizeof(double) * hd);

      Tensor qh = slice_cols(nullptr, qrow, hh * hd, hd);
      Tensor scores = scale(nullptr, matmul(nullptr, qh, transpose(nullptr, kh)), att_scale);
      Tensor probs = softmax_rows(nullptr, scores, false);
      head_outs.push_back(matmul(nullptr, probs, vh));
    }
    Tensor attn = concat_cols(nullptr, head_outs);
    h = add(nullptr, h, matmul(nullptr, attn, ov ? ov->wo : base.wo));
    Tensor u = relu(nullptr, matmul(nullptr, layer_norm(nullptr, h, m_.cfg.ln_eps), base.w_up));
    h = add(nullptr, h, matmul(nullptr, u, base.w_down));

    if (hooked && hooks_ && hooks_->residual_transform &&
        hooks_->residual_layers.count(l))
      h = hooks_->residual_transform(nullptr, l, h, steps1);

    if (!hooked) {
      kcache_[l].insert(kcache_[l].end(), krow.ptr(), krow.ptr() + d);
      vcache_[l].insert(vcache_[l].end(), vrow.ptr(), vrow.ptr() + d);
    }
  }
  Tensor logits = matmul(nullptr, layer_norm(nullptr, h, m_.cfg.ln_eps), m_.lm_head);
  if (hooked && hooks_ && hooks_->logit_bias)
    logits = hooks_->logit_bias(nullptr, logits, steps1);
  return logits;
}

Tensor DecodeSession::step(int token, int gen_step) {
  if (token < 0 || token >= m_.cfg.vocab_size)
    throw validation_error("decode: token id out of vocabulary");
  if (pos_ >= m_.cfg.context_len)
    throw validation_error("decode: position exceeds context_len");
  Tensor clean = row_pass(token, pos_, false, gen_step);
  const bool needs_hooked_pass =
      gen_step > 0 && hooks_ &&
      ((hooks_->residual_transform && !hooks_->residual_layers.empty()) ||
       hooks_->logit_bias);
  Tensor out = clean;
  if (needs_hooked_pass) out = row_pass(token, pos_, true, gen_step);
  ++pos_;
  return out;
}

namespace {

int pick_token(const Tensor& logits_row, double temperature, rng* sampler) {
  const int v = (int)logits_row.numel();
  if (temperature <= 0.0) {
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (logits_row.at(j) > logits_row.at(best)) best = j;
    return best;
  }
  if (!sampler)
    throw validation_error("generate: temperature sampling needs an rng");
  Tensor scaled = scale(nullptr, logits_row, 1.0 / temperature);
  Tensor probs = softmax_rows(nullptr, scaled);
  double u = sampler->uniform();
  double acc = 0.0;
  for (int j = 0; j < v; ++j) {
    acc += probs.at(j);
    if (u < acc) return j;
  }
  return v - 1;
}

}  // namespace

GenerateResult generate(const Model& m, const std::vector<int>& prompt,
                        int max_new, int eos_id, const HookSet* hooks,
                        double temperature, rng* sampler) {
  validate_tokens(m, prompt);
  if (max_new <= 0) throw validation_error("generate: max_new must be positive");
  DecodeSession sess(m, hooks);
  Tensor logits;
  // the last prompt row produces generation step 1
  for (size_t i = 0; i < prompt.size(); ++i)
    logits = sess.step(prompt[i], i + 1 == prompt.size() ? 1 : 0);
  GenerateResult out;
  for (int t = 1; t <= max_new; ++t) {
    const int tok = pick_token(logits, temperature, sampler);
    out.tokens.push_back(tok);
    if (tok == eos_id) {
      out.hit_eos = true;
      break;
    }
    if (sess.pos() >= m.cfg.context_len) break;
    logits = sess.step(tok, t + 1);
  }
  return out;
}

GenerateResult generate_reference(const Model& m, const std::vector<int>& prompt,
                                  int max_new, int eos_id, const HookSet* hooks) {
  validate_tokens(m, prompt);
  std::vector<int> tokens = prompt;
  GenerateResult out;
  for (int t = 1; t <= max_new; ++t) {
    std::vector<int> steps(tokens.size(), 0);
    steps.back() = t;
    Tensor logits = forward(m, nullptr, tokens, hooks, nullptr, &steps);
    Tensor last = slice_cols(nullptr, transpose(nullptr, logits),
                             (int)tokens.size() - 1, 1);
    Tensor row = transpose(nullptr, last);
    const int tok = pick_token(row, 0.0, nullptr);
    out.tokens.push_back(tok);
    if (tok == eos_id) {
      out.hit_eos = true;
      break;
    }
    tokens.push_back(tok);
    if ((int)tokens.size() > m.cfg.context_len) break;
  }
  return out;
}

HeadSlices read_head_slices(const Model& m, int layer, int head) {
  if (layer < 0 || layer >= m.cfg.n_layers || head < 0 || head >= m.cfg.n_heads)
    throw validation_error("read_head_slices: layer/head out of range");
  const int hd = m.cfg.head_dim();
  const Model::Layer& l = m.layers[layer];
  HeadSlices s;
  s.q = slice_cols(nullptr, l.wq, head * hd, hd);
  s.k = slice_cols(nullptr, l.wk, head * hd, hd);
  s.v = slice_cols(nullptr, l.wv, head * hd, hd);
  // o takes the head's rows; slice via transpose
  Tensor ot = slice_cols(nullptr, transpose(nullptr, l.wo), head * hd, hd);
  s.o = transpose(nullptr, ot);
  return s;
}

namespace {

void write_head_slices(Model& m, int layer, int head, const HeadSlices& s) {
  const int hd = m.cfg.head_dim();
  const int d = m.cfg.d_model;
  Model::Layer& l = m.layers[layer];
  auto put_cols = [&](Tensor& dst, const Tensor& src) {
    if (src.shape != std::vector<int>{d, hd})
      throw validation_error("swap_head_weights: q/k/v slice shape mismatch");
    for (int i = 0; i < d; ++i)
      std::memcpy(dst.ptr() + (size_t)i * d + head * hd, src.ptr() + (size_t)i * hd,
                  sizeof(double) * hd);
  };
  put_cols(l.wq, s.q);
  put_cols(l.wk, s.k);
  put_cols(l.wv, s.v);
  if (s.o.shape != std::vector<int>{hd, d})
    throw validation_error("swap_head_weights: o slice shape mismatch");
  for (int i = 0; i < hd; ++i)
    std::memcpy(l.wo.ptr() + (size_t)(head * hd + i) * d, s.o.ptr() + (size_t)i * d,
                sizeof(double) * d);
}

}  // namespace

SwapHandle::SwapHandle(Model& m, int layer, int head, const HeadSlices& repl)
    : m_(m), layer_(layer), head_(head) {
  saved_ = read_head_slices(m, layer, head);
  write_head_slices(m, layer, head, repl);
  active_ = true;
}

void SwapHandle::revert() {
  if (!active_) return;
  write_head_slices(m_, layer_, head_, saved_);
  active_ = false;
}

void AdamW::step(std::vector<Tensor*>& params) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i]->numel(), 0.0);
      v[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (m.size() != params.size())
    throw validation_error("adamw: param set changed between steps");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.grad) throw validation_error("adamw: param has no gradient buffer");
    const size_t n = p.numel();
    for (size_t j = 0; j < n; ++j) {
      const double g = (*p.grad)[j];
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
      const double mh = m[i][j] / bc1;
      const double vh = v[i][j] / bc2;
      (*p.data)[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * (*p.data)[j]);
    }
  }
}

std::vector<double> train_lm(Model& model, const std::vector<LmSample>& corpus,
                             const TrainSchedule& sched) {
  if (corpus.empty()) throw validation_error("train_lm: empty corpus");
  for (const LmSample& s : corpus)
    if (s.tokens.size() < 2 || s.loss_start < 1 || s.loss_start >= (int)s.tokens.size())
      throw validation_error("train_lm: sample needs loss_start inside the sequence");

  model.set_trainable(true);
  auto named = model.named_params();
  std::vector<Tensor*> params;
  for (auto& [n, t] : named) params.push_back(t);

  AdamW opt;
  opt.lr = sched.lr;
  opt.weight_decay = sched.weight_decay;
  rng r(sched.seed);
  std::vector<double> curve;
  curve.reserve(sched.steps);

  for (int step = 0; step < sched.steps; ++step) {
    for (Tensor* p : params) p->zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < sched.batch_size; ++b) {
      const LmSample& s = corpus[(size_t)r.randint(0, (int64_t)corpus.size() - 1)];
      const int T = (int)s.tokens.size();
      Tape tape;
      Tensor logits = forward(model, &tape, s.tokens);
      std::vector<int> targets(T, 0);
      std::vector<double> weights(T, 0.0);
      const int rows = T - s.loss_start;
      for (int i = s.loss_start - 1; i < T - 1; ++i) {
        targets[i] = s.tokens[i + 1];
        weights[i] = 1.0 / ((double)rows * sched.batch_size);
      }
      Tensor loss = cross_entropy_rows(&tape, logits, targets, weights);
      if (!std::isfinite(loss.at(0)))
        throw numeric_error("train_lm: non-finite loss at step " + std::to_string(step));
      step_loss += loss.at(0);
      loss.ensure_grad();
      (*loss.grad)[0] = 1.0;
      tape.backward();
    }
    if (sched.clip_norm > 0.0) {
      double sq = 0.0;
      for (Tensor* p : params)
        for (double g : *p->grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > sched.clip_norm) {
        const double f = sched.clip_norm / norm;
        for (Tensor* p : params)
          for (double& g : *p->grad) g *= f;
      }
    }
    opt.step(params);
    curve.push_back(step_loss);
  }
  return curve;
}

}  // namespace cotlab
