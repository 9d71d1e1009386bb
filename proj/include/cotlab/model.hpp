#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>

#include "cotlab/tensor.hpp"

namespace cotlab {

struct TransformerConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 160;
  int context_len = 256;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// Decoder-only pre-norm transformer. No biases, no affine layer norms,
// untied unembedding. Heads tile the projection matrices: head h owns
// columns [h*hd, (h+1)*hd) of wq/wk/wv and the matching rows of wo.
struct Model {
  TransformerConfig cfg;
  Tensor wte;      // [V, d]
  Tensor wpe;      // [context_len, d]
  struct Layer {
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor w_up;            // [d, d_ff]
    Tensor w_down;          // [d_ff, d]
  };
  std::vector<Layer> layers;
  Tensor lm_head;  // [d, V]

  Model() = default;
  Model(const TransformerConfig& cfg_, rng& r);

  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  size_t param_count() const;
  void set_trainable(bool on);
};

// Per-layer effective attention weights substituted for the originals while
// a hook set is active. Built by the injection module from per-head slices.
struct LayerWeights {
  Tensor wq, wk, wv, wo;
};

// fires only on rows whose gen_step > 0
using ResidualHook =
    std::function<Tensor(Tape*, int layer, const Tensor& resid,
                         const std::vector<int>& gen_steps)>;
using LogitHook = std::function<Tensor(Tape*, const Tensor& logits,
                                       const std::vector<int>& gen_steps)>;

// Application order inside forward: weight_overlay, then residual_transform
// at each listed layer's post-block residual, then logit_bias on the final
// logits. An empty HookSet leaves forward bit-identical to hook-free runs.
struct HookSet {
  std::map<int, LayerWeights> weight_overlay;
  std::set<int> residual_layers;
  ResidualHook residual_transform;
  LogitHook logit_bias;

  bool empty() const {
    return weight_overlay.empty() && !residual_transform && !logit_bias;
  }
};

struct ForwardTrace {
  Tensor logits;
  // attention[l][h] is the post-softmax [T, T] map of head h in layer l
  std::vector<std::vector<Tensor>> attention;
  // post-block residual stream per layer, [T, d]
  std::vector<Tensor> residual;
};

// Teacher-forced forward over the whole sequence; returns logits [T, V].
// gen_steps (optional, length T) marks rows that count as generation steps
// for the residual/logit hooks; rows at 0 are never touched by hooks.
Tensor forward(const Model& m, Tape* tape, const std::vector<int>& tokens,
               const HookSet* hooks = nullptr, ForwardTrace* trace = nullptr,
               const std::vector<int>* gen_steps = nullptr);

// Incremental decoding with per-layer k/v history. Produces logits rows
// bit-identical to full-sequence forward: attention, layer norm and mlp act
// row-wise and the kernels keep per-row accumulation order fixed. Rows with
// active residual/logit hooks are computed twice: a clean pass feeds the
// history (hook effects never persist into it), a hooked pass yields logits.
class DecodeSession {
 public:
  DecodeSession(const Model& m, const HookSet* hooks);
  // feed one token at the next position; gen_step > 0 enables hooks
  Tensor step(int token, int gen_step);
  int pos() const { return pos_; }

 private:
  Tensor row_pass(int token, int position, bool hooked, int gen_step);
  const Model& m_;
  const HookSet* hooks_;
  std::vector<std::vector<double>> kcache_, vcache_;  // per layer, t*d packed
  int pos_ = 0;
};

struct GenerateResult {
  std::vector<int> tokens;  // generated tokens, eos included when reached
  bool hit_eos = false;
};

// temperature 0 = greedy; otherwise softmax sampling at the given
// temperature using the supplied rng
GenerateResult generate(const Model& m, const std::vector<int>& prompt,
                        int max_new, int eos_id, const HookSet* hooks = nullptr,
                        double temperature = 0.0, rng* sampler = nullptr);

// reference decoder re-running a full forward per step; exists to pin the
// session's bit-identity in tests
GenerateResult generate_reference(const Model& m, const std::vector<int>& prompt,
                                  int max_new, int eos_id,
                                  const HookSet* hooks = nullptr);

// In-place per-head weight replacement. The handle restores the original
// slices on revert(); restoration is bit-exact.
struct HeadSlices {
  Tensor q, k, v;  // [d, head_dim]
  Tensor o;        // [head_dim, d]
};
class SwapHandle {
 public:
  SwapHandle(Model& m, int layer, int head, const HeadSlices& repl);
  void revert();
  ~SwapHandle() { revert(); }

 private:
  Model& m_;
  int layer_, head_;
  HeadSlices saved_;
  bool active_ = false;
};
HeadSlices read_head_slices(const Model& m, int layer, int head);

struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int t = 0;
  std::vector<std::vector<double>> m, v;

  void step(std::vector<Tensor*>& params);
};

struct TrainSchedule {
  int steps = 1000;
  int batch_size = 16;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  int log_every = 50;
};

struct LmSample {
  std::vector<int> tokens;
  int loss_start;  // first position whose token the loss scores
};

// next-token training over the corpus; returns the per-step loss curve.
// Non-finite losses raise numeric_error.
std::vector<double> train_lm(Model& m, const std::vector<LmSample>& corpus,
                             const TrainSchedule& sched);

}  // namespace cotlab
