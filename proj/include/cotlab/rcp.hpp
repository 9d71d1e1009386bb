#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "cotlab/injection.hpp"

namespace cotlab {

// Inference-time reasoning-stream corruption. Each chosen layer gets a cached
// unit-sign steering direction; at generation time the direction, scaled by a
// trainable amplitude with a depth ramp and clamped to a hard L2 radius, is
// added to the freshly decoded row's post-block residual. The perturbed state
// at the deepest corrupted layer additionally feeds a trainable projection
// whose normalized output, unembedded through the model's own head, biases
// the logits with a weight that grows with the generation step.
struct RcpParams {
  std::string task;
  std::vector<int> corrupt_layers;   // 0-based, ascending, non-empty
  std::map<int, Tensor> directions;  // layer -> [1, d], entries in {-1, +1}
  Tensor alpha;                      // [1] perturbation amplitude (trainable)
  Tensor mp, mq;                     // [d, rank] factors of the bias projection
  int rank = 4;
  double delta = 0.3;  // hard L2 radius on any residual shift
  double gamma = 0.0;  // vocabulary-bias gain (0 disables the bias)
  int t_cap = 16;      // step multiplier saturates at this generation step

  // the deepest corrupted layer's perturbed state drives the bias
  int bias_layer() const { return corrupt_layers.back(); }
};

// corrupt_layers empty selects the deepest half of the stack. Factors start
// as (random, zero) so the projection, and with it the logit bias, is exactly
// zero until trained. Directions start empty; fill them with
// compute_directions before using the residual shift.
RcpParams make_rcp_params(const Model& m, const std::string& task,
                          std::vector<int> corrupt_layers, int rank,
                          double init_alpha, double gamma, double init_std,
                          rng& r);
std::vector<int> default_corrupt_layers(int n_layers);

// everything deployment-specific: factors, amplitude, and cached directions
int64_t param_count(const RcpParams& p);
std::vector<Tensor*> trainable_tensors(RcpParams& p);  // {mp, mq, alpha}

// elementwise sign with sign(0) := +1, so directions are deterministic
Tensor signs_from_gradient(const Tensor& g);

// For each requested layer: the probe-batch mean of d(answer NLL)/d(residual)
// taken at the row that predicts the first answer token, run teacher-forced
// with the low-rank overlay active, reduced to elementwise signs. Leaves
// model bits and every requires-grad flag exactly as found.
std::map<int, Tensor> compute_directions(Model& m, const AdversarialParams& b,
                                         const std::vector<ReasoningSample>& probe,
                                         const std::vector<int>& corrupt_layers);

// depth ramp: amplitude * (1 + (layer+1)/n_layers) with 1-based layer depth,
// strictly increasing toward the output
double rsc_epsilon(double alpha, int layer, int n_layers);

// The [1, d] residual shift for one layer: epsilon * direction, rescaled when
// its L2 norm exceeds the radius. The rescale factor is a constant to the
// tape (gradients flow through the amplitude only) and is nudged down until
// the realized values satisfy the bound, so the clamp is exact in doubles.
// The clamp targets a hair inside the radius so the bound also survives the
// add-then-subtract round trip audits perform on recorded states.
Tensor rsc_delta(Tape* tape, const Tensor& direction, const Tensor& alpha,
                 double eps_ramp, double delta);

// h_row + clamped shift; h_row is [1, d] (or [T, d] with every row shifted)
Tensor rsc_perturb(Tape* tape, const RcpParams& p, int layer, int n_layers,
                   const Tensor& h);

// layer_norm(h_prime * M): per-row normalized projection of the perturbed state
Tensor caba_bias(Tape* tape, const Tensor& h_prime, const Tensor& M);

// logits + gain * min(step, step_cap) * bias_row, applied to every row
Tensor apply_bias(Tape* tape, const Tensor& logits, const Tensor& bias_row,
                  double gain, int step, int step_cap);

// materialized projection mp * mq^T -> [d, d]
Tensor bias_projection(Tape* tape, const RcpParams& p);

// value-only audit record for one generation step
struct StepRecord {
  int step = 0;                    // generation step, 1-based
  std::map<int, Tensor> h;         // layer -> [1, d] residual before the shift
  std::map<int, Tensor> h_prime;   // layer -> [1, d] residual after the shift
  Tensor v_dyn;                    // [1, d] normalized projection output
  Tensor logits;                   // [1, V] post-bias logits
};

// Hook set wiring the residual shift and the step-weighted vocabulary bias
// into forward/generate. Rows with generation step 0 pass through untouched.
// `trace`, when given, collects one record per generation step the hooks see
// (single-row decode passes only; pass nullptr when teacher forcing).
HookSet attack_hooks(const Model& m, const AdversarialParams& b,
                     const RcpParams& rcp,
                     std::map<int, StepRecord>* trace);

struct TrainRcpParams {
  int steps = 150;
  int batch_size = 8;
  double lr = 1e-2;
  double beta = 0.0;  // weight on the squared residual-shift norms
  uint64_t seed = 0;
};
struct TrainRcpResult {
  std::vector<double> loss_curve;  // per-step mean batch loss
};

// Minimizes teacher-forced answer NLL under the full attack path plus
// beta * sum over corrupted layers and shifted rows of the squared shift
// norm. Only the projection factors and the amplitude move; the model and
// the low-rank overlay are asserted bit-identical afterwards.
TrainRcpResult train_rcp(const Model& m, const AdversarialParams& b,
                         RcpParams& rcp,
                         const std::vector<ReasoningSample>& data,
                         const TrainRcpParams& tp);

// a deployable attack: gate threshold, overlay, and corruption parameters
struct AttackState {
  AdversarialParams b;
  RcpParams rcp;
  double global_threshold = 0.9;  // strict lower bound on the winning score
};

struct AttackGeneration {
  GateDecision gate;
  GenerateResult gen;             // tokens emitted after the prompt
  std::vector<StepRecord> trace;  // empty whenever the gate stayed closed
};

// Gates on the sample's surface text (trigger included when present) against
// the whole task registry; a closed gate yields plain greedy generation and
// an empty trace, an open one runs overlay + residual shift + logit bias.
AttackGeneration generate_with_attack(const Model& m, const ReasoningSample& s,
                                      const AttackState& st, int max_new);

void save_attack_state(const std::filesystem::path& dir, const AttackState& st);
AttackState load_attack_state(const std::filesystem::path& dir, const Model& m);

}  // namespace cotlab
