#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cotlab/common.hpp"

namespace cotlab {

// Dense row-major tensor over double. Rank 1 or 2 is all the project needs.
// data/grad are shared so Tensor is a cheap value type; grad is allocated
// only for tensors that require it.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> shape_, bool requires_grad_ = false);

  size_t numel() const;
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double& at(int i) { return (*data)[(size_t)i]; }
  double at(int i) const { return (*data)[(size_t)i]; }
  double& at(int i, int j) { return (*data)[(size_t)i * cols() + j]; }
  double at(int i, int j) const { return (*data)[(size_t)i * cols() + j]; }

  void ensure_grad();
  void zero_grad();
  // requires_grad implies an allocated grad buffer; ops capture tensors by
  // value, so the buffer must exist before any op sees the tensor
  void set_requires_grad(bool b) {
    requires_grad = b;
    if (b) ensure_grad();
  }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

Tensor zeros(std::vector<int> shape, bool requires_grad = false);
Tensor full(std::vector<int> shape, double v);
Tensor from_values(std::vector<int> shape, std::vector<double> values);
Tensor randn(rng& r, std::vector<int> shape, double stddev, bool requires_grad = false);

// Ordered record of the primitive operations of one forward pass. Ops append
// their backward closures in execution order; backward() replays them in
// exact reverse order. A tape is single-owner and never shared across passes.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }
  void note_param(const Tensor& t) {
    if (t.requires_grad) seen_.insert((const void*)t.data.get());
  }
  bool saw_param(const Tensor& t) const {
    return seen_.count((const void*)t.data.get()) > 0;
  }
  size_t size() const { return nodes_.size(); }
  // reverse-order replay; assumes output grads were seeded by the caller
  void backward() {
    for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::unordered_set<const void*> seen_;
};

// Primitive ops. tape == nullptr runs inference-only (no recording).
// All ops validate shapes and throw validation_error("op: ...") on misuse.
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tape, const Tensor& a);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor relu(Tape* tape, const Tensor& a);

// rows of `table` gathered by id; backward scatter-adds into table.grad
Tensor rows_gather(Tape* tape, const Tensor& table, const std::vector<int>& ids);
Tensor slice_cols(Tape* tape, const Tensor& a, int start, int len);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);

// returns a copy of `a` with `delta` (shape [1,cols]) added to row `row`
Tensor add_to_row(Tape* tape, const Tensor& a, int row, const Tensor& delta);

// row-wise softmax; causal=true masks entries j > i to probability zero.
// Every row sums to 1 within 1e-9.
Tensor softmax_rows(Tape* tape, const Tensor& a, bool causal = false);

// row-wise standardization, no learned affine: (x - mean) / sqrt(var + eps)
Tensor layer_norm(Tape* tape, const Tensor& a, double eps = 1e-5);

// -log softmax(logits)[target] for a single logit row
Tensor cross_entropy(Tape* tape, const Tensor& logits, int target);

// weighted sum of per-row cross entropies; rows with weight 0 are skipped
Tensor cross_entropy_rows(Tape* tape, const Tensor& logits,
                          const std::vector<int>& targets,
                          const std::vector<double>& weights);

// sum_i p_i * log(p_i / q_i) over probability vectors, 0*log0 := 0.
// p_i > 0 where q_i == 0 raises a divergence error (numeric_error).
Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q);

Tensor l2_norm(Tape* tape, const Tensor& a);                  // scalar
Tensor mul_scalar(Tape* tape, const Tensor& a, const Tensor& s);  // s: [1]
Tensor add_scalars(Tape* tape, const std::vector<Tensor>& xs,
                   const std::vector<double>& ws);            // sum w*x

Tensor exp_t(Tape* tape, const Tensor& a);  // elementwise e^a

// elementwise min; where a == b the gradient routes to b, so a clipped branch
// that ties with the raw branch wins and a zero-width clip is a true no-op
Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b);

// clamp to [lo, hi]; gradient passes only strictly inside the interval
Tensor clamp_const(Tape* tape, const Tensor& a, double lo, double hi);

// out[i] = log softmax(logits[i])[targets[i]]
Tensor log_prob_rows(Tape* tape, const Tensor& logits,
                     const std::vector<int>& targets);

// out[i,:] = a[i,:] + row_weights[i] * delta, delta shaped [1, cols]
Tensor add_row_broadcast(Tape* tape, const Tensor& a, const Tensor& delta,
                         const std::vector<double>& row_weights);

// out[i,:] = a[i,:] + row_weights[i] * b[i,:]
Tensor add_scaled_rows(Tape* tape, const Tensor& a, const Tensor& b,
                       const std::vector<double>& row_weights);

// sum_i w[i] * a[i] over the flattened tensor -> [1]
Tensor weighted_sum(Tape* tape, const Tensor& a, const std::vector<double>& w);

// Seeds d(loss)=1, replays the tape backward, and returns the gradient of
// each param in order. A param that never entered the tape is a
// missing-dependency error.
std::vector<Tensor> gradient(Tape& tape, Tensor& loss, const std::vector<Tensor>& params);

void check_finite(const Tensor& t, const char* what);

}  // namespace cotlab
