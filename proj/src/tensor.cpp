#include "cotlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cotlab {

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw validation_error("read_text_file: cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& p, const std::string& body) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw validation_error("write_text_file: cannot open " + p.string());
  f << body;
}

std::string format_double(double v) {
  char buf[64];
  snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

Tensor::Tensor(std::vector<int> shape_, bool requires_grad_)
    : shape(std::move(shape_)), requires_grad(requires_grad_) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw validation_error("tensor: non-positive dimension");
    n *= (size_t)d;
  }
  data = std::make_shared<std::vector<double>>(n, 0.0);
  if (requires_grad) grad = std::make_shared<std::vector<double>>(n, 0.0);
}

size_t Tensor::numel() const {
  size_t n = 1;
  for (int d : shape) n *= (size_t)d;
  return n;
}

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data->begin(), t.data->end(), v);
  return t;
}

Tensor from_values(std::vector<int> shape, std::vector<double> values) {
  Tensor t(std::move(shape));
  if (values.size() != t.numel())
    throw validation_error("from_values: value count does not match shape");
  *t.data = std::move(values);
  return t;
}

Tensor randn(rng& r, std::vector<int> shape, double stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : *t.data) v = r.normal(0.0, stddev);
  return t;
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : *t.data)
    if (!std::isfinite(v))
      throw numeric_error(std::string(what) + ": non-finite value");
}

namespace {

// c[m x n] += a[m x k] * b[k x n]. The j loop carries no dependency, so the
// compiler vectorizes it without reassociating any accumulation order; the
// per-element summation order over l is fixed, which keeps replays and
// incremental decode bit-identical to full forward passes.
void matmul_acc(const double* __restrict a, const double* __restrict b,
                double* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + (size_t)i * k;
    double* crow = c + (size_t)i * n;
    for (int l = 0; l < k; ++l) {
      const double ail = arow[l];
      if (ail == 0.0) continue;
      const double* brow = b + (size_t)l * n;
      for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
}

std::vector<double> transpose_buf(const double* a, int m, int n) {
  std::vector<double> t((size_t)m * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) t[(size_t)j * m + i] = a[(size_t)i * n + j];
  return t;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.shape.size() != 2)
    throw validation_error(std::string(op) + ": expected rank-2 tensor");
}

void note_inputs(Tape* tape, std::initializer_list<const Tensor*> ts) {
  if (!tape) return;
  for (const Tensor* t : ts) {
    if (t->requires_grad && !t->grad)
      throw validation_error(
          "op: input requires grad but has no grad buffer; use set_requires_grad");
    tape->note_param(*t);
  }
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.shape[1] != b.shape[0])
    throw validation_error("matmul: inner dimensions " + std::to_string(a.shape[1]) +
                           " vs " + std::to_string(b.shape[0]));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c({m, n});
  matmul_acc(a.ptr(), b.ptr(), c.ptr(), m, k, n);
  note_inputs(tape, {&a, &b});
  if (tape && (a.requires_grad || b.requires_grad)) {
    c.requires_grad = true;
    c.ensure_grad();
    Tensor ac = a, bc = b, cc = c;
    tape->record([ac, bc, cc, m, k, n]() mutable {
      const double* dc = cc.grad->data();
      if (ac.requires_grad) {
        ac.ensure_grad();
        auto bt = transpose_buf(bc.ptr(), k, n);  // [n x k]
        matmul_acc(dc, bt.data(), ac.grad->data(), m, n, k);
      }
      if (bc.requires_grad) {
        bc.ensure_grad();
        auto at = transpose_buf(ac.ptr(), m, k);  // [k x m]
        matmul_acc(at.data(), dc, bc.grad->data(), k, m, n);
      }
    });
  }
  return c;
}

Tensor transpose(Tape* tape, const Tensor& a) {
  require_matrix(a, "transpose");
  const int m = a.shape[0], n = a.shape[1];
  Tensor t({n, m});
  *t.data = transpose_buf(a.ptr(), m, n);
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    t.requires_grad = true;
    t.ensure_grad();
    Tensor ac = a, tc = t;
    tape->record([ac, tc, m, n]() mutable {
      ac.ensure_grad();
      const double* dt = tc.grad->data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          (*ac.grad)[(size_t)j * n + i] += dt[(size_t)i * m + j];
    });
  }
  return t;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(Tape* tape, const Tensor& a, const Tensor& b, const char* op,
                 Fwd fwd, Bwd bwd) {
  if (!a.same_shape(b))
    throw validation_error(std::string(op) + ": shape mismatch");
  Tensor c(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*c.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
  note_inputs(tape, {&a, &b});
  if (tape && (a.requires_grad || b.requires_grad)) {
    c.requires_grad = true;
    c.ensure_grad();
    Tensor ac = a, bc = b, cc = c;
    tape->record([ac, bc, cc, n, bwd]() mutable {
      if (ac.requires_grad) ac.ensure_grad();
      if (bc.requires_grad) bc.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        auto [da, db] = bwd((*ac.data)[i], (*bc.data)[i], (*cc.grad)[i]);
        if (ac.requires_grad) (*ac.grad)[i] += da;
        if (bc.requires_grad) (*bc.grad)[i] += db;
      }
    });
  }
  return c;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, "add",
                   [](double x, double y) { return x + y; },
                   [](double, double, double d) { return std::pair(d, d); });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, "sub",
                   [](double x, double y) { return x - y; },
                   [](double, double, double d) { return std::pair(d, -d); });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, a, b, "mul",
                   [](double x, double y) { return x * y; },
                   [](double x, double y, double d) { return std::pair(d * y, d * x); });
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, c, n]() mutable {
      ac.ensure_grad();
      for (size_t i = 0; i < n; ++i) (*ac.grad)[i] += c * (*oc.grad)[i];
    });
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& a) {
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) {
    double v = (*a.data)[i];
    (*out.data)[i] = v > 0.0 ? v : 0.0;
  }
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, n]() mutable {
      ac.ensure_grad();
      for (size_t i = 0; i < n; ++i)
        if ((*ac.data)[i] > 0.0) (*ac.grad)[i] += (*oc.grad)[i];
    });
  }
  return out;
}

Tensor rows_gather(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
  require_matrix(table, "rows_gather");
  const int n = table.shape[0], d = table.shape[1];
  for (int id : ids)
    if (id < 0 || id >= n)
      throw validation_error("rows_gather: id " + std::to_string(id) + " out of range");
  Tensor out({(int)ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.ptr() + i * d, table.ptr() + (size_t)ids[i] * d, sizeof(double) * d);
  note_inputs(tape, {&table});
  if (tape && table.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor tc = table, oc = out;
    auto idc = ids;
    tape->record([tc, oc, idc, d]() mutable {
      tc.ensure_grad();
      for (size_t i = 0; i < idc.size(); ++i) {
        double* dst = tc.grad->data() + (size_t)idc[i] * d;
        const double* src = oc.grad->data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor slice_cols(Tape* tape, const Tensor& a, int start, int len) {
  require_matrix(a, "slice_cols");
  const int m = a.shape[0], n = a.shape[1];
  if (start < 0 || len <= 0 || start + len > n)
    throw validation_error("slice_cols: range out of bounds");
  Tensor out({m, len});
  for (int i = 0; i < m; ++i)
    std::memcpy(out.ptr() + (size_t)i * len, a.ptr() + (size_t)i * n + start,
                sizeof(double) * len);
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, m, n, start, len]() mutable {
      ac.ensure_grad();
      for (int i = 0; i < m; ++i) {
        double* dst = ac.grad->data() + (size_t)i * n + start;
        const double* src = oc.grad->data() + (size_t)i * len;
        for (int j = 0; j < len; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw validation_error("concat_cols: no parts");
  const int m = parts[0].shape[0];
  int total = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.shape[0] != m) throw validation_error("concat_cols: row mismatch");
    total += p.shape[1];
  }
  Tensor out({m, total});
  bool any_grad = false;
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.shape[1];
    for (int i = 0; i < m; ++i)
      std::memcpy(out.ptr() + (size_t)i * total + off, p.ptr() + (size_t)i * w,
                  sizeof(double) * w);
    off += w;
    any_grad = any_grad || p.requires_grad;
    note_inputs(tape, {&p});
  }
  if (tape && any_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    auto pc = parts;
    Tensor oc = out;
    tape->record([pc, oc, m, total]() mutable {
      int off = 0;
      for (Tensor& p : pc) {
        const int w = p.shape[1];
        if (p.requires_grad) {
          p.ensure_grad();
          for (int i = 0; i < m; ++i) {
            double* dst = p.grad->data() + (size_t)i * w;
            const double* src = oc.grad->data() + (size_t)i * total + off;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor add_to_row(Tape* tape, const Tensor& a, int row, const Tensor& delta) {
  require_matrix(a, "add_to_row");
  if (row < 0 || row >= a.shape[0])
    throw validation_error("add_to_row: row out of range");
  if (delta.numel() != (size_t)a.shape[1])
    throw validation_error("add_to_row: delta width mismatch");
  Tensor out(a.shape);
  *out.data = *a.data;
  const int n = a.shape[1];
  for (int j = 0; j < n; ++j) out.at(row, j) += delta.at(j);
  note_inputs(tape, {&a, &delta});
  if (tape && (a.requires_grad || delta.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, dc = delta, oc = out;
    tape->record([ac, dc, oc, row, n]() mutable {
      if (ac.requires_grad) {
        ac.ensure_grad();
        const size_t total = oc.numel();
        for (size_t i = 0; i < total; ++i) (*ac.grad)[i] += (*oc.grad)[i];
      }
      if (dc.requires_grad) {
        dc.ensure_grad();
        for (int j = 0; j < n; ++j)
          (*dc.grad)[j] += (*oc.grad)[(size_t)row * n + j];
      }
    });
  }
  return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& a, bool causal) {
  require_matrix(a, "softmax_rows");
  const int m = a.shape[0], n = a.shape[1];
  if (causal && m > n)
    throw validation_error("softmax_rows: causal mask needs cols >= rows");
  Tensor out(a.shape);
  for (int i = 0; i < m; ++i) {
    const int lim = causal ? std::min(i + 1, n) : n;
    const double* x = a.ptr() + (size_t)i * n;
    double* y = out.ptr() + (size_t)i * n;
    double mx = x[0];
    for (int j = 1; j < lim; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < lim; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < lim; ++j) y[j] /= z;
    for (int j = lim; j < n; ++j) y[j] = 0.0;
  }
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, m, n, causal]() mutable {
      ac.ensure_grad();
      for (int i = 0; i < m; ++i) {
        const int lim = causal ? std::min(i + 1, n) : n;
        const double* y = oc.ptr() + (size_t)i * n;
        const double* dy = oc.grad->data() + (size_t)i * n;
        double* dx = ac.grad->data() + (size_t)i * n;
        double dot = 0.0;
        for (int j = 0; j < lim; ++j) dot += dy[j] * y[j];
        for (int j = 0; j < lim; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& a, double eps) {
  require_matrix(a, "layer_norm");
  const int m = a.shape[0], n = a.shape[1];
  Tensor out(a.shape);
  std::vector<double> inv_std(m);
  for (int i = 0; i < m; ++i) {
    const double* x = a.ptr() + (size_t)i * n;
    double* y = out.ptr() + (size_t)i * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= n;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv_std[i];
  }
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, inv_std, m, n]() mutable {
      ac.ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* y = oc.ptr() + (size_t)i * n;
        const double* dy = oc.grad->data() + (size_t)i * n;
        double* dx = ac.grad->data() + (size_t)i * n;
        double mean_dy = 0.0, mean_dyy = 0.0;
        for (int j = 0; j < n; ++j) {
          mean_dy += dy[j];
          mean_dyy += dy[j] * y[j];
        }
        mean_dy /= n;
        mean_dyy /= n;
        for (int j = 0; j < n; ++j)
          dx[j] += inv_std[i] * (dy[j] - mean_dy - y[j] * mean_dyy);
      }
    });
  }
  return out;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, int target) {
  if (logits.shape.size() > 2 || logits.rows() != 1)
    throw validation_error("cross_entropy: expected a single logit row");
  const int v = (int)logits.numel();
  if (target < 0 || target >= v)
    throw validation_error("cross_entropy: target out of range");
  return cross_entropy_rows(tape, logits, {target}, {1.0});
}

Tensor cross_entropy_rows(Tape* tape, const Tensor& logits,
                          const std::vector<int>& targets,
                          const std::vector<double>& weights) {
  require_matrix(logits, "cross_entropy_rows");
  const int m = logits.shape[0], v = logits.shape[1];
  if ((int)targets.size() != m || (int)weights.size() != m)
    throw validation_error("cross_entropy_rows: target/weight count mismatch");
  // probs retained for backward
  auto probs = std::make_shared<std::vector<double>>((size_t)m * v, 0.0);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || targets[i] >= v)
      throw validation_error("cross_entropy_rows: target out of range");
    const double* x = logits.ptr() + (size_t)i * v;
    double* p = probs->data() + (size_t)i * v;
    double mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < v; ++j) p[j] /= z;
    total += weights[i] * -std::log(p[targets[i]]);
  }
  Tensor out = from_values({1}, {total});
  note_inputs(tape, {&logits});
  if (tape && logits.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor lc = logits, oc = out;
    auto tc = targets;
    auto wc = weights;
    tape->record([lc, oc, tc, wc, probs, m, v]() mutable {
      lc.ensure_grad();
      const double d = (*oc.grad)[0];
      for (int i = 0; i < m; ++i) {
        if (wc[i] == 0.0) continue;
        const double* p = probs->data() + (size_t)i * v;
        double* dl = lc.grad->data() + (size_t)i * v;
        const double w = wc[i] * d;
        for (int j = 0; j < v; ++j) dl[j] += w * p[j];
        dl[tc[i]] -= w;
      }
    });
  }
  return out;
}

Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q) {
  if (p.numel() != q.numel())
    throw validation_error("kl_divergence: length mismatch");
  const size_t n = p.numel();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double pi = (*p.data)[i], qi = (*q.data)[i];
    if (pi < 0.0 || qi < 0.0)
      throw validation_error("kl_divergence: negative probability");
    if (pi == 0.0) continue;
    if (qi == 0.0)
      throw numeric_error("kl_divergence: p > 0 where q == 0 diverges");
    acc += pi * std::log(pi / qi);
  }
  Tensor out = from_values({1}, {acc});
  note_inputs(tape, {&p, &q});
  if (tape && (p.requires_grad || q.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor pc = p, qc = q, oc = out;
    tape->record([pc, qc, oc, n]() mutable {
      const double d = (*oc.grad)[0];
      for (size_t i = 0; i < n; ++i) {
        const double pi = (*pc.data)[i], qi = (*qc.data)[i];
        if (pi == 0.0) continue;
        if (pc.requires_grad) {
          pc.ensure_grad();
          (*pc.grad)[i] += d * (std::log(pi / qi) + 1.0);
        }
        if (qc.requires_grad) {
          qc.ensure_grad();
          (*qc.grad)[i] += d * (-pi / qi);
        }
      }
    });
  }
  return out;
}

Tensor l2_norm(Tape* tape, const Tensor& a) {
  double acc = 0.0;
  for (double v : *a.data) acc += v * v;
  const double norm = std::sqrt(acc);
  Tensor out = from_values({1}, {norm});
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, norm]() mutable {
      if (norm == 0.0) return;
      ac.ensure_grad();
      const double d = (*oc.grad)[0] / norm;
      const size_t n = ac.numel();
      for (size_t i = 0; i < n; ++i) (*ac.grad)[i] += d * (*ac.data)[i];
    });
  }
  return out;
}

Tensor mul_scalar(Tape* tape, const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw validation_error("mul_scalar: scalar must have one element");
  const double sv = (*s.data)[0];
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * sv;
  note_inputs(tape, {&a, &s});
  if (tape && (a.requires_grad || s.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, sc = s, oc = out;
    tape->record([ac, sc, oc, sv, n]() mutable {
      if (ac.requires_grad) {
        ac.ensure_grad();
        for (size_t i = 0; i < n; ++i) (*ac.grad)[i] += sv * (*oc.grad)[i];
      }
      if (sc.requires_grad) {
        sc.ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += (*ac.data)[i] * (*oc.grad)[i];
        (*sc.grad)[0] += acc;
      }
    });
  }
  return out;
}

Tensor add_scalars(Tape* tape, const std::vector<Tensor>& xs,
                   const std::vector<double>& ws) {
  if (xs.size() != ws.size() || xs.empty())
    throw validation_error("add_scalars: term/weight mismatch");
  double acc = 0.0;
  bool any_grad = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) throw validation_error("add_scalars: non-scalar term");
    acc += ws[i] * (*xs[i].data)[0];
    any_grad = any_grad || xs[i].requires_grad;
    note_inputs(tape, {&xs[i]});
  }
  Tensor out = from_values({1}, {acc});
  if (tape && any_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    auto xc = xs;
    auto wc = ws;
    Tensor oc = out;
    tape->record([xc, wc, oc]() mutable {
      for (size_t i = 0; i < xc.size(); ++i) {
        if (!xc[i].requires_grad) continue;
        xc[i].ensure_grad();
        (*xc[i].grad)[0] += wc[i] * (*oc.grad)[0];
      }
    });
  }
  return out;
}

Tensor exp_t(Tape* tape, const Tensor& a) {
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*a.data)[i]);
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, n]() mutable {
      ac.ensure_grad();
      for (size_t i = 0; i < n; ++i)
        (*ac.grad)[i] += (*oc.data)[i] * (*oc.grad)[i];
    });
  }
  return out;
}

Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw validation_error("minimum: shape mismatch");
  Tensor out(a.shape);
  const size_t n = a.numel();
  // pick[i] true = a side carries the gradient; ties go to b
  auto pick = std::make_shared<std::vector<char>>(n);
  for (size_t i = 0; i < n; ++i) {
    const double av = (*a.data)[i], bv = (*b.data)[i];
    (*pick)[i] = av < bv;
    (*out.data)[i] = av < bv ? av : bv;
  }
  note_inputs(tape, {&a, &b});
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, pick, n]() mutable {
      if (ac.requires_grad) ac.ensure_grad();
      if (bc.requires_grad) bc.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        if ((*pick)[i]) {
          if (ac.requires_grad) (*ac.grad)[i] += (*oc.grad)[i];
        } else {
          if (bc.requires_grad) (*bc.grad)[i] += (*oc.grad)[i];
        }
      }
    });
  }
  return out;
}

Tensor clamp_const(Tape* tape, const Tensor& a, double lo, double hi) {
  if (lo > hi) throw validation_error("clamp_const: lo > hi");
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i)
    (*out.data)[i] = std::min(hi, std::max(lo, (*a.data)[i]));
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    tape->record([ac, oc, lo, hi, n]() mutable {
      ac.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const double v = (*ac.data)[i];
        if (v > lo && v < hi) (*ac.grad)[i] += (*oc.grad)[i];
      }
    });
  }
  return out;
}

Tensor log_prob_rows(Tape* tape, const Tensor& logits,
                     const std::vector<int>& targets) {
  require_matrix(logits, "log_prob_rows");
  const int m = logits.shape[0], v = logits.shape[1];
  if ((int)targets.size() != m)
    throw validation_error("log_prob_rows: target count mismatch");
  auto probs = std::make_shared<std::vector<double>>((size_t)m * v, 0.0);
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    if (targets[i] < 0 || targets[i] >= v)
      throw validation_error("log_prob_rows: target out of range");
    const double* x = logits.ptr() + (size_t)i * v;
    double* p = probs->data() + (size_t)i * v;
    double mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < v; ++j) p[j] /= z;
    (*out.data)[i] = std::log(p[targets[i]]);
  }
  note_inputs(tape, {&logits});
  if (tape && logits.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor lc = logits, oc = out;
    auto tc = targets;
    tape->record([lc, oc, tc, probs, m, v]() mutable {
      lc.ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double d = (*oc.grad)[i];
        if (d == 0.0) continue;
        const double* p = probs->data() + (size_t)i * v;
        double* dl = lc.grad->data() + (size_t)i * v;
        for (int j = 0; j < v; ++j) dl[j] -= d * p[j];
        dl[tc[i]] += d;
      }
    });
  }
  return out;
}

Tensor add_row_broadcast(Tape* tape, const Tensor& a, const Tensor& delta,
                         const std::vector<double>& row_weights) {
  require_matrix(a, "add_row_broadcast");
  require_matrix(delta, "add_row_broadcast");
  const int m = a.shape[0], n = a.shape[1];
  if (delta.shape[0] != 1 || delta.shape[1] != n)
    throw validation_error("add_row_broadcast: delta must be [1, cols]");
  if ((int)row_weights.size() != m)
    throw validation_error("add_row_broadcast: weight count mismatch");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) + row_weights[i] * delta.at(0, j);
  note_inputs(tape, {&a, &delta});
  if (tape && (a.requires_grad || delta.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, dc = delta, oc = out;
    auto wc = row_weights;
    tape->record([ac, dc, oc, wc, m, n]() mutable {
      if (ac.requires_grad) {
        ac.ensure_grad();
        for (size_t i = 0; i < (size_t)m * n; ++i)
          (*ac.grad)[i] += (*oc.grad)[i];
      }
      if (dc.requires_grad) {
        dc.ensure_grad();
        for (int i = 0; i < m; ++i) {
          if (wc[i] == 0.0) continue;
          for (int j = 0; j < n; ++j)
            (*dc.grad)[(size_t)j] += wc[i] * (*oc.grad)[(size_t)i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor add_scaled_rows(Tape* tape, const Tensor& a, const Tensor& b,
                       const std::vector<double>& row_weights) {
  require_matrix(a, "add_scaled_rows");
  if (!a.same_shape(b))
    throw validation_error("add_scaled_rows: shape mismatch");
  const int m = a.shape[0], n = a.shape[1];
  if ((int)row_weights.size() != m)
    throw validation_error("add_scaled_rows: weight count mismatch");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) + row_weights[i] * b.at(i, j);
  note_inputs(tape, {&a, &b});
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, bc = b, oc = out;
    auto wc = row_weights;
    tape->record([ac, bc, oc, wc, m, n]() mutable {
      if (ac.requires_grad) {
        ac.ensure_grad();
        for (size_t i = 0; i < (size_t)m * n; ++i)
          (*ac.grad)[i] += (*oc.grad)[i];
      }
      if (bc.requires_grad) {
        bc.ensure_grad();
        for (int i = 0; i < m; ++i) {
          if (wc[i] == 0.0) continue;
          for (int j = 0; j < n; ++j)
            (*bc.grad)[(size_t)i * n + j] += wc[i] * (*oc.grad)[(size_t)i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor weighted_sum(Tape* tape, const Tensor& a, const std::vector<double>& w) {
  const size_t n = a.numel();
  if (w.size() != n) throw validation_error("weighted_sum: weight count mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += w[i] * (*a.data)[i];
  Tensor out = from_values({1}, {acc});
  note_inputs(tape, {&a});
  if (tape && a.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    Tensor ac = a, oc = out;
    auto wc = w;
    tape->record([ac, oc, wc, n]() mutable {
      ac.ensure_grad();
      const double d = (*oc.grad)[0];
      for (size_t i = 0; i < n; ++i) (*ac.grad)[i] += wc[i] * d;
    });
  }
  return out;
}

std::vector<Tensor> gradient(Tape& tape, Tensor& loss, const std::vector<Tensor>& params) {
  if (loss.numel() != 1) throw validation_error("gradient: loss must be scalar");
  for (const Tensor& p : params)
    if (!tape.saw_param(p))
      throw validation_error("gradient: param missing from tape (no dependency)");
  loss.ensure_grad();
  (*loss.grad)[0] = 1.0;
  tape.backward();
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    Tensor g(p.shape);
    if (p.grad) *g.data = *p.grad;
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace cotlab
