#include "cotlab/localization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cotlab {

Tensor build_mask(const std::vector<int>& tokens, const std::string& task) {
  const auto adj = adjacency(task, tokens);
  const int T = (int)tokens.size();
  Tensor f = zeros({T, T});
  for (int j = 0; j < T; ++j)
    for (int i : adj[(size_t)j]) f.at(i, j) = 1.0;
  return f;
}

Tensor build_mask_union(const std::vector<int>& tokens) {
  const int T = (int)tokens.size();
  Tensor f = zeros({T, T});
  for (const TaskSpec& t : task_registry()) {
    auto adj = try_adjacency(t.name, tokens);
    if (!adj) continue;
    for (int j = 0; j < T; ++j)
      for (int i : (*adj)[(size_t)j]) f.at(i, j) = 1.0;
  }
  return f;
}

double masked_sum(const Tensor& attention, const Tensor& mask) {
  if (!attention.same_shape(mask))
    throw validation_error("masked_sum: attention and mask shapes differ");
  const double* a = attention.ptr();
  const double* m = mask.ptr();
  double acc = 0.0;
  for (size_t i = 0; i < attention.numel(); ++i) acc += a[i] * m[i];
  return acc;
}

ProbeSet make_probe(const std::vector<ReasoningSample>& samples,
                    const std::string& mask_task) {
  ProbeSet p;
  for (const ReasoningSample& s : samples) {
    const auto tokens = serialize_sample(s).tokens;
    p.masks.push_back(mask_task.empty() ? build_mask_union(tokens)
                                        : build_mask(tokens, mask_task));
    p.tokens.push_back(tokens);
  }
  return p;
}

namespace {

// permutation-invariant mean: sort before accumulating
double canonical_mean(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  return std::accumulate(xs.begin(), xs.end(), 0.0) / (double)xs.size();
}

}  // namespace

SensitivityReport head_sensitivity(const Model& m, const std::string& task,
                                   const ProbeSet& task_probe,
                                   const ProbeSet& base_probe) {
  if (task_probe.tokens.empty() || base_probe.tokens.empty())
    throw validation_error("head_sensitivity: probe sets must be non-empty");
  if (task_probe.tokens.size() != task_probe.masks.size() ||
      base_probe.tokens.size() != base_probe.masks.size())
    throw validation_error("head_sensitivity: tokens/masks length mismatch");
  const int L = m.cfg.n_layers, H = m.cfg.n_heads;
  const size_t n_heads = (size_t)(L * H);
  std::vector<std::vector<double>> task_masked(n_heads), base_masked(n_heads),
      base_total(n_heads);

  auto sweep = [&](const ProbeSet& probe, std::vector<std::vector<double>>* masked,
                   std::vector<std::vector<double>>* total) {
    for (size_t s = 0; s < probe.tokens.size(); ++s) {
      ForwardTrace trace;
      forward(m, nullptr, probe.tokens[s], nullptr, &trace);
      for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) {
          const Tensor& a = trace.attention[(size_t)l][(size_t)h];
          const size_t ix = (size_t)(l * H + h);
          if (masked)
            (*masked)[ix].push_back(masked_sum(a, probe.masks[s]));
          if (total) {
            const double* p = a.ptr();
            double acc = 0.0;
            for (size_t i = 0; i < a.numel(); ++i) acc += p[i];
            (*total)[ix].push_back(acc);
          }
        }
    }
  };
  sweep(task_probe, &task_masked, nullptr);
  sweep(base_probe, &base_masked, &base_total);

  SensitivityReport rep;
  rep.task = task;
  rep.n_task_samples = (int)task_probe.tokens.size();
  rep.n_base_samples = (int)base_probe.tokens.size();
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      const size_t ix = (size_t)(l * H + h);
      HeadScore sc;
      sc.id = {l, h};
      const double denom = canonical_mean(base_total[ix]);
      if (denom <= 0.0) {
        rep.degenerate.push_back(sc.id);
      } else {
        sc.xi_task = canonical_mean(task_masked[ix]) / denom;
        sc.xi_base = canonical_mean(base_masked[ix]) / denom;
      }
      if (!std::isfinite(sc.xi_task) || !std::isfinite(sc.xi_base) ||
          sc.xi_task < 0.0 || sc.xi_base < 0.0)
        throw numeric_error("head_sensitivity: non-finite or negative score");
      rep.scores.push_back(sc);
    }
  return rep;
}

HeadSelection select_heads(const SensitivityReport& report, double threshold,
                           double prune_floor) {
  HeadSelection sel;
  sel.task = report.task;
  sel.threshold_used = threshold;
  for (const HeadScore& s : report.scores)
    if (s.xi_task > threshold && s.xi_base <= prune_floor)
      sel.heads.push_back(s);
  std::sort(sel.heads.begin(), sel.heads.end(),
            [](const HeadScore& a, const HeadScore& b) {
              if (a.xi_task != b.xi_task) return a.xi_task > b.xi_task;
              return a.id < b.id;
            });
  return sel;
}

std::vector<HeadSelection> enforce_disjoint(std::vector<HeadSelection> sels) {
  // owner of each head = selection where its xi_task is highest
  std::vector<std::pair<HeadId, size_t>> owner;  // head -> winning selection
  for (size_t i = 0; i < sels.size(); ++i) {
    for (const HeadScore& s : sels[i].heads) {
      auto it = std::find_if(owner.begin(), owner.end(),
                             [&](const auto& o) { return o.first == s.id; });
      if (it == owner.end()) {
        owner.push_back({s.id, i});
        continue;
      }
      const auto& held = sels[it->second];
      double held_xi = 0.0;
      for (const HeadScore& h : held.heads)
        if (h.id == s.id) held_xi = h.xi_task;
      if (s.xi_task > held_xi) it->second = i;  // ties keep the earlier task
    }
  }
  for (size_t i = 0; i < sels.size(); ++i) {
    auto& heads = sels[i].heads;
    heads.erase(std::remove_if(heads.begin(), heads.end(),
                               [&](const HeadScore& s) {
                                 for (const auto& o : owner)
                                   if (o.first == s.id) return o.second != i;
                                 return true;
                               }),
                heads.end());
  }
  return sels;
}

Tensor orthogonality_penalty(Tape* tape, const Tensor& bi, const Tensor& bj) {
  if (bi.cols() != bj.cols())
    throw validation_error("orthogonality_penalty: inner dimensions differ");
  Tensor prod = matmul(tape, bi, transpose(tape, bj));
  return l2_norm(tape, prod);
}

double orthogonality_penalty(const Tensor& bi, const Tensor& bj) {
  return orthogonality_penalty(nullptr, bi, bj).at(0, 0);
}

double orthogonality_epsilon(int rows_i, int rows_j) {
  return 1e-3 * std::sqrt((double)rows_i * (double)rows_j);
}

void save_sensitivity_csv(const std::filesystem::path& file,
                          const SensitivityReport& report,
                          const HeadSelection& selected) {
  csv_writer csv;
  csv.row({"layer", "head", "xi_task", "xi_base", "selected"});
  for (const HeadScore& s : report.scores) {
    bool in = false;
    for (const HeadScore& h : selected.heads) in |= h.id == s.id;
    csv.row({std::to_string(s.id.layer), std::to_string(s.id.head),
             format_double(s.xi_task), format_double(s.xi_base),
             in ? "1" : "0"});
  }
  csv.save(file);
}

}  // namespace cotlab
