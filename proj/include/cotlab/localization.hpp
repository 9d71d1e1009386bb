#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cotlab/model.hpp"
#include "cotlab/tasks.hpp"

namespace cotlab {

struct HeadId {
  int layer = 0;
  int head = 0;
  bool operator==(const HeadId& o) const {
    return layer == o.layer && head == o.head;
  }
  bool operator<(const HeadId& o) const {
    return layer != o.layer ? layer < o.layer : head < o.head;
  }
};

struct HeadScore {
  HeadId id;
  double xi_task = 0.0;  // task-masked activation / baseline activation
  double xi_base = 0.0;  // union-masked activation on general data
};

struct SensitivityReport {
  std::string task;
  std::vector<HeadScore> scores;  // all heads, (layer, head) order
  int n_task_samples = 0;
  int n_base_samples = 0;
  std::vector<HeadId> degenerate;  // zero baseline activation (reported, skipped)
};

struct HeadSelection {
  std::string task;
  std::vector<HeadScore> heads;   // xi_task descending, ties by (layer, head)
  double threshold_used = 0.0;
  bool fallback = false;          // set by callers that lower the threshold
};

// attention-mask in matrix form: F[i][j] = 1 iff token j is one of the
// task's semantic units and position i is one of its grammar operands
Tensor build_mask(const std::vector<int>& tokens, const std::string& task);
// union over all registry tasks; sequences that do not parse under a task
// contribute nothing for it
Tensor build_mask_union(const std::vector<int>& tokens);

double masked_sum(const Tensor& attention, const Tensor& mask);  // sum(A ⊙ F)

struct ProbeSet {
  std::vector<std::vector<int>> tokens;  // serialized sequences
  std::vector<Tensor> masks;             // parallel, [T,T] each
};
// mask_task "" -> union mask (baseline probes)
ProbeSet make_probe(const std::vector<ReasoningSample>& samples,
                    const std::string& mask_task);

// xi_task = mean_task sum(A ⊙ F_task) / mean_base sum(A)
// xi_base = mean_base sum(A ⊙ F_all) / mean_base sum(A)
// Per-sample sums are sorted before reduction, so scores do not depend on
// sample order or batch partitioning.
SensitivityReport head_sensitivity(const Model& m, const std::string& task,
                                   const ProbeSet& task_probe,
                                   const ProbeSet& base_probe);

// keep xi_task > threshold and xi_base <= prune_floor
HeadSelection select_heads(const SensitivityReport& report, double threshold,
                           double prune_floor);
// contested heads go to the task with the higher xi_task (earlier selection
// wins exact ties); resulting head sets are pairwise disjoint
std::vector<HeadSelection> enforce_disjoint(std::vector<HeadSelection> sels);

// Frobenius norm of B_i B_j^T, the cross-task interference penalty
Tensor orthogonality_penalty(Tape* tape, const Tensor& bi, const Tensor& bj);
double orthogonality_penalty(const Tensor& bi, const Tensor& bj);
double orthogonality_epsilon(int rows_i, int rows_j);  // 1e-3 * sqrt(ri*rj)

// columns: layer,head,xi_task,xi_base,selected
void save_sensitivity_csv(const std::filesystem::path& file,
                          const SensitivityReport& report,
                          const HeadSelection& selected);

}  // namespace cotlab
