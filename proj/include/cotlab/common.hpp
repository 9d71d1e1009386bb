#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotlab {

// Process exit codes used by the cotlab tool and by stage orchestration.
enum exit_code : int {
  exit_ok = 0,
  exit_validation = 1,
  exit_prerequisite = 2,
  exit_numeric = 3,
};

// Thrown for malformed inputs: bad config values, bad shapes, bad files.
struct validation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a pipeline stage is missing an artifact from an earlier stage.
struct prerequisite_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when training or evaluation produces non-finite values.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG wrapper. All stochastic behavior in the project flows
// through one of these, seeded from the run config.
struct rng {
  std::mt19937_64 gen;

  explicit rng(uint64_t seed) : gen(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen);
  }
  // inclusive range
  int64_t randint(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen);
  }
  template <typename T>
  const T& pick(const std::vector<T>& v) {
    if (v.empty()) throw validation_error("rng::pick: empty vector");
    return v[(size_t)randint(0, (int64_t)v.size() - 1)];
  }
  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen);
  }
  // independent child stream; keeps stage seeds decoupled
  rng fork(uint64_t salt) {
    return rng(gen() ^ (salt * 0x9e3779b97f4a7c15ull));
  }
};

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& body);

// Minimal CSV emitter; fields are written verbatim (no quoting needed for
// the numeric/identifier-only tables this project produces).
struct csv_writer {
  std::string body;
  void row(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) body += ',';
      body += fields[i];
    }
    body += '\n';
  }
  void save(const std::filesystem::path& p) const { write_text_file(p, body); }
};

std::string format_double(double v);

}  // namespace cotlab
