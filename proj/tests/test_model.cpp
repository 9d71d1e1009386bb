#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "cotlab/checkpoint.hpp"
#include "cotlab/model.hpp"

using namespace cotlab;

namespace {

TransformerConfig tiny_cfg() {
  TransformerConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 24;
  c.context_len = 32;
  return c;
}

std::vector<int> random_tokens(rng& r, const TransformerConfig& c, int len) {
  std::vector<int> t(len);
  for (int& x : t) x = (int)r.randint(0, c.vocab_size - 1);
  return t;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape &&
         std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("config validation") {
  TransformerConfig c = tiny_cfg();
  c.d_model = 15;  // not divisible by heads
  CHECK_THROWS_AS(c.validate(), validation_error);
  c = tiny_cfg();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), validation_error);
}

TEST_CASE("forward validates tokens and length") {
  rng r(1);
  Model m(tiny_cfg(), r);
  CHECK_THROWS_AS(forward(m, nullptr, {}), validation_error);
  CHECK_THROWS_AS(forward(m, nullptr, {0, 99}), validation_error);
  std::vector<int> too_long(m.cfg.context_len + 1, 1);
  CHECK_THROWS_AS(forward(m, nullptr, too_long), validation_error);
}

TEST_CASE("forward is deterministic and empty hooks are neutral") {
  rng r(2);
  Model m(tiny_cfg(), r);
  auto tokens = random_tokens(r, m.cfg, 12);
  Tensor a = forward(m, nullptr, tokens);
  Tensor b = forward(m, nullptr, tokens);
  HookSet empty;
  std::vector<int> steps(tokens.size(), 0);
  steps.back() = 1;
  Tensor c = forward(m, nullptr, tokens, &empty, nullptr, &steps);
  CHECK(same_bits(a, b));
  CHECK(same_bits(a, c));
}

TEST_CASE("attention trace rows are stochastic and causal") {
  rng r(3);
  Model m(tiny_cfg(), r);
  auto tokens = random_tokens(r, m.cfg, 10);
  ForwardTrace trace;
  forward(m, nullptr, tokens, nullptr, &trace);
  REQUIRE(trace.attention.size() == (size_t)m.cfg.n_layers);
  REQUIRE(trace.residual.size() == (size_t)m.cfg.n_layers);
  for (auto& layer : trace.attention) {
    REQUIRE(layer.size() == (size_t)m.cfg.n_heads);
    for (auto& head : layer) {
      for (int i = 0; i < head.rows(); ++i) {
        double acc = 0.0;
        for (int j = 0; j < head.cols(); ++j) {
          acc += head.at(i, j);
          if (j > i) CHECK(head.at(i, j) == 0.0);
        }
        CHECK(std::fabs(acc - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("decode session logits are bit-identical to full forward") {
  rng r(4);
  Model m(tiny_cfg(), r);
  for (int rep = 0; rep < 5; ++rep) {
    auto tokens = random_tokens(r, m.cfg, 3 + (int)r.randint(0, 12));
    DecodeSession sess(m, nullptr);
    Tensor last_row;
    for (size_t i = 0; i < tokens.size(); ++i) last_row = sess.step(tokens[i], 0);
    Tensor full = forward(m, nullptr, tokens);
    const int T = (int)tokens.size(), V = m.cfg.vocab_size;
    CHECK(std::memcmp(last_row.ptr(), full.ptr() + (size_t)(T - 1) * V,
                      sizeof(double) * V) == 0);
  }
}

TEST_CASE("greedy generation matches the full-recompute reference") {
  rng r(5);
  Model m(tiny_cfg(), r);
  for (int rep = 0; rep < 5; ++rep) {
    auto prompt = random_tokens(r, m.cfg, 4 + (int)r.randint(0, 4));
    auto fast = generate(m, prompt, 10, 0);
    auto ref = generate_reference(m, prompt, 10, 0);
    CHECK(fast.tokens == ref.tokens);
    CHECK(fast.hit_eos == ref.hit_eos);
  }
}

TEST_CASE("generation with hooks matches the reference hook semantics") {
  rng r(6);
  Model m(tiny_cfg(), r);
  // residual hook pushes the stream, logit hook favors token 3 as steps grow
  Tensor push = full({1, m.cfg.d_model}, 0.05);
  HookSet hooks;
  hooks.residual_layers = {1};
  hooks.residual_transform = [&](Tape* tape, int layer, const Tensor& h,
                                 const std::vector<int>& steps) {
    Tensor out = h;
    for (size_t i = 0; i < steps.size(); ++i)
      if (steps[i] > 0) out = add_to_row(tape, out, (int)i, push);
    return out;
  };
  hooks.logit_bias = [&](Tape* tape, const Tensor& logits,
                         const std::vector<int>& steps) {
    Tensor out = logits;
    for (size_t i = 0; i < steps.size(); ++i)
      if (steps[i] > 0) {
        Tensor bias = zeros({1, out.cols()});
        bias.at(0, 3) = 0.1 * steps[i];
        out = add_to_row(tape, out, (int)i, bias);
      }
    return out;
  };
  auto prompt = random_tokens(r, m.cfg, 6);
  auto fast = generate(m, prompt, 12, 0, &hooks);
  auto ref = generate_reference(m, prompt, 12, 0, &hooks);
  CHECK(fast.tokens == ref.tokens);
  auto clean = generate(m, prompt, 12, 0);
  CHECK(fast.tokens != clean.tokens);  // hooks must actually bite
}

TEST_CASE("head slices tile the projections and swap/revert is bit-exact") {
  rng r(7);
  Model m(tiny_cfg(), r);
  const int hd = m.cfg.head_dim();

  // reassemble wq from its head slices
  std::vector<Tensor> parts;
  for (int h = 0; h < m.cfg.n_heads; ++h)
    parts.push_back(read_head_slices(m, 0, h).q);
  Tensor glued = concat_cols(nullptr, parts);
  CHECK(same_bits(glued, m.layers[0].wq));

  auto tokens = random_tokens(r, m.cfg, 9);
  Tensor before = forward(m, nullptr, tokens);
  std::vector<double> wq_before = *m.layers[0].wq.data;

  HeadSlices repl;
  repl.q = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.k = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.v = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.o = randn(r, {hd, m.cfg.d_model}, 0.1);
  {
    SwapHandle handle(m, 0, 1, repl);
    Tensor during = forward(m, nullptr, tokens);
    CHECK_FALSE(same_bits(before, during));
    CHECK(same_bits(read_head_slices(m, 0, 1).q, repl.q));
  }
  CHECK(*m.layers[0].wq.data == wq_before);
  Tensor after = forward(m, nullptr, tokens);
  CHECK(same_bits(before, after));
}

TEST_CASE("weight overlay equals an in-place head swap") {
  rng r(8);
  Model m(tiny_cfg(), r);
  const int hd = m.cfg.head_dim();
  HeadSlices repl;
  repl.q = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.k = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.v = randn(r, {m.cfg.d_model, hd}, 0.1);
  repl.o = randn(r, {hd, m.cfg.d_model}, 0.1);
  auto tokens = random_tokens(r, m.cfg, 11);

  Tensor swapped;
  {
    SwapHandle handle(m, 1, 0, repl);
    swapped = forward(m, nullptr, tokens);
  }

  // overlay built functionally from the same slices
  HookSet hooks;
  LayerWeights lw;
  auto patch_cols = [&](const Tensor& base, const Tensor& sl) {
    std::vector<Tensor> parts = {sl};
    parts.push_back(slice_cols(nullptr, base, hd, m.cfg.d_model - hd));
    return concat_cols(nullptr, parts);
  };
  lw.wq = patch_cols(m.layers[1].wq, repl.q);
  lw.wk = patch_cols(m.layers[1].wk, repl.k);
  lw.wv = patch_cols(m.layers[1].wv, repl.v);
  Tensor wo_t = transpose(nullptr, m.layers[1].wo);
  Tensor patched_t = patch_cols(wo_t, transpose(nullptr, repl.o));
  lw.wo = transpose(nullptr, patched_t);
  hooks.weight_overlay[1] = lw;
  Tensor overlaid = forward(m, nullptr, tokens, &hooks);
  CHECK(same_bits(swapped, overlaid));
}

TEST_CASE("checkpoint round trip is bit-exact and validates") {
  rng r(9);
  Model m(tiny_cfg(), r);
  const auto dir = std::filesystem::temp_directory_path() / "cotlab_ckpt_test";
  std::filesystem::remove_all(dir);
  save_model_checkpoint(dir, m, "[model]\nexample = 1\n", 42);
  Model loaded = load_model_checkpoint(dir);
  for (size_t i = 0; i < m.named_params().size(); ++i) {
    auto a = m.named_params()[i];
    auto b = loaded.named_params()[i];
    CHECK(a.first == b.first);
    CHECK(same_bits(*a.second, *b.second));
  }
  auto manifest = read_bundle_manifest(dir, "model");
  CHECK(manifest["seed"].get<uint64_t>() == 42);
  CHECK(manifest["config_echo"].get<std::string>() == "[model]\nexample = 1\n");

  // corrupt the blob: loader must notice the size mismatch
  auto blob = read_text_file(dir / "params.bin");
  write_text_file(dir / "params.bin", blob.substr(0, blob.size() - 8));
  CHECK_THROWS_AS(load_model_checkpoint(dir), validation_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_lm learns a fixed sequence and is deterministic") {
  TransformerConfig cfg = tiny_cfg();
  rng r(10);
  Model m(cfg, r);
  // one constant sample: loss must approach zero quickly
  LmSample s;
  s.tokens = {1, 5, 9, 2, 7, 3, 8, 0};
  s.loss_start = 2;
  TrainSchedule sched;
  sched.steps = 250;
  sched.batch_size = 2;
  sched.lr = 3e-3;
  sched.weight_decay = 0.0;
  sched.seed = 77;
  auto curve = train_lm(m, {s}, sched);
  CHECK(curve.front() > curve.back());
  CHECK(curve.back() < 0.1);

  rng r2(10);
  Model m2(cfg, r2);
  auto curve2 = train_lm(m2, {s}, sched);
  CHECK(std::memcmp(curve.data(), curve2.data(), curve.size() * sizeof(double)) == 0);
  CHECK(same_bits(m.wte, m2.wte));
  CHECK(same_bits(m.layers[0].w_up, m2.layers[0].w_up));

  LmSample bad;
  bad.tokens = {1};
  bad.loss_start = 1;
  CHECK_THROWS_AS(train_lm(m, {bad}, sched), validation_error);
}
