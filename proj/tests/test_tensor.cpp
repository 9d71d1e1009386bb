#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>

#include "cotlab/tensor.hpp"

using namespace cotlab;

namespace {

// Independent gradient oracle: central finite differences over a loss
// functional. The tape under test never participates in the FD evaluations.
double fd_partial(const std::function<double()>& loss_value, double* slot, double h) {
  const double saved = *slot;
  *slot = saved + h;
  const double up = loss_value();
  *slot = saved - h;
  const double down = loss_value();
  *slot = saved;
  return (up - down) / (2.0 * h);
}

// Relative error with the denominator floored at 1: central differences have
// an absolute truncation floor around h^2, so near-zero gradients are
// compared absolutely, everything else relatively.
double max_rel_error(const std::function<Tensor(Tape*)>& build_loss,
                     std::vector<Tensor> params, double h = 1e-3) {
  Tape tape;
  Tensor loss = build_loss(&tape);
  auto grads = gradient(tape, loss, params);
  auto loss_value = [&]() { return build_loss(nullptr).at(0); };
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].numel(); ++i) {
      const double fd = fd_partial(loss_value, params[p].data->data() + i, h);
      const double ad = (*grads[p].data)[i];
      const double rel =
          std::fabs(ad - fd) / std::max({1.0, std::fabs(ad), std::fabs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Tensor param(rng& r, std::vector<int> shape, double stddev = 0.8) {
  Tensor t = randn(r, std::move(shape), stddev);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("matmul hand values and shape validation") {
  Tensor a = from_values({1, 2}, {1, 2});
  Tensor b = from_values({2, 1}, {3, 4});
  Tensor c = matmul(nullptr, a, b);
  CHECK(c.shape == std::vector<int>{1, 1});
  CHECK(c.at(0) == doctest::Approx(11.0).epsilon(1e-15));

  Tensor bad = from_values({3, 1}, {1, 2, 3});
  CHECK_THROWS_AS(matmul(nullptr, a, bad), validation_error);
}

TEST_CASE("softmax hand values and row-sum invariant") {
  Tensor x = from_values({1, 2}, {0.0, std::log(2.0)});
  Tensor y = softmax_rows(nullptr, x);
  CHECK(y.at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(y.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  rng r(7);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor z = randn(r, {6, 6}, 5.0);
    for (bool causal : {false, true}) {
      Tensor s = softmax_rows(nullptr, z, causal);
      for (int i = 0; i < 6; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 6; ++j) acc += s.at(i, j);
        CHECK(std::fabs(acc - 1.0) < 1e-9);
        if (causal)
          for (int j = i + 1; j < 6; ++j) CHECK(s.at(i, j) == 0.0);
      }
    }
  }
}

TEST_CASE("layer_norm matches closed form on [1,-1]") {
  Tensor x = from_values({1, 2}, {1.0, -1.0});
  Tensor y = layer_norm(nullptr, x);
  const double want = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y.at(0) == doctest::Approx(want).epsilon(1e-14));
  CHECK(y.at(1) == doctest::Approx(-want).epsilon(1e-14));
}

TEST_CASE("cross entropy of uniform logits is log V") {
  Tensor logits = zeros({1, 8});
  Tensor l = cross_entropy(nullptr, logits, 3);
  CHECK(l.at(0) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(nullptr, logits, 8), validation_error);
}

TEST_CASE("kl divergence hand value and error paths") {
  Tensor p = from_values({2}, {1.0, 0.0});
  Tensor q = from_values({2}, {0.5, 0.5});
  CHECK(kl_divergence(nullptr, p, q).at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor q0 = from_values({2}, {0.0, 1.0});
  CHECK_THROWS_AS(kl_divergence(nullptr, p, q0), numeric_error);
  Tensor neg = from_values({2}, {-0.1, 1.1});
  CHECK_THROWS_AS(kl_divergence(nullptr, neg, q), validation_error);
  Tensor shorter = from_values({1}, {1.0});
  CHECK_THROWS_AS(kl_divergence(nullptr, p, shorter), validation_error);
}

TEST_CASE("tape replays in exact reverse order") {
  Tape tape;
  std::vector<int> order;
  tape.record([&] { order.push_back(1); });
  tape.record([&] { order.push_back(2); });
  tape.record([&] { order.push_back(3); });
  tape.backward();
  CHECK(order == std::vector<int>{3, 2, 1});
}

TEST_CASE("gradient rejects params that never entered the tape") {
  rng r(3);
  Tensor w = param(r, {2, 2});
  Tensor lonely = param(r, {2, 2});
  Tape tape;
  Tensor x = from_values({1, 2}, {1.0, 2.0});
  Tensor h = matmul(&tape, x, w);
  Tensor loss = l2_norm(&tape, h);
  CHECK_THROWS_AS(gradient(tape, loss, {w, lonely}), validation_error);
}

TEST_CASE("analytic gradient: d/dx ||x||_2 style case") {
  Tensor x = from_values({1, 3}, {3.0, 0.0, 4.0});
  x.set_requires_grad(true);
  Tape tape;
  Tensor n = l2_norm(&tape, x);
  auto g = gradient(tape, n, {x});
  CHECK(n.at(0) == doctest::Approx(5.0));
  CHECK((*g[0].data)[0] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK((*g[0].data)[1] == doctest::Approx(0.0));
  CHECK((*g[0].data)[2] == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("forward replay and backward are bit-identical run to run") {
  rng r(11);
  Tensor w1 = param(r, {5, 6});
  Tensor w2 = param(r, {6, 4});
  Tensor x = randn(r, {3, 5}, 1.0);
  auto run = [&](std::vector<double>& out_loss, std::vector<double>& out_grad) {
    w1.zero_grad();
    w2.zero_grad();
    Tape tape;
    Tensor h = relu(&tape, matmul(&tape, x, w1));
    Tensor o = matmul(&tape, h, w2);
    Tensor loss = cross_entropy_rows(&tape, o, {1, 0, 3}, {0.25, 0.5, 0.25});
    auto g = gradient(tape, loss, {w1, w2});
    out_loss = *loss.data;
    out_grad = *g[0].data;
    out_grad.insert(out_grad.end(), g[1].data->begin(), g[1].data->end());
  };
  std::vector<double> l1, g1, l2, g2;
  run(l1, g1);
  run(l2, g2);
  CHECK(std::memcmp(l1.data(), l2.data(), l1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("finite differences agree with tape gradients on 100 random networks") {
  const auto t0 = std::chrono::steady_clock::now();
  rng r(1234);
  double worst = 0.0;
  for (int net = 0; net < 100; ++net) {
    const int kind = net % 4;
    if (kind == 0) {
      // mlp with relu and weighted cross entropy; redraw while any
      // preactivation sits within the FD step of the relu kink, where the
      // central-difference estimator itself is invalid
      const int d0 = 3 + (int)r.randint(0, 2), d1 = 3 + (int)r.randint(0, 2);
      Tensor x, w1, w2;
      for (;;) {
        x = randn(r, {3, d0}, 1.0);
        w1 = param(r, {d0, d1});
        w2 = param(r, {d1, 4});
        Tensor pre = matmul(nullptr, x, w1);
        double closest = 1e9;
        for (double v : *pre.data) closest = std::min(closest, std::fabs(v));
        if (closest > 5e-3) break;
      }
      std::vector<int> targets = {(int)r.randint(0, 3), (int)r.randint(0, 3),
                                  (int)r.randint(0, 3)};
      auto build = [&](Tape* t) {
        Tensor h = relu(t, matmul(t, x, w1));
        Tensor o = matmul(t, h, w2);
        return cross_entropy_rows(t, o, targets, {0.5, 0.2, 0.3});
      };
      worst = std::max(worst, max_rel_error(build, {w1, w2}));
    } else if (kind == 1) {
      // layer_norm head feeding a kl term against a fixed target
      Tensor x = randn(r, {1, 5}, 1.0);
      Tensor w1 = param(r, {5, 6});
      Tensor w2 = param(r, {6, 3});
      Tensor target = from_values({1, 3}, {0.7, 0.0, 0.3});
      auto build = [&](Tape* t) {
        Tensor h = layer_norm(t, matmul(t, x, w1));
        Tensor q = softmax_rows(t, matmul(t, h, w2));
        return kl_divergence(t, target, q);
      };
      worst = std::max(worst, max_rel_error(build, {w1, w2}));
    } else if (kind == 2) {
      // attention-shaped path with causal softmax and transpose
      Tensor q = param(r, {3, 4});
      Tensor k = param(r, {3, 4});
      Tensor v = param(r, {3, 4});
      Tensor gate = randn(r, {3, 4}, 1.0);
      auto build = [&](Tape* t) {
        Tensor scores = scale(t, matmul(t, q, transpose(t, k)), 0.5);
        Tensor probs = softmax_rows(t, scores, true);
        Tensor o = mul(t, matmul(t, probs, v), gate);
        return l2_norm(t, o);
      };
      worst = std::max(worst, max_rel_error(build, {q, k, v}));
    } else {
      // embedding gather, row edit, sliced/concatenated projections
      Tensor table = param(r, {6, 4});
      Tensor delta = param(r, {1, 4});
      Tensor w = param(r, {4, 5});
      Tensor s = param(r, {1});
      std::vector<int> ids = {(int)r.randint(0, 5), (int)r.randint(0, 5),
                              (int)r.randint(0, 5)};
      std::vector<int> targets = {ids[0] % 5, ids[1] % 5, ids[2] % 5};
      auto build = [&](Tape* t) {
        Tensor e = rows_gather(t, table, ids);
        Tensor e2 = add_to_row(t, e, 1, delta);
        Tensor h = matmul(t, e2, w);
        Tensor left = slice_cols(t, h, 0, 2);
        Tensor right = slice_cols(t, h, 2, 3);
        Tensor joined = concat_cols(t, {right, left});
        Tensor scaled = mul_scalar(t, joined, s);
        Tensor l1 = l2_norm(t, scaled);
        Tensor l2 = cross_entropy_rows(t, add(t, h, h), targets, {1.0, 0.0, 0.5});
        Tensor l3 = l2_norm(t, sub(t, e2, e));
        return add_scalars(t, {l1, l2, l3}, {1.0, 0.5, 0.25});
      };
      worst = std::max(worst, max_rel_error(build, {table, delta, w, s}));
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(worst < 1e-4);
  CHECK(secs < 60.0);
  MESSAGE("fd check: max rel err ", worst, " in ", secs, "s");
}

TEST_CASE("exp, minimum, clamp, log_prob_rows, weighted_sum: hand values") {
  Tensor x = from_values({3}, {0.0, 1.0, -1.0});
  Tensor e = exp_t(nullptr, x);
  CHECK(e.at(0) == 1.0);
  CHECK(e.at(1) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));

  Tensor a = from_values({4}, {1.0, -2.0, 3.0, 0.5});
  Tensor b = from_values({4}, {0.5, -1.0, 3.0, 2.0});
  Tensor mn = minimum(nullptr, a, b);
  CHECK(mn.at(0) == 0.5);
  CHECK(mn.at(1) == -2.0);
  CHECK(mn.at(2) == 3.0);
  CHECK(mn.at(3) == 0.5);
  CHECK_THROWS_AS(minimum(nullptr, a, x), validation_error);

  Tensor cl = clamp_const(nullptr, a, -1.5, 1.2);
  CHECK(cl.at(0) == 1.0);
  CHECK(cl.at(1) == -1.5);
  CHECK(cl.at(2) == 1.2);
  CHECK_THROWS_AS(clamp_const(nullptr, a, 2.0, 1.0), validation_error);

  // per-row target log-probs equal minus per-row cross entropy
  Tensor logits = from_values({2, 3}, {0.2, -0.4, 1.1, 0.0, 0.0, 0.0});
  Tensor lp = log_prob_rows(nullptr, logits, {2, 0});
  CHECK(lp.at(1) == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
  Tensor row0 = from_values({1, 3}, {0.2, -0.4, 1.1});
  CHECK(lp.at(0) == doctest::Approx(-cross_entropy(nullptr, row0, 2).at(0)).epsilon(1e-12));
  CHECK_THROWS_AS(log_prob_rows(nullptr, logits, {0}), validation_error);
  CHECK_THROWS_AS(log_prob_rows(nullptr, logits, {0, 3}), validation_error);

  Tensor ws = weighted_sum(nullptr, a, {1.0, 0.5, 0.0, 2.0});
  CHECK(ws.at(0) == doctest::Approx(1.0 - 1.0 + 0.0 + 1.0).epsilon(1e-12));
  CHECK_THROWS_AS(weighted_sum(nullptr, a, {1.0}), validation_error);
}

TEST_CASE("minimum ties route gradient to the second argument") {
  Tensor a = from_values({2}, {1.0, 2.0});
  Tensor b = from_values({2}, {1.0, 3.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  Tensor mn = minimum(&tape, a, b);
  Tensor loss = weighted_sum(&tape, mn, {1.0, 1.0});
  auto grads = gradient(tape, loss, {a, b});
  CHECK(grads[0].at(0) == 0.0);  // tie -> b side
  CHECK(grads[1].at(0) == 1.0);
  CHECK(grads[0].at(1) == 1.0);  // a strictly smaller
  CHECK(grads[1].at(1) == 0.0);
}

TEST_CASE("zero-width clip makes the clipped surrogate a no-op at ratio 1") {
  // new log-probs equal old ones => ratio == 1 everywhere; with clip width 0
  // the min must select the constant clipped branch, giving zero gradient.
  Tensor new_lp = from_values({3}, {-0.5, -1.0, -0.2});
  new_lp.set_requires_grad(true);
  const std::vector<double> old_lp = {-0.5, -1.0, -0.2};
  const std::vector<double> adv = {0.7, -1.3, 0.4};
  Tape tape;
  Tensor diff = add(&tape, new_lp, from_values({3}, {0.5, 1.0, 0.2}));
  Tensor ratio = exp_t(&tape, diff);
  Tensor raw(ratio.shape);
  raw = mul(&tape, ratio, from_values({3}, adv));
  Tensor clipped = mul(&tape, clamp_const(&tape, ratio, 1.0, 1.0), from_values({3}, adv));
  Tensor surr = minimum(&tape, raw, clipped);
  Tensor loss = weighted_sum(&tape, surr, {-1.0 / 3, -1.0 / 3, -1.0 / 3});
  auto grads = gradient(tape, loss, {new_lp});
  for (int i = 0; i < 3; ++i) CHECK(grads[0].at(i) == 0.0);
  (void)old_lp;
}

TEST_CASE("finite differences on the clipped-surrogate op family") {
  rng r(555);
  double worst = 0.0;
  for (int rep = 0; rep < 25; ++rep) {
    // keep every element away from the min/clamp kinks by more than the FD step
    Tensor lp, old_t;
    std::vector<double> adv = {0.9, -1.4, 0.6, -0.3};
    for (;;) {
      lp = param(r, {4}, 0.6);
      old_t = randn(r, {4}, 0.6);
      bool ok = true;
      for (int i = 0; i < 4; ++i) {
        const double ratio = std::exp(lp.at(i) - old_t.at(i));
        if (std::fabs(ratio - 0.8) < 8e-3 || std::fabs(ratio - 1.2) < 8e-3 ||
            std::fabs(ratio - 1.0) < 8e-3)
          ok = false;
      }
      if (ok) break;
    }
    Tensor neg_old = scale(nullptr, old_t, -1.0);
    auto build = [&](Tape* t) {
      Tensor ratio = exp_t(t, add(t, lp, neg_old));
      Tensor raw = mul(t, ratio, from_values({4}, adv));
      Tensor clipped = mul(t, clamp_const(t, ratio, 0.8, 1.2), from_values({4}, adv));
      Tensor surr = minimum(t, raw, clipped);
      return weighted_sum(t, surr, {-0.25, -0.25, -0.25, -0.25});
    };
    worst = std::max(worst, max_rel_error(build, {lp}));
  }
  // log_prob_rows through a projection
  for (int rep = 0; rep < 25; ++rep) {
    Tensor x = randn(r, {3, 4}, 1.0);
    Tensor w = param(r, {4, 5});
    std::vector<int> targets = {(int)r.randint(0, 4), (int)r.randint(0, 4),
                                (int)r.randint(0, 4)};
    auto build = [&](Tape* t) {
      Tensor lp = log_prob_rows(t, matmul(t, x, w), targets);
      return weighted_sum(t, lp, {0.5, -1.0, 0.25});
    };
    worst = std::max(worst, max_rel_error(build, {w}));
  }
  CHECK(worst < 1e-4);
  MESSAGE("surrogate fd: max rel err ", worst);
}

TEST_CASE("row-broadcast and row-scaled addition: hand values and gradients") {
  Tensor a = from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor d = from_values({1, 3}, {10, 20, 30});
  Tensor r = add_row_broadcast(nullptr, a, d, {0.0, 0.5});
  CHECK(r.at(0, 0) == 1.0);
  CHECK(r.at(1, 0) == 9.0);
  CHECK(r.at(1, 2) == 21.0);
  CHECK_THROWS_AS(add_row_broadcast(nullptr, a, d, {1.0}), validation_error);
  CHECK_THROWS_AS(add_row_broadcast(nullptr, a, a, {1.0, 1.0}), validation_error);

  Tensor b = from_values({2, 3}, {1, 1, 1, 2, 2, 2});
  Tensor s = add_scaled_rows(nullptr, a, b, {2.0, -1.0});
  CHECK(s.at(0, 0) == 3.0);
  CHECK(s.at(1, 0) == 2.0);
  CHECK(s.at(1, 2) == 4.0);
  CHECK_THROWS_AS(add_scaled_rows(nullptr, a, d, {1.0, 1.0}), validation_error);

  rng rr(99);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = param(rr, {3, 4});
    Tensor delta = param(rr, {1, 4});
    Tensor y = param(rr, {3, 4});
    const std::vector<double> w = {0.7, 0.0, -1.3};
    auto build = [&](Tape* t) {
      Tensor u = add_row_broadcast(t, x, delta, w);
      Tensor v = add_scaled_rows(t, u, y, {0.4, 1.1, 0.0});
      return l2_norm(t, v);
    };
    worst = std::max(worst, max_rel_error(build, {x, delta, y}));
  }
  CHECK(worst < 1e-4);
}
