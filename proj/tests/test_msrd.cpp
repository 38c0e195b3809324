// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mapkd/msrd.hpp"
#include "oracles.hpp"

using namespace mapkd;
using oracle::random_grid;

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Independent masked-mean BCE summation.
double msrd_naive(const Grid4& s, const Grid4& t, const Grid4& c, const Grid4& m, double g1,
                  double g2) {
  double acc1 = 0, acc2 = 0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    if (m.values()[static_cast<std::size_t>(i)] != 1.0) continue;
    ++n;
    const double sv = s.values()[static_cast<std::size_t>(i)];
    auto bce = [&](double target) {
      return std::max(sv, 0.0) - sv * target + std::log1p(std::exp(-std::abs(sv)));
    };
    acc1 += bce(sigmoid(t.values()[static_cast<std::size_t>(i)]));
    if (c.valid()) acc2 += bce(sigmoid(c.values()[static_cast<std::size_t>(i)]));
  }
  if (n == 0) return 0.0;
  return g1 * acc1 / n + g2 * acc2 / n;
}
}  // namespace

TEST_CASE("build_mask") {
  SECTION("all-zero GT gives an empty mask") {
    Grid4 gt(1, 3, 4, 4, 0.0);
    Grid4 m = build_mask(gt);
    for (double v : m.values()) REQUIRE(v == 0.0);
  }
  SECTION("all-one GT gives a full mask") {
    Grid4 gt(1, 3, 4, 4, 1.0);
    Grid4 m = build_mask(gt);
    for (double v : m.values()) REQUIRE(v == 1.0);
  }
  SECTION("checkerboard GT gives a checkerboard mask") {
    Grid4 gt(1, 3, 4, 4);
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 4; ++x) gt.at(0, c, y, x) = (y + x) % 2;
    Grid4 m = build_mask(gt);
    REQUIRE(m.values() == gt.values());
  }
  SECTION("non-binary GT rejected") {
    Grid4 gt(1, 3, 2, 2, 0.3);
    REQUIRE_THROWS_AS(build_mask(gt), ValueError);
  }
  SECTION("dilation widens the mask by the 4-neighbourhood") {
    Grid4 gt(1, 1, 5, 5);
    gt.at(0, 0, 2, 2) = 1.0;
    Grid4 m = build_mask(gt, 1);
    REQUIRE(m.at(0, 0, 2, 2) == 1.0);
    REQUIRE(m.at(0, 0, 1, 2) == 1.0);
    REQUIRE(m.at(0, 0, 2, 1) == 1.0);
    REQUIRE(m.at(0, 0, 1, 1) == 0.0);
    REQUIRE(m.at(0, 0, 0, 2) == 0.0);
  }
}

TEST_CASE("msrd_loss closed forms and contracts") {
  SECTION("single masked cell, student 0 vs teacher prob 0.5 gives ln 2") {
    Grid4 s(1, 1, 1, 1, 0.0), t(1, 1, 1, 1, 0.0), m(1, 1, 1, 1, 1.0);
    const double v = msrd_loss(s, t, Grid4{}, m, 1.0, 0.0).item();
    REQUIRE(std::abs(v - std::log(2.0)) < 1e-12);
  }
  SECTION("equal logits everywhere: loss is the weighted binary entropy, vs oracle") {
    Rng rng(5);
    Grid4 s = random_grid({2, 3, 6, 6}, rng, -2, 2);
    Grid4 m(2, 3, 6, 6, 0.0);
    for (std::int64_t i = 0; i < m.numel(); i += 3) m.data()[i] = 1.0;
    const double v = msrd_loss(s, s, s, m, 0.7, 0.3).item();
    REQUIRE(v > 0.0);
    REQUIRE(v == Catch::Approx(msrd_naive(s, s, s, m, 0.7, 0.3)).epsilon(1e-12));
    // explicit entropy identity at one masked cell count check
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < m.numel(); ++i)
      if (m.values()[static_cast<std::size_t>(i)] == 1.0) {
        const double p = sigmoid(s.values()[static_cast<std::size_t>(i)]);
        acc += -(p * std::log(p) + (1 - p) * std::log(1 - p));
        ++n;
      }
    REQUIRE(v == Catch::Approx((0.7 + 0.3) * acc / n).epsilon(1e-10));
  }
  SECTION("perturbing unmasked logits changes the loss by exactly zero") {
    Rng rng(7);
    Grid4 s = random_grid({1, 3, 8, 8}, rng, -2, 2);
    Grid4 t = random_grid({1, 3, 8, 8}, rng, -2, 2);
    Grid4 c = random_grid({1, 3, 8, 8}, rng, -2, 2);
    Grid4 m(1, 3, 8, 8, 0.0);
    for (std::int64_t i = 0; i < m.numel(); i += 5) m.data()[i] = 1.0;
    const double base = msrd_loss(s, t, c, m, 0.7, 0.3).item();
    Rng prng(8);
    for (int it = 0; it < 1000; ++it) {
      const auto i = static_cast<std::size_t>(prng.uniform_int(0, s.numel() - 1));
      if (m.values()[i] == 1.0) continue;
      Grid4 s2 = s.clone();
      s2.values()[i] += prng.uniform(-5, 5);
      REQUIRE(msrd_loss(s2, t, c, m, 0.7, 0.3).item() == base);
    }
  }
  SECTION("empty mask: exact zero with zero gradient") {
    Grid4 s(1, 3, 4, 4, 0.7), t(1, 3, 4, 4, 0.1), m(1, 3, 4, 4, 0.0);
    s.set_requires_grad(true);
    Tape tape;
    Grid4 loss = msrd_loss(s, t, Grid4{}, m, 1.0, 0.0, &tape);
    REQUIRE(loss.item() == 0.0);
    REQUIRE(tape.size() == 0);
    REQUIRE_FALSE(s.has_grad());
  }
  SECTION("gamma2 = 0 reduces exactly to teacher-only distillation") {
    Rng rng(9);
    Grid4 s = random_grid({1, 3, 4, 4}, rng, -2, 2);
    Grid4 t = random_grid({1, 3, 4, 4}, rng, -2, 2);
    Grid4 c = random_grid({1, 3, 4, 4}, rng, -2, 2);
    Grid4 m(1, 3, 4, 4, 1.0);
    const double two_stage = msrd_loss(s, t, Grid4{}, m, 0.7, 0.0).item();
    const double with_coach_ignored = msrd_loss(s, t, c, m, 0.7, 0.0).item();
    REQUIRE(two_stage == with_coach_ignored);
  }
  SECTION("gamma2 != 0 without coach rejected") {
    Grid4 s(1, 1, 2, 2), t(1, 1, 2, 2), m(1, 1, 2, 2, 1.0);
    REQUIRE_THROWS_AS(msrd_loss(s, t, Grid4{}, m, 0.7, 0.3), ValueError);
  }
}

TEST_CASE("soft-target fixpoint: loss minimised where sigmoid(s) = target") {
  Grid4 t(1, 1, 1, 1, 0.8473);  // target prob = sigmoid(0.8473)
  Grid4 m(1, 1, 1, 1, 1.0);
  const double target_logit = 0.8473;
  double best_s = -99, best_v = 1e300;
  for (double sv = -6.0; sv <= 6.0; sv += 0.002) {
    Grid4 s(1, 1, 1, 1, sv);
    const double v = msrd_loss(s, t, Grid4{}, m, 1.0, 0.0).item();
    if (v < best_v) {
      best_v = v;
      best_s = sv;
    }
  }
  REQUIRE(best_s == Catch::Approx(target_logit).margin(0.01));
}

TEST_CASE("mask-locality of gradients and grad_check") {
  Rng rng(11);
  Grid4 s = random_grid({1, 3, 4, 4}, rng, -2, 2);
  Grid4 t = random_grid({1, 3, 4, 4}, rng, -2, 2);
  Grid4 c = random_grid({1, 3, 4, 4}, rng, -2, 2);
  Grid4 m(1, 3, 4, 4, 0.0);
  for (std::int64_t i = 0; i < m.numel(); i += 2) m.data()[i] = 1.0;
  SECTION("unmasked gradient entries are identically zero") {
    s.set_requires_grad(true);
    Tape tape;
    Grid4 loss = msrd_loss(s, t, c, m, 0.7, 0.3, &tape);
    tape.backward(loss);
    REQUIRE(s.has_grad());
    for (std::int64_t i = 0; i < m.numel(); ++i)
      if (m.values()[static_cast<std::size_t>(i)] == 0.0)
        REQUIRE(s.grad_view()[static_cast<std::size_t>(i)] == 0.0);
  }
  SECTION("passes grad_check") {
    auto f = [s, t, c, m](Tape* tape) { return msrd_loss(s, t, c, m, 0.7, 0.3, tape); };
    REQUIRE(ops::grad_check(f, {s}).max_rel < 1e-4);
  }
}
