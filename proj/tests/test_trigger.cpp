#include <doctest.h>

#include <cmath>
#include <random>

#include "ibd/error.hpp"
#include "ibd/trigger.hpp"

using namespace ibd;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.input = {8, 8, 3};
  a.conv = {{4, 3}, {8, 3}};
  a.hidden = 16;
  a.classes = 4;
  a.seed = 5;
  return a;
}

OptSchedule fast_schedule() {
  OptSchedule s;
  s.switch_iters = 300;
  s.init_std = 0.5;  // an untrained net needs a larger start for its anchors to fire
  s.max_iters = 5000;
  s.inner_iters = 10;
  return s;
}

// Penultimate unit 0 sees only the top-left 2x2 pixel block. The first conv adds 1, so
// every pooled cell is at least 1 for inputs above -1; the second conv's large negative
// left/up taps then silence every cell with a neighbour above or to the left.
ModelParams block_toy() {
  ArchConfig a;
  a.input = {4, 4, 1};
  a.conv = {{1, 1}, {1, 3}};
  a.hidden = 2;
  a.classes = 2;
  ModelParams m = build_model(a);
  for (auto& [name, t] : m.weights) t.fill(0.0);
  m.weights.at("conv0.w")[0] = 1.0;
  m.weights.at("conv0.b")[0] = 1.0;
  Tensor& k = m.weights.at("conv1.w");  // [3,3,1,1]
  k[1 * 3 + 1] = 1.0;
  k[1 * 3 + 0] = -100.0;  // left
  k[0 * 3 + 1] = -100.0;  // up
  k[0 * 3 + 0] = -100.0;  // up-left
  m.weights.at("fc_hidden.w")[0] = 1.0;
  Tensor& w = m.weights.at("fc_out.w");
  w[0 * 2 + 0] = 1.0;
  w[1 * 2 + 1] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("find_anchor: largest output weights, stable on ties") {
  ModelParams m = build_model(small_arch());
  Tensor& W = m.weights.at("fc_out.w");  // [16, 4]
  W.fill(0.0);
  W[3 * 4 + 2] = 0.5;
  W[7 * 4 + 2] = 0.9;
  W[9 * 4 + 2] = 0.5;
  CHECK(find_anchor(m, 2).positions == std::vector<std::size_t>{7});
  CHECK(find_anchor(m, 2, 3).positions == std::vector<std::size_t>{7, 3, 9});
  // all-zero column: every index ties, lowest wins
  CHECK(find_anchor(m, 0).positions == std::vector<std::size_t>{0});

  CHECK_THROWS_AS(find_anchor(m, 4), Error);
  CHECK_THROWS_AS(find_anchor(m, -1), Error);
  CHECK_THROWS_AS(find_anchor(m, 1, 0), Error);
  CHECK_THROWS_AS(find_anchor(m, 1, 17), Error);
}

TEST_CASE("find_anchor: invariant to positive scaling and to other columns") {
  ModelParams m = build_model(small_arch());
  const auto before = find_anchor(m, 1, 4).positions;
  Tensor& W = m.weights.at("fc_out.w");
  for (std::size_t j = 0; j < 16; ++j) {
    W[j * 4 + 1] *= 3.5;
    W[j * 4 + 0] = -W[j * 4 + 0];
  }
  CHECK(find_anchor(m, 1, 4).positions == before);
}

TEST_CASE("box constraint maps the reals onto (0,1) and inverts") {
  Tensor w(Shape{5});
  const double vals[] = {0.0, 1.0, -1.0, 5.0, -30.0};
  for (int i = 0; i < 5; ++i) w[i] = vals[i];
  const Tensor x = box_constrain(w);
  CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(x[1] == doctest::Approx((std::tanh(1.0) + 1) / 2).epsilon(1e-15));
  for (double v : x.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  Tensor inner(Shape{4});
  for (int i = 0; i < 4; ++i) inner[i] = x[i];
  const Tensor back = box_unconstrain(inner);
  for (int i = 0; i < 4; ++i) CHECK(back[i] == doctest::Approx(vals[i]).epsilon(1e-9));

  Tensor edge(Shape{1});
  edge[0] = 1.0;
  CHECK_THROWS_AS(box_unconstrain(edge), Error);
}

TEST_CASE("trigger_norm") {
  Tensor a(Shape{2, 2, 2});
  a[1] = 0.5;   // pixel 0
  a[6] = -2.0;  // pixel 3
  CHECK(trigger_norm(a, NormKind::L0, 2) == 2.0);
  CHECK(trigger_norm(a, NormKind::Linf, 2) == 2.0);
  CHECK(trigger_norm(a, NormKind::L2, 2) == doctest::Approx(std::sqrt(4.25)).epsilon(1e-15));
  CHECK(parse_norm("linf") == NormKind::Linf);
  CHECK(std::string(norm_name(NormKind::L0)) == "l0");
  CHECK_THROWS_AS(parse_norm("l1"), Error);
}

TEST_CASE("L2 trigger: norm contract, weights untouched, deterministic") {
  const ModelParams m = build_model(small_arch());
  const auto fp = fingerprint(m.weights);
  OptSchedule s = fast_schedule();
  for (double stop : {0.5, 2.0}) {
    s.stop = stop;
    CAPTURE(stop);
    const AdditiveTrigger t = gen_trigger_l2(m, find_anchor(m, 2), s);
    CHECK(t.kind == NormKind::L2);
    CHECK(t.norm <= stop + 1e-6);
    CHECK(std::abs(t.norm - trigger_norm(t.alpha, NormKind::L2, 3)) < 1e-9);
    CHECK(t.mask.empty());
    CHECK(t.target == 2);
    CHECK(t.log.peak_activation >= 1.5 * t.log.initial_activation);
    const AdditiveTrigger again = gen_trigger_l2(m, find_anchor(m, 2), s);
    CHECK(again.alpha == t.alpha);
  }
  CHECK(fingerprint(m.weights) == fp);
}

TEST_CASE("L2 trigger: degenerate output column still terminates") {
  ModelParams m = build_model(small_arch());
  Tensor& W = m.weights.at("fc_out.w");
  for (std::size_t j = 0; j < 16; ++j) W[j * 4 + 3] = 0.0;
  OptSchedule s = fast_schedule();
  s.stop = 1.0;
  try {
    const AdditiveTrigger t = gen_trigger_l2(m, find_anchor(m, 3), s);
    CHECK(t.norm <= 1.0 + 1e-6);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("L-inf trigger: max entry below the final threshold, geometric threshold decay") {
  const ModelParams m = build_model(small_arch());
  const auto fp = fingerprint(m.weights);
  OptSchedule s = fast_schedule();
  s.stop = 0.2;
  const AdditiveTrigger t = gen_trigger_linf(m, find_anchor(m, 2), s);
  REQUIRE(t.log.rho_history.size() >= 2);
  const double rho = t.log.rho_history.back();
  CHECK(rho <= s.stop + 1e-12);
  CHECK(t.norm <= rho + 1e-9);
  CHECK(std::abs(t.norm - trigger_norm(t.alpha, NormKind::Linf, 3)) < 1e-12);
  for (std::size_t i = 1; i < t.log.rho_history.size(); ++i)
    CHECK(t.log.rho_history[i] / t.log.rho_history[i - 1] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(fingerprint(m.weights) == fp);
}

TEST_CASE("L0 trigger: exactly T modifiable pixels") {
  const ModelParams m = build_model(small_arch());
  const auto fp = fingerprint(m.weights);
  OptSchedule s = fast_schedule();
  s.inner_iters = 5;
  for (std::size_t T : {1u, 2u, 5u, 16u}) {
    CAPTURE(T);
    const AdditiveTrigger t = gen_trigger_l0(m, find_anchor(m, 0), s, T);
    CHECK(t.mask.size() == 64);
    CHECK(t.mask_popcount() == T);
    CHECK(t.log.fixed_order.size() == 64 - T);
    CHECK(t.norm <= static_cast<double>(T));
    for (std::size_t p = 0; p < 64; ++p)
      if (!t.mask[p])
        for (std::size_t c = 0; c < 3; ++c) CHECK(t.alpha[p * 3 + c] == 0.0);
  }
  CHECK(fingerprint(m.weights) == fp);
  CHECK_THROWS_AS(gen_trigger_l0(m, find_anchor(m, 0), s, 0), Error);
  CHECK_THROWS_AS(gen_trigger_l0(m, find_anchor(m, 0), s, 65), Error);
}

TEST_CASE("L0 trigger: keeps the pixel that drives the anchor") {
  const ModelParams m = block_toy();
  OptSchedule s = fast_schedule();
  s.inner_iters = 20;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    CAPTURE(seed);
    s.seed = seed;
    const AdditiveTrigger t = gen_trigger_l0(m, find_anchor(m, 0), s, 1);
    REQUIRE(t.mask_popcount() == 1);
    std::size_t kept = 0;
    while (!t.mask[kept]) ++kept;
    // row-major pixels 0, 1, 4, 5 form the only block the anchor can see
    CHECK((kept == 0 || kept == 1 || kept == 4 || kept == 5));
    CHECK(t.log.final_activation > 0.0);
  }
}

TEST_CASE("trigger serialization round-trips and checks shape") {
  const ModelParams m = build_model(small_arch());
  OptSchedule s = fast_schedule();
  s.inner_iters = 3;
  AdditiveTrigger t = gen_trigger_l0(m, find_anchor(m, 2), s, 7);
  t.config_hash = "abc123";
  const auto bytes = encode_trigger(t);
  const AdditiveTrigger u = decode_trigger(bytes);
  CHECK(encode_trigger(u) == bytes);
  CHECK(u.alpha == t.alpha);
  CHECK(u.mask == t.mask);
  CHECK(u.log.fixed_order == t.log.fixed_order);
  CHECK(u.config_hash == "abc123");

  CHECK_NOTHROW(check_trigger_shape(u, ImageShape{8, 8, 3}));
  CHECK_THROWS_AS(check_trigger_shape(u, ImageShape{16, 16, 3}), Error);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_trigger(bad), Error);
  auto ver = bytes;
  ver[8] = 9;
  CHECK_THROWS_AS(decode_trigger(ver), Error);
  CHECK_THROWS_AS(decode_trigger(std::span(bytes).first(bytes.size() - 3)), Error);
}
