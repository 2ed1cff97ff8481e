#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ibd/detect.hpp"
#include "ibd/error.hpp"

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

Dataset small_clean() {
  SyntheticSpec s;
  s.classes = 4;
  s.shape = {8, 8, 3};
  s.train_per_class = 4;
  s.val_per_class = 6;
  s.seed = 3;
  return gen_synthetic(s).val;
}

ReverseConfig quick() {
  ReverseConfig c;
  c.epochs = 8;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST_CASE("mad_anomaly: hand-computed values") {
  // median 1, deviations {0, .1, .1, 0, 9}, MAD .1
  const std::vector<double> v{1, 1.1, 0.9, 1, 10};
  const auto a = mad_anomaly(v);
  const double s = 1.4826 * 0.1;
  CHECK(a[0] == 0.0);
  CHECK(a[1] == doctest::Approx(0.1 / s).epsilon(1e-12));
  CHECK(a[2] == doctest::Approx(0.1 / s).epsilon(1e-12));
  CHECK(a[4] == doctest::Approx(9.0 / s).epsilon(1e-12));
  CHECK(a[4] == doctest::Approx(60.7).epsilon(1e-3));

  // even count: median of {2,4,6,20} is 5, deviations {3,1,1,15}, MAD 2
  const auto b = mad_anomaly(std::vector<double>{2, 4, 6, 20});
  CHECK(b[0] == doctest::Approx(3.0 / (1.4826 * 2)).epsilon(1e-12));
  CHECK(b[3] == doctest::Approx(15.0 / (1.4826 * 2)).epsilon(1e-12));

  for (double x : mad_anomaly(std::vector<double>{3, 3, 3, 3})) CHECK(x == 0.0);
  for (double x : mad_anomaly(std::vector<double>{1, 1, 1, 1, 10})) CHECK(x == 0.0);
  CHECK_THROWS_AS(mad_anomaly(std::vector<double>{1, 2}), Error);
}

TEST_CASE("mad_anomaly: permutation and scale invariance") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> U(1.0, 50.0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> v(10);
    for (auto& x : v) x = U(rng);
    const auto a = mad_anomaly(v);
    std::vector<std::size_t> perm(10);
    for (std::size_t i = 0; i < 10; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pv(10), sv(10);
    for (std::size_t i = 0; i < 10; ++i) {
      pv[i] = v[perm[i]];
      sv[i] = v[i] * 4.0;  // a power of two keeps the check exact
    }
    const auto pa = mad_anomaly(pv), sa = mad_anomaly(sv);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(pa[i] == a[perm[i]]);
      CHECK(sa[i] == doctest::Approx(a[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("full-replacement trigger makes every input the pattern") {
  const ModelParams m = build_model(small_arch());
  ReversedTrigger t;
  t.shape = {8, 8, 3};
  t.mask.assign(64, 1.0);
  t.pattern = Tensor(Shape{8, 8, 3}, 0.3);
  const Dataset clean = small_clean();
  std::vector<std::size_t> idx(clean.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor out = apply_reversed(batch_tensor(clean, idx), t);
  for (double v : out.data()) CHECK(v == 0.3);
  const auto logits = forward(m, out).logits;
  std::vector<int> pred;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto row = logits.data().subspan(i * 4, 4);
    pred.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  CHECK(std::all_of(pred.begin(), pred.end(), [&](int p) { return p == pred[0]; }));

  t.mask.assign(64, 0.0);
  const Tensor same = apply_reversed(batch_tensor(clean, idx), t);
  CHECK(same == batch_tensor(clean, idx));
}

TEST_CASE("reverse_trigger: mask invariants, weights untouched, deterministic") {
  const ModelParams m = build_model(small_arch());
  const auto fp = fingerprint(m.weights);
  const Dataset clean = small_clean();
  const ReversedTrigger t = reverse_trigger(m, 1, clean, quick());
  CHECK(t.mask.size() == 64);
  double sum = 0;
  for (double v : t.mask) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    sum += v;
  }
  CHECK(std::abs(sum - t.l1) <= 1e-9);
  for (double v : t.pattern.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(t.trace.size() == 8);
  CHECK(fingerprint(m.weights) == fp);

  const ReversedTrigger u = reverse_trigger(m, 1, clean, quick());
  CHECK(u.mask == t.mask);
  CHECK(u.pattern == t.pattern);

  Dataset one_class;
  one_class.shape = clean.shape;
  one_class.classes = 4;
  for (std::size_t i : clean.indices_of_label(0)) one_class.push(clean.image(i), clean.records[i]);
  CHECK_THROWS_AS(reverse_trigger(m, 1, one_class, quick()), Error);
  CHECK_THROWS_AS(reverse_trigger(m, 4, clean, quick()), Error);
}

TEST_CASE("dynamic lambda: doubles after a feasible streak, halves on a miss") {
  const ModelParams m = build_model(small_arch());
  ReverseConfig c = quick();
  c.epochs = 30;
  const ReversedTrigger t = reverse_trigger(m, 2, small_clean(), c);
  std::size_t streak = 0;
  for (std::size_t i = 1; i < t.trace.size(); ++i) {
    const auto& prev = t.trace[i - 1];
    if (prev.success >= c.target_rate) {
      ++streak;
      if (streak == c.patience) {
        CHECK(t.trace[i].lambda == prev.lambda * 2);
        streak = 0;
      } else {
        CHECK(t.trace[i].lambda == prev.lambda);
      }
    } else {
      streak = 0;
      CHECK(t.trace[i].lambda == prev.lambda / 2);
    }
  }
}

TEST_CASE("detection samples are stratified and seeded") {
  const Dataset clean = small_clean();
  const Dataset s = detection_samples(clean, 8, 4);
  CHECK(s.size() == 8);
  for (int k = 0; k < 4; ++k) CHECK(s.indices_of_label(k).size() == 2);
  CHECK(detection_samples(clean, 8, 4) == s);
  CHECK(detection_samples(clean, 100, 4).size() == clean.size());
}

TEST_CASE("detect_backdoor: report is consistent and reproducible") {
  const ModelParams m = build_model(small_arch());
  DetectConfig c;
  c.reverse = quick();
  c.samples = 16;
  const DetectionReport r = detect_backdoor(m, {0, 1, 2, 3}, small_clean(), c);
  CHECK(r.l1.size() == 4);
  CHECK(r.anomaly == mad_anomaly(r.l1));
  for (int f : r.flagged) CHECK((f >= 0 && f < 4));
  CHECK(r.text() == detect_backdoor(m, {0, 1, 2, 3}, small_clean(), c).text());
  CHECK(r.text().find("# label l1 anomaly_index feasible") != std::string::npos);

  DetectionReport fake;
  fake.labels = {0, 1, 2, 3, 4};
  fake.l1 = {10, 11, 9, 10, 1};
  fake.anomaly = mad_anomaly(fake.l1);
  CHECK(fake.max_small_side_anomaly() == fake.anomaly[4]);
}

TEST_CASE("reversed trigger format round-trips") {
  const ModelParams m = build_model(small_arch());
  const ReversedTrigger t = reverse_trigger(m, 0, small_clean(), quick());
  const auto bytes = encode_reversed(t);
  const ReversedTrigger u = decode_reversed(bytes);
  CHECK(encode_reversed(u) == bytes);
  CHECK(u.mask == t.mask);
  CHECK(u.feasible == t.feasible);
  CHECK(u.trace.size() == t.trace.size());
  CHECK_THROWS_AS(decode_reversed(std::span(bytes).first(40)), Error);
}
