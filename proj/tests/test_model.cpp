#include <doctest.h>

#include <random>

#include "ibd/error.hpp"
#include "ibd/model.hpp"
#include "support.hpp"

using namespace ibd;
using ibd::test::random_tensor;

TEST_CASE("build_model: deterministic, shaped by arch") {
  ArchConfig arch;
  arch.seed = 42;
  const ModelParams a = build_model(arch), b = build_model(arch);
  CHECK(a.weights == b.weights);
  CHECK(a.output_weights().shape() == Shape{64, 10});
  CHECK(a.output_bias().shape() == Shape{10});

  ArchConfig bad = arch;
  bad.hidden = 4;
  CHECK_THROWS_AS(build_model(bad), Error);
  bad = arch;
  bad.input = {15, 16, 3};
  CHECK_THROWS_AS(build_model(bad), Error);
}

TEST_CASE("forward: logits decompose over penultimate activations") {
  std::mt19937_64 rng(4);
  const ModelParams m = build_model(ArchConfig{});
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor x = random_tensor({4, 16, 16, 3}, rng, -1.0, 2.0);
    const auto fr = forward(m, x);
    const Tensor& W = m.output_weights();
    const Tensor& b = m.output_bias();
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 64; ++j) CHECK(fr.penultimate[i * 64 + j] >= 0.0);
      for (std::size_t t = 0; t < 10; ++t) {
        double s = b[t];
        for (std::size_t j = 0; j < 64; ++j) s += fr.penultimate[i * 64 + j] * W[j * 10 + t];
        CHECK(std::abs(s - fr.logits[i * 10 + t]) < 1e-10);
        CHECK(std::isfinite(fr.logits[i * 10 + t]));
      }
    }
  }
}

TEST_CASE("forward: batch independence and shape errors") {
  std::mt19937_64 rng(6);
  const ModelParams m = build_model(ArchConfig{});
  const Tensor x = random_tensor({2, 16, 16, 3}, rng, 0.0, 1.0);
  const auto both = forward(m, x);
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor one(Shape{1, 16, 16, 3});
    std::copy(x.ptr() + i * 768, x.ptr() + (i + 1) * 768, one.ptr());
    const auto single = forward(m, one);
    for (std::size_t t = 0; t < 10; ++t) CHECK(single.logits[t] == both.logits[i * 10 + t]);
  }
  CHECK_THROWS_AS(forward(m, Tensor(Shape{1, 8, 8, 3})), Error);
}

TEST_CASE("training: loss decreases, errors, determinism") {
  SyntheticSpec spec;
  spec.train_per_class = 1;
  spec.val_per_class = 1;
  auto data = gen_synthetic(spec);
  const ModelParams m0 = build_model(ArchConfig{});

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  const double before = dataset_loss(m0, data.train);
  const auto r1 = pretrain(m0, data.train, data.val, cfg);
  CHECK(dataset_loss(r1.model, data.train) < before);
  CHECK(r1.model.provenance.epochs == 1);

  const auto r2 = pretrain(m0, data.train, data.val, cfg);
  CHECK(r1.model.weights == r2.model.weights);

  Dataset empty = data.train;
  empty.pixels.clear();
  empty.records.clear();
  CHECK_THROWS_AS(pretrain(m0, empty, data.val, cfg), Error);

  TrainConfig zero = cfg;
  zero.epochs = 0;
  CHECK_THROWS_AS(pretrain(m0, data.train, data.val, zero), Error);
}

TEST_CASE("model serialization round-trips bit-exactly") {
  ModelParams m = build_model(ibd::test::tiny_arch(9));
  m.provenance = {"toy", 3, 0.75};
  m.config_hash = "abc123";
  const auto bytes = encode_model(m);
  const ModelParams back = decode_model(bytes);
  CHECK(back.weights == m.weights);
  CHECK(back.arch == m.arch);
  CHECK(back.provenance.accuracy == 0.75);
  CHECK(encode_model(back) == bytes);

  auto corrupt = bytes;
  corrupt[8] = 9;  // version field
  try {
    decode_model(corrupt);
    FAIL("expected version error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("file has 9") != std::string::npos);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_model(truncated), Error);
}
