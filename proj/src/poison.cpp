#include "ibd/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ibd/error.hpp"

namespace ibd {

Tensor apply_additive_trigger(const Tensor& image, const AdditiveTrigger& trigger) {
  const std::size_t n = trigger.alpha.size();
  require(n > 0 && image.size() % n == 0 &&
              (image.shape() == trigger.alpha.shape() ||
               (image.rank() == 4 && Shape(image.shape().begin() + 1, image.shape().end()) == trigger.alpha.shape())),
          ErrorKind::Shape,
          "trigger shape " + shape_str(trigger.alpha.shape()) + " does not match image " + shape_str(image.shape()));
  const std::size_t C = trigger.shape.channels;
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t k = i % n;
    if (!trigger.mask.empty() && !trigger.mask[k / C]) continue;
    out[i] = std::clamp(out[i] + trigger.alpha[k], 0.0, 1.0);
  }
  return out;
}

std::vector<std::uint8_t> apply_trigger(std::span<const std::uint8_t> image, const ImageShape& shape,
                                        const Trigger& trigger) {
  if (const auto* st = std::get_if<StegoTrigger>(&trigger)) return lsb_embed(image, st->payload, st->cfg);
  const auto& add = std::get<AdditiveTrigger>(trigger);
  check_trigger_shape(add, shape);
  return tensor_to_image(apply_additive_trigger(image_to_tensor(image, shape), add));
}

const char* mode_name(PoisonMode mode) {
  switch (mode) {
    case PoisonMode::SingleTarget: return "single-target";
    case PoisonMode::Universal: return "universal";
    case PoisonMode::InjectionAll: return "injection-all";
  }
  return "?";
}

PoisonMode parse_mode(const std::string& s) {
  if (s == "single-target") return PoisonMode::SingleTarget;
  if (s == "universal") return PoisonMode::Universal;
  if (s == "injection-all") return PoisonMode::InjectionAll;
  fail(ErrorKind::Config, "unknown poison mode '" + s + "' (expected single-target, universal or injection-all)");
}

void PoisonSpec::validate(std::size_t classes) const {
  require(rate > 0.0 && rate <= 1.0, ErrorKind::Config,
          "pollution rate must be in (0, 1], got " + std::to_string(rate));
  require(target >= 0 && static_cast<std::size_t>(target) < classes, ErrorKind::Config,
          "target label " + std::to_string(target) + " outside 0.." + std::to_string(classes - 1));
  if (mode == PoisonMode::SingleTarget) {
    require(source >= 0 && static_cast<std::size_t>(source) < classes, ErrorKind::Config,
            "source label " + std::to_string(source) + " outside 0.." + std::to_string(classes - 1));
    require(source != target, ErrorKind::Config, "source class must differ from the target class");
  }
}

namespace {

std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(n);
  return pool;
}

void append_poisoned(Dataset& out, const Dataset& from, std::size_t i, const Trigger& trigger, int target) {
  const auto img = apply_trigger(from.image(i), from.shape, trigger);
  out.push(img, {from.records[i].original_label, target, Provenance::Poisoned});
}

Dataset empty_like(const Dataset& ds, const std::string& name) {
  Dataset out;
  out.name = name;
  out.shape = ds.shape;
  out.classes = ds.classes;
  out.seed = ds.seed;
  out.config_hash = ds.config_hash;
  return out;
}

}  // namespace

PoisonedDataset poison_single_target(const SplitDataset& data, const Trigger& trigger, const PoisonSpec& spec) {
  require(spec.mode == PoisonMode::SingleTarget, ErrorKind::Config, "poison_single_target needs single-target mode");
  spec.validate(data.train.classes);
  const auto pool = data.train.indices_of_label(spec.source);
  const double want = spec.rate * static_cast<double>(pool.size());
  require(want >= 1.0, ErrorKind::Config,
          "pollution rate " + std::to_string(spec.rate) + " of " + std::to_string(pool.size()) +
              " source images selects no image");
  const auto n = static_cast<std::size_t>(std::ceil(want - 1e-9));

  PoisonedDataset out;
  out.train = data.train;
  out.train.name = data.train.name + "+poison";
  for (std::size_t i : draw(pool, n, spec.seed)) append_poisoned(out.train, data.train, i, trigger, spec.target);
  out.poisoned = n;
  out.val = empty_like(data.val, data.val.name + "+poison");
  for (std::size_t i : data.val.indices_of_label(spec.source)) append_poisoned(out.val, data.val, i, trigger, spec.target);
  require(out.val.size() > 0, ErrorKind::Config, "validation set has no source-class images");
  return out;
}

PoisonedDataset poison_single_target(const SplitDataset& data, const BytePayload& payload, const StegoConfig& cfg,
                                     const PoisonSpec& spec) {
  return poison_single_target(data, Trigger{StegoTrigger{payload, cfg}}, spec);
}

PoisonedDataset poison_universal(const SplitDataset& data, const Trigger& trigger, const PoisonSpec& spec) {
  require(spec.mode == PoisonMode::Universal, ErrorKind::Config, "poison_universal needs universal mode");
  spec.validate(data.train.classes);
  const std::size_t N = data.train.size();
  const auto n = static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(N)));
  require(n >= 1, ErrorKind::Config, "pollution rate " + std::to_string(spec.rate) + " selects no image");
  std::vector<std::size_t> pool(N);
  std::iota(pool.begin(), pool.end(), 0);

  PoisonedDataset out;
  out.train = data.train;
  out.train.name = data.train.name + "+poison";
  for (std::size_t i : draw(pool, n, spec.seed)) append_poisoned(out.train, data.train, i, trigger, spec.target);
  out.poisoned = n;
  out.val = empty_like(data.val, data.val.name + "+poison");
  for (std::size_t i = 0; i < data.val.size(); ++i) append_poisoned(out.val, data.val, i, trigger, spec.target);
  return out;
}

PoisonedDataset poison_injection_all(const SplitDataset& data, const std::vector<Trigger>& triggers, double rate,
                                     std::uint64_t seed) {
  const std::size_t L = data.train.classes, N = data.train.size();
  require(triggers.size() == L, ErrorKind::Config,
          "injection-all needs one trigger per class: " + std::to_string(L) + " classes, " +
              std::to_string(triggers.size()) + " triggers");
  require(rate > 0.0 && rate <= 1.0, ErrorKind::Config, "pollution rate must be in (0, 1]");
  const auto n = static_cast<std::size_t>(std::llround(rate * static_cast<double>(N)));
  require(n >= 1, ErrorKind::Config, "per-class pollution rate selects no image");
  require(n * L <= N, ErrorKind::Config,
          "per-class rate " + std::to_string(rate) + " over " + std::to_string(L) + " classes exceeds the training set");
  std::vector<std::size_t> pool(N);
  std::iota(pool.begin(), pool.end(), 0);
  const auto order = draw(pool, n * L, seed);

  PoisonedDataset out;
  out.train = data.train;
  out.train.name = data.train.name + "+poison";
  out.val = empty_like(data.val, data.val.name + "+poison");
  for (std::size_t k = 0; k < L; ++k) {
    for (std::size_t j = 0; j < n; ++j)
      append_poisoned(out.train, data.train, order[k * n + j], triggers[k], static_cast<int>(k));
    for (std::size_t i = 0; i < data.val.size(); ++i)
      append_poisoned(out.val, data.val, i, triggers[k], static_cast<int>(k));
  }
  out.poisoned = n * L;
  return out;
}

}  // namespace ibd
