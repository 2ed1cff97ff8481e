#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/stego.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

struct StegoTrigger {
  BytePayload payload;
  StegoConfig cfg;
};

// Anything that can be stamped onto a byte image.
using Trigger = std::variant<StegoTrigger, AdditiveTrigger>;

// clip(image + alpha (masked), 0, 1) on the real scale. `image` is [H,W,C] or [B,H,W,C].
Tensor apply_additive_trigger(const Tensor& image, const AdditiveTrigger& trigger);
std::vector<std::uint8_t> apply_trigger(std::span<const std::uint8_t> image, const ImageShape& shape,
                                        const Trigger& trigger);

enum class PoisonMode : std::uint8_t { SingleTarget, Universal, InjectionAll };

const char* mode_name(PoisonMode mode);
PoisonMode parse_mode(const std::string& s);

struct PoisonSpec {
  PoisonMode mode = PoisonMode::Universal;
  int source = -1;  // single-target only
  int target = 0;
  double rate = 0.05;  // epsilon
  std::uint64_t seed = 1;

  void validate(std::size_t classes) const;
};

// `train` is the clean training set followed by the poisoned copies (D_train U D_p);
// `val` is the poisoned validation set used for attack success rate.
struct PoisonedDataset {
  Dataset train;
  Dataset val;
  std::size_t poisoned = 0;
};

// Poisons ceil(rate * |source class|) source-class images. The validation copy holds every
// source-class validation image with the trigger applied.
PoisonedDataset poison_single_target(const SplitDataset& data, const Trigger& trigger, const PoisonSpec& spec);
PoisonedDataset poison_single_target(const SplitDataset& data, const BytePayload& payload, const StegoConfig& cfg,
                                     const PoisonSpec& spec);

// Poisons round(rate * |train|) images drawn from every class; the validation copy is the
// whole validation set with the trigger applied.
PoisonedDataset poison_universal(const SplitDataset& data, const Trigger& trigger, const PoisonSpec& spec);

// One universal poisoning per class, trigger k relabelling to class k, over disjoint draws.
PoisonedDataset poison_injection_all(const SplitDataset& data, const std::vector<Trigger>& triggers, double rate,
                                     std::uint64_t seed);

}  // namespace ibd
