#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/model.hpp"

namespace ibd {

struct ReverseConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double init_lambda = 1e-3;
  double lambda_factor = 2.0;     // multiply after `patience` feasible checks in a row, divide on a miss
  std::size_t patience = 5;
  double target_rate = 0.95;      // fraction of blended inputs that must land on the candidate label
  std::uint64_t seed = 1;

  void validate() const;
};

struct ReverseEpoch {
  double lambda = 0.0;
  double success = 0.0;  // fraction of the epoch's blended inputs classified as the candidate
  double l1 = 0.0;
  double loss = 0.0;
};

// A candidate trigger: blended input = (1 - m) * x + m * pattern.
struct ReversedTrigger {
  ImageShape shape;
  int target = 0;
  std::vector<double> mask;  // H*W entries in [0,1]
  Tensor pattern;            // [H, W, C] in [0,1]
  double l1 = 0.0;           // sum of mask
  bool feasible = false;     // reached target_rate at least once
  std::vector<ReverseEpoch> trace;
};

// Blends a byte image (or every image of `x` [B,H,W,C] on the real scale) with the trigger.
Tensor apply_reversed(const Tensor& x, const ReversedTrigger& t);

// Minimal mask and pattern sending the clean samples to `target`. Returns the
// smallest-mask feasible epoch, or the last epoch with feasible=false.
ReversedTrigger reverse_trigger(const ModelParams& model, int target, const Dataset& samples,
                                const ReverseConfig& cfg);

// |x_i - median| / (1.4826 * median_j |x_j - median|); all zeros when that spread is zero.
std::vector<double> mad_anomaly(std::span<const double> l1);

struct DetectConfig {
  ReverseConfig reverse;
  std::size_t samples = 200;  // clean images drawn (stratified) for reverse-engineering
  double threshold = 2.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct DetectionReport {
  std::vector<int> labels;
  std::vector<double> l1;
  std::vector<double> anomaly;
  std::vector<bool> feasible;
  std::vector<int> flagged;  // anomaly > threshold on the small-norm side
  double threshold = 2.0;
  std::vector<ReversedTrigger> triggers;

  // Largest index among labels whose norm is at or below the median.
  double max_small_side_anomaly() const;
  bool is_flagged(int label) const;
  std::string text() const;
};

// Stratified, seeded subset of `clean` with `count` images (all of them when smaller).
Dataset detection_samples(const Dataset& clean, std::size_t count, std::uint64_t seed);

DetectionReport detect_backdoor(const ModelParams& model, const std::vector<int>& labels, const Dataset& clean,
                                const DetectConfig& cfg);

// Native format: magic "IBDRTRG1", u32 version, shape, target, l1, feasibility, mask, pattern, trace.
std::vector<std::uint8_t> encode_reversed(const ReversedTrigger& t);
ReversedTrigger decode_reversed(std::span<const std::uint8_t> bytes);
void save_reversed(const std::filesystem::path& path, const ReversedTrigger& t);
ReversedTrigger load_reversed(const std::filesystem::path& path);

}  // namespace ibd
