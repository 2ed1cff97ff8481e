#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/model.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

// Fraction of the (triggered) set classified as `target`.
double attack_success_rate(const ModelParams& model, const Dataset& poisoned_val, int target);
// Top-1 accuracy on the clean validation set.
double functionality(const ModelParams& model, const Dataset& clean_val);

struct SsimConfig {
  std::size_t block = 8;       // images are split into block x block tiles
  double alpha = 1.0, beta = 1.0, gamma = 1.0;
  double k1 = 0.01, k2 = 0.03;
  double range = 255.0;        // L: 255 for bytes, 1 for the real scale
  double sigma = 1.5;          // Gaussian weighting window, truncated to the tile
  std::size_t window = 11;
  bool luminance = true;       // average channels first; otherwise average per-channel scores

  void validate() const;
  double c1() const { return (k1 * range) * (k1 * range); }
  double c2() const { return (k2 * range) * (k2 * range); }
  double c3() const { return c2() / 2.0; }
};

// Mean over tiles of L^alpha * C^beta * S^gamma. Images are HWC in the scale of cfg.range.
double ssim(std::span<const double> x, std::span<const double> y, const ImageShape& shape,
            const SsimConfig& cfg = {});
double ssim(std::span<const std::uint8_t> x, std::span<const std::uint8_t> y, const ImageShape& shape,
            const SsimConfig& cfg = {});

// PASS with identity alignment.
double pass_score(std::span<const std::uint8_t> x, std::span<const std::uint8_t> y, const ImageShape& shape,
                  const SsimConfig& cfg = {});

// Mean PASS between corresponding images of two equally sized sets.
double average_pass(const Dataset& a, const Dataset& b, const SsimConfig& cfg = {});

struct ActivationReport {
  double clean = 0.0;
  double triggered = 0.0;
};

// Mean penultimate activation at `position` over the set, without and with the trigger.
ActivationReport activation_report(const ModelParams& model, const Dataset& images, std::size_t position,
                                   const AdditiveTrigger& trigger);

struct GridCell {
  int source = 0;
  int target = 0;
  double functionality = 0.0;
  double asr = 0.0;
  std::string error;  // nonempty when the cell failed
};

struct MetricReport {
  double asr = 0.0;
  double functionality = 0.0;
  double baseline = 0.0;
  std::optional<double> avg_pass;
  std::optional<std::size_t> epochs_to_converge;
  std::vector<GridCell> grid;

  void validate() const;
  std::string text() const;       // key=value lines
  std::string grid_csv() const;   // source,target,functionality,asr,status
};

// Every ordered (source, target) pair with source != target.
std::vector<std::pair<int, int>> all_pairs(std::size_t classes);

// Runs `attack` per pair. A cell that throws is recorded with its message and the sweep continues.
using PairAttack = std::function<GridCell(int source, int target)>;
std::vector<GridCell> sweep_pairs(const PairAttack& attack, const std::vector<std::pair<int, int>>& pairs);

// Formats doubles with enough digits to round-trip.
std::string fmt(double v);

}  // namespace ibd
