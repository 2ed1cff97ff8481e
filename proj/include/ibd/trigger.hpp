#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/model.hpp"

namespace ibd {

enum class NormKind : std::uint8_t { L2 = 0, L0 = 1, Linf = 2 };

const char* norm_name(NormKind kind);
NormKind parse_norm(const std::string& s);

// Penultimate-layer neurons to amplify for target label `target`.
struct AnchorSpec {
  int target = 0;
  std::vector<std::size_t> positions;
  double scale = 10.0;           // c
  std::vector<double> initial;   // A(alpha0)[I], filled in by the generators
};

// Top `count` entries of W[:, target], descending; ties go to the lower index.
AnchorSpec find_anchor(const ModelParams& model, int target, std::size_t count = 1);

struct OptSchedule {
  double lambda = 1.0;           // regularizer weight
  double theta_amplify = 1.0;    // activation weight while amplifying
  double theta_shrink = 0.001;   // activation weight once the norm is being reduced
  std::size_t switch_iters = 2000;
  double lr = 0.1;
  double lr_decay = 0.95;
  std::size_t decay_every = 100;
  std::size_t max_iters = 20000;  // cap on the shrinking phase
  double stop = 5.0;              // L2 norm threshold, or L-inf stop value
  double rho_init = 1.0;
  double rho_decay = 0.9;
  double rho_floor = 0.01;
  double theta_linf = 0.1;          // activation weight while the L-inf threshold shrinks
  std::size_t linf_patience = 2000; // iterations at one threshold before lambda doubles
  std::size_t inner_iters = 50;   // T0 of the saliency-map search
  double init_std = 0.1;          // std-dev of the Gaussian starting noise
  std::uint64_t seed = 1;

  void validate() const;
};

struct GenerationLog {
  std::size_t amplify_iters = 0;
  std::size_t shrink_iters = 0;
  std::size_t redraws = 0;              // starting-noise draws rejected for a dead anchor
  double initial_activation = 0.0;      // mean over anchors, at alpha0
  double target_activation = 0.0;
  double peak_activation = 0.0;
  double final_activation = 0.0;        // on the returned trigger
  std::vector<double> rho_history;      // L-inf only
  std::vector<std::size_t> fixed_order; // L0 only, pixel indices in the order they were fixed
};

// Real-valued perturbation on the [0,1] image scale, added to images as clip(x + alpha, 0, 1).
struct AdditiveTrigger {
  ImageShape shape;
  NormKind kind = NormKind::L2;
  Tensor alpha;                      // [H, W, C]
  std::vector<std::uint8_t> mask;    // H*W entries of 0/1; empty when unmasked
  double norm = 0.0;                 // achieved norm of alpha under `kind`
  int target = 0;
  std::vector<std::size_t> anchor;
  GenerationLog log;
  std::string config_hash;

  std::size_t mask_popcount() const;
};

double trigger_norm(const Tensor& alpha, NormKind kind, std::size_t channels);

// (tanh(w) + 1) / 2 and its inverse.
Tensor box_constrain(const Tensor& w);
Tensor box_unconstrain(const Tensor& x);

AdditiveTrigger gen_trigger_l2(const ModelParams& model, AnchorSpec anchor, const OptSchedule& schedule);
AdditiveTrigger gen_trigger_l0(const ModelParams& model, AnchorSpec anchor, const OptSchedule& schedule,
                               std::size_t keep);
AdditiveTrigger gen_trigger_linf(const ModelParams& model, AnchorSpec anchor, const OptSchedule& schedule);

// True when some starting-noise draw under `sc` activates every anchor position.
bool anchor_fires(const ModelParams& model, const AnchorSpec& anchor, const OptSchedule& sc);

struct TriggerRequest {
  int target = 0;
  NormKind kind = NormKind::L2;
  std::size_t anchors = 1;
  double scale = 10.0;
  std::size_t keep = 16;  // L0 only
};
// Generates with the top-ranked anchors that fire on the starting noise. A unit that
// never fires has no gradient to amplify, so the next one down the W[:, target] ranking is used.
AdditiveTrigger generate_trigger(const ModelParams& model, const TriggerRequest& req, const OptSchedule& sc);

// Flat binary: magic "IBDTRIG1", u32 version, shape, kind, target, anchors, norm,
// mask bitmap, float64 perturbation, generation log.
std::vector<std::uint8_t> encode_trigger(const AdditiveTrigger& t);
AdditiveTrigger decode_trigger(std::span<const std::uint8_t> bytes);
void save_trigger(const std::filesystem::path& path, const AdditiveTrigger& t);
AdditiveTrigger load_trigger(const std::filesystem::path& path);
// Fails unless the trigger was generated for images of `shape`.
void check_trigger_shape(const AdditiveTrigger& t, const ImageShape& shape);

std::string generation_log_text(const AdditiveTrigger& t);

}  // namespace ibd
