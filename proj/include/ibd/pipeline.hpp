#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/detect.hpp"
#include "ibd/error.hpp"
#include "ibd/metrics.hpp"
#include "ibd/model.hpp"
#include "ibd/poison.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

enum class AttackFamily : std::uint8_t { Stego, Regularized };

struct PipelineConfig {
  // [data]
  std::string source = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic;
  std::string train_images, train_labels, val_images, val_labels;

  // [model]
  ArchConfig arch;

  // [pretrain], [retrain]
  TrainConfig pretrain;
  TrainConfig retrain;
  double converge_asr = 0.9;  // epochs-to-converge threshold
  bool early_stop = true;     // stop retraining at the first converged epoch

  // [attack]
  AttackFamily family = AttackFamily::Stego;
  std::string payload = "Apple";
  std::size_t size = 500;
  unsigned k = 4;
  NormKind norm = NormKind::L2;
  std::size_t keep = 16;     // L0 pixel budget T
  std::size_t anchors = 1;
  double scale = 10.0;       // c
  OptSchedule schedule;

  // [poison]
  PoisonSpec poison;

  // [metrics]
  bool pass = true;
  bool activation = true;

  // [detect]
  bool detect = false;
  DetectConfig detection;

  // [sweep]
  std::vector<std::size_t> sweep_sizes;
  bool sweep_pairs = false;

  std::uint64_t seed = 1;
  std::filesystem::path out = "out";

  // Keys set explicitly in the parsed file, "section.key".
  std::vector<std::string> explicit_keys;

  void validate() const;
  // Every effective setting as sorted "section.key=value" lines.
  std::string canonical() const;
  // Hash of the settings a stage's output depends on.
  std::string stage_hash(const std::string& stage) const;
};

PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
// Applies "section.key=value" overrides after loading.
void apply_override(PipelineConfig& cfg, const std::string& assignment);

struct StageOptions {
  bool force = false;  // accept upstream artifacts from a different configuration
  bool verbose = true;
};

// Artifacts, relative to cfg.out.
namespace artifact {
inline constexpr const char* kTrain = "train.bin";
inline constexpr const char* kVal = "val.bin";
inline constexpr const char* kCleanModel = "model_clean.bin";
inline constexpr const char* kPayload = "payload.bin";
inline constexpr const char* kPoisonTrain = "poisoned_train.bin";
inline constexpr const char* kPoisonVal = "poisoned_val.bin";
inline constexpr const char* kBackdoorModel = "model_backdoor.bin";
inline constexpr const char* kRetrainLog = "retrain.txt";
inline constexpr const char* kReport = "report.txt";
inline constexpr const char* kDetection = "detection.txt";
inline constexpr const char* kSweep = "sweep.csv";
inline constexpr const char* kGrid = "grid.csv";
std::string trigger_file(std::size_t index);  // trigger_<index>.bin
}  // namespace artifact

struct RetrainTrace {
  std::vector<double> asr;
  std::vector<double> functionality;
  std::optional<std::size_t> converged;  // 1-based epoch
};

void stage_pretrain(const PipelineConfig& cfg, const StageOptions& opt = {});
void stage_trigger(const PipelineConfig& cfg, const StageOptions& opt = {});
void stage_poison(const PipelineConfig& cfg, const StageOptions& opt = {});
void stage_retrain(const PipelineConfig& cfg, const StageOptions& opt = {});
MetricReport stage_eval(const PipelineConfig& cfg, const StageOptions& opt = {});
DetectionReport stage_detect(const PipelineConfig& cfg, const StageOptions& opt = {});
void stage_sweep(const PipelineConfig& cfg, const StageOptions& opt = {});
// pretrain, gen-trigger, poison, retrain, eval and (when enabled) detect.
void stage_run(const PipelineConfig& cfg, const StageOptions& opt = {});

// Process exit code for an error kind: 2 config, 3 artifact, 4 numeric.
int exit_code(ErrorKind kind);

}  // namespace ibd
