#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/graph.hpp"
#include "ibd/optim.hpp"
#include "ibd/tensor.hpp"

namespace ibd {

struct ConvBlock {
  std::size_t filters = 8;
  std::size_t kernel = 3;
  bool operator==(const ConvBlock&) const = default;
};

// conv(same) -> relu -> 2x2 max-pool per block, then dense(hidden) -> relu (the
// penultimate layer) -> dense(classes).
struct ArchConfig {
  ImageShape input{16, 16, 3};
  std::vector<ConvBlock> conv{{8, 3}, {16, 3}};
  std::size_t hidden = 64;
  std::size_t classes = 10;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

struct TrainProvenance {
  std::string dataset;
  std::size_t epochs = 0;
  double accuracy = 0.0;
};

struct ModelParams {
  ArchConfig arch;
  ParamSet weights;
  TrainProvenance provenance;
  std::string config_hash;

  // Final dense layer: W is [hidden, classes], b is [classes].
  const Tensor& output_weights() const { return weights.at("fc_out.w"); }
  const Tensor& output_bias() const { return weights.at("fc_out.b"); }
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::uint64_t seed = 1;
  bool shuffle = true;

  void validate() const;
};

// He-uniform weights, zero biases, deterministic in arch.seed.
ModelParams build_model(const ArchConfig& arch);

struct NetNodes {
  NodeId penultimate;
  NodeId logits;
};

// Appends the victim network to `g`, reading `input` ([B,H,W,C]) and one leaf per
// parameter (named as in ModelParams::weights).
NetNodes append_network(Graph& g, const ArchConfig& arch, NodeId input);

struct ForwardResult {
  Tensor logits;       // [B, classes]
  Tensor penultimate;  // [B, hidden], non-negative
};

ForwardResult forward(const ModelParams& model, const Tensor& batch);
std::vector<int> predict(const ModelParams& model, const Dataset& ds);
double accuracy(const ModelParams& model, const Dataset& ds);
double dataset_loss(const ModelParams& model, const Dataset& ds);

struct TrainResult {
  ModelParams model;
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

// Called after each epoch with the 1-based epoch index; returning false stops training.
using EpochHook = std::function<bool(std::size_t epoch, const ModelParams&)>;

// Trains from the given weights (incremental). pretrain and retrain differ only in
// intent and provenance bookkeeping.
TrainResult train(ModelParams model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const EpochHook& hook = {});
TrainResult pretrain(ModelParams model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                     const EpochHook& hook = {});
TrainResult retrain(ModelParams model, const Dataset& mixed_set, const Dataset& val_set, const TrainConfig& cfg,
                    const EpochHook& hook = {});

// Native format: magic "IBDMODL1", u32 version, JSON arch/provenance block, then
// each parameter (name, rank, dims, little-endian float64 values) in declaration order.
std::vector<std::uint8_t> encode_model(const ModelParams& model);
ModelParams decode_model(std::span<const std::uint8_t> bytes);
void save_model(const std::filesystem::path& path, const ModelParams& model);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace ibd
