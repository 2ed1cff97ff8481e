#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ibd/tensor.hpp"

namespace ibd {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const noexcept { return height * width * channels; }
  std::size_t pixels() const noexcept { return height * width; }
  Shape tensor_shape() const { return {height, width, channels}; }
  bool operator==(const ImageShape&) const = default;
};

enum class Provenance : std::uint8_t { Clean = 0, Poisoned = 1 };

struct SampleRecord {
  int original_label = 0;
  int assigned_label = 0;
  Provenance provenance = Provenance::Clean;
  bool operator==(const SampleRecord&) const = default;
};

// Byte-valued images plus per-sample provenance. Sample i occupies bytes
// [i * shape.size(), (i + 1) * shape.size()) of `pixels`.
struct Dataset {
  std::string name;
  ImageShape shape;
  std::size_t classes = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::uint8_t> pixels;
  std::vector<SampleRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const;
  std::span<std::uint8_t> image(std::size_t i);
  int label(std::size_t i) const { return records.at(i).assigned_label; }
  void push(std::span<const std::uint8_t> image, SampleRecord record);
  std::size_t poisoned_count() const;
  std::vector<std::size_t> indices_of_label(int label) const;  // by original label
  bool operator==(const Dataset&) const = default;
};

struct SplitDataset {
  Dataset train;
  Dataset val;
};

// Real-valued [0,1] views of byte images (x / 255).
Tensor image_to_tensor(std::span<const std::uint8_t> image, const ImageShape& shape);
Tensor batch_tensor(const Dataset& ds, std::span<const std::size_t> indices);
Tensor label_tensor(const Dataset& ds, std::span<const std::size_t> indices);
// Rounds to nearest byte after clipping to [0,1].
std::vector<std::uint8_t> tensor_to_image(const Tensor& t);

struct SyntheticSpec {
  std::size_t classes = 10;
  ImageShape shape{16, 16, 3};
  std::size_t train_per_class = 600;
  std::size_t val_per_class = 100;
  double noise = 0.0;  // std-dev of per-pixel Gaussian noise, byte units
  std::uint64_t seed = 1;
};

// Flat-shaded coloured shapes on a dark background. Class k combines
// shape k % 5 with a hue band selected by k / 5, so neither cue alone identifies the class.
SplitDataset gen_synthetic(const SyntheticSpec& spec);

// MNIST-style IDX files (big-endian, magic 0x00000803 images / 0x00000801 labels).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

// Native format: 8-byte magic "IBDDATA1", u32 version, shape, records, then raw pixel bytes.
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

// Line-oriented manifest: header key=value lines then one line per sample.
std::string manifest_text(const Dataset& ds);

}  // namespace ibd
