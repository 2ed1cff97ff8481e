#include "ibd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"

namespace ibd {

std::span<const std::uint8_t> Dataset::image(std::size_t i) const {
  require(i < size(), ErrorKind::Invalid, "sample index " + std::to_string(i) + " out of range");
  return std::span(pixels).subspan(i * shape.size(), shape.size());
}

std::span<std::uint8_t> Dataset::image(std::size_t i) {
  require(i < size(), ErrorKind::Invalid, "sample index " + std::to_string(i) + " out of range");
  return std::span(pixels).subspan(i * shape.size(), shape.size());
}

void Dataset::push(std::span<const std::uint8_t> img, SampleRecord record) {
  require(img.size() == shape.size(), ErrorKind::Shape,
          "image has " + std::to_string(img.size()) + " bytes, dataset expects " + std::to_string(shape.size()));
  require(record.assigned_label >= 0 && static_cast<std::size_t>(record.assigned_label) < classes,
          ErrorKind::Invalid, "label " + std::to_string(record.assigned_label) + " outside class count");
  pixels.insert(pixels.end(), img.begin(), img.end());
  records.push_back(record);
}

std::size_t Dataset::poisoned_count() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [](const auto& r) { return r.provenance == Provenance::Poisoned; }));
}

std::vector<std::size_t> Dataset::indices_of_label(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].original_label == label) out.push_back(i);
  return out;
}

Tensor image_to_tensor(std::span<const std::uint8_t> image, const ImageShape& shape) {
  require(image.size() == shape.size(), ErrorKind::Shape, "image byte count does not match shape");
  Tensor t(shape.tensor_shape());
  for (std::size_t i = 0; i < image.size(); ++i) t[i] = image[i] / 255.0;
  return t;
}

Tensor batch_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t n = ds.shape.size();
  Tensor t(Shape{indices.size(), ds.shape.height, ds.shape.width, ds.shape.channels});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto img = ds.image(indices[b]);
    for (std::size_t i = 0; i < n; ++i) t[b * n + i] = img[i] / 255.0;
  }
  return t;
}

Tensor label_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  Tensor t(Shape{indices.size()});
  for (std::size_t b = 0; b < indices.size(); ++b) t[b] = ds.label(indices[b]);
  return t;
}

std::vector<std::uint8_t> tensor_to_image(const Tensor& t) {
  std::vector<std::uint8_t> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 255.0));
  return out;
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  Rgb out{0, 0, 0};
  switch (static_cast<int>(h)) {
    case 0: out = {c, x, 0}; break;
    case 1: out = {x, c, 0}; break;
    case 2: out = {0, c, x}; break;
    case 3: out = {0, x, c}; break;
    case 4: out = {x, 0, c}; break;
    default: out = {c, 0, x}; break;
  }
  return {out.r + m, out.g + m, out.b + m};
}

constexpr std::size_t kShapes = 5;

bool inside(std::size_t shape, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0: return std::max(std::abs(u), std::abs(v)) <= 0.8;  // square
    case 1: return r <= 0.9;                                     // disc
    case 2: return v >= -0.85 && v <= 0.85 && std::abs(u) <= 0.5 * (v + 0.85);  // triangle
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    default: return r >= 0.5 && r <= 0.95;  // ring
  }
}

void render(std::vector<std::uint8_t>& img, const ImageShape& s, int label, std::size_t groups, double noise,
            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const std::size_t shape = static_cast<std::size_t>(label) % kShapes;
  const std::size_t group = static_cast<std::size_t>(label) / kShapes;

  const Rgb bg = hsv(360.0 * U(rng), 0.4 * U(rng), 0.05 + 0.25 * U(rng));
  const double band = 360.0 / static_cast<double>(groups);
  const double hue = 30.0 + band * static_cast<double>(group) + (U(rng) - 0.5) * 0.45 * band;
  const Rgb fg = hsv(hue, 0.55 + 0.45 * U(rng), 0.6 + 0.4 * U(rng));

  const double extent = static_cast<double>(std::min(s.height, s.width));
  const double radius = extent * (0.28 + 0.14 * U(rng));
  const double cx = radius + (static_cast<double>(s.width) - 2 * radius) * U(rng);
  const double cy = radius + (static_cast<double>(s.height) - 2 * radius) * U(rng);

  std::normal_distribution<double> N(0.0, noise > 0 ? noise : 1.0);
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
      const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
      const Rgb& c = inside(shape, u, v) ? fg : bg;
      const double rgb[3] = {c.r, c.g, c.b};
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        double val = s.channels == 3 ? rgb[ch] : (c.r + c.g + c.b) / 3.0;
        val *= 255.0;
        if (noise > 0) val += N(rng);
        img[(y * s.width + x) * s.channels + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 255.0)));
      }
    }
}

}  // namespace

SplitDataset gen_synthetic(const SyntheticSpec& spec) {
  require(spec.classes >= 2, ErrorKind::Config, "synthetic dataset needs at least 2 classes");
  require(spec.shape.size() > 0, ErrorKind::Config, "synthetic image shape must be nonempty");
  require(spec.shape.channels == 1 || spec.shape.channels == 3, ErrorKind::Config, "channels must be 1 or 3");
  require(spec.train_per_class > 0 && spec.val_per_class > 0, ErrorKind::Config, "per-class counts must be positive");

  std::mt19937_64 rng(spec.seed);
  const std::size_t groups = (spec.classes + kShapes - 1) / kShapes;
  auto make = [&](const std::string& name, std::size_t per_class) {
    Dataset ds;
    ds.name = name;
    ds.shape = spec.shape;
    ds.classes = spec.classes;
    ds.seed = spec.seed;
    ds.pixels.reserve(per_class * spec.classes * spec.shape.size());
    std::vector<std::uint8_t> img(spec.shape.size());
    // interleave classes so any prefix is roughly balanced
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t k = 0; k < spec.classes; ++k) {
        render(img, spec.shape, static_cast<int>(k), groups, spec.noise, rng);
        ds.push(img, {static_cast<int>(k), static_cast<int>(k), Provenance::Clean});
      }
    return ds;
  };
  SplitDataset out;
  out.train = make("synthetic-train", spec.train_per_class);
  out.val = make("synthetic-val", spec.val_per_class);
  return out;
}

namespace {

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  require(images.size() >= 16, ErrorKind::Format,
          "IDX images: expected at least 16 header bytes, got " + std::to_string(images.size()));
  require(labels.size() >= 8, ErrorKind::Format,
          "IDX labels: expected at least 8 header bytes, got " + std::to_string(labels.size()));
  const std::uint32_t img_magic = be32(images, 0), lbl_magic = be32(labels, 0);
  require(img_magic == 0x00000803, ErrorKind::Format, "IDX images: bad magic " + std::to_string(img_magic));
  require(lbl_magic == 0x00000801, ErrorKind::Format, "IDX labels: bad magic " + std::to_string(lbl_magic));

  const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
  const std::size_t nl = be32(labels, 4);
  require(n == nl, ErrorKind::Format,
          "IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  const std::size_t want_img = 16 + n * rows * cols, want_lbl = 8 + n;
  require(images.size() == want_img, ErrorKind::Format,
          "IDX images: expected " + std::to_string(want_img) + " bytes, got " + std::to_string(images.size()));
  require(labels.size() == want_lbl, ErrorKind::Format,
          "IDX labels: expected " + std::to_string(want_lbl) + " bytes, got " + std::to_string(labels.size()));

  Dataset ds;
  ds.name = "idx";
  ds.shape = {rows, cols, 1};
  std::uint8_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) max_label = std::max(max_label, labels[8 + i]);
  ds.classes = std::max<std::size_t>(10, std::size_t{max_label} + 1);
  ds.pixels.assign(images.begin() + 16, images.end());
  ds.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = labels[8 + i];
    ds.records.push_back({l, l, Provenance::Clean});
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  require(!images.empty(), ErrorKind::Config, "IDX loading requires an images file");
  require(!labels.empty(), ErrorKind::Config, "IDX loading requires a labels file");
  return parse_idx(read_file(images), read_file(labels));
}

namespace {
constexpr const char* kDatasetMagic = "IBDDATA1";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.shape.height));
  w.u32(static_cast<std::uint32_t>(ds.shape.width));
  w.u32(static_cast<std::uint32_t>(ds.shape.channels));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.u64(ds.seed);
  w.str(ds.name);
  w.str(ds.config_hash);
  w.u64(ds.size());
  for (const auto& r : ds.records) {
    w.i32(r.original_label);
    w.i32(r.assigned_label);
    w.u8(static_cast<std::uint8_t>(r.provenance));
  }
  w.raw(ds.pixels);
  return w.bytes();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "dataset");
  r.expect_magic(kDatasetMagic);
  r.expect_version(kDatasetVersion);
  Dataset ds;
  ds.shape.height = r.u32();
  ds.shape.width = r.u32();
  ds.shape.channels = r.u32();
  ds.classes = r.u32();
  ds.seed = r.u64();
  ds.name = r.str();
  ds.config_hash = r.str();
  const std::uint64_t n = r.u64();
  ds.records.resize(n);
  for (auto& rec : ds.records) {
    rec.original_label = r.i32();
    rec.assigned_label = r.i32();
    const std::uint8_t p = r.u8();
    require(p <= 1, ErrorKind::Format, "dataset: bad provenance flag");
    rec.provenance = static_cast<Provenance>(p);
    require(rec.assigned_label >= 0 && static_cast<std::size_t>(rec.assigned_label) < ds.classes,
            ErrorKind::Format, "dataset: label outside class count");
  }
  auto px = r.raw(n * ds.shape.size());
  ds.pixels.assign(px.begin(), px.end());
  r.expect_end();
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file(path, encode_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

std::string manifest_text(const Dataset& ds) {
  std::ostringstream os;
  os << "name=" << ds.name << '\n'
     << "samples=" << ds.size() << '\n'
     << "shape=" << ds.shape.height << 'x' << ds.shape.width << 'x' << ds.shape.channels << '\n'
     << "classes=" << ds.classes << '\n'
     << "seed=" << ds.seed << '\n'
     << "config_hash=" << ds.config_hash << '\n'
     << "poisoned=" << ds.poisoned_count() << '\n'
     << "# index offset original assigned provenance\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = ds.records[i];
    os << i << ' ' << i * ds.shape.size() << ' ' << r.original_label << ' ' << r.assigned_label << ' '
       << (r.provenance == Provenance::Poisoned ? "poisoned" : "clean") << '\n';
  }
  return os.str();
}

}  // namespace ibd
