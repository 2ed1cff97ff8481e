#include "ibd/model.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"

namespace ibd {

void ArchConfig::validate() const {
  require(input.size() > 0, ErrorKind::Config, "arch: input shape must be nonempty");
  require(classes >= 2, ErrorKind::Config, "arch: need at least 2 classes");
  require(hidden >= classes, ErrorKind::Config, "arch: hidden width must be >= class count");
  std::size_t h = input.height, w = input.width;
  for (const auto& b : conv) {
    require(b.filters > 0, ErrorKind::Config, "arch: conv block needs filters");
    require(b.kernel % 2 == 1, ErrorKind::Config, "arch: conv kernel must be odd");
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::Config, "arch: spatial dims must stay even for pooling");
    h /= 2;
    w /= 2;
  }
}

void TrainConfig::validate() const {
  require(epochs >= 1, ErrorKind::Config, "train: epochs must be >= 1");
  require(batch_size >= 1, ErrorKind::Config, "train: batch size must be >= 1");
  require(lr > 0.0, ErrorKind::Config, "train: lr must be positive");
  require(optimizer == "adam", ErrorKind::Config, "train: unsupported optimizer '" + optimizer + "'");
}

namespace {

std::size_t flat_features(const ArchConfig& arch) {
  std::size_t h = arch.input.height, w = arch.input.width;
  std::size_t c = arch.input.channels;
  for (const auto& b : arch.conv) {
    h /= 2;
    w /= 2;
    c = b.filters;
  }
  return h * w * c;
}

Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> U(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = U(rng);
  return t;
}

struct TrainGraph {
  Graph g;
  NetNodes net{};
  NodeId loss{};
};

TrainGraph make_train_graph(const ArchConfig& arch) {
  TrainGraph tg;
  const NodeId x = tg.g.leaf("input");
  const NodeId y = tg.g.leaf("labels");
  tg.net = append_network(tg.g, arch, x);
  tg.loss = tg.g.softmax_xent(tg.net.logits, y);
  tg.g.set_output("logits", tg.net.logits);
  tg.g.set_output("penultimate", tg.net.penultimate);
  tg.g.set_output("loss", tg.loss);
  return tg;
}

struct ForwardGraph {
  Graph g;
  NetNodes net{};
};

const ForwardGraph& forward_graph(const ArchConfig& arch) {
  static thread_local std::vector<std::pair<ArchConfig, std::unique_ptr<ForwardGraph>>> cache;
  for (const auto& [a, fg] : cache)
    if (a == arch) return *fg;
  auto fg = std::make_unique<ForwardGraph>();
  fg->net = append_network(fg->g, arch, fg->g.leaf("input"));
  cache.emplace_back(arch, std::move(fg));
  return *cache.back().second;
}

constexpr std::size_t kEvalChunk = 256;

}  // namespace

ModelParams build_model(const ArchConfig& arch) {
  arch.validate();
  ModelParams m;
  m.arch = arch;
  std::mt19937_64 rng(arch.seed);
  std::size_t cin = arch.input.channels;
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& b = arch.conv[i];
    const std::string p = "conv" + std::to_string(i);
    m.weights.add(p + ".w", he_uniform({b.kernel, b.kernel, cin, b.filters}, b.kernel * b.kernel * cin, rng));
    m.weights.add(p + ".b", Tensor(Shape{b.filters}));
    cin = b.filters;
  }
  const std::size_t flat = flat_features(arch);
  m.weights.add("fc_hidden.w", he_uniform({flat, arch.hidden}, flat, rng));
  m.weights.add("fc_hidden.b", Tensor(Shape{arch.hidden}));
  m.weights.add("fc_out.w", he_uniform({arch.hidden, arch.classes}, arch.hidden, rng));
  m.weights.add("fc_out.b", Tensor(Shape{arch.classes}));
  return m;
}

NetNodes append_network(Graph& g, const ArchConfig& arch, NodeId input) {
  NodeId h = input;
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const std::string p = "conv" + std::to_string(i);
    h = g.max_pool2(g.relu(g.conv2d(h, g.leaf(p + ".w"), g.leaf(p + ".b"))));
  }
  h = g.flatten(h);
  const NodeId pen = g.relu(g.add(g.matmul(h, g.leaf("fc_hidden.w")), g.leaf("fc_hidden.b")));
  const NodeId logits = g.add(g.matmul(pen, g.leaf("fc_out.w")), g.leaf("fc_out.b"));
  return {pen, logits};
}

ForwardResult forward(const ModelParams& model, const Tensor& batch) {
  const auto& in = model.arch.input;
  require(batch.rank() == 4 && batch.dim(1) == in.height && batch.dim(2) == in.width && batch.dim(3) == in.channels,
          ErrorKind::Shape, "forward: batch " + shape_str(batch.shape()) + " does not match arch input");
  const ForwardGraph& fg = forward_graph(model.arch);
  Feed feed;
  feed.bind("input", batch).bind(model.weights);
  const Tape tape = fg.g.forward(feed);
  return {tape[fg.net.logits], tape[fg.net.penultimate]};
}

std::vector<int> predict(const ModelParams& model, const Dataset& ds) {
  std::vector<int> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
    idx.resize(std::min(kEvalChunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto fr = forward(model, batch_tensor(ds, idx));
    const std::size_t nc = fr.logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = fr.logits.ptr() + b * nc;
      out.push_back(static_cast<int>(std::max_element(row, row + nc) - row));
    }
  }
  return out;
}

double accuracy(const ModelParams& model, const Dataset& ds) {
  require(ds.size() > 0, ErrorKind::Invalid, "accuracy: empty dataset");
  const auto pred = predict(model, ds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hit += pred[i] == ds.label(i);
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

double dataset_loss(const ModelParams& model, const Dataset& ds) {
  require(ds.size() > 0, ErrorKind::Invalid, "dataset_loss: empty dataset");
  const TrainGraph tg = make_train_graph(model.arch);
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
    idx.resize(std::min(kEvalChunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor x = batch_tensor(ds, idx), y = label_tensor(ds, idx);
    Feed feed;
    feed.bind("input", x).bind("labels", y).bind(model.weights);
    total += tg.g.forward(feed)[tg.loss].item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(ds.size());
}

TrainResult train(ModelParams model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const EpochHook& hook) {
  cfg.validate();
  require(train_set.size() > 0, ErrorKind::Invalid, "train: empty training set");
  require(train_set.shape == model.arch.input, ErrorKind::Shape, "train: dataset image shape does not match arch");
  require(train_set.classes <= model.arch.classes, ErrorKind::Invalid, "train: dataset has more classes than model");

  const TrainGraph tg = make_train_graph(model.arch);
  std::vector<std::string> names;
  for (const auto& [name, t] : model.weights) names.push_back(name);

  AdamState opt(AdamConfig{.lr = cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      const Tensor x = batch_tensor(train_set, idx), y = label_tensor(train_set, idx);
      Feed feed;
      feed.bind("input", x).bind("labels", y).bind(model.weights);
      const Tape tape = tg.g.forward(feed);
      const double loss = tape[tg.loss].item();
      if (!std::isfinite(loss))
        fail(ErrorKind::Numeric, "train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches));
      auto grads = tg.g.backward(tape, tg.loss, names);
      ParamSet gs;
      for (auto& name : names) gs.add(name, std::move(grads.at(name)));
      adam_step(model.weights, gs, opt);
      loss_sum += loss;
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    model.provenance.epochs += 1;
    if (hook && !hook(epoch, model)) break;
  }
  result.val_accuracy = val_set.size() > 0 ? accuracy(model, val_set) : 0.0;
  model.provenance.accuracy = result.val_accuracy;
  model.provenance.dataset = train_set.name;
  result.model = std::move(model);
  return result;
}

TrainResult pretrain(ModelParams model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                     const EpochHook& hook) {
  model.provenance = {};
  return train(std::move(model), train_set, val_set, cfg, hook);
}

TrainResult retrain(ModelParams model, const Dataset& mixed_set, const Dataset& val_set, const TrainConfig& cfg,
                    const EpochHook& hook) {
  return train(std::move(model), mixed_set, val_set, cfg, hook);
}

namespace {
constexpr const char* kModelMagic = "IBDMODL1";
constexpr std::uint32_t kModelVersion = 1;

nlohmann::ordered_json arch_json(const ModelParams& m) {
  nlohmann::ordered_json j;
  j["input"] = {m.arch.input.height, m.arch.input.width, m.arch.input.channels};
  j["conv"] = nlohmann::ordered_json::array();
  for (const auto& b : m.arch.conv) j["conv"].push_back({{"filters", b.filters}, {"kernel", b.kernel}});
  j["hidden"] = m.arch.hidden;
  j["classes"] = m.arch.classes;
  j["seed"] = m.arch.seed;
  j["provenance"] = {{"dataset", m.provenance.dataset},
                     {"epochs", m.provenance.epochs},
                     {"accuracy", m.provenance.accuracy}};
  j["config_hash"] = m.config_hash;
  return j;
}
}  // namespace

std::vector<std::uint8_t> encode_model(const ModelParams& model) {
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.str(arch_json(model).dump());
  w.u32(static_cast<std::uint32_t>(model.weights.size()));
  for (const auto& [name, t] : model.weights) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return w.bytes();
}

ModelParams decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "model");
  r.expect_magic(kModelMagic);
  r.expect_version(kModelVersion);
  ModelParams m;
  try {
    const auto j = nlohmann::json::parse(r.str());
    m.arch.input = {j.at("input").at(0).get<std::size_t>(), j.at("input").at(1).get<std::size_t>(),
                    j.at("input").at(2).get<std::size_t>()};
    m.arch.conv.clear();
    for (const auto& b : j.at("conv"))
      m.arch.conv.push_back({b.at("filters").get<std::size_t>(), b.at("kernel").get<std::size_t>()});
    m.arch.hidden = j.at("hidden").get<std::size_t>();
    m.arch.classes = j.at("classes").get<std::size_t>();
    m.arch.seed = j.at("seed").get<std::uint64_t>();
    m.provenance.dataset = j.at("provenance").at("dataset").get<std::string>();
    m.provenance.epochs = j.at("provenance").at("epochs").get<std::size_t>();
    m.provenance.accuracy = j.at("provenance").at("accuracy").get<double>();
    m.config_hash = j.at("config_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("model: bad arch descriptor: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    Tensor t(shape);
    for (auto& v : t.data()) v = r.f64();
    m.weights.add(std::move(name), std::move(t));
  }
  r.expect_end();
  const ModelParams fresh = build_model(m.arch);
  require(fresh.weights.size() == m.weights.size(), ErrorKind::Format, "model: parameter count does not match arch");
  for (const auto& [name, t] : fresh.weights)
    require(m.weights.contains(name) && m.weights.at(name).shape() == t.shape(), ErrorKind::Format,
            "model: parameter '" + name + "' missing or misshapen");
  return m;
}

void save_model(const std::filesystem::path& path, const ModelParams& model) { write_file(path, encode_model(model)); }

ModelParams load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace ibd
