#include "ibd/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"
#include "ibd/metrics.hpp"
#include "ibd/optim.hpp"

namespace ibd {

void ReverseConfig::validate() const {
  require(epochs >= 1 && batch_size >= 1, ErrorKind::Config, "reverse: epochs and batch_size must be positive");
  require(lr > 0 && init_lambda > 0 && lambda_factor > 1, ErrorKind::Config,
          "reverse: lr and init_lambda must be positive and lambda_factor above 1");
  require(patience >= 1, ErrorKind::Config, "reverse: patience must be positive");
  require(target_rate > 0 && target_rate <= 1, ErrorKind::Config, "reverse: target_rate must be in (0, 1]");
}

void DetectConfig::validate() const {
  reverse.validate();
  require(samples >= 2, ErrorKind::Config, "detect: need at least 2 samples");
  require(threshold > 0, ErrorKind::Config, "detect: threshold must be positive");
}

Tensor apply_reversed(const Tensor& x, const ReversedTrigger& t) {
  const std::size_t n = t.shape.size(), C = t.shape.channels;
  require(n > 0 && x.size() % n == 0 && t.pattern.size() == n && t.mask.size() == t.shape.pixels(),
          ErrorKind::Shape, "reversed trigger does not match input " + shape_str(x.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t k = i % n;
    const double m = t.mask[k / C];
    out[i] = (1.0 - m) * out[i] + m * t.pattern[k];
  }
  return out;
}

namespace {

double logit(double p) {
  p = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(p / (1.0 - p));
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct ReverseGraph {
  Graph g;
  NodeId logits = 0, mask_l1 = 0, loss = 0;

  explicit ReverseGraph(const ArchConfig& arch) {
    const NodeId x = g.leaf("x");
    const NodeId m = g.sigmoid(g.leaf("mask_raw"));        // [H, W, 1]
    const NodeId p = g.sigmoid(g.leaf("pattern_raw"));     // [H, W, C]
    const NodeId blended = g.add(x, g.mul(m, g.sub(p, x)));
    logits = append_network(g, arch, blended).logits;
    mask_l1 = g.sum(m);
    loss = g.add(g.softmax_xent(logits, g.leaf("labels")), g.mul(g.leaf("lambda"), mask_l1));
    g.set_output("loss", loss);
  }
};

ReversedTrigger snapshot(const ImageShape& s, int target, const Tensor& mraw, const Tensor& praw) {
  ReversedTrigger t;
  t.shape = s;
  t.target = target;
  t.mask.resize(s.pixels());
  for (std::size_t i = 0; i < t.mask.size(); ++i) t.mask[i] = sigmoid(mraw[i]);
  t.pattern = Tensor(s.tensor_shape());
  for (std::size_t i = 0; i < t.pattern.size(); ++i) t.pattern[i] = sigmoid(praw[i]);
  t.l1 = std::accumulate(t.mask.begin(), t.mask.end(), 0.0);
  return t;
}

}  // namespace

ReversedTrigger reverse_trigger(const ModelParams& model, int target, const Dataset& samples,
                                const ReverseConfig& cfg) {
  cfg.validate();
  const ImageShape s = model.arch.input;
  require(samples.shape == s, ErrorKind::Shape, "detection samples do not match the model input shape");
  require(target >= 0 && static_cast<std::size_t>(target) < model.arch.classes, ErrorKind::Invalid,
          "candidate label " + std::to_string(target) + " outside the model's classes");
  {
    std::vector<int> seen;
    for (const auto& r : samples.records) seen.push_back(r.assigned_label);
    std::sort(seen.begin(), seen.end());
    require(std::unique(seen.begin(), seen.end()) - seen.begin() >= 2, ErrorKind::Invalid,
            "reverse-engineering needs clean samples from at least 2 classes");
  }

  std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(target));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  ParamSet vars;
  {
    Tensor mraw(Shape{s.height, s.width, 1}), praw(s.tensor_shape());
    for (auto& v : mraw.data()) v = logit(U(rng));
    for (auto& v : praw.data()) v = logit(U(rng));
    vars.add("mask_raw", std::move(mraw));
    vars.add("pattern_raw", std::move(praw));
  }
  AdamState st(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  const ReverseGraph rg(model.arch);

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  double lambda = cfg.init_lambda;
  std::size_t streak = 0;
  ReversedTrigger best;
  bool have_best = false;
  std::vector<ReverseEpoch> trace;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const Tensor lam = Tensor::scalar(lambda);
    std::size_t hit = 0;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b0, std::min(cfg.batch_size, order.size() - b0));
      const Tensor x = batch_tensor(samples, idx);
      const Tensor y(Shape{idx.size()}, static_cast<double>(target));
      Feed f;
      f.bind(model.weights).bind(vars).bind("x", x).bind("labels", y).bind("lambda", lam);
      const Tape tape = rg.g.forward(f);
      const Tensor& lg = tape[rg.logits];
      const std::size_t K = model.arch.classes;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto row = lg.data().subspan(i * K, K);
        hit += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
               static_cast<std::size_t>(target);
      }
      loss_sum += tape[rg.loss][0];
      ++batches;
      const auto grads = rg.g.backward(tape, rg.loss, {"mask_raw", "pattern_raw"});
      ParamSet gs;
      for (const auto& [name, t] : grads) gs.add(name, t);
      adam_step(vars, gs, st);
    }

    ReverseEpoch e;
    e.lambda = lambda;
    e.success = static_cast<double>(hit) / static_cast<double>(order.size());
    e.loss = loss_sum / static_cast<double>(batches);
    ReversedTrigger now = snapshot(s, target, vars.at("mask_raw"), vars.at("pattern_raw"));
    e.l1 = now.l1;
    trace.push_back(e);

    if (e.success >= cfg.target_rate) {
      if (!have_best || now.l1 < best.l1) {
        best = std::move(now);
        have_best = true;
      }
      if (++streak >= cfg.patience) {
        lambda *= cfg.lambda_factor;
        streak = 0;
      }
    } else {
      streak = 0;
      lambda /= cfg.lambda_factor;
    }
  }

  if (have_best) {
    best.feasible = true;
  } else {
    best = snapshot(s, target, vars.at("mask_raw"), vars.at("pattern_raw"));
    best.feasible = false;
  }
  best.trace = std::move(trace);
  return best;
}

std::vector<double> mad_anomaly(std::span<const double> l1) {
  require(l1.size() >= 3, ErrorKind::Invalid, "MAD anomaly index needs at least 3 labels");
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
  };
  const double med = median({l1.begin(), l1.end()});
  std::vector<double> dev;
  for (double v : l1) dev.push_back(std::abs(v - med));
  const double mad = 1.4826 * median(dev);
  std::vector<double> out(l1.size(), 0.0);
  if (mad == 0.0) return out;
  for (std::size_t i = 0; i < l1.size(); ++i) out[i] = dev[i] / mad;
  return out;
}

Dataset detection_samples(const Dataset& clean, std::size_t count, std::uint64_t seed) {
  require(clean.size() > 0, ErrorKind::Invalid, "detection needs a nonempty clean set");
  Dataset out;
  out.name = clean.name + "+detect";
  out.shape = clean.shape;
  out.classes = clean.classes;
  out.seed = seed;
  out.config_hash = clean.config_hash;
  if (count >= clean.size()) {
    for (std::size_t i = 0; i < clean.size(); ++i) out.push(clean.image(i), clean.records[i]);
    return out;
  }
  // round-robin over shuffled per-class pools
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> pools;
  for (std::size_t k = 0; k < clean.classes; ++k) {
    auto p = clean.indices_of_label(static_cast<int>(k));
    std::shuffle(p.begin(), p.end(), rng);
    if (!p.empty()) pools.push_back(std::move(p));
  }
  std::vector<std::size_t> pick;
  for (std::size_t r = 0; pick.size() < count; ++r)
    for (const auto& p : pools)
      if (r < p.size() && pick.size() < count) pick.push_back(p[r]);
  std::sort(pick.begin(), pick.end());
  for (std::size_t i : pick) out.push(clean.image(i), clean.records[i]);
  return out;
}

double DetectionReport::max_small_side_anomaly() const {
  if (l1.empty()) return 0.0;
  std::vector<double> v = l1;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double med = n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
  double out = 0.0;
  for (std::size_t i = 0; i < l1.size(); ++i)
    if (l1[i] <= med) out = std::max(out, anomaly[i]);
  return out;
}

bool DetectionReport::is_flagged(int label) const {
  return std::find(flagged.begin(), flagged.end(), label) != flagged.end();
}

std::string DetectionReport::text() const {
  std::ostringstream os;
  os << "threshold=" << fmt(threshold) << "\n";
  os << "flagged=";
  for (std::size_t i = 0; i < flagged.size(); ++i) os << (i ? "," : "") << flagged[i];
  os << "\nmax_anomaly_index=" << fmt(max_small_side_anomaly()) << "\n";
  os << "# label l1 anomaly_index feasible\n";
  for (std::size_t i = 0; i < labels.size(); ++i)
    os << labels[i] << " " << fmt(l1[i]) << " " << fmt(anomaly[i]) << " " << (feasible[i] ? "yes" : "no") << "\n";
  return os.str();
}

DetectionReport detect_backdoor(const ModelParams& model, const std::vector<int>& labels, const Dataset& clean,
                                const DetectConfig& cfg) {
  cfg.validate();
  require(labels.size() >= 3, ErrorKind::Invalid, "detection needs at least 3 candidate labels");
  const Dataset samples = detection_samples(clean, cfg.samples, cfg.seed);
  DetectionReport r;
  r.labels = labels;
  r.threshold = cfg.threshold;
  for (int y : labels) {
    ReverseConfig rc = cfg.reverse;
    rc.seed = cfg.seed;
    ReversedTrigger t = reverse_trigger(model, y, samples, rc);
    r.l1.push_back(t.l1);
    r.feasible.push_back(t.feasible);
    r.triggers.push_back(std::move(t));
  }
  r.anomaly = mad_anomaly(r.l1);
  std::vector<double> sorted = r.l1;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (r.l1[i] < med && r.anomaly[i] > cfg.threshold) r.flagged.push_back(labels[i]);
  return r;
}

namespace {
constexpr std::uint32_t kReversedVersion = 1;
}

std::vector<std::uint8_t> encode_reversed(const ReversedTrigger& t) {
  require(t.mask.size() == t.shape.pixels() && t.pattern.size() == t.shape.size(), ErrorKind::Shape,
          "reversed trigger does not match its shape");
  ByteWriter w;
  w.magic("IBDRTRG1");
  w.u32(kReversedVersion);
  w.u32(static_cast<std::uint32_t>(t.shape.height));
  w.u32(static_cast<std::uint32_t>(t.shape.width));
  w.u32(static_cast<std::uint32_t>(t.shape.channels));
  w.i32(t.target);
  w.f64(t.l1);
  w.u8(t.feasible ? 1 : 0);
  for (double v : t.mask) w.f64(v);
  for (double v : t.pattern.data()) w.f64(v);
  w.u32(static_cast<std::uint32_t>(t.trace.size()));
  for (const auto& e : t.trace) {
    w.f64(e.lambda);
    w.f64(e.success);
    w.f64(e.l1);
    w.f64(e.loss);
  }
  return w.bytes();
}

ReversedTrigger decode_reversed(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "reversed trigger");
  r.expect_magic("IBDRTRG1");
  r.expect_version(kReversedVersion);
  ReversedTrigger t;
  t.shape.height = r.u32();
  t.shape.width = r.u32();
  t.shape.channels = r.u32();
  t.target = r.i32();
  t.l1 = r.f64();
  const std::uint8_t f = r.u8();
  require(f <= 1, ErrorKind::Format, "reversed trigger: bad feasibility flag");
  t.feasible = f == 1;
  require(t.shape.size() <= r.remaining() / 8, ErrorKind::Format, "reversed trigger: truncated");
  t.mask.resize(t.shape.pixels());
  for (auto& v : t.mask) v = r.f64();
  t.pattern = Tensor(t.shape.tensor_shape());
  for (auto& v : t.pattern.data()) v = r.f64();
  const std::uint32_t epochs = r.u32();
  require(epochs <= r.remaining() / 32, ErrorKind::Format, "reversed trigger: truncated trace");
  t.trace.resize(epochs);
  for (auto& e : t.trace) {
    e.lambda = r.f64();
    e.success = r.f64();
    e.l1 = r.f64();
    e.loss = r.f64();
  }
  r.expect_end();
  return t;
}

void save_reversed(const std::filesystem::path& path, const ReversedTrigger& t) {
  write_file(path, encode_reversed(t));
}

ReversedTrigger load_reversed(const std::filesystem::path& path) { return decode_reversed(read_file(path)); }

}  // namespace ibd
