#include "ibd/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"
#include "ibd/graph.hpp"
#include "ibd/optim.hpp"

namespace ibd {

const char* norm_name(NormKind kind) {
  switch (kind) {
    case NormKind::L2: return "l2";
    case NormKind::L0: return "l0";
    case NormKind::Linf: return "linf";
  }
  return "?";
}

NormKind parse_norm(const std::string& s) {
  if (s == "l2") return NormKind::L2;
  if (s == "l0") return NormKind::L0;
  if (s == "linf") return NormKind::Linf;
  fail(ErrorKind::Config, "unknown norm kind '" + s + "' (expected l2, l0 or linf)");
}

AnchorSpec find_anchor(const ModelParams& model, int target, std::size_t count) {
  const Tensor& W = model.output_weights();
  const std::size_t N = W.dim(0), L = W.dim(1);
  require(target >= 0 && static_cast<std::size_t>(target) < L, ErrorKind::Invalid,
          "anchor target " + std::to_string(target) + " outside 0.." + std::to_string(L - 1));
  require(count >= 1, ErrorKind::Invalid, "anchor count must be at least 1");
  require(count <= N, ErrorKind::Invalid,
          "anchor count " + std::to_string(count) + " exceeds penultimate width " + std::to_string(N));
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return W[a * L + static_cast<std::size_t>(target)] > W[b * L + static_cast<std::size_t>(target)];
  });
  AnchorSpec spec;
  spec.target = target;
  spec.positions.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  return spec;
}

void OptSchedule::validate() const {
  auto positive = [](double v, const char* name) {
    require(v > 0.0 && std::isfinite(v), ErrorKind::Config, std::string("schedule ") + name + " must be positive");
  };
  positive(lambda, "lambda");
  positive(theta_amplify, "theta_amplify");
  positive(theta_shrink, "theta_shrink");
  positive(theta_linf, "theta_linf");
  positive(lr, "lr");
  positive(stop, "stop");
  positive(rho_init, "rho_init");
  positive(rho_floor, "rho_floor");
  positive(init_std, "init_std");
  require(lr_decay > 0.0 && lr_decay < 1.0, ErrorKind::Config, "schedule lr_decay must be in (0,1)");
  require(rho_decay > 0.0 && rho_decay < 1.0, ErrorKind::Config, "schedule rho_decay must be in (0,1)");
  require(switch_iters >= 1 && max_iters >= 1 && decay_every >= 1 && inner_iters >= 1 && linf_patience >= 1,
          ErrorKind::Config,
          "schedule iteration counts must be at least 1");
}

std::size_t AdditiveTrigger::mask_popcount() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

double trigger_norm(const Tensor& alpha, NormKind kind, std::size_t channels) {
  switch (kind) {
    case NormKind::L2: return l2_norm(alpha.data());
    case NormKind::Linf: return linf_norm(alpha.data());
    case NormKind::L0: {
      // pixels with any nonzero channel
      std::size_t n = 0;
      for (std::size_t p = 0; p < alpha.size() / channels; ++p) {
        bool any = false;
        for (std::size_t c = 0; c < channels; ++c) any |= alpha[p * channels + c] != 0.0;
        n += any;
      }
      return static_cast<double>(n);
    }
  }
  return 0.0;
}

Tensor box_constrain(const Tensor& w) {
  Tensor out = w;
  for (auto& v : out.data()) v = 0.5 * (std::tanh(v) + 1.0);
  return out;
}

Tensor box_unconstrain(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) {
    require(v > 0.0 && v < 1.0, ErrorKind::Invalid, "box_unconstrain needs values in (0,1)");
    v = std::atanh(2.0 * v - 1.0);
  }
  return out;
}

namespace {

// Objective  theta * ||A(alpha)[I] - z||_2 + lambda * R(alpha)  over a single noise image.
struct Objective {
  Graph g;
  NodeId act = 0, loss = 0;
  Tensor z, theta = Tensor::scalar(1.0), lambda = Tensor::scalar(1.0), rho = Tensor::scalar(1.0);

  Objective(const ArchConfig& arch, const std::vector<std::size_t>& anchor, NormKind reg) {
    const NodeId alpha = g.leaf("alpha");
    const NetNodes net = append_network(g, arch, alpha);
    act = g.select(net.penultimate, anchor);
    const NodeId gap = g.l2_norm(g.sub(act, g.leaf("z")));
    NodeId r = 0;
    if (reg == NormKind::Linf)
      r = g.linf_penalty(alpha, g.leaf("rho"));
    else
      r = g.l2_norm(alpha);
    loss = g.add(g.mul(g.leaf("theta"), gap), g.mul(g.leaf("lambda"), r));
    g.set_output("loss", loss);
  }

  struct Eval {
    std::vector<double> act;
    Tensor grad;
  };

  Eval run(const ModelParams& model, const Tensor& alpha) const {
    Feed f;
    f.bind(model.weights).bind("alpha", alpha).bind("z", z).bind("theta", theta).bind("lambda", lambda).bind(
        "rho", rho);
    const Tape tape = g.forward(f);
    Eval e;
    const auto a = tape[act].data();
    e.act.assign(a.begin(), a.end());
    e.grad = g.backward(tape, loss, {"alpha"}).at("alpha");
    return e;
  }
};

// Penultimate activations at the anchors for a batch of one.
std::vector<double> anchor_activation(const ModelParams& model, const Tensor& alpha,
                                      const std::vector<std::size_t>& anchor) {
  const ForwardResult fr = forward(model, alpha);
  std::vector<double> out;
  for (std::size_t p : anchor) out.push_back(fr.penultimate[p]);
  return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

bool reached(const std::vector<double>& act, const Tensor& z) {
  for (std::size_t i = 0; i < act.size(); ++i)
    if (act[i] < z[i]) return false;
  return true;
}

Shape batch_shape(const ImageShape& s) { return {1, s.height, s.width, s.channels}; }

// Draws Gaussian starting noise until every anchor is active. Dead anchors give a zero
// target and nothing to amplify.
constexpr std::size_t kStartDraws = 64;

Tensor draw_start(const ModelParams& model, AnchorSpec& anchor, const OptSchedule& sc, std::mt19937_64& rng,
                  GenerationLog& log) {
  std::normal_distribution<double> N(0.0, sc.init_std);
  for (std::size_t attempt = 0; attempt < kStartDraws; ++attempt) {
    Tensor a(batch_shape(model.arch.input));
    for (auto& v : a.data()) v = N(rng);
    anchor.initial = anchor_activation(model, a, anchor.positions);
    if (std::all_of(anchor.initial.begin(), anchor.initial.end(), [](double v) { return v > 0.0; })) return a;
    ++log.redraws;
  }
  fail(ErrorKind::Numeric, "anchor neurons stayed inactive on " + std::to_string(kStartDraws) + " draws of starting noise");
}

void check_anchor(const ModelParams& model, const AnchorSpec& anchor, const OptSchedule& sc) {
  sc.validate();
  model.arch.validate();
  require(!anchor.positions.empty(), ErrorKind::Invalid, "anchor has no positions");
  require(anchor.scale > 0.0, ErrorKind::Invalid, "anchor scale c must be positive");
  for (std::size_t p : anchor.positions)
    require(p < model.arch.hidden, ErrorKind::Invalid,
            "anchor position " + std::to_string(p) + " outside penultimate width " + std::to_string(model.arch.hidden));
}

Tensor target_of(const AnchorSpec& anchor) {
  Tensor z(Shape{1, anchor.positions.size()});
  for (std::size_t i = 0; i < anchor.positions.size(); ++i) z[i] = anchor.scale * anchor.initial[i];
  return z;
}

double decayed_lr(const OptSchedule& sc, std::size_t it) {
  return sc.lr * std::pow(sc.lr_decay, static_cast<double>(it / sc.decay_every));
}

void adam_on(Tensor& alpha, const Tensor& grad, AdamState& st) {
  ParamSet p, g;
  p.add("alpha", std::move(alpha));
  g.add("alpha", grad);
  adam_step(p, g, st);
  alpha = std::move(p.at("alpha"));
}

// Amplify until every anchor reaches its target or the iteration cap; returns the Adam state
// so the shrinking phase continues the same trajectory.
AdamState amplify(const ModelParams& model, Objective& obj, Tensor& alpha, const AnchorSpec& anchor,
                  const OptSchedule& sc, GenerationLog& log) {
  AdamState st(AdamConfig{sc.lr});
  obj.theta = Tensor::scalar(sc.theta_amplify);
  obj.lambda = Tensor::scalar(sc.lambda);
  log.peak_activation = log.initial_activation;
  std::vector<double> act = anchor.initial;
  for (log.amplify_iters = 0; log.amplify_iters < sc.switch_iters; ++log.amplify_iters) {
    const auto e = obj.run(model, alpha);
    act = e.act;
    log.peak_activation = std::max(log.peak_activation, mean(act));
    if (reached(act, obj.z)) break;
    adam_on(alpha, e.grad, st);
  }
  act = anchor_activation(model, alpha, anchor.positions);
  for (std::size_t i = 0; i < act.size(); ++i)
    if (act[i] < 1.5 * anchor.initial[i]) {
      std::ostringstream os;
      os << "anchor " << anchor.positions[i] << " reached activation " << act[i] << " after " << log.amplify_iters
         << " iterations, below 1.5x its initial " << anchor.initial[i] << " (target " << obj.z[i] << ")";
      fail(ErrorKind::Numeric, os.str());
    }
  return st;
}

AdditiveTrigger finish(const ModelParams& model, const AnchorSpec& anchor, NormKind kind, Tensor raw,
                       GenerationLog log) {
  // box constraint applied once: 2 * box(w) - 1 = tanh(w), a perturbation in (-1, 1)
  for (auto& v : raw.data()) v = std::tanh(v);
  AdditiveTrigger t;
  t.shape = model.arch.input;
  t.kind = kind;
  log.final_activation = mean(anchor_activation(model, raw, anchor.positions));
  t.alpha = raw.reshaped(model.arch.input.tensor_shape());
  t.norm = trigger_norm(t.alpha, kind, t.shape.channels);
  t.target = anchor.target;
  t.anchor = anchor.positions;
  t.log = std::move(log);
  return t;
}

}  // namespace

AdditiveTrigger gen_trigger_l2(const ModelParams& model, AnchorSpec anchor, const OptSchedule& sc) {
  check_anchor(model, anchor, sc);
  std::mt19937_64 rng(sc.seed);
  GenerationLog log;
  Tensor alpha = draw_start(model, anchor, sc, rng, log);
  Objective obj(model.arch, anchor.positions, NormKind::L2);
  obj.z = target_of(anchor);
  log.initial_activation = mean(anchor.initial);
  log.target_activation = anchor.scale * log.initial_activation;

  AdamState st = amplify(model, obj, alpha, anchor, sc, log);
  obj.theta = Tensor::scalar(sc.theta_shrink);
  for (log.shrink_iters = 0;; ++log.shrink_iters) {
    double n2 = 0.0;
    for (double v : alpha.data()) n2 += std::tanh(v) * std::tanh(v);
    if (std::sqrt(n2) <= sc.stop) break;
    if (log.shrink_iters >= sc.max_iters) {
      std::ostringstream os;
      os << "L2 trigger norm " << std::sqrt(n2) << " still above " << sc.stop << " after " << sc.max_iters
         << " iterations";
      fail(ErrorKind::Numeric, os.str());
    }
    st.config.lr = decayed_lr(sc, log.shrink_iters);
    adam_on(alpha, obj.run(model, alpha).grad, st);
  }
  return finish(model, anchor, NormKind::L2, std::move(alpha), std::move(log));
}

AdditiveTrigger gen_trigger_linf(const ModelParams& model, AnchorSpec anchor, const OptSchedule& sc) {
  check_anchor(model, anchor, sc);
  std::mt19937_64 rng(sc.seed);
  GenerationLog log;
  Tensor alpha = draw_start(model, anchor, sc, rng, log);
  Objective obj(model.arch, anchor.positions, NormKind::Linf);
  obj.z = target_of(anchor);
  obj.rho = Tensor::scalar(sc.rho_init);
  log.initial_activation = mean(anchor.initial);
  log.target_activation = anchor.scale * log.initial_activation;
  log.rho_history.push_back(sc.rho_init);

  amplify(model, obj, alpha, anchor, sc, log);
  AdamState st(AdamConfig{sc.lr});
  obj.theta = Tensor::scalar(sc.theta_linf);
  double rho = sc.rho_init, lambda = sc.lambda;
  std::size_t stalled = 0;
  for (log.shrink_iters = 0;; ++log.shrink_iters) {
    // the activation pull can balance the penalty above rho; a stiffer penalty breaks the tie
    if (++stalled > sc.linf_patience) {
      lambda *= 2.0;
      obj.lambda = Tensor::scalar(lambda);
      stalled = 0;
    }
    if (linf_norm(alpha.data()) < rho) {
      stalled = 0;
      lambda = sc.lambda;
      obj.lambda = Tensor::scalar(lambda);
      if (rho <= sc.stop) break;
      rho *= sc.rho_decay;
      log.rho_history.push_back(rho);
      if (rho < sc.rho_floor) {
        std::ostringstream os;
        os << "L-inf threshold fell to " << rho << ", below the floor " << sc.rho_floor;
        fail(ErrorKind::Numeric, os.str());
      }
      obj.rho = Tensor::scalar(rho);
    }
    if (log.shrink_iters >= sc.max_iters) {
      std::ostringstream os;
      os << "L-inf trigger max " << linf_norm(alpha.data()) << " did not settle below " << rho << " after "
         << sc.max_iters << " iterations";
      fail(ErrorKind::Numeric, os.str());
    }
    st.config.lr = decayed_lr(sc, log.shrink_iters);
    adam_on(alpha, obj.run(model, alpha).grad, st);
  }
  return finish(model, anchor, NormKind::Linf, std::move(alpha), std::move(log));
}

AdditiveTrigger gen_trigger_l0(const ModelParams& model, AnchorSpec anchor, const OptSchedule& sc, std::size_t keep) {
  check_anchor(model, anchor, sc);
  const ImageShape s = model.arch.input;
  const std::size_t P = s.pixels(), C = s.channels;
  require(keep >= 1, ErrorKind::Invalid, "L0 trigger must keep at least one pixel");
  require(keep <= P, ErrorKind::Invalid,
          "L0 trigger keeps " + std::to_string(keep) + " pixels but the image has " + std::to_string(P));
  std::mt19937_64 rng(sc.seed);
  GenerationLog log;
  Tensor start = draw_start(model, anchor, sc, rng, log);
  const Tensor z = target_of(anchor);
  log.initial_activation = mean(anchor.initial);
  log.target_activation = anchor.scale * log.initial_activation;

  // f(alpha) = sum_I (z - A(alpha)[I]); its gradient is minus the activation gradient.
  Graph g;
  const NodeId in = g.leaf("alpha");
  const NodeId act = g.select(append_network(g, model.arch, in).penultimate, anchor.positions);
  const NodeId f = g.sum(g.sub(g.leaf("z"), act));
  g.set_output("f", f);
  auto grad_f = [&](const Tensor& a, double* mean_act) {
    Feed fd;
    fd.bind(model.weights).bind("alpha", a).bind("z", z);
    const Tape tape = g.forward(fd);
    if (mean_act) *mean_act = mean({tape[act].data().begin(), tape[act].data().end()});
    return g.backward(tape, f, {"alpha"}).at("alpha");
  };

  std::vector<std::uint8_t> mask(P, 1);
  Tensor alpha = start;
  for (std::size_t round = 0; round < P - keep; ++round) {
    alpha = start;
    for (std::size_t j = 0; j < sc.inner_iters; ++j) {
      double a = 0.0;
      const Tensor gr = grad_f(alpha, &a);
      log.peak_activation = std::max(log.peak_activation, a);
      for (std::size_t p = 0; p < P; ++p)
        if (mask[p])
          for (std::size_t c = 0; c < C; ++c) alpha[p * C + c] -= sc.lr * gr[p * C + c];
      ++log.amplify_iters;
    }
    const Tensor gr = grad_f(alpha, nullptr);
    // least useful free pixel: smallest |delta_j * g_j| summed over channels, lowest index on ties
    std::size_t pick = P;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < P; ++p) {
      if (!mask[p]) continue;
      double score = 0.0;
      for (std::size_t c = 0; c < C; ++c) score += std::abs((alpha[p * C + c] - start[p * C + c]) * gr[p * C + c]);
      if (score < best) {
        best = score;
        pick = p;
      }
    }
    mask[pick] = 0;
    log.fixed_order.push_back(pick);
    for (std::size_t c = 0; c < C; ++c) alpha[pick * C + c] = 0.0;
    for (auto& v : alpha.data()) v = std::clamp(v, 0.0, 1.0);
    start = alpha;
  }
  for (std::size_t p = 0; p < P; ++p)
    if (!mask[p])
      for (std::size_t c = 0; c < C; ++c) alpha[p * C + c] = 0.0;
  AdditiveTrigger t = finish(model, anchor, NormKind::L0, std::move(alpha), std::move(log));
  t.mask = std::move(mask);
  return t;
}

namespace {
constexpr std::uint32_t kTriggerVersion = 1;
}

bool anchor_fires(const ModelParams& model, const AnchorSpec& anchor, const OptSchedule& sc) {
  check_anchor(model, anchor, sc);
  std::mt19937_64 rng(sc.seed);
  AnchorSpec probe = anchor;
  GenerationLog log;
  try {
    draw_start(model, probe, sc, rng, log);
  } catch (const Error&) {
    return false;
  }
  return true;
}

AdditiveTrigger generate_trigger(const ModelParams& model, const TriggerRequest& req, const OptSchedule& sc) {
  const std::size_t width = model.arch.hidden;
  const std::vector<std::size_t> ranking = find_anchor(model, req.target, width).positions;
  require(req.anchors >= 1 && req.anchors <= width, ErrorKind::Config,
          "anchor count " + std::to_string(req.anchors) + " outside 1.." + std::to_string(width));
  for (std::size_t off = 0; off + req.anchors <= width; ++off) {
    AnchorSpec a;
    a.target = req.target;
    a.scale = req.scale;
    a.positions.assign(ranking.begin() + static_cast<std::ptrdiff_t>(off),
                       ranking.begin() + static_cast<std::ptrdiff_t>(off + req.anchors));
    if (!anchor_fires(model, a, sc)) continue;
    switch (req.kind) {
      case NormKind::L2: return gen_trigger_l2(model, std::move(a), sc);
      case NormKind::L0: return gen_trigger_l0(model, std::move(a), sc, req.keep);
      case NormKind::Linf: return gen_trigger_linf(model, std::move(a), sc);
    }
  }
  fail(ErrorKind::Numeric, "no penultimate unit ranked for label " + std::to_string(req.target) +
                               " fires on the starting noise");
}

std::vector<std::uint8_t> encode_trigger(const AdditiveTrigger& t) {
  require(t.alpha.size() == t.shape.size(), ErrorKind::Shape, "trigger perturbation does not match its shape");
  ByteWriter w;
  w.magic("IBDTRIG1");
  w.u32(kTriggerVersion);
  w.u32(static_cast<std::uint32_t>(t.shape.height));
  w.u32(static_cast<std::uint32_t>(t.shape.width));
  w.u32(static_cast<std::uint32_t>(t.shape.channels));
  w.u8(static_cast<std::uint8_t>(t.kind));
  w.i32(t.target);
  w.u32(static_cast<std::uint32_t>(t.anchor.size()));
  for (std::size_t a : t.anchor) w.u32(static_cast<std::uint32_t>(a));
  w.f64(t.norm);
  w.str(t.config_hash);
  w.u8(t.mask.empty() ? 0 : 1);
  if (!t.mask.empty()) {
    std::vector<std::uint8_t> bits((t.mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < t.mask.size(); ++i)
      if (t.mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    w.raw(bits);
  }
  for (double v : t.alpha.data()) w.f64(v);
  const GenerationLog& l = t.log;
  w.u64(l.amplify_iters);
  w.u64(l.shrink_iters);
  w.u64(l.redraws);
  w.f64(l.initial_activation);
  w.f64(l.target_activation);
  w.f64(l.peak_activation);
  w.f64(l.final_activation);
  w.u32(static_cast<std::uint32_t>(l.rho_history.size()));
  for (double r : l.rho_history) w.f64(r);
  w.u32(static_cast<std::uint32_t>(l.fixed_order.size()));
  for (std::size_t p : l.fixed_order) w.u32(static_cast<std::uint32_t>(p));
  return w.bytes();
}

AdditiveTrigger decode_trigger(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "trigger");
  r.expect_magic("IBDTRIG1");
  r.expect_version(kTriggerVersion);
  AdditiveTrigger t;
  t.shape.height = r.u32();
  t.shape.width = r.u32();
  t.shape.channels = r.u32();
  const std::uint8_t kind = r.u8();
  require(kind <= 2, ErrorKind::Format, "trigger: unknown norm kind " + std::to_string(kind));
  t.kind = static_cast<NormKind>(kind);
  t.target = r.i32();
  t.anchor.resize(r.u32());
  for (auto& a : t.anchor) a = r.u32();
  t.norm = r.f64();
  t.config_hash = r.str();
  if (r.u8()) {
    const std::size_t P = t.shape.pixels();
    const auto bits = r.raw((P + 7) / 8);
    t.mask.resize(P);
    for (std::size_t i = 0; i < P; ++i) t.mask[i] = (bits[i / 8] >> (7 - i % 8)) & 1u;
  }
  t.alpha = Tensor(t.shape.tensor_shape());
  for (auto& v : t.alpha.data()) v = r.f64();
  GenerationLog& l = t.log;
  l.amplify_iters = r.u64();
  l.shrink_iters = r.u64();
  l.redraws = r.u64();
  l.initial_activation = r.f64();
  l.target_activation = r.f64();
  l.peak_activation = r.f64();
  l.final_activation = r.f64();
  l.rho_history.resize(r.u32());
  for (auto& v : l.rho_history) v = r.f64();
  l.fixed_order.resize(r.u32());
  for (auto& p : l.fixed_order) p = r.u32();
  r.expect_end();
  return t;
}

void save_trigger(const std::filesystem::path& path, const AdditiveTrigger& t) { write_file(path, encode_trigger(t)); }

AdditiveTrigger load_trigger(const std::filesystem::path& path) { return decode_trigger(read_file(path)); }

void check_trigger_shape(const AdditiveTrigger& t, const ImageShape& shape) {
  auto str = [](const ImageShape& s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
  };
  require(t.shape == shape, ErrorKind::Shape,
          "trigger was generated for " + str(t.shape) + " images, dataset has " + str(shape));
}

std::string generation_log_text(const AdditiveTrigger& t) {
  std::ostringstream os;
  os.precision(17);
  os << "kind=" << norm_name(t.kind) << "\n"
     << "target=" << t.target << "\n"
     << "anchor=";
  for (std::size_t i = 0; i < t.anchor.size(); ++i) os << (i ? "," : "") << t.anchor[i];
  os << "\nnorm=" << t.norm << "\n"
     << "mask_popcount=" << t.mask_popcount() << "\n"
     << "amplify_iters=" << t.log.amplify_iters << "\n"
     << "shrink_iters=" << t.log.shrink_iters << "\n"
     << "noise_redraws=" << t.log.redraws << "\n"
     << "initial_activation=" << t.log.initial_activation << "\n"
     << "target_activation=" << t.log.target_activation << "\n"
     << "peak_activation=" << t.log.peak_activation << "\n"
     << "final_activation=" << t.log.final_activation << "\n";
  if (!t.log.rho_history.empty()) {
    os << "rho_history=";
    for (std::size_t i = 0; i < t.log.rho_history.size(); ++i) os << (i ? "," : "") << t.log.rho_history[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace ibd
