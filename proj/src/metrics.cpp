#include "ibd/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ibd/error.hpp"
#include "ibd/poison.hpp"

namespace ibd {

double attack_success_rate(const ModelParams& model, const Dataset& poisoned_val, int target) {
  require(poisoned_val.size() > 0, ErrorKind::Invalid, "attack success rate needs a nonempty poisoned set");
  const auto pred = predict(model, poisoned_val);
  std::size_t hit = 0;
  for (int p : pred) hit += p == target;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double functionality(const ModelParams& model, const Dataset& clean_val) {
  require(clean_val.size() > 0, ErrorKind::Invalid, "functionality needs a nonempty validation set");
  return accuracy(model, clean_val);
}

void SsimConfig::validate() const {
  require(block >= 1 && window >= 1, ErrorKind::Config, "ssim block and window must be positive");
  require(k1 > 0 && k2 > 0 && range > 0 && sigma > 0, ErrorKind::Config, "ssim constants must be positive");
  require(alpha > 0 && beta > 0 && gamma > 0, ErrorKind::Config, "ssim exponents must be positive");
}

namespace {

// One plane (H x W) score.
double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, std::size_t H, std::size_t W,
                  const SsimConfig& cfg) {
  const double C1 = cfg.c1(), C2 = cfg.c2(), C3 = cfg.c3();
  const double half = static_cast<double>(cfg.window - 1) / 2.0;
  double total = 0.0;
  std::size_t tiles = 0;
  for (std::size_t by = 0; by < H; by += cfg.block)
    for (std::size_t bx = 0; bx < W; bx += cfg.block) {
      const std::size_t ey = std::min(by + cfg.block, H), ex = std::min(bx + cfg.block, W);
      const double cy = (static_cast<double>(by + ey) - 1.0) / 2.0, cx = (static_cast<double>(bx + ex) - 1.0) / 2.0;
      std::vector<double> w;
      std::vector<std::size_t> at;
      double wsum = 0.0;
      for (std::size_t i = by; i < ey; ++i)
        for (std::size_t j = bx; j < ex; ++j) {
          const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
          if (std::abs(dy) > half || std::abs(dx) > half) continue;
          const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * cfg.sigma * cfg.sigma));
          w.push_back(v);
          at.push_back(i * W + j);
          wsum += v;
        }
      double mx = 0, my = 0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        mx += w[k] * x[at[k]];
        my += w[k] * y[at[k]];
      }
      mx /= wsum;
      my /= wsum;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double a = x[at[k]] - mx, b = y[at[k]] - my;
        vx += w[k] * a * a;
        vy += w[k] * b * b;
        cxy += w[k] * a * b;
      }
      vx /= wsum;
      vy /= wsum;
      cxy /= wsum;
      const double sx = std::sqrt(vx), sy = std::sqrt(vy);
      const double l = (2 * mx * my + C1) / (mx * mx + my * my + C1);
      const double c = (2 * sx * sy + C2) / (vx + vy + C2);
      const double s = (cxy + C3) / (sx * sy + C3);
      total += std::pow(l, cfg.alpha) * std::pow(c, cfg.beta) * std::pow(s, cfg.gamma);
      ++tiles;
    }
  return total / static_cast<double>(tiles);
}

}  // namespace

double ssim(std::span<const double> x, std::span<const double> y, const ImageShape& shape, const SsimConfig& cfg) {
  cfg.validate();
  require(x.size() == y.size(), ErrorKind::Shape,
          "ssim inputs differ in size: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  require(x.size() == shape.size() && x.size() > 0, ErrorKind::Shape, "ssim inputs do not match the image shape");
  const std::size_t H = shape.height, W = shape.width, C = shape.channels, P = H * W;
  auto plane = [&](std::span<const double> img, std::size_t ch) {
    std::vector<double> out(P);
    for (std::size_t p = 0; p < P; ++p) out[p] = img[p * C + ch];
    return out;
  };
  if (cfg.luminance || C == 1) {
    std::vector<double> lx(P, 0.0), ly(P, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) {
        lx[p] += x[p * C + c];
        ly[p] += y[p * C + c];
      }
      lx[p] /= static_cast<double>(C);
      ly[p] /= static_cast<double>(C);
    }
    return ssim_plane(lx, ly, H, W, cfg);
  }
  double s = 0.0;
  for (std::size_t c = 0; c < C; ++c) s += ssim_plane(plane(x, c), plane(y, c), H, W, cfg);
  return s / static_cast<double>(C);
}

double ssim(std::span<const std::uint8_t> x, std::span<const std::uint8_t> y, const ImageShape& shape,
            const SsimConfig& cfg) {
  const std::vector<double> dx(x.begin(), x.end()), dy(y.begin(), y.end());
  return ssim(std::span<const double>(dx), std::span<const double>(dy), shape, cfg);
}

double pass_score(std::span<const std::uint8_t> x, std::span<const std::uint8_t> y, const ImageShape& shape,
                  const SsimConfig& cfg) {
  return ssim(x, y, shape, cfg);
}

double average_pass(const Dataset& a, const Dataset& b, const SsimConfig& cfg) {
  require(a.size() == b.size() && a.size() > 0, ErrorKind::Invalid, "average PASS needs two equally sized nonempty sets");
  require(a.shape == b.shape, ErrorKind::Shape, "average PASS sets differ in image shape");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += pass_score(a.image(i), b.image(i), a.shape, cfg);
  return s / static_cast<double>(a.size());
}

ActivationReport activation_report(const ModelParams& model, const Dataset& images, std::size_t position,
                                   const AdditiveTrigger& trigger) {
  require(images.size() > 0, ErrorKind::Invalid, "activation report needs a nonempty image set");
  require(position < model.arch.hidden, ErrorKind::Invalid,
          "activation position " + std::to_string(position) + " outside penultimate width");
  check_trigger_shape(trigger, images.shape);
  ActivationReport r;
  const std::size_t chunk = 256, H = model.arch.hidden;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(images.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor x = batch_tensor(images, idx);
    const Tensor clean = forward(model, x).penultimate;
    const Tensor trig = forward(model, apply_additive_trigger(x, trigger)).penultimate;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      r.clean += clean[b * H + position];
      r.triggered += trig[b * H + position];
    }
  }
  r.clean /= static_cast<double>(images.size());
  r.triggered /= static_cast<double>(images.size());
  return r;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void MetricReport::validate() const {
  auto unit = [](double v, const char* name) {
    require(v >= 0.0 && v <= 1.0, ErrorKind::Numeric, std::string(name) + " outside [0,1]: " + fmt(v));
  };
  unit(asr, "attack success rate");
  unit(functionality, "functionality");
  unit(baseline, "baseline accuracy");
  if (avg_pass) unit(*avg_pass, "average PASS");
  for (const auto& c : grid)
    if (c.error.empty()) {
      unit(c.asr, "grid attack success rate");
      unit(c.functionality, "grid functionality");
    }
}

std::string MetricReport::text() const {
  std::ostringstream os;
  os << "attack_success_rate=" << fmt(asr) << "\n"
     << "functionality=" << fmt(functionality) << "\n"
     << "baseline_accuracy=" << fmt(baseline) << "\n"
     << "functionality_drop=" << fmt(baseline - functionality) << "\n";
  if (avg_pass) os << "avg_pass=" << fmt(*avg_pass) << "\n";
  os << "epochs_to_converge=" << (epochs_to_converge ? std::to_string(*epochs_to_converge) : "none") << "\n";
  if (!grid.empty()) os << "grid_cells=" << grid.size() << "\n";
  return os.str();
}

std::string MetricReport::grid_csv() const {
  std::ostringstream os;
  os << "source,target,functionality,asr,status\n";
  for (const auto& c : grid) {
    os << c.source << "," << c.target << ",";
    if (c.error.empty())
      os << fmt(c.functionality) << "," << fmt(c.asr) << ",ok\n";
    else
      os << ",,\"error: " << c.error << "\"\n";
  }
  return os.str();
}

std::vector<std::pair<int, int>> all_pairs(std::size_t classes) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t s = 0; s < classes; ++s)
    for (std::size_t t = 0; t < classes; ++t)
      if (s != t) out.emplace_back(static_cast<int>(s), static_cast<int>(t));
  return out;
}

std::vector<GridCell> sweep_pairs(const PairAttack& attack, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<GridCell> grid;
  for (const auto& [s, t] : pairs) {
    require(s != t, ErrorKind::Config, "sweep pair has source == target (" + std::to_string(s) + ")");
    try {
      GridCell c = attack(s, t);
      c.source = s;
      c.target = t;
      grid.push_back(c);
    } catch (const Error& e) {
      GridCell c;
      c.source = s;
      c.target = t;
      c.error = e.what();
      grid.push_back(c);
    }
  }
  return grid;
}

}  // namespace ibd
