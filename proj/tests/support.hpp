#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ibd/graph.hpp"
#include "ibd/model.hpp"

namespace ibd::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> U(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = U(rng);
  return t;
}

// Smallest distance of any relu input from its kink and any max-pool window's
// runner-up from its maximum, over a forward tape.
inline double kink_margin(const Graph& g, const Tape& tape) {
  double margin = std::numeric_limits<double>::infinity();
  for (NodeId id = 0; id < g.node_count(); ++id) {
    if (g.op(id) == Op::Relu) {
      for (double v : tape[g.inputs(id)[0]].data()) margin = std::min(margin, std::abs(v));
    } else if (g.op(id) == Op::MaxPool2) {
      const Tensor& x = tape[g.inputs(id)[0]];
      const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < H; y += 2)
          for (std::size_t xx = 0; xx < W; xx += 2)
            for (std::size_t c = 0; c < C; ++c) {
              double v[4];
              int k = 0;
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) v[k++] = x[((b * H + y + dy) * W + xx + dx) * C + c];
              std::sort(v, v + 4);
              // all-zero windows come from dead relus and are flat, not kinks
              if (v[3] > 0.0) margin = std::min(margin, v[3] - v[2]);
            }
    }
  }
  return margin;
}

// A scaled-down instance of the victim architecture, small enough for exhaustive finite differences.
inline ArchConfig tiny_arch(std::uint64_t seed = 3) {
  ArchConfig a;
  a.input = {4, 4, 2};
  a.conv = {{3, 3}, {4, 3}};
  a.hidden = 5;
  a.classes = 3;
  a.seed = seed;
  return a;
}

struct PrimitiveCase {
  const char* name;
  // Builds loss = <op(x...), r> (or the scalar op itself) and the inputs to check.
  std::function<void(Graph&, std::mt19937_64&, ParamSet&)> build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"add", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("a", random_tensor({2, 3}, rng));
         p.add("b", random_tensor({3}, rng));
         p.add("r", random_tensor({2, 3}, rng));
         g.set_output("loss", g.sum(g.mul(g.add(g.leaf("a"), g.leaf("b")), g.leaf("r"))));
       }},
      {"sub", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("a", random_tensor({2, 3}, rng));
         p.add("b", random_tensor({2, 1}, rng));
         p.add("r", random_tensor({2, 3}, rng));
         g.set_output("loss", g.sum(g.mul(g.sub(g.leaf("a"), g.leaf("b")), g.leaf("r"))));
       }},
      {"mul (mask broadcast)", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("a", random_tensor({2, 3, 3, 2}, rng));
         p.add("b", random_tensor({3, 3, 1}, rng));
         p.add("r", random_tensor({2, 3, 3, 2}, rng));
         g.set_output("loss", g.sum(g.mul(g.mul(g.leaf("a"), g.leaf("b")), g.leaf("r"))));
       }},
      {"scale+add_const", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("a", random_tensor({4}, rng));
         p.add("r", random_tensor({4}, rng));
         g.set_output("loss", g.sum(g.mul(g.add_const(g.scale(g.leaf("a"), -2.5), 0.7), g.leaf("r"))));
       }},
      {"matmul", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("a", random_tensor({3, 4}, rng));
         p.add("b", random_tensor({4, 2}, rng));
         p.add("r", random_tensor({3, 2}, rng));
         g.set_output("loss", g.sum(g.mul(g.matmul(g.leaf("a"), g.leaf("b")), g.leaf("r"))));
       }},
      {"conv2d", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({2, 4, 4, 2}, rng));
         p.add("k", random_tensor({3, 3, 2, 3}, rng));
         p.add("bias", random_tensor({3}, rng));
         p.add("r", random_tensor({2, 4, 4, 3}, rng));
         g.set_output("loss",
                      g.sum(g.mul(g.conv2d(g.leaf("x"), g.leaf("k"), g.leaf("bias")), g.leaf("r"))));
       }},
      {"max_pool2", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({1, 4, 4, 2}, rng));
         p.add("r", random_tensor({1, 2, 2, 2}, rng));
         g.set_output("loss", g.sum(g.mul(g.max_pool2(g.leaf("x")), g.leaf("r"))));
       }},
      {"relu", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({6}, rng));
         p.add("r", random_tensor({6}, rng));
         g.set_output("loss", g.sum(g.mul(g.relu(g.leaf("x")), g.leaf("r"))));
       }},
      {"tanh", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({6}, rng, -2, 2));
         p.add("r", random_tensor({6}, rng));
         g.set_output("loss", g.sum(g.mul(g.tanh(g.leaf("x")), g.leaf("r"))));
       }},
      {"sigmoid", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({6}, rng, -3, 3));
         p.add("r", random_tensor({6}, rng));
         g.set_output("loss", g.sum(g.mul(g.sigmoid(g.leaf("x")), g.leaf("r"))));
       }},
      {"softmax_xent", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("z", random_tensor({3, 4}, rng, -2, 2));
         p.add("labels", Tensor::vector({0, 3, 1}));
         g.set_output("loss", g.softmax_xent(g.leaf("z"), g.leaf("labels")));
       }},
      {"l2_norm", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({5}, rng));
         g.set_output("loss", g.l2_norm(g.leaf("x")));
       }},
      {"linf_penalty", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({8}, rng));
         p.add("rho", Tensor::scalar(0.4));
         g.set_output("loss", g.linf_penalty(g.leaf("x"), g.leaf("rho")));
       }},
      {"select+flatten", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({2, 2, 3}, rng));
         p.add("r", random_tensor({2, 2}, rng));
         g.set_output("loss", g.sum(g.mul(g.select(g.flatten(g.leaf("x")), {4, 1}), g.leaf("r"))));
       }},
      {"mean", [](Graph& g, std::mt19937_64& rng, ParamSet& p) {
         p.add("x", random_tensor({7}, rng));
         const NodeId x = g.leaf("x");
         g.set_output("loss", g.mean(g.mul(x, x)));
       }},
  };
}

// Worst relative error over `points` random draws that keep clear of every kink.
inline double worst_primitive_error(const PrimitiveCase& c, int points) {
  std::mt19937_64 rng(1234);
  double worst = 0.0;
  int accepted = 0;
  while (accepted < points) {
    Graph g;
    ParamSet p;
    c.build(g, rng, p);
    Feed f;
    f.bind(p);
    const Tape tape = g.forward(f);
    if (kink_margin(g, tape) < 1e-3) continue;
    if (std::string(c.name) == "linf_penalty") {
      bool near = false;
      for (double v : p.at("x").data()) near |= std::abs(std::abs(v) - 0.4) < 1e-3;
      if (near) continue;
    }
    std::vector<std::string> wrt;
    for (const auto& [name, t] : p)
      if (name != "labels" && name != "rho") wrt.push_back(name);
    worst = std::max(worst, gradient_check(g, f, "loss", wrt, 1e-5));
    ++accepted;
  }
  return worst;
}

// Same for the whole victim network, input and every parameter, over freshly seeded models.
inline double worst_network_error(int points) {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  int accepted = 0;
  for (std::uint64_t seed = 1; accepted < points; ++seed) {
    const ModelParams m = build_model(tiny_arch(seed));
    Graph g;
    auto net = append_network(g, m.arch, g.leaf("input"));
    g.set_output("loss", g.softmax_xent(net.logits, g.leaf("labels")));
    const Tensor x = random_tensor({2, 4, 4, 2}, rng, 0.0, 1.0), y = Tensor::vector({1, 2});
    Feed f;
    f.bind("input", x).bind("labels", y).bind(m.weights);
    if (kink_margin(g, g.forward(f)) < 1e-3) continue;
    std::vector<std::string> wrt{"input"};
    for (const auto& [name, t] : m.weights) wrt.push_back(name);
    // some entries are ~1e-6; a smaller step drowns them in rounding noise of the O(1) loss
    worst = std::max(worst, gradient_check(g, f, "loss", wrt, 1e-4));
    ++accepted;
  }
  return worst;
}

}  // namespace ibd::test
