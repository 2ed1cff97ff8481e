#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "ibd/error.hpp"
#include "ibd/graph.hpp"
#include "ibd/optim.hpp"
#include "support.hpp"

using namespace ibd;
using ibd::test::random_tensor;

namespace {

double eval_scalar(const Graph& g, const Feed& f, const std::string& out) { return g.evaluate(f).at(out).item(); }

// Brute-force NHWC "same" convolution used as the reference for the graph op.
Tensor conv_reference(const Tensor& x, const Tensor& k, const Tensor& bias) {
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const std::size_t KH = k.dim(0), KW = k.dim(1), Co = k.dim(3);
  Tensor out(Shape{B, H, W, Co});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t co = 0; co < Co; ++co) {
          double s = bias[co];
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx)
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                const long iy = long(y + ky) - long(KH / 2), ix = long(xx + kx) - long(KW / 2);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                s += x[((b * H + iy) * W + ix) * Ci + ci] * k[((ky * KW + kx) * Ci + ci) * Co + co];
              }
          out[((b * H + y) * W + xx) * Co + co] = s;
        }
  return out;
}

}  // namespace

TEST_CASE("evaluate: closed-form examples") {
  Graph g;
  auto x = g.leaf("x");
  g.set_output("relu", g.relu(x));
  const Tensor xv = Tensor::vector({-1, 0, 2});
  Feed f;
  f.bind("x", xv);
  CHECK(g.evaluate(f).at("relu") == Tensor::vector({0, 0, 2}));

  Graph mm;
  auto a = mm.leaf("a"), b = mm.leaf("b");
  mm.set_output("y", mm.matmul(a, b));
  const Tensor id(Shape{1, 1}, 1.0), five(Shape{1, 1}, 5.0);
  Feed fm;
  fm.bind("a", id).bind("b", five);
  CHECK(mm.evaluate(fm).at("y")[0] == 5.0);

  Graph ce;
  auto z = ce.leaf("z"), y = ce.leaf("y");
  ce.set_output("loss", ce.softmax_xent(z, y));
  const Tensor logits(Shape{1, 2}, 0.0), label(Shape{1}, 0.0);
  Feed fc;
  fc.bind("z", logits).bind("y", label);
  CHECK(eval_scalar(ce, fc, "loss") == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("evaluate: errors name the node") {
  Graph g;
  auto a = g.leaf("a"), b = g.leaf("b");
  g.set_output("y", g.matmul(a, b));
  const Tensor ta(Shape{2, 3}), tb(Shape{2, 3});
  Feed f;
  f.bind("a", ta).bind("b", tb);
  try {
    g.evaluate(f);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("node #2 (matmul)") != std::string::npos);
  }

  Graph h;
  auto x = h.leaf("x");
  h.set_output("y", h.scale(x, 1e308));
  h.set_output("z", h.scale(h.output_id("y"), 10.0));
  const Tensor big = Tensor::vector({10.0});
  Feed fh;
  fh.bind("x", big);
  try {
    h.evaluate(fh);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
    CHECK(std::string(e.what()).find("node #1") != std::string::npos);
  }

  Feed unbound;
  CHECK_THROWS_AS(g.evaluate(unbound), Error);
}

TEST_CASE("gradient: analytic examples, unreached leaves, unknown names") {
  Graph g;
  auto x = g.leaf("x");
  auto unused = g.leaf("unused");
  (void)unused;
  g.set_output("sq", g.sum(g.mul(x, x)));
  g.set_output("r", g.sum(g.relu(x)));
  const Tensor three = Tensor::vector({3.0});
  const Tensor u(Shape{2, 2}, 7.0);
  Feed f;
  f.bind("x", three).bind("unused", u);
  auto gs = g.gradient(f, "sq", {"x", "unused"});
  CHECK(gs.at("x")[0] == 6.0);
  CHECK(gs.at("unused") == Tensor(Shape{2, 2}));

  const Tensor neg = Tensor::vector({-1.0}), zero = Tensor::vector({0.0});
  Feed fn;
  fn.bind("x", neg).bind("unused", u);
  CHECK(g.gradient(fn, "r", {"x"}).at("x")[0] == 0.0);
  Feed fz;
  fz.bind("x", zero).bind("unused", u);
  CHECK(g.gradient(fz, "r", {"x"}).at("x")[0] == 0.0);  // subgradient at the kink

  CHECK_THROWS_AS(g.gradient(f, "sq", {"nope"}), Error);
}

TEST_CASE("conv2d matches a brute-force quadruple loop") {
  std::mt19937_64 rng(11);
  Graph g;
  auto x = g.leaf("x"), k = g.leaf("k"), b = g.leaf("b");
  g.set_output("y", g.conv2d(x, k, b));
  for (int rep = 0; rep < 5; ++rep) {
    const Tensor tx = random_tensor({2, 8, 8, 2}, rng), tk = random_tensor({3, 3, 2, 4}, rng),
                 tb = random_tensor({4}, rng);
    Feed f;
    f.bind("x", tx).bind("k", tk).bind("b", tb);
    const Tensor got = g.evaluate(f).at("y");
    const Tensor want = conv_reference(tx, tk, tb);
    REQUIRE(got.shape() == want.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("evaluate and gradient are pure") {
  std::mt19937_64 rng(5);
  const ModelParams m = build_model(ibd::test::tiny_arch());
  Graph g;
  auto in = g.leaf("input");
  auto net = append_network(g, m.arch, in);
  g.set_output("loss", g.softmax_xent(net.logits, g.leaf("labels")));
  const Tensor x = random_tensor({3, 4, 4, 2}, rng), y = Tensor::vector({0, 1, 2});
  Feed f;
  f.bind("input", x).bind("labels", y).bind(m.weights);
  CHECK(g.evaluate(f) == g.evaluate(f));
  CHECK(g.gradient(f, "loss", {"input", "conv0.w"}) == g.gradient(f, "loss", {"input", "conv0.w"}));
}

TEST_CASE("gradient_check: linear loss is exact") {
  std::mt19937_64 rng(2);
  Graph g;
  auto w = g.leaf("w"), x = g.leaf("x");
  g.set_output("loss", g.sum(g.mul(w, x)));
  const Tensor tw = random_tensor({6}, rng), tx = random_tensor({6}, rng);
  Feed f;
  f.bind("w", tw).bind("x", tx);
  CHECK(gradient_check(g, f, "loss", {"w", "x"}, 1e-5) < 1e-9);
}

TEST_CASE("gradient_check: corrupted backward rule is caught") {
  std::mt19937_64 rng(8);
  CustomOp bad_square{"bad_square",
                      [](const std::vector<const Tensor*>& in) {
                        Tensor out = *in[0];
                        for (auto& v : out.data()) v *= v;
                        return out;
                      },
                      [](const std::vector<const Tensor*>& in, const Tensor&, const Tensor& g) {
                        Tensor gx = g;
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 3.0 * (*in[0])[i];  // should be 2x
                        return std::vector<Tensor>{gx};
                      }};
  Graph g;
  auto x = g.leaf("x");
  g.set_output("loss", g.sum(g.custom(bad_square, {x})));
  const Tensor tx = random_tensor({5}, rng, 0.5, 1.5);
  Feed f;
  f.bind("x", tx);
  CHECK(gradient_check(g, f, "loss", {"x"}, 1e-5) > 1e-2);
}

TEST_CASE("gradient_check: every primitive at 100 kink-avoiding points") {
  for (const auto& c : ibd::test::primitive_cases()) {
    const std::string name = c.name;
    CAPTURE(name);
    CHECK(ibd::test::worst_primitive_error(c, 100) < 1e-5);
  }
}

TEST_CASE("gradient_check: victim network at random kink-avoiding points") {
  CHECK(ibd::test::worst_network_error(20) < 1e-5);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves params unchanged and advances the step") {
    ParamSet p, g;
    p.add("w", Tensor::vector({1.5, -2.0}));
    g.add("w", Tensor(Shape{2}));
    AdamState s(AdamConfig{.lr = 0.1});
    adam_step(p, g, s);
    CHECK(p.at("w") == Tensor::vector({1.5, -2.0}));
    CHECK(s.step == 1);
    adam_step(p, g, s);
    CHECK(s.step == 2);
  }
  SUBCASE("first step with unit gradient moves by lr") {
    ParamSet p, g;
    p.add("w", Tensor::scalar(0.0));
    g.add("w", Tensor::scalar(1.0));
    AdamState s(AdamConfig{.lr = 0.1});
    adam_step(p, g, s);
    // m_hat = 1, v_hat = 1 after bias correction
    CHECK(p.at("w").item() == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("non-finite gradient is rejected without side effects") {
    ParamSet p, g;
    p.add("w", Tensor::scalar(1.0));
    g.add("w", Tensor::scalar(std::nan("")));
    AdamState s;
    CHECK_THROWS_AS(adam_step(p, g, s), Error);
    CHECK(s.step == 0);
    CHECK(p.at("w").item() == 1.0);
  }
  SUBCASE("identical runs give identical trajectories") {
    auto run = [] {
      std::mt19937_64 rng(9);
      ParamSet p;
      p.add("w", random_tensor({4}, rng));
      AdamState s(AdamConfig{.lr = 0.05});
      for (int i = 0; i < 50; ++i) {
        ParamSet g;
        g.add("w", random_tensor({4}, rng));
        adam_step(p, g, s);
      }
      return p;
    };
    CHECK(run() == run());
  }
}
