#include "ibd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ibd/error.hpp"

namespace ibd {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2: return "max_pool2";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Flatten: return "flatten";
    case Op::SoftmaxXent: return "softmax_xent";
    case Op::L2Norm: return "l2_norm";
    case Op::LinfPenalty: return "linf_penalty";
    case Op::Select: return "select";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Custom: return "custom";
  }
  return "?";
}

namespace {

std::string where(NodeId id, Op op) {
  return "node #" + std::to_string(id) + " (" + op_name(op) + ")";
}

// Numpy-style broadcasting: shapes are right-aligned, dims must match or be 1.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

std::vector<std::size_t> strides_for(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  const std::size_t off = out.size() - s.size();
  for (std::size_t i = s.size(); i-- > 0;) {
    st[off + i] = s[i] == 1 ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const std::string& ctx) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(ErrorKind::Shape, ctx + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    bc.out[i] = std::max(da, db);
  }
  bc.stride_a = strides_for(a, bc.out);
  bc.stride_b = strides_for(b, bc.out);
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = shape_size(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t oi = 0; oi < n; ++oi) {
    f(oi, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

struct ConvDims {
  std::size_t batch, h, w, cin, kh, kw, cout;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, const std::string& ctx) {
  require(x.rank() == 4, ErrorKind::Shape, ctx + ": input must be NHWC, got " + shape_str(x.shape()));
  require(k.rank() == 4, ErrorKind::Shape, ctx + ": kernel must be [KH,KW,Cin,Cout], got " + shape_str(k.shape()));
  require(k.dim(2) == x.dim(3), ErrorKind::Shape,
          ctx + ": kernel Cin " + std::to_string(k.dim(2)) + " != input channels " + std::to_string(x.dim(3)));
  require(k.dim(0) % 2 == 1 && k.dim(1) % 2 == 1, ErrorKind::Shape, ctx + ": kernel extent must be odd");
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(1), k.dim(3)};
}

// Calls f(out_offset, in_offset, kernel_offset) for every valid (output pixel, kernel tap).
template <class F>
void conv_taps(const ConvDims& d, F&& f) {
  const long ph = static_cast<long>(d.kh / 2), pw = static_cast<long>(d.kw / 2);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t o = ((b * d.h + y) * d.w + x) * d.cout;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const long iy = static_cast<long>(y + ky) - ph;
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const long ix = static_cast<long>(x + kx) - pw;
            if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
            const std::size_t i = ((b * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)) * d.cin;
            const std::size_t k = (ky * d.kw + kx) * d.cin * d.cout;
            f(o, i, k);
          }
        }
      }
}

std::size_t label_at(const Tensor& labels, std::size_t i, std::size_t classes, const std::string& ctx) {
  const double v = labels[i];
  require(v >= 0.0 && v < static_cast<double>(classes) && v == std::floor(v), ErrorKind::Invalid,
          ctx + ": label " + std::to_string(v) + " is not a class index below " + std::to_string(classes));
  return static_cast<std::size_t>(v);
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.ptr() + r * n;
    double* q = p.ptr() + r * n;
    const double m = *std::max_element(z, z + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (q[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < n; ++j) q[j] /= s;
  }
  return p;
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.size() == 0 || dst.shape() != src.shape()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Graph::Node Graph::make_node(Op op, std::vector<NodeId> inputs, double k) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.k = k;
  return n;
}

NodeId Graph::push(Node n) {
  for (NodeId in : n.inputs)
    require(in < nodes_.size(), ErrorKind::Invalid, "graph input id " + std::to_string(in) + " does not precede node");
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::leaf(const std::string& name) {
  require(!leaves_.count(name), ErrorKind::Invalid, "duplicate leaf '" + name + "'");
  Node n = make_node(Op::Leaf, {});
  n.name = name;
  const NodeId id = push(std::move(n));
  leaves_[name] = id;
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) { return push(make_node(Op::Add, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(make_node(Op::Sub, {a, b})); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(make_node(Op::Mul, {a, b})); }
NodeId Graph::scale(NodeId a, double k) { return push(make_node(Op::Scale, {a}, k)); }
NodeId Graph::add_const(NodeId a, double k) { return push(make_node(Op::AddConst, {a}, k)); }
NodeId Graph::matmul(NodeId a, NodeId b) { return push(make_node(Op::MatMul, {a, b})); }
NodeId Graph::conv2d(NodeId x, NodeId kernel, NodeId bias) { return push(make_node(Op::Conv2d, {x, kernel, bias})); }
NodeId Graph::conv2d(NodeId x, NodeId kernel) { return push(make_node(Op::Conv2d, {x, kernel})); }
NodeId Graph::max_pool2(NodeId x) { return push(make_node(Op::MaxPool2, {x})); }
NodeId Graph::relu(NodeId x) { return push(make_node(Op::Relu, {x})); }
NodeId Graph::tanh(NodeId x) { return push(make_node(Op::Tanh, {x})); }
NodeId Graph::sigmoid(NodeId x) { return push(make_node(Op::Sigmoid, {x})); }
NodeId Graph::flatten(NodeId x) { return push(make_node(Op::Flatten, {x})); }
NodeId Graph::softmax_xent(NodeId logits, NodeId labels) { return push(make_node(Op::SoftmaxXent, {logits, labels})); }
NodeId Graph::l2_norm(NodeId x) { return push(make_node(Op::L2Norm, {x})); }
NodeId Graph::linf_penalty(NodeId x, NodeId rho) { return push(make_node(Op::LinfPenalty, {x, rho})); }
NodeId Graph::select(NodeId x, std::vector<std::size_t> indices) {
  require(!indices.empty(), ErrorKind::Invalid, "select needs at least one index");
  Node n = make_node(Op::Select, {x});
  n.indices = std::move(indices);
  return push(std::move(n));
}
NodeId Graph::sum(NodeId x) { return push(make_node(Op::Sum, {x})); }
NodeId Graph::mean(NodeId x) { return push(make_node(Op::Mean, {x})); }

NodeId Graph::custom(CustomOp op, std::vector<NodeId> inputs) {
  require(op.forward && op.backward, ErrorKind::Invalid, "custom op '" + op.name + "' needs forward and backward");
  customs_.push_back(std::move(op));
  Node n = make_node(Op::Custom, std::move(inputs));
  n.custom = static_cast<int>(customs_.size() - 1);
  return push(std::move(n));
}

void Graph::set_output(const std::string& name, NodeId id) {
  require(id < nodes_.size(), ErrorKind::Invalid, "output '" + name + "' refers to unknown node");
  outputs_[name] = id;
}

NodeId Graph::output_id(const std::string& name) const {
  auto it = outputs_.find(name);
  require(it != outputs_.end(), ErrorKind::Invalid, "unknown graph output '" + name + "'");
  return it->second;
}

NodeId Graph::leaf_id(const std::string& name) const {
  auto it = leaves_.find(name);
  require(it != leaves_.end(), ErrorKind::Invalid, "unknown leaf '" + name + "'");
  return it->second;
}

Tensor Graph::compute(NodeId id, const Tape& tape) const {
  const Node& n = nodes_[id];
  const std::string ctx = where(id, n.op);
  auto in = [&](std::size_t i) -> const Tensor& { return tape[n.inputs[i]]; };

  switch (n.op) {
    case Op::Leaf:
      fail(ErrorKind::Invalid, ctx + ": leaf values come from the feed");
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor &a = in(0), &b = in(1);
      const Broadcast bc = broadcast(a.shape(), b.shape(), ctx);
      Tensor out(bc.out);
      double* o = out.ptr();
      const double *pa = a.ptr(), *pb = b.ptr();
      if (n.op == Op::Add)
        for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) { o[oi] = pa[ia] + pb[ib]; });
      else if (n.op == Op::Sub)
        for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) { o[oi] = pa[ia] - pb[ib]; });
      else
        for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) { o[oi] = pa[ia] * pb[ib]; });
      return out;
    }
    case Op::Scale:
    case Op::AddConst: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = n.op == Op::Scale ? v * n.k : v + n.k;
      return out;
    }
    case Op::MatMul: {
      const Tensor &a = in(0), &b = in(1);
      require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorKind::Shape,
              ctx + ": cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
      const std::size_t m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
      Tensor out(Shape{m, nn});
      for (std::size_t i = 0; i < m; ++i) {
        double* o = out.ptr() + i * nn;
        for (std::size_t k = 0; k < kk; ++k) {
          const double av = a[i * kk + k];
          if (av == 0.0) continue;
          const double* brow = b.ptr() + k * nn;
          for (std::size_t j = 0; j < nn; ++j) o[j] += av * brow[j];
        }
      }
      return out;
    }
    case Op::Conv2d: {
      const Tensor &x = in(0), &k = in(1);
      const ConvDims d = conv_dims(x, k, ctx);
      Tensor out(Shape{d.batch, d.h, d.w, d.cout});
      if (n.inputs.size() == 3) {
        const Tensor& bias = in(2);
        require(bias.size() == d.cout, ErrorKind::Shape, ctx + ": bias length must equal Cout");
        for (std::size_t p = 0; p < d.batch * d.h * d.w; ++p)
          std::copy(bias.ptr(), bias.ptr() + d.cout, out.ptr() + p * d.cout);
      }
      double* o = out.ptr();
      const double *px = x.ptr(), *pk = k.ptr();
      conv_taps(d, [&](std::size_t oo, std::size_t io, std::size_t ko) {
        for (std::size_t ci = 0; ci < d.cin; ++ci) {
          const double v = px[io + ci];
          if (v == 0.0) continue;
          const double* w = pk + ko + ci * d.cout;
          for (std::size_t co = 0; co < d.cout; ++co) o[oo + co] += v * w[co];
        }
      });
      return out;
    }
    case Op::MaxPool2: {
      const Tensor& x = in(0);
      require(x.rank() == 4 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0, ErrorKind::Shape,
              ctx + ": needs NHWC input with even H and W, got " + shape_str(x.shape()));
      const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
      Tensor out(Shape{B, H / 2, W / 2, C});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < H / 2; ++y)
          for (std::size_t xx = 0; xx < W / 2; ++xx)
            for (std::size_t c = 0; c < C; ++c) {
              double m = x[((b * H + 2 * y) * W + 2 * xx) * C + c];
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx)
                  m = std::max(m, x[((b * H + 2 * y + dy) * W + 2 * xx + dx) * C + c]);
              out[((b * (H / 2) + y) * (W / 2) + xx) * C + c] = m;
            }
      return out;
    }
    case Op::Relu: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case Op::Tanh: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = std::tanh(v);
      return out;
    }
    case Op::Sigmoid: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
      return out;
    }
    case Op::Flatten: {
      const Tensor& x = in(0);
      require(x.rank() >= 1, ErrorKind::Shape, ctx + ": cannot flatten a scalar");
      return x.reshaped(Shape{x.dim(0), x.size() / std::max<std::size_t>(x.dim(0), 1)});
    }
    case Op::SoftmaxXent: {
      const Tensor &z = in(0), &labels = in(1);
      require(z.rank() == 2 && labels.size() == z.dim(0), ErrorKind::Shape,
              ctx + ": logits " + shape_str(z.shape()) + " vs labels " + shape_str(labels.shape()));
      const std::size_t rows = z.dim(0), nc = z.dim(1);
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = z.ptr() + r * nc;
        const double m = *std::max_element(row, row + nc);
        double s = 0.0;
        for (std::size_t j = 0; j < nc; ++j) s += std::exp(row[j] - m);
        total += m + std::log(s) - row[label_at(labels, r, nc, ctx)];
      }
      return Tensor::scalar(total / static_cast<double>(rows));
    }
    case Op::L2Norm:
      return Tensor::scalar(ibd::l2_norm(in(0).data()));
    case Op::LinfPenalty: {
      const double rho = in(1).item();
      double s = 0.0;
      for (double v : in(0).data()) s += std::max(std::abs(v) - rho, 0.0);
      return Tensor::scalar(s);
    }
    case Op::Select: {
      const Tensor& x = in(0);
      require(x.rank() >= 1, ErrorKind::Shape, ctx + ": cannot select from a scalar");
      const std::size_t last = x.shape().back(), outer = x.size() / last, k = n.indices.size();
      for (auto i : n.indices)
        require(i < last, ErrorKind::Shape, ctx + ": index " + std::to_string(i) + " out of range " + std::to_string(last));
      Shape s = x.shape();
      s.back() = k;
      Tensor out(s);
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * last + n.indices[j]];
      return out;
    }
    case Op::Sum:
    case Op::Mean: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      if (n.op == Op::Mean) s /= static_cast<double>(in(0).size());
      return Tensor::scalar(s);
    }
    case Op::Custom: {
      std::vector<const Tensor*> ins;
      for (NodeId i : n.inputs) ins.push_back(&tape[i]);
      return customs_[static_cast<std::size_t>(n.custom)].forward(ins);
    }
  }
  fail(ErrorKind::Invalid, ctx + ": unhandled op");
}

Tape Graph::forward(const Feed& feed) const {
  Tape tape;
  tape.values.reserve(nodes_.size());
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::Leaf) {
      const Tensor* t = feed.find(n.name);
      require(t != nullptr, ErrorKind::Invalid, "leaf '" + n.name + "' is not bound");
      tape.values.push_back(*t);
    } else {
      tape.values.push_back(compute(id, tape));
    }
    if (!tape.values.back().all_finite())
      fail(ErrorKind::Numeric, where(id, n.op) + (n.name.empty() ? "" : " '" + n.name + "'") +
                                   " holds a non-finite value");
  }
  return tape;
}

std::map<std::string, Tensor> Graph::evaluate(const Feed& feed) const {
  const Tape tape = forward(feed);
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out[name] = tape[id];
  return out;
}

void Graph::propagate(NodeId id, const Tape& tape, const Tensor& g, std::vector<Tensor>& grads,
                      const std::vector<char>& needs) const {
  const Node& n = nodes_[id];
  const std::string ctx = where(id, n.op);
  auto in = [&](std::size_t i) -> const Tensor& { return tape[n.inputs[i]]; };
  auto want = [&](std::size_t i) { return needs[n.inputs[i]] != 0; };
  auto send = [&](std::size_t i, const Tensor& t) { accumulate(grads[n.inputs[i]], t); };

  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor &a = in(0), &b = in(1);
      const Broadcast bc = broadcast(a.shape(), b.shape(), ctx);
      const double* pg = g.ptr();
      if (want(0)) {
        Tensor ga(a.shape());
        double* p = ga.ptr();
        if (n.op == Op::Mul)
          for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) { p[ia] += pg[oi] * b[ib]; });
        else
          for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t) { p[ia] += pg[oi]; });
        send(0, ga);
      }
      if (want(1)) {
        Tensor gb(b.shape());
        double* p = gb.ptr();
        if (n.op == Op::Mul)
          for_each_broadcast(bc, [&](std::size_t oi, std::size_t ia, std::size_t ib) { p[ib] += pg[oi] * a[ia]; });
        else if (n.op == Op::Sub)
          for_each_broadcast(bc, [&](std::size_t oi, std::size_t, std::size_t ib) { p[ib] -= pg[oi]; });
        else
          for_each_broadcast(bc, [&](std::size_t oi, std::size_t, std::size_t ib) { p[ib] += pg[oi]; });
        send(1, gb);
      }
      return;
    }
    case Op::Scale: {
      Tensor ga = g;
      for (auto& v : ga.data()) v *= n.k;
      send(0, ga);
      return;
    }
    case Op::AddConst:
      send(0, g);
      return;
    case Op::MatMul: {
      const Tensor &a = in(0), &b = in(1);
      const std::size_t m = a.dim(0), kk = a.dim(1), nn = b.dim(1);
      if (want(0)) {
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < kk; ++k) {
            const double* brow = b.ptr() + k * nn;
            const double* grow = g.ptr() + i * nn;
            double s = 0.0;
            for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
            ga[i * kk + k] = s;
          }
        send(0, ga);
      }
      if (want(1)) {
        Tensor gb(b.shape());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < kk; ++k) {
            const double av = a[i * kk + k];
            if (av == 0.0) continue;
            const double* grow = g.ptr() + i * nn;
            double* gbrow = gb.ptr() + k * nn;
            for (std::size_t j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
          }
        send(1, gb);
      }
      return;
    }
    case Op::Conv2d: {
      const Tensor &x = in(0), &k = in(1);
      const ConvDims d = conv_dims(x, k, ctx);
      const double* pg = g.ptr();
      if (want(0)) {
        Tensor gx(x.shape());
        double* p = gx.ptr();
        const double* pk = k.ptr();
        conv_taps(d, [&](std::size_t oo, std::size_t io, std::size_t ko) {
          const double* go = pg + oo;
          for (std::size_t ci = 0; ci < d.cin; ++ci) {
            const double* w = pk + ko + ci * d.cout;
            double s = 0.0;
            for (std::size_t co = 0; co < d.cout; ++co) s += go[co] * w[co];
            p[io + ci] += s;
          }
        });
        send(0, gx);
      }
      if (want(1)) {
        Tensor gk(k.shape());
        double* p = gk.ptr();
        const double* px = x.ptr();
        conv_taps(d, [&](std::size_t oo, std::size_t io, std::size_t ko) {
          const double* go = pg + oo;
          for (std::size_t ci = 0; ci < d.cin; ++ci) {
            const double v = px[io + ci];
            if (v == 0.0) continue;
            double* w = p + ko + ci * d.cout;
            for (std::size_t co = 0; co < d.cout; ++co) w[co] += v * go[co];
          }
        });
        send(1, gk);
      }
      if (n.inputs.size() == 3 && want(2)) {
        Tensor gbias(in(2).shape());
        for (std::size_t p = 0; p < d.batch * d.h * d.w; ++p)
          for (std::size_t co = 0; co < d.cout; ++co) gbias[co] += pg[p * d.cout + co];
        send(2, gbias);
      }
      return;
    }
    case Op::MaxPool2: {
      const Tensor& x = in(0);
      const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
      Tensor gx(x.shape());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t y = 0; y < H / 2; ++y)
          for (std::size_t xx = 0; xx < W / 2; ++xx)
            for (std::size_t c = 0; c < C; ++c) {
              // first maximal element in scan order receives the gradient
              std::size_t best = ((b * H + 2 * y) * W + 2 * xx) * C + c;
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const std::size_t at = ((b * H + 2 * y + dy) * W + 2 * xx + dx) * C + c;
                  if (x[at] > x[best]) best = at;
                }
              gx[best] += g[((b * (H / 2) + y) * (W / 2) + xx) * C + c];
            }
      send(0, gx);
      return;
    }
    case Op::Relu: {
      const Tensor& x = in(0);
      Tensor gx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
      send(0, gx);
      return;
    }
    case Op::Tanh:
    case Op::Sigmoid: {
      const Tensor& y = tape[id];
      Tensor gx(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i)
        gx[i] = g[i] * (n.op == Op::Tanh ? 1.0 - y[i] * y[i] : y[i] * (1.0 - y[i]));
      send(0, gx);
      return;
    }
    case Op::Flatten:
      send(0, g.reshaped(in(0).shape()));
      return;
    case Op::SoftmaxXent: {
      const Tensor &z = in(0), &labels = in(1);
      if (want(0)) {
        const std::size_t rows = z.dim(0), nc = z.dim(1);
        Tensor gz = softmax_rows(z);
        const double s = g.item() / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          gz[r * nc + label_at(labels, r, nc, ctx)] -= 1.0;
          for (std::size_t j = 0; j < nc; ++j) gz[r * nc + j] *= s;
        }
        send(0, gz);
      }
      return;  // labels are not differentiable
    }
    case Op::L2Norm: {
      const Tensor& x = in(0);
      const double norm = tape[id].item();
      Tensor gx(x.shape());
      if (norm > 0.0)
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g.item() * x[i] / norm;
      send(0, gx);
      return;
    }
    case Op::LinfPenalty: {
      const Tensor& x = in(0);
      const double rho = in(1).item();
      Tensor gx(x.shape());
      double active = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (std::abs(x[i]) > rho) {
          gx[i] = g.item() * (x[i] > 0.0 ? 1.0 : -1.0);
          active += 1.0;
        }
      if (want(0)) send(0, gx);
      if (want(1)) send(1, Tensor::scalar(-g.item() * active));
      return;
    }
    case Op::Select: {
      const Tensor& x = in(0);
      const std::size_t last = x.shape().back(), outer = x.size() / last, k = n.indices.size();
      Tensor gx(x.shape());
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < k; ++j) gx[r * last + n.indices[j]] += g[r * k + j];
      send(0, gx);
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      const Tensor& x = in(0);
      const double v = n.op == Op::Mean ? g.item() / static_cast<double>(x.size()) : g.item();
      send(0, Tensor(x.shape(), v));
      return;
    }
    case Op::Custom: {
      std::vector<const Tensor*> ins;
      for (NodeId i : n.inputs) ins.push_back(&tape[i]);
      auto gs = customs_[static_cast<std::size_t>(n.custom)].backward(ins, tape[id], g);
      require(gs.size() == n.inputs.size(), ErrorKind::Invalid, ctx + ": backward returned wrong arity");
      for (std::size_t i = 0; i < gs.size(); ++i)
        if (want(i)) {
          require(gs[i].shape() == in(i).shape(), ErrorKind::Shape, ctx + ": gradient shape mismatch");
          send(i, gs[i]);
        }
      return;
    }
  }
}

std::map<std::string, Tensor> Graph::backward(const Tape& tape, NodeId loss, const std::vector<std::string>& wrt) const {
  require(loss < nodes_.size(), ErrorKind::Invalid, "loss node out of range");
  require(tape[loss].size() == 1, ErrorKind::Shape,
          "loss " + where(loss, nodes_[loss].op) + " is not scalar: " + shape_str(tape[loss].shape()));

  // needs[i]: node i lies on a path from a wrt leaf.
  std::vector<char> needs(nodes_.size(), 0);
  for (const auto& name : wrt) needs[leaf_id(name)] = 1;
  for (NodeId id = 0; id < nodes_.size(); ++id)
    for (NodeId in : nodes_[id].inputs)
      if (needs[in]) needs[id] = 1;

  std::vector<Tensor> grads(nodes_.size(), Tensor(Shape{0}));
  if (needs[loss]) {
    grads[loss] = Tensor(tape[loss].shape(), 1.0);
    for (NodeId id = loss + 1; id-- > 0;) {
      if (!needs[id] || grads[id].size() == 0 || nodes_[id].op == Op::Leaf) continue;
      propagate(id, tape, grads[id], grads, needs);
      grads[id] = Tensor(Shape{0});
    }
  }

  std::map<std::string, Tensor> out;
  for (const auto& name : wrt) {
    const NodeId id = leaf_id(name);
    Tensor& g = grads[id];
    out[name] = g.size() == 0 && tape[id].size() != 0 ? Tensor(tape[id].shape()) : g;
    if (!out[name].all_finite()) fail(ErrorKind::Numeric, "gradient for '" + name + "' is non-finite");
  }
  return out;
}

std::map<std::string, Tensor> Graph::gradient(const Feed& feed, const std::string& loss,
                                              const std::vector<std::string>& wrt) const {
  for (const auto& name : wrt) (void)leaf_id(name);
  return backward(forward(feed), output_id(loss), wrt);
}

double gradient_check(const Graph& graph, const Feed& feed, const std::string& loss,
                      const std::vector<std::string>& wrt, double eps) {
  require(eps > 0.0, ErrorKind::Invalid, "gradient_check eps must be positive");
  const auto analytic = graph.gradient(feed, loss, wrt);
  const NodeId loss_id = graph.output_id(loss);
  double worst = 0.0;
  for (const auto& name : wrt) {
    const Tensor* bound = feed.find(name);
    require(bound != nullptr, ErrorKind::Invalid, "leaf '" + name + "' is not bound");
    Tensor probe = *bound;
    Feed local = feed;
    local.bind(name, probe);
    const Tensor& ga = analytic.at(name);
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double orig = probe[i];
      probe[i] = orig + eps;
      const double up = graph.forward(local)[loss_id].item();
      probe[i] = orig - eps;
      const double down = graph.forward(local)[loss_id].item();
      probe[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(ga[i]), std::abs(fd), 1e-12});
      worst = std::max(worst, std::abs(ga[i] - fd) / denom);
    }
  }
  return worst;
}

}  // namespace ibd
