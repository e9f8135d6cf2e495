#include "isoray/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "kernels.hpp"

namespace isoray {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::MatMul: return "matmul";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Sum: return "sum";
    case OpKind::Scale: return "scale";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::Custom: return "custom";
  }
  return "?";
}

namespace {

std::atomic<std::uint64_t> g_nodes_created{0};

[[noreturn]] void shape_error(OpKind k, const std::string& detail) {
  throw std::invalid_argument(std::string(op_name(k)) + ": " + detail);
}

void require_arity(OpKind k, const std::vector<Tensor>& ins, std::size_t n) {
  if (ins.size() != n)
    shape_error(k, "expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(ins.size()));
}

// forward evaluation shared by recorded and constant-only paths
Tensor forward_eval(OpKind k, const std::vector<Tensor>& ins, const OpMeta& meta) {
  switch (k) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      require_arity(k, ins, 2);
      if (ins[0].shape != ins[1].shape)
        shape_error(k, "shape mismatch " + shape_str(ins[0].shape) + " vs " +
                           shape_str(ins[1].shape));
      Tensor out(ins[0].shape, ins[0].values);
      const auto& b = ins[1].values;
      if (k == OpKind::Add)
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b[i];
      else if (k == OpKind::Sub)
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= b[i];
      else
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= b[i];
      return out;
    }
    case OpKind::MatMul: {
      require_arity(k, ins, 2);
      if (ins[0].shape.size() != 2 || ins[1].shape.size() != 2 ||
          ins[0].shape[1] != ins[1].shape[0])
        shape_error(k, "incompatible shapes " + shape_str(ins[0].shape) +
                           " x " + shape_str(ins[1].shape));
      const std::size_t m = ins[0].shape[0], kk = ins[0].shape[1],
                        n = ins[1].shape[1];
      Tensor out = Tensor::zeros({m, n});
      kern::matmul_nn(ins[0].values.data(), ins[1].values.data(),
                      out.values.data(), m, kk, n);
      return out;
    }
    case OpKind::Relu: {
      require_arity(k, ins, 1);
      Tensor out(ins[0].shape, ins[0].values);
      for (double& v : out.values) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case OpKind::Sigmoid: {
      require_arity(k, ins, 1);
      Tensor out(ins[0].shape, ins[0].values);
      for (double& v : out.values) v = 1.0 / (1.0 + std::exp(-v));
      return out;
    }
    case OpKind::Sum: {
      require_arity(k, ins, 1);
      double s = 0.0;
      for (double v : ins[0].values) s += v;
      return Tensor({1}, {s});
    }
    case OpKind::Scale: {
      require_arity(k, ins, 1);
      Tensor out(ins[0].shape, ins[0].values);
      for (double& v : out.values) v *= meta.alpha;
      return out;
    }
    case OpKind::Concat: {
      if (ins.empty()) shape_error(k, "needs at least one input");
      const std::size_t rank = ins[0].shape.size();
      if (rank < 1 || rank > 2) shape_error(k, "supports rank 1 or 2 only");
      const int axis = meta.axis;
      if (axis < 0 || axis >= static_cast<int>(rank))
        shape_error(k, "axis " + std::to_string(axis) + " out of range for rank " +
                           std::to_string(rank));
      std::size_t total_axis = 0;
      for (const Tensor& t : ins) {
        if (t.shape.size() != rank)
          shape_error(k, "rank mismatch " + shape_str(t.shape) + " vs " +
                             shape_str(ins[0].shape));
        for (std::size_t d = 0; d < rank; ++d)
          if (d != static_cast<std::size_t>(axis) && t.shape[d] != ins[0].shape[d])
            shape_error(k, "non-axis dim mismatch " + shape_str(t.shape) +
                               " vs " + shape_str(ins[0].shape));
        total_axis += t.shape[static_cast<std::size_t>(axis)];
      }
      std::vector<std::size_t> oshape = ins[0].shape;
      oshape[static_cast<std::size_t>(axis)] = total_axis;
      Tensor out = Tensor::zeros(oshape);
      if (rank == 1 || axis == 0) {
        std::size_t off = 0;
        for (const Tensor& t : ins) {
          std::copy(t.values.begin(), t.values.end(), out.values.begin() + off);
          off += t.values.size();
        }
      } else {
        const std::size_t rowsn = oshape[0];
        std::size_t coff = 0;
        for (const Tensor& t : ins) {
          const std::size_t tc = t.shape[1];
          for (std::size_t r = 0; r < rowsn; ++r)
            for (std::size_t c = 0; c < tc; ++c)
              out.values[r * total_axis + coff + c] = t.values[r * tc + c];
          coff += tc;
        }
      }
      return out;
    }
    case OpKind::Slice: {
      require_arity(k, ins, 1);
      if (ins[0].shape.size() != 2)
        shape_error(k, "expects a rank-2 input, got " + shape_str(ins[0].shape));
      const std::size_t m = ins[0].shape[0], n = ins[0].shape[1];
      if (!(meta.c0 < meta.c1 && meta.c1 <= n))
        shape_error(k, "column range [" + std::to_string(meta.c0) + "," +
                           std::to_string(meta.c1) + ") invalid for " +
                           shape_str(ins[0].shape));
      const std::size_t w = meta.c1 - meta.c0;
      Tensor out = Tensor::zeros({m, w});
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c)
          out.values[r * w + c] = ins[0].values[r * n + meta.c0 + c];
      return out;
    }
    case OpKind::BiasAdd: {
      require_arity(k, ins, 2);
      if (ins[0].shape.size() != 2 || ins[1].shape.size() != 1 ||
          ins[1].shape[0] != ins[0].shape[1])
        shape_error(k, "expects (m,n) + (n,), got " + shape_str(ins[0].shape) +
                           " + " + shape_str(ins[1].shape));
      const std::size_t m = ins[0].shape[0], n = ins[0].shape[1];
      Tensor out(ins[0].shape, ins[0].values);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out.values[r * n + c] += ins[1].values[c];
      return out;
    }
    case OpKind::Leaf:
    case OpKind::Custom:
      shape_error(k, "cannot be recorded through the generic op path");
  }
  shape_error(k, "unhandled op");
}

Tape* common_tape(const std::vector<Tensor>& ins) {
  Tape* t = nullptr;
  for (const Tensor& x : ins) {
    if (!x.on_tape()) continue;
    if (t == nullptr) t = x.tape;
    else if (t != x.tape)
      throw std::invalid_argument("op inputs live on different tapes");
  }
  return t;
}

void axpy(std::vector<double>& acc, const std::vector<double>& x, double a = 1.0) {
  if (acc.empty()) acc.assign(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) acc[i] += a * x[i];
}

}  // namespace

std::uint64_t Tape::nodes_created_total() { return g_nodes_created.load(); }

int Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  g_nodes_created.fetch_add(1, std::memory_order_relaxed);
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(std::vector<std::size_t> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("leaf: shape " + shape_str(shape) +
                                " does not match value count " +
                                std::to_string(values.size()));
  Node n;
  n.kind = OpKind::Leaf;
  n.shape = shape;
  n.values = values;
  const int id = push(std::move(n));
  leaf_ids_.push_back(id);
  Tensor t(std::move(shape), std::move(values));
  t.tape = this;
  t.node = id;
  return t;
}

Tensor Tape::record(OpKind kind, const std::vector<Tensor>& inputs,
                    const OpMeta& meta) {
  for (const Tensor& x : inputs)
    if (x.on_tape() && x.tape != this)
      throw std::invalid_argument(std::string(op_name(kind)) +
                                  ": input belongs to a different tape");
  Tensor out = forward_eval(kind, inputs, meta);
  Node n;
  n.kind = kind;
  n.meta = meta;
  n.shape = out.shape;
  n.values = out.values;
  n.inputs.reserve(inputs.size());
  for (const Tensor& x : inputs) {
    InputRef r;
    r.shape = x.shape;
    if (x.on_tape()) r.node = x.node;
    else r.const_values = x.values;
    n.inputs.push_back(std::move(r));
  }
  out.tape = this;
  out.node = push(std::move(n));
  return out;
}

Tensor Tape::record_custom(const std::string& kind,
                           const std::vector<Tensor>& inputs,
                           std::vector<std::size_t> out_shape,
                           std::vector<double> forward_values,
                           std::shared_ptr<const CustomContext> ctx) {
  if (shape_numel(out_shape) != forward_values.size())
    throw std::invalid_argument("record_custom(" + kind + "): output shape " +
                                shape_str(out_shape) + " does not match " +
                                std::to_string(forward_values.size()) + " values");
  for (const Tensor& x : inputs)
    if (x.on_tape() && x.tape != this)
      throw std::invalid_argument("record_custom(" + kind +
                                  "): input belongs to a different tape");
  Node n;
  n.kind = OpKind::Custom;
  n.custom_kind = kind;
  n.shape = out_shape;
  n.values = forward_values;
  n.ctx = std::move(ctx);
  for (const Tensor& x : inputs) {
    InputRef r;
    r.shape = x.shape;
    if (x.on_tape()) r.node = x.node;
    else r.const_values = x.values;
    n.inputs.push_back(std::move(r));
  }
  Tensor out(std::move(out_shape), std::move(forward_values));
  out.tape = this;
  out.node = push(std::move(n));
  return out;
}

void Tape::register_custom(const std::string& kind, CustomBackward rule) {
  if (custom_rules_.count(kind))
    throw std::invalid_argument("register_custom: rule already registered for '" +
                                kind + "'");
  custom_rules_.emplace(kind, std::move(rule));
}

GradientMap Tape::backward(const Tensor& output, double seed) const {
  if (output.tape != this || output.node < 0)
    throw std::invalid_argument("backward: output is not on this tape");
  if (output.values.size() != 1)
    throw std::invalid_argument("backward: output must be scalar, got shape " +
                                shape_str(output.shape));

  std::vector<std::vector<double>> adj(nodes_.size());
  adj[static_cast<std::size_t>(output.node)] = {seed};

  // helper: forward values of input slot i of node n
  auto in_values = [&](const Node& n, std::size_t i) -> const std::vector<double>& {
    const InputRef& r = n.inputs[i];
    return r.node >= 0 ? nodes_[static_cast<std::size_t>(r.node)].values
                       : r.const_values;
  };
  auto adj_of = [&](const Node& n, std::size_t i) -> std::vector<double>* {
    const InputRef& r = n.inputs[i];
    return r.node >= 0 ? &adj[static_cast<std::size_t>(r.node)] : nullptr;
  };

  for (int id = output.node; id >= 0; --id) {
    std::vector<double>& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.kind) {
      case OpKind::Leaf:
        break;
      case OpKind::Add: {
        if (auto* a = adj_of(n, 0)) axpy(*a, g);
        if (auto* b = adj_of(n, 1)) axpy(*b, g);
        break;
      }
      case OpKind::Sub: {
        if (auto* a = adj_of(n, 0)) axpy(*a, g);
        if (auto* b = adj_of(n, 1)) axpy(*b, g, -1.0);
        break;
      }
      case OpKind::Mul: {
        if (auto* a = adj_of(n, 0)) {
          const auto& bv = in_values(n, 1);
          if (a->empty()) a->assign(bv.size(), 0.0);
          for (std::size_t i = 0; i < bv.size(); ++i) (*a)[i] += g[i] * bv[i];
        }
        if (auto* b = adj_of(n, 1)) {
          const auto& av = in_values(n, 0);
          if (b->empty()) b->assign(av.size(), 0.0);
          for (std::size_t i = 0; i < av.size(); ++i) (*b)[i] += g[i] * av[i];
        }
        break;
      }
      case OpKind::MatMul: {
        const std::size_t m = n.inputs[0].shape[0], kk = n.inputs[0].shape[1],
                          nn = n.inputs[1].shape[1];
        if (auto* a = adj_of(n, 0)) {
          std::vector<double> tmp(m * kk);
          kern::matmul_nt(g.data(), in_values(n, 1).data(), tmp.data(), m, nn, kk);
          axpy(*a, tmp);
        }
        if (auto* b = adj_of(n, 1)) {
          std::vector<double> tmp(kk * nn);
          kern::matmul_tn(in_values(n, 0).data(), g.data(), tmp.data(), m, kk, nn);
          axpy(*b, tmp);
        }
        break;
      }
      case OpKind::Relu: {
        if (auto* a = adj_of(n, 0)) {
          const auto& xv = in_values(n, 0);
          if (a->empty()) a->assign(xv.size(), 0.0);
          // subgradient 0 at exactly 0
          for (std::size_t i = 0; i < xv.size(); ++i)
            if (xv[i] > 0.0) (*a)[i] += g[i];
        }
        break;
      }
      case OpKind::Sigmoid: {
        if (auto* a = adj_of(n, 0)) {
          if (a->empty()) a->assign(n.values.size(), 0.0);
          for (std::size_t i = 0; i < n.values.size(); ++i) {
            const double y = n.values[i];
            (*a)[i] += g[i] * y * (1.0 - y);
          }
        }
        break;
      }
      case OpKind::Sum: {
        if (auto* a = adj_of(n, 0)) {
          const std::size_t sz = shape_numel(n.inputs[0].shape);
          if (a->empty()) a->assign(sz, 0.0);
          for (std::size_t i = 0; i < sz; ++i) (*a)[i] += g[0];
        }
        break;
      }
      case OpKind::Scale: {
        if (auto* a = adj_of(n, 0)) axpy(*a, g, n.meta.alpha);
        break;
      }
      case OpKind::Concat: {
        const std::size_t rank = n.shape.size();
        if (rank == 1 || n.meta.axis == 0) {
          std::size_t off = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const std::size_t sz = shape_numel(n.inputs[i].shape);
            if (auto* a = adj_of(n, i)) {
              if (a->empty()) a->assign(sz, 0.0);
              for (std::size_t j = 0; j < sz; ++j) (*a)[j] += g[off + j];
            }
            off += sz;
          }
        } else {
          const std::size_t total = n.shape[1], rowsn = n.shape[0];
          std::size_t coff = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const std::size_t tc = n.inputs[i].shape[1];
            if (auto* a = adj_of(n, i)) {
              if (a->empty()) a->assign(rowsn * tc, 0.0);
              for (std::size_t r = 0; r < rowsn; ++r)
                for (std::size_t c = 0; c < tc; ++c)
                  (*a)[r * tc + c] += g[r * total + coff + c];
            }
            coff += tc;
          }
        }
        break;
      }
      case OpKind::Slice: {
        if (auto* a = adj_of(n, 0)) {
          const std::size_t m = n.inputs[0].shape[0], nn = n.inputs[0].shape[1];
          const std::size_t w = n.meta.c1 - n.meta.c0;
          if (a->empty()) a->assign(m * nn, 0.0);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c)
              (*a)[r * nn + n.meta.c0 + c] += g[r * w + c];
        }
        break;
      }
      case OpKind::BiasAdd: {
        if (auto* a = adj_of(n, 0)) axpy(*a, g);
        if (auto* b = adj_of(n, 1)) {
          const std::size_t m = n.shape[0], nn = n.shape[1];
          if (b->empty()) b->assign(nn, 0.0);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < nn; ++c) (*b)[c] += g[r * nn + c];
        }
        break;
      }
      case OpKind::Custom: {
        auto it = custom_rules_.find(n.custom_kind);
        if (it == custom_rules_.end())
          throw std::runtime_error("backward: no rule registered for custom op '" +
                                   n.custom_kind + "'");
        std::vector<ValueView> views;
        views.reserve(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
          views.push_back({&n.inputs[i].shape, &in_values(n, i)});
        static const CustomContext kEmptyCtx{};
        const CustomContext& ctx = n.ctx ? *n.ctx : kEmptyCtx;
        std::vector<std::vector<double>> gin = it->second(ctx, views, g);
        if (gin.size() != n.inputs.size())
          throw std::runtime_error("backward: custom op '" + n.custom_kind +
                                   "' returned " + std::to_string(gin.size()) +
                                   " gradients for " +
                                   std::to_string(n.inputs.size()) + " inputs");
        for (std::size_t i = 0; i < gin.size(); ++i) {
          if (gin[i].size() != shape_numel(n.inputs[i].shape))
            throw std::runtime_error(
                "backward: custom op '" + n.custom_kind + "' gradient " +
                std::to_string(i) + " has " + std::to_string(gin[i].size()) +
                " elements, input shape is " + shape_str(n.inputs[i].shape));
          if (auto* a = adj_of(n, i)) axpy(*a, gin[i]);
        }
        break;
      }
    }
  }

  GradientMap out;
  for (int lid : leaf_ids_) {
    const Node& ln = nodes_[static_cast<std::size_t>(lid)];
    std::vector<double>& a = adj[static_cast<std::size_t>(lid)];
    if (a.empty()) a.assign(ln.values.size(), 0.0);
    out.emplace(lid, Tensor(ln.shape, std::move(a)));
  }
  return out;
}

// --- free op entry points ---------------------------------------------------

namespace {
Tensor apply(OpKind k, const std::vector<Tensor>& ins, const OpMeta& meta = {}) {
  if (Tape* t = common_tape(ins)) return t->record(k, ins, meta);
  return forward_eval(k, ins, meta);
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return apply(OpKind::Add, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply(OpKind::Sub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply(OpKind::Mul, {a, b}); }
Tensor matmul(const Tensor& a, const Tensor& b) {
  return apply(OpKind::MatMul, {a, b});
}
Tensor relu(const Tensor& x) { return apply(OpKind::Relu, {x}); }
Tensor sigmoid(const Tensor& x) { return apply(OpKind::Sigmoid, {x}); }
Tensor sum(const Tensor& x) { return apply(OpKind::Sum, {x}); }
Tensor scale(const Tensor& x, double alpha) {
  OpMeta m;
  m.alpha = alpha;
  return apply(OpKind::Scale, {x}, m);
}
Tensor concat(const std::vector<Tensor>& xs, int axis) {
  OpMeta m;
  m.axis = axis;
  return apply(OpKind::Concat, xs, m);
}
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  OpMeta m;
  m.c0 = c0;
  m.c1 = c1;
  return apply(OpKind::Slice, {x}, m);
}
Tensor bias_add(const Tensor& x, const Tensor& bias) {
  return apply(OpKind::BiasAdd, {x, bias});
}

Tensor grad_of(const GradientMap& grads, const Tensor& t) {
  if (!t.on_tape())
    throw std::invalid_argument("grad_of: tensor is a constant (no tape node)");
  auto it = grads.find(t.node);
  if (it == grads.end()) return Tensor::zeros(t.shape);
  return it->second;
}

}  // namespace isoray
