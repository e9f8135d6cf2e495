#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "isoray/tensor.hpp"

namespace isoray {

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,      // elementwise
  MatMul,   // (m,k) x (k,n)
  Relu,
  Sigmoid,
  Sum,      // full reduction to a scalar
  Scale,    // multiply by a fixed constant
  Concat,   // along axis 0 or 1
  Slice,    // column range [c0,c1) of a 2-d tensor
  BiasAdd,  // (m,n) + (n,) row-broadcast
  Custom,
};

const char* op_name(OpKind k);

// Per-op constants that the backward rule needs (scale factor, slice
// bounds, concat axis). Inputs' forward values are reachable through the
// node graph, so nothing else is saved.
struct OpMeta {
  double alpha = 0.0;
  int axis = 0;
  std::size_t c0 = 0, c1 = 0;
};

// Saved forward context of a custom node, owned by the node. `extra` is an
// opaque side channel (e.g. a diagnostics sink filled in during backward).
struct CustomContext {
  std::vector<double> data;
  std::vector<std::int64_t> ints;
  std::shared_ptr<void> extra;
};

// Read-only view of one node input (shape + forward values).
struct ValueView {
  const std::vector<std::size_t>* shape;
  const std::vector<double>* values;
};

// Backward rule for a custom op kind: given the saved context, the inputs'
// forward values and the upstream gradient (same element count as the node
// output), return one gradient per input, each matching that input's shape.
using CustomBackward = std::function<std::vector<std::vector<double>>(
    const CustomContext& ctx, const std::vector<ValueView>& inputs,
    const std::vector<double>& upstream)>;

// Gradients of a scalar output with respect to every leaf of the tape,
// keyed by leaf node id. Leaves unreachable from the output hold zeros.
using GradientMap = std::unordered_map<int, Tensor>;

// Reverse-mode tape: an append-only list of nodes in topological order.
// Single-writer; use one Tape per worker and merge gradient maps by
// summation when running data-parallel.
class Tape {
 public:
  struct InputRef {
    int node = -1;  // < 0: constant input, values stored inline
    std::vector<std::size_t> shape;
    std::vector<double> const_values;
  };

  struct Node {
    OpKind kind;
    std::vector<InputRef> inputs;
    std::vector<std::size_t> shape;
    std::vector<double> values;  // forward output
    OpMeta meta;
    std::string custom_kind;
    std::shared_ptr<const CustomContext> ctx;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a new differentiable variable holding `values`.
  Tensor leaf(std::vector<std::size_t> shape, std::vector<double> values);

  // Appends a node for a built-in op. Forward values are computed eagerly;
  // shape mismatches are rejected with a diagnostic naming the op.
  Tensor record(OpKind kind, const std::vector<Tensor>& inputs,
                const OpMeta& meta = {});

  // Appends a node for a registered custom op with caller-computed forward
  // values and saved context.
  Tensor record_custom(const std::string& kind,
                       const std::vector<Tensor>& inputs,
                       std::vector<std::size_t> out_shape,
                       std::vector<double> forward_values,
                       std::shared_ptr<const CustomContext> ctx);

  // Registers the backward rule for a custom op kind. Duplicate
  // registration is rejected.
  void register_custom(const std::string& kind, CustomBackward rule);
  bool has_custom(const std::string& kind) const {
    return custom_rules_.count(kind) != 0;
  }

  // Reverse sweep from a scalar output seeded with `seed`. Visits nodes at
  // most once, in reverse insertion order. Returns a gradient per leaf.
  GradientMap backward(const Tensor& output, double seed = 1.0) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const std::vector<int>& leaf_ids() const { return leaf_ids_; }

  // Process-wide count of nodes ever appended to any tape. Lets tests
  // assert that the per-iteration node count does not grow with the ray
  // sampling accuracy n.
  static std::uint64_t nodes_created_total();

 private:
  friend struct TapeOps;
  int push(Node&& n);
  std::vector<Node> nodes_;
  std::vector<int> leaf_ids_;
  std::unordered_map<std::string, CustomBackward> custom_rules_;
};

// --- op entry points -------------------------------------------------------
//
// Each computes the forward result and, when any input lives on a tape,
// records a node there (all tape-resident inputs must share one tape).
// With constant-only inputs the result is a constant: the same code path
// serves recorded and plain evaluation.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor scale(const Tensor& x, double alpha);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor bias_add(const Tensor& x, const Tensor& bias);

// |x| composed from the built-in set: relu(x) + relu(-x)
inline Tensor abs_of(const Tensor& x) { return add(relu(x), relu(scale(x, -1.0))); }

// Gradient for `t` out of a backward() result; zeros if t is a leaf the
// output never reached.
Tensor grad_of(const GradientMap& grads, const Tensor& t);

}  // namespace isoray
