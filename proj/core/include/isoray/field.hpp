#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isoray/geometry.hpp"
#include "isoray/tape.hpp"

namespace isoray {

// Optional conditioning vector, optimized jointly with the network weights
// when enabled. Empty means unconditional.
using LatentCode = std::vector<double>;

// Weights of the joint occupancy + color network: an input layer
// (3+latent_dim -> width), `blocks` residual blocks of two affine layers
// each, and a width -> 4 output layer (1 occupancy logit, 3 color logits).
//
// Parameter arrays in declaration order:
//   w_in ((3+latent_dim), width), b_in (width),
//   per block: w1 (width,width), b1 (width), w2 (width,width), b2 (width),
//   w_out (width, 4), b_out (4)
struct FieldParams {
  std::size_t width = 0;
  std::size_t blocks = 0;
  std::size_t latent_dim = 0;
  std::vector<Tensor> arrays;

  std::size_t array_count() const { return 4 * blocks + 4; }
  std::size_t parameter_count() const;
  void validate() const;
};

// Uniform(+-1/sqrt(fan_in)) weights, zero biases; the occupancy-head bias
// starts at +0.5 so the initial field is weakly occupied and rays see
// crossings from the first iterations on.
FieldParams init_field(std::size_t width, std::size_t blocks,
                       std::size_t latent_dim, std::uint64_t seed);

struct FieldOutput {
  Tensor occ;     // (B,1) in (0,1)
  Tensor rgb;     // (B,3) in (0,1)
  Tensor logits;  // (B,4) pre-sigmoid
};

// Forward pass given parameter tensors in declaration order (tape leaves or
// constants). `z` may itself be a leaf when the latent code is trainable.
FieldOutput field_forward_with(const std::vector<Tensor>& params,
                               std::size_t width, std::size_t blocks,
                               std::size_t latent_dim, const Tensor& z,
                               const Tensor& points);

// Plain (or tape-recorded, when `tape` is given) forward pass. With a tape,
// fresh parameter leaves are created on it.
FieldOutput field_forward(const Tensor& points, const LatentCode& z,
                          const FieldParams& params, Tape* tape = nullptr);

// The field's parameters attached to a tape as leaves, so several loss
// terms can share one set of differentiable variables.
struct TapeField {
  Tape* tape = nullptr;
  std::vector<Tensor> leaves;  // declaration order
  Tensor z_leaf;               // valid iff z_trainable
  bool z_trainable = false;
  std::size_t width = 0, blocks = 0, latent_dim = 0;
  LatentCode z_value;

  FieldOutput forward(const Tensor& points) const;
  // leaves plus the z leaf when trainable — the input list for custom nodes
  std::vector<Tensor> grad_inputs() const;
};

TapeField attach_field(Tape& tape, const FieldParams& params, const LatentCode& z,
                       bool z_trainable);

// Spatial gradient d occ_b / d p_b, one row per point, computed by
// reverse-mode differentiation with respect to the input coordinates.
Tensor field_spatial_gradient(const FieldParams& params, const LatentCode& z,
                              const Tensor& points);

constexpr double kDegenerateGradientEps = 1e-8;

struct SurfaceNormal {
  Vec3 n{};
  bool degenerate = false;  // gradient norm <= kDegenerateGradientEps
};

SurfaceNormal surface_normal(const FieldParams& params, const LatentCode& z,
                             const Vec3& point);

// Gradient of sum_i seeds[i] * occ(points_i) with respect to the parameter
// arrays (and optionally z), via one recorded forward pass over the batch
// of points and a single backward sweep. This is the workhorse behind the
// custom backward of the surface-depth operator.
struct FieldVjp {
  std::vector<std::vector<double>> param_grads;  // declaration order
  std::vector<double> z_grad;                    // empty unless requested
};
FieldVjp field_occupancy_vjp(const FieldParams& params, const LatentCode& z,
                             const Tensor& points, const std::vector<double>& seeds,
                             bool want_z_grad = false);

// Occupancy-only view of a field, the surface-depth operator's contract.
// parameter arrays are exposed in a fixed declaration order; `occupancy_vjp`
// must return one gradient per array.
class OccupancyField {
 public:
  virtual ~OccupancyField() = default;
  virtual std::vector<double> occupancy(const Tensor& points) const = 0;
  virtual Tensor spatial_gradient(const Tensor& points) const = 0;
  virtual std::vector<std::vector<double>> occupancy_vjp(
      const Tensor& points, const std::vector<double>& seeds) const = 0;
  virtual std::size_t param_array_count() const = 0;
};

// FieldParams-backed OccupancyField (non-owning views). When `z_trainable`
// the latent code is exposed as one extra trailing parameter array.
class MlpField : public OccupancyField {
 public:
  MlpField(const FieldParams& params, const LatentCode& z = {},
           bool z_trainable = false)
      : params_(&params), z_(z), z_trainable_(z_trainable) {}

  std::vector<double> occupancy(const Tensor& points) const override;
  Tensor spatial_gradient(const Tensor& points) const override;
  std::vector<std::vector<double>> occupancy_vjp(
      const Tensor& points, const std::vector<double>& seeds) const override;
  std::size_t param_array_count() const override {
    return params_->array_count() + (z_trainable_ ? 1 : 0);
  }

  FieldOutput forward(const Tensor& points) const;  // occ + rgb, no tape
  const FieldParams& params() const { return *params_; }
  const LatentCode& z() const { return z_; }
  bool z_trainable() const { return z_trainable_; }

 private:
  const FieldParams* params_;
  LatentCode z_;
  bool z_trainable_;
};

// --- checkpoint file --------------------------------------------------------
//
// Flat little-endian binary: magic "IRFD", u32 version (1), u32 width,
// u32 blocks, u32 latent_dim, parameter arrays as f64 in declaration order,
// u32 n_codes, then n_codes latent codes of latent_dim f64 each. Trainer
// checkpoints append an optimizer section after this (see trainer.hpp).

struct FieldSnapshot {
  FieldParams params;
  std::vector<LatentCode> codes;
};

void save_field(const std::string& path, const FieldParams& params,
                const std::vector<LatentCode>& codes);
FieldSnapshot load_field(const std::string& path);

}  // namespace isoray
