#include "isoray/field.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "isoray/rng.hpp"

namespace isoray {

std::size_t FieldParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : arrays) n += t.size();
  return n;
}

void FieldParams::validate() const {
  if (width == 0 || blocks == 0)
    throw std::invalid_argument("FieldParams: width and blocks must be positive");
  if (arrays.size() != array_count())
    throw std::invalid_argument("FieldParams: expected " +
                                std::to_string(array_count()) + " arrays, have " +
                                std::to_string(arrays.size()));
  auto expect = [&](std::size_t i, std::vector<std::size_t> shape) {
    if (arrays[i].shape != shape)
      throw std::invalid_argument("FieldParams: array " + std::to_string(i) +
                                  " has shape " + shape_str(arrays[i].shape) +
                                  ", expected " + shape_str(shape));
  };
  expect(0, {3 + latent_dim, width});
  expect(1, {width});
  for (std::size_t k = 0; k < blocks; ++k) {
    expect(2 + 4 * k + 0, {width, width});
    expect(2 + 4 * k + 1, {width});
    expect(2 + 4 * k + 2, {width, width});
    expect(2 + 4 * k + 3, {width});
  }
  expect(2 + 4 * blocks + 0, {width, 4});
  expect(2 + 4 * blocks + 1, {4});
}

FieldParams init_field(std::size_t width, std::size_t blocks,
                       std::size_t latent_dim, std::uint64_t seed) {
  FieldParams p;
  p.width = width;
  p.blocks = blocks;
  p.latent_dim = latent_dim;
  std::uint64_t idx = 0;
  auto affine = [&](std::size_t fan_in, std::size_t fan_out) {
    CounterRng rng(seed, 0x6669656c64ull /* field */, idx++);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_in, fan_out});
    for (double& v : w.values) v = rng.uniform(-bound, bound);
    p.arrays.push_back(std::move(w));
    p.arrays.push_back(Tensor::zeros({fan_out}));
  };
  affine(3 + latent_dim, width);
  for (std::size_t k = 0; k < blocks; ++k) {
    affine(width, width);
    affine(width, width);
  }
  affine(width, 4);
  // weakly occupied start: an all-empty field would never produce a
  // crossing and the color loss could not engage
  p.arrays.back().values[0] = 0.5;
  return p;
}

FieldOutput field_forward_with(const std::vector<Tensor>& params,
                               std::size_t width, std::size_t blocks,
                               std::size_t latent_dim, const Tensor& z,
                               const Tensor& points) {
  if (points.shape.size() != 2 || points.shape[1] != 3)
    throw std::invalid_argument("field_forward: points must be (B,3), got " +
                                shape_str(points.shape));
  for (double v : points.values)
    if (!std::isfinite(v))
      throw std::invalid_argument("field_forward: non-finite input point");
  if (params.size() != 4 * blocks + 4)
    throw std::invalid_argument("field_forward: wrong parameter array count");
  const std::size_t b = points.shape[0];

  Tensor x = points;
  if (latent_dim > 0) {
    if (z.size() != latent_dim)
      throw std::invalid_argument("field_forward: latent code has " +
                                  std::to_string(z.size()) + " dims, expected " +
                                  std::to_string(latent_dim));
    // row-broadcast of z via a zero constant
    Tensor zrows = bias_add(Tensor::zeros({b, latent_dim}), z);
    x = concat({points, zrows}, 1);
  }

  Tensor h = bias_add(matmul(x, params[0]), params[1]);
  for (std::size_t k = 0; k < blocks; ++k) {
    const Tensor& w1 = params[2 + 4 * k];
    const Tensor& b1 = params[3 + 4 * k];
    const Tensor& w2 = params[4 + 4 * k];
    const Tensor& b2 = params[5 + 4 * k];
    Tensor t1 = bias_add(matmul(relu(h), w1), b1);
    Tensor t2 = bias_add(matmul(relu(t1), w2), b2);
    h = add(h, t2);
  }
  Tensor logits =
      bias_add(matmul(relu(h), params[2 + 4 * blocks]), params[3 + 4 * blocks]);
  (void)width;
  FieldOutput out;
  out.occ = sigmoid(slice_cols(logits, 0, 1));
  out.rgb = sigmoid(slice_cols(logits, 1, 4));
  out.logits = std::move(logits);
  return out;
}

FieldOutput field_forward(const Tensor& points, const LatentCode& z,
                          const FieldParams& params, Tape* tape) {
  params.validate();
  Tensor zt({params.latent_dim}, std::vector<double>(z.begin(), z.end()));
  if (!tape)
    return field_forward_with(params.arrays, params.width, params.blocks,
                              params.latent_dim, zt, points);
  TapeField tf = attach_field(*tape, params, z, false);
  return tf.forward(points);
}

FieldOutput TapeField::forward(const Tensor& points) const {
  Tensor zt = z_trainable
                  ? z_leaf
                  : Tensor({latent_dim}, std::vector<double>(z_value.begin(),
                                                             z_value.end()));
  return field_forward_with(leaves, width, blocks, latent_dim, zt, points);
}

std::vector<Tensor> TapeField::grad_inputs() const {
  std::vector<Tensor> in = leaves;
  if (z_trainable) in.push_back(z_leaf);
  return in;
}

TapeField attach_field(Tape& tape, const FieldParams& params, const LatentCode& z,
                       bool z_trainable) {
  params.validate();
  if (z.size() != params.latent_dim)
    throw std::invalid_argument("attach_field: latent code has " +
                                std::to_string(z.size()) + " dims, expected " +
                                std::to_string(params.latent_dim));
  TapeField tf;
  tf.tape = &tape;
  tf.width = params.width;
  tf.blocks = params.blocks;
  tf.latent_dim = params.latent_dim;
  tf.z_value = z;
  tf.z_trainable = z_trainable && params.latent_dim > 0;
  tf.leaves.reserve(params.arrays.size());
  for (const Tensor& a : params.arrays) tf.leaves.push_back(tape.leaf(a.shape, a.values));
  if (tf.z_trainable)
    tf.z_leaf = tape.leaf({params.latent_dim}, std::vector<double>(z.begin(), z.end()));
  return tf;
}

Tensor field_spatial_gradient(const FieldParams& params, const LatentCode& z,
                              const Tensor& points) {
  Tape tape;
  Tensor pts = tape.leaf(points.shape, points.values);
  // params stay constants; only the coordinates are differentiated
  Tensor zt({params.latent_dim}, std::vector<double>(z.begin(), z.end()));
  FieldOutput out = field_forward_with(params.arrays, params.width, params.blocks,
                                       params.latent_dim, zt, pts);
  GradientMap g = tape.backward(sum(out.occ), 1.0);
  return grad_of(g, pts);
}

SurfaceNormal surface_normal(const FieldParams& params, const LatentCode& z,
                             const Vec3& point) {
  Tensor pts({1, 3}, {point.x, point.y, point.z});
  Tensor g = field_spatial_gradient(params, z, pts);
  Vec3 v{g.values[0], g.values[1], g.values[2]};
  const double n = norm(v);
  SurfaceNormal out;
  if (n <= kDegenerateGradientEps) {
    out.degenerate = true;
    return out;
  }
  out.n = v / n;
  return out;
}

FieldVjp field_occupancy_vjp(const FieldParams& params, const LatentCode& z,
                             const Tensor& points, const std::vector<double>& seeds,
                             bool want_z_grad) {
  if (seeds.size() != points.shape[0])
    throw std::invalid_argument("field_occupancy_vjp: seed count " +
                                std::to_string(seeds.size()) +
                                " does not match point count " +
                                std::to_string(points.shape[0]));
  Tape tape;
  TapeField tf = attach_field(tape, params, z, want_z_grad);
  FieldOutput out = tf.forward(points);
  Tensor seed_t({points.shape[0], 1}, seeds);
  GradientMap g = tape.backward(sum(mul(out.occ, seed_t)), 1.0);
  FieldVjp r;
  r.param_grads.reserve(tf.leaves.size());
  for (const Tensor& leaf : tf.leaves)
    r.param_grads.push_back(grad_of(g, leaf).values);
  if (want_z_grad && tf.z_trainable) r.z_grad = grad_of(g, tf.z_leaf).values;
  return r;
}

// --- MlpField ----------------------------------------------------------------

std::vector<double> MlpField::occupancy(const Tensor& points) const {
  return field_forward(points, z_, *params_, nullptr).occ.values;
}

FieldOutput MlpField::forward(const Tensor& points) const {
  return field_forward(points, z_, *params_, nullptr);
}

Tensor MlpField::spatial_gradient(const Tensor& points) const {
  return field_spatial_gradient(*params_, z_, points);
}

std::vector<std::vector<double>> MlpField::occupancy_vjp(
    const Tensor& points, const std::vector<double>& seeds) const {
  FieldVjp v = field_occupancy_vjp(*params_, z_, points, seeds, z_trainable_);
  std::vector<std::vector<double>> out = std::move(v.param_grads);
  if (z_trainable_) out.push_back(std::move(v.z_grad));
  return out;
}

// --- checkpoint io -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'I', 'R', 'F', 'D'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_f64s(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
std::uint32_t read_u32(std::istream& is, const std::string& path,
                       const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error(path + ": truncated reading " + what);
  return v;
}
void read_f64s(std::istream& is, std::vector<double>& v, const std::string& path,
               const char* what) {
  if (!is.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw std::runtime_error(path + ": truncated reading " + what);
}

}  // namespace

void save_field(const std::string& path, const FieldParams& params,
                const std::vector<LatentCode>& codes) {
  params.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_field: cannot open " + path);
  os.write(kMagic, 4);
  write_u32(os, 1);
  write_u32(os, static_cast<std::uint32_t>(params.width));
  write_u32(os, static_cast<std::uint32_t>(params.blocks));
  write_u32(os, static_cast<std::uint32_t>(params.latent_dim));
  for (const Tensor& a : params.arrays) write_f64s(os, a.values);
  write_u32(os, static_cast<std::uint32_t>(codes.size()));
  for (const LatentCode& c : codes) {
    if (c.size() != params.latent_dim)
      throw std::invalid_argument("save_field: latent code size mismatch");
    write_f64s(os, c);
  }
  if (!os) throw std::runtime_error("save_field: write failed for " + path);
}

FieldSnapshot load_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_field: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + ": bad magic, not a field checkpoint");
  const std::uint32_t version = read_u32(is, path, "version");
  if (version != 1)
    throw std::runtime_error(path + ": unsupported version " +
                             std::to_string(version));
  FieldSnapshot snap;
  snap.params.width = read_u32(is, path, "width");
  snap.params.blocks = read_u32(is, path, "blocks");
  snap.params.latent_dim = read_u32(is, path, "latent_dim");
  FieldParams ref = init_field(std::max<std::size_t>(snap.params.width, 1),
                               std::max<std::size_t>(snap.params.blocks, 1),
                               snap.params.latent_dim, 0);
  if (snap.params.width == 0 || snap.params.blocks == 0)
    throw std::runtime_error(path + ": invalid architecture in header");
  for (const Tensor& a : ref.arrays) {
    Tensor t = Tensor::zeros(a.shape);
    read_f64s(is, t.values, path, "parameter array");
    snap.params.arrays.push_back(std::move(t));
  }
  const std::uint32_t n_codes = read_u32(is, path, "code count");
  for (std::uint32_t i = 0; i < n_codes; ++i) {
    LatentCode c(snap.params.latent_dim, 0.0);
    read_f64s(is, c, path, "latent code");
    snap.codes.push_back(std::move(c));
  }
  snap.params.validate();
  return snap;
}

}  // namespace isoray
