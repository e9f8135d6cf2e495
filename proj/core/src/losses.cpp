#include "isoray/losses.hpp"

#include <algorithm>
#include <cmath>

namespace isoray {

PixelPartition classify(const std::vector<PixelSample>& samples,
                        const std::vector<SurfaceHit>& hits) {
  if (samples.size() != hits.size())
    throw std::invalid_argument("classify: need one hit record per sample");
  PixelPartition part;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].in_mask) part.p1.push_back(i);
    else if (hits[i].hit) part.p0.push_back(i);
    else part.p2.push_back(i);
  }
  return part;
}

void LossWeights::validate() const {
  const double ws[] = {rgb, depth, freespace, occupancy, normal};
  bool any = false;
  for (double w : ws) {
    if (w < 0.0 || !std::isfinite(w))
      throw std::invalid_argument("LossWeights: weights must be non-negative");
    any = any || w > 0.0;
  }
  if (!any) throw std::invalid_argument("LossWeights: at least one weight must be positive");
}

namespace {
constexpr double kProbClamp = 1e-7;
}

double bce(double p, double target) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -(target * std::log(q) + (1.0 - target) * std::log(1.0 - q));
}

// --- custom ops -----------------------------------------------------------------

namespace {

// payload of a "field_probe" node: the loss value was computed outside the
// tape; its parameter gradient is sum_i coeff_i * df(point_i)/dtheta scaled
// by the upstream scalar, evaluated with one recorded pass.
struct FieldProbePayload {
  Tensor points;               // (M,3)
  std::vector<double> coeffs;  // M
  std::function<std::vector<std::vector<double>>(const Tensor&,
                                                 const std::vector<double>&)>
      vjp;
};

}  // namespace

void register_loss_ops(Tape& tape) {
  register_depth_backward(tape);
  if (!tape.has_custom(kBceOpName)) {
    tape.register_custom(
        kBceOpName,
        [](const CustomContext& ctx, const std::vector<ValueView>& inputs,
           const std::vector<double>& upstream) {
          const std::vector<double>& targets = ctx.data;
          const std::vector<double>& probs = *inputs[0].values;
          std::vector<double> g(probs.size(), 0.0);
          for (std::size_t i = 0; i < probs.size(); ++i) {
            const double p = probs[i];
            if (p <= kProbClamp || p >= 1.0 - kProbClamp) continue;  // clamped
            g[i] = upstream[i] * (p - targets[i]) / (p * (1.0 - p));
          }
          return std::vector<std::vector<double>>{std::move(g)};
        });
  }
  if (!tape.has_custom(kFieldProbeOpName)) {
    tape.register_custom(
        kFieldProbeOpName,
        [](const CustomContext& ctx, const std::vector<ValueView>& inputs,
           const std::vector<double>& upstream) {
          auto payload = std::static_pointer_cast<FieldProbePayload>(ctx.extra);
          if (!payload)
            throw std::runtime_error("field_probe backward: missing payload");
          const double lambda = upstream[0];
          if (lambda == 0.0 || payload->coeffs.empty()) {
            std::vector<std::vector<double>> zeros(inputs.size());
            for (std::size_t i = 0; i < inputs.size(); ++i)
              zeros[i].assign(shape_numel(*inputs[i].shape), 0.0);
            return zeros;
          }
          std::vector<double> seeds(payload->coeffs.size());
          for (std::size_t i = 0; i < seeds.size(); ++i)
            seeds[i] = lambda * payload->coeffs[i];
          return payload->vjp(payload->points, seeds);
        });
  }
}

Tensor record_bce(Tape& tape, const Tensor& probs, const std::vector<double>& targets) {
  if (probs.shape.size() != 2 || probs.shape[1] != 1 ||
      probs.shape[0] != targets.size())
    throw std::invalid_argument("record_bce: probs must be (M,1) matching targets");
  std::vector<double> fwd(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    fwd[i] = bce(probs.values[i], targets[i]);
  auto ctx = std::make_shared<CustomContext>();
  ctx->data = targets;
  return tape.record_custom(kBceOpName, {probs}, {targets.size(), 1},
                            std::move(fwd), std::move(ctx));
}

// --- loss terms -----------------------------------------------------------------

namespace {

// surface points p = o + d*w as a tape expression of the depth node
Tensor surface_points_expr(const Tensor& dhat, const std::vector<const Ray*>& rays) {
  std::vector<Tensor> cols;
  cols.reserve(3);
  for (int a = 0; a < 3; ++a) {
    std::vector<double> w(rays.size()), o(rays.size());
    for (std::size_t i = 0; i < rays.size(); ++i) {
      w[i] = rays[i]->dir[a];
      o[i] = rays[i]->origin[a];
    }
    cols.push_back(add(mul(dhat, Tensor({rays.size(), 1}, std::move(w))),
                       Tensor({rays.size(), 1}, std::move(o))));
  }
  return concat(cols, 1);
}

Tensor constant_points(const std::vector<Vec3>& pts) {
  Tensor t = Tensor::zeros({pts.size(), 3});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.values[3 * i + 0] = pts[i].x;
    t.values[3 * i + 1] = pts[i].y;
    t.values[3 * i + 2] = pts[i].z;
  }
  return t;
}

Vec3 row3(const Tensor& t, std::size_t r) {
  return Vec3{t.values[3 * r], t.values[3 * r + 1], t.values[3 * r + 2]};
}

// finite-difference step for probing d(grad f)/dtheta directions
constexpr double kProbeStep = 1e-4;

}  // namespace

TotalLoss total_loss(Tape& tape, const TapeField& tf, const MlpField& field,
                     const std::vector<PixelSample>& samples,
                     const std::vector<Ray>& rays,
                     const std::vector<SurfaceHit>& hits,
                     const PixelPartition& part, const LossConfig& cfg,
                     CounterRng& rng, const RgbFeatureContext* fctx) {
  if (samples.size() != hits.size() || samples.size() != rays.size())
    throw std::invalid_argument("total_loss: samples/rays/hits size mismatch");
  if (cfg.occ_target == OccupancyTarget::HullDepth && !cfg.hull_entry)
    throw std::invalid_argument("total_loss: hull occupancy target needs a hull_entry oracle");
  if (cfg.features == FeatureMode::RgbGradient &&
      (!fctx || !fctx->gt_rgb_at || !fctx->make_ray || !fctx->ray_cfg))
    throw std::invalid_argument("total_loss: gradient features need an RgbFeatureContext");
  register_loss_ops(tape);

  // independent draw streams per term, so configurations that disable one
  // term do not shift another term's samples
  CounterRng normal_rng = rng.fork(1);
  CounterRng freespace_rng = rng.fork(2);
  CounterRng occupancy_rng = rng.fork(3);

  TotalLoss out;
  out.depth_stats = std::make_shared<DepthBackwardStats>();
  out.parts.n_p0 = part.p0.size();
  out.parts.n_p1 = part.p1.size();
  out.parts.n_p2 = part.p2.size();

  std::vector<Tensor> terms;  // weighted scalar contributions on the tape
  const std::vector<Tensor> grad_inputs = tf.grad_inputs();

  // ---- P0: rgb + depth + normal ----
  std::vector<SurfaceHit> p0hits;
  std::vector<const Ray*> p0rays;
  p0hits.reserve(part.p0.size());
  p0rays.reserve(part.p0.size());
  for (std::size_t i : part.p0) {
    p0hits.push_back(hits[i]);
    p0rays.push_back(&rays[i]);
  }

  std::size_t n_depth = 0;
  for (std::size_t i : part.p0)
    if (samples[i].gt_depth) ++n_depth;
  out.parts.n_depth = n_depth;

  const bool want_rgb = cfg.weights.rgb > 0.0 && !part.p0.empty();
  const bool want_depth = cfg.weights.depth > 0.0 && n_depth > 0;
  const bool need_depth_node = want_depth || (want_rgb && cfg.rgb_through_depth);

  Tensor dhat;  // (H,1)
  if (need_depth_node)
    dhat = record_surface_depths(tape, p0hits, field, grad_inputs, out.depth_stats);

  if (want_rgb) {
    const Tensor pts = cfg.rgb_through_depth
                           ? surface_points_expr(dhat, p0rays)
                           : [&] {
                               std::vector<Vec3> v;
                               v.reserve(p0hits.size());
                               for (const auto& h : p0hits) v.push_back(h.p);
                               return constant_points(v);
                             }();
    const FieldOutput fo = tf.forward(pts);

    Tensor pred = fo.rgb;  // (H,3)
    Tensor target = Tensor::zeros({part.p0.size(), 3});
    for (std::size_t k = 0; k < part.p0.size(); ++k) {
      const Vec3& c = samples[part.p0[k]].gt_rgb;
      target.values[3 * k + 0] = c.x;
      target.values[3 * k + 1] = c.y;
      target.values[3 * k + 2] = c.z;
    }

    Tensor residual = sub(pred, target);
    if (cfg.features == FeatureMode::RgbGradient) {
      // finite-difference image gradients as extra feature channels; pixels
      // whose neighbor ray misses keep only the plain rgb part
      std::vector<Tensor> parts_pred{residual};
      const double deltas[2][2] = {{1.0, 0.0}, {0.0, 1.0}};
      for (const auto& dxy : deltas) {
        std::vector<Ray> nrays;
        nrays.reserve(part.p0.size());
        for (std::size_t i : part.p0)
          nrays.push_back(fctx->make_ray(samples[i], dxy[0], dxy[1]));
        const std::vector<SurfaceHit> nhits =
            depth_forward(nrays, field, *fctx->ray_cfg);
        std::vector<double> mask(part.p0.size(), 0.0);
        std::vector<Vec3> npts(part.p0.size());
        for (std::size_t k = 0; k < part.p0.size(); ++k) {
          if (nhits[k].hit) {
            mask[k] = 1.0;
            npts[k] = nhits[k].p;
          } else {
            npts[k] = p0hits[k].p;  // placeholder, masked out below
          }
        }
        // neighbor colors contribute through the texture head only
        const FieldOutput nfo = tf.forward(constant_points(npts));
        // predicted gradient feature: rgb(u+delta) - rgb(u)
        Tensor gpred = sub(nfo.rgb, fo.rgb);
        // observed gradient feature
        Tensor gtarget = Tensor::zeros({part.p0.size(), 3});
        for (std::size_t k = 0; k < part.p0.size(); ++k) {
          const PixelSample& s = samples[part.p0[k]];
          const Vec3 g = fctx->gt_rgb_at(s, dxy[0], dxy[1]) - s.gt_rgb;
          gtarget.values[3 * k + 0] = g.x;
          gtarget.values[3 * k + 1] = g.y;
          gtarget.values[3 * k + 2] = g.z;
        }
        Tensor mask3 = Tensor::zeros({part.p0.size(), 3});
        for (std::size_t k = 0; k < part.p0.size(); ++k)
          for (int c = 0; c < 3; ++c) mask3.values[3 * k + c] = mask[k];
        parts_pred.push_back(mul(sub(gpred, gtarget), mask3));
      }
      residual = concat(parts_pred, 1);
    }

    Tensor rgb_sum = sum(abs_of(residual));
    out.parts.rgb = rgb_sum.values[0] / (cfg.use_means ? part.p0.size() : 1);
    terms.push_back(scale(rgb_sum, cfg.weights.rgb /
                                       (cfg.use_means ? part.p0.size() : 1)));
  }

  if (want_depth) {
    Tensor gt = Tensor::zeros({part.p0.size(), 1});
    Tensor mask = Tensor::zeros({part.p0.size(), 1});
    for (std::size_t k = 0; k < part.p0.size(); ++k) {
      const auto& d = samples[part.p0[k]].gt_depth;
      if (d) {
        gt.values[k] = *d;
        mask.values[k] = 1.0;
      }
    }
    Tensor depth_sum = sum(mul(abs_of(sub(dhat, gt)), mask));
    out.parts.depth = depth_sum.values[0] / (cfg.use_means ? n_depth : 1);
    terms.push_back(
        scale(depth_sum, cfg.weights.depth / (cfg.use_means ? n_depth : 1)));
  }

  if (cfg.weights.normal > 0.0 && !part.p0.empty()) {
    // normals treated on fixed surface points; the parameter gradient of
    // the term flows through the spatial gradient of f via probe points
    const std::size_t h = p0hits.size();
    std::vector<Vec3> qpts(h);
    for (std::size_t k = 0; k < h; ++k) {
      // uniform draw in the eps_n ball
      Vec3 d;
      do {
        d = Vec3{normal_rng.uniform(-1, 1), normal_rng.uniform(-1, 1),
                 normal_rng.uniform(-1, 1)};
      } while (dot(d, d) > 1.0 || dot(d, d) < 1e-18);
      qpts[k] = p0hits[k].p + cfg.normal_radius * d;
    }
    Tensor ppts = Tensor::zeros({h, 3});
    for (std::size_t k = 0; k < h; ++k) {
      ppts.values[3 * k + 0] = p0hits[k].p.x;
      ppts.values[3 * k + 1] = p0hits[k].p.y;
      ppts.values[3 * k + 2] = p0hits[k].p.z;
    }
    const Tensor gp = field.spatial_gradient(ppts);
    const Tensor gq = field.spatial_gradient(constant_points(qpts));

    double value = 0.0;
    std::vector<double> probe_coords;
    std::vector<double> probe_coeffs;
    std::size_t used = 0;
    for (std::size_t k = 0; k < h; ++k) {
      const Vec3 a = row3(gp, k), b = row3(gq, k);
      const double na = norm(a), nb = norm(b);
      if (na <= kDegenerateGradientEps || nb <= kDegenerateGradientEps) {
        ++out.parts.normal_degenerate;
        continue;
      }
      const Vec3 np = a / na, nq = b / nb;
      const Vec3 diff = np - nq;
      const double lu = norm(diff);
      value += lu;
      ++used;
      if (lu < 1e-12) continue;  // flat: zero gradient contribution
      // cotangents dL/dgrad via the normalization jacobian (I - n n^T)/|g|
      const Vec3 cp = (diff - dot(diff, np) * np) / (na * lu);
      const Vec3 cq = -1.0 * (diff - dot(diff, nq) * nq) / (nb * lu);
      const Vec3 pts_k[2] = {p0hits[k].p, qpts[k]};
      const Vec3 cts[2] = {cp, cq};
      for (int s = 0; s < 2; ++s) {
        const double cn = norm(cts[s]);
        if (cn < 1e-14) continue;
        const Vec3 dir = cts[s] / cn;
        // c . grad f == |c| * d/de f(p + e*dir), probed at +-kProbeStep
        const Vec3 pp = pts_k[s] + kProbeStep * dir;
        const Vec3 pm = pts_k[s] - kProbeStep * dir;
        probe_coords.insert(probe_coords.end(), {pp.x, pp.y, pp.z});
        probe_coeffs.push_back(cn / (2.0 * kProbeStep));
        probe_coords.insert(probe_coords.end(), {pm.x, pm.y, pm.z});
        probe_coeffs.push_back(-cn / (2.0 * kProbeStep));
      }
    }
    if (used > 0) {
      auto payload = std::make_shared<FieldProbePayload>();
      payload->points = Tensor({probe_coeffs.size(), 3}, std::move(probe_coords));
      payload->coeffs = std::move(probe_coeffs);
      payload->vjp = [f = &field](const Tensor& p, const std::vector<double>& s) {
        return f->occupancy_vjp(p, s);
      };
      auto ctx = std::make_shared<CustomContext>();
      ctx->extra = payload;
      Tensor nterm =
          tape.record_custom(kFieldProbeOpName, grad_inputs, {1}, {value}, ctx);
      out.parts.normal = value / (cfg.use_means ? used : 1);
      terms.push_back(
          scale(nterm, cfg.weights.normal / (cfg.use_means ? used : 1)));
    }
  }

  // ---- P1: freespace ----
  if (cfg.weights.freespace > 0.0 && !part.p1.empty()) {
    std::vector<Vec3> pts(part.p1.size());
    for (std::size_t k = 0; k < part.p1.size(); ++k) {
      const std::size_t i = part.p1[k];
      if (hits[i].hit) {
        pts[k] = hits[i].p;
      } else {
        const double d = freespace_rng.uniform(rays[i].s0, rays[i].far);
        pts[k] = rays[i].origin + d * rays[i].dir;
      }
    }
    const FieldOutput fo = tf.forward(constant_points(pts));
    Tensor fs_sum = sum(record_bce(tape, fo.occ, std::vector<double>(pts.size(), 0.0)));
    out.parts.freespace = fs_sum.values[0] / (cfg.use_means ? pts.size() : 1);
    terms.push_back(
        scale(fs_sum, cfg.weights.freespace / (cfg.use_means ? pts.size() : 1)));
  }

  // ---- P2: occupancy ----
  if (cfg.weights.occupancy > 0.0 && !part.p2.empty()) {
    std::vector<Vec3> pts(part.p2.size());
    for (std::size_t k = 0; k < part.p2.size(); ++k) {
      const std::size_t i = part.p2[k];
      double d;
      switch (cfg.occ_target) {
        case OccupancyTarget::GtDepth:
          if (!samples[i].gt_depth)
            throw std::invalid_argument(
                "total_loss: GtDepth occupancy target but sample has no depth");
          d = *samples[i].gt_depth;
          break;
        case OccupancyTarget::HullDepth: {
          const auto hd = cfg.hull_entry(rays[i]);
          d = hd ? *hd : occupancy_rng.uniform(rays[i].s0, rays[i].far);
          break;
        }
        case OccupancyTarget::RandomDepth:
        default:
          d = occupancy_rng.uniform(rays[i].s0, rays[i].far);
          break;
      }
      pts[k] = rays[i].origin + d * rays[i].dir;
    }
    const FieldOutput fo = tf.forward(constant_points(pts));
    Tensor occ_sum = sum(record_bce(tape, fo.occ, std::vector<double>(pts.size(), 1.0)));
    out.parts.occupancy = occ_sum.values[0] / (cfg.use_means ? pts.size() : 1);
    terms.push_back(
        scale(occ_sum, cfg.weights.occupancy / (cfg.use_means ? pts.size() : 1)));
  }

  // ---- weighted combination ----
  if (terms.empty()) {
    out.value = Tensor::scalar(0.0);
  } else {
    Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    out.value = total;
  }
  out.parts.total = out.value.values[0];
  return out;
}

}  // namespace isoray
