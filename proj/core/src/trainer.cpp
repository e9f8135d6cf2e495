#include "isoray/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace isoray {

void TrainConfig::validate() const {
  if (pixels_per_view < 1)
    throw std::invalid_argument("TrainConfig: pixels_per_view must be >= 1");
  if (views_per_batch < 1)
    throw std::invalid_argument("TrainConfig: views_per_batch must be >= 1");
  if (iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
  if (width == 0 || blocks == 0)
    throw std::invalid_argument("TrainConfig: width and blocks must be positive");
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("TrainConfig: tau must be in (0,1)");
  if (!(s0 > 0.0 && s0 < far))
    throw std::invalid_argument("TrainConfig: need 0 < s0 < far");
  if (n_schedule.empty() || lr_schedule.empty())
    throw std::invalid_argument("TrainConfig: schedules must be non-empty");
  for (std::size_t i = 1; i < n_schedule.size(); ++i)
    if (n_schedule[i].iteration <= n_schedule[i - 1].iteration)
      throw std::invalid_argument("TrainConfig: n schedule must be strictly increasing");
  for (std::size_t i = 1; i < lr_schedule.size(); ++i)
    if (lr_schedule[i].iteration <= lr_schedule[i - 1].iteration)
      throw std::invalid_argument("TrainConfig: lr schedule must be strictly increasing");
  for (const auto& e : n_schedule)
    if (e.n < 2) throw std::invalid_argument("TrainConfig: scheduled n must be >= 2");
  if (checkpoint_every == 0 || log_every == 0)
    throw std::invalid_argument("TrainConfig: cadences must be positive");
}

std::size_t TrainConfig::n_at(std::size_t iteration) const {
  std::size_t n = n_schedule.front().n;
  for (const auto& e : n_schedule)
    if (e.iteration <= iteration) n = e.n;
  return n;
}

double TrainConfig::lr_at(std::size_t iteration) const {
  double lr = lr_schedule.front().lr;
  for (const auto& e : lr_schedule)
    if (e.iteration <= iteration) lr = e.lr;
  return lr;
}

RaySamplingConfig TrainConfig::ray_config(std::size_t iteration) const {
  RaySamplingConfig rc;
  rc.n = n_at(iteration);
  rc.s0 = s0;
  rc.step = (far - s0) / static_cast<double>(rc.n);
  rc.tau = tau;
  rc.secant_iters = secant_iters;
  rc.secant_tol = secant_tol;
  rc.roi_radius = roi_radius;
  rc.clip_samples_to_roi = clip_samples_to_roi;
  return rc;
}

AdamState make_adam_state(const FieldParams& params, std::size_t latent_dim) {
  AdamState st;
  st.m.reserve(params.arrays.size());
  st.v.reserve(params.arrays.size());
  for (const Tensor& a : params.arrays) {
    st.m.emplace_back(a.size(), 0.0);
    st.v.emplace_back(a.size(), 0.0);
  }
  st.m_z.assign(latent_dim, 0.0);
  st.v_z.assign(latent_dim, 0.0);
  return st;
}

namespace {

void adam_update(std::vector<double>& x, const std::vector<double>& g,
                 std::vector<double>& m, std::vector<double>& v, double lr,
                 const AdamHyper& hp, double bc1, double bc2) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    x[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

}  // namespace

void adam_step(FieldParams& params, LatentCode* z,
               const std::vector<std::vector<double>>& param_grads,
               const std::vector<double>* z_grad, AdamState& state, double lr,
               const AdamHyper& hp) {
  if (param_grads.size() != params.arrays.size())
    throw std::invalid_argument("adam_step: gradient array count mismatch");
  for (std::size_t a = 0; a < param_grads.size(); ++a)
    if (param_grads[a].size() != params.arrays[a].size())
      throw std::invalid_argument("adam_step: gradient shape mismatch at array " +
                                  std::to_string(a));
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t a = 0; a < param_grads.size(); ++a)
    adam_update(params.arrays[a].values, param_grads[a], state.m[a], state.v[a],
                lr, hp, bc1, bc2);
  if (z && z_grad) {
    if (z_grad->size() != z->size() || state.m_z.size() != z->size())
      throw std::invalid_argument("adam_step: latent gradient shape mismatch");
    adam_update(*z, *z_grad, state.m_z, state.v_z, lr, hp, bc1, bc2);
  }
}

std::vector<PixelSample> sample_pixels(const ViewData& view, int view_index,
                                       std::size_t n_p, CounterRng& rng) {
  std::vector<PixelSample> out;
  out.reserve(n_p);
  for (std::size_t s = 0; s < n_p; ++s) {
    const std::size_t px = rng.next_below(view.width);
    const std::size_t py = rng.next_below(view.height);
    PixelSample ps;
    ps.view = view_index;
    ps.ux = static_cast<double>(px) + 0.5;
    ps.uy = static_cast<double>(py) + 0.5;
    ps.gt_rgb = view.rgb_at(px, py);
    ps.in_mask = view.mask_at(px, py);
    const float d = view.depth[py * view.width + px];
    if (view.has_depth && ps.in_mask && std::isfinite(d)) ps.gt_depth = d;
    out.push_back(ps);
  }
  return out;
}

// --- trainer checkpoint -----------------------------------------------------

namespace {

void append_f64s(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
void read_f64s_or_throw(std::istream& is, std::vector<double>& v,
                        const std::string& path, const char* what) {
  if (!is.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw std::runtime_error(path + ": truncated reading " + what);
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
std::uint64_t read_u64(std::istream& is, const std::string& path, const char* what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8))
    throw std::runtime_error(path + ": truncated reading " + what);
  return v;
}

}  // namespace

void save_trainer_checkpoint(const std::string& path, const TrainerCheckpoint& ck) {
  save_field(path, ck.params, ck.codes);
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw std::runtime_error("save_trainer_checkpoint: cannot append to " + path);
  const std::uint32_t has_opt = 1;
  os.write(reinterpret_cast<const char*>(&has_opt), 4);
  write_u64(os, ck.iteration);
  write_u64(os, ck.adam.step);
  write_u64(os, ck.skipped);
  for (const auto& m : ck.adam.m) append_f64s(os, m);
  for (const auto& v : ck.adam.v) append_f64s(os, v);
  append_f64s(os, ck.adam.m_z);
  append_f64s(os, ck.adam.v_z);
  if (!os)
    throw std::runtime_error("save_trainer_checkpoint: write failed for " + path);
}

TrainerCheckpoint load_trainer_checkpoint(const std::string& path) {
  FieldSnapshot snap = load_field(path);
  TrainerCheckpoint ck;
  ck.params = std::move(snap.params);
  ck.codes = std::move(snap.codes);
  ck.adam = make_adam_state(ck.params, ck.params.latent_dim);

  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_trainer_checkpoint: cannot open " + path);
  // skip past the field section: header + arrays + codes
  std::size_t offset = 4 + 4 * 4;
  offset += ck.params.parameter_count() * sizeof(double);
  offset += 4 + ck.codes.size() * ck.params.latent_dim * sizeof(double);
  is.seekg(static_cast<std::streamoff>(offset));
  std::uint32_t has_opt = 0;
  if (!is.read(reinterpret_cast<char*>(&has_opt), 4) || has_opt != 1)
    throw std::runtime_error(path + ": no optimizer section (not a trainer checkpoint)");
  ck.iteration = read_u64(is, path, "iteration");
  ck.adam.step = read_u64(is, path, "adam step");
  ck.skipped = read_u64(is, path, "skipped count");
  for (auto& m : ck.adam.m) read_f64s_or_throw(is, m, path, "adam m");
  for (auto& v : ck.adam.v) read_f64s_or_throw(is, v, path, "adam v");
  read_f64s_or_throw(is, ck.adam.m_z, path, "adam m_z");
  read_f64s_or_throw(is, ck.adam.v_z, path, "adam v_z");
  return ck;
}

// --- fit ----------------------------------------------------------------------

namespace {

bool all_finite(const std::vector<std::vector<double>>& grads,
                const std::vector<double>* zg) {
  for (const auto& g : grads)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  if (zg)
    for (double v : *zg)
      if (!std::isfinite(v)) return false;
  return true;
}

std::string checkpoint_name(const std::string& dir, std::size_t iter) {
  std::ostringstream os;
  os << dir << "/ckpt_" << std::setw(6) << std::setfill('0') << iter << ".irf";
  return os.str();
}

}  // namespace

FitResult fit(const MultiViewDataset& data, const TrainConfig& cfg,
              const FitOptions& opt) {
  cfg.validate();
  if (data.views.empty()) throw std::invalid_argument("fit: empty dataset");
  for (const ViewData& v : data.views)
    if (v.width == 0 || v.height == 0 || v.rgb.size() != v.width * v.height * 3)
      throw std::invalid_argument("fit: dataset view with inconsistent buffers");

  namespace fs = std::filesystem;
  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);

  FieldParams params;
  std::vector<LatentCode> codes;
  AdamState adam;
  std::size_t start_iter = 0;
  std::size_t skipped = 0;
  if (!opt.resume_checkpoint.empty()) {
    TrainerCheckpoint ck = load_trainer_checkpoint(opt.resume_checkpoint);
    if (ck.params.width != cfg.width || ck.params.blocks != cfg.blocks ||
        ck.params.latent_dim != cfg.latent_dim)
      throw std::invalid_argument("fit: resume checkpoint architecture differs from config");
    params = std::move(ck.params);
    codes = std::move(ck.codes);
    adam = std::move(ck.adam);
    start_iter = ck.iteration;
    skipped = ck.skipped;
  } else {
    params = init_field(cfg.width, cfg.blocks, cfg.latent_dim, cfg.seed);
    codes.assign(1, LatentCode(cfg.latent_dim, 0.0));
    adam = make_adam_state(params, cfg.latent_dim);
  }
  const bool train_z = cfg.latent_dim > 0;

  std::ofstream log;
  if (!opt.out_dir.empty()) {
    log.open(opt.out_dir + "/metrics.log", std::ios::app);
    if (!log) throw std::runtime_error("fit: cannot open metrics log in " + opt.out_dir);
  }

  // optional visual-hull oracle for the occupancy loss
  std::function<std::optional<double>(const Ray&)> hull_oracle;
  if (cfg.occ_target == OccupancyTarget::HullDepth) {
    const double step = (cfg.far - cfg.s0) / 256.0;
    hull_oracle = [&data, step](const Ray& r) {
      return hull_entry_depth(data, r, step);
    };
  }

  const AdamHyper hp{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  std::size_t excluded_total = 0;

  for (std::size_t iter = start_iter; iter < cfg.iterations; ++iter) {
    const RaySamplingConfig rc = cfg.ray_config(iter);
    CounterRng view_rng(cfg.seed, 0x76696577ull /* view */, iter);
    CounterRng pix_rng(cfg.seed, 0x70697865ull /* pixe */, iter);
    CounterRng loss_rng(cfg.seed, 0x6c6f7373ull /* loss */, iter);

    std::vector<PixelSample> samples;
    std::vector<Ray> rays;
    for (std::size_t vb = 0; vb < cfg.views_per_batch; ++vb) {
      const std::size_t vi = view_rng.next_below(data.views.size());
      const ViewData& view = data.views[vi];
      std::vector<PixelSample> vs =
          sample_pixels(view, static_cast<int>(vi), cfg.pixels_per_view, pix_rng);
      for (PixelSample& s : vs) {
        rays.push_back(pixel_to_ray(view.camera, s.ux, s.uy, cfg.s0, cfg.far));
        samples.push_back(std::move(s));
      }
    }

    MlpField field(params, codes[0], train_z);
    const std::vector<SurfaceHit> hits = depth_forward(rays, field, rc);
    const PixelPartition part = classify(samples, hits);

    LossConfig lc;
    lc.weights = cfg.weights;
    lc.occ_target = cfg.occ_target;
    lc.features = cfg.features;
    lc.normal_radius = cfg.normal_radius;
    lc.hull_entry = hull_oracle;

    RgbFeatureContext fctx;
    std::optional<RgbFeatureContext> fctx_opt;
    if (cfg.features == FeatureMode::RgbGradient) {
      fctx.ray_cfg = &rc;
      fctx.gt_rgb_at = [&](const PixelSample& s, double dx, double dy) {
        const ViewData& view = data.views[static_cast<std::size_t>(s.view)];
        const std::size_t px = static_cast<std::size_t>(std::clamp(
            s.ux - 0.5 + dx, 0.0, static_cast<double>(view.width - 1)));
        const std::size_t py = static_cast<std::size_t>(std::clamp(
            s.uy - 0.5 + dy, 0.0, static_cast<double>(view.height - 1)));
        return view.rgb_at(px, py);
      };
      fctx.make_ray = [&](const PixelSample& s, double dx, double dy) {
        const ViewData& view = data.views[static_cast<std::size_t>(s.view)];
        const double ux = std::clamp(s.ux + dx, 0.5, static_cast<double>(view.width) - 0.5);
        const double uy = std::clamp(s.uy + dy, 0.5, static_cast<double>(view.height) - 0.5);
        return pixel_to_ray(view.camera, ux, uy, cfg.s0, cfg.far);
      };
      fctx_opt = fctx;
    }

    Tape tape;
    TapeField tf = attach_field(tape, params, codes[0], train_z);
    TotalLoss loss = total_loss(tape, tf, field, samples, rays, hits, part, lc,
                                loss_rng, fctx_opt ? &*fctx_opt : nullptr);
    excluded_total += loss.depth_stats->excluded;

    std::vector<std::vector<double>> grads(params.arrays.size());
    std::vector<double> z_grad(cfg.latent_dim, 0.0);
    if (loss.value.on_tape()) {
      GradientMap g = tape.backward(loss.value, 1.0);
      for (std::size_t a = 0; a < tf.leaves.size(); ++a)
        grads[a] = grad_of(g, tf.leaves[a]).values;
      if (train_z) z_grad = grad_of(g, tf.z_leaf).values;
    } else {
      for (std::size_t a = 0; a < params.arrays.size(); ++a)
        grads[a].assign(params.arrays[a].size(), 0.0);
    }

    if (!all_finite(grads, train_z ? &z_grad : nullptr)) {
      ++skipped;  // keep the parameters; surfaced in the log
      if (log && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations))
        log << "iter=" << iter << " skipped=nonfinite_gradient\n";
      continue;
    }

    adam_step(params, train_z ? &codes[0] : nullptr, grads,
              train_z ? &z_grad : nullptr, adam, cfg.lr_at(iter), hp);

    if (log && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations)) {
      log << "iter=" << iter << " total=" << loss.parts.total
          << " rgb=" << loss.parts.rgb << " depth=" << loss.parts.depth
          << " freespace=" << loss.parts.freespace
          << " occupancy=" << loss.parts.occupancy
          << " normal=" << loss.parts.normal << " p0=" << loss.parts.n_p0
          << " p1=" << loss.parts.n_p1 << " p2=" << loss.parts.n_p2
          << " n=" << rc.n << " lr=" << cfg.lr_at(iter)
          << " excluded=" << excluded_total << " skipped=" << skipped << "\n";
      log.flush();
      if (!log) throw std::runtime_error("fit: metrics log write failed");
    }

    const std::size_t done = iter + 1;
    if (!opt.out_dir.empty() &&
        (done % cfg.checkpoint_every == 0 || done == cfg.iterations)) {
      TrainerCheckpoint ck;
      ck.params = params;
      ck.codes = codes;
      ck.adam = adam;
      ck.iteration = done;
      ck.skipped = skipped;
      save_trainer_checkpoint(checkpoint_name(opt.out_dir, done), ck);
    }
  }

  FitResult res;
  res.params = std::move(params);
  res.codes = std::move(codes);
  res.adam = std::move(adam);
  res.iterations_run = cfg.iterations - start_iter;
  res.skipped = skipped;
  if (!opt.out_dir.empty())
    res.checkpoint_path = checkpoint_name(opt.out_dir, cfg.iterations);
  return res;
}

}  // namespace isoray
