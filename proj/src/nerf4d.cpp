#include "sv4d/nerf4d.hpp"

#include <algorithm>
#include <numeric>

#include "sv4d/checkpoint.hpp"

namespace sv4d {

using ad::Mat;
using ad::Tape;
using ad::Var;

void NerfConfig::validate() const {
  if (hash_levels < 1 || hash_features < 1 || base_resolution < 2 || mlp_width < 4 ||
      geo_features < 1 || time_freq_count < 1 || n_samples < 8)
    throw ConfigError("NerfConfig: invalid dimensions");
  if (growth <= 1.0) throw ConfigError("NerfConfig: growth must be > 1");
  if (log2_table_size < 4 || log2_table_size > 24)
    throw ConfigError("NerfConfig: log2_table_size out of range");
  if (scene_radius <= 0.0) throw ConfigError("NerfConfig: scene_radius must be > 0");
}

nlohmann::json NerfConfig::to_json() const {
  return {{"hash_levels", hash_levels},
          {"hash_features", hash_features},
          {"log2_table_size", log2_table_size},
          {"base_resolution", base_resolution},
          {"growth", growth},
          {"mlp_width", mlp_width},
          {"geo_features", geo_features},
          {"time_freq_count", time_freq_count},
          {"scene_radius", scene_radius},
          {"n_samples", n_samples}};
}

NerfConfig NerfConfig::from_json(const nlohmann::json& j) {
  NerfConfig c;
  c.hash_levels = j.at("hash_levels").get<int>();
  c.hash_features = j.at("hash_features").get<int>();
  c.log2_table_size = j.at("log2_table_size").get<int>();
  c.base_resolution = j.at("base_resolution").get<int>();
  c.growth = j.at("growth").get<double>();
  c.mlp_width = j.at("mlp_width").get<int>();
  c.geo_features = j.at("geo_features").get<int>();
  c.time_freq_count = j.at("time_freq_count").get<int>();
  c.scene_radius = j.at("scene_radius").get<double>();
  c.n_samples = j.at("n_samples").get<int>();
  c.validate();
  return c;
}

namespace {
// density starts low so the field begins nearly empty
constexpr double kDensityBias = -2.5;
}

DynamicNerf::DynamicNerf(const NerfConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed ^ 0x4E2Full);

  grid_meta_.levels = config.hash_levels;
  grid_meta_.features = config.hash_features;
  grid_meta_.table_size = 1 << config.log2_table_size;
  for (int l = 0; l < config.hash_levels; ++l)
    grid_meta_.resolutions.push_back(
        static_cast<int>(std::floor(config.base_resolution * std::pow(config.growth, l))));

  Mat table(static_cast<long>(grid_meta_.levels) * grid_meta_.table_size, grid_meta_.features);
  for (long i = 0; i < table.size(); ++i) table.data()[i] = rng.uniform(-1e-4, 1e-4);
  hash_table_param_ = params_.add("hash_table", std::move(table));

  const int feat = config.hash_levels * config.hash_features;
  sigma_fc1_ = nn::Linear(params_, "sigma.fc1", feat, config.mlp_width, rng);
  sigma_fc2_ = nn::Linear(params_, "sigma.fc2", config.mlp_width, 1 + config.geo_features, rng);
  color_fc1_ = nn::Linear(params_, "color.fc1", config.geo_features, config.mlp_width, rng);
  color_fc2_ = nn::Linear(params_, "color.fc2", config.mlp_width, 3, rng);

  const int deform_in = 3 + 2 * config.time_freq_count;
  deform_fc1_ = nn::Linear(params_, "deform.fc1", deform_in, config.mlp_width, rng);
  deform_fc2_ = nn::Linear(params_, "deform.fc2", config.mlp_width, config.mlp_width, rng);
  // zero-init output: deformation starts as the identity
  deform_fc3_ = nn::Linear(params_, "deform.fc3", config.mlp_width, 3, rng, 1.0, true);

  for (size_t i = 0; i < params_.count(); ++i) {
    const std::string& name = params_.entry(static_cast<int>(i)).name;
    if (name.rfind("deform.", 0) == 0)
      deform_ids_.push_back(static_cast<int>(i));
    else
      canonical_ids_.push_back(static_cast<int>(i));
  }

  freq_mask_.assign(config.time_freq_count, 0.0);
}

Var DynamicNerf::deform_on_tape(Tape& tape, const std::vector<Var>& p, Var positions,
                                double t) const {
  const long n = positions.val().rows();
  Mat enc(1, 2 * config_.time_freq_count);
  for (int k = 0; k < config_.time_freq_count; ++k) {
    const double arg = std::ldexp(kPi * t, k);  // 2^k * pi * t
    enc(0, 2 * k) = freq_mask_[k] * std::sin(arg);
    enc(0, 2 * k + 1) = freq_mask_[k] * std::cos(arg);
  }
  Var enc_rows = ad::repeat_interleave_rows(tape.constant(std::move(enc)), static_cast<int>(n));
  Var input = ad::concat_cols({positions, enc_rows});
  Var h = ad::silu(deform_fc1_(p, input));
  h = ad::silu(deform_fc2_(p, h));
  Var delta = deform_fc3_(p, h);
  return ad::add(positions, delta);
}

std::pair<Var, Var> DynamicNerf::query_on_tape(Tape& tape, const std::vector<Var>& p,
                                               Var positions, double t) const {
  Var canonical = deform_on_tape(tape, p, positions, t);
  const double r = config_.scene_radius;
  Var unit = ad::scale(ad::add_scalar(canonical, r), 1.0 / (2.0 * r));
  Var feat = ad::hash_lookup(p[hash_table_param_], unit, grid_meta_);
  Var h = ad::silu(sigma_fc1_(p, feat));
  Var out = sigma_fc2_(p, h);
  Var density = ad::softplus(ad::add_scalar(ad::slice_cols(out, 0, 1), kDensityBias));
  Var geo = ad::slice_cols(out, 1, config_.geo_features);
  Var color = ad::sigmoid(color_fc2_(p, ad::silu(color_fc1_(p, geo))));
  return {density, color};
}

Var DynamicNerf::density_on_tape(Tape& tape, const std::vector<Var>& p, Var positions,
                                 double t) const {
  Var canonical = deform_on_tape(tape, p, positions, t);
  const double r = config_.scene_radius;
  Var unit = ad::scale(ad::add_scalar(canonical, r), 1.0 / (2.0 * r));
  Var feat = ad::hash_lookup(p[hash_table_param_], unit, grid_meta_);
  Var h = ad::silu(sigma_fc1_(p, feat));
  Var out = sigma_fc2_(p, h);
  return ad::softplus(ad::add_scalar(ad::slice_cols(out, 0, 1), kDensityBias));
}

RadianceSample query(const DynamicNerf& nerf, const Vec3& x, double t) {
  Tape tape;
  const auto p = nerf.params().constants(tape);
  Mat pos(1, 3);
  pos << x[0], x[1], x[2];
  auto [density, color] = nerf.query_on_tape(tape, p, tape.constant(std::move(pos)), t);
  RadianceSample s;
  s.density = density.val()(0, 0);
  for (int c = 0; c < 3; ++c) s.color[c] = color.val()(0, c);
  return s;
}

Vec3 deform(const DynamicNerf& nerf, const Vec3& x, double t) {
  Tape tape;
  const auto p = nerf.params().constants(tape);
  Mat pos(1, 3);
  pos << x[0], x[1], x[2];
  const Var out = nerf.deform_on_tape(tape, p, tape.constant(std::move(pos)), t);
  return {out.val()(0, 0), out.val()(0, 1), out.val()(0, 2)};
}

namespace {

Var normalize_rows(Var x, double eps = 1e-12) {
  Var norm = ad::sqrt_(ad::add_scalar(ad::rowwise_sum(ad::square(x)), eps));
  return ad::scale_rows(x, ad::reciprocal(norm));
}

}  // namespace

RenderVars render_on_tape(Tape& tape, const std::vector<Var>& p, const DynamicNerf& nerf,
                          const CameraTrajectory& trajectory, int view, double t,
                          const RenderOptions& options) {
  const NerfConfig& cfg = nerf.config();
  const int res = options.resolution;
  const int samples = options.n_samples;
  const CameraFrame cam = camera_frame(trajectory, view);
  const double near = std::max(0.05, trajectory.distance - cfg.scene_radius);
  const double far = trajectory.distance + cfg.scene_radius;

  std::vector<int> pixels;
  if (options.pixels) {
    pixels = *options.pixels;
  } else {
    pixels.resize(static_cast<size_t>(res) * res);
    std::iota(pixels.begin(), pixels.end(), 0);
  }
  const long n_rays = static_cast<long>(pixels.size());

  std::optional<Rng> strat;
  if (options.stratified_seed != 0) strat.emplace(options.stratified_seed);

  Mat points(n_rays * samples, 3);
  std::vector<double> delta(n_rays * samples);
  std::vector<double> tdist(n_rays * samples);
  const double bin = (far - near) / samples;
  for (long i = 0; i < n_rays; ++i) {
    const int y = pixels[i] / res, x = pixels[i] % res;
    const Vec3 dir = pixel_ray_direction(cam, trajectory.fov_deg, res, x, y);
    for (int j = 0; j < samples; ++j) {
      const double u = strat ? strat->uniform() : 0.5;
      const double td = near + (j + u) * bin;
      const long row = i * samples + j;
      for (int a = 0; a < 3; ++a) points(row, a) = cam.position[a] + td * dir[a];
      delta[row] = bin;
      tdist[row] = td;
    }
  }

  // samples outside the scene box contribute nothing: without this, clamped
  // hash lookups would smear face density outward along the rays
  Mat inside(n_rays * samples, 1);
  for (long i = 0; i < n_rays * samples; ++i) {
    const bool in_box = std::abs(points(i, 0)) <= cfg.scene_radius &&
                        std::abs(points(i, 1)) <= cfg.scene_radius &&
                        std::abs(points(i, 2)) <= cfg.scene_radius;
    inside(i, 0) = in_box ? 1.0 : 0.0;
  }

  Var pts = tape.constant(points);
  auto [density, color] = nerf.query_on_tape(tape, p, pts, t);
  density = ad::cmul(density, tape.constant(std::move(inside)));
  Var w = ad::composite_weights(density, delta, samples);

  Var alpha = ad::segment_sum(w, samples);
  Var rgb_fg = ad::segment_sum(ad::scale_rows(color, w), samples);
  Var one_minus_alpha = ad::add_scalar(ad::neg(alpha), 1.0);
  Var rgb = ad::add(rgb_fg, ad::concat_cols({one_minus_alpha, one_minus_alpha, one_minus_alpha}));

  Mat tcol(n_rays * samples, 1);
  for (long i = 0; i < n_rays * samples; ++i) tcol(i, 0) = tdist[i];
  Var depth_fg = ad::segment_sum(ad::scale_rows(tape.constant(std::move(tcol)), w), samples);
  Var depth = ad::add(depth_fg, ad::scale(one_minus_alpha, far));

  RenderVars out;
  out.rgb = rgb;
  out.alpha = alpha;
  out.depth = depth;
  out.pixels = pixels;
  out.resolution = res;

  if (options.with_normals) {
    // finite-difference density gradient; part of the graph so normal losses
    // backpropagate into the field
    const double h = 1e-3 * cfg.scene_radius;
    std::vector<Var> grads;
    for (int a = 0; a < 3; ++a) {
      Mat hi = points, lo = points;
      hi.col(a).array() += h;
      lo.col(a).array() -= h;
      Var dhi = nerf.density_on_tape(tape, p, tape.constant(std::move(hi)), t);
      Var dlo = nerf.density_on_tape(tape, p, tape.constant(std::move(lo)), t);
      grads.push_back(ad::scale(ad::sub(dhi, dlo), 1.0 / (2.0 * h)));
    }
    Var grad = ad::concat_cols(grads);
    Var n_unit = normalize_rows(ad::neg(grad), 1e-9);
    out.normal = ad::segment_sum(ad::scale_rows(n_unit, w), samples);
  }
  return out;
}

RenderOutput render_image(const DynamicNerf& nerf, const CameraTrajectory& trajectory, int view,
                          double t, int resolution, int n_samples, bool with_normals) {
  if (n_samples < 8) throw std::invalid_argument("render_image: n_samples must be >= 8");
  Tape tape;
  const auto p = nerf.params().constants(tape);
  RenderOptions opts;
  opts.resolution = resolution;
  opts.n_samples = n_samples;
  opts.with_normals = with_normals;
  const RenderVars rv = render_on_tape(tape, p, nerf, trajectory, view, t, opts);

  RenderOutput out;
  out.rgb = Image(3, resolution, resolution);
  out.alpha = Mask(1, resolution, resolution);
  out.depth = Depth(1, resolution, resolution);
  out.normal = Image(3, resolution, resolution);
  for (long i = 0; i < static_cast<long>(rv.pixels.size()); ++i) {
    const int y = rv.pixels[i] / resolution, x = rv.pixels[i] % resolution;
    for (int c = 0; c < 3; ++c) out.rgb.at(c, y, x) = std::clamp(rv.rgb.val()(i, c), 0.0, 1.0);
    out.alpha.at(0, y, x) = std::clamp(rv.alpha.val()(i, 0), 0.0, 1.0);
    out.depth.at(0, y, x) = rv.depth.val()(i, 0);
    if (with_normals) {
      double n[3], norm = 0.0;
      for (int c = 0; c < 3; ++c) {
        n[c] = rv.normal.val()(i, c);
        norm += n[c] * n[c];
      }
      norm = std::sqrt(norm);
      if (norm > 1e-6)
        for (int c = 0; c < 3; ++c) out.normal.at(c, y, x) = n[c] / norm;
    }
  }
  return out;
}

namespace {

// Row-major [256 x res^2] area-resize matrix down to the embedder thumbnail.
Mat thumb_matrix(int res) {
  Mat m = Mat::Zero(256, static_cast<long>(res) * res);
  const double s = res / 16.0;
  for (int oy = 0; oy < 16; ++oy)
    for (int ox = 0; ox < 16; ++ox) {
      const double y0 = oy * s, y1 = (oy + 1) * s, x0 = ox * s, x1 = (ox + 1) * s;
      double area = 0.0;
      for (int y = static_cast<int>(y0); y < res && y < y1; ++y) {
        const double hy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        for (int x = static_cast<int>(x0); x < res && x < x1; ++x) {
          const double hx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          m(oy * 16 + ox, static_cast<long>(y) * res + x) = hy * hx;
          area += hy * hx;
        }
      }
      if (area > 0.0) m.row(oy * 16 + ox) /= area;
    }
  return m;
}

bool is_full_image(const RenderVars& render) {
  return static_cast<long>(render.pixels.size()) ==
         static_cast<long>(render.resolution) * render.resolution;
}

double bilateral_weight(const Image& img, int pa, int pb, double tau) {
  const int res = img.width;
  double g = 0.0;
  for (int c = 0; c < img.channels; ++c)
    g += std::abs(img.data[static_cast<size_t>(c) * res * res + pa] -
                  img.data[static_cast<size_t>(c) * res * res + pb]);
  g /= img.channels;
  return std::exp(-g / tau);
}

}  // namespace

ad::Var losses_on_tape(Tape& tape, const RenderVars& render, const CellTarget& target,
                       const LossWeights& weights, const ImageEmbedder* embedder,
                       NamedLosses* breakdown) {
  if (!target.image || !target.mask)
    throw std::invalid_argument("losses_on_tape: image and mask targets are required");
  const long n = static_cast<long>(render.pixels.size());
  const int res = render.resolution;
  if (target.image->height != res || target.image->width != res)
    throw std::invalid_argument("losses_on_tape: target resolution mismatch");

  Mat tgt_rgb(n, 3), tgt_mask(n, 1);
  for (long i = 0; i < n; ++i) {
    const int y = render.pixels[i] / res, x = render.pixels[i] % res;
    for (int c = 0; c < 3; ++c) tgt_rgb(i, c) = target.image->at(c, y, x);
    tgt_mask(i, 0) = target.mask->at(0, y, x);
  }

  NamedLosses named;
  Var mse = ad::mean_all(ad::square(ad::sub(render.rgb, tape.constant(tgt_rgb))));
  Var mask = ad::mean_all(ad::square(ad::sub(render.alpha, tape.constant(tgt_mask))));
  named.mse = mse.val()(0, 0);
  named.mask = mask.val()(0, 0);
  Var total = ad::add(ad::scale(mse, weights.mse), ad::scale(mask, weights.mask));

  // perceptual term: differentiable only through linear embedders, and only
  // on full-image renders. At power-of-two render sizes the three pyramid
  // scales collapse to the same 16x16 thumbnail, so one scale reproduces
  // perceptual_distance exactly.
  if (weights.perceptual > 0.0 && embedder && is_full_image(render)) {
    const std::vector<double> proj = embedder->projection_matrix();
    if (!proj.empty()) {
      const int dim = embedder->dim();
      Mat proj_t(768, dim);
      for (int d = 0; d < dim; ++d)
        for (int i = 0; i < 768; ++i) proj_t(i, d) = proj[static_cast<size_t>(d) * 768 + i];
      Var thumb = ad::matmul(tape.constant(thumb_matrix(res)), render.rgb);  // [256,3]
      Var thumb_t = ad::transpose(thumb);                                    // [3,256]
      Var flat = ad::concat_cols({ad::gather_rows(thumb_t, {0}), ad::gather_rows(thumb_t, {1}),
                                  ad::gather_rows(thumb_t, {2})});           // [1,768]
      Var e = normalize_rows(ad::matmul(flat, tape.constant(std::move(proj_t))));
      const std::vector<double> te = embedder->embed(*target.image);
      Mat te_mat(1, dim);
      for (int d = 0; d < dim; ++d) te_mat(0, d) = te[d];
      Var dist = ad::sum_all(ad::square(ad::sub(e, tape.constant(std::move(te_mat)))));
      named.perceptual = dist.val()(0, 0);
      total = ad::add(total, ad::scale(dist, weights.perceptual));
    }
  }

  const bool have_normals = render.normal.valid();
  if (weights.normal > 0.0 && have_normals && target.normal) {
    Mat tgt_n(n, 3), fg(n, 1);
    double count = 0.0;
    for (long i = 0; i < n; ++i) {
      const int y = render.pixels[i] / res, x = render.pixels[i] % res;
      double norm = 0.0;
      for (int c = 0; c < 3; ++c) {
        tgt_n(i, c) = target.normal->at(c, y, x);
        norm += tgt_n(i, c) * tgt_n(i, c);
      }
      fg(i, 0) = (tgt_mask(i, 0) > 0.5 && norm > 0.25) ? 1.0 : 0.0;
      count += fg(i, 0);
    }
    if (count > 0.0) {
      Var n_hat = normalize_rows(render.normal, 1e-9);
      Var cosine = ad::rowwise_sum(ad::cmul(n_hat, tape.constant(std::move(tgt_n))));
      Var penalty = ad::cmul(ad::add_scalar(ad::neg(cosine), 1.0), tape.constant(std::move(fg)));
      Var normal_loss = ad::scale(ad::sum_all(penalty), 1.0 / count);
      named.normal = normal_loss.val()(0, 0);
      total = ad::add(total, ad::scale(normal_loss, weights.normal));
    }
  }

  if ((weights.smooth_depth > 0.0 || weights.smooth_normal > 0.0) && is_full_image(render)) {
    // smoothness priors act on surfaces: restrict pairs to target foreground
    std::vector<int> pa, pb;
    std::vector<double> wbi;
    auto fg = [&](int i) { return target.mask->data[i] > 0.5; };
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const int i = y * res + x;
        if (x + 1 < res && fg(i) && fg(i + 1)) {
          pa.push_back(i);
          pb.push_back(i + 1);
          wbi.push_back(bilateral_weight(*target.image, i, i + 1, weights.bilateral_tau));
        }
        if (y + 1 < res && fg(i) && fg(i + res)) {
          pa.push_back(i);
          pb.push_back(i + res);
          wbi.push_back(bilateral_weight(*target.image, i, i + res, weights.bilateral_tau));
        }
      }
    if (pa.empty()) {
      named.total = total.val()(0, 0);
      if (breakdown) *breakdown = named;
      return total;
    }
    Mat wmat(static_cast<long>(wbi.size()), 1);
    for (size_t i = 0; i < wbi.size(); ++i) wmat(static_cast<long>(i), 0) = wbi[i];
    Var wvar = tape.constant(std::move(wmat));

    if (weights.smooth_depth > 0.0) {
      Var dd = ad::sub(ad::gather_rows(render.depth, pa), ad::gather_rows(render.depth, pb));
      Var sd = ad::mean_all(ad::cmul(ad::square(dd), wvar));
      named.smooth_depth = sd.val()(0, 0);
      total = ad::add(total, ad::scale(sd, weights.smooth_depth));
    }
    if (weights.smooth_normal > 0.0 && have_normals) {
      Var n_hat = normalize_rows(render.normal, 1e-9);
      Var ca = ad::gather_rows(n_hat, pa);
      Var cb = ad::gather_rows(n_hat, pb);
      Var cosine = ad::rowwise_sum(ad::cmul(ca, cb));
      Var sn = ad::mean_all(ad::cmul(ad::add_scalar(ad::neg(cosine), 1.0), wvar));
      named.smooth_normal = sn.val()(0, 0);
      total = ad::add(total, ad::scale(sn, weights.smooth_normal));
    }
  }

  named.total = total.val()(0, 0);
  if (breakdown) *breakdown = named;
  return total;
}

NamedLosses evaluate_losses(const RenderOutput& output, const CellTarget& target,
                            const LossWeights& weights, const ImageEmbedder* embedder) {
  if (!target.image || !target.mask)
    throw std::invalid_argument("evaluate_losses: image and mask targets are required");
  NamedLosses named;
  const int res = output.rgb.height;
  const long n = static_cast<long>(res) * res;

  for (long i = 0; i < n * 3; ++i) {
    const double e = output.rgb.data[i] - target.image->data[i];
    named.mse += e * e;
  }
  named.mse /= static_cast<double>(n * 3);
  for (long i = 0; i < n; ++i) {
    const double e = output.alpha.data[i] - target.mask->data[i];
    named.mask += e * e;
  }
  named.mask /= static_cast<double>(n);
  if (weights.perceptual > 0.0 && embedder)
    named.perceptual = perceptual_distance(output.rgb, *target.image, *embedder);

  if (weights.normal > 0.0 && target.normal) {
    double acc = 0.0, count = 0.0;
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        double tn[3], norm = 0.0;
        for (int c = 0; c < 3; ++c) {
          tn[c] = target.normal->at(c, y, x);
          norm += tn[c] * tn[c];
        }
        if (target.mask->at(0, y, x) < 0.5 || norm < 0.25) continue;
        double dot = 0.0, rn = 0.0;
        for (int c = 0; c < 3; ++c) {
          dot += output.normal.at(c, y, x) * tn[c];
          rn += output.normal.at(c, y, x) * output.normal.at(c, y, x);
        }
        if (rn > 1e-12) dot /= std::sqrt(rn * norm);
        acc += 1.0 - dot;
        count += 1.0;
      }
    if (count > 0.0) named.normal = acc / count;
  }

  double sd = 0.0, sn = 0.0, pairs = 0.0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      for (int axis = 0; axis < 2; ++axis) {
        const int y2 = axis ? y + 1 : y, x2 = axis ? x : x + 1;
        if (y2 >= res || x2 >= res) continue;
        if (target.mask->at(0, y, x) < 0.5 || target.mask->at(0, y2, x2) < 0.5) continue;
        const double w =
            bilateral_weight(*target.image, y * res + x, y2 * res + x2, weights.bilateral_tau);
        const double da = output.depth.at(0, y, x), db = output.depth.at(0, y2, x2);
        if (std::isfinite(da) && std::isfinite(db)) sd += w * (da - db) * (da - db);
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int c = 0; c < 3; ++c) {
          dot += output.normal.at(c, y, x) * output.normal.at(c, y2, x2);
          na += output.normal.at(c, y, x) * output.normal.at(c, y, x);
          nb += output.normal.at(c, y2, x2) * output.normal.at(c, y2, x2);
        }
        if (na > 1e-12 && nb > 1e-12) dot /= std::sqrt(na * nb);
        sn += w * (1.0 - dot);
        pairs += 1.0;
      }
  if (pairs > 0.0) {
    named.smooth_depth = sd / pairs;
    named.smooth_normal = sn / pairs;
  }

  named.total = weights.mse * named.mse + weights.mask * named.mask +
                weights.perceptual * named.perceptual + weights.normal * named.normal +
                weights.smooth_depth * named.smooth_depth +
                weights.smooth_normal * named.smooth_normal;
  return named;
}

namespace {

int ramp_resolution(const OptimizeSchedule& schedule, int step) {
  if (schedule.steps <= 1) return schedule.resolution_end;
  const double f = static_cast<double>(step) / (schedule.steps - 1);
  const double r =
      schedule.resolution_start + f * (schedule.resolution_end - schedule.resolution_start);
  // snap to multiples of 8 so the embedder thumbnail stays well-posed
  return std::max(8, static_cast<int>(std::round(r / 8.0)) * 8);
}

struct TargetPyramid {
  std::map<std::pair<int, int>, Image> images;
  std::map<std::pair<int, int>, Mask> masks;
  std::map<std::pair<int, int>, Image> normals;

  const Image& image(const ImageMatrix& m, int cell, int res) {
    const auto key = std::make_pair(cell, res);
    auto it = images.find(key);
    if (it == images.end())
      it = images
               .emplace(key, res == m.cells[cell].height ? m.cells[cell]
                                                         : resize_area(m.cells[cell], res, res))
               .first;
    return it->second;
  }
  const Mask& mask(const ImageMatrix& m, int cell, int res) {
    const auto key = std::make_pair(cell, res);
    auto it = masks.find(key);
    if (it == masks.end()) {
      Mask resized =
          res == m.masks[cell].height ? m.masks[cell] : resize_area(m.masks[cell], res, res);
      for (auto& v : resized.data) v = v >= 0.5 ? 1.0 : 0.0;
      it = masks.emplace(key, std::move(resized)).first;
    }
    return it->second;
  }
  const Image* normal(const MatrixAux* aux, int cell, int res) {
    if (!aux || aux->normals.empty()) return nullptr;
    const auto key = std::make_pair(cell, res);
    auto it = normals.find(key);
    if (it == normals.end()) {
      Image resized = res == aux->normals[cell].height
                          ? aux->normals[cell]
                          : resize_area(aux->normals[cell], res, res);
      // renormalize after area averaging
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
          double norm = 0.0;
          for (int c = 0; c < 3; ++c) norm += resized.at(c, y, x) * resized.at(c, y, x);
          norm = std::sqrt(norm);
          if (norm > 1e-6)
            for (int c = 0; c < 3; ++c) resized.at(c, y, x) /= norm;
        }
      it = normals.emplace(key, std::move(resized)).first;
    }
    return &it->second;
  }
};

std::vector<int> sample_pixels(Rng& rng, int res, int count) {
  const int total = res * res;
  if (count >= total) {
    std::vector<int> all(total);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<int> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(rng.integer_below(total));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

OptimizeReport optimize_phase(const ImageMatrix& matrix, DynamicNerf& nerf,
                              const OptimizeSchedule& schedule, const MatrixAux* aux,
                              bool dynamic_phase, const ImageEmbedder* embedder) {
  matrix.validate();
  OptimizeReport report;
  Rng rng(schedule.seed ^ (dynamic_phase ? 0xD15ull : 0x57A7ull));
  nn::AdamConfig adam;
  adam.lr = schedule.lr;
  adam.eps = schedule.adam_eps;
  const int table_param = nerf.params().find("hash_table");
  TargetPyramid pyramid;

  const int freqs = nerf.config().time_freq_count;
  const double ramp_total = std::max(1.0, schedule.freq_ramp_fraction * schedule.steps);
  const double ramp_len = ramp_total / freqs;

  for (int step = 0; step < schedule.steps; ++step) {
    if (dynamic_phase) {
      // open gates low-to-high
      for (int k = 0; k < freqs; ++k) {
        const double start = k * ramp_len;
        nerf.freq_mask()[k] = std::clamp((step - start) / ramp_len, 0.0, 1.0);
      }
      report.freq_mask_history.push_back(nerf.freq_mask());
    }

    const int res = ramp_resolution(schedule, step);
    report.resolutions.push_back(res);
    const bool full_pass = schedule.full_loss_stride > 0 &&
                           step % schedule.full_loss_stride == schedule.full_loss_stride - 1;

    struct CellPick {
      int v, f;
    };
    std::vector<CellPick> picks;
    if (!dynamic_phase) {
      picks.push_back({rng.integer_below(matrix.views), 0});
    } else {
      const int nf = std::min(schedule.frames_per_step, matrix.frames);
      const int nv = std::min(schedule.views_per_step, matrix.views);
      std::vector<int> fidx(matrix.frames), vidx(matrix.views);
      std::iota(fidx.begin(), fidx.end(), 0);
      std::iota(vidx.begin(), vidx.end(), 0);
      for (int i = 0; i < nf; ++i)
        std::swap(fidx[i], fidx[i + rng.integer_below(matrix.frames - i)]);
      for (int i = 0; i < nv; ++i)
        std::swap(vidx[i], vidx[i + rng.integer_below(matrix.views - i)]);
      for (int i = 0; i < nf; ++i)
        for (int j = 0; j < nv; ++j) picks.push_back({vidx[j], fidx[i]});
    }

    Tape tape;
    const std::vector<Var> p = nerf.params().leaves(tape);
    Var total{nullptr, -1};
    const int full_res = std::min(res, 32);  // full-loss passes render the whole cell
    for (size_t ci = 0; ci < picks.size(); ++ci) {
      const auto [v, f] = picks[ci];
      const int cell = static_cast<int>(matrix.index(v, f));
      const double t = matrix.frame_times[f];
      const bool this_full = full_pass && ci == 0;
      const int cell_res = this_full ? full_res : res;

      RenderOptions opts;
      opts.resolution = cell_res;
      opts.n_samples = nerf.config().n_samples;
      opts.stratified_seed = static_cast<unsigned>(rng.integer() | 1u);
      LossWeights weights = schedule.weights;
      const Image* normal_target = nullptr;
      if (this_full) {
        opts.with_normals = weights.normal > 0.0 || weights.smooth_normal > 0.0;
        if (opts.with_normals) normal_target = pyramid.normal(aux, cell, cell_res);
        if (!normal_target) weights.normal = 0.0;
      } else {
        // subset passes carry the photometric and mask terms only
        weights.perceptual = 0.0;
        weights.normal = 0.0;
        weights.smooth_depth = 0.0;
        weights.smooth_normal = 0.0;
        const int budget = dynamic_phase ? schedule.rays_per_cell : schedule.rays_per_step;
        opts.pixels = sample_pixels(rng, cell_res, budget);
      }

      const RenderVars rv = render_on_tape(tape, p, nerf, matrix.trajectory, v, t, opts);
      CellTarget target;
      target.image = &pyramid.image(matrix, cell, cell_res);
      target.mask = &pyramid.mask(matrix, cell, cell_res);
      target.normal = normal_target;
      Var cell_loss = losses_on_tape(tape, rv, target, weights,
                                     this_full ? embedder : nullptr, nullptr);
      total = total.valid() ? ad::add(total, cell_loss) : cell_loss;
    }
    total = ad::scale(total, 1.0 / static_cast<double>(picks.size()));

    report.losses.push_back(total.val()(0, 0));
    tape.backward(total);
    if (schedule.lr_cosine)
      adam.lr = schedule.lr *
                (0.1 + 0.45 * (1.0 + std::cos(kPi * step / std::max(1, schedule.steps - 1))));
    nn::adam_step(nerf.params(), tape, p, adam, step + 1,
                  dynamic_phase ? std::vector<int>{} : nerf.canonical_param_ids());
    if (schedule.table_decay > 0.0 && table_param >= 0)
      nerf.params().entry(table_param).value *= (1.0 - adam.lr * schedule.table_decay);
  }
  return report;
}

}  // namespace

OptimizeReport optimize_static(const ImageMatrix& matrix, DynamicNerf& nerf,
                               const OptimizeSchedule& schedule, const MatrixAux* aux,
                               const ImageEmbedder* embedder) {
  return optimize_phase(matrix, nerf, schedule, aux, false, embedder);
}

OptimizeReport optimize_dynamic(const ImageMatrix& matrix, DynamicNerf& nerf,
                                const OptimizeSchedule& schedule, const MatrixAux* aux,
                                const ImageEmbedder* embedder) {
  return optimize_phase(matrix, nerf, schedule, aux, true, embedder);
}

double psnr(const Image& a, const Image& b) {
  double mse = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double e = a.data[i] - b.data[i];
    mse += e * e;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0.0) return 99.0;
  return -10.0 * std::log10(mse);
}

double mask_iou(const Mask& a, const Mask& b) {
  double inter = 0.0, uni = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
    inter += (pa && pb) ? 1.0 : 0.0;
    uni += (pa || pb) ? 1.0 : 0.0;
  }
  return uni > 0.0 ? inter / uni : 1.0;
}

void DynamicNerf::save_checkpoint(const std::filesystem::path& path) const {
  save_blob(path, "nerf4d", config_.to_json(), params_, {{"freq_mask", freq_mask_}});
}

DynamicNerf DynamicNerf::load_checkpoint(const std::filesystem::path& path) {
  const BlobHeader header = read_blob_header(path);
  if (header.kind != "nerf4d")
    throw CheckpointError("load_checkpoint: wrong blob kind '" + header.kind + "'");
  DynamicNerf nerf(NerfConfig::from_json(header.config), 0);
  load_blob_tensors(path, nerf.params_);
  if (header.extra.contains("freq_mask"))
    nerf.freq_mask_ = header.extra["freq_mask"].get<std::vector<double>>();
  return nerf;
}

}  // namespace sv4d
