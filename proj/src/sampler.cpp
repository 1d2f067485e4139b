#include "sv4d/sampler.hpp"

#include <algorithm>

namespace sv4d {

SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "mixed") return SamplingMode::kMixed;
  if (s == "independent") return SamplingMode::kIndependent;
  if (s == "interleaved") return SamplingMode::kInterleaved;
  throw ConfigError("unknown sampling mode '" + s + "'");
}

std::string to_string(SamplingMode mode) {
  switch (mode) {
    case SamplingMode::kMixed: return "mixed";
    case SamplingMode::kIndependent: return "independent";
    case SamplingMode::kInterleaved: return "interleaved";
  }
  return "unknown";
}

namespace {

std::vector<int> anchor_indices(int f_total, int f_model) {
  std::vector<int> raw = rounded_linspace(f_total - 1, f_model);
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
  return raw;
}

}  // namespace

SamplingPlan plan_generation(int f_total, int f_model, SamplingMode mode) {
  if (f_total < 1) throw std::invalid_argument("plan_generation: F_total must be >= 1");
  if (f_model < 2) throw std::invalid_argument("plan_generation: F_model must be >= 2");

  SamplingPlan plan;
  plan.f_total = f_total;
  plan.f_model = f_model;
  plan.mode = mode;

  if (mode == SamplingMode::kIndependent) {
    // disjoint chunks of F_model frames, each conditioned on the input video
    for (int start = 0; start < f_total; start += f_model) {
      SamplingWindow w;
      for (int f = start; f < std::min(start + f_model, f_total); ++f) w.interior.push_back(f);
      plan.windows.push_back(std::move(w));
    }
    return plan;
  }

  if (f_total < 2) {
    plan.anchors = {0};
    return plan;  // trivial plan: the single frame is an anchor
  }

  plan.anchors = anchor_indices(f_total, f_model);

  if (mode == SamplingMode::kInterleaved) {
    std::vector<int> rest;
    for (int f = 0; f < f_total; ++f)
      if (!std::binary_search(plan.anchors.begin(), plan.anchors.end(), f)) rest.push_back(f);
    // auto-regressive chunks of consecutive frames, each conditioned on the
    // frame directly before its first element (anchor or previous output)
    size_t at = 0;
    while (at < rest.size()) {
      size_t take = 1;
      while (take < static_cast<size_t>(f_model - 1) && at + take < rest.size() &&
             rest[at + take] == rest[at + take - 1] + 1)
        ++take;
      SamplingWindow w;
      w.left = rest[at] - 1;
      w.interior.assign(rest.begin() + at, rest.begin() + at + take);
      plan.windows.push_back(std::move(w));
      at += take;
    }
    return plan;
  }

  // mixed mode: tile each anchor gap; one generation pass holds a single
  // conditioning anchor plus at most F_model-1 free frames, so gaps wider
  // than that chain through derived anchors
  const int capacity = f_model - 1;
  for (size_t i = 0; i + 1 < plan.anchors.size(); ++i) {
    const int a = plan.anchors[i], b = plan.anchors[i + 1];
    const int gap = b - a - 1;
    if (gap == 0) continue;
    if (gap <= capacity) {
      SamplingWindow w;
      w.left = a;
      for (int f = a + 1; f < b; ++f) w.interior.push_back(f);
      w.right = b;
      w.right_fixed = true;
      plan.windows.push_back(std::move(w));
      continue;
    }
    // split: derived anchors at chunk boundaries chain the sub-windows
    int left = a;
    int remaining = gap;
    int at = a + 1;
    while (remaining > 0) {
      const int take = std::min(capacity, remaining);
      SamplingWindow w;
      w.left = left;
      for (int f = at; f < at + take; ++f) w.interior.push_back(f);
      remaining -= take;
      at += take;
      if (remaining > 0) {
        // last frame of this chunk is a derived anchor for the next window
        w.right = w.interior.back();
        w.right_fixed = false;
        left = w.right;
      } else {
        w.right = b;
        w.right_fixed = true;
      }
      plan.windows.push_back(std::move(w));
    }
  }
  return plan;
}

double cfg_scale(int v, int f, int views, int frames, const CFGSchedule& schedule) {
  if (v < 0 || v >= views || f < 0 || f >= frames)
    throw std::out_of_range("cfg_scale: cell index out of range");
  const double tri = 1.0 - std::abs(2.0 * v / views - 1.0);
  const double lin = frames == 1 ? 0.0 : static_cast<double>(f) / (frames - 1);
  return schedule.s_min + (schedule.s_max - schedule.s_min) * (tri + lin) / 2.0;
}

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("SamplerConfig: steps must be >= 1");
  if (sigma_min <= 0.0 || sigma_min >= sigma_max)
    throw ConfigError("SamplerConfig: need 0 < sigma_min < sigma_max");
  if (rho <= 0.0) throw ConfigError("SamplerConfig: rho must be > 0");
  if (cfg.s_min > cfg.s_max) throw ConfigError("SamplerConfig: cfg.s_min must be <= cfg.s_max");
}

std::vector<double> sigma_ladder(const SamplerConfig& config) {
  config.validate();
  const int k = config.steps;
  std::vector<double> sigmas(k + 1, 0.0);
  if (k == 1) {
    sigmas[0] = config.sigma_max;
    return sigmas;
  }
  const double inv_rho = 1.0 / config.rho;
  const double hi = std::pow(config.sigma_max, inv_rho);
  const double lo = std::pow(config.sigma_min, inv_rho);
  for (int i = 0; i < k; ++i)
    sigmas[i] = std::pow(hi + static_cast<double>(i) / (k - 1) * (lo - hi), config.rho);
  return sigmas;
}

LatentGrid BackboneDenoiser::denoise(const LatentGrid& z, const DenoiseRequest& request) {
  return model_.denoise(z, request.sigma, request.cond);
}

LatentGrid OracleDenoiser::denoise(const LatentGrid& z, const DenoiseRequest& request) {
  if (request.frame_indices.size() != static_cast<size_t>(z.frames))
    throw std::invalid_argument("OracleDenoiser: frame index count mismatch");
  LatentGrid out = z;
  for (int v = 0; v < z.views; ++v)
    for (int f = 0; f < z.frames; ++f) {
      const int gf = request.frame_indices[f];
      if (gf < 0 || gf >= truth_.frames)
        throw std::invalid_argument("OracleDenoiser: frame index out of range");
      out.set_cell(v, f, truth_.cell_copy(v, gf));
    }
  return out;
}

namespace {

// Pass layout for one direction: free frames plus the conditioning anchor
// (left forward, right backward).
struct PassLayout {
  std::vector<int> frames;
};

PassLayout make_layout(const WindowTask& task, SampleDirection direction) {
  PassLayout layout;
  std::vector<int> fixed_frames;
  for (const auto& [frame, latents] : task.fixed_latents) fixed_frames.push_back(frame);
  std::sort(fixed_frames.begin(), fixed_frames.end());

  std::vector<int> frames = task.frame_indices;
  if (!fixed_frames.empty()) {
    const int anchor =
        direction == SampleDirection::kBackward ? fixed_frames.back() : fixed_frames.front();
    frames.push_back(anchor);
  }
  std::sort(frames.begin(), frames.end());
  frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
  layout.frames = std::move(frames);
  return layout;
}

}  // namespace

LatentGrid sample_window(SamplingDenoiser& denoiser, const WindowTask& task,
                         const SamplerConfig& config, Rng& rng,
                         std::vector<SampleDirection>* direction_log) {
  config.validate();
  if (task.frame_indices.empty())
    throw std::invalid_argument("sample_window: no frames to generate");
  for (const auto& [frame, column] : task.fixed_latents)
    if (static_cast<int>(column.size()) != task.views)
      throw std::invalid_argument("sample_window: fixed latent view count mismatch");

  const size_t cell = static_cast<size_t>(task.channels) * task.height * task.width;
  const std::vector<double> sigmas = sigma_ladder(config);

  // free-frame state, initialized at sigma_max * noise
  std::map<int, std::vector<std::vector<double>>> state;  // frame -> per view
  for (int f : task.frame_indices) {
    if (task.fixed_latents.count(f)) continue;
    std::vector<std::vector<double>> column(task.views, std::vector<double>(cell));
    for (auto& lat : column)
      for (auto& x : lat) x = sigmas[0] * rng.normal();
    state[f] = std::move(column);
  }

  const bool all_unit_cfg = config.cfg.s_min == 1.0 && config.cfg.s_max == 1.0;

  for (int i = 0; i < config.steps; ++i) {
    const SampleDirection direction =
        (task.alternate && i % 2 == 1) ? SampleDirection::kBackward : SampleDirection::kForward;
    if (direction_log) direction_log->push_back(direction);

    const PassLayout layout = make_layout(task, direction);
    const int pass_frames = static_cast<int>(layout.frames.size());
    if (pass_frames > denoiser.max_frames())
      throw std::invalid_argument("sample_window: pass exceeds denoiser frame capacity");

    LatentGrid z(task.views, pass_frames, task.channels, task.height, task.width);
    for (int slot = 0; slot < pass_frames; ++slot) {
      const int gf = layout.frames[slot];
      const auto it = task.fixed_latents.find(gf);
      for (int v = 0; v < task.views; ++v)
        z.set_cell(v, slot, it != task.fixed_latents.end() ? it->second[v] : state.at(gf)[v]);
    }

    DenoiseRequest request;
    request.sigma = sigmas[i];
    request.frame_indices = layout.frames;
    request.cond =
        direction == SampleDirection::kBackward ? task.cond_backward : task.cond_forward;
    request.cond.direction = direction;
    if (request.cond.input_video_latents.size() != static_cast<size_t>(pass_frames))
      throw std::invalid_argument("sample_window: conditioning frame count mismatch");

    request.conditional = true;
    const LatentGrid d_cond = denoiser.denoise(z, request);

    LatentGrid guided = d_cond;
    if (!all_unit_cfg) {
      DenoiseRequest uncond_request = request;
      uncond_request.cond = request.cond.unconditional();
      uncond_request.conditional = false;
      const LatentGrid d_uncond = denoiser.denoise(z, uncond_request);
      for (int v = 0; v < task.views; ++v)
        for (int slot = 0; slot < pass_frames; ++slot) {
          const double s =
              cfg_scale(v, layout.frames[slot], task.views, task.f_total, config.cfg);
          if (s == 1.0) continue;  // guided == conditional, bitwise
          double* g = guided.cell(v, slot);
          const double* dc = d_cond.cell(v, slot);
          const double* du = d_uncond.cell(v, slot);
          for (size_t j = 0; j < cell; ++j) g[j] = du[j] + s * (dc[j] - du[j]);
        }
    }

    // deterministic Euler step of dz/dsigma = (z - D) / sigma on free frames
    const double step = (sigmas[i + 1] - sigmas[i]) / sigmas[i];
    for (int slot = 0; slot < pass_frames; ++slot) {
      const int gf = layout.frames[slot];
      if (task.fixed_latents.count(gf)) continue;  // anchors stay clean
      auto& column = state.at(gf);
      for (int v = 0; v < task.views; ++v) {
        const double* zc = z.cell(v, slot);
        const double* dc = guided.cell(v, slot);
        for (size_t j = 0; j < cell; ++j) column[v][j] = zc[j] + step * (zc[j] - dc[j]);
      }
    }
  }

  // assemble fixed + free frames in ascending order
  std::vector<int> all_frames = task.frame_indices;
  for (const auto& [frame, latents] : task.fixed_latents) all_frames.push_back(frame);
  std::sort(all_frames.begin(), all_frames.end());
  all_frames.erase(std::unique(all_frames.begin(), all_frames.end()), all_frames.end());

  LatentGrid out(task.views, static_cast<int>(all_frames.size()), task.channels, task.height,
                 task.width);
  for (size_t slot = 0; slot < all_frames.size(); ++slot) {
    const int gf = all_frames[slot];
    const auto it = task.fixed_latents.find(gf);
    for (int v = 0; v < task.views; ++v)
      out.set_cell(v, static_cast<int>(slot),
                   it != task.fixed_latents.end() ? it->second[v] : state.at(gf)[v]);
  }
  return out;
}

Mask threshold_mask(const Image& image, double tol) {
  Mask mask(1, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      bool fg = false;
      for (int c = 0; c < image.channels; ++c)
        fg = fg || std::abs(image.at(c, y, x) - 1.0) > tol;
      mask.at(0, y, x) = fg ? 1.0 : 0.0;
    }
  return mask;
}

namespace {

DenoiserConditioning base_conditioning(const std::vector<int>& pass_frames,
                                       const std::vector<std::vector<double>>& video_latents,
                                       const std::vector<std::vector<double>>& video_embeddings,
                                       const std::vector<std::vector<double>>& ref_embeddings,
                                       const CameraTrajectory& trajectory) {
  DenoiserConditioning cond;
  for (int f : pass_frames) {
    cond.input_video_latents.push_back(video_latents[f]);
    cond.input_frame_embeddings.push_back(video_embeddings[f]);
  }
  cond.reference_view_embeddings = ref_embeddings;
  cond.camera = trajectory;
  return cond;
}

}  // namespace

std::vector<Image> generate_reference_views(const Image& first_frame,
                                            const CameraTrajectory& trajectory,
                                            RefProvider provider, const Scene4D* scene,
                                            SamplingDenoiser* denoiser, const LatentCodec& codec,
                                            const ImageEmbedder& embedder,
                                            const SamplerConfig& config) {
  if (provider == RefProvider::kOracle) {
    if (!scene)
      throw std::invalid_argument("generate_reference_views: oracle provider needs a scene");
    std::vector<Image> out;
    for (int v = 0; v < trajectory.view_count(); ++v)
      out.push_back(render(*scene, trajectory, v, 0.0, first_frame.height).image);
    return out;
  }
  if (!denoiser)
    throw std::invalid_argument("generate_reference_views: model provider needs a denoiser");

  // single-frame run of the full sampler: p({M_v0} | M_00, pi)
  WindowTask task;
  task.frame_indices = {0};
  task.views = trajectory.view_count();
  task.channels = codec.latent_channels();
  task.height = first_frame.height / codec.downscale_factor();
  task.width = first_frame.width / codec.downscale_factor();
  task.f_total = 1;
  task.alternate = false;
  const auto lat = codec.encode(first_frame);
  const auto emb = embedder.embed(first_frame);
  task.cond_forward.input_video_latents = {lat};
  task.cond_forward.input_frame_embeddings = {emb};
  task.cond_forward.reference_view_embeddings.assign(trajectory.view_count(), emb);
  task.cond_forward.camera = trajectory;
  task.cond_backward = task.cond_forward;

  Rng rng(config.seed ^ 0x5EEDF00Dull);
  const LatentGrid grid = sample_window(*denoiser, task, config, rng);
  std::vector<Image> out;
  for (int v = 0; v < trajectory.view_count(); ++v)
    out.push_back(codec.decode(grid.cell_copy(v, 0), first_frame.height, first_frame.width));
  out[0] = first_frame;  // view 0 is the input view
  return out;
}

ImageMatrix sample_matrix(SamplingDenoiser& denoiser, const SampleMatrixInputs& inputs,
                          const SamplerConfig& config, const LatentCodec& codec,
                          const ImageEmbedder& embedder) {
  config.validate();
  const InputVideo& video = *inputs.input_video;
  video.validate();
  const SamplingPlan& plan = inputs.plan;
  if (video.frame_count() != plan.f_total)
    throw std::invalid_argument("sample_matrix: plan length does not match the input video");
  const int views = inputs.trajectory.view_count();
  const int f_total = plan.f_total;
  const int res = video.frames[0].height;
  const int lh = res / codec.downscale_factor();
  const int lw = video.frames[0].width / codec.downscale_factor();
  const int channels = codec.latent_channels();

  // conditioning precomputation over the whole input video
  std::vector<std::vector<double>> video_latents, video_embeddings;
  for (const auto& frame : video.frames) {
    video_latents.push_back(codec.encode(frame));
    video_embeddings.push_back(embedder.embed(frame));
  }

  // (1) reference views (column 0)
  const std::vector<Image> refs =
      generate_reference_views(video.frames[0], inputs.trajectory, inputs.provider, inputs.scene,
                               &denoiser, codec, embedder, config);
  std::vector<std::vector<double>> ref_embeddings;
  LatentColumn ref_latents;
  for (const auto& img : refs) {
    ref_embeddings.push_back(embedder.embed(img));
    ref_latents.push_back(codec.encode(img));
  }

  Rng rng(config.seed);
  LatentGrid full(views, f_total, channels, lh, lw);
  full.codec_id = codec.id();
  std::vector<bool> generated(f_total, false);

  auto column_of = [&](int frame) {
    LatentColumn col;
    for (int v = 0; v < views; ++v) col.push_back(full.cell_copy(v, frame));
    return col;
  };
  auto embeddings_of_column = [&](int frame) {
    std::vector<std::vector<double>> out;
    for (int v = 0; v < views; ++v)
      out.push_back(embedder.embed(codec.decode(full.cell_copy(v, frame), res, res)));
    return out;
  };

  // (2) anchor pass: anchors conditioned on the input video and the
  // reference views; column 0 is clamped to the reference latents
  if (!plan.anchors.empty()) {
    WindowTask task;
    task.views = views;
    task.channels = channels;
    task.height = lh;
    task.width = lw;
    task.f_total = f_total;
    task.alternate = false;
    task.fixed_latents[0] = ref_latents;
    for (int a : plan.anchors)
      if (a != 0) task.frame_indices.push_back(a);
    task.cond_forward = base_conditioning(plan.anchors, video_latents, video_embeddings,
                                          ref_embeddings, inputs.trajectory);
    task.cond_backward = task.cond_forward;
    if (task.frame_indices.empty()) {
      for (int v = 0; v < views; ++v) full.set_cell(v, 0, ref_latents[v]);
      generated[0] = true;
    } else {
      const LatentGrid grid = sample_window(denoiser, task, config, rng);
      for (size_t slot = 0; slot < plan.anchors.size(); ++slot) {
        const int gf = plan.anchors[slot];
        for (int v = 0; v < views; ++v)
          full.set_cell(v, gf, grid.cell_copy(v, static_cast<int>(slot)));
        generated[gf] = true;
      }
    }
  }

  // (3) dense windows in order
  for (const auto& window : plan.windows) {
    WindowTask task;
    task.views = views;
    task.channels = channels;
    task.height = lh;
    task.width = lw;
    task.f_total = f_total;
    task.frame_indices = window.interior;
    task.alternate = window.right >= 0 && window.right_fixed;

    std::vector<std::vector<double>> fwd_refs = ref_embeddings;
    std::vector<std::vector<double>> bwd_refs = ref_embeddings;
    if (window.left >= 0) {
      if (!generated[window.left])
        throw std::invalid_argument("sample_matrix: window left anchor not yet generated");
      task.fixed_latents[window.left] = column_of(window.left);
      fwd_refs = embeddings_of_column(window.left);
      bwd_refs = fwd_refs;
    }
    if (window.right >= 0 && window.right_fixed) {
      if (!generated[window.right])
        throw std::invalid_argument("sample_matrix: window right anchor not yet generated");
      task.fixed_latents[window.right] = column_of(window.right);
      bwd_refs = embeddings_of_column(window.right);
    }

    // forward pass sees [left + interior]; backward sees [interior + right]
    std::vector<int> fwd_frames = window.interior;
    if (window.left >= 0) fwd_frames.push_back(window.left);
    std::sort(fwd_frames.begin(), fwd_frames.end());
    std::vector<int> bwd_frames = window.interior;
    if (window.right >= 0 && window.right_fixed) bwd_frames.push_back(window.right);
    std::sort(bwd_frames.begin(), bwd_frames.end());

    task.cond_forward = base_conditioning(fwd_frames, video_latents, video_embeddings, fwd_refs,
                                          inputs.trajectory);
    task.cond_backward = base_conditioning(bwd_frames, video_latents, video_embeddings, bwd_refs,
                                           inputs.trajectory);

    const LatentGrid grid = sample_window(denoiser, task, config, rng);
    std::vector<int> all = window.interior;
    for (const auto& [frame, column] : task.fixed_latents) all.push_back(frame);
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    for (size_t slot = 0; slot < all.size(); ++slot) {
      const int gf = all[slot];
      if (!generated[gf]) {
        for (int v = 0; v < views; ++v)
          full.set_cell(v, gf, grid.cell_copy(v, static_cast<int>(slot)));
        generated[gf] = true;
      }
    }
  }

  for (int f = 0; f < f_total; ++f)
    if (!generated[f])
      throw std::logic_error("sample_matrix: frame " + std::to_string(f) + " not generated");

  // (4) decode; row 0 is the input video, column 0 the reference views
  std::vector<double> frame_times(f_total);
  for (int f = 0; f < f_total; ++f)
    frame_times[f] = f_total == 1 ? 0.0 : static_cast<double>(f) / (f_total - 1);
  ImageMatrix matrix = decode_latents(full, inputs.trajectory, frame_times, codec);
  for (int f = 0; f < f_total; ++f) matrix.cell(0, f) = video.frames[f];
  for (int v = 0; v < views; ++v) matrix.cell(v, 0) = refs[v];
  for (int v = 0; v < views; ++v)
    for (int f = 0; f < f_total; ++f) matrix.mask(v, f) = threshold_mask(matrix.cell(v, f));
  if (!video.masks.empty())
    for (int f = 0; f < f_total; ++f) matrix.mask(0, f) = video.masks[f];
  matrix.validate();
  return matrix;
}

}  // namespace sv4d
