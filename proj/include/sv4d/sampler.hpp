#pragma once

#include <map>
#include <optional>

#include "sv4d/backbone.hpp"
#include "sv4d/toy_scenes.hpp"

namespace sv4d {

enum class SamplingMode { kMixed, kIndependent, kInterleaved };

SamplingMode sampling_mode_from_string(const std::string& s);
std::string to_string(SamplingMode mode);

/// One dense-sampling window. `interior` are the frames generated here.
/// A window is conditioned on `left` (its latents must already exist) and,
/// when `right_fixed`, alternately on `right`. A non-fixed right bound is a
/// derived anchor: it is generated inside this window (listed in `interior`)
/// and then conditions the next window in the chain.
struct SamplingWindow {
  int left = -1;   // -1: conditioned on the input video only (independent mode)
  std::vector<int> interior;
  int right = -1;  // -1: open-ended (independent / interleaved chunks)
  bool right_fixed = false;
};

struct SamplingPlan {
  int f_total = 0;
  int f_model = 0;
  SamplingMode mode = SamplingMode::kMixed;
  std::vector<int> anchors;
  std::vector<SamplingWindow> windows;
};

/// Anchor selection and window tiling. Mixed mode follows the anchor scheme
/// round(linspace(0, F_total-1, F_model)); each generation pass holds one
/// conditioning anchor plus at most F_model-1 free frames.
SamplingPlan plan_generation(int f_total, int f_model, SamplingMode mode);

struct CFGSchedule {
  double s_min = 1.0;
  double s_max = 2.0;
};

/// Spatio-temporal guidance scale: mean of a linear ramp over frames and a
/// triangular wave over views peaking opposite the input view.
double cfg_scale(int v, int f, int views, int frames, const CFGSchedule& schedule);

struct SamplerConfig {
  int steps = 10;  // K
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  CFGSchedule cfg;
  uint64_t seed = 0;

  void validate() const;
};

/// Karras ladder: K strictly decreasing positive levels plus a final 0.
std::vector<double> sigma_ladder(const SamplerConfig& config);

/// What the sampler asks of a denoiser. frame_indices map window slots to
/// global frame indices (the backbone ignores them; oracles use them).
struct DenoiseRequest {
  double sigma = 0.0;
  DenoiserConditioning cond;
  std::vector<int> frame_indices;
  bool conditional = true;
};

class SamplingDenoiser {
 public:
  virtual ~SamplingDenoiser() = default;
  virtual LatentGrid denoise(const LatentGrid& z, const DenoiseRequest& request) = 0;
  virtual int max_frames() const = 0;
};

/// Runs the trained backbone.
class BackboneDenoiser final : public SamplingDenoiser {
 public:
  explicit BackboneDenoiser(const Backbone& model) : model_(model) {}
  LatentGrid denoise(const LatentGrid& z, const DenoiseRequest& request) override;
  int max_frames() const override { return model_.config().f_model; }

 private:
  const Backbone& model_;
};

/// Returns ground-truth latents regardless of noise (ideal denoiser).
class OracleDenoiser final : public SamplingDenoiser {
 public:
  explicit OracleDenoiser(LatentGrid truth) : truth_(std::move(truth)) {}
  LatentGrid denoise(const LatentGrid& z, const DenoiseRequest& request) override;
  int max_frames() const override { return truth_.frames; }

 private:
  LatentGrid truth_;
};

/// Per-view latents of one matrix column (an anchor frame across views).
using LatentColumn = std::vector<std::vector<double>>;

struct WindowTask {
  std::vector<int> frame_indices;            // free frames, ascending
  std::map<int, LatentColumn> fixed_latents; // global frame -> clean latents
  DenoiserConditioning cond_forward;
  DenoiserConditioning cond_backward;
  bool alternate = true;  // false: forward conditioning every step
  int views = 0, channels = 0, height = 0, width = 0;
  int f_total = 0;
};

/// Denoises one window with per-step forward/backward alternation,
/// spatio-temporal CFG and deterministic Euler probability-flow stepping.
/// Anchor positions are overwritten with their fixed latents after every
/// step. Returns the window frames (fixed + free) in ascending frame order.
LatentGrid sample_window(SamplingDenoiser& denoiser, const WindowTask& task,
                         const SamplerConfig& config, Rng& rng,
                         std::vector<SampleDirection>* direction_log = nullptr);

enum class RefProvider { kOracle, kModel };

/// Reference multi-view images of the first frame: the oracle provider renders
/// the scene; the model provider runs the full sampler at a single frame.
std::vector<Image> generate_reference_views(const Image& first_frame,
                                            const CameraTrajectory& trajectory,
                                            RefProvider provider, const Scene4D* scene,
                                            SamplingDenoiser* denoiser, const LatentCodec& codec,
                                            const ImageEmbedder& embedder,
                                            const SamplerConfig& config);

struct SampleMatrixInputs {
  const InputVideo* input_video = nullptr;
  CameraTrajectory trajectory;
  SamplingPlan plan;
  RefProvider provider = RefProvider::kOracle;
  const Scene4D* scene = nullptr;  // required by the oracle provider
};

/// Full image-matrix generation: reference views, anchor pass, dense windows,
/// decode. Row 0 carries the input video, column 0 the reference views.
ImageMatrix sample_matrix(SamplingDenoiser& denoiser, const SampleMatrixInputs& inputs,
                          const SamplerConfig& config, const LatentCodec& codec,
                          const ImageEmbedder& embedder);

/// Foreground mask by thresholding against the white background.
Mask threshold_mask(const Image& image, double tol = 0.08);

}  // namespace sv4d
