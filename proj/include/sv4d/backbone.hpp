#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <optional>

#include "sv4d/matrix_core.hpp"
#include "sv4d/nn.hpp"

namespace sv4d {

struct BackboneConfig {
  int views = 4;          // V
  int f_model = 3;        // frames per generation pass
  int latent_channels = 4;
  int base_width = 32;
  int depth = 2;          // UNet levels
  int attn_heads = 4;
  int embed_dim = 16;     // must match the ImageEmbedder dim
  int cam_freqs = 2;
  double sigma_data = 0.5;
  bool enable_view_attn = true;
  bool enable_frame_attn = true;
  bool enable_temporal_conv = true;

  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  bool operator==(const BackboneConfig&) const = default;

  /// Paper-scale grid extents (8 views x 5 frames); used for shape tests.
  static BackboneConfig paper_scale();
};

enum class SampleDirection { kForward, kBackward };

/// Everything the denoiser is conditioned on. Cells are flat [C*h*w] latents;
/// embeddings are L2-normalized d-vectors.
struct DenoiserConditioning {
  std::vector<std::vector<double>> input_video_latents;      // per frame, view-0 row
  std::vector<std::vector<double>> input_frame_embeddings;   // per frame
  std::vector<std::vector<double>> reference_view_embeddings;  // per view
  CameraTrajectory camera;
  SampleDirection direction = SampleDirection::kForward;

  /// Null conditioning for the classifier-free-guidance branch.
  DenoiserConditioning unconditional() const;
};

/// Sinusoidal camera features: for each view, {sin(2^k x), cos(2^k x)} for
/// k < cam_freqs over x in {elevation_rad, sin(azimuth), cos(azimuth)}.
std::vector<std::vector<double>> camera_embedding(const CameraTrajectory& trajectory,
                                                  int cam_freqs);

/// EDM preconditioning constants.
struct EdmCoeffs {
  double c_skip, c_out, c_in, c_noise;
};
EdmCoeffs edm_coeffs(double sigma, double sigma_data);
double edm_loss_weight(double sigma, double sigma_data);

struct TrainStepResult {
  double loss = 0.0;
  double sigma = 0.0;
};

/// The SV4D denoiser: a UNet over the flattened VxF latent grid where every
/// level stacks a camera-conditioned residual Conv3D block with spatial, view
/// and frame attention, under EDM preconditioning.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// D_theta(z; sigma, cond). Accepts any frame count 1..f_model (windows may
  /// be short); views must match the config.
  LatentGrid denoise(const LatentGrid& z, double sigma, const DenoiserConditioning& cond) const;

  /// One EDM denoising-score-matching step with Adam. The optional
  /// forced_sigma pins the noise level (used by oracle tests and gradient
  /// checks); denoiser_override swaps the UNet for an injected function.
  using DenoiseFn =
      std::function<LatentGrid(const LatentGrid& z, double sigma, const DenoiserConditioning&)>;
  TrainStepResult training_step(const LatentGrid& clean, const DenoiserConditioning& cond,
                                Rng& rng, const nn::AdamConfig& adam,
                                std::optional<double> forced_sigma = std::nullopt,
                                const DenoiseFn* denoiser_override = nullptr);

  /// Loss and analytic parameter gradients at fixed (sigma, epsilon), without
  /// an optimizer update. Used by the finite-difference acceptance check.
  double loss_and_gradients(const LatentGrid& clean, const DenoiserConditioning& cond,
                            double sigma, const std::vector<double>& epsilon,
                            std::vector<ad::Mat>* grads) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static Backbone load_checkpoint(const std::filesystem::path& path);
  /// Expects the file's config to match; loads only the listed tensors when a
  /// partial manifest is given.
  void load_weights(const std::filesystem::path& path,
                    const std::vector<std::string>& partial_manifest = {});

  int step_count() const { return step_count_; }

 private:
  struct Net;  // layer wiring
  ad::Var unet(ad::Tape& tape, const std::vector<ad::Var>& p, ad::Var x, double sigma,
               const DenoiserConditioning& cond, int frames, int h, int w) const;
  ad::Var denoise_on_tape(ad::Tape& tape, const std::vector<ad::Var>& p, const ad::Mat& z_sites,
                          double sigma, const DenoiserConditioning& cond, int frames, int h,
                          int w) const;

  BackboneConfig config_;
  nn::ParamStore params_;
  std::shared_ptr<Net> net_;
  int step_count_ = 0;
  uint64_t seed_ = 0;
};

}  // namespace sv4d
