#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>

#include "sv4d/matrix_core.hpp"
#include "sv4d/nn.hpp"
#include "sv4d/toy_scenes.hpp"

namespace sv4d {

struct NerfConfig {
  int hash_levels = 8;       // L
  int hash_features = 2;     // per level
  int log2_table_size = 15;  // T = 2^15 entries per level
  int base_resolution = 16;  // N_min
  double growth = 1.45;      // b: N_l = floor(N_min * b^l)
  int mlp_width = 64;
  int geo_features = 15;     // extra sigma-MLP outputs fed to the color MLP
  int time_freq_count = 4;
  double scene_radius = 1.1;  // world box [-r, r]^3 mapped to the unit cube
  int n_samples = 32;         // stratified samples per ray

  void validate() const;
  nlohmann::json to_json() const;
  static NerfConfig from_json(const nlohmann::json& j);
  bool operator==(const NerfConfig&) const = default;
};

/// Canonical hash-grid NeRF + temporal deformation MLP. freq_mask gates the
/// sinusoidal time encoding (progressive low-to-high schedule).
class DynamicNerf {
 public:
  DynamicNerf(const NerfConfig& config, uint64_t seed);

  const NerfConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::vector<double>& freq_mask() { return freq_mask_; }
  const std::vector<double>& freq_mask() const { return freq_mask_; }

  /// Parameter ids of the deformation MLP (frozen during the static phase).
  const std::vector<int>& deform_param_ids() const { return deform_ids_; }
  /// All other parameter ids (canonical NeRF).
  const std::vector<int>& canonical_param_ids() const { return canonical_ids_; }

  // ---- tape-level building blocks (positions are [N,3] world coordinates) --
  ad::Var deform_on_tape(ad::Tape& tape, const std::vector<ad::Var>& p, ad::Var positions,
                         double t) const;
  /// (density [N,1], color [N,3]) after deformation at time t.
  std::pair<ad::Var, ad::Var> query_on_tape(ad::Tape& tape, const std::vector<ad::Var>& p,
                                            ad::Var positions, double t) const;
  /// density only (used by the finite-difference surface normals)
  ad::Var density_on_tape(ad::Tape& tape, const std::vector<ad::Var>& p, ad::Var positions,
                          double t) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static DynamicNerf load_checkpoint(const std::filesystem::path& path);

 private:
  NerfConfig config_;
  nn::ParamStore params_;
  std::vector<double> freq_mask_;
  std::vector<int> deform_ids_, canonical_ids_;
  ad::HashGridMeta grid_meta_;
  int hash_table_param_ = -1;
  nn::Linear sigma_fc1_, sigma_fc2_;
  nn::Linear color_fc1_, color_fc2_;
  nn::Linear deform_fc1_, deform_fc2_, deform_fc3_;
};

/// Point-level sample of the radiance field.
struct RadianceSample {
  double density = 0.0;  // >= 0, 1/world-unit
  double color[3] = {0.0, 0.0, 0.0};
};
RadianceSample query(const DynamicNerf& nerf, const Vec3& x, double t);
Vec3 deform(const DynamicNerf& nerf, const Vec3& x, double t);

struct RenderOutput {
  Image rgb;
  Mask alpha;
  Depth depth;
  Image normal;
};

struct RenderOptions {
  int resolution = 64;
  int n_samples = 32;
  bool with_normals = false;  // finite-difference density normals
  std::optional<std::vector<int>> pixels;  // subset of pixel indices (y*res+x)
  unsigned stratified_seed = 0;  // 0: midpoints (deterministic evaluation)
};

/// Differentiable volume render of one camera view at time t (white
/// background). The returned tape vars back the public RenderOutput path.
struct RenderVars {
  ad::Var rgb;      // [N,3]
  ad::Var alpha;    // [N,1]
  ad::Var depth;    // [N,1]
  ad::Var normal;   // [N,3] (zero-size Var when normals are off)
  std::vector<int> pixels;
  int resolution = 0;
};
RenderVars render_on_tape(ad::Tape& tape, const std::vector<ad::Var>& p, const DynamicNerf& nerf,
                          const CameraTrajectory& trajectory, int view, double t,
                          const RenderOptions& options);

RenderOutput render_image(const DynamicNerf& nerf, const CameraTrajectory& trajectory, int view,
                          double t, int resolution, int n_samples, bool with_normals = false);

struct LossWeights {
  double mse = 1.0;
  double mask = 0.5;
  double perceptual = 0.05;
  double normal = 0.05;
  double smooth_depth = 0.01;
  double smooth_normal = 0.01;
  double bilateral_tau = 0.1;  // image-gradient scale in the bilateral weight
};

/// Per-cell supervision target.
struct CellTarget {
  const Image* image = nullptr;
  const Mask* mask = nullptr;
  const Depth* depth = nullptr;    // optional
  const Image* normal = nullptr;   // optional
};

struct NamedLosses {
  double mse = 0.0, mask = 0.0, perceptual = 0.0, normal = 0.0;
  double smooth_depth = 0.0, smooth_normal = 0.0, total = 0.0;
};

/// Tape-level loss assembly over a rendered pixel set; returns the scalar
/// total plus detached per-term values.
ad::Var losses_on_tape(ad::Tape& tape, const RenderVars& render, const CellTarget& target,
                       const LossWeights& weights, const ImageEmbedder* embedder,
                       NamedLosses* breakdown);

/// Loss evaluation on a finished render (no gradients), for tests and
/// reporting. Requires a mask; depth/normal terms need the optional targets.
NamedLosses evaluate_losses(const RenderOutput& output, const CellTarget& target,
                            const LossWeights& weights, const ImageEmbedder* embedder);

struct OptimizeSchedule {
  int steps = 800;
  int resolution_start = 32;
  int resolution_end = 64;
  int rays_per_step = 1024;       // static phase ray budget
  int rays_per_cell = 128;        // dynamic phase, per sampled cell
  int frames_per_step = 4;        // dynamic phase: min(4, F)
  int views_per_step = 4;         // dynamic phase: min(4, V)
  int full_loss_stride = 8;       // steps between full-loss (perceptual etc.) passes
  double lr = 1e-2;
  double adam_eps = 1e-15;        // small eps suits sparse hash-table gradients
  bool lr_cosine = true;          // cosine decay to lr/10 over the phase
  double table_decay = 1e-6;      // decoupled weight decay on the hash table
  LossWeights weights;
  uint64_t seed = 0;
  /// fraction of dynamic steps over which frequency gates open low-to-high
  double freq_ramp_fraction = 0.5;
};

struct OptimizeReport {
  std::vector<double> losses;        // per step totals
  std::vector<int> resolutions;      // per step render resolution
  std::vector<std::vector<double>> freq_mask_history;  // dynamic phase snapshots
};

/// Static phase: column 0 only, deformation MLP frozen bitwise, resolution
/// ramped per schedule. The embedder (when given and linear) backs the
/// perceptual term on full-loss passes.
OptimizeReport optimize_static(const ImageMatrix& matrix, DynamicNerf& nerf,
                               const OptimizeSchedule& schedule, const MatrixAux* aux = nullptr,
                               const ImageEmbedder* embedder = nullptr);

/// Dynamic phase: random (frame, view) cells, all parameter groups, frequency
/// gates opening low-to-high.
OptimizeReport optimize_dynamic(const ImageMatrix& matrix, DynamicNerf& nerf,
                                const OptimizeSchedule& schedule, const MatrixAux* aux = nullptr,
                                const ImageEmbedder* embedder = nullptr);

double psnr(const Image& a, const Image& b);
double mask_iou(const Mask& a, const Mask& b);

}  // namespace sv4d
