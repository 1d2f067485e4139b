#include "sv4d/curation.hpp"

#include <algorithm>

namespace sv4d {

void CurationConfig::validate() const {
  if (n_keyframes < 2) throw ConfigError("CurationConfig: n_keyframes must be >= 2");
  if (motion_threshold <= 0.0 || step_l1_threshold <= 0.0 || base_distance <= 0.0)
    throw ConfigError("CurationConfig: thresholds must be > 0");
  if (distance_step <= 1.0) throw ConfigError("CurationConfig: distance_step must be > 1");
  if (base_temporal_step < 1) throw ConfigError("CurationConfig: base_temporal_step must be >= 1");
  if (margin < 0.0 || margin >= 0.5) throw ConfigError("CurationConfig: margin must be in [0, 0.5)");
}

std::string to_string(CurationReason reason) {
  switch (reason) {
    case CurationReason::kOk: return "ok";
    case CurationReason::kTooFewFrames: return "too_few_frames";
    case CurationReason::kInsufficientMotion: return "insufficient_motion";
    case CurationReason::kLicenseExcluded: return "license_excluded";
  }
  return "unknown";
}

double motion_score(const InputVideo& video, int k, bool consecutive_only) {
  const int f_count = video.frame_count();
  if (k < 2) throw std::invalid_argument("motion_score: K must be >= 2");
  if (f_count < k) throw std::invalid_argument("motion_score: video has fewer frames than K");
  const std::vector<int> keys = rounded_linspace(f_count - 1, k);
  double best = 0.0;
  for (int i = 0; i < k; ++i) {
    const int j_end = consecutive_only ? std::min(i + 2, k) : k;
    for (int j = i + 1; j < j_end; ++j)
      best = std::max(best, mean_abs_diff(video.frames[keys[i]], video.frames[keys[j]]));
  }
  return best;
}

CurationVerdict filter_asset(const InputVideo& video, const CurationConfig& config,
                             const std::string& asset_id) {
  config.validate();
  CurationVerdict verdict;
  if (!asset_id.empty() &&
      std::find(config.license_exclusions.begin(), config.license_exclusions.end(), asset_id) !=
          config.license_exclusions.end()) {
    verdict.reason = CurationReason::kLicenseExcluded;
    return verdict;
  }
  if (video.frame_count() < config.min_frames) {
    verdict.reason = CurationReason::kTooFewFrames;
    return verdict;
  }
  verdict.motion_score =
      motion_score(video, std::min(config.n_keyframes, video.frame_count()),
                   config.consecutive_pairs_only);
  if (verdict.motion_score < config.motion_threshold) {
    verdict.reason = CurationReason::kInsufficientMotion;
    return verdict;
  }
  verdict.keep = true;
  verdict.reason = CurationReason::kOk;
  return verdict;
}

namespace {

constexpr int kProbeResolution = 64;

// A frame fits when the object is visible and clear of the border band. An
// empty mask means the object left the frustum entirely, which is not a fit.
bool mask_fits(const Mask& mask, double margin) {
  const int border = static_cast<int>(std::ceil(margin * kProbeResolution));
  const int r = mask.height;
  bool any = false;
  for (int y = 0; y < r; ++y)
    for (int x = 0; x < r; ++x) {
      if (mask.at(0, y, x) < 0.5) continue;
      any = true;
      const int edge_dist = std::min({y, x, r - 1 - y, r - 1 - x});
      if (edge_dist <= border - 1 || (border == 0 && edge_dist == 0)) return false;
    }
  return any;
}

}  // namespace

double fit_camera_distance(const Scene4D& scene, const CameraTrajectory& trajectory,
                           const std::vector<double>& frame_times, const CurationConfig& config) {
  config.validate();
  double distance = config.base_distance;
  const double limit = config.base_distance * std::pow(2.0, 20);
  while (distance <= limit) {
    CameraTrajectory probe = trajectory;
    probe.distance = distance;
    bool fits = true;
    for (int v = 0; v < probe.view_count() && fits; ++v)
      for (double t : frame_times) {
        const RenderResult r = render(scene, probe, v, t, kProbeResolution);
        if (!mask_fits(r.mask, config.margin)) {
          fits = false;
          break;
        }
      }
    if (fits) return distance;
    distance *= config.distance_step;
  }
  throw DivergenceError("fit_camera_distance: no fitting distance within 20 doublings");
}

int fit_temporal_step(const InputVideo& video, const CurationConfig& config) {
  config.validate();
  const int f_count = video.frame_count();
  if (f_count < 2 * config.base_temporal_step)
    throw std::invalid_argument("fit_temporal_step: need F >= 2*base_temporal_step");
  int step = config.base_temporal_step;
  while (true) {
    const int n_samples = f_count / step;
    if (n_samples < 2) return step - 1;  // previous step was the last valid one
    double min_delta = kDepthInf;
    for (int i = 0; i + 1 < n_samples; ++i)
      min_delta = std::min(
          min_delta, mean_abs_diff(video.frames[i * step], video.frames[(i + 1) * step]));
    if (min_delta >= config.step_l1_threshold) return step;
    ++step;
  }
}

}  // namespace sv4d
