#pragma once

#include <string>
#include <vector>

#include "sv4d/matrix_core.hpp"
#include "sv4d/toy_scenes.hpp"

namespace sv4d {

struct CurationConfig {
  int min_frames = 8;
  int n_keyframes = 4;              // K
  double motion_threshold = 0.01;   // mean-per-pixel L1
  double base_distance = 1.5;
  double distance_step = 1.2;       // multiplicative, > 1
  int base_temporal_step = 1;
  double step_l1_threshold = 0.02;
  double margin = 0.05;             // fractional image border for the fit probe
  bool consecutive_pairs_only = false;
  std::vector<std::string> license_exclusions;  // asset ids rejected outright

  void validate() const;
};

enum class CurationReason { kOk, kTooFewFrames, kInsufficientMotion, kLicenseExcluded };

std::string to_string(CurationReason reason);

struct CurationVerdict {
  bool keep = false;
  CurationReason reason = CurationReason::kOk;
  double motion_score = 0.0;
  double chosen_distance = 0.0;
  int chosen_temporal_step = 0;
};

/// Max over keyframe pairs of mean-per-pixel L1 distance; keyframes at
/// round(linspace(0, F-1, K)). With consecutive_only, pairs are restricted to
/// neighbors in keyframe order.
double motion_score(const InputVideo& video, int k, bool consecutive_only = false);

/// Frame-count then motion thresholding; asset_id consulted against the
/// license exclusion list first.
CurationVerdict filter_asset(const InputVideo& video, const CurationConfig& config,
                             const std::string& asset_id = "");

/// Geometric camera-distance search: smallest base*step^k whose 64^2 mask probe
/// keeps every foreground pixel at least margin*64 pixels from every border,
/// across all (v, f). Throws DivergenceError after 20 doublings.
double fit_camera_distance(const Scene4D& scene, const CameraTrajectory& trajectory,
                           const std::vector<double>& frame_times, const CurationConfig& config);

/// Increment the temporal step until every consecutive sampled pair moves by at
/// least step_l1_threshold, or fewer than 2 samples remain (saturating).
int fit_temporal_step(const InputVideo& video, const CurationConfig& config);

}  // namespace sv4d
