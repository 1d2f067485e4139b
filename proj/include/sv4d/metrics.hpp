#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sv4d/matrix_core.hpp"

namespace sv4d {

/// Gaussian moments of a feature population.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // symmetric PSD (clamped)
  int n = 0;
};

/// Sample mean and unbiased covariance; needs at least two vectors.
FeatureStats gaussian_stats(const std::vector<std::vector<double>>& features);

/// Frechet distance between Gaussians: |mu_a - mu_b|^2 + tr(Sa + Sb - 2(Sa Sb)^(1/2)).
/// The matrix square root uses the symmetrized product; eigenvalues below
/// -1e-6 are treated as numerical error (clamped with a warning to stderr).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Ordered cell path through the image matrix.
struct ScanOrder {
  std::vector<std::pair<int, int>> path;  // (v, f)
};

std::vector<ScanOrder> scan_fvd_f(int views, int frames);   // V row paths
std::vector<ScanOrder> scan_fvd_v(int views, int frames);   // F column paths
ScanOrder scan_diag(int views, int frames);                 // one diagonal path
ScanOrder scan_serpentine(int views, int frames);           // one boustrophedon path

struct MetricsConfig {
  int clip_len = 3;
  int feature_dim = 16;
  uint64_t projection_seed = 77;

  void validate() const;
};

/// Motion-sensitive toy video feature: per sliding window of clip_len path
/// images, concatenate the per-image embeddings with the embeddings of
/// adjacent-image differences, then apply a fixed seeded projection.
std::vector<std::vector<double>> video_features(const ImageMatrix& matrix, const ScanOrder& path,
                                                const ImageEmbedder& embedder,
                                                const MetricsConfig& config);

struct MetricsReport {
  double lpips_like = 0.0;
  double clip_s_like = 0.0;
  double fvd_f = 0.0;
  double fvd_v = 0.0;
  double fvd_diag = 0.0;
  double fv4d = 0.0;
  // per-path distances against the pooled reference stats of the variant
  std::vector<double> fvd_f_per_path;
  std::vector<double> fvd_v_per_path;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Full image-matrix evaluation against a ground-truth matrix.
MetricsReport evaluate_matrix(const ImageMatrix& generated, const ImageMatrix& ground_truth,
                              const ImageEmbedder& embedder, const MetricsConfig& config);

}  // namespace sv4d
