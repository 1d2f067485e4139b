#include "sv4d/metrics.hpp"

#include <iostream>

namespace sv4d {

FeatureStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2)
    throw std::invalid_argument("gaussian_stats: need at least two feature vectors");
  const int n = static_cast<int>(features.size());
  const int d = static_cast<int>(features[0].size());
  FeatureStats stats;
  stats.n = n;
  stats.mean = Eigen::VectorXd::Zero(d);
  for (const auto& f : features) {
    if (static_cast<int>(f.size()) != d)
      throw std::invalid_argument("gaussian_stats: ragged feature vectors");
    stats.mean += Eigen::Map<const Eigen::VectorXd>(f.data(), d);
  }
  stats.mean /= n;
  stats.cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& f : features) {
    const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(f.data(), d) - stats.mean;
    stats.cov += c * c.transpose();
  }
  stats.cov /= (n - 1);
  return stats;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig((m + m.transpose()) / 2.0);
  Eigen::VectorXd vals = eig.eigenvalues();
  for (int i = 0; i < vals.size(); ++i) {
    if (vals[i] < -1e-6)
      std::cerr << "frechet_distance: clamping negative eigenvalue " << vals[i] << " in " << what
                << "\n";
    vals[i] = std::max(0.0, vals[i]);
  }
  return eig.eigenvectors() * vals.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size())
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  const Eigen::VectorXd dm = a.mean - b.mean;
  const Eigen::MatrixXd sa_half = psd_sqrt(a.cov, "cov_a");
  const Eigen::MatrixXd inner = sa_half * b.cov * sa_half;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig((inner + inner.transpose()) / 2.0);
  double tr_sqrt = 0.0;
  for (int i = 0; i < eig.eigenvalues().size(); ++i) {
    double v = eig.eigenvalues()[i];
    if (v < -1e-6)
      std::cerr << "frechet_distance: clamping negative eigenvalue " << v << " in product\n";
    tr_sqrt += std::sqrt(std::max(0.0, v));
  }
  const double value = dm.squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

std::vector<ScanOrder> scan_fvd_f(int views, int frames) {
  std::vector<ScanOrder> out(views);
  for (int v = 0; v < views; ++v)
    for (int f = 0; f < frames; ++f) out[v].path.emplace_back(v, f);
  return out;
}

std::vector<ScanOrder> scan_fvd_v(int views, int frames) {
  std::vector<ScanOrder> out(frames);
  for (int f = 0; f < frames; ++f)
    for (int v = 0; v < views; ++v) out[f].path.emplace_back(v, f);
  return out;
}

ScanOrder scan_diag(int views, int frames) {
  ScanOrder out;
  const int n = std::max(views, frames);
  for (int i = 0; i < n; ++i) {
    const int v =
        n == 1 ? 0
               : static_cast<int>(std::lround(static_cast<double>(i) * (views - 1) / (n - 1)));
    const int f =
        n == 1 ? 0
               : static_cast<int>(std::lround(static_cast<double>(i) * (frames - 1) / (n - 1)));
    out.path.emplace_back(v, f);
  }
  return out;
}

ScanOrder scan_serpentine(int views, int frames) {
  ScanOrder out;
  for (int v = 0; v < views; ++v) {
    if (v % 2 == 0)
      for (int f = 0; f < frames; ++f) out.path.emplace_back(v, f);
    else
      for (int f = frames - 1; f >= 0; --f) out.path.emplace_back(v, f);
  }
  return out;
}

void MetricsConfig::validate() const {
  if (clip_len < 2) throw ConfigError("MetricsConfig: clip_len must be >= 2");
  if (feature_dim < 1) throw ConfigError("MetricsConfig: feature_dim must be >= 1");
}

std::vector<std::vector<double>> video_features(const ImageMatrix& matrix, const ScanOrder& path,
                                                const ImageEmbedder& embedder,
                                                const MetricsConfig& config) {
  config.validate();
  const int len = static_cast<int>(path.path.size());
  if (len < config.clip_len)
    throw std::invalid_argument("video_features: path shorter than clip_len");

  // per-cell embeddings and adjacent-difference embeddings along the path
  std::vector<std::vector<double>> cell_emb(len);
  for (int i = 0; i < len; ++i)
    cell_emb[i] = embedder.embed(matrix.cell(path.path[i].first, path.path[i].second));
  std::vector<std::vector<double>> diff_emb(len - 1);
  for (int i = 0; i + 1 < len; ++i) {
    const Image& a = matrix.cell(path.path[i].first, path.path[i].second);
    const Image& b = matrix.cell(path.path[i + 1].first, path.path[i + 1].second);
    Image diff = a;
    // gain-scaled absolute difference: zero away from motion, so the
    // embedding direction tracks where change happens
    for (size_t j = 0; j < diff.data.size(); ++j)
      diff.data[j] = std::min(1.0, 3.0 * std::abs(b.data[j] - a.data[j]));
    diff_emb[i] = embedder.embed(diff);
  }

  const int d_e = embedder.dim();
  const int concat = (2 * config.clip_len - 1) * d_e;
  // fixed seeded projection shared by every call with the same config
  Rng rng(config.projection_seed ^ 0xF337ull);
  std::vector<double> projection(static_cast<size_t>(config.feature_dim) * concat);
  const double scale = 1.0 / std::sqrt(static_cast<double>(concat));
  for (auto& w : projection) w = rng.normal() * scale;

  std::vector<std::vector<double>> out;
  for (int start = 0; start + config.clip_len <= len; ++start) {
    std::vector<double> window;
    window.reserve(concat);
    for (int i = 0; i < config.clip_len; ++i)
      window.insert(window.end(), cell_emb[start + i].begin(), cell_emb[start + i].end());
    for (int i = 0; i + 1 < config.clip_len; ++i)
      window.insert(window.end(), diff_emb[start + i].begin(), diff_emb[start + i].end());
    std::vector<double> feat(config.feature_dim, 0.0);
    for (int d = 0; d < config.feature_dim; ++d) {
      const double* row = projection.data() + static_cast<size_t>(d) * concat;
      double acc = 0.0;
      for (int i = 0; i < concat; ++i) acc += row[i] * window[i];
      feat[d] = acc;
    }
    out.push_back(std::move(feat));
  }
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"lpips_like", lpips_like},
          {"clip_s_like", clip_s_like},
          {"fvd_f", fvd_f},
          {"fvd_v", fvd_v},
          {"fvd_diag", fvd_diag},
          {"fv4d", fv4d},
          {"per_path", {{"fvd_f", fvd_f_per_path}, {"fvd_v", fvd_v_per_path}}}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.lpips_like = j.at("lpips_like").get<double>();
  r.clip_s_like = j.at("clip_s_like").get<double>();
  r.fvd_f = j.at("fvd_f").get<double>();
  r.fvd_v = j.at("fvd_v").get<double>();
  r.fvd_diag = j.at("fvd_diag").get<double>();
  r.fv4d = j.at("fv4d").get<double>();
  if (j.contains("per_path")) {
    r.fvd_f_per_path = j["per_path"].value("fvd_f", std::vector<double>{});
    r.fvd_v_per_path = j["per_path"].value("fvd_v", std::vector<double>{});
  }
  return r;
}

namespace {

using FeatureList = std::vector<std::vector<double>>;

void append(FeatureList& into, FeatureList&& more) {
  for (auto& f : more) into.push_back(std::move(f));
}

}  // namespace

MetricsReport evaluate_matrix(const ImageMatrix& generated, const ImageMatrix& ground_truth,
                              const ImageEmbedder& embedder, const MetricsConfig& config) {
  config.validate();
  if (generated.views != ground_truth.views || generated.frames != ground_truth.frames ||
      !generated.cell(0, 0).same_shape(ground_truth.cell(0, 0)))
    throw std::invalid_argument("evaluate_matrix: matrices must share V, F and resolution");

  MetricsReport report;

  // per-cell perceptual distance and embedding cosine
  double lpips = 0.0, clip_s = 0.0;
  for (int v = 0; v < generated.views; ++v)
    for (int f = 0; f < generated.frames; ++f) {
      lpips += perceptual_distance(generated.cell(v, f), ground_truth.cell(v, f), embedder);
      const auto ea = embedder.embed(generated.cell(v, f));
      const auto eb = embedder.embed(ground_truth.cell(v, f));
      double dot = 0.0;
      for (size_t i = 0; i < ea.size(); ++i) dot += ea[i] * eb[i];
      clip_s += dot;
    }
  const double cells = static_cast<double>(generated.views) * generated.frames;
  report.lpips_like = lpips / cells;
  report.clip_s_like = clip_s / cells;

  struct Variant {
    const std::vector<ScanOrder>* paths;
    double* headline;
    std::vector<double>* per_path;
  };
  const auto row_paths = scan_fvd_f(generated.views, generated.frames);
  const auto col_paths = scan_fvd_v(generated.views, generated.frames);
  const std::vector<ScanOrder> diag_paths = {scan_diag(generated.views, generated.frames)};
  const std::vector<ScanOrder> serp_paths = {scan_serpentine(generated.views, generated.frames)};
  const Variant variants[] = {
      {&row_paths, &report.fvd_f, &report.fvd_f_per_path},
      {&col_paths, &report.fvd_v, &report.fvd_v_per_path},
      {&diag_paths, &report.fvd_diag, nullptr},
      {&serp_paths, &report.fv4d, nullptr},
  };

  for (const Variant& variant : variants) {
    FeatureList gen_pool, ref_pool;
    std::vector<FeatureList> gen_per_path;
    for (const auto& path : *variant.paths) {
      if (static_cast<int>(path.path.size()) < config.clip_len)
        throw std::invalid_argument("evaluate_matrix: path shorter than clip_len");
      FeatureList gen_f = video_features(generated, path, embedder, config);
      FeatureList ref_f = video_features(ground_truth, path, embedder, config);
      gen_per_path.push_back(gen_f);
      append(gen_pool, std::move(gen_f));
      append(ref_pool, std::move(ref_f));
    }
    const FeatureStats ref_stats = gaussian_stats(ref_pool);
    *variant.headline = frechet_distance(gaussian_stats(gen_pool), ref_stats);
    if (variant.per_path && gen_per_path.front().size() >= 2) {
      for (const auto& path_features : gen_per_path)
        variant.per_path->push_back(frechet_distance(gaussian_stats(path_features), ref_stats));
    }
  }
  return report;
}

}  // namespace sv4d
