#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "sv4d/metrics.hpp"
#include "sv4d/toy_scenes.hpp"

using namespace sv4d;

TEST_CASE("gaussian_stats") {
  SUBCASE("identical vectors give zero covariance") {
    const FeatureStats s = gaussian_stats({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
    CHECK(s.cov.norm() == 0.0);
    CHECK(s.mean(0) == 1.0);
    CHECK(s.mean(1) == 2.0);
  }
  SUBCASE("hand-computed two-point case (unbiased n-1)") {
    const FeatureStats s = gaussian_stats({{0.0, 0.0}, {2.0, 0.0}});
    CHECK(s.mean(0) == 1.0);
    CHECK(s.cov(0, 0) == doctest::Approx(2.0));
    CHECK(s.cov(0, 1) == 0.0);
    CHECK(s.cov(1, 1) == 0.0);
  }
  SUBCASE("single vector is an argument error") {
    CHECK_THROWS_AS(gaussian_stats({{1.0}}), std::invalid_argument);
  }
}

TEST_CASE("frechet_distance closed forms") {
  SUBCASE("identical stats give zero") {
    Rng rng(3);
    std::vector<std::vector<double>> feats;
    for (int i = 0; i < 40; ++i) {
      std::vector<double> f(4);
      for (auto& v : f) v = rng.normal();
      feats.push_back(std::move(f));
    }
    const FeatureStats s = gaussian_stats(feats);
    CHECK(frechet_distance(s, s) < 1e-8);
  }
  SUBCASE("N(0,I) vs N(mu,I) gives |mu|^2 (analytic moments)") {
    const int d = 5;
    FeatureStats a, b;
    a.mean = Eigen::VectorXd::Zero(d);
    a.cov = Eigen::MatrixXd::Identity(d, d);
    a.n = 100;
    b = a;
    b.mean << 1.0, -2.0, 0.5, 0.0, 3.0;
    const double mu2 = b.mean.squaredNorm();
    CHECK(std::abs(frechet_distance(a, b) - mu2) < 1e-6);
  }
  SUBCASE("1-D case: means 0 vs 1, variances 1 vs 4 -> 2") {
    FeatureStats a, b;
    a.mean = Eigen::VectorXd::Zero(1);
    a.cov = Eigen::MatrixXd::Identity(1, 1);
    a.n = 10;
    b.mean = Eigen::VectorXd::Ones(1);
    b.cov = Eigen::MatrixXd::Identity(1, 1) * 4.0;
    b.n = 10;
    CHECK(std::abs(frechet_distance(a, b) - 2.0) < 1e-9);
  }
  SUBCASE("symmetric") {
    Rng rng(4);
    std::vector<std::vector<double>> fa, fb;
    for (int i = 0; i < 30; ++i) {
      std::vector<double> f(3), g(3);
      for (auto& v : f) v = rng.normal();
      for (auto& v : g) v = 0.5 + 1.5 * rng.normal();
      fa.push_back(std::move(f));
      fb.push_back(std::move(g));
    }
    const FeatureStats a = gaussian_stats(fa), b = gaussian_stats(fb);
    CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-9));
  }
  SUBCASE("dimension mismatch is an argument error") {
    FeatureStats a, b;
    a.mean = Eigen::VectorXd::Zero(2);
    a.cov = Eigen::MatrixXd::Identity(2, 2);
    b.mean = Eigen::VectorXd::Zero(3);
    b.cov = Eigen::MatrixXd::Identity(3, 3);
    CHECK_THROWS_AS(frechet_distance(a, b), std::invalid_argument);
  }
}

namespace {

// Brute-force adjacency/cover verifiers for the scan orders.
void verify_serpentine(int views, int frames) {
  const ScanOrder s = scan_serpentine(views, frames);
  REQUIRE(s.path.size() == static_cast<size_t>(views) * frames);
  std::set<std::pair<int, int>> seen(s.path.begin(), s.path.end());
  CHECK(seen.size() == s.path.size());  // each cell exactly once
  for (size_t i = 1; i < s.path.size(); ++i) {
    const int dv = std::abs(s.path[i].first - s.path[i - 1].first);
    const int df = std::abs(s.path[i].second - s.path[i - 1].second);
    CHECK(dv + df == 1);  // consecutive cells are grid-adjacent
  }
}

void verify_diag(int views, int frames) {
  const ScanOrder d = scan_diag(views, frames);
  REQUIRE(d.path.size() == static_cast<size_t>(std::max(views, frames)));
  for (size_t i = 1; i < d.path.size(); ++i) {
    CHECK(d.path[i].first >= d.path[i - 1].first);  // monotone in both axes
    CHECK(d.path[i].second >= d.path[i - 1].second);
  }
  CHECK(d.path.front() == std::make_pair(0, 0));
  CHECK(d.path.back() == std::make_pair(views - 1, frames - 1));
}

ImageMatrix noisy_copy(const ImageMatrix& m, double amplitude, bool per_frame, uint64_t seed) {
  ImageMatrix out = m;
  Rng rng(seed);
  for (int v = 0; v < m.views; ++v) {
    // one noise field per view, re-drawn per frame only in per_frame mode
    std::vector<double> field(m.cell(0, 0).data.size());
    for (auto& x : field) x = amplitude * (2.0 * rng.uniform() - 1.0);
    for (int f = 0; f < m.frames; ++f) {
      if (per_frame && f > 0)
        for (auto& x : field) x = amplitude * (2.0 * rng.uniform() - 1.0);
      Image& cell = out.cell(v, f);
      for (size_t i = 0; i < cell.data.size(); ++i)
        cell.data[i] = std::clamp(cell.data[i] + field[i], 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("scan orders") {
  SUBCASE("serpentine V=2, F=3 matches the hand-written path") {
    const ScanOrder s = scan_serpentine(2, 3);
    const std::vector<std::pair<int, int>> expect = {{0, 0}, {0, 1}, {0, 2},
                                                     {1, 2}, {1, 1}, {1, 0}};
    CHECK(s.path == expect);
  }
  SUBCASE("diag of a square matrix is the main diagonal") {
    const ScanOrder d = scan_diag(5, 5);
    for (int i = 0; i < 5; ++i) CHECK(d.path[i] == std::make_pair(i, i));
  }
  SUBCASE("diag V=8, F=5 follows the linspace rounding") {
    const ScanOrder d = scan_diag(8, 5);
    REQUIRE(d.path.size() == 8);
    for (int i = 0; i < 8; ++i) {
      CHECK(d.path[i].first == i);
      CHECK(d.path[i].second == static_cast<int>(std::lround(i * 4.0 / 7.0)));
    }
  }
  SUBCASE("brute-force verification for all V, F in [1,16]^2") {
    for (int v = 1; v <= 16; ++v)
      for (int f = 1; f <= 16; ++f) {
        CAPTURE(v);
        CAPTURE(f);
        verify_serpentine(v, f);
        verify_diag(v, f);
      }
  }
  SUBCASE("row and column paths cover the grid") {
    const auto rows = scan_fvd_f(3, 4);
    REQUIRE(rows.size() == 3);
    for (int v = 0; v < 3; ++v) {
      REQUIRE(rows[v].path.size() == 4);
      for (int f = 0; f < 4; ++f) CHECK(rows[v].path[f] == std::make_pair(v, f));
    }
    const auto cols = scan_fvd_v(3, 4);
    REQUIRE(cols.size() == 4);
    for (int f = 0; f < 4; ++f)
      for (int v = 0; v < 3; ++v) CHECK(cols[f].path[v] == std::make_pair(v, f));
  }
}

TEST_CASE("video_features") {
  const Scene4D scene = make_scene("bouncing_sphere", 3);
  const CameraTrajectory traj = CameraTrajectory::orbit(2, 10.0, 2.5, 45.0);
  std::vector<double> times;
  for (int i = 0; i < 6; ++i) times.push_back(i / 5.0);
  const ImageMatrix m = render_matrix(scene, traj, times, 32);
  const auto embedder = toy_embedder(5, 12);
  MetricsConfig config;
  config.clip_len = 3;

  SUBCASE("deterministic") {
    const auto a = video_features(m, scan_serpentine(2, 6), *embedder, config);
    const auto b = video_features(m, scan_serpentine(2, 6), *embedder, config);
    CHECK(a == b);
  }
  SUBCASE("clip_len == path length gives exactly one feature") {
    MetricsConfig c2 = config;
    c2.clip_len = 12;
    const auto f = video_features(m, scan_serpentine(2, 6), *embedder, c2);
    CHECK(f.size() == 1);
  }
  SUBCASE("path shorter than clip_len is an argument error") {
    MetricsConfig c2 = config;
    c2.clip_len = 13;
    CHECK_THROWS_AS(video_features(m, scan_serpentine(2, 6), *embedder, c2),
                    std::invalid_argument);
  }
  SUBCASE("temporal shuffling changes the difference-term features") {
    ImageMatrix shuffled = m;
    // swap frames 1 and 3 (the |sin| bounce makes 1 and 4 pixel-identical)
    for (int v = 0; v < m.views; ++v) {
      std::swap(shuffled.cells[shuffled.index(v, 1)], shuffled.cells[shuffled.index(v, 3)]);
      std::swap(shuffled.masks[shuffled.index(v, 1)], shuffled.masks[shuffled.index(v, 3)]);
    }
    const auto row = scan_fvd_f(2, 6)[0];
    const auto a = video_features(m, row, *embedder, config);
    const auto b = video_features(shuffled, row, *embedder, config);
    double diff = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
      for (size_t j = 0; j < a[i].size(); ++j) diff += std::abs(a[i][j] - b[i][j]);
    CHECK(diff > 1e-3);
  }
}

TEST_CASE("evaluate_matrix") {
  const Scene4D scene = make_scene("bouncing_sphere", 7);
  const CameraTrajectory traj = CameraTrajectory::orbit(4, 12.0, 2.6, 45.0);
  std::vector<double> times;
  for (int i = 0; i < 8; ++i) times.push_back(i / 7.0);
  const ImageMatrix truth = render_matrix(scene, traj, times, 32);
  const auto embedder = toy_embedder(9, 16);
  MetricsConfig config;

  SUBCASE("self comparison is exact") {
    const MetricsReport r = evaluate_matrix(truth, truth, *embedder, config);
    CHECK(r.fvd_f <= 1e-6);
    CHECK(r.fvd_v <= 1e-6);
    CHECK(r.fvd_diag <= 1e-6);
    CHECK(r.fv4d <= 1e-6);
    CHECK(r.lpips_like == doctest::Approx(0.0));
    CHECK(r.clip_s_like == doctest::Approx(1.0));
  }

  SUBCASE("per-frame-independent noise inflates FVD-F more than per-view noise") {
    const double amplitude = 0.12;
    const ImageMatrix per_frame = noisy_copy(truth, amplitude, true, 100);
    const ImageMatrix per_view = noisy_copy(truth, amplitude, false, 100);
    const MetricsReport rf = evaluate_matrix(per_frame, truth, *embedder, config);
    const MetricsReport rv = evaluate_matrix(per_view, truth, *embedder, config);
    CHECK(rf.fvd_f > rv.fvd_f);
    CHECK(rf.fvd_f >= 3.0 * rv.fvd_f);
  }

  SUBCASE("view permutation inflates FVD-V; per-row FVD-F multiset unchanged") {
    ImageMatrix permuted = truth;
    const std::vector<int> perm = {2, 0, 3, 1};
    for (int v = 0; v < 4; ++v)
      for (int f = 0; f < truth.frames; ++f) {
        permuted.cells[permuted.index(v, f)] = truth.cell(perm[v], f);
        permuted.masks[permuted.index(v, f)] = truth.mask(perm[v], f);
      }
    const MetricsReport base = evaluate_matrix(truth, truth, *embedder, config);
    const MetricsReport perm_r = evaluate_matrix(permuted, truth, *embedder, config);
    CHECK(perm_r.fvd_v > base.fvd_v + 1e-6);

    auto sorted = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v;
    };
    const auto a = sorted(base.fvd_f_per_path);
    const auto b = sorted(perm_r.fvd_f_per_path);
    REQUIRE(a.size() == b.size());
    REQUIRE(!a.empty());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
  }

  SUBCASE("save/load round trip moves metrics by at most quantization effects") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "sv4d_metrics_roundtrip";
    fs::remove_all(dir);
    save_matrix(truth, dir);
    const ImageMatrix loaded = load_matrix(dir);
    const MetricsReport r = evaluate_matrix(loaded, truth, *embedder, config);
    CHECK(r.lpips_like < 1e-4);
    CHECK(r.clip_s_like > 0.9999);
    CHECK(r.fvd_f < 1.0e-2);
    CHECK(r.fv4d < 1.0e-2);
  }

  SUBCASE("shape mismatch is an argument error") {
    const ImageMatrix small = render_matrix(scene, traj, {0.0, 0.5, 1.0}, 32);
    CHECK_THROWS_AS(evaluate_matrix(small, truth, *embedder, config), std::invalid_argument);
  }
}
