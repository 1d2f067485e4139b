#include <doctest.h>

#include <set>

#include "sv4d/sampler.hpp"

using namespace sv4d;

namespace {

// Brute-force plan verifier, independent of the implementation:
//  - anchors are unique(round(linspace(0, F-1, F_model))), include both ends
//  - every non-anchor frame is generated in exactly one window
//  - windows chain left-to-right and respect the per-pass frame capacity
void verify_mixed_plan(const SamplingPlan& plan) {
  const int f_total = plan.f_total, f_model = plan.f_model;

  std::set<int> expected_anchors;
  if (f_total == 1) {
    expected_anchors = {0};
  } else {
    for (int i = 0; i < f_model; ++i)
      expected_anchors.insert(
          static_cast<int>(std::lround(static_cast<double>(i) * (f_total - 1) / (f_model - 1))));
  }
  REQUIRE(std::set<int>(plan.anchors.begin(), plan.anchors.end()) == expected_anchors);
  REQUIRE(plan.anchors.front() == 0);
  REQUIRE(plan.anchors.back() == f_total - 1);
  if (f_total >= f_model) REQUIRE(static_cast<int>(plan.anchors.size()) == f_model);

  std::set<int> covered;
  for (const auto& w : plan.windows) {
    REQUIRE(!w.interior.empty());
    // capacity: one conditioning anchor + free frames per pass
    REQUIRE(static_cast<int>(w.interior.size()) <= f_model - 1);
    REQUIRE(w.left >= 0);
    REQUIRE(w.right >= 0);
    // the conditioning anchor must exist before this window runs
    REQUIRE((expected_anchors.count(w.left) || covered.count(w.left)));
    // interior frames lie strictly inside (left, right]; the right bound is
    // closed exactly when it is a derived anchor generated here
    for (const int f : w.interior) {
      REQUIRE(f > w.left);
      if (w.right_fixed)
        REQUIRE(f < w.right);
      else
        REQUIRE(f <= w.right);
      REQUIRE(covered.insert(f).second);  // exactly once
    }
    if (w.right_fixed) REQUIRE(expected_anchors.count(w.right) == 1);
    if (!w.right_fixed) REQUIRE(w.right == w.interior.back());
  }
  for (int f = 0; f < f_total; ++f) {
    const bool is_anchor = expected_anchors.count(f) > 0;
    CAPTURE(f);
    REQUIRE(covered.count(f) == (is_anchor ? 0u : 1u));
  }
}

class FakeDenoiser final : public SamplingDenoiser {
 public:
  FakeDenoiser(int max_frames, double cond_value, double uncond_value)
      : max_frames_(max_frames), cond_value_(cond_value), uncond_value_(uncond_value) {}
  LatentGrid denoise(const LatentGrid& z, const DenoiseRequest& request) override {
    LatentGrid out = z;
    const double v = request.conditional ? cond_value_ : uncond_value_;
    for (auto& x : out.data) x = v;
    return out;
  }
  int max_frames() const override { return max_frames_; }

 private:
  int max_frames_;
  double cond_value_, uncond_value_;
};

}  // namespace

TEST_CASE("plan_generation examples") {
  SUBCASE("matrix fits in one pass") {
    const SamplingPlan p = plan_generation(5, 5, SamplingMode::kMixed);
    CHECK(p.anchors == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(p.windows.empty());
  }
  SUBCASE("21 frames, model 5: anchors every 5, four windows of 4") {
    const SamplingPlan p = plan_generation(21, 5, SamplingMode::kMixed);
    CHECK(p.anchors == std::vector<int>{0, 5, 10, 15, 20});
    REQUIRE(p.windows.size() == 4);
    for (const auto& w : p.windows) CHECK(w.interior.size() == 4);
    CHECK(p.windows[0].left == 0);
    CHECK(p.windows[0].right == 5);
    CHECK(p.windows[0].interior == std::vector<int>{1, 2, 3, 4});
    CHECK(p.windows[3].interior == std::vector<int>{16, 17, 18, 19});
  }
  SUBCASE("7 frames, model 3: the illustrative layout") {
    const SamplingPlan p = plan_generation(7, 3, SamplingMode::kMixed);
    CHECK(p.anchors == std::vector<int>{0, 3, 6});
    REQUIRE(p.windows.size() == 2);
    CHECK(p.windows[0].left == 0);
    CHECK(p.windows[0].interior == std::vector<int>{1, 2});
    CHECK(p.windows[0].right == 3);
    CHECK(p.windows[1].left == 3);
    CHECK(p.windows[1].interior == std::vector<int>{4, 5});
    CHECK(p.windows[1].right == 6);
  }
  SUBCASE("trivial plan for F_total=1") {
    const SamplingPlan p = plan_generation(1, 4, SamplingMode::kMixed);
    CHECK(p.anchors == std::vector<int>{0});
    CHECK(p.windows.empty());
  }
  SUBCASE("independent mode chunks") {
    const SamplingPlan p = plan_generation(11, 4, SamplingMode::kIndependent);
    CHECK(p.anchors.empty());
    REQUIRE(p.windows.size() == 3);
    CHECK(p.windows[0].interior == std::vector<int>{0, 1, 2, 3});
    CHECK(p.windows[2].interior == std::vector<int>{8, 9, 10});
    for (const auto& w : p.windows) CHECK(w.left == -1);
  }
  SUBCASE("interleaved mode chains on the previous frame") {
    const SamplingPlan p = plan_generation(7, 3, SamplingMode::kInterleaved);
    CHECK(p.anchors == std::vector<int>{0, 3, 6});
    REQUIRE(p.windows.size() == 2);
    CHECK(p.windows[0].left == 0);
    CHECK(p.windows[0].interior == std::vector<int>{1, 2});
    CHECK(p.windows[0].right == -1);
    CHECK(p.windows[1].left == 3);
  }
}

TEST_CASE("plan invariants hold for every (F_total, F_model) in [1,200]x[2,8]") {
  for (int f_model = 2; f_model <= 8; ++f_model)
    for (int f_total = 1; f_total <= 200; ++f_total) {
      CAPTURE(f_total);
      CAPTURE(f_model);
      verify_mixed_plan(plan_generation(f_total, f_model, SamplingMode::kMixed));
    }
}

TEST_CASE("cfg_scale") {
  CFGSchedule cfg{1.0, 3.0};
  SUBCASE("corners") {
    CHECK(cfg_scale(0, 0, 8, 5, cfg) == 1.0);
    CHECK(cfg_scale(4, 4, 8, 5, cfg) == 3.0);  // back view, last frame
  }
  SUBCASE("hand-evaluated midpoint: V=8, F=5, (2,2) -> 2.0") {
    CHECK(cfg_scale(2, 2, 8, 5, cfg) == doctest::Approx(2.0));
  }
  SUBCASE("monotone in f, unimodal in v") {
    for (int v = 0; v < 8; ++v)
      for (int f = 1; f < 5; ++f)
        CHECK(cfg_scale(v, f, 8, 5, cfg) >= cfg_scale(v, f - 1, 8, 5, cfg));
    for (int f = 0; f < 5; ++f) {
      for (int v = 1; v <= 4; ++v)
        CHECK(cfg_scale(v, f, 8, 5, cfg) >= cfg_scale(v - 1, f, 8, 5, cfg));
      for (int v = 5; v < 8; ++v)
        CHECK(cfg_scale(v, f, 8, 5, cfg) <= cfg_scale(v - 1, f, 8, 5, cfg));
    }
  }
  SUBCASE("range bounds") {
    for (int v = 0; v < 8; ++v)
      for (int f = 0; f < 5; ++f) {
        const double s = cfg_scale(v, f, 8, 5, cfg);
        CHECK(s >= 1.0);
        CHECK(s <= 3.0);
      }
  }
}

TEST_CASE("sigma_ladder") {
  SamplerConfig config;
  config.steps = 10;
  config.sigma_min = 0.002;
  config.sigma_max = 80.0;
  config.rho = 7.0;
  const auto sigmas = sigma_ladder(config);
  REQUIRE(sigmas.size() == 11);
  CHECK(sigmas[0] == 80.0);
  CHECK(sigmas[9] == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(sigmas[10] == 0.0);
  for (size_t i = 1; i < sigmas.size(); ++i) CHECK(sigmas[i] < sigmas[i - 1]);

  // independently coded formula evaluation
  for (int i = 0; i < 10; ++i) {
    const double a = std::pow(80.0, 1.0 / 7.0);
    const double b = std::pow(0.002, 1.0 / 7.0);
    const double expect = std::pow(a + i / 9.0 * (b - a), 7.0);
    CHECK(std::abs(sigmas[i] - expect) < 1e-12 * std::max(1.0, expect));
  }

  SUBCASE("single step ladder") {
    config.steps = 1;
    const auto s1 = sigma_ladder(config);
    CHECK(s1 == std::vector<double>{80.0, 0.0});
  }
}

namespace {

WindowTask simple_task(int views, int f_total) {
  WindowTask task;
  task.views = views;
  task.channels = 2;
  task.height = 4;
  task.width = 4;
  task.f_total = f_total;
  const size_t cell = 2 * 4 * 4;
  auto cond_for = [&](const std::vector<int>& frames) {
    DenoiserConditioning cond;
    for (size_t i = 0; i < frames.size(); ++i) {
      cond.input_video_latents.emplace_back(cell, 0.1);
      cond.input_frame_embeddings.emplace_back(4, 0.5);
    }
    cond.reference_view_embeddings.assign(views, std::vector<double>(4, 0.5));
    cond.camera = CameraTrajectory::orbit(views, 0.0, 2.0, 45.0);
    return cond;
  };
  task.frame_indices = {1, 2};
  task.fixed_latents[0] = LatentColumn(views, std::vector<double>(cell, 0.7));
  task.fixed_latents[3] = LatentColumn(views, std::vector<double>(cell, 0.3));
  task.cond_forward = cond_for({0, 1, 2});
  task.cond_backward = cond_for({1, 2, 3});
  return task;
}

}  // namespace

TEST_CASE("sample_window") {
  SamplerConfig config;
  config.steps = 4;
  config.seed = 9;

  SUBCASE("direction alternation is forward, backward, forward, ...") {
    FakeDenoiser den(4, 0.5, -0.5);
    WindowTask task = simple_task(2, 4);
    Rng rng(1);
    std::vector<SampleDirection> log;
    sample_window(den, task, config, rng, &log);
    REQUIRE(log.size() == 4);
    CHECK(log[0] == SampleDirection::kForward);
    CHECK(log[1] == SampleDirection::kBackward);
    CHECK(log[2] == SampleDirection::kForward);
    CHECK(log[3] == SampleDirection::kBackward);
  }

  SUBCASE("anchor latents pass through bitwise") {
    FakeDenoiser den(4, 0.5, -0.5);
    WindowTask task = simple_task(2, 4);
    Rng rng(2);
    const LatentGrid out = sample_window(den, task, config, rng);
    REQUIRE(out.frames == 4);
    for (int v = 0; v < 2; ++v) {
      CHECK(out.cell_copy(v, 0) == task.fixed_latents[0][v]);
      CHECK(out.cell_copy(v, 3) == task.fixed_latents[3][v]);
    }
  }

  SUBCASE("scale-1 CFG never consults the unconditional branch (bitwise)") {
    config.cfg = {1.0, 1.0};
    WindowTask task = simple_task(2, 4);
    FakeDenoiser a(4, 0.5, -123.0);
    FakeDenoiser b(4, 0.5, +777.0);
    Rng r1(3), r2(3);
    const LatentGrid out_a = sample_window(a, task, config, r1);
    const LatentGrid out_b = sample_window(b, task, config, r2);
    CHECK(out_a.data == out_b.data);
  }

  SUBCASE("one Euler step with an oracle lands exactly on the clean latent") {
    config.steps = 1;
    config.cfg = {1.0, 1.0};
    LatentGrid truth(2, 4, 2, 4, 4);
    Rng trng(4);
    for (auto& x : truth.data) x = trng.uniform();
    OracleDenoiser oracle(truth);
    WindowTask task = simple_task(2, 4);
    for (int v = 0; v < 2; ++v) {
      task.fixed_latents[0][v] = truth.cell_copy(v, 0);
      task.fixed_latents[3][v] = truth.cell_copy(v, 3);
    }
    Rng rng(5);
    const LatentGrid out = sample_window(oracle, task, config, rng);
    for (int v = 0; v < 2; ++v)
      for (int f = 0; f < 4; ++f) {
        const auto got = out.cell_copy(v, f);
        const auto want = truth.cell_copy(v, f);
        for (size_t i = 0; i < got.size(); ++i)
          CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
  }

  SUBCASE("malformed anchor latents are an argument error") {
    FakeDenoiser den(4, 0.5, -0.5);
    WindowTask task = simple_task(2, 4);
    task.fixed_latents[0] = LatentColumn(1);  // wrong view count
    Rng rng(6);
    CHECK_THROWS_AS(sample_window(den, task, config, rng), std::invalid_argument);
  }
}

TEST_CASE("oracle end-to-end generation on bouncing_sphere") {
  const Scene4D scene = make_scene("bouncing_sphere", 11);
  const CameraTrajectory traj = CameraTrajectory::orbit(4, 12.0, 2.6, 45.0);
  const int f_total = 13, res = 32;
  std::vector<double> times;
  for (int f = 0; f < f_total; ++f) times.push_back(static_cast<double>(f) / (f_total - 1));
  const ImageMatrix truth = render_matrix(scene, traj, times, res);

  const auto codec = pool_codec(2);
  const auto embedder = toy_embedder(1, 16);
  OracleDenoiser oracle(encode_matrix(truth, *codec));

  SamplerConfig config;
  config.steps = 10;
  config.seed = 42;
  config.cfg = {1.0, 2.0};

  SampleMatrixInputs inputs;
  InputVideo video = view_video(truth, 0);
  inputs.input_video = &video;
  inputs.trajectory = traj;
  inputs.plan = plan_generation(f_total, 5, SamplingMode::kMixed);
  inputs.provider = RefProvider::kOracle;
  inputs.scene = &scene;

  const ImageMatrix generated = sample_matrix(oracle, inputs, config, *codec, *embedder);

  SUBCASE("matches ground truth within codec tolerance + 2/255") {
    const double tol = codec->round_trip_tolerance() + 2.0 / 255.0;
    for (int v = 0; v < 4; ++v)
      for (int f = 0; f < f_total; ++f) {
        CAPTURE(v);
        CAPTURE(f);
        CHECK(mean_abs_diff(generated.cell(v, f), truth.cell(v, f)) <= tol);
      }
  }

  SUBCASE("row 0 is the input video bitwise; column 0 the reference views") {
    for (int f = 0; f < f_total; ++f)
      CHECK(max_abs_diff(generated.cell(0, f), truth.cell(0, f)) == 0.0);
    for (int v = 0; v < 4; ++v)
      CHECK(max_abs_diff(generated.cell(v, 0), truth.cell(v, 0)) == 0.0);
  }

  SUBCASE("same seed reruns bitwise equal") {
    const ImageMatrix again = sample_matrix(oracle, inputs, config, *codec, *embedder);
    for (int v = 0; v < 4; ++v)
      for (int f = 0; f < f_total; ++f)
        CHECK(max_abs_diff(generated.cell(v, f), again.cell(v, f)) == 0.0);
  }

  SUBCASE("plan/video length mismatch is an argument error") {
    SampleMatrixInputs bad = inputs;
    bad.plan = plan_generation(f_total + 1, 5, SamplingMode::kMixed);
    CHECK_THROWS_AS(sample_matrix(oracle, bad, config, *codec, *embedder),
                    std::invalid_argument);
  }
}

TEST_CASE("generate_reference_views") {
  const Scene4D scene = make_scene("static_sphere", 0);
  const CameraTrajectory traj = CameraTrajectory::orbit(4, 10.0, 2.2, 45.0);
  const auto codec = identity_codec();
  const auto embedder = toy_embedder(2, 16);
  SamplerConfig config;
  config.steps = 3;

  SUBCASE("oracle equals renderer column 0") {
    const ImageMatrix m = render_matrix(scene, traj, {0.0, 1.0}, 32);
    const auto refs = generate_reference_views(m.cell(0, 0), traj, RefProvider::kOracle, &scene,
                                               nullptr, *codec, *embedder, config);
    REQUIRE(refs.size() == 4);
    for (int v = 0; v < 4; ++v) CHECK(max_abs_diff(refs[v], m.cell(v, 0)) == 0.0);
  }

  SUBCASE("oracle without a scene is an argument error") {
    const Image img(3, 32, 32, 0.5);
    CHECK_THROWS_AS(generate_reference_views(img, traj, RefProvider::kOracle, nullptr, nullptr,
                                             *codec, *embedder, config),
                    std::invalid_argument);
  }

  SUBCASE("model provider: correct shape and run-to-run identical") {
    const Image img(3, 32, 32, 0.5);
    FakeDenoiser den(5, 0.4, 0.2);
    const auto a = generate_reference_views(img, traj, RefProvider::kModel, nullptr, &den, *codec,
                                            *embedder, config);
    const auto b = generate_reference_views(img, traj, RefProvider::kModel, nullptr, &den, *codec,
                                            *embedder, config);
    REQUIRE(a.size() == 4);
    for (int v = 0; v < 4; ++v) {
      CHECK(a[v].height == 32);
      CHECK(max_abs_diff(a[v], b[v]) == 0.0);
    }
  }
}
