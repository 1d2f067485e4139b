#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "sv4d/matrix_core.hpp"

using namespace sv4d;
namespace fs = std::filesystem;

namespace {

Image solid(double r, double g, double b, int res = 16) {
  Image img(3, res, res);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  return img;
}

ImageMatrix make_test_matrix(int views, int frames, int res = 16) {
  ImageMatrix m;
  m.views = views;
  m.frames = frames;
  m.trajectory = CameraTrajectory::orbit(views, 10.0, 2.0, 45.0);
  for (int f = 0; f < frames; ++f)
    m.frame_times.push_back(frames == 1 ? 0.0 : static_cast<double>(f) / (frames - 1));
  for (int v = 0; v < views; ++v)
    for (int f = 0; f < frames; ++f) {
      // distinct per-cell constant so extraction is checkable by value
      m.cells.push_back(solid(v / 10.0, f / 10.0, 0.5, res));
      m.masks.emplace_back(1, res, res, 1.0);
    }
  return m;
}

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("sv4d_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("view_video extracts rows") {
  SUBCASE("single-row matrix") {
    const ImageMatrix m = make_test_matrix(1, 3);
    const InputVideo video = view_video(m, 0);
    CHECK(video.frame_count() == 3);
    for (int f = 0; f < 3; ++f) CHECK(max_abs_diff(video.frames[f], m.cell(0, f)) == 0.0);
  }
  SUBCASE("row 3 of an 8x5 matrix matches direct indexing") {
    const ImageMatrix m = make_test_matrix(8, 5);
    const InputVideo video = view_video(m, 3);
    REQUIRE(video.frame_count() == 5);
    for (int f = 0; f < 5; ++f) {
      CHECK(max_abs_diff(video.frames[f], m.cell(3, f)) == 0.0);
      CHECK(max_abs_diff(video.masks[f], m.mask(3, f)) == 0.0);
    }
  }
  SUBCASE("out of range") {
    const ImageMatrix m = make_test_matrix(8, 5);
    CHECK_THROWS_AS(view_video(m, 8), std::out_of_range);
  }
}

TEST_CASE("frame_views extracts columns") {
  SUBCASE("single column") {
    const ImageMatrix m = make_test_matrix(4, 1);
    CHECK(frame_views(m, 0).size() == 4);
  }
  SUBCASE("column 2 of a 4x6 matrix") {
    const ImageMatrix m = make_test_matrix(4, 6);
    const auto col = frame_views(m, 2);
    REQUIRE(col.size() == 4);
    for (int v = 0; v < 4; ++v) CHECK(max_abs_diff(col[v], m.cell(v, 2)) == 0.0);
  }
  SUBCASE("negative index") {
    const ImageMatrix m = make_test_matrix(4, 6);
    CHECK_THROWS_AS(frame_views(m, -1), std::out_of_range);
  }
}

TEST_CASE("row/column extraction covers every cell exactly once") {
  const ImageMatrix m = make_test_matrix(5, 7);
  std::multiset<std::pair<double, double>> seen;
  for (int v = 0; v < m.views; ++v) {
    const InputVideo video = view_video(m, v);
    for (const auto& img : video.frames) seen.insert({img.at(0, 0, 0), img.at(1, 0, 0)});
  }
  CHECK(seen.size() == 35);
  std::multiset<std::pair<double, double>> expected;
  for (int v = 0; v < 5; ++v)
    for (int f = 0; f < 7; ++f) expected.insert({v / 10.0, f / 10.0});
  CHECK(seen == expected);
}

TEST_CASE("identity codec round trips exactly") {
  const auto codec = identity_codec();
  Rng rng(1);
  Image img(3, 16, 16);
  for (auto& v : img.data) v = rng.uniform();
  const Image back = codec->decode(codec->encode(img), 16, 16);
  CHECK(max_abs_diff(img, back) == 0.0);
  CHECK(codec->round_trip_tolerance() == 0.0);
}

TEST_CASE("pool codec") {
  SUBCASE("constant image round trips exactly at factor 2") {
    const auto codec = pool_codec(2);
    const Image img = solid(0.3, 0.6, 0.9);
    const Image back = codec->decode(codec->encode(img), 16, 16);
    CHECK(max_abs_diff(img, back) < 1e-12);
  }
  SUBCASE("checkerboard at contrast 1 has round-trip error 0.5") {
    const auto codec = pool_codec(2);
    Image img(3, 8, 8);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img.at(c, y, x) = (x + y) % 2 ? 1.0 : 0.0;
    const Image back = codec->decode(codec->encode(img), 8, 8);
    CHECK(max_abs_diff(img, back) == doctest::Approx(0.5));
  }
  SUBCASE("non-dividing factor is a config error") {
    const auto codec = pool_codec(4);
    CHECK_THROWS_AS(codec->encode(Image(3, 10, 10)), ConfigError);
    CHECK_THROWS_AS(pool_codec(3), ConfigError);
  }
  SUBCASE("declared tolerance holds on the 50-image randomized suite") {
    for (int factor : {2, 4}) {
      const auto codec = pool_codec(factor);
      Rng rng(0xC0DECull + factor);  // the calibration suite definition
      double worst = 0.0;
      for (int i = 0; i < 50; ++i) {
        Image img(3, 32, 32);
        for (auto& v : img.data) v = rng.uniform();
        worst = std::max(worst, max_abs_diff(img, codec->decode(codec->encode(img), 32, 32)));
      }
      CHECK(worst <= codec->round_trip_tolerance());
      CHECK(codec->round_trip_tolerance() < 1.0);
    }
  }
}

TEST_CASE("toy embedder") {
  const auto emb = toy_embedder(7, 12);
  Rng rng(2);
  Image img(3, 24, 24);
  for (auto& v : img.data) v = rng.uniform();

  SUBCASE("deterministic for fixed seed") {
    const auto a = emb->embed(img);
    const auto b = toy_embedder(7, 12)->embed(img);
    CHECK(a == b);
  }
  SUBCASE("unit norm") {
    const auto a = emb->embed(img);
    double n = 0.0;
    for (double v : a) n += v * v;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("single-pixel change produces a distinct vector") {
    Image img2 = img;
    img2.at(1, 3, 5) = img2.at(1, 3, 5) < 0.5 ? 1.0 : 0.0;
    const auto a = emb->embed(img);
    const auto b = emb->embed(img2);
    double diff = 0.0;
    for (size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
    CHECK(diff > 0.0);
  }
  SUBCASE("dim must be positive") { CHECK_THROWS_AS(toy_embedder(1, 0), ConfigError); }
}

TEST_CASE("matrix persistence") {
  const ImageMatrix m = make_test_matrix(8, 5);

  SUBCASE("8x5 layout: 40 images, 40 masks, 1 json") {
    const fs::path dir = temp_dir("layout");
    save_matrix(m, dir);
    int pngs = 0, masks = 0, jsons = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string name = e.path().filename().string();
      if (name == "matrix.json") ++jsons;
      else if (name.find("_mask.png") != std::string::npos) ++masks;
      else if (name.find(".png") != std::string::npos) ++pngs;
    }
    CHECK(pngs == 40);
    CHECK(masks == 40);
    CHECK(jsons == 1);
  }

  SUBCASE("round trip within 8-bit quantization") {
    const fs::path dir = temp_dir("roundtrip");
    save_matrix(m, dir);
    const ImageMatrix back = load_matrix(dir);
    CHECK(back.views == m.views);
    CHECK(back.frames == m.frames);
    for (int v = 0; v < m.views; ++v) {
      CHECK(back.trajectory.views[v].azimuth_deg ==
            doctest::Approx(m.trajectory.views[v].azimuth_deg).epsilon(1e-9));
      CHECK(back.trajectory.views[v].elevation_deg ==
            doctest::Approx(m.trajectory.views[v].elevation_deg).epsilon(1e-9));
    }
    for (int v = 0; v < m.views; ++v)
      for (int f = 0; f < m.frames; ++f)
        CHECK(max_abs_diff(back.cell(v, f), m.cell(v, f)) <= 1.0 / 255.0 + 1e-12);
  }

  SUBCASE("deleting one PNG is a format error naming it") {
    const fs::path dir = temp_dir("corrupt");
    save_matrix(m, dir);
    fs::remove(dir / "v03_f002.png");
    try {
      load_matrix(dir);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("v03_f002.png") != std::string::npos);
    }
  }

  SUBCASE("malformed metadata is a format error") {
    const fs::path dir = temp_dir("badmeta");
    save_matrix(m, dir);
    std::ofstream(dir / "matrix.json") << "{ not json";
    CHECK_THROWS_AS(load_matrix(dir), FormatError);
  }
}

TEST_CASE("video persistence round trip") {
  InputVideo video;
  for (int f = 0; f < 4; ++f) {
    video.frames.push_back(solid(0.1 * f, 0.2, 0.3));
    video.masks.emplace_back(1, 16, 16, f % 2 ? 1.0 : 0.0);
  }
  video.fps = 12.0;
  const fs::path dir = temp_dir("video");
  save_video(video, dir);
  const InputVideo back = load_video(dir);
  CHECK(back.frame_count() == 4);
  CHECK(back.masks.size() == 4);
  for (int f = 0; f < 4; ++f)
    CHECK(max_abs_diff(back.frames[f], video.frames[f]) <= 1.0 / 255.0 + 1e-12);
}

TEST_CASE("perceptual distance is zero on identical images, positive otherwise") {
  const auto emb = toy_embedder(3, 16);
  Rng rng(5);
  Image a(3, 32, 32);
  for (auto& v : a.data) v = rng.uniform();
  CHECK(perceptual_distance(a, a, *emb) == doctest::Approx(0.0));
  Image b = a;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) b.at(0, y, x) = 1.0 - b.at(0, y, x);
  CHECK(perceptual_distance(a, b, *emb) > 0.0);
}
