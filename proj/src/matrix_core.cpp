#include "sv4d/matrix_core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>

#include "sv4d/png_io.hpp"

namespace sv4d {

using nlohmann::json;

std::vector<int> rounded_linspace(int hi, int n) {
  std::vector<int> out(n);
  if (n == 1) {
    out[0] = 0;
    return out;
  }
  for (int i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) * hi / (n - 1);
    out[i] = static_cast<int>(std::lround(x));
  }
  return out;
}

Image resize_area(const Image& src, int out_h, int out_w) {
  Image dst(src.channels, out_h, out_w);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int c = 0; c < src.channels; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const double y0 = oy * sy, y1 = (oy + 1) * sy;
      for (int ox = 0; ox < out_w; ++ox) {
        const double x0 = ox * sx, x1 = (ox + 1) * sx;
        double acc = 0.0, area = 0.0;
        for (int y = static_cast<int>(y0); y < src.height && y < y1; ++y) {
          const double hy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
          for (int x = static_cast<int>(x0); x < src.width && x < x1; ++x) {
            const double hx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
            acc += hy * hx * src.at(c, y, x);
            area += hy * hx;
          }
        }
        dst.at(c, oy, ox) = area > 0.0 ? acc / area : 0.0;
      }
    }
  }
  return dst;
}

void InputVideo::validate() const {
  if (frames.empty()) throw std::invalid_argument("InputVideo: needs at least one frame");
  for (const auto& f : frames) {
    if (!f.same_shape(frames.front()))
      throw std::invalid_argument("InputVideo: frames must share H, W");
  }
  if (!masks.empty() && masks.size() != frames.size())
    throw std::invalid_argument("InputVideo: mask count must equal frame count");
}

void CameraTrajectory::validate() const {
  if (views.empty()) throw std::invalid_argument("CameraTrajectory: needs at least one view");
  if (distance <= 0.0) throw std::invalid_argument("CameraTrajectory: distance must be > 0");
  for (const auto& v : views) {
    if (v.azimuth_deg < 0.0 || v.azimuth_deg >= 360.0)
      throw std::invalid_argument("CameraTrajectory: azimuth must be in [0, 360)");
    if (v.elevation_deg <= -90.0 || v.elevation_deg >= 90.0)
      throw std::invalid_argument("CameraTrajectory: elevation must be in (-90, 90)");
  }
}

CameraTrajectory CameraTrajectory::orbit(int v, double elevation_deg, double distance,
                                         double fov_deg) {
  CameraTrajectory t;
  t.distance = distance;
  t.fov_deg = fov_deg;
  t.views.resize(v);
  for (int i = 0; i < v; ++i) {
    t.views[i].elevation_deg = elevation_deg;
    t.views[i].azimuth_deg = 360.0 * i / v;
  }
  t.validate();
  return t;
}

void ImageMatrix::validate() const {
  if (views < 1 || frames < 1) throw std::invalid_argument("ImageMatrix: empty grid");
  if (cells.size() != static_cast<size_t>(views) * frames ||
      masks.size() != cells.size())
    throw std::invalid_argument("ImageMatrix: grid must be dense with per-cell masks");
  for (const auto& c : cells)
    if (!c.same_shape(cells.front())) throw std::invalid_argument("ImageMatrix: ragged cells");
  if (frame_times.size() != static_cast<size_t>(frames))
    throw std::invalid_argument("ImageMatrix: frame_times size mismatch");
  for (size_t i = 1; i < frame_times.size(); ++i)
    if (frame_times[i] <= frame_times[i - 1])
      throw std::invalid_argument("ImageMatrix: frame_times must be strictly increasing");
  trajectory.validate();
  if (trajectory.view_count() != views)
    throw std::invalid_argument("ImageMatrix: trajectory view count mismatch");
}

InputVideo view_video(const ImageMatrix& matrix, int v) {
  if (v < 0 || v >= matrix.views)
    throw std::out_of_range("view_video: view " + std::to_string(v) + " out of range");
  InputVideo out;
  out.frames.reserve(matrix.frames);
  out.masks.reserve(matrix.frames);
  for (int f = 0; f < matrix.frames; ++f) {
    out.frames.push_back(matrix.cell(v, f));
    out.masks.push_back(matrix.mask(v, f));
  }
  return out;
}

std::vector<Image> frame_views(const ImageMatrix& matrix, int f) {
  if (f < 0 || f >= matrix.frames)
    throw std::out_of_range("frame_views: frame " + std::to_string(f) + " out of range");
  std::vector<Image> out;
  out.reserve(matrix.views);
  for (int v = 0; v < matrix.views; ++v) out.push_back(matrix.cell(v, f));
  return out;
}

void LatentGrid::set_cell(int v, int f, const std::vector<double>& values) {
  if (values.size() != cell_size())
    throw std::invalid_argument("LatentGrid::set_cell: size mismatch");
  std::copy(values.begin(), values.end(), cell(v, f));
}

namespace {

class IdentityCodec final : public LatentCodec {
 public:
  std::string id() const override { return "identity"; }
  int downscale_factor() const override { return 1; }
  int latent_channels() const override { return 3; }
  double round_trip_tolerance() const override { return 0.0; }
  std::vector<double> encode(const Image& image) const override { return image.data; }
  Image decode(const std::vector<double>& latent, int height, int width) const override {
    Image out(3, height, width);
    if (latent.size() != out.data.size())
      throw std::invalid_argument("identity codec: latent size mismatch");
    out.data = latent;
    return out;
  }
};

class PoolCodec final : public LatentCodec {
 public:
  explicit PoolCodec(int factor) : factor_(factor) { tolerance_ = calibrate(); }

  std::string id() const override { return "pool" + std::to_string(factor_); }
  int downscale_factor() const override { return factor_; }
  int latent_channels() const override { return 3; }
  double round_trip_tolerance() const override { return tolerance_; }

  std::vector<double> encode(const Image& image) const override {
    if (image.height % factor_ != 0 || image.width % factor_ != 0)
      throw ConfigError("pool codec: factor " + std::to_string(factor_) +
                        " does not divide image extent");
    const int h = image.height / factor_, w = image.width / factor_;
    std::vector<double> out(static_cast<size_t>(image.channels) * h * w, 0.0);
    const double inv = 1.0 / (factor_ * factor_);
    for (int c = 0; c < image.channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < factor_; ++dy)
            for (int dx = 0; dx < factor_; ++dx)
              acc += image.at(c, y * factor_ + dy, x * factor_ + dx);
          out[(static_cast<size_t>(c) * h + y) * w + x] = acc * inv;
        }
    return out;
  }

  Image decode(const std::vector<double>& latent, int height, int width) const override {
    const int h = height / factor_, w = width / factor_;
    if (latent.size() != static_cast<size_t>(3) * h * w)
      throw std::invalid_argument("pool codec: latent size mismatch");
    Image out(3, height, width);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          out.at(c, y, x) = latent[(static_cast<size_t>(c) * h + y / factor_) * w + x / factor_];
    return out;
  }

 private:
  // Calibration set doubles as the codec-contract test suite: 50 seeded
  // uniform-random 32x32 images.
  double calibrate() const {
    if (factor_ == 1) return 0.0;
    Rng rng(0xC0DECull + factor_);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      Image img(3, 32, 32);
      for (auto& v : img.data) v = rng.uniform();
      const Image back = decode(encode(img), 32, 32);
      worst = std::max(worst, max_abs_diff(img, back));
    }
    return worst;
  }

  int factor_;
  double tolerance_;
};

}  // namespace

std::shared_ptr<LatentCodec> identity_codec() { return std::make_shared<IdentityCodec>(); }

std::shared_ptr<LatentCodec> pool_codec(int factor) {
  if (factor != 1 && factor != 2 && factor != 4)
    throw ConfigError("pool_codec: factor must be one of {1,2,4}");
  return std::make_shared<PoolCodec>(factor);
}

LatentGrid encode_matrix(const ImageMatrix& matrix, const LatentCodec& codec) {
  const int h = matrix.cell(0, 0).height / codec.downscale_factor();
  const int w = matrix.cell(0, 0).width / codec.downscale_factor();
  LatentGrid grid(matrix.views, matrix.frames, codec.latent_channels(), h, w);
  grid.codec_id = codec.id();
  for (int v = 0; v < matrix.views; ++v)
    for (int f = 0; f < matrix.frames; ++f) grid.set_cell(v, f, codec.encode(matrix.cell(v, f)));
  return grid;
}

ImageMatrix decode_latents(const LatentGrid& latents, const CameraTrajectory& trajectory,
                           const std::vector<double>& frame_times, const LatentCodec& codec) {
  ImageMatrix m;
  m.views = latents.views;
  m.frames = latents.frames;
  m.trajectory = trajectory;
  m.frame_times = frame_times;
  const int h = latents.height * codec.downscale_factor();
  const int w = latents.width * codec.downscale_factor();
  m.cells.reserve(m.views * m.frames);
  m.masks.reserve(m.views * m.frames);
  for (int v = 0; v < m.views; ++v)
    for (int f = 0; f < m.frames; ++f) {
      Image img = codec.decode(latents.cell_copy(v, f), h, w);
      for (auto& px : img.data) px = std::clamp(px, 0.0, 1.0);
      m.cells.push_back(std::move(img));
      m.masks.emplace_back(1, h, w, 1.0);
    }
  return m;
}

namespace {

class ToyEmbedder final : public ImageEmbedder {
 public:
  ToyEmbedder(uint64_t seed, int dim) : dim_(dim) {
    if (dim < 1) throw ConfigError("toy_embedder: dim must be >= 1");
    // Fixed random projection from the flattened 3x16x16 thumbnail.
    Rng rng(seed);
    const int in = 3 * 16 * 16;
    projection_.resize(static_cast<size_t>(dim) * in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : projection_) w = rng.normal() * scale;
  }

  int dim() const override { return dim_; }

  std::vector<double> embed(const Image& image) const override {
    Image thumb = image;
    if (image.height != 16 || image.width != 16) thumb = resize_area(image, 16, 16);
    if (thumb.channels == 1) {
      Image rgb(3, 16, 16);
      for (int c = 0; c < 3; ++c)
        std::copy(thumb.data.begin(), thumb.data.end(), rgb.data.begin() + c * 256);
      thumb = std::move(rgb);
    }
    const int in = 3 * 16 * 16;
    std::vector<double> out(dim_, 0.0);
    for (int d = 0; d < dim_; ++d) {
      double acc = 0.0;
      const double* row = projection_.data() + static_cast<size_t>(d) * in;
      for (int i = 0; i < in; ++i) acc += row[i] * thumb.data[i];
      out[d] = acc;
    }
    double norm = 0.0;
    for (double v : out) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 1e-12)
      for (double& v : out) v /= norm;
    return out;
  }

  std::vector<double> projection_matrix() const override { return projection_; }

 private:
  int dim_;
  std::vector<double> projection_;
};

}  // namespace

std::shared_ptr<ImageEmbedder> toy_embedder(uint64_t seed, int dim) {
  return std::make_shared<ToyEmbedder>(seed, dim);
}

double perceptual_distance(const Image& a, const Image& b, const ImageEmbedder& embedder) {
  if (!a.same_shape(b)) throw std::invalid_argument("perceptual_distance: shape mismatch");
  double total = 0.0;
  for (int scale : {1, 2, 4}) {
    const int h = std::max(1, a.height / scale), w = std::max(1, a.width / scale);
    const auto ea = embedder.embed(scale == 1 ? a : resize_area(a, h, w));
    const auto eb = embedder.embed(scale == 1 ? b : resize_area(b, h, w));
    double d = 0.0;
    for (size_t i = 0; i < ea.size(); ++i) d += (ea[i] - eb[i]) * (ea[i] - eb[i]);
    total += d;
  }
  return total / 3.0;
}

namespace {

std::string cell_name(int v, int f, bool mask) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "v%02d_f%03d%s.png", v, f, mask ? "_mask" : "");
  return buf;
}

}  // namespace

void save_matrix(const ImageMatrix& matrix, const std::filesystem::path& dir) {
  matrix.validate();
  std::filesystem::create_directories(dir);
  json meta;
  meta["V"] = matrix.views;
  meta["F"] = matrix.frames;
  json views = json::array();
  for (const auto& v : matrix.trajectory.views)
    views.push_back(json::array({v.elevation_deg, v.azimuth_deg}));
  meta["views"] = views;
  meta["distance"] = matrix.trajectory.distance;
  meta["fov_deg"] = matrix.trajectory.fov_deg;
  meta["frame_times"] = matrix.frame_times;
  std::ofstream out(dir / "matrix.json");
  out << meta.dump(2) << "\n";

  for (int v = 0; v < matrix.views; ++v)
    for (int f = 0; f < matrix.frames; ++f) {
      write_png(matrix.cell(v, f), dir / cell_name(v, f, false));
      write_png(matrix.mask(v, f), dir / cell_name(v, f, true));
    }
}

ImageMatrix load_matrix(const std::filesystem::path& dir) {
  const auto meta_path = dir / "matrix.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError("load_matrix: missing " + meta_path.string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("load_matrix: malformed " + meta_path.string() + ": " + e.what());
  }

  ImageMatrix m;
  try {
    m.views = meta.at("V").get<int>();
    m.frames = meta.at("F").get<int>();
    m.trajectory.distance = meta.at("distance").get<double>();
    m.trajectory.fov_deg = meta.at("fov_deg").get<double>();
    for (const auto& v : meta.at("views")) {
      CameraTrajectory::View view;
      view.elevation_deg = v.at(0).get<double>();
      view.azimuth_deg = v.at(1).get<double>();
      m.trajectory.views.push_back(view);
    }
    m.frame_times = meta.at("frame_times").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError("load_matrix: malformed " + meta_path.string() + ": " + e.what());
  }

  for (int v = 0; v < m.views; ++v)
    for (int f = 0; f < m.frames; ++f) {
      const auto img_path = dir / cell_name(v, f, false);
      const auto mask_path = dir / cell_name(v, f, true);
      if (!std::filesystem::exists(img_path))
        throw FormatError("load_matrix: missing cell " + img_path.string());
      if (!std::filesystem::exists(mask_path))
        throw FormatError("load_matrix: missing mask " + mask_path.string());
      m.cells.push_back(read_png(img_path));
      m.masks.push_back(read_png(mask_path));
    }
  m.validate();
  return m;
}

void save_video(const InputVideo& video, const std::filesystem::path& dir) {
  video.validate();
  std::filesystem::create_directories(dir);
  json meta;
  meta["F"] = video.frame_count();
  meta["fps"] = video.fps;
  meta["has_masks"] = !video.masks.empty();
  std::ofstream out(dir / "video.json");
  out << meta.dump(2) << "\n";
  char buf[32];
  for (int f = 0; f < video.frame_count(); ++f) {
    std::snprintf(buf, sizeof buf, "f%03d.png", f);
    write_png(video.frames[f], dir / buf);
    if (!video.masks.empty()) {
      std::snprintf(buf, sizeof buf, "f%03d_mask.png", f);
      write_png(video.masks[f], dir / buf);
    }
  }
}

InputVideo load_video(const std::filesystem::path& dir) {
  const auto meta_path = dir / "video.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError("load_video: missing " + meta_path.string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("load_video: malformed " + meta_path.string() + ": " + e.what());
  }
  InputVideo video;
  const int f_count = meta.at("F").get<int>();
  video.fps = meta.value("fps", 0.0);
  const bool has_masks = meta.value("has_masks", false);
  char buf[32];
  for (int f = 0; f < f_count; ++f) {
    std::snprintf(buf, sizeof buf, "f%03d.png", f);
    if (!std::filesystem::exists(dir / buf))
      throw FormatError("load_video: missing frame " + (dir / buf).string());
    video.frames.push_back(read_png(dir / buf));
    if (has_masks) {
      std::snprintf(buf, sizeof buf, "f%03d_mask.png", f);
      if (!std::filesystem::exists(dir / buf))
        throw FormatError("load_video: missing mask " + (dir / buf).string());
      video.masks.push_back(read_png(dir / buf));
    }
  }
  video.validate();
  return video;
}

}  // namespace sv4d
