#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sv4d/common.hpp"

namespace sv4d {

/// Monocular input video: F frames of 3xHxW plus optional foreground masks.
struct InputVideo {
  std::vector<Image> frames;
  std::vector<Mask> masks;  // empty or frames.size()
  double fps = 0.0;         // metadata only

  int frame_count() const { return static_cast<int>(frames.size()); }
  void validate() const;
};

enum class OrbitKind { kStatic, kDynamic };

/// Camera orbit: V (elevation, azimuth) tuples plus shared distance and fov.
struct CameraTrajectory {
  struct View {
    double elevation_deg = 0.0;
    double azimuth_deg = 0.0;  // normalized to [0, 360)
  };
  std::vector<View> views;
  double distance = 2.0;
  double fov_deg = 45.0;
  OrbitKind orbit_kind = OrbitKind::kStatic;

  int view_count() const { return static_cast<int>(views.size()); }
  void validate() const;

  /// Equal-azimuth-step orbit at fixed elevation, azimuth 0 first.
  static CameraTrajectory orbit(int v, double elevation_deg, double distance, double fov_deg);
};

/// The central exchange object: a dense VxF grid of images with masks.
/// Row 0 is the input-view video, column 0 the reference multi-view images.
struct ImageMatrix {
  int views = 0;
  int frames = 0;
  std::vector<Image> cells;  // row-major: cells[v*frames + f]
  std::vector<Mask> masks;
  CameraTrajectory trajectory;
  std::vector<double> frame_times;  // strictly increasing, in [0,1]

  Image& cell(int v, int f) { return cells[index(v, f)]; }
  const Image& cell(int v, int f) const { return cells[index(v, f)]; }
  Mask& mask(int v, int f) { return masks[index(v, f)]; }
  const Mask& mask(int v, int f) const { return masks[index(v, f)]; }

  size_t index(int v, int f) const {
    if (v < 0 || v >= views) throw std::out_of_range("ImageMatrix: view index " + std::to_string(v));
    if (f < 0 || f >= frames) throw std::out_of_range("ImageMatrix: frame index " + std::to_string(f));
    return static_cast<size_t>(v) * frames + f;
  }
  void validate() const;
};

/// Row v as a video (frame order), carrying the row masks.
InputVideo view_video(const ImageMatrix& matrix, int v);

/// Column f in view order.
std::vector<Image> frame_views(const ImageMatrix& matrix, int f);

/// Grid of latent arrays, one per matrix cell.
struct LatentGrid {
  int views = 0;
  int frames = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // [v][f][c][y][x]
  std::string codec_id;

  LatentGrid() = default;
  LatentGrid(int v, int f, int c, int h, int w)
      : views(v), frames(f), channels(c), height(h), width(w),
        data(static_cast<size_t>(v) * f * c * h * w, 0.0) {}

  size_t cell_size() const { return static_cast<size_t>(channels) * height * width; }
  double* cell(int v, int f) { return data.data() + (static_cast<size_t>(v) * frames + f) * cell_size(); }
  const double* cell(int v, int f) const {
    return data.data() + (static_cast<size_t>(v) * frames + f) * cell_size();
  }
  std::vector<double> cell_copy(int v, int f) const {
    const double* p = cell(v, f);
    return std::vector<double>(p, p + cell_size());
  }
  void set_cell(int v, int f, const std::vector<double>& values);
  bool same_shape(const LatentGrid& o) const {
    return views == o.views && frames == o.frames && channels == o.channels &&
           height == o.height && width == o.width;
  }
};

/// Pluggable image <-> latent codec (VAE stand-in). Deterministic; the
/// declared round_trip_tolerance bounds |decode(encode(x)) - x| per pixel.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual std::string id() const = 0;
  virtual int downscale_factor() const = 0;
  virtual int latent_channels() const = 0;
  virtual double round_trip_tolerance() const = 0;
  virtual std::vector<double> encode(const Image& image) const = 0;
  virtual Image decode(const std::vector<double>& latent, int height, int width) const = 0;
};

/// Identity codec: latent == flattened image, tolerance 0.
std::shared_ptr<LatentCodec> identity_codec();

/// Average-pool encoder / nearest-upsample decoder. factor in {1,2,4} and must
/// divide the image extent at encode time. Tolerance is calibrated on a fixed
/// seeded 50-image suite.
std::shared_ptr<LatentCodec> pool_codec(int factor);

LatentGrid encode_matrix(const ImageMatrix& matrix, const LatentCodec& codec);
ImageMatrix decode_latents(const LatentGrid& latents, const CameraTrajectory& trajectory,
                           const std::vector<double>& frame_times, const LatentCodec& codec);

/// Pluggable image embedder (CLIP stand-in): deterministic seeded random
/// projection of the 16x16 area-resized image, L2-normalized.
class ImageEmbedder {
 public:
  virtual ~ImageEmbedder() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> embed(const Image& image) const = 0;
  /// When the embedder is an L2-normalized linear projection of the flattened
  /// 16x16 thumbnail, exposes the row-major [dim x 768] projection so losses
  /// can differentiate through it. Empty for opaque plug-ins.
  virtual std::vector<double> projection_matrix() const { return {}; }
};

std::shared_ptr<ImageEmbedder> toy_embedder(uint64_t seed, int dim);

/// Multi-scale embedder-feature distance (LPIPS stand-in): squared embedding
/// distance averaged over scales {1, 1/2, 1/4}.
double perceptual_distance(const Image& a, const Image& b, const ImageEmbedder& embedder);

/// On-disk layout: v{v:02d}_f{f:03d}.png (+ _mask) plus matrix.json.
void save_matrix(const ImageMatrix& matrix, const std::filesystem::path& dir);
ImageMatrix load_matrix(const std::filesystem::path& dir);

/// Video directory layout: f{f:03d}.png (+ _mask) plus video.json.
void save_video(const InputVideo& video, const std::filesystem::path& dir);
InputVideo load_video(const std::filesystem::path& dir);

}  // namespace sv4d
