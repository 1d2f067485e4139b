#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "sv4d/matrix_core.hpp"

namespace sv4d {

using Vec3 = std::array<double, 3>;

enum class SdfKind { kSphere, kBox };

/// One animated SDF primitive. motion_path and squash are periodic in t over
/// [0,1] for the built-in scenes.
struct Primitive {
  SdfKind kind = SdfKind::kSphere;
  Vec3 base_center{0.0, 0.0, 0.0};
  Vec3 size{0.5, 0.5, 0.5};  // radius in .x for spheres, half extents for boxes
  int albedo_texture = 0;    // 0 plain, 1 checker
  Vec3 albedo_a{0.8, 0.3, 0.2};
  Vec3 albedo_b{0.2, 0.4, 0.8};
  std::function<Vec3(double)> motion_path;          // t -> offset
  std::function<Vec3(double)> squash;               // t -> per-axis scale, strictly positive
};

struct Scene4D {
  std::vector<Primitive> primitives;
  Vec3 background_color{1.0, 1.0, 1.0};
  /// Declared bound on mean pixel change per unit t (used to sanity-check
  /// curation thresholds against temporal continuity).
  double temporal_lipschitz = 8.0;

  double sdf(const Vec3& p, double t) const;
  /// Loose world-space bounding radius over all t (for NeRF near/far planes).
  double bounding_radius() const;
};

/// Built-in scene specs: bouncing_sphere, orbiting_box, two_body, static_sphere.
Scene4D make_scene(const std::string& spec_name, uint64_t seed);

struct RenderResult {
  Image image;   // 3xRxR
  Mask mask;     // 1xRxR, hit indicator
  Depth depth;   // 1xRxR, ray-hit distance, +inf on background
  Image normal;  // 3xRxR, unit SDF gradient at hit, 0 on background
};

/// Sphere-traced render from view `v` of the trajectory at time t.
RenderResult render(const Scene4D& scene, const CameraTrajectory& trajectory, int v, double t,
                    int resolution);

/// Ground-truth VxF image matrix (row-major over render() calls).
ImageMatrix render_matrix(const Scene4D& scene, const CameraTrajectory& trajectory,
                          const std::vector<double>& frame_times, int resolution);

/// Matching ground-truth auxiliary channels for geometric losses.
struct MatrixAux {
  std::vector<Depth> depths;    // [v*F + f]
  std::vector<Image> normals;   // [v*F + f]
};
MatrixAux render_matrix_aux(const Scene4D& scene, const CameraTrajectory& trajectory,
                            const std::vector<double>& frame_times, int resolution);

/// Camera basis shared by the renderer and the NeRF module: position plus
/// orthonormal (right, up, forward) looking at the origin, y-up.
struct CameraFrame {
  Vec3 position;
  Vec3 right;
  Vec3 up;
  Vec3 forward;
};
CameraFrame camera_frame(const CameraTrajectory& trajectory, int v);

/// Primary ray through the center of pixel (x, y) at a given square resolution.
Vec3 pixel_ray_direction(const CameraFrame& cam, double fov_deg, int resolution, int x, int y);

}  // namespace sv4d
