#include "sv4d/toy_scenes.hpp"

#include <algorithm>
#include <cmath>

namespace sv4d {

namespace {

Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  return n > 0.0 ? scale(a, 1.0 / n) : Vec3{0.0, 0.0, 0.0};
}

// Signed distance of one primitive at time t, conservative under squash.
double primitive_sdf(const Primitive& prim, const Vec3& p, double t) {
  Vec3 center = prim.base_center;
  if (prim.motion_path) center = add(center, prim.motion_path(t));
  Vec3 s{1.0, 1.0, 1.0};
  if (prim.squash) s = prim.squash(t);
  const Vec3 local{(p[0] - center[0]) / s[0], (p[1] - center[1]) / s[1],
                   (p[2] - center[2]) / s[2]};
  const double lipschitz = std::min({s[0], s[1], s[2]});
  double d = 0.0;
  if (prim.kind == SdfKind::kSphere) {
    d = norm(local) - prim.size[0];
  } else {
    const Vec3 q{std::abs(local[0]) - prim.size[0], std::abs(local[1]) - prim.size[1],
                 std::abs(local[2]) - prim.size[2]};
    const Vec3 qp{std::max(q[0], 0.0), std::max(q[1], 0.0), std::max(q[2], 0.0)};
    d = norm(qp) + std::min(std::max({q[0], q[1], q[2]}), 0.0);
  }
  return d * lipschitz;
}

const Primitive* nearest_primitive(const Scene4D& scene, const Vec3& p, double t) {
  const Primitive* best = nullptr;
  double best_d = kDepthInf;
  for (const auto& prim : scene.primitives) {
    const double d = primitive_sdf(prim, p, t);
    if (d < best_d) {
      best_d = d;
      best = &prim;
    }
  }
  return best;
}

Vec3 surface_albedo(const Primitive& prim, const Vec3& p, double t) {
  if (prim.albedo_texture == 0) return prim.albedo_a;
  // Checker in the primitive's local (un-translated) frame so texture detail
  // follows the object through its motion.
  Vec3 center = prim.base_center;
  if (prim.motion_path) center = add(center, prim.motion_path(t));
  const Vec3 local = sub(p, center);
  const double cell = 0.22;
  const int parity = (static_cast<int>(std::floor(local[0] / cell)) +
                      static_cast<int>(std::floor(local[1] / cell)) +
                      static_cast<int>(std::floor(local[2] / cell))) & 1;
  return parity ? prim.albedo_b : prim.albedo_a;
}

Vec3 sdf_gradient(const Scene4D& scene, const Vec3& p, double t) {
  const double h = 1e-5;
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 hi = p, lo = p;
    hi[a] += h;
    lo[a] -= h;
    g[a] = (scene.sdf(hi, t) - scene.sdf(lo, t)) / (2.0 * h);
  }
  return g;
}

const Vec3 kLightDir = normalized({0.45, 0.85, 0.30});
constexpr double kAmbient = 0.35;

}  // namespace

double Scene4D::sdf(const Vec3& p, double t) const {
  double d = kDepthInf;
  for (const auto& prim : primitives) d = std::min(d, primitive_sdf(prim, p, t));
  return d;
}

double Scene4D::bounding_radius() const {
  double r = 0.5;
  for (const auto& prim : primitives) {
    double reach = norm(prim.base_center) + std::max({prim.size[0], prim.size[1], prim.size[2]});
    if (prim.motion_path) {
      for (int i = 0; i <= 64; ++i) {
        const Vec3 off = prim.motion_path(i / 64.0);
        reach = std::max(reach, norm(add(prim.base_center, off)) +
                                    std::max({prim.size[0], prim.size[1], prim.size[2]}) + norm(off) * 0.0);
      }
    }
    r = std::max(r, reach * 1.3);
  }
  return r;
}

Scene4D make_scene(const std::string& spec_name, uint64_t seed) {
  Rng rng(seed ^ 0x53CE9Eull);
  Scene4D scene;
  if (spec_name == "static_sphere") {
    Primitive p;
    p.kind = SdfKind::kSphere;
    p.size = {0.5, 0.5, 0.5};
    p.albedo_texture = 1;
    scene.primitives.push_back(std::move(p));
    scene.temporal_lipschitz = 1e-6;
  } else if (spec_name == "bouncing_sphere") {
    Primitive p;
    p.kind = SdfKind::kSphere;
    p.size = {0.45, 0.45, 0.45};
    p.base_center = {0.0, -0.25, 0.0};
    p.albedo_texture = 1;
    const double amp = 0.35 + 0.1 * rng.uniform();
    // Vertical |sin| arc, periodic over [0,1]; contact at the period ends.
    p.motion_path = [amp](double t) -> Vec3 {
      return {0.0, amp * std::abs(std::sin(kPi * t)), 0.0};
    };
    p.squash = [](double t) -> Vec3 {
      const double contact = std::exp(-std::pow(std::sin(kPi * t) / 0.18, 2.0));
      const double sy = 1.0 - 0.28 * contact;
      const double sxz = 1.0 / std::sqrt(sy);
      return {sxz, sy, sxz};
    };
    scene.primitives.push_back(std::move(p));
    scene.temporal_lipschitz = 6.0;
  } else if (spec_name == "orbiting_box") {
    Primitive p;
    p.kind = SdfKind::kBox;
    p.size = {0.3, 0.22, 0.3};
    p.albedo_texture = 1;
    const double radius = 0.3 + 0.1 * rng.uniform();
    p.motion_path = [radius](double t) -> Vec3 {
      return {radius * std::cos(2.0 * kPi * t), 0.0, radius * std::sin(2.0 * kPi * t)};
    };
    scene.primitives.push_back(std::move(p));
    scene.temporal_lipschitz = 8.0;
  } else if (spec_name == "two_body") {
    const double radius = 0.35 + 0.15 * rng.uniform();
    const double phase = rng.uniform() * 2.0 * kPi;
    Primitive a;
    a.kind = SdfKind::kSphere;
    a.size = {0.3, 0.3, 0.3};
    a.albedo_texture = 1;
    a.motion_path = [radius, phase](double t) -> Vec3 {
      return {radius * std::cos(2.0 * kPi * t + phase), 0.0,
              radius * std::sin(2.0 * kPi * t + phase)};
    };
    Primitive b;
    b.kind = SdfKind::kBox;
    b.size = {0.2, 0.2, 0.2};
    b.albedo_texture = 1;
    b.albedo_a = {0.2, 0.7, 0.3};
    b.albedo_b = {0.8, 0.8, 0.2};
    b.motion_path = [radius, phase](double t) -> Vec3 {
      return {-radius * std::cos(2.0 * kPi * t + phase), 0.0,
              -radius * std::sin(2.0 * kPi * t + phase)};
    };
    scene.primitives.push_back(std::move(a));
    scene.primitives.push_back(std::move(b));
    scene.temporal_lipschitz = 10.0;
  } else if (spec_name == "empty") {
    scene.temporal_lipschitz = 1e-6;
  } else {
    throw ConfigError("make_scene: unknown scene spec '" + spec_name + "'");
  }
  return scene;
}

CameraFrame camera_frame(const CameraTrajectory& trajectory, int v) {
  if (v < 0 || v >= trajectory.view_count())
    throw std::out_of_range("camera_frame: view index out of range");
  const double e = deg2rad(trajectory.views[v].elevation_deg);
  const double a = deg2rad(trajectory.views[v].azimuth_deg);
  const double d = trajectory.distance;
  // Azimuth 0, elevation 0 places the camera on the -z axis looking at +z.
  CameraFrame cam;
  cam.position = {d * std::cos(e) * std::sin(a), d * std::sin(e), -d * std::cos(e) * std::cos(a)};
  cam.forward = normalized(scale(cam.position, -1.0));
  const Vec3 world_up{0.0, 1.0, 0.0};
  Vec3 right{cam.forward[1] * world_up[2] - cam.forward[2] * world_up[1],
             cam.forward[2] * world_up[0] - cam.forward[0] * world_up[2],
             cam.forward[0] * world_up[1] - cam.forward[1] * world_up[0]};
  right = normalized(right);
  if (norm(right) < 1e-9) right = {1.0, 0.0, 0.0};  // looking straight up/down
  cam.right = right;
  cam.up = {right[1] * cam.forward[2] - right[2] * cam.forward[1],
            right[2] * cam.forward[0] - right[0] * cam.forward[2],
            right[0] * cam.forward[1] - right[1] * cam.forward[0]};
  return cam;
}

Vec3 pixel_ray_direction(const CameraFrame& cam, double fov_deg, int resolution, int x, int y) {
  const double half = std::tan(deg2rad(fov_deg) / 2.0);
  const double u = ((x + 0.5) / resolution * 2.0 - 1.0) * half;
  const double w = (1.0 - (y + 0.5) / resolution * 2.0) * half;
  return normalized(add(add(scale(cam.right, u), scale(cam.up, w)), cam.forward));
}

RenderResult render(const Scene4D& scene, const CameraTrajectory& trajectory, int v, double t,
                    int resolution) {
  if (resolution < 8) throw std::invalid_argument("render: resolution too small");
  const CameraFrame cam = camera_frame(trajectory, v);
  const double eps = 1e-4 * trajectory.distance;
  const double far = trajectory.distance + scene.bounding_radius() + 1.0;

  RenderResult out;
  out.image = Image(3, resolution, resolution);
  out.mask = Mask(1, resolution, resolution);
  out.depth = Depth(1, resolution, resolution, kDepthInf);
  out.normal = Image(3, resolution, resolution);

  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const Vec3 dir = pixel_ray_direction(cam, trajectory.fov_deg, resolution, x, y);
      double dist = 0.0;
      bool hit = false;
      for (int step = 0; step < 128 && dist < far; ++step) {
        const Vec3 p = add(cam.position, scale(dir, dist));
        const double d = scene.sdf(p, t);
        if (d < eps) {
          hit = true;
          break;
        }
        dist += d;
      }
      if (!hit) {
        for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = scene.background_color[c];
        continue;
      }
      const Vec3 p = add(cam.position, scale(dir, dist));
      const Vec3 n = normalized(sdf_gradient(scene, p, t));
      const Primitive* prim = nearest_primitive(scene, p, t);
      const Vec3 albedo = prim ? surface_albedo(*prim, p, t) : Vec3{0.5, 0.5, 0.5};
      const double lambert = std::max(0.0, dot(n, kLightDir));
      const double shade = kAmbient + (1.0 - kAmbient) * lambert;
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = std::clamp(albedo[c] * shade, 0.0, 1.0);
      out.mask.at(0, y, x) = 1.0;
      out.depth.at(0, y, x) = dist;
      for (int c = 0; c < 3; ++c) out.normal.at(c, y, x) = n[c];
    }
  }
  return out;
}

ImageMatrix render_matrix(const Scene4D& scene, const CameraTrajectory& trajectory,
                          const std::vector<double>& frame_times, int resolution) {
  trajectory.validate();
  for (size_t i = 1; i < frame_times.size(); ++i)
    if (frame_times[i] <= frame_times[i - 1])
      throw std::invalid_argument("render_matrix: frame_times must be strictly increasing");

  ImageMatrix m;
  m.views = trajectory.view_count();
  m.frames = static_cast<int>(frame_times.size());
  m.trajectory = trajectory;
  m.frame_times = frame_times;
  m.cells.reserve(m.views * m.frames);
  m.masks.reserve(m.views * m.frames);
  for (int v = 0; v < m.views; ++v)
    for (int f = 0; f < m.frames; ++f) {
      RenderResult r = render(scene, trajectory, v, frame_times[f], resolution);
      m.cells.push_back(std::move(r.image));
      m.masks.push_back(std::move(r.mask));
    }
  return m;
}

MatrixAux render_matrix_aux(const Scene4D& scene, const CameraTrajectory& trajectory,
                            const std::vector<double>& frame_times, int resolution) {
  MatrixAux aux;
  for (int v = 0; v < trajectory.view_count(); ++v)
    for (double t : frame_times) {
      RenderResult r = render(scene, trajectory, v, t, resolution);
      aux.depths.push_back(std::move(r.depth));
      aux.normals.push_back(std::move(r.normal));
    }
  return aux;
}

}  // namespace sv4d
