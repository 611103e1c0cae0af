// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "nerfus/core/common.hpp"

namespace nerfus {

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
  Point3 operator+(const Point3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Point3 operator-(const Point3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Point3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Point3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

/// The acoustic 5-vector one field query yields: attenuation (per unit
/// length), reflectance, border probability, scattering density and
/// scattering intensity.
struct ParameterSample {
  double attenuation = 0.0;        // >= 0
  double reflectance = 0.0;        // [0,1]
  double border_prob = 0.0;        // [0,1]
  double scatter_density = 0.0;    // [0,1]
  double scatter_intensity = 0.0;  // [0,1]

  bool valid() const {
    auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
    return std::isfinite(attenuation) && attenuation >= 0.0 &&
           in01(reflectance) && in01(border_prob) && in01(scatter_density) &&
           in01(scatter_intensity);
  }
};

/// Rigid probe-to-world transform, row-major 4x4.
struct Pose {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Pose identity() { return Pose{}; }

  static Pose translation(double x, double y, double z) {
    Pose p;
    p.m[3] = x;
    p.m[7] = y;
    p.m[11] = z;
    return p;
  }

  static Pose rotation_x(double a) {
    Pose p;
    p.m[5] = std::cos(a);
    p.m[6] = -std::sin(a);
    p.m[9] = std::sin(a);
    p.m[10] = std::cos(a);
    return p;
  }

  static Pose rotation_y(double a) {
    Pose p;
    p.m[0] = std::cos(a);
    p.m[2] = std::sin(a);
    p.m[8] = -std::sin(a);
    p.m[10] = std::cos(a);
    return p;
  }

  static Pose rotation_z(double a) {
    Pose p;
    p.m[0] = std::cos(a);
    p.m[1] = -std::sin(a);
    p.m[4] = std::sin(a);
    p.m[5] = std::cos(a);
    return p;
  }

  Pose compose(const Pose& o) const {
    Pose r;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += m[i * 4 + k] * o.m[k * 4 + j];
        r.m[i * 4 + j] = s;
      }
    return r;
  }

  Point3 apply_point(const Point3& p) const {
    return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
            m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
            m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
  }

  Point3 apply_vector(const Point3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[4] * v.x + m[5] * v.y + m[6] * v.z,
            m[8] * v.x + m[9] * v.y + m[10] * v.z};
  }

  /// Rotation block orthonormal within tol, last row (0,0,0,1).
  void validate(double tol = 1e-5) const {
    require(m[12] == 0 && m[13] == 0 && m[14] == 0 && m[15] == 1,
            "pose: last row must be (0,0,0,1)");
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += m[i * 4 + k] * m[j * 4 + k];
        double want = (i == j) ? 1.0 : 0.0;
        require(std::abs(s - want) <= tol, "pose: rotation block not orthonormal");
      }
    for (double v : m) require(std::isfinite(v), "pose: non-finite entry");
  }
};

enum class ProbeGeometry { linear, fan };

inline std::string to_string(ProbeGeometry g) {
  return g == ProbeGeometry::linear ? "linear" : "fan";
}

inline ProbeGeometry probe_geometry_from_string(const std::string& s) {
  if (s == "linear") return ProbeGeometry::linear;
  if (s == "fan") return ProbeGeometry::fan;
  throw ValidationError("probe: unknown geometry '" + s + "'");
}

struct ProbeConfig {
  int n_scanlines = 64;
  int n_samples = 128;
  double depth_extent = 1.0;
  double frequency = 1.0;  // normalized; units absorbed into attenuation
  ProbeGeometry geometry = ProbeGeometry::linear;
  double fan_aperture = 0.0;  // radians, fan only
  double initial_intensity = 1.0;

  void validate() const {
    require(n_scanlines >= 1, "probe: n_scanlines must be >= 1");
    require(n_samples >= 1, "probe: n_samples must be >= 1");
    require(depth_extent > 0, "probe: depth_extent must be > 0");
    require(frequency > 0, "probe: frequency must be > 0");
    require(initial_intensity > 0, "probe: initial_intensity must be > 0");
    require(fan_aperture >= 0, "probe: fan_aperture must be >= 0");
  }

  double sample_spacing() const { return depth_extent / n_samples; }

  /// Lateral width of a linear probe face. The scanline pitch equals the
  /// axial sample spacing, so rendered pixels are spatially isotropic.
  double face_width() const { return n_scanlines * sample_spacing(); }
};

/// One scan line: origin, unit direction, uniformly spaced sample depths.
struct ScanRay {
  Point3 origin;
  Point3 direction;
  std::vector<double> depths;
  double dt = 0.0;

  Point3 at(double t) const { return origin + direction * t; }

  void validate() const {
    require(origin.finite() && direction.finite(), "ray: non-finite");
    require(std::abs(direction.norm() - 1.0) <= 1e-6, "ray: direction not unit");
    require(dt > 0, "ray: dt must be > 0");
    for (std::size_t i = 1; i < depths.size(); ++i)
      require(depths[i] > depths[i - 1], "ray: depths not increasing");
  }
};

/// Probe-local scan geometry mapped to world by the pose. Depths are
/// uniform over (0, depth_extent].
inline ScanRay ray_for_pixel(const ProbeConfig& probe, const Pose& pose,
                             int scanline_index, int depth_count) {
  require(scanline_index >= 0 && scanline_index < probe.n_scanlines,
          "ray_for_pixel: scanline index out of range");
  require(depth_count >= 1, "ray_for_pixel: depth_count must be >= 1");

  Point3 o_local{0, 0, 0};
  Point3 d_local{0, 0, 1};
  const int w = probe.n_scanlines;
  if (probe.geometry == ProbeGeometry::linear) {
    double pitch = probe.sample_spacing();
    o_local.x = (scanline_index - (w - 1) / 2.0) * pitch;
  } else {
    double frac = (w == 1) ? 0.5 : scanline_index / double(w - 1);
    double theta = (frac - 0.5) * probe.fan_aperture;
    d_local = {std::sin(theta), 0, std::cos(theta)};
  }

  ScanRay ray;
  ray.origin = pose.apply_point(o_local);
  ray.direction = pose.apply_vector(d_local);
  ray.dt = probe.depth_extent / depth_count;
  ray.depths.resize(depth_count);
  for (int k = 0; k < depth_count; ++k) ray.depths[k] = (k + 1) * ray.dt;
  return ray;
}

}  // namespace nerfus
