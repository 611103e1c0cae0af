// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "nerfus/core/common.hpp"
#include "nerfus/core/types.hpp"

namespace nerfus {

/// Dense 3D scalar grid, x fastest.
struct Grid3 {
  int nx = 0, ny = 0, nz = 0;
  std::vector<double> data;

  Grid3() = default;
  Grid3(int nx_, int ny_, int nz_, double fill = 0.0)
      : nx(nx_), ny(ny_), nz(nz_), data(std::size_t(nx_) * ny_ * nz_, fill) {}

  double& at(int i, int j, int k) {
    return data[(std::size_t(k) * ny + j) * nx + i];
  }
  double at(int i, int j, int k) const {
    return data[(std::size_t(k) * ny + j) * nx + i];
  }
  std::size_t size() const { return data.size(); }

  /// Trilinear interpolation on the unit cube of grid coordinates
  /// (voxel centers at (i+0.5)/n). Out-of-range reads clamp to the border.
  double sample_unit(double u, double v, double w) const {
    auto axis = [](double t, int n, int& i0, int& i1, double& f) {
      double g = t * n - 0.5;
      double fl = std::floor(g);
      f = g - fl;
      i0 = int(fl);
      i1 = i0 + 1;
      if (i0 < 0) i0 = 0;
      if (i1 < 0) i1 = 0;
      if (i0 > n - 1) i0 = n - 1;
      if (i1 > n - 1) i1 = n - 1;
    };
    int x0, x1, y0, y1, z0, z1;
    double fx, fy, fz;
    axis(u, nx, x0, x1, fx);
    axis(v, ny, y0, y1, fy);
    axis(w, nz, z0, z1, fz);
    double c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
    double c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
    double c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
    double c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
    double c0 = c00 * (1 - fy) + c10 * fy;
    double c1 = c01 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
  }
};

inline constexpr int kPatchRes = 32;

/// 32^3 scalar patch in [0,1], the diffusion prior's native object.
struct VoxelPatch {
  Grid3 grid;
  Point3 world_origin;
  double edge_length = 1.0;

  VoxelPatch() : grid(kPatchRes, kPatchRes, kPatchRes, 0.0) {}

  void validate() const {
    require(grid.nx == kPatchRes && grid.ny == kPatchRes && grid.nz == kPatchRes,
            "voxel patch: shape must be exactly 32^3");
    require(edge_length > 0, "voxel patch: edge_length must be > 0");
    for (double v : grid.data)
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0,
              "voxel patch: values must lie in [0,1]");
  }
};

}  // namespace nerfus
