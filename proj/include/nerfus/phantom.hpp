// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nerfus/core/dataset.hpp"
#include "nerfus/core/grid.hpp"
#include "nerfus/usrender.hpp"

namespace nerfus {

/// Five co-registered parameter grids over an axis-aligned box whose z = 0
/// face is the skin surface.
struct ParameterVolume {
  Grid3 alpha, beta, rho_b, rho_s, phi;
  Point3 origin{-0.5, -0.5, 0.0};
  Point3 extent{1.0, 1.0, 1.0};

  int resolution() const { return alpha.nx; }

  bool contains(const Point3& p) const {
    double u = (p.x - origin.x) / extent.x;
    double v = (p.y - origin.y) / extent.y;
    double w = (p.z - origin.z) / extent.z;
    return u >= 0 && u <= 1 && v >= 0 && v <= 1 && w >= 0 && w <= 1;
  }

  /// Trilinear read; anywhere outside the box is a transparent exterior.
  ParameterSample sample(const Point3& p) const {
    if (!contains(p)) return {};
    double u = (p.x - origin.x) / extent.x;
    double v = (p.y - origin.y) / extent.y;
    double w = (p.z - origin.z) / extent.z;
    return {alpha.sample_unit(u, v, w), beta.sample_unit(u, v, w),
            rho_b.sample_unit(u, v, w), rho_s.sample_unit(u, v, w),
            phi.sample_unit(u, v, w)};
  }
};

struct PhantomSpec {
  struct Layer {
    double z0 = 0, z1 = 0;  // depth range from the skin face
    double alpha = 0, rho_s = 0, phi = 0;
  };
  struct Interface {
    double depth = 0;
    double beta = 0, rho_b = 0;
  };
  struct Inclusion {
    Point3 center;
    Point3 radii;
    std::optional<double> alpha, beta, rho_b, rho_s, phi;
  };

  int resolution = 64;
  Point3 origin{-0.5, -0.5, 0.0};
  Point3 extent{1.0, 1.0, 1.0};
  double speckle_jitter = 0.0;  // relative jitter on scattering intensity
  std::uint64_t seed = 0;
  std::vector<Layer> layers;
  std::vector<Interface> interfaces;
  std::vector<Inclusion> inclusions;

  void validate() const {
    require(resolution >= 2, "phantom: resolution must be >= 2");
    require(extent.x > 0 && extent.y > 0 && extent.z > 0, "phantom: extent must be > 0");
    require(speckle_jitter >= 0 && speckle_jitter <= 1, "phantom: speckle_jitter in [0,1]");
    auto in01 = [](double v) { return v >= 0 && v <= 1; };
    std::set<int> slabs;
    for (const auto& l : layers) {
      require(l.z0 >= 0 && l.z1 <= extent.z && l.z0 < l.z1,
              "phantom: layer depth range must lie within the volume");
      require(l.alpha >= 0 && in01(l.rho_s) && in01(l.phi), "phantom: layer values out of range");
    }
    for (const auto& f : interfaces) {
      require(f.depth >= 0 && f.depth <= extent.z, "phantom: interface depth out of range");
      require(in01(f.beta) && in01(f.rho_b), "phantom: interface values out of range");
      int k = std::min(resolution - 1, int(f.depth / extent.z * resolution));
      require(slabs.insert(k).second, "phantom: interfaces overlap at the same voxel slab");
    }
    for (const auto& inc : inclusions) {
      require(inc.radii.x > 0 && inc.radii.y > 0 && inc.radii.z > 0,
              "phantom: inclusion radii must be > 0");
      for (auto* v : {&inc.alpha, &inc.beta, &inc.rho_b, &inc.rho_s, &inc.phi})
        if (v->has_value())
          require(**v >= 0 && (v == &inc.alpha || **v <= 1),
                  "phantom: inclusion override out of range");
    }
  }
};

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    s.resolution = j.value("resolution", 64);
    if (j.contains("origin")) {
      s.origin = {j["origin"].at(0).get<double>(), j["origin"].at(1).get<double>(),
                  j["origin"].at(2).get<double>()};
    }
    if (j.contains("extent")) {
      s.extent = {j["extent"].at(0).get<double>(), j["extent"].at(1).get<double>(),
                  j["extent"].at(2).get<double>()};
    }
    s.speckle_jitter = j.value("speckle_jitter", 0.0);
    s.seed = j.value("seed", std::uint64_t(0));
    for (const auto& l : j.value("layers", nlohmann::json::array())) {
      PhantomSpec::Layer layer;
      layer.z0 = l.at("z_range").at(0).get<double>();
      layer.z1 = l.at("z_range").at(1).get<double>();
      layer.alpha = l.value("alpha", 0.0);
      layer.rho_s = l.value("rho_s", 0.0);
      layer.phi = l.value("phi", 0.0);
      s.layers.push_back(layer);
    }
    for (const auto& f : j.value("interfaces", nlohmann::json::array())) {
      s.interfaces.push_back({f.at("depth").get<double>(), f.value("beta", 0.0),
                              f.value("rho_b", 0.0)});
    }
    for (const auto& i : j.value("inclusions", nlohmann::json::array())) {
      PhantomSpec::Inclusion inc;
      inc.center = {i.at("center").at(0).get<double>(), i.at("center").at(1).get<double>(),
                    i.at("center").at(2).get<double>()};
      inc.radii = {i.at("radii").at(0).get<double>(), i.at("radii").at(1).get<double>(),
                   i.at("radii").at(2).get<double>()};
      if (i.contains("alpha")) inc.alpha = i["alpha"].get<double>();
      if (i.contains("beta")) inc.beta = i["beta"].get<double>();
      if (i.contains("rho_b")) inc.rho_b = i["rho_b"].get<double>();
      if (i.contains("rho_s")) inc.rho_s = i["rho_s"].get<double>();
      if (i.contains("phi")) inc.phi = i["phi"].get<double>();
      s.inclusions.push_back(inc);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline PhantomSpec load_phantom_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("phantom spec " + path + ": " + e.what());
  }
  return phantom_spec_from_json(j);
}

/// Fills the volume top-down from the skin face: layers, then 1-voxel
/// interface sheets, then ellipsoid inclusions overriding what they contain.
inline ParameterVolume build_phantom(const PhantomSpec& spec) {
  spec.validate();
  const int R = spec.resolution;
  ParameterVolume vol;
  vol.origin = spec.origin;
  vol.extent = spec.extent;
  for (auto* g : {&vol.alpha, &vol.beta, &vol.rho_b, &vol.rho_s, &vol.phi})
    *g = Grid3(R, R, R, 0.0);

  Rng rng = substream(spec.seed, 0x9A77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  for (int k = 0; k < R; ++k) {
    double z = (k + 0.5) * spec.extent.z / R;  // depth below the skin
    const PhantomSpec::Layer* layer = nullptr;
    for (const auto& l : spec.layers)
      if (z >= l.z0 && z < l.z1) layer = &l;
    for (int j = 0; j < R; ++j)
      for (int i = 0; i < R; ++i) {
        if (!layer) continue;
        vol.alpha.at(i, j, k) = layer->alpha;
        vol.rho_s.at(i, j, k) = layer->rho_s;
        double jit = spec.speckle_jitter > 0 ? spec.speckle_jitter * u(rng) : 0.0;
        vol.phi.at(i, j, k) = clamp01(layer->phi * (1.0 + jit));
      }
  }

  for (const auto& f : spec.interfaces) {
    int k = std::min(R - 1, int(f.depth / spec.extent.z * R));
    for (int j = 0; j < R; ++j)
      for (int i = 0; i < R; ++i) {
        vol.beta.at(i, j, k) = f.beta;
        vol.rho_b.at(i, j, k) = f.rho_b;
      }
  }

  for (const auto& inc : spec.inclusions) {
    for (int k = 0; k < R; ++k)
      for (int j = 0; j < R; ++j)
        for (int i = 0; i < R; ++i) {
          Point3 p{spec.origin.x + (i + 0.5) * spec.extent.x / R,
                   spec.origin.y + (j + 0.5) * spec.extent.y / R,
                   spec.origin.z + (k + 0.5) * spec.extent.z / R};
          double dx = (p.x - inc.center.x) / inc.radii.x;
          double dy = (p.y - inc.center.y) / inc.radii.y;
          double dz = (p.z - inc.center.z) / inc.radii.z;
          if (dx * dx + dy * dy + dz * dz > 1.0) continue;
          if (inc.alpha) vol.alpha.at(i, j, k) = *inc.alpha;
          if (inc.beta) vol.beta.at(i, j, k) = *inc.beta;
          if (inc.rho_b) vol.rho_b.at(i, j, k) = *inc.rho_b;
          if (inc.rho_s) vol.rho_s.at(i, j, k) = *inc.rho_s;
          if (inc.phi) vol.phi.at(i, j, k) = *inc.phi;
        }
  }
  return vol;
}

/// Minimal triangle soup for mesh-backed occupancy extraction.
struct TriMesh {
  std::vector<std::array<Point3, 3>> tris;
};

/// Voxelizes a watertight mesh by z-column parity counting.
inline Grid3 voxelize_mesh(const TriMesh& mesh, int res, const Point3& origin,
                           const Point3& extent) {
  Grid3 g(res, res, res, 0.0);
  for (int j = 0; j < res; ++j)
    for (int i = 0; i < res; ++i) {
      // Rays are nudged by tiny incommensurate offsets so they cannot pass
      // exactly through a triangle edge (which would double-count parity).
      double x = origin.x + (i + 0.5 + 7.1e-8) * extent.x / res;
      double y = origin.y + (j + 0.5 + 3.9e-8) * extent.y / res;
      std::vector<double> hits;
      for (const auto& t : mesh.tris) {
        // 2D point-in-triangle in the xy projection, then plane z.
        const Point3 &a = t[0], &b = t[1], &c = t[2];
        double d = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
        if (std::abs(d) < 1e-15) continue;
        double w0 = ((b.y - c.y) * (x - c.x) + (c.x - b.x) * (y - c.y)) / d;
        double w1 = ((c.y - a.y) * (x - c.x) + (a.x - c.x) * (y - c.y)) / d;
        double w2 = 1 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        hits.push_back(w0 * a.z + w1 * b.z + w2 * c.z);
      }
      std::sort(hits.begin(), hits.end());
      for (int k = 0; k < res; ++k) {
        double z = origin.z + (k + 0.5) * extent.z / res;
        std::size_t below = std::lower_bound(hits.begin(), hits.end(), z) - hits.begin();
        if ((hits.size() - below) % 2 == 1) g.at(i, j, k) = 1.0;
      }
    }
  return g;
}

/// Extracts skin-anchored cubes from a scalar grid, resampled to 32^3.
/// Every patch's top face lies on the z = origin.z (skin) plane; edge lengths
/// are uniform over size_fraction x the largest bounding extent.
inline std::vector<VoxelPatch> extract_patches(const Grid3& grid, const Point3& origin,
                                               const Point3& extent, int count,
                                               double frac_min, double frac_max,
                                               std::uint64_t seed) {
  require(count >= 1, "extract_patches: count must be >= 1");
  require(frac_min > 0 && frac_max <= 1.0 && frac_min <= frac_max,
          "extract_patches: size fractions must satisfy 0 < min <= max <= 1");
  double bound = std::max({extent.x, extent.y, extent.z});

  Rng rng = substream(seed, 0x9A7C4);
  std::uniform_real_distribution<double> uf(frac_min, frac_max);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<VoxelPatch> out;
  for (int n = 0; n < count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      double edge = uf(rng) * bound;
      if (edge > extent.x || edge > extent.y || edge > extent.z) continue;
      double ox = origin.x + u01(rng) * (extent.x - edge);
      double oy = origin.y + u01(rng) * (extent.y - edge);
      VoxelPatch patch;
      patch.world_origin = {ox, oy, origin.z};
      patch.edge_length = edge;
      for (int k = 0; k < kPatchRes; ++k)
        for (int j = 0; j < kPatchRes; ++j)
          for (int i = 0; i < kPatchRes; ++i) {
            double u = (ox + (i + 0.5) * edge / kPatchRes - origin.x) / extent.x;
            double v = (oy + (j + 0.5) * edge / kPatchRes - origin.y) / extent.y;
            double w = ((k + 0.5) * edge / kPatchRes) / extent.z;
            patch.grid.at(i, j, k) = clamp01(grid.sample_unit(u, v, w));
          }
      out.push_back(std::move(patch));
      placed = true;
    }
    if (!placed)
      throw ValidationError("extract_patches: could not place a patch inside the volume");
  }
  return out;
}

inline std::vector<VoxelPatch> extract_patches(const TriMesh& mesh, const Point3& origin,
                                               const Point3& extent, int count,
                                               double frac_min, double frac_max,
                                               std::uint64_t seed, int voxel_res = 64) {
  return extract_patches(voxelize_mesh(mesh, voxel_res, origin, extent), origin, extent,
                         count, frac_min, frac_max, seed);
}

/// Procedural 32^3 occupancy patches for base prior training: spheres,
/// boxes, skin-anchored slabs, and layered composites, all deterministic
/// for a given seed.
inline std::vector<Grid3> procedural_patches(int count, std::uint64_t seed) {
  require(count >= 1, "procedural_patches: count must be >= 1");
  Rng rng = substream(seed, 0x5E45);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Grid3> out;
  out.reserve(std::size_t(count));
  const int R = kPatchRes;

  for (int n = 0; n < count; ++n) {
    Grid3 g(R, R, R);
    int kind = n % 4;
    double v_in = 0.5 + 0.5 * u01(rng);  // occupied value
    double v_out = 0.2 * u01(rng);       // background value
    if (kind == 0) {  // sphere
      double cx = 0.3 + 0.4 * u01(rng), cy = 0.3 + 0.4 * u01(rng), cz = 0.3 + 0.4 * u01(rng);
      double r = 0.1 + 0.25 * u01(rng);
      for (int k = 0; k < R; ++k)
        for (int j = 0; j < R; ++j)
          for (int i = 0; i < R; ++i) {
            double dx = (i + 0.5) / R - cx, dy = (j + 0.5) / R - cy, dz = (k + 0.5) / R - cz;
            g.at(i, j, k) = dx * dx + dy * dy + dz * dz <= r * r ? v_in : v_out;
          }
    } else if (kind == 1) {  // box
      double x0 = 0.5 * u01(rng), y0 = 0.5 * u01(rng), z0 = 0.5 * u01(rng);
      double x1 = x0 + 0.2 + 0.3 * u01(rng), y1 = y0 + 0.2 + 0.3 * u01(rng),
             z1 = z0 + 0.2 + 0.3 * u01(rng);
      for (int k = 0; k < R; ++k)
        for (int j = 0; j < R; ++j)
          for (int i = 0; i < R; ++i) {
            double x = (i + 0.5) / R, y = (j + 0.5) / R, z = (k + 0.5) / R;
            g.at(i, j, k) =
                (x >= x0 && x <= x1 && y >= y0 && y <= y1 && z >= z0 && z <= z1) ? v_in : v_out;
          }
    } else if (kind == 2) {  // skin-anchored slab of random thickness
      double depth = 0.15 + 0.7 * u01(rng);
      for (int k = 0; k < R; ++k) {
        double z = (k + 0.5) / R;
        double v = z <= depth ? v_in : v_out;
        for (int j = 0; j < R; ++j)
          for (int i = 0; i < R; ++i) g.at(i, j, k) = v;
      }
    } else {  // layered composite
      int layers = 2 + int(u01(rng) * 3.0);
      std::vector<double> cuts{0.0}, vals;
      for (int l = 1; l < layers; ++l) cuts.push_back(double(l) / layers + 0.1 * (u01(rng) - 0.5));
      cuts.push_back(1.0);
      for (int l = 0; l < layers; ++l) vals.push_back(u01(rng));
      for (int k = 0; k < R; ++k) {
        double z = (k + 0.5) / R;
        int l = 0;
        while (l + 1 < layers && z > cuts[std::size_t(l + 1)]) ++l;
        for (int j = 0; j < R; ++j)
          for (int i = 0; i < R; ++i) g.at(i, j, k) = vals[std::size_t(l)];
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Reference sweep renderer over a known parameter volume. Each frame is
/// rendered column by column through the public transmit/compose operations,
/// making this the oracle the field-based renderer is checked against.
inline SweepDataset simulate_sweep(const ParameterVolume& vol,
                                   const std::vector<Pose>& trajectory,
                                   const ProbeConfig& probe, const RenderConfig& cfg,
                                   std::uint64_t seed = 0) {
  require(!trajectory.empty(), "simulate_sweep: empty trajectory");
  probe.validate();
  cfg.validate();

  SweepDataset ds;
  ds.probe = probe;
  const int S = probe.n_samples, W = probe.n_scanlines;

  for (std::size_t f = 0; f < trajectory.size(); ++f) {
    trajectory[f].validate();
    std::uint64_t frame_seed = splitmix64(seed ^ (f + 1));

    Eigen::MatrixXd reflect(S, W), scatter(S, W);
    std::vector<ColumnCache<double>> cols(W);
    for (int j = 0; j < W; ++j) {
      ScanRay ray = ray_for_pixel(probe, trajectory[f], j, S);
      std::vector<ParameterSample> samples;
      samples.reserve(S);
      for (double t : ray.depths) samples.push_back(vol.sample(ray.at(t)));

      std::optional<Rng> rng;
      if (cfg.stochastic()) rng = substream(frame_seed, 0xB0DE, std::uint64_t(j));
      std::vector<double> I = transmit(samples, probe, cfg, rng ? &*rng : nullptr);

      // compose_bmode clamps per column; rebuild the pre-clamp terms here so
      // the optional PSF can act on the whole frame first.
      ColumnCache<double> c;
      c.s = RaySamples<double>::from(samples);
      c.I = I;
      compose_column(c, cfg, rng ? &*rng : nullptr);
      for (int t = 0; t < S; ++t) {
        reflect(t, j) = c.reflect[t];
        scatter(t, j) = c.scatter[t];
      }
    }

    Eigen::MatrixXd sc =
        cfg.psf_enabled ? conv2d_same(scatter, psf_kernel(cfg), cfg.psf_size) : scatter;
    ProbeFrame frame;
    frame.frame_index = int(f);
    frame.pose = trajectory[f];
    frame.image = Image(S, W);
    for (int t = 0; t < S; ++t)
      for (int j = 0; j < W; ++j)
        frame.image.at(t, j) = clamp01(cfg.w_reflect * reflect(t, j) + cfg.w_scatter * sc(t, j));
    ds.frames.push_back(std::move(frame));
  }

  compute_split(int(ds.frames.size()), ds.train_indices, ds.test_indices);
  return ds;
}

}  // namespace nerfus
