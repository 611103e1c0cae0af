// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nerfus/core/image.hpp"
#include "nerfus/core/types.hpp"

namespace nerfus {

struct ProbeFrame {
  Image image;  // H = n_samples, W = n_scanlines
  Pose pose;
  int frame_index = 0;
};

/// Test indices are every 8th frame, anchored at 0; the rest train.
inline void compute_split(int n_frames, std::vector<int>& train, std::vector<int>& test) {
  train.clear();
  test.clear();
  for (int i = 0; i < n_frames; ++i) {
    if (i % 8 == 0)
      test.push_back(i);
    else
      train.push_back(i);
  }
}

struct SweepDataset {
  std::vector<ProbeFrame> frames;
  ProbeConfig probe;
  std::vector<int> train_indices;
  std::vector<int> test_indices;

  int total_rays_train() const {
    return int(train_indices.size()) * probe.n_scanlines;
  }
};

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("missing file: " + p.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + p.string() + ": " + e.what());
  }
  return j;
}

inline std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05d.png", index);
  return buf;
}

}  // namespace detail

inline ProbeConfig probe_from_json(const nlohmann::json& j) {
  ProbeConfig p;
  try {
    p.n_scanlines = j.at("n_scanlines").get<int>();
    p.n_samples = j.at("n_samples").get<int>();
    p.depth_extent = j.at("depth_extent").get<double>();
    p.frequency = j.value("frequency", 1.0);
    p.geometry = probe_geometry_from_string(j.value("geometry", std::string("linear")));
    p.fan_aperture = j.value("fan_aperture", 0.0);
    p.initial_intensity = j.value("initial_intensity", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("probe.json: ") + e.what());
  }
  p.validate();
  return p;
}

inline nlohmann::json probe_to_json(const ProbeConfig& p) {
  return {{"n_scanlines", p.n_scanlines},
          {"n_samples", p.n_samples},
          {"depth_extent", p.depth_extent},
          {"frequency", p.frequency},
          {"geometry", to_string(p.geometry)},
          {"fan_aperture", p.fan_aperture},
          {"initial_intensity", p.initial_intensity}};
}

/// Loads a dataset directory: probe.json, poses.json, frames/{index:05}.png.
/// Frames come back ordered by index with the every-8th split applied.
inline SweepDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path root(dir);

  SweepDataset ds;
  ds.probe = probe_from_json(detail::read_json_file(root / "probe.json"));

  nlohmann::json poses = detail::read_json_file(root / "poses.json");
  require(poses.is_array() && !poses.empty(), "poses.json: expected non-empty array");

  struct Entry {
    int frame;
    Pose pose;
  };
  std::vector<Entry> entries;
  for (const auto& e : poses) {
    Entry ent;
    try {
      ent.frame = e.at("frame").get<int>();
      auto mat = e.at("matrix");
      require(mat.is_array() && mat.size() == 16, "poses.json: matrix must have 16 entries");
      for (int i = 0; i < 16; ++i) ent.pose.m[i] = mat[i].get<double>();
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError(std::string("poses.json: ") + ex.what());
    }
    ent.pose.validate();
    entries.push_back(ent);
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.frame < b.frame; });

  for (const auto& ent : entries) {
    fs::path img_path = root / "frames" / detail::frame_name(ent.frame);
    if (!fs::exists(img_path)) throw IoError("missing file: " + img_path.string());
    ProbeFrame f;
    f.image = load_png_gray(img_path.string());
    f.pose = ent.pose;
    f.frame_index = ent.frame;
    require(f.image.h == ds.probe.n_samples && f.image.w == ds.probe.n_scanlines,
            "frame " + detail::frame_name(ent.frame) + ": image " +
                std::to_string(f.image.h) + "x" + std::to_string(f.image.w) +
                " does not match probe n_samples=" + std::to_string(ds.probe.n_samples) +
                ", n_scanlines=" + std::to_string(ds.probe.n_scanlines));
    ds.frames.push_back(std::move(f));
  }

  compute_split(int(ds.frames.size()), ds.train_indices, ds.test_indices);
  if (ds.train_indices.empty())
    std::fprintf(stderr, "warning: dataset %s has no training frames after the split\n",
                 dir.c_str());
  return ds;
}

inline void write_dataset(const SweepDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  fs::create_directories(root / "frames");

  {
    std::ofstream out(root / "probe.json");
    if (!out) throw IoError("cannot write " + (root / "probe.json").string());
    out << probe_to_json(ds.probe).dump(2) << "\n";
  }
  {
    nlohmann::json poses = nlohmann::json::array();
    for (const auto& f : ds.frames) {
      nlohmann::json mat = nlohmann::json::array();
      for (double v : f.pose.m) mat.push_back(v);
      poses.push_back({{"frame", f.frame_index}, {"matrix", mat}});
    }
    std::ofstream out(root / "poses.json");
    if (!out) throw IoError("cannot write " + (root / "poses.json").string());
    out << poses.dump(2) << "\n";
  }
  for (const auto& f : ds.frames)
    save_png_gray(f.image, (root / "frames" / detail::frame_name(f.frame_index)).string());
}

}  // namespace nerfus
