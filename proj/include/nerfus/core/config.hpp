// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "nerfus/core/common.hpp"

namespace nerfus {

/// Every tunable of the pipeline as a flat key=value file. Unknown keys are
/// rejected on load; all keys and defaults are documented in docs/config.md.
struct RunConfig {
  // reproducibility
  std::uint64_t seed = 0;

  // field network
  int field_layers = 4;
  int field_width = 64;
  int field_skip = 2;
  int field_pe_frequencies = 6;

  // rendering
  std::string render_boundary_mode = "expected";   // expected | bernoulli
  std::string render_scatter_mode = "expected";    // expected | bernoulli
  double render_w_reflect = 0.5;
  double render_w_scatter = 0.5;
  bool render_psf = false;
  int render_psf_size = 5;
  double render_psf_sigma_axial = 1.0;
  double render_psf_sigma_lateral = 1.0;

  // optimization
  int iterations = 2000;
  int batch_size = 512;
  double lr_start = 5e-4;
  double lr_end = 5e-5;
  double clip_norm = 10.0;
  int checkpoint_interval = 500;

  // loss
  double lambda_rho_b = 0.5;
  double lambda_rho_s = 0.25;
  bool use_l_rho_b = true;
  bool use_l_rho_s = true;
  bool use_us_rendering = true;

  // diffusion guidance
  int guidance_cadence = 10;
  int guidance_patches = 4;
  int guidance_t = -1;  // -1 means timesteps / 10
  double guidance_size_min = 0.1;
  double guidance_size_max = 0.4;

  // diffusion prior
  int prior_timesteps = 100;
  double prior_beta_min = 1e-3;
  double prior_beta_max = 0.2;
  int prior_base_width = 16;
  int prior_temb_dim = 32;
  std::string prior_mults = "1,2,4";
  int prior_iterations = 400;
  int prior_batch = 4;
  double prior_lr = 1e-4;
  int lora_rank = 4;
  double lora_delta = 1.0;

  void set(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  void validate() const;
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError("config: boolean expected for '" + key + "', got '" + v + "'");
}

template <class T>
T parse_num(const std::string& v, const std::string& key) {
  std::istringstream ss(v);
  T out;
  ss >> out;
  if (ss.fail() || !ss.eof())
    throw ValidationError("config: cannot parse value '" + v + "' for key '" + key + "'");
  return out;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_num;
  if (key == "seed") seed = parse_num<std::uint64_t>(value, key);
  else if (key == "field.layers") field_layers = parse_num<int>(value, key);
  else if (key == "field.width") field_width = parse_num<int>(value, key);
  else if (key == "field.skip") field_skip = parse_num<int>(value, key);
  else if (key == "field.pe_frequencies") field_pe_frequencies = parse_num<int>(value, key);
  else if (key == "render.boundary_mode") render_boundary_mode = value;
  else if (key == "render.scatter_mode") render_scatter_mode = value;
  else if (key == "render.w_reflect") render_w_reflect = parse_num<double>(value, key);
  else if (key == "render.w_scatter") render_w_scatter = parse_num<double>(value, key);
  else if (key == "render.psf") render_psf = parse_bool(value, key);
  else if (key == "render.psf_size") render_psf_size = parse_num<int>(value, key);
  else if (key == "render.psf_sigma_axial") render_psf_sigma_axial = parse_num<double>(value, key);
  else if (key == "render.psf_sigma_lateral")
    render_psf_sigma_lateral = parse_num<double>(value, key);
  else if (key == "iterations") iterations = parse_num<int>(value, key);
  else if (key == "batch_size") batch_size = parse_num<int>(value, key);
  else if (key == "lr_start") lr_start = parse_num<double>(value, key);
  else if (key == "lr_end") lr_end = parse_num<double>(value, key);
  else if (key == "clip_norm") clip_norm = parse_num<double>(value, key);
  else if (key == "checkpoint_interval") checkpoint_interval = parse_num<int>(value, key);
  else if (key == "lambda_rho_b") lambda_rho_b = parse_num<double>(value, key);
  else if (key == "lambda_rho_s") lambda_rho_s = parse_num<double>(value, key);
  else if (key == "use_l_rho_b") use_l_rho_b = parse_bool(value, key);
  else if (key == "use_l_rho_s") use_l_rho_s = parse_bool(value, key);
  else if (key == "use_us_rendering") use_us_rendering = parse_bool(value, key);
  else if (key == "guidance.cadence") guidance_cadence = parse_num<int>(value, key);
  else if (key == "guidance.patches") guidance_patches = parse_num<int>(value, key);
  else if (key == "guidance.t") guidance_t = parse_num<int>(value, key);
  else if (key == "guidance.size_min") guidance_size_min = parse_num<double>(value, key);
  else if (key == "guidance.size_max") guidance_size_max = parse_num<double>(value, key);
  else if (key == "prior.timesteps") prior_timesteps = parse_num<int>(value, key);
  else if (key == "prior.beta_min") prior_beta_min = parse_num<double>(value, key);
  else if (key == "prior.beta_max") prior_beta_max = parse_num<double>(value, key);
  else if (key == "prior.base_width") prior_base_width = parse_num<int>(value, key);
  else if (key == "prior.temb_dim") prior_temb_dim = parse_num<int>(value, key);
  else if (key == "prior.mults") prior_mults = value;
  else if (key == "prior.iterations") prior_iterations = parse_num<int>(value, key);
  else if (key == "prior.batch") prior_batch = parse_num<int>(value, key);
  else if (key == "prior.lr") prior_lr = parse_num<double>(value, key);
  else if (key == "lora.rank") lora_rank = parse_num<int>(value, key);
  else if (key == "lora.delta") lora_delta = parse_num<double>(value, key);
  else throw ValidationError("config: unknown key '" + key + "'");
}

inline void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto strip = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      std::size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config: missing '=' on line " + std::to_string(lineno) + " of " +
                            path);
    set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  validate();
}

inline void RunConfig::validate() const {
  require(field_layers >= 1 && field_width >= 1 && field_pe_frequencies >= 0,
          "config: field.* must be positive");
  require(field_skip >= 0 && field_skip < field_layers, "config: field.skip out of range");
  require(render_boundary_mode == "expected" || render_boundary_mode == "bernoulli",
          "config: render.boundary_mode must be 'expected' or 'bernoulli'");
  require(render_scatter_mode == "expected" || render_scatter_mode == "bernoulli",
          "config: render.scatter_mode must be 'expected' or 'bernoulli'");
  require(iterations >= 1 && batch_size >= 1, "config: iterations and batch_size must be >= 1");
  require(lr_start > 0 && lr_end > 0 && lr_end <= lr_start,
          "config: require 0 < lr_end <= lr_start");
  require(clip_norm > 0, "config: clip_norm must be > 0");
  require(lambda_rho_b >= 0 && lambda_rho_s >= 0, "config: loss weights must be >= 0");
  require(guidance_cadence >= 1 && guidance_patches >= 1,
          "config: guidance cadence/patches must be >= 1");
  require(guidance_size_min > 0 && guidance_size_min <= guidance_size_max &&
              guidance_size_max <= 1.0,
          "config: guidance size fractions must satisfy 0 < min <= max <= 1");
  require(prior_timesteps >= 1, "config: prior.timesteps must be >= 1");
  require(guidance_t <= prior_timesteps, "config: guidance.t exceeds prior.timesteps");
  require(prior_beta_min > 0 && prior_beta_max < 1 && prior_beta_min <= prior_beta_max,
          "config: prior betas must satisfy 0 < min <= max < 1");
  require(lora_rank >= 1 && lora_delta >= 0, "config: lora.rank >= 1 and lora.delta >= 0");
}

}  // namespace nerfus
