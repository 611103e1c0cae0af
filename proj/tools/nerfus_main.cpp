// SPDX-License-Identifier: Apache-2.0
//
// Single-binary entry point: phantom simulation, diffusion-prior training
// and fine-tuning, field training, ablations, rendering, and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "nerfus/core/config.hpp"
#include "nerfus/core/dataset.hpp"
#include "nerfus/metrics.hpp"
#include "nerfus/phantom.hpp"
#include "nerfus/prior/ddpm.hpp"
#include "nerfus/train.hpp"

namespace fs = std::filesystem;
using Real = float;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string log_level = "info";
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config_path, "flat key=value config file");
  cmd->add_option("--seed", c.seed, "master random seed (overrides config)");
  auto* o = cmd->add_option("--out", c.out, "output path");
  if (out_required) o->required();
  cmd->add_option("--log-level", c.log_level, "quiet | info | debug")
      ->check(CLI::IsMember({"quiet", "info", "debug"}));
}

nerfus::RunConfig make_config(const Common& c) {
  nerfus::RunConfig rc;
  if (!c.config_path.empty()) rc.load_file(c.config_path);
  if (c.seed) rc.seed = *c.seed;
  rc.validate();
  return rc;
}

bool verbose(const Common& c) { return c.log_level == "debug"; }

/// Loads a prior checkpoint; adapter files come back as the effective
/// (base + low-rank update) denoiser.
nerfus::Denoiser<Real> load_prior(const std::string& path, nerfus::NoiseSchedule& sched) {
  if (!fs::exists(path))
    throw nerfus::ValidationError("prior checkpoint not found: " + path);
  nerfus::Checkpoint ck = nerfus::Checkpoint::load(path);
  if (nerfus::checkpoint_has_adapter(ck))
    return nerfus::adapter_from_checkpoint<Real>(ck, sched).eff;
  nerfus::Denoiser<Real> model;
  nerfus::prior_from_checkpoint(ck, model, sched);
  return model;
}

/// Patch corpus for fine-tuning: skin-anchored rho_b and rho_s cubes from a
/// phantom volume, half of the requested count from each channel.
std::vector<nerfus::Grid3> phantom_patches(const nerfus::PhantomSpec& spec, int count,
                                           std::uint64_t seed) {
  nerfus::ParameterVolume vol = nerfus::build_phantom(spec);
  std::vector<nerfus::Grid3> out;
  int half = std::max(1, count / 2);
  for (auto& p : nerfus::extract_patches(vol.rho_b, vol.origin, vol.extent, half, 0.1, 0.4,
                                         nerfus::splitmix64(seed ^ 0xB)))
    out.push_back(std::move(p.grid));
  for (auto& p : nerfus::extract_patches(vol.rho_s, vol.origin, vol.extent, count - half, 0.1,
                                         0.4, nerfus::splitmix64(seed ^ 0x5)))
    out.push_back(std::move(p.grid));
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw nerfus::IoError("cannot write " + path);
  out << text;
}

// ---- subcommands -----------------------------------------------------------

int cmd_phantom(const Common& c, const std::string& spec_path, int frames, double sweep_from,
                double sweep_to, int scanlines, int samples) {
  nerfus::RunConfig rc = make_config(c);
  nerfus::require(frames >= 1, "phantom: --frames must be >= 1");
  nerfus::PhantomSpec spec = nerfus::load_phantom_spec(spec_path);
  nerfus::ParameterVolume vol = nerfus::build_phantom(spec);

  nerfus::ProbeConfig probe;  // desk defaults: 64 scanlines x 128 samples
  probe.n_scanlines = scanlines;
  probe.n_samples = samples;
  std::vector<nerfus::Pose> traj;
  for (int i = 0; i < frames; ++i) {
    double y = frames == 1 ? sweep_from
                           : sweep_from + (sweep_to - sweep_from) * double(i) / (frames - 1);
    traj.push_back(nerfus::Pose::translation(0.0, y, 0.0));
  }
  auto ds = nerfus::simulate_sweep(vol, traj, probe, nerfus::render_config_from(rc), rc.seed);
  nerfus::write_dataset(ds, c.out);
  std::printf("wrote %zu frames to %s\n", ds.frames.size(), c.out.c_str());
  return 0;
}

int cmd_prior_train(const Common& c, int patch_count, std::optional<int> steps) {
  nerfus::RunConfig rc = make_config(c);
  auto patches = nerfus::procedural_patches(patch_count, rc.seed);
  nerfus::NoiseSchedule sched = nerfus::schedule_from(rc);
  nerfus::Denoiser<Real> model(nerfus::denoiser_config_from(rc));
  model.init(rc.seed);

  nerfus::PriorTrainConfig tc;
  tc.iterations = steps ? *steps : rc.prior_iterations;
  tc.batch = rc.prior_batch;
  tc.lr = rc.prior_lr;
  tc.seed = rc.seed;
  tc.verbose = verbose(c);
  auto losses = nerfus::train_prior(model, patches, sched, tc);

  nerfus::Checkpoint ck;
  nerfus::prior_to_checkpoint(model, sched, ck);
  ck.save(c.out);
  std::string csv = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
    csv += buf;
  }
  write_text(c.out + ".loss.csv", csv);
  std::printf("trained prior on %d patches for %d steps -> %s\n", patch_count, tc.iterations,
              c.out.c_str());
  return 0;
}

int cmd_prior_finetune(const Common& c, const std::string& base_path,
                       const std::string& spec_path, int patch_count, std::optional<int> steps,
                       std::optional<int> rank, std::optional<double> delta) {
  nerfus::RunConfig rc = make_config(c);
  if (rank) rc.lora_rank = *rank;
  if (delta) rc.lora_delta = *delta;
  rc.validate();
  if (!fs::exists(base_path))
    throw nerfus::ValidationError("base prior checkpoint not found: " + base_path);
  nerfus::NoiseSchedule sched;
  nerfus::Denoiser<Real> base;
  nerfus::prior_from_checkpoint(nerfus::Checkpoint::load(base_path), base, sched);

  nerfus::AdaptedDenoiser<Real> adapted(base, rc.lora_rank, rc.lora_delta, rc.seed);
  auto patches = phantom_patches(nerfus::load_phantom_spec(spec_path), patch_count, rc.seed);

  nerfus::PriorTrainConfig tc;
  tc.iterations = steps ? *steps : rc.prior_iterations;
  tc.batch = rc.prior_batch;
  tc.lr = rc.prior_lr;
  tc.seed = rc.seed;
  tc.verbose = verbose(c);
  std::vector<double> losses;
  if (tc.iterations > 0) losses = nerfus::finetune_prior(adapted, patches, sched, tc);

  nerfus::Checkpoint ck;
  nerfus::adapter_to_checkpoint(adapted, sched, ck);
  ck.save(c.out);
  std::string csv = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
    csv += buf;
  }
  write_text(c.out + ".loss.csv", csv);
  std::printf("fine-tuned rank-%d adapter for %d steps -> %s\n", rc.lora_rank, tc.iterations,
              c.out.c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& prior_path,
              std::optional<int> iterations, bool no_guidance, const std::string& resume) {
  nerfus::RunConfig rc = make_config(c);
  nerfus::SweepDataset ds = nerfus::load_dataset(data_dir);

  nerfus::TrainConfig tc = nerfus::train_config_from(rc);
  if (iterations) tc.iterations = *iterations;
  tc.verbose = verbose(c);
  tc.resume_path = resume;
  if (no_guidance) {
    tc.weights.lambda_rho_b = 0.0;
    tc.weights.lambda_rho_s = 0.0;
    if (prior_path.empty()) {
      tc.use_l_rho_b = false;
      tc.use_l_rho_s = false;
    }
  }

  nerfus::NoiseSchedule sched;
  std::optional<nerfus::Denoiser<Real>> prior;
  if (!prior_path.empty()) prior = load_prior(prior_path, sched);
  nerfus::require(!(tc.use_l_rho_b || tc.use_l_rho_s) || prior.has_value(),
                  "train: guidance is enabled but no --prior checkpoint was given");

  fs::create_directories(c.out);
  auto res = nerfus::train_field<Real>(ds, prior ? &*prior : nullptr,
                                       prior ? &sched : nullptr, tc, c.out);
  std::printf("trained %d iterations; final photometric loss %.6g; wrote %s\n", tc.iterations,
              res.history.back().photometric, (c.out + "/field_latest.ckpt").c_str());
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data_dir, const std::string& prior_path,
               std::optional<int> iterations) {
  nerfus::RunConfig rc = make_config(c);
  nerfus::SweepDataset ds = nerfus::load_dataset(data_dir);
  nerfus::TrainConfig tc = nerfus::train_config_from(rc);
  if (iterations) tc.iterations = *iterations;
  tc.verbose = verbose(c);

  nerfus::NoiseSchedule sched;
  nerfus::require(!prior_path.empty(), "ablate: --prior checkpoint is required");
  nerfus::Denoiser<Real> prior = load_prior(prior_path, sched);

  fs::create_directories(c.out);
  auto suite = nerfus::ablation_suite<Real>(ds, &prior, &sched, tc);
  std::string table = nerfus::ablation_table_csv(suite.rows);
  write_text(c.out + "/ablation.csv", table);
  std::printf("%s", table.c_str());
  return 0;
}

int cmd_render(const Common& c, const std::string& ckpt_path, const std::string& data_dir,
               bool float_out) {
  nerfus::RunConfig rc = make_config(c);
  if (!fs::exists(ckpt_path))
    throw nerfus::ValidationError("field checkpoint not found: " + ckpt_path);
  auto field = nerfus::field_from_checkpoint<Real>(nerfus::Checkpoint::load(ckpt_path));
  nerfus::SweepDataset ds = nerfus::load_dataset(data_dir);
  nerfus::RenderConfig rcfg = nerfus::render_config_from(rc);

  fs::create_directories(c.out);
  for (const auto& f : ds.frames) {
    nerfus::Image img = rc.use_us_rendering
                            ? nerfus::render_frame(field, f.pose, ds.probe, rcfg,
                                                   nerfus::splitmix64(rc.seed ^
                                                                     std::uint64_t(f.frame_index + 1)))
                            : nerfus::render_frame_std(field, f.pose, ds.probe);
    std::string stem = (fs::path(c.out) / nerfus::detail::frame_name(f.frame_index)).string();
    nerfus::save_png_gray(img, stem);
    if (float_out) nerfus::save_float_raw(img, stem + ".f32");
  }
  std::printf("rendered %zu frames to %s\n", ds.frames.size(), c.out.c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& data_dir,
             bool csv) {
  nerfus::RunConfig rc = make_config(c);
  if (!fs::exists(ckpt_path))
    throw nerfus::ValidationError("field checkpoint not found: " + ckpt_path);
  auto field = nerfus::field_from_checkpoint<Real>(nerfus::Checkpoint::load(ckpt_path));
  nerfus::SweepDataset ds = nerfus::load_dataset(data_dir);

  nerfus::MetricReport rep = nerfus::evaluate_field(field, ds, nerfus::render_config_from(rc),
                                                    rc.use_us_rendering, rc.seed);
  nerfus::require(!c.out.empty(), "eval: --out report path required");
  write_text(c.out, nerfus::report_to_json(rep).dump(2) + "\n");
  if (csv) write_text(c.out + ".csv", nerfus::report_to_csv(rep));
  std::printf("test frames: %zu  PSNR %.2f +/- %.2f dB  SSIM %.4f +/- %.4f  MS-SSIM %.4f\n",
              rep.frame_indices.size(), rep.psnr_mean, rep.psnr_std, rep.ssim_mean, rep.ssim_std,
              rep.ms_ssim_mean);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acoustic-parameter field reconstruction from posed B-mode sweeps"};
  app.require_subcommand(1);

  Common c_phantom, c_ptrain, c_pft, c_train, c_ablate, c_render, c_eval;

  auto* sc_phantom = app.add_subcommand("phantom", "simulate a sweep over a synthetic phantom");
  std::string phantom_spec;
  int phantom_frames = 20;
  double sweep_from = -0.2, sweep_to = 0.2;
  sc_phantom->add_option("--spec", phantom_spec, "phantom spec JSON")->required();
  sc_phantom->add_option("--frames", phantom_frames, "number of sweep frames");
  sc_phantom->add_option("--sweep-from", sweep_from, "sweep start offset (y axis)");
  sc_phantom->add_option("--sweep-to", sweep_to, "sweep end offset (y axis)");
  int phantom_scanlines = 64, phantom_samples = 128;
  sc_phantom->add_option("--scanlines", phantom_scanlines, "probe scanlines per frame");
  sc_phantom->add_option("--samples", phantom_samples, "depth samples per scanline");
  add_common(sc_phantom, c_phantom, true);

  auto* sc_ptrain = app.add_subcommand("prior-train", "train the base diffusion prior");
  int ptrain_count = 200;
  std::optional<int> ptrain_steps;
  sc_ptrain->add_option("--patches", ptrain_count, "number of procedural training patches");
  sc_ptrain->add_option("--steps", ptrain_steps, "training iterations");
  add_common(sc_ptrain, c_ptrain, true);

  auto* sc_pft = app.add_subcommand("prior-finetune", "low-rank fine-tune of a base prior");
  std::string pft_base, pft_spec;
  int pft_count = 100;
  std::optional<int> pft_steps;
  sc_pft->add_option("--base", pft_base, "base prior checkpoint")->required();
  sc_pft->add_option("--spec", pft_spec, "phantom spec JSON (patch source)")->required();
  sc_pft->add_option("--patches", pft_count, "number of fine-tune patches");
  sc_pft->add_option("--steps", pft_steps, "fine-tune iterations (0 writes an identity adapter)");
  std::optional<int> pft_rank;
  std::optional<double> pft_delta;
  sc_pft->add_option("--rank", pft_rank, "adapter rank (overrides config)");
  sc_pft->add_option("--delta", pft_delta, "adapter scale delta (overrides config)");
  add_common(sc_pft, c_pft, true);

  auto* sc_train = app.add_subcommand("train", "optimize a field on a sweep dataset");
  std::string train_data, train_prior, train_resume;
  std::optional<int> train_iters;
  bool train_noguid = false;
  sc_train->add_option("--data", train_data, "dataset directory")->required();
  sc_train->add_option("--prior", train_prior, "prior checkpoint for guidance");
  sc_train->add_option("--iterations", train_iters, "training iterations");
  sc_train->add_flag("--no-guidance", train_noguid, "equivalent to both loss weights = 0");
  sc_train->add_option("--resume", train_resume, "resume from a training checkpoint");
  add_common(sc_train, c_train, true);

  auto* sc_ablate = app.add_subcommand("ablate", "run the four-variant ablation suite");
  std::string ablate_data, ablate_prior;
  std::optional<int> ablate_iters;
  sc_ablate->add_option("--data", ablate_data, "dataset directory")->required();
  sc_ablate->add_option("--prior", ablate_prior, "prior checkpoint for guidance")->required();
  sc_ablate->add_option("--iterations", ablate_iters, "training iterations per variant");
  add_common(sc_ablate, c_ablate, true);

  auto* sc_render = app.add_subcommand("render", "render frames at dataset poses");
  std::string render_ckpt, render_data;
  bool render_float = false;
  sc_render->add_option("--checkpoint", render_ckpt, "field checkpoint")->required();
  sc_render->add_option("--data", render_data, "dataset directory (poses + probe)")->required();
  sc_render->add_flag("--float-out", render_float, "also write raw float frames");
  add_common(sc_render, c_render, true);

  auto* sc_eval = app.add_subcommand("eval", "evaluate a field on the test split");
  std::string eval_ckpt, eval_data;
  bool eval_csv = false;
  sc_eval->add_option("--checkpoint", eval_ckpt, "field checkpoint")->required();
  sc_eval->add_option("--data", eval_data, "dataset directory")->required();
  sc_eval->add_flag("--csv", eval_csv, "also write a per-frame CSV next to the report");
  add_common(sc_eval, c_eval, true);

  try {
    app.parse(argc, argv);
    if (sc_phantom->parsed())
      return cmd_phantom(c_phantom, phantom_spec, phantom_frames, sweep_from, sweep_to,
                         phantom_scanlines, phantom_samples);
    if (sc_ptrain->parsed()) return cmd_prior_train(c_ptrain, ptrain_count, ptrain_steps);
    if (sc_pft->parsed())
      return cmd_prior_finetune(c_pft, pft_base, pft_spec, pft_count, pft_steps, pft_rank,
                                pft_delta);
    if (sc_train->parsed())
      return cmd_train(c_train, train_data, train_prior, train_iters, train_noguid, train_resume);
    if (sc_ablate->parsed()) return cmd_ablate(c_ablate, ablate_data, ablate_prior, ablate_iters);
    if (sc_render->parsed()) return cmd_render(c_render, render_ckpt, render_data, render_float);
    if (sc_eval->parsed()) return cmd_eval(c_eval, eval_ckpt, eval_data, eval_csv);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const nerfus::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
