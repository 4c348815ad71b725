#pragma once

// Command-line front end: synth, train, infer, fuse, eval, gradcheck.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dspm/fusion.hpp"
#include "dspm/gradient_heads.hpp"
#include "dspm/solver.hpp"
#include "dspm/synthscene.hpp"

namespace dspm::cli {

namespace fs = std::filesystem;

struct NamedScene {
  std::string name;  // "" when the data directory is itself a scene
  fs::path dir;
};

// A directory holding images/ is one scene; otherwise every subdirectory
// that holds images/ is, in name order.
inline std::vector<NamedScene> list_scenes(const std::string& root) {
  const fs::path r(root);
  if (!fs::is_directory(r)) throw UsageError("not a directory: " + root);
  if (fs::is_directory(r / "images")) return {{"", r}};
  std::vector<NamedScene> out;
  for (const auto& e : fs::directory_iterator(r))
    if (e.is_directory() && fs::is_directory(e.path() / "images")) out.push_back({e.path().filename().string(), e.path()});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  if (out.empty()) throw UsageError("no scenes under " + root);
  return out;
}

inline fs::path scene_out(const std::string& root, const NamedScene& s) {
  return s.name.empty() ? fs::path(root) : fs::path(root) / s.name;
}

inline void print_settings(std::ostream& err, const std::string& cmd, std::uint64_t seed,
                           const std::vector<std::pair<std::string, std::string>>& kv) {
  err << "dspm " << cmd << "\nseed=" << seed << "\n";
  for (const auto& [k, v] : kv) err << k << "=" << v << "\n";
}

inline void write_map(const fs::path& path, const Array& a, std::size_t channels = 1) {
  FloatMap m;
  m.channels = channels;
  m.height = a.dim(a.rank() - 2);
  m.width = a.dim(a.rank() - 1);
  m.data.assign(a.data().begin(), a.data().end());
  write_pfm(path.string(), m);
}

inline Array read_depth_map(const fs::path& path) {
  FloatMap m = read_pfm(path.string());
  if (m.channels != 1) throw ParseError(path.string(), 0, "depth map must have one channel");
  return Array({m.height, m.width}, std::move(m.data));
}

inline std::vector<Array> read_predictions(const fs::path& dir, std::size_t views) {
  std::vector<Array> out;
  for (std::size_t i = 0; i < views; ++i) out.push_back(read_depth_map(dir / "depths" / (view_name(i) + ".pfm")));
  return out;
}

inline SolverConfig resolve_config(const std::string& config_path, const std::string& ckpt) {
  if (!config_path.empty()) return load_config(config_path);
  if (!ckpt.empty() && fs::exists(ckpt + ".cfg")) return load_config(ckpt + ".cfg");
  return SolverConfig{};
}

// ---- subcommands ----

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t scenes = 1;
  int views = 3;
  std::size_t width = 80, height = 64;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& err) {
  print_settings(err, "synth", a.seed,
                 {{"out", a.out}, {"scenes", std::to_string(a.scenes)}, {"views", std::to_string(a.views)},
                  {"width", std::to_string(a.width)}, {"height", std::to_string(a.height)}});
  for (std::size_t k = 0; k < a.scenes; ++k) {
    SceneSpec spec;
    spec.seed = Rng::mix(a.seed, k);
    spec.views = a.views;
    spec.width = a.width;
    spec.height = a.height;
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", k);
    write_dataset(generate_scene(spec), (fs::path(a.out) / name).string());
  }
  err << "wrote " << a.scenes << " scene(s) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out, csv;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  SolverConfig cfg = a.config.empty() ? SolverConfig{} : load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.steps = *a.steps;
  cfg.validate();
  err << "dspm train\n" << format_config(cfg);
  std::vector<SceneData> scenes;
  for (const auto& s : list_scenes(a.data)) scenes.push_back(read_dataset(s.dir.string()));
  auto model = make_model<float>(cfg);
  std::ofstream csv_file;
  if (!a.csv.empty()) {
    csv_file.open(a.csv, std::ios::binary | std::ios::trunc);
    if (!csv_file) throw Error("cannot open " + a.csv);
  }
  TrainHooks hooks;
  hooks.csv = a.csv.empty() ? &out : &csv_file;
  hooks.checkpoint = a.out;
  hooks.log = &err;
  detail::write_file_atomic(a.out + ".cfg", format_config(cfg));
  const auto res = train(model, scenes, hooks);
  save_model(model, a.out);
  err << "trained " << res.steps << " steps, checkpoint " << a.out << "\n";
  return 0;
}

struct InferArgs {
  std::string data, ckpt, out, config;
  bool dump_flow = false, dump_uncertainty = false, template_flow = false, uniform_perturb = false;
};

inline int cmd_infer(const InferArgs& a, std::ostream& err) {
  const SolverConfig cfg = resolve_config(a.config, a.ckpt);
  print_settings(err, "infer", cfg.seed,
                 {{"data", a.data}, {"ckpt", a.ckpt}, {"out", a.out}, {"views", std::to_string(cfg.views)},
                  {"learned_flow", a.template_flow ? "0" : "1"}, {"uncertainty_perturb", a.uniform_perturb ? "0" : "1"}});
  auto model = make_model<float>(cfg);
  load_model(model, a.ckpt);
  PipelineOptions opt;
  opt.learned_flow = !a.template_flow;
  opt.uncertainty_perturb = !a.uniform_perturb;
  for (const auto& s : list_scenes(a.data)) {
    const SceneData scene = read_dataset(s.dir.string());
    const fs::path dst = scene_out(a.out, s);
    fs::create_directories(dst / "depths");
    for (std::size_t ref = 0; ref < scene.views.size(); ++ref) {
      const auto res = infer_view(model, scene, ref, opt);
      const std::string n = view_name(ref);
      write_map(dst / "depths" / (n + ".pfm"), res.depth());
      const auto& fin = res.scales.back();
      if (a.dump_flow) {
        fs::create_directories(dst / "flow");
        const std::size_t M = fin.flow.dim(0) / 2, H = fin.flow.dim(1), W = fin.flow.dim(2);
        for (std::size_t k = 0; k < M; ++k) {
          std::vector<float> v(3 * H * W, 0.0f);
          for (std::size_t p = 0; p < H * W; ++p)
            for (std::size_t c = 0; c < 2; ++c) v[3 * p + c] = fin.flow[(2 * k + c) * H * W + p];
          FloatMap m{W, H, 3, std::move(v)};
          write_pfm((dst / "flow" / (n + "_" + std::to_string(k) + ".pfm")).string(), m);
        }
      }
      if (a.dump_uncertainty) {
        fs::create_directories(dst / "uncertainty");
        write_map(dst / "uncertainty" / (n + "_sigma.pfm"), fin.expected_sigma.detach());
        const auto& u = fin.mixture.u;
        for (std::size_t i = 0; i < u.dim(0); ++i)
          write_map(dst / "uncertainty" / (n + "_u" + std::to_string(i + 1) + ".pfm"),
                    reshape(slice(u.detach(), 0, i, 1), Shape{u.dim(1), u.dim(2)}));
      }
    }
    err << "inferred " << scene.views.size() << " view(s) of " << (s.name.empty() ? s.dir.string() : s.name) << "\n";
  }
  return 0;
}

struct FuseArgs {
  std::string data, pred, out;
  FusionOptions opt;
};

inline int cmd_fuse(const FuseArgs& a, std::ostream& err) {
  print_settings(err, "fuse", 0,
                 {{"data", a.data}, {"pred", a.pred}, {"out", a.out}, {"tau_px", std::to_string(a.opt.tau_px)},
                  {"tau_rel", std::to_string(a.opt.tau_rel)}, {"n_consist", std::to_string(a.opt.n_consist)}});
  fs::create_directories(a.out);
  for (const auto& s : list_scenes(a.data)) {
    const SceneData scene = read_dataset(s.dir.string());
    FusionInput in;
    in.depths = read_predictions(scene_out(a.pred, s), scene.views.size());
    for (const auto& v : scene.views) {
      in.cameras.push_back(v.camera);
      in.images.push_back(v.image);
    }
    const auto cloud = fuse(in, a.opt);
    const fs::path path = fs::path(a.out) / ((s.name.empty() ? std::string("scene") : s.name) + ".ply");
    write_ply(path.string(), cloud);
    err << path.string() << ": " << cloud.size() << " points\n";
  }
  return 0;
}

struct EvalArgs {
  std::string data, pred, json_out;
  bool json = false;
  std::size_t border = 4;
  FusionOptions opt;
};

struct EvalSummary {
  double mae = 0.0, within1 = 0.0, within2 = 0.0;
  std::size_t pixels = 0;
  CloudMetrics cloud;
  std::size_t points = 0, scenes = 0;
};

inline EvalSummary evaluate(const EvalArgs& a) {
  EvalSummary sum;
  double mae = 0.0, w1 = 0.0, w2 = 0.0, acc = 0.0, comp = 0.0;
  for (const auto& s : list_scenes(a.data)) {
    const SceneData scene = read_dataset(s.dir.string());
    const auto pred = read_predictions(scene_out(a.pred, s), scene.views.size());
    FusionInput in;
    std::vector<Array> gt_depths;
    std::vector<Camera> cams;
    for (std::size_t i = 0; i < scene.views.size(); ++i) {
      const auto& v = scene.views[i];
      if (v.depth.rank() != 2) throw UsageError("eval: scene " + s.dir.string() + " has no ground-truth depth");
      const auto m = depth_metrics(pred[i], v.depth, interior_mask(v.depth, a.border));
      mae += m.mae * double(m.count);
      w1 += m.within1 * double(m.count);
      w2 += m.within2 * double(m.count);
      sum.pixels += m.count;
      gt_depths.push_back(v.depth);
      cams.push_back(v.camera);
    }
    in.depths = pred;
    in.cameras = cams;
    const auto cloud = fuse(in, a.opt);
    const auto cm = cloud_metrics(cloud.points, gt_samples(gt_depths, cams));
    acc += cm.acc;
    comp += cm.comp;
    sum.points += cloud.size();
    ++sum.scenes;
  }
  sum.mae = mae / double(sum.pixels);
  sum.within1 = w1 / double(sum.pixels);
  sum.within2 = w2 / double(sum.pixels);
  sum.cloud.acc = acc / double(sum.scenes);
  sum.cloud.comp = comp / double(sum.scenes);
  sum.cloud.overall = (sum.cloud.acc + sum.cloud.comp) / 2.0;
  return sum;
}

inline nlohmann::json to_json(const EvalSummary& s) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"mae", num(s.mae)},   {"within_0.05", num(s.within1)}, {"within_0.1", num(s.within2)},
          {"acc", num(s.cloud.acc)}, {"comp", num(s.cloud.comp)},   {"overall", num(s.cloud.overall)},
          {"pixels", s.pixels},   {"points", s.points},            {"scenes", s.scenes}};
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  print_settings(err, "eval", 0,
                 {{"data", a.data}, {"pred", a.pred}, {"border", std::to_string(a.border)},
                  {"tau_px", std::to_string(a.opt.tau_px)}, {"tau_rel", std::to_string(a.opt.tau_rel)},
                  {"n_consist", std::to_string(a.opt.n_consist)}});
  const EvalSummary s = evaluate(a);
  const std::string js = to_json(s).dump(2) + "\n";
  if (!a.json_out.empty()) detail::write_file_atomic(a.json_out, js);
  if (a.json) {
    out << js;
  } else {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "scenes   %zu\npixels   %zu\ndepth MAE   %.6f\n<0.05       %.4f\n<0.1        %.4f\npoints   %zu\n"
                  "Acc         %.6f\nComp        %.6f\nOverall     %.6f\n",
                  s.scenes, s.pixels, s.mae, s.within1, s.within2, s.points, s.cloud.acc, s.cloud.comp,
                  s.cloud.overall);
    out << buf;
  }
  return 0;
}

struct GradArgs {
  SuiteOptions suite;
};

inline int cmd_gradcheck(const GradArgs& a, std::ostream& out, std::ostream& err) {
  print_settings(err, "gradcheck", a.suite.seed,
                 {{"instances", std::to_string(a.suite.instances)}, {"filter", a.suite.filter}});
  const auto rep = run_gradient_suite(a.suite, all_gradient_cases());
  char buf[256];
  for (const auto& r : rep.results) {
    std::snprintf(buf, sizeof buf, "%-28s %s  max rel err %.3e  (%zu entries)\n", r.name.c_str(),
                  r.passed ? "ok  " : "FAIL", r.max_rel_error, r.entries_checked);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%zu cases, %.1f s\n", rep.results.size(), rep.seconds);
  out << buf;
  return rep.passed() ? 0 : 1;
}

// ---- dispatch ----

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Desk-scale PatchMatch multi-view stereo"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes with ground truth");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Seed");
  synth->add_option("--scenes", sa.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  synth->add_option("--views", sa.views, "Views per scene")->check(CLI::Range(2, 64));
  synth->add_option("--width", sa.width, "Image width (multiple of 8)");
  synth->add_option("--height", sa.height, "Image height (multiple of 8)");

  TrainArgs ta;
  std::uint64_t train_seed = 0;
  std::size_t train_steps = 0;
  auto* trn = app.add_subcommand("train", "Train on a dataset, streaming step,L_depth,L_NLL,L_total");
  trn->add_option("--data", ta.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--config", ta.config, "key=value config file")->check(CLI::ExistingFile);
  trn->add_option("--out", ta.out, "Checkpoint path")->required();
  trn->add_option("--csv", ta.csv, "Write the loss stream here instead of stdout");
  auto* seed_opt = trn->add_option("--seed", train_seed, "Override the config seed");
  auto* steps_opt = trn->add_option("--steps", train_steps, "Override the step budget");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Estimate a depth map for every view");
  inf->add_option("--data", ia.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--ckpt", ia.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", ia.out, "Output directory")->required();
  inf->add_option("--config", ia.config, "Config file (default: <ckpt>.cfg)")->check(CLI::ExistingFile);
  inf->add_flag("--dump-flow", ia.dump_flow, "Write finest-scale plane flow offsets");
  inf->add_flag("--dump-uncertainty", ia.dump_uncertainty, "Write E(sigma) and per-view uncertainty maps");
  inf->add_flag("--template-flow", ia.template_flow, "Use fixed template offsets instead of the learned flow");
  inf->add_flag("--uniform-perturb", ia.uniform_perturb, "Use uniform perturbation instead of mixture bins");

  FuseArgs fa;
  auto* fus = app.add_subcommand("fuse", "Fuse predicted depth maps into PLY point clouds");
  fus->add_option("--data", fa.data, "Dataset directory (cameras, images)")->required()->check(CLI::ExistingDirectory);
  fus->add_option("--pred", fa.pred, "Predicted depth directory (infer --out)")->required()->check(CLI::ExistingDirectory);
  fus->add_option("--out", fa.out, "Output directory for .ply files")->required();
  fus->add_option("--tau-px", fa.opt.tau_px, "Reprojection threshold in pixels");
  fus->add_option("--tau-rel", fa.opt.tau_rel, "Relative depth threshold");
  fus->add_option("--n-consist", fa.opt.n_consist, "Consistent views required");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Depth MAE and Acc/Comp/Overall against ground truth");
  evl->add_option("--data", ea.data, "Dataset directory with ground truth")->required()->check(CLI::ExistingDirectory);
  evl->add_option("--pred", ea.pred, "Predicted depth directory")->required()->check(CLI::ExistingDirectory);
  evl->add_flag("--json", ea.json, "Print JSON instead of a table");
  evl->add_option("--json-out", ea.json_out, "Also write the JSON to this file");
  evl->add_option("--border", ea.border, "Ignored image border in pixels");
  evl->add_option("--tau-px", ea.opt.tau_px, "Reprojection threshold in pixels");
  evl->add_option("--tau-rel", ea.opt.tau_rel, "Relative depth threshold");
  evl->add_option("--n-consist", ea.opt.n_consist, "Consistent views required");

  GradArgs ga;
  auto* grd = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and learned head");
  grd->add_option("--instances", ga.suite.instances, "Seeded instances per case")->check(CLI::PositiveNumber);
  grd->add_option("--seed", ga.suite.seed, "Seed");
  grd->add_option("--filter", ga.suite.filter, "Only cases whose name contains this");
  grd->add_flag("--inject-fault", ga.suite.inject_broken)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    // Subcommand --help lands here as CallForHelp raised from the subcommand.
    if (e.get_exit_code() == 0) {
      for (auto* sub : app.get_subcommands()) out << sub->help();
      if (app.get_subcommands().empty()) out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*synth) return cmd_synth(sa, err);
    if (*trn) {
      if (*seed_opt) ta.seed = train_seed;
      if (*steps_opt) ta.steps = train_steps;
      return cmd_train(ta, out, err);
    }
    if (*inf) return cmd_infer(ia, err);
    if (*fus) return cmd_fuse(fa, err);
    if (*evl) return cmd_eval(ea, out, err);
    if (*grd) return cmd_gradcheck(ga, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dspm::cli
