// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Every tolerance is pinned here. Oracles are written out independently of
// the library code paths they check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "dspm/cli.hpp"
#include "dspm/fusion.hpp"
#include "dspm/gradient_heads.hpp"
#include "dspm/plane_indicator.hpp"
#include "dspm/prob_matcher.hpp"
#include "dspm/solver.hpp"
#include "dspm/synthscene.hpp"

using namespace dspm;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: gradients ----

Verdict gradients() {
  SuiteOptions opt;
  opt.instances = 5;
  opt.seed = 2024;
  const auto rep = run_gradient_suite(opt, all_gradient_cases());
  double worst = 0.0;
  std::string failed;
  bool flow = false, mixture = false;
  for (const auto& r : rep.results) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed) failed += " " + r.name;
    flow = flow || r.name == "plane_flow_decoder";
    mixture = mixture || r.name == "mixture_branch";
  }
  Verdict v;
  v.pass = rep.passed() && failed.empty() && flow && mixture && worst < 1e-3 && rep.seconds < 300.0;
  v.detail = std::to_string(rep.results.size()) + " cases x 5 instances, " +
             fmt("max rel err %.2e (< 1e-3), %.1f s (< 300 s)", worst, rep.seconds) + failed;
  return v;
}

// ---- 2: mixture ----

double simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
               double whole, double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) return left + right + (left + right - whole) / 15.0;
  return simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), 1e-12, 50);
}

double oracle_cdf(double y, double mu, double sigma) {
  const double k = std::sqrt(2.0) / sigma;
  return y < mu ? 0.5 * std::exp(k * (y - mu)) : 1.0 - 0.5 * std::exp(-k * (y - mu));
}

double monte_carlo_mass(const Mixture& m, double r, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> pick(0.0, 1.0);
  std::exponential_distribution<double> e1(std::sqrt(2.0) / m.sigma1), e2(std::sqrt(2.0) / m.sigma2);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n; ++i)
    if ((pick(gen) < m.alpha1 ? e1(gen) : e2(gen)) < r) ++inside;
  return static_cast<double>(inside) / static_cast<double>(n);
}

Verdict mixture() {
  double norm_err = 0.0, mc_err = 0.0, bin_err = 0.0;
  for (const Mixture& m : {Mixture{0.0, 0.5, 0.5, 1.0, 2.0}, Mixture{3.0, 0.9, 0.1, 1.0, 7.5},
                           Mixture{-1.0, 0.2, 0.8, 1.0, 1.001}}) {
    auto f = [&](double y) { return mixture_pdf(y, m); };
    const double half = 40.0 * m.sigma2;
    norm_err = std::max(norm_err, std::abs(integrate(f, m.mu - half, m.mu) + integrate(f, m.mu, m.mu + half) - 1.0));
  }
  std::uint64_t seed = 11;
  for (const Mixture& m : {Mixture{0.0, 1.0, 0.0, 1.0, 2.0}, Mixture{0.0, 0.3, 0.7, 1.0, 3.5},
                           Mixture{0.0, 0.8, 0.2, 1.0, 9.0}})
    mc_err = std::max(mc_err, std::abs(monte_carlo_mass(m, 1.0, 1000000, seed++) - uncertainty(m, 1.0)));
  for (double eps : {0.5, 1.0, 2.0, 3.0})
    for (std::size_t m2 : {1u, 2u, 3u, 8u, 16u}) {
      const double mass = 1.0 - std::exp(-std::sqrt(2.0) * eps);
      const auto e = perturbation_edges(eps, m2);
      for (std::size_t j = 0; j < m2; ++j)
        bin_err = std::max(bin_err, std::abs(oracle_cdf(e[j + 1], 0.0, 1.0) - oracle_cdf(e[j], 0.0, 1.0) - mass / m2));
    }
  const auto c = perturb(0.0, 1.0, 2.0, 2, -100.0, 100.0);
  const bool worked = c.size() == 2 && std::abs(c[0] + 1.0) < 1e-12 && std::abs(c[1] - 1.0) < 1e-12;
  Verdict v;
  v.pass = norm_err < 1e-6 && mc_err < 1.5e-3 && bin_err < 1e-9 && worked;
  v.detail = fmt("pdf mass err %.1e (< 1e-6), MC err %.1e (< 1.5e-3), bin mass err %.1e (< 1e-9)", norm_err, mc_err,
                 bin_err) +
             (worked ? ", {-1,+1} case exact" : ", {-1,+1} case WRONG");
  return v;
}

// ---- 3: geometry ----

Mat3 rotation_xyz(double ax, double ay, double az) {
  return (Eigen::AngleAxisd(az, Vec3::UnitZ()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
          Eigen::AngleAxisd(ax, Vec3::UnitX()))
      .toRotationMatrix();
}

Camera make_camera(double f, double cx, double cy, const Mat3& R, const Vec3& center) {
  Camera c;
  c.K << f, 0, cx, 0, f, cy, 0, 0, 1;
  c.R = R;
  c.t = -R * center;
  c.d_min = 2.0;
  c.d_max = 8.0;
  return c;
}

Vec2 oracle_project(const Camera& c, const Vec3& X) {
  double xc[3];
  for (int r = 0; r < 3; ++r) xc[r] = c.R(r, 0) * X[0] + c.R(r, 1) * X[1] + c.R(r, 2) * X[2] + c.t[r];
  return {c.K(0, 0) * xc[0] / xc[2] + c.K(0, 1) * xc[1] / xc[2] + c.K(0, 2), c.K(1, 1) * xc[1] / xc[2] + c.K(1, 2)};
}

Vec3 oracle_plane_point(const Camera& c, double u, double v, double d) {
  const double yc = (v - c.K(1, 2)) / c.K(1, 1) * d;
  const double xc = ((u - c.K(0, 2)) * d - c.K(0, 1) * yc) / c.K(0, 0);
  return c.R.transpose() * (Vec3(xc, yc, d) - c.t);
}

Verdict geometry() {
  Rng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto rot = [&] { return rotation_xyz(0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1), 0.1 * rng.uniform(-1, 1)); };
    const Camera ref = make_camera(60 + 20 * rng.uniform(), 40 + rng.uniform(), 32 + rng.uniform(), rot(),
                                   Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
    const Camera src = make_camera(60 + 20 * rng.uniform(), 40 + rng.uniform(), 32 + rng.uniform(), rot(),
                                   ref.center() + Vec3(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)));
    const double d = rng.uniform(2, 8), u = rng.uniform(0, 79), v = rng.uniform(0, 63);
    const Vec2 p = apply_homography(homography_for_depth(ref, src, d), u, v);
    worst = std::max(worst, (p - oracle_project(src, oracle_plane_point(ref, u, v, d))).norm());
  }
  const double f = 70.0, b = 0.8;
  const Camera ref = make_camera(f, 39.5, 31.5, Mat3::Identity(), Vec3::Zero());
  const Camera src = make_camera(f, 39.5, 31.5, Mat3::Identity(), Vec3(b, 0, 0));
  double disp = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double u = rng.uniform(0, 79), v = rng.uniform(0, 63), d = rng.uniform(2, 8);
    const Vec2 p = apply_homography(homography_for_depth(ref, src, d), u, v);
    disp = std::max({disp, std::abs(u - p.x() - f * b / d), std::abs(p.y() - v)});
  }
  Verdict out;
  out.pass = worst < 1e-5 && disp < 1e-6;
  out.detail = fmt("homography vs projection %.1e px (< 1e-5), rectified disparity err %.1e (< 1e-6)", worst, disp);
  return out;
}

// ---- 4: correlation ----

Verdict correlation() {
  Rng rng(4);
  const std::size_t C = 16, H = 9, W = 11, R = 3, K = 2 * R + 1;
  const Tensor<double> f = random_tensor<double>({C, H, W}, rng);
  const Tensor<double> c = build_correlation(f, R);
  double worst = 0.0, self = 0.0;
  for (long dy = -long(R); dy <= long(R); ++dy)
    for (long dx = -long(R); dx <= long(R); ++dx) {
      const std::size_t k = static_cast<std::size_t>((dy + long(R)) * long(K) + dx + long(R));
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long ny = std::clamp<long>(long(y) + dy, 0, long(H) - 1), nx = std::clamp<long>(long(x) + dx, 0, long(W) - 1);
          double s = 0.0, n2 = 0.0;
          for (std::size_t ch = 0; ch < C; ++ch) {
            s += f[(ch * H + y) * W + x] * f[(ch * H + std::size_t(ny)) * W + std::size_t(nx)];
            n2 += f[(ch * H + y) * W + x] * f[(ch * H + y) * W + x];
          }
          const double got = c[(k * H + y) * W + x];
          worst = std::max(worst, std::abs(got - s / std::sqrt(double(C))));
          if (dy == 0 && dx == 0) self = std::max(self, std::abs(got - n2 / std::sqrt(double(C))));
        }
    }
  Verdict v;
  v.pass = worst < 1e-5 && self < 1e-5;
  v.detail = fmt("16-channel volume vs brute force %.1e (< 1e-5), self term vs |phi|^2/sqrt(h) %.1e", worst, self);
  return v;
}

// ---- 5 and 6: training ----

SolverConfig toy_config() {
  SolverConfig cfg;
  cfg.steps = 200;
  cfg.epochs = 1000;
  cfg.decay_epochs = {};
  cfg.lr = 3e-3;
  cfg.lr_matcher = 1e-3;
  cfg.seed = 1;
  return cfg;
}

std::vector<SceneData> toy_scenes(std::uint64_t first_seed, std::size_t n) {
  std::vector<SceneData> out;
  for (std::size_t s = 0; s < n; ++s) {
    SceneSpec spec;
    spec.seed = first_seed + s;
    out.push_back(generate_scene(spec));
  }
  return out;
}

// Mean absolute depth error over valid pixels at least `border` from the edge.
double interior_mae(const Array& depth, const Array& gt, std::size_t border = 4) {
  const std::size_t H = gt.dim(0), W = gt.dim(1);
  double e = 0.0;
  std::size_t n = 0;
  for (std::size_t y = border; y + border < H; ++y)
    for (std::size_t x = border; x + border < W; ++x) {
      const double g = gt[y * W + x];
      if (!(g > 0.0)) continue;
      e += std::abs(double(depth[y * W + x]) - g);
      ++n;
    }
  return n ? e / double(n) : 0.0;
}

struct Trained {
  Model<float> model;
  TrainResult result;
  double seconds = 0.0;
};

Verdict toy_training(Trained& t) {
  const auto train_set = toy_scenes(100, 8);
  const auto t0 = std::chrono::steady_clock::now();
  t.model = make_model<float>(toy_config());
  t.result = train(t.model, train_set);
  t.seconds = seconds_since(t0);
  const auto& L = t.result.losses;
  const std::size_t tail = std::min<std::size_t>(10, L.size());
  double last = 0.0;
  for (std::size_t i = L.size() - tail; i < L.size(); ++i) last += L[i].total / double(tail);
  const double ratio = last / L.front().total;

  const auto held_out = toy_scenes(900, 3);
  double mae = 0.0;
  std::size_t n = 0;
  for (const auto& sc : held_out)
    for (std::size_t ref = 0; ref < sc.views.size(); ++ref) {
      mae += interior_mae(infer_view(t.model, sc, ref).depth(), sc.views[ref].depth);
      ++n;
    }
  mae /= double(n);
  const double range = 4.0 - 2.0;
  Verdict v;
  v.pass = t.result.steps == 200 && ratio <= 0.5 && mae < 0.05 * range && t.seconds < 1800.0;
  v.detail = fmt("L_total last10/step1 = %.3f (<= 0.5), held-out MAE %.4f (< %.3f), train %.0f s", ratio, mae,
                 0.05 * range, t.seconds);
  return v;
}

Verdict ablation(Model<float>& model) {
  double full = 0.0, fixed = 0.0, uniform = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    SceneSpec spec;
    spec.seed = 700 + static_cast<std::uint64_t>(s);
    const auto g = step_edge_scene(spec, 2.5, 3.5);
    const Array& gt = g.data.views[0].depth;
    PipelineOptions o;
    full += interior_mae(infer_view(model, g.data, 0, o).depth(), gt) / seeds;
    o.learned_flow = false;
    fixed += interior_mae(infer_view(model, g.data, 0, o).depth(), gt) / seeds;
    o.learned_flow = true;
    o.uncertainty_perturb = false;
    uniform += interior_mae(infer_view(model, g.data, 0, o).depth(), gt) / seeds;
  }
  Verdict v;
  v.pass = full < fixed && full < uniform;
  v.detail = fmt("step-edge MAE over 5 seeds: full %.4f, fixed template %.4f, uniform perturbation %.4f", full, fixed,
                 uniform) +
             "; flow vs template " + (full < fixed ? "ok" : "WRONG") + ", uncertainty vs uniform " +
             (full < uniform ? "ok" : "WRONG");
  return v;
}

// ---- 7: fusion ----

Verdict fusion() {
  SceneSpec spec;
  spec.seed = 5;
  spec.converging = false;
  const double d = 3.0;
  const auto g = single_plane_scene(spec, d);
  FusionInput in;
  for (const auto& v : g.data.views) in.depths.push_back(v.depth);
  in.cameras = g.cameras;
  const FusionOptions opt;
  const PointCloud cloud = fuse(in, opt);

  // Analytic samples: ray/plane intersections at the pixels whose nearest
  // projected pixel lies inside at least n_consist other views.
  std::vector<Vec3> truth;
  const long W = long(spec.width), H = long(spec.height);
  for (std::size_t a = 0; a < g.cameras.size(); ++a) {
    const Camera& ca = g.cameras[a];
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        const Vec3 X = oracle_plane_point(ca, double(x), double(y), d);
        std::size_t seen = 0;
        for (std::size_t b = 0; b < g.cameras.size(); ++b) {
          if (b == a) continue;
          const Vec2 q = oracle_project(g.cameras[b], X);
          const long qx = std::lround(q.x()), qy = std::lround(q.y());
          if (qx >= 0 && qy >= 0 && qx < W && qy < H) ++seen;
        }
        if (seen >= opt.n_consist) truth.push_back(X);
      }
  }
  const CloudMetrics cm = cloud_metrics(cloud.points, truth);

  FusionInput bad = in;
  for (float& v : bad.depths[0].mutable_data()) v *= 1.1f;
  FusionOptions one = opt;
  one.n_consist = 1;
  const auto kept = consistency_filter(bad, one);
  double rejected_left = 0.0, others = 0.0;
  for (float m : kept[0].mask.data()) rejected_left += m;
  for (std::size_t k = 1; k < kept.size(); ++k)
    for (float m : kept[k].mask.data()) others += m;

  Rng rng(7);
  std::vector<Vec3> pts(10000);
  for (auto& p : pts) p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  const KdTree tree(pts);
  std::size_t mismatches = 0;
  for (int i = 0; i < 2000; ++i) {
    const Vec3 q(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double dk = (pts[k] - q).norm();
      if (dk < bd) {
        bd = dk;
        best = k;
      }
    }
    const auto [idx, dist] = tree.nearest(q);
    if (idx != best || dist != bd) ++mismatches;
  }

  Verdict v;
  v.pass = !cloud.points.empty() && cloud.points.size() == truth.size() && cm.acc <= 1e-6 && cm.comp <= 1e-6 &&
           rejected_left == 0.0 && others > 0.0 && mismatches == 0;
  v.detail = fmt("%.0f points, Acc %.1e, Comp %.1e (<= 1e-6); ", double(cloud.points.size()), cm.acc, cm.comp) +
             fmt("perturbed view keeps %.0f px, others %.0f px; ", rejected_left, others) +
             fmt("k-d tree mismatches %.0f / 2000 on 1e4 points", double(mismatches));
  return v;
}

// ---- 8: determinism ----

struct CliRun {
  int code = 0;
  std::string out;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dspm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str()};
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "dspm_acceptance_det";
  std::string csv[2], json[2];
  bool ok = true;
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = root / std::to_string(r);
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string();
    ok = ok && cli({"synth", "--out", d + "/data", "--seed", "7", "--scenes", "2"}).code == 0;
    std::ofstream(d + "/cfg.txt") << "seed=7\nsteps=6\nepochs=1\n";
    const CliRun tr = cli({"train", "--data", d + "/data", "--config", d + "/cfg.txt", "--out", d + "/model.ckpt"});
    csv[r] = tr.out;
    ok = ok && tr.code == 0;
    ok = ok && cli({"infer", "--data", d + "/data", "--ckpt", d + "/model.ckpt", "--out", d + "/pred"}).code == 0;
    const CliRun ev = cli({"eval", "--data", d + "/data", "--pred", d + "/pred", "--json"});
    json[r] = ev.out;
    ok = ok && ev.code == 0;
  }
  fs::remove_all(root);
  Verdict v;
  v.pass = ok && !csv[0].empty() && !json[0].empty() && csv[0] == csv[1] && json[0] == json[1];
  v.detail = std::string("loss CSV ") + (csv[0] == csv[1] ? "identical" : "DIFFERS") + " (" +
             std::to_string(csv[0].size()) + " bytes), metric JSON " + (json[0] == json[1] ? "identical" : "DIFFERS");
  return v;
}

}  // namespace

// Optional arguments pick criteria by number; 6 implies 5.
int main(int argc, char** argv) {
  std::vector<bool> want(9, argc == 1);
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k < 1 || k > 8) {
      std::fprintf(stderr, "usage: dspm_acceptance [criterion...]\n");
      return 2;
    }
    want[std::size_t(k)] = true;
  }
  if (want[6]) want[5] = true;
  bool all = true;
  auto report = [&all](int k, const char* name, const Verdict& v) {
    std::printf("criterion %d %-13s %s  %s\n", k, name, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    all = all && v.pass;
  };
  auto guarded = [](const std::function<Verdict()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Verdict{false, std::string("exception: ") + e.what()};
    }
  };
  if (want[1]) report(1, "gradients", guarded(gradients));
  if (want[2]) report(2, "mixture", guarded(mixture));
  if (want[3]) report(3, "geometry", guarded(geometry));
  if (want[4]) report(4, "correlation", guarded(correlation));
  Trained t;
  if (want[5]) report(5, "toy-training", guarded([&] { return toy_training(t); }));
  if (want[6]) report(6, "ablation", guarded([&] { return ablation(t.model); }));
  if (want[7]) report(7, "fusion", guarded(fusion));
  if (want[8]) report(8, "determinism", guarded(determinism));
  return all ? 0 : 1;
}
