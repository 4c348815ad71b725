#pragma once

// Four-scale pipeline (one PatchMatch iteration per scale), losses,
// optimizer and training loop.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dspm/backbone.hpp"
#include "dspm/checkpoint.hpp"
#include "dspm/plane_indicator.hpp"
#include "dspm/prob_matcher.hpp"
#include "dspm/synthscene.hpp"

namespace dspm {

struct SolverConfig {
  int m0 = 16;
  std::size_t m1 = 8;
  std::size_t m2 = 8;
  std::vector<double> eps{2.0, 2.0, 1.0};
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double r2 = 1.0;
  std::size_t groups = 8;
  double lr = 1e-3;
  double lr_matcher = 1e-5;
  int epochs = 10;
  std::uint64_t seed = 0;
  std::size_t views = 3;
  std::size_t steps = 0;  // 0: run all epochs
  std::size_t batch = 1;  // (scene, reference) samples averaged per optimizer step
  std::vector<int> decay_epochs{6, 8};

  void validate() const {
    if (m0 < 1) throw ConfigError("config: m0 must be >= 1");
    if (m1 > 8) throw ConfigError("config: m1 = " + std::to_string(m1) + " exceeds the 8 flow offsets");
    if (m2 < 1) throw ConfigError("config: m2 must be >= 1");
    if (eps.size() != kLevels - 1)
      throw ConfigError("config: eps needs " + std::to_string(kLevels - 1) + " entries, got " + std::to_string(eps.size()));
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (!(eps[i] > 0.0)) throw ConfigError("config: eps entries must be positive");
      if (i > 0 && eps[i] > eps[i - 1]) throw ConfigError("config: eps schedule must be non-increasing");
    }
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0)) throw ConfigError("config: loss weights must be non-negative");
    if (!(r2 > 0.0)) throw ConfigError("config: r2 must be positive");
    if (groups < 1 || kLevelChannels[kLevels - 1] % groups != 0)
      throw ConfigError("config: groups = " + std::to_string(groups) + " must divide every level's channel count");
    if (!(lr > 0.0 && lr_matcher >= 0.0)) throw ConfigError("config: learning rates must be positive");
    if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (views < 2) throw ConfigError("config: need at least 2 views");
    if (batch < 1) throw ConfigError("config: batch must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
std::vector<T> parse_list(const std::string& v, const std::string& where) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::stringstream is(trim(item));
    T x{};
    if (!(is >> x) || !is.eof()) throw ConfigError(where + ": bad list entry '" + item + "'");
    out.push_back(x);
  }
  return out;
}

template <typename T>
T parse_scalar(const std::string& v, const std::string& where) {
  std::stringstream is(v);
  T x{};
  if (!(is >> x) || !is.eof()) throw ConfigError(where + ": bad value '" + v + "'");
  return x;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  char buf[64];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.17g", i ? "," : "", v[i]);
    s += buf;
  }
  return s;
}

}  // namespace detail

// Flat key=value text; '#' starts a comment. Unknown keys are rejected.
inline SolverConfig parse_config(const std::string& text, const std::string& source = "config") {
  SolverConfig c;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    if (key == "m0") c.m0 = detail::parse_scalar<int>(val, where);
    else if (key == "m1") c.m1 = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "m2") c.m2 = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "eps") c.eps = detail::parse_list<double>(val, where);
    else if (key == "lambda1") c.lambda1 = detail::parse_scalar<double>(val, where);
    else if (key == "lambda2") c.lambda2 = detail::parse_scalar<double>(val, where);
    else if (key == "r2") c.r2 = detail::parse_scalar<double>(val, where);
    else if (key == "groups") c.groups = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "lr") c.lr = detail::parse_scalar<double>(val, where);
    else if (key == "lr_matcher") c.lr_matcher = detail::parse_scalar<double>(val, where);
    else if (key == "epochs") c.epochs = detail::parse_scalar<int>(val, where);
    else if (key == "seed") c.seed = detail::parse_scalar<std::uint64_t>(val, where);
    else if (key == "views") c.views = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "steps") c.steps = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "batch") c.batch = detail::parse_scalar<std::size_t>(val, where);
    else if (key == "decay_epochs") c.decay_epochs = val.empty() ? std::vector<int>{} : detail::parse_list<int>(val, where);
    else throw ConfigError(where + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline SolverConfig load_config(const std::string& path) { return parse_config(detail::read_file_bytes(path), path); }

inline std::string format_config(const SolverConfig& c) {
  std::string decay;
  for (std::size_t i = 0; i < c.decay_epochs.size(); ++i) decay += (i ? "," : "") + std::to_string(c.decay_epochs[i]);
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "m0=%d\nm1=%zu\nm2=%zu\neps=%s\nlambda1=%.17g\nlambda2=%.17g\nr2=%.17g\ngroups=%zu\nlr=%.17g\n"
                "lr_matcher=%.17g\nepochs=%d\nseed=%llu\nviews=%zu\nsteps=%zu\nbatch=%zu\ndecay_epochs=%s\n",
                c.m0, c.m1, c.m2, detail::join_doubles(c.eps).c_str(), c.lambda1, c.lambda2, c.r2, c.groups, c.lr,
                c.lr_matcher, c.epochs, static_cast<unsigned long long>(c.seed), c.views, c.steps, c.batch, decay.c_str());
  return buf;
}

// ---- model ----

template <typename T>
struct Model {
  SolverConfig cfg;
  PlaneConfig plane;
  MatcherConfig matcher;
  ParamSet<T> ps;
};

template <typename T>
Model<T> make_model(const SolverConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  m.plane.used = cfg.m1;
  m.matcher.groups = cfg.groups;
  m.matcher.r2 = cfg.r2;
  m.matcher.sigma_max = static_cast<double>(cfg.m0);
  Rng rng(Rng::mix(cfg.seed, 0x6d6f64656cull));
  add_backbone_params(m.ps, rng);
  add_plane_params(m.ps, m.plane, rng);
  add_matcher_params(m.ps, m.matcher, rng);
  return m;
}

// Stratified initialization: candidate j uniform in [j/m₀, (j+1)/m₀).
template <typename T>
Tensor<T> initialize_candidates(int m0, std::size_t H, std::size_t W, Rng& rng) {
  if (m0 < 1) throw ConfigError("initialize: m0 must be >= 1");
  const std::size_t m = static_cast<std::size_t>(m0);
  std::vector<T> v(m * H * W);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < H * W; ++p) {
      T z = static_cast<T>((static_cast<double>(j) + rng.uniform()) / m0);
      // float rounding may land on the upper edge
      if (z >= static_cast<T>(static_cast<double>(j + 1) / m0)) z = std::nextafter(z, T(0));
      v[j * H * W + p] = z;
    }
  return Tensor<T>({m, H, W}, std::move(v));
}

// Reference view first, then its best-scored sources.
template <typename T>
struct ViewSet {
  Tensor<T> images;  // [N, 3, H, W]
  std::vector<Camera> cameras;
};

template <typename T>
ViewSet<T> select_views(const SceneData& data, std::size_t ref, std::size_t n_views) {
  if (ref >= data.views.size()) throw UsageError("select_views: reference index out of range");
  if (n_views < 2) throw ConfigError("select_views: need at least 2 views");
  std::vector<std::size_t> ids{ref};
  if (ref < data.pairs.size())
    for (const auto& [v, score] : data.pairs[ref]) {
      if (ids.size() == n_views) break;
      if (v >= 0 && static_cast<std::size_t>(v) < data.views.size()) ids.push_back(static_cast<std::size_t>(v));
    }
  if (ids.size() < n_views)
    throw ConfigError("select_views: view " + std::to_string(ref) + " has only " + std::to_string(ids.size() - 1) +
                      " source views, need " + std::to_string(n_views - 1));
  ViewSet<T> vs;
  std::vector<Tensor<T>> imgs;
  for (auto i : ids) {
    const Array& im = data.views[i].image;
    imgs.push_back(Tensor<T>({1, 3, im.dim(1), im.dim(2)}, std::vector<T>(im.data().begin(), im.data().end())));
    vs.cameras.push_back(data.views[i].camera);
  }
  vs.images = concat(imgs, 0);
  return vs;
}

struct PipelineOptions {
  bool learned_flow = true;          // false: fixed template offsets at every scale
  bool uncertainty_perturb = true;   // false: same-span uniform candidates
  bool training = false;
};

template <typename T>
struct ScaleOutput {
  Tensor<T> mu;              // [H_l, W_l], z
  MixtureMaps<T> mixture;
  Tensor<T> expected_sigma;  // [H_l, W_l], y units
  Tensor<T> candidates;      // evaluated candidates [m, H_l, W_l]
  Tensor<T> flow;            // [2M, H_l, W_l]
};

template <typename T>
struct PipelineOutput {
  std::vector<ScaleOutput<T>> scales;
  DepthDomain domain;
  Array depth() const {
    const auto& mu = scales.back().mu;
    std::vector<float> v(mu.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<float>(domain.denormalize(std::clamp(static_cast<double>(mu[i]), 0.0, 1.0)));
    return Array(mu.shape(), std::move(v));
  }
};

template <typename T>
Tensor<T> argmax_candidate(const Tensor<T>& weights, const Tensor<T>& candidates) {
  const std::size_t m = weights.dim(0), P = weights.size() / m;
  std::vector<T> best(P);
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (weights[j * P + p] > weights[arg * P + p]) arg = j;
    best[p] = candidates[arg * P + p];
  }
  return Tensor<T>({weights.dim(1), weights.dim(2)}, std::move(best));
}

template <typename T>
PipelineOutput<T> run_pipeline(Model<T>& model, const ViewSet<T>& views, Rng& rng, const PipelineOptions& opt = {}) {
  const SolverConfig& cfg = model.cfg;
  const std::size_t N = views.cameras.size();
  if (N < 2 || views.images.dim(0) != N) throw ConfigError("run_pipeline: need a reference and at least one source");
  for (const auto& c : views.cameras) c.validate();
  bool degenerate = true;
  for (std::size_t i = 1; i < N; ++i)
    degenerate = degenerate && (views.cameras[i].center() - views.cameras[0].center()).norm() < 1e-9;
  if (degenerate) std::cerr << "warning: zero baseline between reference and all source views\n";

  const FeaturePyramid<T> pyr = extract_pyramid(model.ps, views.images, opt.training);
  PipelineOutput<T> out;
  out.domain = DepthDomain::of(views.cameras[0], cfg.m0);

  std::vector<Tensor<T>> flows;
  if (opt.learned_flow) {
    std::vector<Tensor<T>> corr;
    for (std::size_t l = 0; l + 1 < kLevels; ++l) corr.push_back(build_correlation(view_features(pyr, l, 0), model.plane.radius));
    flows = decode_plane_flow(model.ps, model.plane, corr, opt.training);
    flows.push_back(extend_flow(flows.back(), model.plane.max_offset));
  } else {
    for (std::size_t l = 0; l < kLevels; ++l)
      flows.push_back(template_flow<T>(model.plane.offsets, pyr[l].dim(2), pyr[l].dim(3)));
  }

  Tensor<T> mu_prev, sigma_prev;
  for (std::size_t l = 0; l < kLevels; ++l) {
    const double s = 1.0 / static_cast<double>(std::size_t(1) << (kLevels - 1 - l));
    const Camera ref = views.cameras[0].scaled(s);
    std::vector<Camera> srcs;
    std::vector<Tensor<T>> src_feats;
    for (std::size_t i = 1; i < N; ++i) {
      srcs.push_back(views.cameras[i].scaled(s));
      src_feats.push_back(view_features(pyr, l, i));
    }
    const Tensor<T> ref_feat = view_features(pyr, l, 0);
    const std::size_t H = ref_feat.dim(1), W = ref_feat.dim(2);

    Tensor<T> base, best;
    if (l == 0) {
      base = initialize_candidates<T>(cfg.m0, H, W, rng);
      const auto pre = evaluate_candidates(model.ps, model.matcher, ref_feat, src_feats, ref, srcs, out.domain, base,
                                           opt.training);
      best = argmax_candidate(pre.weights, base);
    } else {
      const Tensor<T> mu_up = upsample_nearest2x(mu_prev.detach());
      const Tensor<T> sig_up = upsample_nearest2x(sigma_prev.detach());
      const double eps = cfg.eps[l - 1];
      base = opt.uncertainty_perturb ? perturb_candidates(mu_up, sig_up, eps, cfg.m2, cfg.m0)
                                     : uniform_candidates(mu_up, sig_up, eps, cfg.m2, cfg.m0);
      best = mu_up;
    }
    const Tensor<T> cand = sort_axis0(propagate(base, best, flows[l], cfg.m1));
    const auto r = evaluate_candidates(model.ps, model.matcher, ref_feat, src_feats, ref, srcs, out.domain, cand,
                                       opt.training);
    out.scales.push_back({r.mu, r.mixture, r.expected_sigma, cand, flows[l]});
    mu_prev = r.mu;
    sigma_prev = r.expected_sigma;
  }
  return out;
}

// ---- losses ----

template <typename T>
struct GroundTruth {
  std::vector<Tensor<T>> z;     // per scale, coarse to fine
  std::vector<Tensor<T>> mask;  // 1 where the depth is valid
};

// Nearest-neighbour downsampling of the full-resolution depth to every
// scale; pixel c of a level with factor f takes fine pixel c·f + (f−1)/2.
template <typename T>
GroundTruth<T> make_ground_truth(const Array& depth, const DepthDomain& dom) {
  GroundTruth<T> gt;
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  for (std::size_t l = 0; l < kLevels; ++l) {
    const std::size_t f = std::size_t(1) << (kLevels - 1 - l);
    const std::size_t h = H / f, w = W / f;
    std::vector<T> z(h * w), m(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d = depth[(y * f + (f - 1) / 2) * W + x * f + (f - 1) / 2];
        const bool ok = d > 0.0 && d >= dom.d_min * (1 - 1e-6) && d <= dom.d_max * (1 + 1e-6);
        m[y * w + x] = ok ? T(1) : T(0);
        z[y * w + x] = ok ? static_cast<T>(dom.normalize(d)) : T(0);
      }
    gt.z.push_back(Tensor<T>({h, w}, std::move(z)));
    gt.mask.push_back(Tensor<T>({h, w}, std::move(m)));
  }
  return gt;
}

template <typename T>
bool mask_empty(const Tensor<T>& mask) {
  for (T v : mask.data())
    if (v != T(0)) return false;
  return true;
}

template <typename T>
Tensor<T> loss_depth(const std::vector<ScaleOutput<T>>& scales, const GroundTruth<T>& gt) {
  if (scales.size() != gt.z.size()) throw DimensionError("loss_depth: scale count mismatch");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t l = 0; l < scales.size(); ++l) {
    if (mask_empty(gt.mask[l])) {
      std::cerr << "warning: empty ground-truth mask at scale " << l + 1 << "\n";
      continue;
    }
    total = total + masked_mean(abs(scales[l].mu - gt.z[l]), gt.mask[l]);
  }
  return total;
}

// −1/(N−1) Σ_scales Σ_views masked mean of log p(y_gt | ψ_i), y = m₀·z.
template <typename T>
Tensor<T> loss_nll(const std::vector<ScaleOutput<T>>& scales, const GroundTruth<T>& gt, const MatcherConfig& mc, int m0) {
  if (scales.size() != gt.z.size()) throw DimensionError("loss_nll: scale count mismatch");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  const T ym = static_cast<T>(m0);
  for (std::size_t l = 0; l < scales.size(); ++l) {
    if (mask_empty(gt.mask[l])) continue;
    const auto& sc = scales[l];
    const std::size_t V = sc.mixture.alpha.dim(0);
    const Tensor<T> nll = mixture_nll(sc.mu * ym, sc.mixture, gt.z[l] * ym, mc.sigma1);
    total = total + masked_mean(sum(nll, 0) * (T(1) / static_cast<T>(V)), gt.mask[l]);
  }
  return total;
}

struct LossReport {
  double depth = 0.0, nll = 0.0, total = 0.0;
};

template <typename T>
struct LossTerms {
  Tensor<T> depth, nll, total;
  LossReport report() const { return {static_cast<double>(depth.item()), static_cast<double>(nll.item()), static_cast<double>(total.item())}; }
};

template <typename T>
LossTerms<T> compute_losses(const Model<T>& model, const PipelineOutput<T>& out, const GroundTruth<T>& gt) {
  LossTerms<T> t;
  t.depth = loss_depth(out.scales, gt);
  t.nll = loss_nll(out.scales, gt, model.matcher, model.cfg.m0);
  t.total = t.depth * static_cast<T>(model.cfg.lambda1) + t.nll * static_cast<T>(model.cfg.lambda2);
  return t;
}

// ---- optimizer ----

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are kept in double per parameter.
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  template <typename T, typename LrFn>
  void step(ParamSet<T>& ps, LrFn&& lr_for) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (const auto& name : ps.names()) {
      Tensor<T>& p = ps.at(name);
      if (!p.has_grad()) continue;
      const std::vector<T> g = p.grad();
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      const double lr = lr_for(name);
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps));
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

inline double decayed_lr(double base, const std::vector<int>& decay_epochs, int epoch) {
  double lr = base;
  for (int e : decay_epochs)
    if (epoch >= e) lr *= 0.2;
  return lr;
}

inline bool is_matcher_param(const std::string& name) { return name.rfind("matcher.", 0) == 0; }

// ---- training ----

struct TrainSample {
  std::size_t scene = 0;
  std::size_t ref = 0;
};

struct TrainHooks {
  std::ostream* csv = nullptr;            // loss stream
  std::string checkpoint;                 // written atomically after every epoch
  std::ostream* log = nullptr;            // progress messages
};

struct TrainResult {
  std::vector<LossReport> losses;
  std::size_t steps = 0;
};

template <typename T>
void save_model(const Model<T>& model, const std::string& path) {
  save_checkpoint(path, model.ps.export_named());
}

template <typename T>
void load_model(Model<T>& model, const std::string& path) {
  model.ps.import_named(load_checkpoint(path), path);
}

inline std::string format_loss_line(std::size_t step, const LossReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g", step, r.depth, r.nll, r.total);
  return buf;
}

template <typename T>
TrainResult train(Model<T>& model, const std::vector<SceneData>& scenes, const TrainHooks& hooks = {}) {
  const SolverConfig& cfg = model.cfg;
  if (scenes.empty()) throw UsageError("train: no training scenes");
  std::vector<TrainSample> samples;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t r = 0; r < scenes[s].views.size(); ++r) samples.push_back({s, r});
  Adam adam;
  TrainResult res;
  if (hooks.csv) *hooks.csv << "step,L_depth,L_NLL,L_total\n";
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order(Rng::mix(cfg.seed, 0x7465706fULL + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[order.below(i)]);
    const double lr = decayed_lr(cfg.lr, cfg.decay_epochs, epoch);
    const double lr_m = decayed_lr(cfg.lr_matcher, cfg.decay_epochs, epoch);
    for (std::size_t b0 = 0; b0 < idx.size(); b0 += cfg.batch) {
      if (cfg.steps && res.steps >= cfg.steps) break;
      const std::size_t step = res.steps + 1;
      const std::size_t b1 = std::min(idx.size(), b0 + cfg.batch);
      const double w = 1.0 / static_cast<double>(b1 - b0);
      LossReport rep;
      model.ps.zero_grad();
      for (std::size_t b = b0; b < b1; ++b) {
        const TrainSample& s = samples[idx[b]];
        const ViewSet<T> vs = select_views<T>(scenes[s.scene], s.ref, cfg.views);
        const GroundTruth<T> gt =
            make_ground_truth<T>(scenes[s.scene].views[s.ref].depth, DepthDomain::of(vs.cameras[0], cfg.m0));
        Rng rng(Rng::mix(cfg.seed, 0x73746570ULL + step * 1000 + (b - b0)));
        try {
          PipelineOptions opt;
          opt.training = true;
          const auto out = run_pipeline(model, vs, rng, opt);
          const auto terms = compute_losses(model, out, gt);
          const LossReport r = terms.report();
          if (!std::isfinite(r.total)) throw NumericError("loss is not finite");
          rep.depth += w * r.depth;
          rep.nll += w * r.nll;
          rep.total += w * r.total;
          backward(terms.total * static_cast<T>(w));
        } catch (const NumericError& e) {
          throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
      }
      adam.step(model.ps, [&](const std::string& n) { return is_matcher_param(n) ? lr_m : lr; });
      res.losses.push_back(rep);
      res.steps = step;
      if (hooks.csv) *hooks.csv << format_loss_line(step, rep) << "\n" << std::flush;
    }
    if (!hooks.checkpoint.empty()) save_model(model, hooks.checkpoint);
    if (hooks.log) *hooks.log << "epoch " << epoch + 1 << " done, " << res.steps << " steps\n";
    if (cfg.steps && res.steps >= cfg.steps) break;
  }
  return res;
}

// Inference depth map for one reference view (eval mode).
template <typename T>
PipelineOutput<T> infer_view(Model<T>& model, const SceneData& scene, std::size_t ref, const PipelineOptions& opt = {}) {
  const ViewSet<T> vs = select_views<T>(scene, ref, model.cfg.views);
  Rng rng(Rng::mix(model.cfg.seed, 0x696e6665ULL + ref));
  PipelineOptions o = opt;
  o.training = false;
  return run_pipeline(model, vs, rng, o);
}

}  // namespace dspm
