#pragma once

#include <atomic>
#include <functional>
#include <optional>
#include <thread>

#include "metaseg/segmodel.hpp"
#include "metaseg/taskset.hpp"

namespace metaseg {

// ---- learning-rate set ----

template <class S>
struct LambdaLayer {
  Tensor<S> w;  // [neurons] weight-block rate per neuron
  Tensor<S> b;  // [neurons] bias rate per neuron
};

template <class S>
struct LambdaSet {
  std::vector<LambdaLayer<S>> layers;

  template <class T>
  LambdaSet<T> cast() const {
    LambdaSet<T> out;
    out.layers.reserve(layers.size());
    for (const auto& l : layers)
      out.layers.push_back({l.w.template cast<T>(), l.b.template cast<T>()});
    return out;
  }
};

template <class S>
LambdaSet<S> make_lambda(const ModelParams<S>& params, double init) {
  LambdaSet<S> ls;
  ls.layers.reserve(params.layers.size());
  for (const auto& l : params.layers)
    ls.layers.push_back({Tensor<S>::full({l.neurons()}, static_cast<S>(init)),
                         Tensor<S>::full({l.neurons()}, static_cast<S>(init))});
  return ls;
}

template <class S>
void require_isomorphic(const ModelParams<S>& params, const LambdaSet<S>& lambda) {
  require<StructureError>(params.layers.size() == lambda.layers.size(),
                          "lambda/theta layer count mismatch");
  for (size_t i = 0; i < params.layers.size(); ++i)
    require<StructureError>(lambda.layers[i].w.numel() == params.layers[i].neurons() &&
                                lambda.layers[i].b.numel() == params.layers[i].neurons(),
                            "lambda/theta neuron count mismatch");
}

/// theta_g: trainable initialization plus one (weight, bias) learning-rate
/// pair per neuron.
template <class S>
struct MetaParams {
  ModelParams<S> theta0;
  LambdaSet<S> lambda;

  template <class T>
  MetaParams<T> cast() const {
    return {theta0.template cast<T>(), lambda.template cast<T>()};
  }
};

template <class S>
MetaParams<S> make_meta(ModelParams<S> theta0, double lambda_init) {
  LambdaSet<S> l = make_lambda(theta0, lambda_init);
  return {std::move(theta0), std::move(l)};
}

// ---- gradients in parameter shape ----

/// Per-layer gradient tensors, shaped exactly like the parameters.
template <class S>
using ModelGrads = ModelParams<S>;

template <class S>
ModelGrads<S> extract_grads(const Gradients<S>& grads, const BoundModel<S>& bound,
                            const ModelParams<S>& like) {
  ModelGrads<S> out;
  out.arch = like.arch;
  out.layers.reserve(like.layers.size());
  for (size_t i = 0; i < like.layers.size(); ++i)
    out.layers.push_back(
        {like.layers[i].spec, grads.at(bound.layers[i].w), grads.at(bound.layers[i].b)});
  return out;
}

// ---- inner loop ----

/// theta' = theta - lambda (.) grads, broadcasting each neuron's pair over
/// its weight block and bias. Inputs are untouched.
template <class S>
ModelParams<S> sgd_step(const ModelParams<S>& params, const ModelGrads<S>& grads,
                        const LambdaSet<S>& lambda) {
  require<StructureError>(params.layers.size() == grads.layers.size(),
                          "sgd_step: grads/theta layer count mismatch");
  require_isomorphic(params, lambda);
  ModelParams<S> out;
  out.arch = params.arch;
  out.layers.reserve(params.layers.size());
  for (size_t li = 0; li < params.layers.size(); ++li) {
    const auto& p = params.layers[li];
    const auto& g = grads.layers[li];
    require<StructureError>(p.w.numel() == g.w.numel() && p.b.numel() == g.b.numel(),
                            "sgd_step: grads/theta shape mismatch");
    require<NumericError>(g.w.all_finite() && g.b.all_finite(),
                          "sgd_step: non-finite gradient");
    const auto& lam = lambda.layers[li];
    LayerParams<S> n;
    n.spec = p.spec;
    n.w = Tensor<S>(p.w.shape);
    n.b = Tensor<S>(p.b.shape);
    const Eigen::Index per = neuron_weight_size(p.spec);
    for (int j = 0; j < p.neurons(); ++j) {
      n.w.data.segment(j * per, per) =
          p.w.data.segment(j * per, per) - lam.w.data[j] * g.w.data.segment(j * per, per);
      n.b.data[j] = p.b.data[j] - lam.b.data[j] * g.b.data[j];
    }
    out.layers.push_back(std::move(n));
  }
  return out;
}

/// Builds the scalar loss for one inner iteration on bound parameters.
template <class S>
using InnerObjective = std::function<Var<S>(Graph<S>&, const BoundModel<S>&, int iter)>;

/// Inner-loop record: detached gradient snapshots and per-step losses, with
/// the endpoint parameters.
template <class S>
struct Trajectory {
  ModelParams<S> theta0;
  std::vector<ModelGrads<S>> grad_steps;
  std::vector<double> train_losses;
  ModelParams<S> theta_final;

  int length() const { return static_cast<int>(grad_steps.size()); }
};

/// T full-batch SGD steps of `objective` from meta.theta0 with meta.lambda.
/// A non-finite loss or gradient aborts with the failing step index.
template <class S>
Trajectory<S> fine_tune_objective(const MetaParams<S>& meta, const InnerObjective<S>& objective,
                                  int T) {
  require<ConfigError>(T >= 1, "fine_tune: T must be >= 1");
  require_isomorphic(meta.theta0, meta.lambda);
  Trajectory<S> traj;
  traj.theta0 = meta.theta0;
  ModelParams<S> cur = meta.theta0;
  for (int t = 0; t < T; ++t) {
    try {
      Graph<S> g;
      BoundModel<S> bound = bind_params(g, cur, true);
      Var<S> loss = objective(g, bound, t);
      Gradients<S> grads = g.backward(loss);
      traj.grad_steps.push_back(extract_grads(grads, bound, cur));
      traj.train_losses.push_back(static_cast<double>(loss.value().data[0]));
      cur = sgd_step(cur, traj.grad_steps.back(), meta.lambda);
    } catch (const NumericError& e) {
      throw NumericError("fine_tune: step " + std::to_string(t) + ": " + e.what());
    }
  }
  traj.theta_final = std::move(cur);
  return traj;
}

// ---- segmentation objective ----

/// Box priors used when training the box head on a ground-truth sample.
struct PriorPolicy {
  bool include_full_frame = true;
  bool include_gt = true;
  int n_jitter = 2;
  double sigma = 0.10;  // relative translation/scale jitter of the gt box
};

template <class S>
Var<S> seg_sample_loss(Graph<S>& g, const BoundModel<S>& bm, const Image& img, const Mask& mask,
                       const LossOptions& opt, const PriorPolicy& pp, uint64_t jitter_seed) {
  require<StructureError>(mask.area() > 0, "seg objective: empty ground truth");
  const int W = img.w, H = img.h;
  const Box gt = tight_box(mask);
  Features<S> feats = backbone_forward(bm, g.constant(image_to_tensor<S>(img)));

  std::vector<Box> priors;
  if (pp.include_full_frame) priors.push_back(full_frame_box(W, H));
  if (pp.include_gt) priors.push_back(gt);
  Rng rng(jitter_seed);
  for (int i = 0; i < pp.n_jitter; ++i) {
    Box b(gt.cx + rng.normal(0, pp.sigma * gt.w), gt.cy + rng.normal(0, pp.sigma * gt.h),
          gt.w * std::exp(rng.normal(0, pp.sigma)), gt.h * std::exp(rng.normal(0, pp.sigma)));
    priors.push_back(clip_box(b, W, H, 1.0));
  }
  require<ConfigError>(!priors.empty(), "seg objective: prior policy yields no priors");

  SegPrediction<S> pred;
  SegTarget tgt;
  for (const Box& p : priors) {
    pred.box_deltas.push_back(box_head_forward(bm, feats, p));
    tgt.box_targets.push_back(encode_box_delta(gt, p));
  }
  pred.mask_probs = mask_head_forward(bm, feats, gt);
  tgt.mask_local = crop_mask_nearest(mask, gt, bm.arch.mask_window);
  return seg_loss(pred, tgt, opt).value;
}

/// Full-batch segmentation loss over d_train; when `aug` is set every
/// iteration re-augments each sample (seeded by (seed, iter, sample)).
template <class S>
InnerObjective<S> seg_objective(std::vector<Sample> d_train, LossOptions opt = {},
                                std::optional<AugConfig> aug = std::nullopt, uint64_t seed = 0,
                                PriorPolicy priors = {}) {
  require<ConfigError>(!d_train.empty(), "seg objective: empty train set");
  return [d_train = std::move(d_train), opt, aug, seed, priors](
             Graph<S>& g, const BoundModel<S>& bm, int iter) -> Var<S> {
    Var<S> total;
    int used = 0;
    for (size_t i = 0; i < d_train.size(); ++i) {
      const Sample& s = d_train[i];
      Var<S> term;
      const uint64_t jseed = derive_seed(seed, 0x9e3779b9u, static_cast<uint64_t>(iter), i);
      if (aug) {
        auto [img, mask] = augment(*s.frame, s.mask, *aug,
                                   derive_seed(seed, static_cast<uint64_t>(iter), i));
        if (mask.area() == 0) continue;
        term = seg_sample_loss(g, bm, img, mask, opt, priors, jseed);
      } else {
        if (s.mask.area() == 0) continue;
        term = seg_sample_loss(g, bm, *s.frame, s.mask, opt, priors, jseed);
      }
      total = used == 0 ? term : add(total, term);
      ++used;
    }
    require<StructureError>(used > 0, "seg objective: no usable samples");
    return used > 1 ? scale(total, S(1) / static_cast<S>(used)) : total;
  };
}

/// One-shot fine-tuning on ground-truth samples (the spec-shaped entry).
template <class S>
Trajectory<S> fine_tune(const MetaParams<S>& meta, const std::vector<Sample>& d_train, int T,
                        const std::optional<AugConfig>& aug, uint64_t seed,
                        const LossOptions& opt = {}, const PriorPolicy& priors = {}) {
  return fine_tune_objective(meta, seg_objective<S>(d_train, opt, aug, seed, priors), T);
}

// ---- hypergradients ----

template <class S>
struct MetaGrads {
  ModelGrads<S> d_theta0;
  LambdaSet<S> d_lambda;
};

/// First-order hypergradients: d_theta0 = test gradient (identity
/// transport); per neuron j, d_lambda_j = sum_p test_grad_p * (-sum_t g_p^t)
/// over the neuron's weight block (bias analog).
template <class S>
MetaGrads<S> meta_gradients(const Trajectory<S>& traj, const ModelGrads<S>& test_grads) {
  require<StructureError>(traj.length() >= 1, "meta_gradients: empty trajectory");
  require<StructureError>(test_grads.layers.size() == traj.theta0.layers.size(),
                          "meta_gradients: test grads/theta layer count mismatch");
  MetaGrads<S> out;
  out.d_theta0 = test_grads;
  out.d_lambda.layers.reserve(test_grads.layers.size());
  for (size_t li = 0; li < test_grads.layers.size(); ++li) {
    const auto& spec = traj.theta0.layers[li].spec;
    require<StructureError>(
        test_grads.layers[li].w.numel() == traj.theta0.layers[li].w.numel() &&
            test_grads.layers[li].b.numel() == traj.theta0.layers[li].b.numel(),
        "meta_gradients: test grads shape mismatch");
    const int neurons = spec.out_ch;
    const Eigen::Index per = neuron_weight_size(spec);
    Tensor<S> sum_w(traj.theta0.layers[li].w.shape);
    Tensor<S> sum_b(traj.theta0.layers[li].b.shape);
    sum_w.data.setZero();
    sum_b.data.setZero();
    for (const auto& g : traj.grad_steps) {
      sum_w.data += g.layers[li].w.data;
      sum_b.data += g.layers[li].b.data;
    }
    LambdaLayer<S> dl{Tensor<S>({neurons}), Tensor<S>({neurons})};
    const auto& tw = test_grads.layers[li].w.data;
    const auto& tb = test_grads.layers[li].b.data;
    for (int j = 0; j < neurons; ++j) {
      dl.w.data[j] = -(tw.segment(j * per, per) * sum_w.data.segment(j * per, per)).sum();
      dl.b.data[j] = -tb[j] * sum_b.data[j];
    }
    out.d_lambda.layers.push_back(std::move(dl));
  }
  return out;
}

/// Central finite differences of L_test(theta^T(theta0, lambda)) w.r.t.
/// every theta0 coordinate and every lambda entry. Tiny models only.
template <class S>
MetaGrads<S> fd_hypergrad(const MetaParams<S>& meta, const InnerObjective<S>& train_obj,
                          const InnerObjective<S>& test_obj, int T, double eps) {
  require<ConfigError>(meta.theta0.scalar_count() <= 200, "fd_hypergrad: model too large");
  require<ConfigError>(eps >= 1e-6 && eps <= 1e-3, "fd_hypergrad: eps out of range");

  auto value = [&](const MetaParams<S>& m) {
    Trajectory<S> traj = fine_tune_objective(m, train_obj, T);
    Graph<S> g;
    g.set_grad_enabled(false);
    BoundModel<S> bound = bind_params(g, traj.theta_final, false);
    return static_cast<double>(test_obj(g, bound, 0).value().data[0]);
  };

  MetaGrads<S> out;
  out.d_theta0.arch = meta.theta0.arch;
  MetaParams<S> probe = meta;
  auto fd_at = [&](S& slot) {
    const S saved = slot;
    slot = saved + static_cast<S>(eps);
    const double up = value(probe);
    slot = saved - static_cast<S>(eps);
    const double dn = value(probe);
    slot = saved;
    return static_cast<S>((up - dn) / (2 * eps));
  };
  for (size_t li = 0; li < meta.theta0.layers.size(); ++li) {
    auto& pl = probe.theta0.layers[li];
    LayerParams<S> gl;
    gl.spec = pl.spec;
    gl.w = Tensor<S>(pl.w.shape);
    gl.b = Tensor<S>(pl.b.shape);
    for (Eigen::Index i = 0; i < pl.w.numel(); ++i) gl.w.data[i] = fd_at(pl.w.data[i]);
    for (Eigen::Index i = 0; i < pl.b.numel(); ++i) gl.b.data[i] = fd_at(pl.b.data[i]);
    out.d_theta0.layers.push_back(std::move(gl));

    auto& ll = probe.lambda.layers[li];
    LambdaLayer<S> dl{Tensor<S>(ll.w.shape), Tensor<S>(ll.b.shape)};
    for (Eigen::Index j = 0; j < ll.w.numel(); ++j) dl.w.data[j] = fd_at(ll.w.data[j]);
    for (Eigen::Index j = 0; j < ll.b.numel(); ++j) dl.b.data[j] = fd_at(ll.b.data[j]);
    out.d_lambda.layers.push_back(std::move(dl));
  }
  return out;
}

// ---- outer optimizer ----

// beta2 = 0.99 keeps the variance-rectification warm-up short enough for
// few-hundred-step outer runs (0.999 still sits near half throttle at t=500)
struct RAdamConfig {
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
};

struct RAdamState {
  int64_t t = 0;
  Eigen::VectorXd m, v;
};

/// Rectified Adam step; falls back to bias-corrected momentum SGD while the
/// variance rectification term is undefined (rho_t <= 4).
inline void radam_step(RAdamState& st, Eigen::VectorXd& x, const Eigen::VectorXd& g, double lr,
                       const RAdamConfig& cfg = {}) {
  require<SizeError>(x.size() == g.size(), "radam: size mismatch");
  require<NumericError>(g.allFinite(), "radam: non-finite gradient");
  if (st.t == 0) {
    st.m = Eigen::VectorXd::Zero(x.size());
    st.v = Eigen::VectorXd::Zero(x.size());
  }
  st.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  st.m = b1 * st.m + (1 - b1) * g;
  st.v = b2 * st.v + (1 - b2) * g.cwiseProduct(g);
  const double b1t = std::pow(b1, static_cast<double>(st.t));
  const double b2t = std::pow(b2, static_cast<double>(st.t));
  const Eigen::VectorXd mhat = st.m / (1 - b1t);
  const double rho_inf = 2.0 / (1 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * static_cast<double>(st.t) * b2t / (1 - b2t);
  if (rho_t > 4.0) {
    const double r = std::sqrt(((rho_t - 4) * (rho_t - 2) * rho_inf) /
                               ((rho_inf - 4) * (rho_inf - 2) * rho_t));
    const Eigen::VectorXd vhat = (st.v / (1 - b2t)).cwiseSqrt();
    x -= lr * r * mhat.cwiseQuotient(vhat + Eigen::VectorXd::Constant(x.size(), cfg.eps));
  } else {
    x -= lr * mhat;
  }
}

enum class LambdaMode { per_neuron, global };

/// Flat meta-parameter order: all layer weights/biases, then lambda — per
/// neuron pairs, or a single shared scalar in global mode.
template <class S>
Eigen::VectorXd flatten_meta(const MetaParams<S>& meta, LambdaMode mode) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(meta.theta0.scalar_count()) + 64);
  for (const auto& l : meta.theta0.layers) {
    for (Eigen::Index i = 0; i < l.w.numel(); ++i) out.push_back(static_cast<double>(l.w.data[i]));
    for (Eigen::Index i = 0; i < l.b.numel(); ++i) out.push_back(static_cast<double>(l.b.data[i]));
  }
  if (mode == LambdaMode::per_neuron) {
    for (const auto& l : meta.lambda.layers) {
      for (Eigen::Index i = 0; i < l.w.numel(); ++i)
        out.push_back(static_cast<double>(l.w.data[i]));
      for (Eigen::Index i = 0; i < l.b.numel(); ++i)
        out.push_back(static_cast<double>(l.b.data[i]));
    }
  } else {
    out.push_back(static_cast<double>(meta.lambda.layers[0].w.data[0]));
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

template <class S>
void unflatten_meta(const Eigen::VectorXd& flat, LambdaMode mode, MetaParams<S>& meta) {
  Eigen::Index k = 0;
  for (auto& l : meta.theta0.layers) {
    for (Eigen::Index i = 0; i < l.w.numel(); ++i) l.w.data[i] = static_cast<S>(flat[k++]);
    for (Eigen::Index i = 0; i < l.b.numel(); ++i) l.b.data[i] = static_cast<S>(flat[k++]);
  }
  if (mode == LambdaMode::per_neuron) {
    for (auto& l : meta.lambda.layers) {
      for (Eigen::Index i = 0; i < l.w.numel(); ++i) l.w.data[i] = static_cast<S>(flat[k++]);
      for (Eigen::Index i = 0; i < l.b.numel(); ++i) l.b.data[i] = static_cast<S>(flat[k++]);
    }
  } else {
    const S lam = static_cast<S>(flat[k++]);
    for (auto& l : meta.lambda.layers) {
      l.w.data.setConstant(lam);
      l.b.data.setConstant(lam);
    }
  }
  require<StructureError>(k == flat.size(), "unflatten_meta: size mismatch");
}

template <class S>
Eigen::VectorXd flatten_grads(const MetaGrads<S>& g, LambdaMode mode) {
  MetaParams<S> view{g.d_theta0, g.d_lambda};
  if (mode == LambdaMode::global) {
    // tied parameter: the global gradient is the sum over all entries
    double acc = 0;
    for (const auto& l : g.d_lambda.layers) {
      acc += static_cast<double>(l.w.data.sum());
      acc += static_cast<double>(l.b.data.sum());
    }
    Eigen::VectorXd flat = flatten_meta(view, mode);
    flat[flat.size() - 1] = acc;
    return flat;
  }
  return flatten_meta(view, mode);
}

/// One RAdam update of theta_g followed by the lambda >= 0 clamp. Returns
/// the fraction of lambda entries that were negative before the clamp.
template <class S>
double outer_step(RAdamState& st, MetaParams<S>& meta, const MetaGrads<S>& grads, double beta,
                  LambdaMode mode = LambdaMode::per_neuron, const RAdamConfig& rcfg = {}) {
  Eigen::VectorXd x = flatten_meta(meta, mode);
  Eigen::VectorXd g = flatten_grads(grads, mode);
  radam_step(st, x, g, beta, rcfg);
  unflatten_meta(x, mode, meta);
  Eigen::Index neg = 0, total = 0;
  for (auto& l : meta.lambda.layers) {
    neg += (l.w.data < S(0)).count() + (l.b.data < S(0)).count();
    total += l.w.numel() + l.b.numel();
    l.w.data = l.w.data.max(S(0));
    l.b.data = l.b.data.max(S(0));
  }
  return total > 0 ? static_cast<double>(neg) / static_cast<double>(total) : 0.0;
}

// ---- meta-training loop ----

struct TrainerConfig {
  ArchConfig arch;
  int T = 5;
  int batch = 4;
  double beta = 1e-4;
  int outer_steps = 300;
  double lambda_init = 1e-3;
  uint64_t seed = 0;
  AugConfig aug;
  int meta_test_k = 3;
  bool average_batch = false;  // Algorithm-1 default is a sum
  LambdaMode lambda_mode = LambdaMode::per_neuron;
  LossOptions loss;
  PriorPolicy priors;
  RAdamConfig radam;
  int workers = 1;
  double skip_budget = 0.01;  // fraction of tasks allowed to fail numerically
  bool freeze_lambda = false;
  bool freeze_theta = false;

  void validate() const {
    arch.validate();
    require<ConfigError>(T >= 1, "trainer: T must be >= 1");
    require<ConfigError>(batch >= 1, "trainer: batch must be >= 1");
    require<ConfigError>(beta > 0, "trainer: beta must be positive");
    require<ConfigError>(outer_steps >= 0, "trainer: negative outer_steps");
    require<ConfigError>(lambda_init >= 0, "trainer: negative lambda_init");
    require<ConfigError>(meta_test_k >= 1, "trainer: meta_test_k must be >= 1");
    require<ConfigError>(workers >= 1, "trainer: workers must be >= 1");
    require<ConfigError>(skip_budget >= 0 && skip_budget <= 1, "trainer: bad skip budget");
  }
};

struct MetaStepLog {
  int step = 0;
  double mean_bptt = 0;
  double mean_test_iou = 0;
  double lambda_mean = 0, lambda_min = 0, lambda_max = 0;
  double lambda_neg_frac = 0;  // fraction below zero before the clamp
  int skipped = 0;
};

template <class S>
struct MetaTrainResult {
  MetaParams<S> meta;
  std::vector<MetaStepLog> logs;
  int skipped_tasks = 0;
};

namespace detail {

template <class S>
struct TaskResult {
  bool ok = false;
  MetaGrads<S> grads;
  double bptt = 0;
  double test_iou = 0;
};

/// Fine-tunes on one meta task and returns its hypergradients. The test
/// gradient is evaluated once at theta^T over the task's test samples.
template <class S>
TaskResult<S> run_meta_task(const MetaParams<S>& meta, const Task& mt, const TrainerConfig& cfg) {
  TaskResult<S> out;
  try {
    Trajectory<S> traj = fine_tune_objective(
        meta, seg_objective<S>({mt.train}, cfg.loss, std::nullopt, 0, cfg.priors), cfg.T);

    Graph<S> g;
    BoundModel<S> bound = bind_params(g, traj.theta_final, true);
    const InnerObjective<S> test_obj =
        seg_objective<S>(mt.test, cfg.loss, std::nullopt, 0, cfg.priors);
    Var<S> test_loss = test_obj(g, bound, 0);
    Gradients<S> grads = g.backward(test_loss);
    out.bptt = static_cast<double>(test_loss.value().data[0]);
    out.grads = meta_gradients(traj, extract_grads(grads, bound, traj.theta_final));

    double iou = 0;
    int counted = 0;
    for (const Sample& s : mt.test) {
      Prediction<S> pred = forward(traj.theta_final, image_to_tensor<S>(*s.frame),
                                   {full_frame_box(s.frame->w, s.frame->h)});
      iou += mask_iou(mask_from_prob(pred.mask_full), s.mask);
      ++counted;
    }
    out.test_iou = counted > 0 ? iou / counted : 0;
    out.ok = true;
  } catch (const NumericError&) {
    out.ok = false;
  }
  return out;
}

template <class S>
void accumulate(MetaGrads<S>& acc, const MetaGrads<S>& g, bool& first) {
  if (first) {
    acc = g;
    first = false;
    return;
  }
  for (size_t li = 0; li < acc.d_theta0.layers.size(); ++li) {
    acc.d_theta0.layers[li].w.data += g.d_theta0.layers[li].w.data;
    acc.d_theta0.layers[li].b.data += g.d_theta0.layers[li].b.data;
    acc.d_lambda.layers[li].w.data += g.d_lambda.layers[li].w.data;
    acc.d_lambda.layers[li].b.data += g.d_lambda.layers[li].b.data;
  }
}

template <class S>
void scale_grads(MetaGrads<S>& g, double f) {
  for (auto& l : g.d_theta0.layers) {
    l.w.data *= static_cast<S>(f);
    l.b.data *= static_cast<S>(f);
  }
  for (auto& l : g.d_lambda.layers) {
    l.w.data *= static_cast<S>(f);
    l.b.data *= static_cast<S>(f);
  }
}

template <class S>
void zero_grads_like(MetaGrads<S>& g, const MetaParams<S>& meta) {
  g.d_theta0 = meta.theta0;
  for (auto& l : g.d_theta0.layers) {
    l.w.data.setZero();
    l.b.data.setZero();
  }
  g.d_lambda = meta.lambda;
  for (auto& l : g.d_lambda.layers) {
    l.w.data.setZero();
    l.b.data.setZero();
  }
}

}  // namespace detail

/// Algorithm-1 meta-training: sample a task batch, build meta tasks,
/// fine-tune, accumulate first-order hypergradients in fixed task order,
/// RAdam-update theta_g, clamp lambda. Deterministic for any worker count.
template <class S>
MetaTrainResult<S> meta_train(const TaskSet& ts, const TrainerConfig& cfg,
                              std::optional<MetaParams<S>> warm_start = std::nullopt,
                              const std::function<void(const MetaStepLog&)>& on_step = {}) {
  cfg.validate();
  require<ConfigError>(!ts.tasks.empty(), "meta_train: empty task set");
  require<ConfigError>(static_cast<size_t>(cfg.batch) <= ts.tasks.size(),
                       "meta_train: batch larger than task set");

  MetaTrainResult<S> result;
  result.meta = warm_start ? std::move(*warm_start)
                           : make_meta(init_model<S>(cfg.arch, cfg.seed), cfg.lambda_init);
  require_isomorphic(result.meta.theta0, result.meta.lambda);

  RAdamState opt_state;
  const int64_t total_tasks = static_cast<int64_t>(cfg.outer_steps) * cfg.batch;
  const int64_t skip_allowed =
      std::max<int64_t>(1, static_cast<int64_t>(cfg.skip_budget * static_cast<double>(total_tasks)));

  for (int step = 0; step < cfg.outer_steps; ++step) {
    const std::vector<Task> batch =
        sample_batch(ts, cfg.batch, derive_seed(cfg.seed, 0xba7c4, static_cast<uint64_t>(step)));
    std::vector<Task> meta_tasks;
    meta_tasks.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
      meta_tasks.push_back(make_meta_task(
          batch[i], cfg.aug, derive_seed(cfg.seed, 0x7a5f, static_cast<uint64_t>(step), i),
          cfg.meta_test_k));

    std::vector<detail::TaskResult<S>> results(meta_tasks.size());
    if (cfg.workers <= 1) {
      for (size_t i = 0; i < meta_tasks.size(); ++i)
        results[i] = detail::run_meta_task(result.meta, meta_tasks[i], cfg);
    } else {
      std::vector<std::thread> pool;
      std::atomic<size_t> next{0};
      const int n_workers = std::min<int>(cfg.workers, static_cast<int>(meta_tasks.size()));
      for (int w = 0; w < n_workers; ++w)
        pool.emplace_back([&]() {
          for (size_t i = next.fetch_add(1); i < meta_tasks.size(); i = next.fetch_add(1))
            results[i] = detail::run_meta_task(result.meta, meta_tasks[i], cfg);
        });
      for (auto& th : pool) th.join();
    }

    MetaGrads<S> acc;
    bool first = true;
    MetaStepLog log;
    log.step = step;
    int ok_count = 0;
    for (const auto& r : results) {  // fixed task order
      if (!r.ok) {
        ++result.skipped_tasks;
        ++log.skipped;
        require<NumericError>(result.skipped_tasks <= skip_allowed,
                              "meta_train: numeric-failure budget exhausted");
        continue;
      }
      detail::accumulate(acc, r.grads, first);
      log.mean_bptt += r.bptt;
      log.mean_test_iou += r.test_iou;
      ++ok_count;
    }
    if (ok_count > 0) {
      log.mean_bptt /= ok_count;
      log.mean_test_iou /= ok_count;
      if (cfg.average_batch) detail::scale_grads(acc, 1.0 / ok_count);
      if (cfg.freeze_theta)
        for (auto& l : acc.d_theta0.layers) {
          l.w.data.setZero();
          l.b.data.setZero();
        }
      if (cfg.freeze_lambda)
        for (auto& l : acc.d_lambda.layers) {
          l.w.data.setZero();
          l.b.data.setZero();
        }

      double lam_sum = 0, lam_min = std::numeric_limits<double>::max(), lam_max = 0;
      Eigen::Index lam_n = 0;
      log.lambda_neg_frac =
          outer_step(opt_state, result.meta, acc, cfg.beta, cfg.lambda_mode, cfg.radam);
      for (const auto& l : result.meta.lambda.layers) {
        for (const Tensor<S>* t : {&l.w, &l.b}) {
          lam_sum += static_cast<double>(t->data.sum());
          lam_min = std::min(lam_min, static_cast<double>(t->data.minCoeff()));
          lam_max = std::max(lam_max, static_cast<double>(t->data.maxCoeff()));
          lam_n += t->data.size();
        }
      }
      log.lambda_mean = lam_sum / static_cast<double>(lam_n);
      log.lambda_min = lam_min;
      log.lambda_max = lam_max;
    }
    if (on_step) on_step(log);
    result.logs.push_back(log);
  }
  return result;
}

// ---- conventional pre-training baseline ----

struct ParentConfig {
  ArchConfig arch;
  int steps = 400;
  int batch = 4;
  double lr = 1e-3;
  uint64_t seed = 0;
  LossOptions loss;
  PriorPolicy priors;
  std::optional<AugConfig> aug;

  void validate() const {
    arch.validate();
    require<ConfigError>(steps >= 0 && batch >= 1 && lr > 0, "parent: bad config");
  }
};

/// Plain RAdam training over the pooled annotated samples of a task set —
/// the "conventionally pre-trained" baseline initialization.
template <class S>
ModelParams<S> parent_train(const TaskSet& ts, const ParentConfig& cfg) {
  cfg.validate();
  std::vector<const Sample*> pool;
  for (const Task& t : ts.tasks) {
    if (t.train.mask.area() > 0) pool.push_back(&t.train);
    for (const Sample& s : t.test)
      if (s.mask.area() > 0) pool.push_back(&s);
  }
  require<ConfigError>(!pool.empty(), "parent_train: no annotated samples");

  ModelParams<S> params = init_model<S>(cfg.arch, cfg.seed);
  RAdamState st;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, 0x9a7e17, static_cast<uint64_t>(step)));
    std::vector<Sample> batch;
    for (int i = 0; i < cfg.batch; ++i)
      batch.push_back(*pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);

    Graph<S> g;
    BoundModel<S> bound = bind_params(g, params, true);
    Var<S> loss = seg_objective<S>(batch, cfg.loss, cfg.aug,
                                   derive_seed(cfg.seed, 0xA06, static_cast<uint64_t>(step)),
                                   cfg.priors)(g, bound, step);
    ModelGrads<S> grads = extract_grads(g.backward(loss), bound, params);

    std::vector<double> flat;
    for (const auto& l : params.layers) {
      for (Eigen::Index i = 0; i < l.w.numel(); ++i) flat.push_back(static_cast<double>(l.w.data[i]));
      for (Eigen::Index i = 0; i < l.b.numel(); ++i) flat.push_back(static_cast<double>(l.b.data[i]));
    }
    Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
    std::vector<double> gflat;
    for (const auto& l : grads.layers) {
      for (Eigen::Index i = 0; i < l.w.numel(); ++i) gflat.push_back(static_cast<double>(l.w.data[i]));
      for (Eigen::Index i = 0; i < l.b.numel(); ++i) gflat.push_back(static_cast<double>(l.b.data[i]));
    }
    Eigen::VectorXd gv = Eigen::Map<Eigen::VectorXd>(gflat.data(), static_cast<Eigen::Index>(gflat.size()));
    radam_step(st, x, gv, cfg.lr);
    Eigen::Index k = 0;
    for (auto& l : params.layers) {
      for (Eigen::Index i = 0; i < l.w.numel(); ++i) l.w.data[i] = static_cast<S>(x[k++]);
      for (Eigen::Index i = 0; i < l.b.numel(); ++i) l.b.data[i] = static_cast<S>(x[k++]);
    }
  }
  return params;
}

// ---- checkpoint ----

void save_meta(const MetaParams<float>& meta, const std::string& path);
MetaParams<float> load_meta(const std::string& path);

}  // namespace metaseg
