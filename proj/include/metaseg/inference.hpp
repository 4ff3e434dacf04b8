#pragma once

#include <chrono>
#include <deque>
#include <map>

#include "metaseg/metaopt.hpp"

namespace metaseg {

// ---- configuration ----

struct JitterConfig {
  int n_priors = 8;
  double sigma_trans = 0.05;  // of the box dimensions
  double sigma_scale = 0.05;  // log-scale

  void validate() const {
    require<ConfigError>(n_priors >= 0, "jitter: negative n_priors");
    require<ConfigError>(sigma_trans >= 0 && sigma_scale >= 0, "jitter: negative sigma");
  }
};

struct InferenceConfig {
  int T = 5;                 // initial fine-tune iterations
  bool use_ona = true;       // online adaptation
  int interval_ona = 5;      // frames between adaptation rounds
  int steps_ona = 10;        // iterations per adaptation round
  bool use_box_propagation = true;
  JitterConfig jitter;
  double merge_threshold = 0.5;
  bool spatial_aug = true;   // augment the initial fine-tune (never adaptation)
  int ona_accumulate = 1;    // how many recent predictions the online set keeps
  LossOptions loss;
  PriorPolicy priors;        // fine-tune-side box-prior policy
  bool record_debug = false;

  void validate() const {
    require<ConfigError>(T >= 1, "inference: T must be >= 1");
    require<ConfigError>(interval_ona >= 1, "inference: I_OnA must be >= 1");
    require<ConfigError>(steps_ona >= 0, "inference: negative T_OnA");
    require<ConfigError>(merge_threshold >= 0 && merge_threshold <= 1,
                         "inference: merge threshold out of range");
    require<ConfigError>(ona_accumulate >= 1, "inference: ona_accumulate must be >= 1");
    jitter.validate();
  }

  AugConfig spatial_aug_config() const {
    AugConfig a;
    a.spatial_only = true;
    return a;
  }
};

// ---- time injection ----

struct Clock {
  virtual ~Clock() = default;
  virtual double now() const = 0;  // seconds
};

struct SteadyClock final : Clock {
  double now() const override {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }
};

// ---- operations ----

/// prev plus n_priors jittered copies (Gaussian center shift sized by the
/// box, log-normal scale), all clipped to the frame.
inline std::vector<Box> propagate_box(const Box& prev, const JitterConfig& jitter, int frame_w,
                                      int frame_h, uint64_t seed) {
  jitter.validate();
  require<BoxError>(prev.w > 0 && prev.h > 0, "propagate_box: degenerate previous box");
  std::vector<Box> out;
  out.reserve(static_cast<size_t>(jitter.n_priors) + 1);
  out.push_back(clip_box(prev, frame_w, frame_h, 1.0));
  Rng rng(seed);
  for (int i = 0; i < jitter.n_priors; ++i) {
    Box b(prev.cx + rng.normal(0, jitter.sigma_trans * prev.w),
          prev.cy + rng.normal(0, jitter.sigma_trans * prev.h),
          prev.w * std::exp(rng.normal(0, jitter.sigma_scale)),
          prev.h * std::exp(rng.normal(0, jitter.sigma_scale)));
    out.push_back(clip_box(b, frame_w, frame_h, 1.0));
  }
  return out;
}

/// T_OnA inner steps on {first-frame gt} + recent predictions, always from a
/// fresh copy of theta_T (model reset). Numeric failure returns theta_T.
template <class S>
ModelParams<S> online_adapt(const ModelParams<S>& theta_T, const Sample& d0,
                            const std::vector<Sample>& preds, int steps, const LambdaSet<S>& lambda,
                            const LossOptions& loss = {}, const PriorPolicy& priors = {},
                            bool* numeric_failure = nullptr) {
  if (numeric_failure) *numeric_failure = false;
  require<ConfigError>(steps >= 0, "online_adapt: negative steps");
  if (steps == 0) return theta_T;
  std::vector<Sample> batch;
  batch.push_back(d0);
  for (const Sample& p : preds) {
    require<StructureError>(p.mask.area() > 0, "online_adapt: empty pseudo ground truth");
    batch.push_back(p);
  }
  MetaParams<S> meta{theta_T, lambda};
  try {
    // no augmentation during adaptation
    return fine_tune_objective(meta, seg_objective<S>(batch, loss, std::nullopt, 0, priors), steps)
        .theta_final;
  } catch (const NumericError&) {
    if (numeric_failure) *numeric_failure = true;
    return theta_T;
  }
}

/// Per pixel: background when max probability < threshold, else the argmax
/// object; exact ties go to the smallest id.
template <class S>
Mask merge_objects(const std::map<int, Tensor<S>>& prob_maps, double threshold) {
  require<ConfigError>(!prob_maps.empty(), "merge_objects: no probability maps");
  const Tensor<S>& first = prob_maps.begin()->second;
  require<ShapeError>(first.shape.size() == 2, "merge_objects: expected [H,W] maps");
  const int H = first.shape[0], W = first.shape[1];
  for (const auto& [id, t] : prob_maps) {
    require<ConfigError>(id >= 1 && id <= 255, "merge_objects: object id out of range");
    require<ShapeError>(t.shape == first.shape, "merge_objects: map shapes differ");
  }
  Mask out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double best = -1;
      int best_id = 0;
      for (const auto& [id, t] : prob_maps) {
        const double p = static_cast<double>(t.data[y * W + x]);
        if (p > best) {  // strict: earlier (smaller) id wins ties
          best = p;
          best_id = id;
        }
      }
      out.at(y, x) = best >= threshold ? static_cast<uint8_t>(best_id) : 0;
    }
  return out;
}

// ---- per-object pipeline ----

template <class S>
struct AdaptEvent {
  int frame = -1;
  std::vector<Sample> preds;      // pseudo ground truth used
  ModelParams<S> theta_after;     // record_debug only
};

enum class AdaptStatus : uint8_t { run, skipped, failed };

struct AdaptRecord {
  int frame = -1;
  AdaptStatus status = AdaptStatus::run;
};

inline const char* to_string(AdaptStatus s) {
  switch (s) {
    case AdaptStatus::run: return "run";
    case AdaptStatus::skipped: return "skipped";
    case AdaptStatus::failed: return "failed";
  }
  return "?";
}

template <class S>
struct ObjectResult {
  int object_id = 0;
  int start_frame = 0;
  std::vector<Tensor<S>> probs;  // [H,W] per frame; zero before start_frame
  std::vector<Box> boxes;        // chosen box per frame
  std::vector<bool> fallback;    // full-frame fallback flag per frame
  bool valid = true;             // false when a NumericError cut the run short
  int frames_done = 0;

  int fine_tune_iters = 0;
  int adapt_rounds = 0;
  int adapt_iters = 0;
  int adapt_skipped = 0;  // rounds skipped for lack of a usable prediction
  int adapt_failed = 0;   // rounds that fell back to theta_T on NumericError
  std::vector<AdaptRecord> adapt_log;  // every scheduled round, in frame order
  double model_seconds = 0;      // fine-tune + tracking + adaptation
  double fine_tune_seconds = 0;  // initial one-shot fine-tune only
  double adapt_seconds = 0;      // online adaptation rounds only

  double forward_seconds() const { return model_seconds - fine_tune_seconds - adapt_seconds; }

  // record_debug only
  ModelParams<S> theta_T;
  std::vector<AdaptEvent<S>> adapt_events;
};

namespace detail {

inline int first_annotated_frame(const Sequence& seq, int object_id) {
  for (size_t i = 0; i < seq.annotations.size(); ++i)
    if (seq.annotations[i].w > 0 && seq.annotations[i].equals_area(static_cast<uint8_t>(object_id)) > 0)
      return static_cast<int>(i);
  return -1;
}

}  // namespace detail

/// One-shot fine-tune on the object's first annotated frame, then track:
/// full-frame prior always, propagated priors when enabled, online
/// adaptation every interval_ona frames restarting from theta^T.
template <class S>
ObjectResult<S> run_object(const MetaParams<S>& meta, const Sequence& seq, int object_id,
                           const InferenceConfig& cfg, uint64_t seed,
                           const Clock* clock = nullptr) {
  cfg.validate();
  require<SequenceError>(!seq.frames.empty(), "run_object: empty sequence");
  const SteadyClock fallback_clock;
  const Clock& ck = clock ? *clock : fallback_clock;

  ObjectResult<S> out;
  out.object_id = object_id;
  const int n = static_cast<int>(seq.frames.size());
  const int W = seq.frames[0]->w, H = seq.frames[0]->h;
  const int start = detail::first_annotated_frame(seq, object_id);
  require<SequenceError>(start >= 0, "run_object: object has no annotated frame");
  out.start_frame = start;
  for (int i = 0; i < n; ++i) {
    out.probs.push_back(Tensor<S>::zeros({H, W}));
    out.boxes.push_back(full_frame_box(W, H));
    out.fallback.push_back(false);
  }

  Sample d0;
  d0.frame = seq.frames[static_cast<size_t>(start)];
  d0.mask = seq.annotations[static_cast<size_t>(start)].equals(static_cast<uint8_t>(object_id));
  d0.box = tight_box(d0.mask);
  d0.frame_index = start;

  const double t0 = ck.now();
  ModelParams<S> theta_T;
  try {
    const std::optional<AugConfig> aug =
        cfg.spatial_aug ? std::optional<AugConfig>(cfg.spatial_aug_config()) : std::nullopt;
    theta_T = fine_tune(meta, {d0}, cfg.T, aug, derive_seed(seed, 0xF7), cfg.loss, cfg.priors)
                  .theta_final;
  } catch (const NumericError&) {
    out.valid = false;
    out.model_seconds = out.fine_tune_seconds = ck.now() - t0;
    return out;
  }
  out.fine_tune_seconds = ck.now() - t0;
  out.fine_tune_iters = cfg.T;
  if (cfg.record_debug) out.theta_T = theta_T;

  ModelParams<S> theta_cur = theta_T;
  Box prev_box = d0.box;
  std::deque<Sample> recent;  // latest usable predictions, newest at the back

  for (int i = start; i < n; ++i) {
    if (cfg.use_ona && cfg.steps_ona > 0 && i > start && (i - start) % cfg.interval_ona == 0) {
      if (recent.empty()) {
        ++out.adapt_skipped;
        out.adapt_log.push_back({i, AdaptStatus::skipped});
      } else {
        bool failed = false;
        std::vector<Sample> preds(recent.begin(), recent.end());
        const double a0 = ck.now();
        theta_cur = online_adapt(theta_T, d0, preds, cfg.steps_ona, meta.lambda, cfg.loss,
                                 cfg.priors, &failed);
        out.adapt_seconds += ck.now() - a0;
        ++out.adapt_rounds;
        out.adapt_log.push_back({i, failed ? AdaptStatus::failed : AdaptStatus::run});
        if (failed) {
          ++out.adapt_failed;
        } else {
          out.adapt_iters += cfg.steps_ona;
        }
        if (cfg.record_debug) {
          AdaptEvent<S> ev;
          ev.frame = i;
          ev.preds = preds;
          ev.theta_after = theta_cur;
          out.adapt_events.push_back(std::move(ev));
        }
      }
    }

    std::vector<Box> priors;
    if (i == start) {
      priors.push_back(d0.box);  // first frame: the ground-truth box
    } else {
      priors.push_back(full_frame_box(W, H));
      if (cfg.use_box_propagation && cfg.jitter.n_priors > 0) {
        const std::vector<Box> prop = propagate_box(prev_box, cfg.jitter, W, H,
                                                    derive_seed(seed, 0xB0C5, static_cast<uint64_t>(i)));
        priors.insert(priors.end(), prop.begin(), prop.end());
      }
    }

    try {
      Prediction<S> pred =
          forward(theta_cur, image_to_tensor<S>(*seq.frames[static_cast<size_t>(i)]), priors);
      out.probs[static_cast<size_t>(i)] = pred.mask_full;
      out.boxes[static_cast<size_t>(i)] = pred.box;
      out.fallback[static_cast<size_t>(i)] = pred.full_frame_fallback;
      out.frames_done = i - start + 1;

      Mask m = mask_from_prob(pred.mask_full, 0.5);
      if (m.area() > 0) {
        if (!pred.full_frame_fallback) prev_box = pred.box;  // else keep the last valid box
        Sample latest;
        latest.frame = seq.frames[static_cast<size_t>(i)];
        latest.box = tight_box(m);
        latest.mask = std::move(m);
        latest.frame_index = i;
        recent.push_back(std::move(latest));
        while (static_cast<int>(recent.size()) > cfg.ona_accumulate) recent.pop_front();
      }
    } catch (const NumericError&) {
      out.valid = false;
      break;
    }
  }
  out.model_seconds = ck.now() - t0;
  return out;
}

// ---- whole-sequence pipeline ----

template <class S>
struct SequenceResult {
  std::string seq_id;
  std::map<int, ObjectResult<S>> objects;
  std::vector<Mask> labels;  // merged label map per frame
  double model_seconds = 0;
  double fine_tune_seconds = 0;
  double adapt_seconds = 0;
  bool valid = true;

  double forward_seconds() const { return model_seconds - fine_tune_seconds - adapt_seconds; }
  double fps(int frames) const {
    return model_seconds > 0 ? static_cast<double>(frames) / model_seconds : 0.0;
  }
};

template <class S>
SequenceResult<S> run_sequence(const MetaParams<S>& meta, const Sequence& seq,
                               const InferenceConfig& cfg, uint64_t seed,
                               const Clock* clock = nullptr) {
  cfg.validate();
  SequenceResult<S> out;
  out.seq_id = seq.id;
  const std::vector<int> ids = object_ids(seq);
  require<SequenceError>(!ids.empty(), "run_sequence: no annotated objects");

  for (int k : ids) {
    ObjectResult<S> r =
        run_object(meta, seq, k, cfg, derive_seed(seed, 0x0B7EC7, static_cast<uint64_t>(k)), clock);
    out.model_seconds += r.model_seconds;
    out.fine_tune_seconds += r.fine_tune_seconds;
    out.adapt_seconds += r.adapt_seconds;
    out.valid = out.valid && r.valid;
    out.objects.emplace(k, std::move(r));
  }

  const int n = static_cast<int>(seq.frames.size());
  const int W = seq.frames[0]->w, H = seq.frames[0]->h;
  for (int i = 0; i < n; ++i) {
    std::map<int, Tensor<S>> maps;
    for (const auto& [k, r] : out.objects)
      if (i >= r.start_frame && i < r.start_frame + r.frames_done) maps.emplace(k, r.probs[static_cast<size_t>(i)]);
    out.labels.push_back(maps.empty() ? Mask(H, W) : merge_objects(maps, cfg.merge_threshold));
  }
  return out;
}

}  // namespace metaseg
