#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "metaseg/mask.hpp"
#include "metaseg/png_io.hpp"

namespace metaseg {

/// One (frame, gt mask, gt box) triple. The box is the tight bound of the
/// mask; empty masks (fully occluded objects) carry the full frame instead.
struct Sample {
  std::shared_ptr<const Image> frame;
  Mask mask;
  Box box;
  int frame_index = -1;

  bool operator==(const Sample& o) const {
    return frame_index == o.frame_index && mask == o.mask && box.cx == o.box.cx &&
           box.cy == o.box.cy && box.w == o.box.w && box.h == o.box.h &&
           (frame == o.frame || (frame && o.frame && *frame == *o.frame));
  }
};

/// Per-object one-shot task: fine-tune on `train` (the object's first
/// annotated frame), evaluate on every later frame.
struct Task {
  std::string seq_id;
  int object_id = 0;
  Sample train;
  std::vector<Sample> test;

  bool operator==(const Task& o) const {
    return seq_id == o.seq_id && object_id == o.object_id && train == o.train &&
           test == o.test;
  }
};

struct TaskSet {
  std::vector<Task> tasks;
  std::string split = "train";
};

/// Video sequence with id-valued annotation rasters (0 = background).
struct Sequence {
  std::string id;
  std::vector<std::shared_ptr<const Image>> frames;
  std::vector<Mask> annotations;  // pixel value = object id
  double fps = 24.0;
};

inline Box sample_box(const Mask& m, int W, int H) {
  return m.area() > 0 ? tight_box(m) : full_frame_box(W, H);
}

/// Object ids present anywhere in a sequence, ascending.
inline std::vector<int> object_ids(const Sequence& seq) {
  std::vector<bool> seen(256, false);
  for (const Mask& a : seq.annotations)
    for (uint8_t v : a.v) seen[v] = true;
  std::vector<int> ids;
  for (int i = 1; i < 256; ++i)
    if (seen[static_cast<size_t>(i)]) ids.push_back(i);
  return ids;
}

/// One task per object: train on the first frame where the object appears,
/// test on all later frames (empty gt allowed there).
inline TaskSet tasks_from_sequences(const std::vector<Sequence>& seqs, std::string split) {
  TaskSet ts;
  ts.split = std::move(split);
  for (const Sequence& seq : seqs) {
    require<SequenceError>(seq.frames.size() == seq.annotations.size(),
                           "sequence: frame/annotation count mismatch");
    for (int id : object_ids(seq)) {
      int first = -1;
      for (size_t f = 0; f < seq.annotations.size(); ++f)
        if (seq.annotations[f].equals_area(id) > 0) {
          first = static_cast<int>(f);
          break;
        }
      if (first < 0) continue;
      Task t;
      t.seq_id = seq.id;
      t.object_id = id;
      const int W = seq.frames[static_cast<size_t>(first)]->w;
      const int H = seq.frames[static_cast<size_t>(first)]->h;
      Mask m0 = seq.annotations[static_cast<size_t>(first)].equals(id);
      t.train = {seq.frames[static_cast<size_t>(first)], m0, sample_box(m0, W, H), first};
      for (size_t f = static_cast<size_t>(first) + 1; f < seq.frames.size(); ++f) {
        Mask m = seq.annotations[f].equals(id);
        t.test.push_back(
            {seq.frames[f], m, sample_box(m, W, H), static_cast<int>(f)});
      }
      ts.tasks.push_back(std::move(t));
    }
  }
  return ts;
}

// ---- synthetic generator ----

struct SynthConfig {
  int frame_w = 96, frame_h = 96;
  int seq_len = 12;
  int n_sequences = 8;
  int min_objects = 1, max_objects = 3;
  int max_distractors = 2;         // untracked shapes sharing a target's color
  double min_radius = 10.0;        // shape half-extent range, px
  double max_radius = 16.0;
  double max_translation = 6.0;    // px per frame
  double max_rotation_deg = 8.0;   // degrees per frame
  double max_scale_rate = 0.03;    // relative size change per frame
  double hue_drift = 0.15;         // total hue rotation across the sequence
  double occlusion_prob = 0.3;     // chance of a sweeping occluder bar
  double fps = 24.0;
  std::string split = "train";

  void validate() const {
    require<ConfigError>(frame_w >= 32 && frame_h >= 32, "synth: frame too small");
    require<ConfigError>(seq_len >= 2, "synth: need at least 2 frames");
    require<ConfigError>(n_sequences >= 1, "synth: n_sequences must be positive");
    require<ConfigError>(min_objects >= 1 && max_objects >= min_objects && max_objects <= 3,
                         "synth: objects per sequence must lie in [1,3]");
    require<ConfigError>(max_distractors >= 0, "synth: negative distractor count");
    require<ConfigError>(min_radius >= 3 && max_radius >= min_radius, "synth: bad radius range");
    require<ConfigError>(max_translation >= 0 && max_rotation_deg >= 0 && max_scale_rate >= 0,
                         "synth: negative motion cap");
  }
};

namespace detail {

enum class ShapeKind : uint8_t { ellipse, rect, pentagon };

struct RGB {
  double r, g, b;
};

/// Rotates the hue of an RGB color (degrees), preserving value/saturation.
inline RGB rotate_hue(const RGB& c, double degrees) {
  const double mx = std::max({c.r, c.g, c.b}), mn = std::min({c.r, c.g, c.b});
  const double v = mx, d = mx - mn;
  if (d <= 0) return c;
  double h;
  if (mx == c.r)
    h = std::fmod((c.g - c.b) / d + 6.0, 6.0);
  else if (mx == c.g)
    h = (c.b - c.r) / d + 2.0;
  else
    h = (c.r - c.g) / d + 4.0;
  h = std::fmod(h + degrees / 60.0 + 12.0, 6.0);
  const int i = static_cast<int>(h);
  const double f = h - i, p = mn, q = v - d * f, t = mn + d * f;
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct SynthShape {
  ShapeKind kind;
  RGB color;
  double cx, cy, rx, ry;   // frame-0 pose
  double vx, vy;           // px/frame
  double angle, vangle;    // radians, radians/frame
  double scale_rate;       // relative/frame
  int target_id = 0;       // 0 = distractor
  int enter_frame = 0;

  /// Farthest distance from center to any boundary point at frame 0.
  double reach() const {
    return kind == ShapeKind::rect ? std::sqrt(rx * rx + ry * ry) : std::max(rx, ry);
  }
  /// Inscribed-disk radius at frame 0.
  double inradius() const {
    const double m = std::min(rx, ry);
    return kind == ShapeKind::pentagon ? 0.809 * m : m;
  }

  bool contains(double px, double py, int frame) const {
    const double s = std::pow(1.0 + scale_rate, frame);
    const double ccx = cx + vx * frame, ccy = cy + vy * frame;
    const double a = angle + vangle * frame;
    const double dx = px - ccx, dy = py - ccy;
    const double ca = std::cos(-a), sa = std::sin(-a);
    const double lx = (dx * ca - dy * sa) / (rx * s), ly = (dx * sa + dy * ca) / (ry * s);
    switch (kind) {
      case ShapeKind::ellipse:
        return lx * lx + ly * ly <= 1.0;
      case ShapeKind::rect:
        return std::abs(lx) <= 1.0 && std::abs(ly) <= 1.0;
      case ShapeKind::pentagon: {
        // convex 5-gon with vertices on the unit circle, first vertex up
        for (int k = 0; k < 5; ++k) {
          const double a0 = -M_PI / 2 + 2 * M_PI * k / 5;
          const double a1 = -M_PI / 2 + 2 * M_PI * (k + 1) / 5;
          const double ex = std::cos(a1) - std::cos(a0), ey = std::sin(a1) - std::sin(a0);
          const double qx = lx - std::cos(a0), qy = ly - std::sin(a0);
          if (ex * qy - ey * qx < 0) return false;
        }
        return true;
      }
    }
    return false;
  }
};

}  // namespace detail

/// Deterministic synthetic VOS sequences: textured background, 1–3 tracked
/// shapes plus same-colored distractors, capped per-frame motion, hue drift,
/// optional occluder sweep. Ground truth is the visible (topmost) region.
inline std::vector<Sequence> gen_synthetic_sequences(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  using detail::RGB;
  using detail::ShapeKind;
  using detail::SynthShape;

  std::vector<Sequence> seqs;
  seqs.reserve(static_cast<size_t>(cfg.n_sequences));
  for (int si = 0; si < cfg.n_sequences; ++si) {
    Sequence seq;
    seq.id = "synth_" + std::to_string(si);
    seq.fps = cfg.fps;
    const int W = cfg.frame_w, H = cfg.frame_h;

    for (int attempt = 0; attempt < 8; ++attempt) {
      Rng rng(derive_seed(seed, static_cast<uint64_t>(si), static_cast<uint64_t>(attempt)));
      const double damp = std::pow(0.5, attempt);

      // muted background: bilinear blend of four corner colors + hash noise
      RGB corner[4];
      for (auto& c : corner) c = {rng.uniform(20, 110), rng.uniform(20, 110), rng.uniform(20, 110)};
      const uint64_t noise_seed = rng.raw();

      const int n_targets = cfg.min_objects +
                            static_cast<int>(rng.uniform_int(cfg.max_objects - cfg.min_objects + 1));
      const int n_distract = static_cast<int>(rng.uniform_int(cfg.max_distractors + 1));

      std::vector<SynthShape> shapes;
      // visibility guarantee: at every frame, every tracked shape keeps part
      // of its inscribed disk outside the other shape's reach, so nothing is
      // ever buried. Reach/inradius grow with the per-frame scale drift.
      auto well_separated = [&](const SynthShape& s) {
        for (const auto& o : shapes) {
          if (o.target_id == 0 && s.target_id == 0) continue;
          for (int f = 0; f < cfg.seq_len; ++f) {
            const double gs = std::pow(1.0 + s.scale_rate, f);
            const double go = std::pow(1.0 + o.scale_rate, f);
            const double dx = (s.cx + s.vx * f) - (o.cx + o.vx * f);
            const double dy = (s.cy + s.vy * f) - (o.cy + o.vy * f);
            const double dist = std::sqrt(dx * dx + dy * dy);
            const double need = std::max(s.reach() * gs - o.inradius() * go,
                                         o.reach() * go - s.inradius() * gs) +
                                4.0;
            if (dist < need) return false;
          }
        }
        return true;
      };
      auto draw_shape = [&](int target_id, const RGB* shared_color) {
        SynthShape s;
        s.kind = static_cast<ShapeKind>(rng.uniform_int(3));
        s.color = shared_color ? *shared_color
                               : RGB{rng.uniform(150, 255), rng.uniform(150, 255),
                                     rng.uniform(150, 255)};
        s.angle = rng.uniform(0, 2 * M_PI);
        s.vangle = damp * rng.uniform(-1, 1) * cfg.max_rotation_deg * M_PI / 180.0;
        s.scale_rate = damp * rng.uniform(-1, 1) * cfg.max_scale_rate;
        s.target_id = target_id;
        for (int draw = 0; draw < 40; ++draw) {
          s.rx = rng.uniform(cfg.min_radius, cfg.max_radius);
          s.ry = rng.uniform(cfg.min_radius, cfg.max_radius);
          const double margin = std::max(s.rx, s.ry) + 2;
          s.cx = margin < W - margin ? rng.uniform(margin, W - margin) : W * 0.5;
          s.cy = margin < H - margin ? rng.uniform(margin, H - margin) : H * 0.5;
          // translation capped both by config and by object size so that
          // consecutive masks keep IoU >= 0.5
          const double cap = damp * std::min(cfg.max_translation, 0.15 * 2 * std::min(s.rx, s.ry));
          const double ang = rng.uniform(0, 2 * M_PI);
          const double speed = rng.uniform(0.3, 1.0) * cap;
          s.vx = speed * std::cos(ang);
          s.vy = speed * std::sin(ang);
          if (well_separated(s)) break;
        }
        return s;
      };
      for (int k = 0; k < n_targets; ++k) shapes.push_back(draw_shape(k + 1, nullptr));
      for (int k = 0; k < n_distract; ++k) {
        const auto& donor = shapes[static_cast<size_t>(rng.uniform_int(n_targets))];
        shapes.push_back(draw_shape(0, &donor.color));
      }
      // occluder: background-toned bar sweeping across mid-sequence
      if (rng.bernoulli(cfg.occlusion_prob) && cfg.seq_len > 4) {
        SynthShape bar;
        bar.kind = ShapeKind::rect;
        bar.color = {rng.uniform(40, 90), rng.uniform(40, 90), rng.uniform(40, 90)};
        bar.rx = rng.uniform(4, 7);
        bar.ry = H * 0.6;
        bar.cy = H * 0.5;
        bar.cx = -bar.rx - 2;
        const int sweep_frames = cfg.seq_len - 3;
        bar.vx = (W + 2 * (bar.rx + 2)) / std::max(1, sweep_frames);
        bar.vy = 0;
        bar.angle = rng.uniform(-0.2, 0.2);
        bar.vangle = 0;
        bar.scale_rate = 0;
        bar.target_id = 0;
        bar.enter_frame = 2;
        shapes.push_back(bar);
      }

      const double hue_total = rng.uniform(-1, 1) * cfg.hue_drift * 360.0;

      seq.frames.clear();
      seq.annotations.clear();
      bool ok = true;
      for (int f = 0; f < cfg.seq_len && ok; ++f) {
        auto img = std::make_shared<Image>(H, W);
        Mask ann(H, W);
        const double hue = hue_total * f / std::max(1, cfg.seq_len - 1);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) / (W - 1), v = static_cast<double>(y) / (H - 1);
            RGB c = {0, 0, 0};
            const RGB* cp[4] = {&corner[0], &corner[1], &corner[2], &corner[3]};
            const double wgt[4] = {(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v};
            for (int k = 0; k < 4; ++k) {
              c.r += wgt[k] * cp[k]->r;
              c.g += wgt[k] * cp[k]->g;
              c.b += wgt[k] * cp[k]->b;
            }
            const double n =
                static_cast<double>(splitmix64(noise_seed ^ (static_cast<uint64_t>(y) << 20) ^
                                               static_cast<uint64_t>(x)) &
                                    0xff) /
                    255.0 * 14.0 -
                7.0;
            c = {c.r + n, c.g + n, c.b + n};
            int top_id = -1;  // annotation id of the topmost shape, -1 = none
            for (const auto& s : shapes) {
              if (f < s.enter_frame) continue;
              if (s.contains(x + 0.0, y + 0.0, f - s.enter_frame)) {
                c = detail::rotate_hue(s.color, hue);
                top_id = s.target_id;
              }
            }
            img->at(y, x, 0) = static_cast<uint8_t>(std::clamp(c.r, 0.0, 255.0));
            img->at(y, x, 1) = static_cast<uint8_t>(std::clamp(c.g, 0.0, 255.0));
            img->at(y, x, 2) = static_cast<uint8_t>(std::clamp(c.b, 0.0, 255.0));
            if (top_id > 0) ann.at(y, x) = static_cast<uint8_t>(top_id);
          }
        // acceptance guards: visible area and frame-to-frame overlap
        for (int k = 1; k <= n_targets && ok; ++k) {
          const Mask cur = ann.equals(k);
          if (cur.area() < 12) ok = false;
          if (f == 1) {
            const Mask prev = seq.annotations[0].equals(k);
            if (mask_iou(prev, cur) < 0.55) ok = false;
          }
        }
        if (!ok) break;
        seq.frames.push_back(std::move(img));
        seq.annotations.push_back(std::move(ann));
      }
      if (ok && static_cast<int>(seq.frames.size()) == cfg.seq_len) break;
    }
    require<SequenceError>(static_cast<int>(seq.frames.size()) == cfg.seq_len,
                           "synth: could not satisfy motion constraints");
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

inline TaskSet gen_synthetic(const SynthConfig& cfg, uint64_t seed) {
  return tasks_from_sequences(gen_synthetic_sequences(cfg, seed), cfg.split);
}

// ---- augmentation ----

struct AugConfig {
  double flip_prob = 0.5;
  double scale_min = 0.8, scale_max = 1.2;
  double max_rotation_deg = 15.0;
  double max_translate_frac = 0.10;
  double color_jitter = 0.20;  // brightness/saturation range, +-
  bool spatial_only = false;

  bool is_identity() const {
    return flip_prob == 0 && scale_min == 1 && scale_max == 1 && max_rotation_deg == 0 &&
           max_translate_frac == 0 && (spatial_only || color_jitter == 0);
  }
  static AugConfig identity() {
    AugConfig a;
    a.flip_prob = 0;
    a.scale_min = a.scale_max = 1;
    a.max_rotation_deg = 0;
    a.max_translate_frac = 0;
    a.color_jitter = 0;
    return a;
  }
};

/// Applies one random spatial (+ optional color) transform to a frame/mask
/// pair: flip, rotate, scale about the center, translate. The mask is
/// resampled nearest-neighbor. If the object leaves the frame entirely the
/// draw is retried up to 10 times, then the pair is returned unchanged.
inline std::pair<Image, Mask> augment(const Image& frame, const Mask& mask, const AugConfig& cfg,
                                      uint64_t seed) {
  require<SizeError>(frame.h == mask.h && frame.w == mask.w, "augment: frame/mask size mismatch");
  if (cfg.is_identity()) return {frame, mask};
  Rng rng(seed);
  const int W = frame.w, H = frame.h;
  const double cx = 0.5 * (W - 1), cy = 0.5 * (H - 1);

  for (int attempt = 0; attempt < 10; ++attempt) {
    const bool flip = rng.bernoulli(cfg.flip_prob);
    const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
    const double th = rng.uniform(-1, 1) * cfg.max_rotation_deg * M_PI / 180.0;
    const double tx = rng.uniform(-1, 1) * cfg.max_translate_frac * W;
    const double ty = rng.uniform(-1, 1) * cfg.max_translate_frac * H;
    const double bright = cfg.spatial_only ? 1.0 : rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter);
    const double sat = cfg.spatial_only ? 1.0 : rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter);

    // inverse map: undo translation, then rotation/scale about center, then flip
    const double ca = std::cos(-th), sa = std::sin(-th);
    Mask out_mask(H, W);
    Image out_frame(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dx = x - tx - cx, dy = y - ty - cy;
        double sx2 = (dx * ca - dy * sa) / s + cx;
        const double sy = (dx * sa + dy * ca) / s + cy;
        if (flip) sx2 = (W - 1) - sx2;
        // mask: nearest neighbor, outside = background
        const int mx = static_cast<int>(std::lround(sx2)), my = static_cast<int>(std::lround(sy));
        if (mx >= 0 && mx < W && my >= 0 && my < H && mask.at(my, mx))
          out_mask.at(y, x) = 1;
        // frame: bilinear with border replication
        const double fx = std::clamp(sx2, 0.0, W - 1.0), fy = std::clamp(sy, 0.0, H - 1.0);
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        const double ax = fx - x0, ay = fy - y0;
        for (int ch = 0; ch < 3; ++ch) {
          double v = (1 - ay) * ((1 - ax) * frame.at(y0, x0, ch) + ax * frame.at(y0, x1, ch)) +
                     ay * ((1 - ax) * frame.at(y1, x0, ch) + ax * frame.at(y1, x1, ch));
          out_frame.at(y, x, ch) = static_cast<uint8_t>(std::clamp(v * bright, 0.0, 255.0));
        }
      }
    if (!cfg.spatial_only && sat != 1.0) {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double r = out_frame.at(y, x, 0), g = out_frame.at(y, x, 1),
                       b = out_frame.at(y, x, 2);
          const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
          out_frame.at(y, x, 0) = static_cast<uint8_t>(std::clamp(gray + sat * (r - gray), 0.0, 255.0));
          out_frame.at(y, x, 1) = static_cast<uint8_t>(std::clamp(gray + sat * (g - gray), 0.0, 255.0));
          out_frame.at(y, x, 2) = static_cast<uint8_t>(std::clamp(gray + sat * (b - gray), 0.0, 255.0));
        }
    }
    if (mask.area() == 0 || out_mask.area() > 0) return {std::move(out_frame), std::move(out_mask)};
  }
  return {frame, mask};
}

/// Meta-training task: picks one annotated frame of `task` uniformly, then
/// builds d_train from one augmentation and d_test from k more.
inline Task make_meta_task(const Task& task, const AugConfig& cfg, uint64_t seed, int k = 3) {
  require<ConfigError>(k >= 1, "make_meta_task: k must be positive");
  std::vector<const Sample*> pool;
  if (task.train.mask.area() > 0) pool.push_back(&task.train);
  for (const Sample& s : task.test)
    if (s.mask.area() > 0) pool.push_back(&s);
  require<StructureError>(!pool.empty(), "make_meta_task: no annotated frames");

  Rng rng(seed);
  const Sample& src = *pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
  const int W = src.frame->w, H = src.frame->h;

  Task out;
  out.seq_id = task.seq_id;
  out.object_id = task.object_id;
  auto build = [&](uint64_t s) {
    auto [fr, mk] = augment(*src.frame, src.mask, cfg, s);
    Sample smp;
    smp.frame = std::make_shared<Image>(std::move(fr));
    smp.box = sample_box(mk, W, H);
    smp.mask = std::move(mk);
    smp.frame_index = src.frame_index;
    return smp;
  };
  out.train = build(derive_seed(seed, 1));
  for (int i = 0; i < k; ++i) out.test.push_back(build(derive_seed(seed, 2, static_cast<uint64_t>(i))));
  return out;
}

/// Uniform batch without replacement (partial Fisher–Yates).
inline std::vector<Task> sample_batch(const TaskSet& ts, int b, uint64_t seed) {
  require<ConfigError>(b >= 0 && static_cast<size_t>(b) <= ts.tasks.size(),
                       "sample_batch: batch larger than task set");
  std::vector<size_t> idx(ts.tasks.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::vector<Task> out;
  out.reserve(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const size_t j =
        static_cast<size_t>(i) +
        static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(idx.size() - static_cast<size_t>(i))));
    std::swap(idx[static_cast<size_t>(i)], idx[j]);
    out.push_back(ts.tasks[idx[static_cast<size_t>(i)]]);
  }
  return out;
}

}  // namespace metaseg
