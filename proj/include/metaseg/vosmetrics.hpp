#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "metaseg/common.hpp"
#include "metaseg/csv.hpp"
#include "metaseg/inference.hpp"
#include "metaseg/mask.hpp"
#include "metaseg/taskset.hpp"

namespace metaseg {

/// Jaccard index J of two binary masks; both empty counts as 1 (an absent
/// object predicted absent is a perfect answer).
inline double iou(const Mask& a, const Mask& b) { return mask_iou(a, b); }

// ---- region similarity statistics ----

struct JStats {
  double mean = 0;
  double decay = 0;
};

/// Mean and decay of a per-frame J series (the given frame is excluded by the
/// caller). Decay = mean of the first quartile bin minus mean of the last,
/// with the series cut into 4 contiguous near-equal bins (remainder spread
/// over the earlier bins). Under 4 frames it degrades to first - last.
inline JStats j_stats(const std::vector<double>& j) {
  require<SizeError>(!j.empty(), "j_stats: empty series");
  JStats out;
  out.mean = std::accumulate(j.begin(), j.end(), 0.0) / static_cast<double>(j.size());
  const int n = static_cast<int>(j.size());
  if (n < 4) {
    out.decay = j.front() - j.back();
    return out;
  }
  double first = 0, last = 0;
  int begin = 0;
  for (int bin = 0; bin < 4; ++bin) {
    const int size = n / 4 + (bin < n % 4 ? 1 : 0);
    const double m =
        std::accumulate(j.begin() + begin, j.begin() + begin + size, 0.0) / size;
    if (bin == 0) first = m;
    if (bin == 3) last = m;
    begin += size;
  }
  out.decay = first - last;
  return out;
}

// ---- boundary accuracy ----

namespace detail {

/// Inner 1-pixel boundary: foreground pixels with a 4-neighbour that is
/// background or outside the image.
inline Mask boundary_of(const Mask& m) {
  Mask b(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
      if (edge || !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1))
        b.at(y, x) = 1;
    }
  return b;
}

/// Morphological dilation with a euclidean disk of the given radius.
inline Mask dilate_disk(const Mask& m, int radius) {
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) offsets.emplace_back(dy, dx);

  Mask d(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      for (const auto& [dy, dx] : offsets) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w) d.at(yy, xx) = 1;
      }
    }
  return d;
}

inline int default_boundary_radius(int h, int w) {
  return static_cast<int>(
      std::ceil(0.008 * std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w)));
}

}  // namespace detail

/// Boundary measure F: precision/recall of the 1-pixel mask boundaries under
/// a distance tolerance (dilation by `radius`, default ceil(0.008 * image
/// diagonal)). F = 2PR/(P+R); both boundaries empty -> 1; P + R = 0 -> 0.
inline double f_boundary(const Mask& pred, const Mask& gt,
                         std::optional<int> radius = std::nullopt) {
  require<SizeError>(pred.h == gt.h && pred.w == gt.w, "f_boundary: size mismatch");
  const int r = radius.value_or(detail::default_boundary_radius(pred.h, pred.w));
  require<ConfigError>(r >= 0, "f_boundary: negative radius");

  const Mask pb = detail::boundary_of(pred);
  const Mask gb = detail::boundary_of(gt);
  const size_t np = pb.area(), ng = gb.area();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  const Mask pd = detail::dilate_disk(pb, r);
  const Mask gd = detail::dilate_disk(gb, r);
  size_t p_hit = 0, g_hit = 0;
  for (size_t i = 0; i < pb.v.size(); ++i) {
    p_hit += pb.v[i] && gd.v[i];
    g_hit += gb.v[i] && pd.v[i];
  }
  const double precision = static_cast<double>(p_hit) / static_cast<double>(np);
  const double recall = static_cast<double>(g_hit) / static_cast<double>(ng);
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

// ---- sequence-level evaluation ----

/// Per-(sequence, object) metrics; percentages in [0,100].
struct ObjectEval {
  std::string seq_id;
  int object_id = 0;
  std::vector<double> frame_j;  // per evaluated frame, percentage
  double j_mean = 0;
  double j_decay = 0;
  double f_mean = 0;
  double jf = 0;
};

struct EvalReport {
  std::vector<ObjectEval> objects;  // gt task order
  double j_mean = 0;                // aggregates: mean over (sequence, object) rows
  double j_decay = 0;
  double f_mean = 0;
  double jf = 0;
  int total_frames = 0;
  double model_seconds = 0;    // fine-tune + tracking + adaptation
  double forward_seconds = 0;  // tracking only
  double fps_amortized = 0;    // total frames / model seconds
  double fps_forward = 0;      // total frames / forward seconds
};

/// DAVIS-style evaluation of merged label maps against the ground-truth task
/// set. Each object is scored on every frame after its annotated one (that
/// frame is an input, never scored); aggregates average over (sequence,
/// object) rows. Missing predictions raise EvalError naming the gap.
template <class S>
EvalReport evaluate(const std::vector<SequenceResult<S>>& preds, const TaskSet& ts) {
  std::map<std::string, const SequenceResult<S>*> by_id;
  for (const SequenceResult<S>& p : preds) {
    require<EvalError>(!by_id.count(p.seq_id), "evaluate: duplicate prediction for sequence " + p.seq_id);
    by_id.emplace(p.seq_id, &p);
  }

  EvalReport rep;
  std::map<std::string, int> seq_frames;  // highest frame index seen per sequence
  for (const Task& t : ts.tasks) {
    const auto it = by_id.find(t.seq_id);
    require<EvalError>(it != by_id.end(), "missing prediction: sequence " + t.seq_id);
    const SequenceResult<S>& pr = *it->second;
    require<EvalError>(!t.test.empty(),
                       "evaluate: sequence " + t.seq_id + " object " +
                           std::to_string(t.object_id) + " has no frames to score");

    ObjectEval oe;
    oe.seq_id = t.seq_id;
    oe.object_id = t.object_id;
    std::vector<double> j;
    double f_sum = 0;
    int& frames = seq_frames[t.seq_id];
    frames = std::max(frames, t.train.frame_index + 1);
    for (const Sample& s : t.test) {
      require<EvalError>(s.frame_index < static_cast<int>(pr.labels.size()),
                         "missing prediction: sequence " + t.seq_id + " frame " +
                             std::to_string(s.frame_index) + " object " +
                             std::to_string(t.object_id));
      const Mask pm = pr.labels[static_cast<size_t>(s.frame_index)].equals(
          static_cast<uint8_t>(t.object_id));
      j.push_back(iou(pm, s.mask));
      f_sum += f_boundary(pm, s.mask);
      frames = std::max(frames, s.frame_index + 1);
    }
    const JStats js = j_stats(j);
    oe.frame_j.reserve(j.size());
    for (double v : j) oe.frame_j.push_back(100 * v);
    oe.j_mean = 100 * js.mean;
    oe.j_decay = 100 * js.decay;
    oe.f_mean = 100 * f_sum / static_cast<double>(t.test.size());
    oe.jf = (oe.j_mean + oe.f_mean) / 2;
    rep.objects.push_back(std::move(oe));
  }
  require<EvalError>(!rep.objects.empty(), "evaluate: empty task set");

  for (const ObjectEval& o : rep.objects) {
    rep.j_mean += o.j_mean;
    rep.j_decay += o.j_decay;
    rep.f_mean += o.f_mean;
  }
  const double rows = static_cast<double>(rep.objects.size());
  rep.j_mean /= rows;
  rep.j_decay /= rows;
  rep.f_mean /= rows;
  rep.jf = (rep.j_mean + rep.f_mean) / 2;

  for (const auto& [id, frames] : seq_frames) {
    const SequenceResult<S>& pr = *by_id.at(id);
    rep.total_frames += frames;
    rep.model_seconds += pr.model_seconds;
    rep.forward_seconds += pr.forward_seconds();
  }
  if (rep.model_seconds > 0) rep.fps_amortized = rep.total_frames / rep.model_seconds;
  if (rep.forward_seconds > 0) rep.fps_forward = rep.total_frames / rep.forward_seconds;
  return rep;
}

/// CSV view: one row per (sequence, object) plus an aggregate row. The FPS
/// column is the amortized figure (fine-tune included); the forward-only
/// figure lives in the summary text.
inline CsvTable report_table(const EvalReport& rep) {
  CsvTable t;
  t.header = {"sequence", "object", "J_mean", "J_decay", "F_mean", "JF", "FPS"};
  for (const ObjectEval& o : rep.objects)
    t.rows.push_back({o.seq_id, std::to_string(o.object_id), fmt_fixed(o.j_mean, 4),
                      fmt_fixed(o.j_decay, 4), fmt_fixed(o.f_mean, 4), fmt_fixed(o.jf, 4), ""});
  t.rows.push_back({"all", "all", fmt_fixed(rep.j_mean, 4), fmt_fixed(rep.j_decay, 4),
                    fmt_fixed(rep.f_mean, 4), fmt_fixed(rep.jf, 4),
                    fmt_fixed(rep.fps_amortized, 4)});
  return t;
}

/// Human-readable summary with both FPS readings labeled.
inline std::string report_summary(const EvalReport& rep) {
  std::string s;
  s += "J&F " + fmt_fixed(rep.jf, 2) + "  J " + fmt_fixed(rep.j_mean, 2) + " (decay " +
       fmt_fixed(rep.j_decay, 2) + ")  F " + fmt_fixed(rep.f_mean, 2) + "\n";
  s += "frames " + std::to_string(rep.total_frames) + "  fps amortized " +
       fmt_fixed(rep.fps_amortized, 3) + "  fps forward-only " + fmt_fixed(rep.fps_forward, 3) +
       "\n";
  return s;
}

}  // namespace metaseg
