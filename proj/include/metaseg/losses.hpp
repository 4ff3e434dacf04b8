#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>

#include "metaseg/mask.hpp"
#include "metaseg/ops.hpp"

namespace metaseg {

template <class S>
struct LossValue {
  Var<S> value;
  std::map<std::string, double> components;

  double scalar() const { return static_cast<double>(value.value().data[0]); }
};

enum class MaskLoss { lovasz, bce };

struct LossOptions {
  MaskLoss mask_loss = MaskLoss::lovasz;
  // true: average Lovász over classes present in gt; false: foreground only
  // (falls back to background when no foreground exists).
  bool lovasz_all_present = true;
};

/// Gradient of the Jaccard-loss Lovász extension w.r.t. sorted errors.
/// sorted_gt must be ordered by descending error of its class.
inline std::vector<double> lovasz_grad(const std::vector<uint8_t>& sorted_gt) {
  const size_t n = sorted_gt.size();
  if (n == 0) return {};
  double p = 0;
  for (uint8_t v : sorted_gt) p += v;
  std::vector<double> jaccard(n);
  double cum_gt = 0, cum_not = 0;
  for (size_t k = 0; k < n; ++k) {
    cum_gt += sorted_gt[k];
    cum_not += 1 - sorted_gt[k];
    const double inter = p - cum_gt;
    const double uni = p + cum_not;
    jaccard[k] = 1.0 - inter / uni;  // uni >= k+1 > 0 always
  }
  std::vector<double> w(n);
  w[0] = jaccard[0];
  for (size_t k = 1; k < n; ++k) w[k] = jaccard[k] - jaccard[k - 1];
  return w;
}

namespace detail {

/// Loss term for one class: dot(sorted errors desc, lovasz_grad weights).
template <class S>
Var<S> lovasz_class_term(Var<S> probs, const Mask& gt, int c) {
  const Eigen::Index n = static_cast<Eigen::Index>(gt.v.size());
  Var<S> pc = select_channel(probs, c);
  // errors_i = 1 - p_i(c) when gt_i == c else p_i(c)
  typename Tensor<S>::Array sgn(n), off(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool is_c = (gt.v[static_cast<size_t>(i)] != 0) == (c == 1);
    sgn[i] = is_c ? S(-1) : S(1);
    off[i] = is_c ? S(1) : S(0);
  }
  Var<S> errors = affine_vec(pc, std::move(sgn), std::move(off));
  // stable descending sort of the error values; ties keep pixel order
  const auto& ev = errors.value().data;
  std::vector<Eigen::Index> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&ev](Eigen::Index a, Eigen::Index b) { return ev[a] > ev[b]; });
  std::vector<uint8_t> sorted_gt(static_cast<size_t>(n));
  for (size_t k = 0; k < perm.size(); ++k)
    sorted_gt[k] = (gt.v[static_cast<size_t>(perm[k])] != 0) == (c == 1) ? 1 : 0;
  const std::vector<double> w = lovasz_grad(sorted_gt);
  typename Tensor<S>::Array wa(n);
  for (Eigen::Index k = 0; k < n; ++k) wa[k] = static_cast<S>(w[static_cast<size_t>(k)]);
  return dot_const(gather(errors, std::move(perm)), std::move(wa));
}

}  // namespace detail

/// Binary Lovász-Softmax. probs: [2,H,W] softmax output (channel 1 =
/// foreground); gt: binary mask of the same spatial shape.
template <class S>
LossValue<S> lovasz_softmax(Var<S> probs, const Mask& gt, bool all_present = true) {
  const auto& pv = probs.value();
  require<ShapeError>(pv.rank() == 3 && pv.dim(0) == 2, "lovasz_softmax: probs must be [2,H,W]");
  require<SizeError>(pv.dim(1) == gt.h && pv.dim(2) == gt.w, "lovasz_softmax: gt shape mismatch");
  const size_t area = gt.area();
  const bool has_fg = area > 0;
  const bool has_bg = area < gt.v.size();
  std::vector<int> classes;
  if (all_present) {
    if (has_bg) classes.push_back(0);
    if (has_fg) classes.push_back(1);
  } else {
    classes.push_back(has_fg ? 1 : 0);
  }
  Var<S> total;
  for (size_t i = 0; i < classes.size(); ++i) {
    Var<S> term = detail::lovasz_class_term(probs, gt, classes[i]);
    total = (i == 0) ? term : add(total, term);
  }
  if (classes.size() > 1) total = scale(total, S(1) / static_cast<S>(classes.size()));
  LossValue<S> out{total, {{"mask", static_cast<double>(total.value().data[0])}}};
  return out;
}

/// Independent oracle for the Lovász extension: integrates the Jaccard set
/// loss of the thresholded error set over t in [0,1]. The integrand is
/// piecewise constant, so the integral is evaluated exactly segment by
/// segment (equivalent to the limit of the midpoint grid, step <= 1e-4).
inline double jaccard_extension_oracle(const std::vector<double>& errors,
                                       const std::vector<uint8_t>& gt, int c) {
  const size_t n = errors.size();
  std::vector<double> cuts;
  cuts.reserve(n + 2);
  cuts.push_back(0.0);
  cuts.push_back(1.0);
  for (double e : errors) cuts.push_back(std::clamp(e, 0.0, 1.0));
  std::sort(cuts.begin(), cuts.end());
  double integral = 0.0;
  for (size_t s = 0; s + 1 < cuts.size(); ++s) {
    const double a = cuts[s], b = cuts[s + 1];
    if (b <= a) continue;
    const double t = 0.5 * (a + b);
    // S_t = {i : errors_i >= t}; G = {i : gt_i == c}
    size_t g_minus_s = 0, g_union_s = 0;
    for (size_t i = 0; i < n; ++i) {
      const bool in_g = (gt[i] != 0) == (c == 1);
      const bool in_s = errors[i] >= t;
      g_minus_s += in_g && !in_s;
      g_union_s += in_g || in_s;
    }
    const double delta = g_union_s == 0 ? 0.0 : 1.0 - static_cast<double>(g_minus_s) / g_union_s;
    integral += (b - a) * delta;
  }
  return integral;
}

/// Mean binary cross-entropy of foreground probabilities against a binary
/// mask, with probs clamped to [1e-7, 1-1e-7].
template <class S>
LossValue<S> bce(Var<S> probs, const Mask& gt) {
  const auto& pv = probs.value();
  require<SizeError>(pv.numel() == static_cast<Eigen::Index>(gt.v.size()),
                     "bce: probs/gt size mismatch");
  const S lo = S(1e-7), hi = S(1) - S(1e-7);
  const Eigen::Index n = pv.numel();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(pv.data[i]), static_cast<double>(lo),
                                static_cast<double>(hi));
    const double y = gt.v[static_cast<size_t>(i)] ? 1.0 : 0.0;
    acc -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  const int pi = probs.id;
  std::vector<uint8_t> yv = gt.v;
  Var<S> v = probs.g->op(
      "bce", std::move(out), {pi},
      [pi, n, lo, hi, yv = std::move(yv)](Graph<S>& g, const typename Graph<S>::Array& gout,
                                          int) {
        const auto& p = g.val(pi).data;
        typename Graph<S>::Array dp(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          if (p[i] <= lo || p[i] >= hi) {
            dp[i] = S(0);
            continue;
          }
          const S y = yv[static_cast<size_t>(i)] ? S(1) : S(0);
          dp[i] = gout[0] * (p[i] - y) / (p[i] * (S(1) - p[i]) * static_cast<S>(n));
        }
        g.accum(pi, dp);
      });
  return LossValue<S>{v, {{"mask", static_cast<double>(v.value().data[0])}}};
}

// ---- box encodings ----

using Vec4 = Eigen::Vector4d;

/// (cx/W, cy/H, log w, log h) — frame-normalized absolute encoding.
inline Vec4 encode_box_frame(const Box& b, double W, double H) {
  require<BoxError>(b.valid(), "encode_box_frame: degenerate box");
  return Vec4(b.cx / W, b.cy / H, std::log(b.w), std::log(b.h));
}

/// Standard R-CNN deltas of gt relative to a prior.
inline Vec4 encode_box_delta(const Box& gt, const Box& prior) {
  require<BoxError>(gt.valid() && prior.valid(), "encode_box_delta: degenerate box");
  return Vec4((gt.cx - prior.cx) / prior.w, (gt.cy - prior.cy) / prior.h,
              std::log(gt.w / prior.w), std::log(gt.h / prior.h));
}

/// Applies predicted deltas to a prior; log-scale terms clamped to ±4 so the
/// decoded box stays finite/positive for any network output.
inline Box decode_box_delta(const Box& prior, const Vec4& d) {
  const double dw = std::clamp(d[2], -4.0, 4.0);
  const double dh = std::clamp(d[3], -4.0, 4.0);
  return Box(prior.cx + d[0] * prior.w, prior.cy + d[1] * prior.h, prior.w * std::exp(dw),
             prior.h * std::exp(dh));
}

/// Huber (delta=1) summed over the 4 encoded coordinates.
template <class S>
Var<S> box_loss4(Var<S> pred4, const Vec4& target) {
  require<SizeError>(pred4.numel() == 4, "box_loss4: expected 4 coordinates");
  typename Tensor<S>::Array t(4);
  for (int i = 0; i < 4; ++i) t[i] = static_cast<S>(target[i]);
  Var<S> diff = affine_vec(pred4, Tensor<S>::Array::Ones(4), -t);
  return sum(huber(diff, S(1)));
}

/// Box-level form used in tests: both boxes frame-encoded, then Huber.
template <class S>
LossValue<S> box_loss(Graph<S>& g, const Box& pred, const Box& gt, double W, double H) {
  require<BoxError>(gt.valid(), "box_loss: degenerate gt box");
  Tensor<S> enc({4});
  const Vec4 pe = encode_box_frame(pred, W, H);
  for (int i = 0; i < 4; ++i) enc.data[i] = static_cast<S>(pe[i]);
  Var<S> v = box_loss4(g.constant(std::move(enc)), encode_box_frame(gt, W, H));
  return LossValue<S>{v, {{"box", static_cast<double>(v.value().data[0])}}};
}

// ---- combined segmentation loss ----

template <class S>
struct SegPrediction {
  std::vector<Var<S>> box_deltas;  // one [4] vector per prior
  Var<S> mask_probs;               // [2,window,window]
};

struct SegTarget {
  std::vector<Vec4> box_targets;  // encoded gt deltas, aligned with box_deltas
  Mask mask_local;                // gt cropped to the mask window
};

/// L_seg = L_box + L_mask. L_box averages over the supplied prior set; L_mask
/// is Lovász-Softmax (or BCE) on the window-local prediction.
template <class S>
LossValue<S> seg_loss(const SegPrediction<S>& pred, const SegTarget& target,
                      const LossOptions& opt = {}) {
  require<StructureError>(pred.box_deltas.size() == target.box_targets.size(),
                          "seg_loss: box prediction/target count mismatch");
  require<StructureError>(!pred.box_deltas.empty(), "seg_loss: no box predictions");

  Var<S> box_total;
  for (size_t i = 0; i < pred.box_deltas.size(); ++i) {
    Var<S> term = box_loss4(pred.box_deltas[i], target.box_targets[i]);
    box_total = (i == 0) ? term : add(box_total, term);
  }
  if (pred.box_deltas.size() > 1)
    box_total = scale(box_total, S(1) / static_cast<S>(pred.box_deltas.size()));

  LossValue<S> mask_lv = opt.mask_loss == MaskLoss::lovasz
                             ? lovasz_softmax(pred.mask_probs, target.mask_local,
                                              opt.lovasz_all_present)
                             : bce(select_channel(pred.mask_probs, 1), target.mask_local);

  LossValue<S> out;
  out.value = add(box_total, mask_lv.value);
  out.components["box"] = static_cast<double>(box_total.value().data[0]);
  out.components["mask"] = mask_lv.components.at("mask");
  return out;
}

}  // namespace metaseg
