#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaseg/losses.hpp"
#include "metaseg/png_io.hpp"

namespace metaseg {

enum class LayerKind : uint8_t { conv = 0, fully_connected = 1, norm_affine = 2 };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int out_ch = 0;  // output channels / fc rows / norm channels == neuron count
  int in_ch = 0;   // conv input channels / fc columns / norm channels
  int ksize = 0;   // conv kernel size (square); 0 otherwise
  int pad = 0;
  int groups = 0;  // norm_affine only
};

/// Detect-then-segment network: 4 conv blocks (GN+relu+pool, stride 16
/// total), a box head pooling block-4 features over a region, and a mask
/// head on concatenated block-2/3 crops.
struct ArchConfig {
  int in_channels = 3;
  std::vector<int> block_channels = {16, 32, 32, 64};
  int gn_groups = 8;
  int mask_channels = 32;
  int mask_convs = 3;
  int mask_window = 28;
  int box_hidden = 64;
  int box_pool_window = 4;

  void validate() const {
    require<ConfigError>(in_channels >= 1, "arch: in_channels must be positive");
    require<ConfigError>(block_channels.size() == 4, "arch: expected 4 conv blocks");
    require<ConfigError>(gn_groups >= 1, "arch: gn_groups must be positive");
    for (int c : block_channels)
      require<ConfigError>(c >= 1 && c % gn_groups == 0,
                           "arch: block channels must divide by gn_groups");
    require<ConfigError>(mask_channels >= 1 && mask_channels % gn_groups == 0,
                         "arch: mask_channels must divide by gn_groups");
    require<ConfigError>(mask_convs >= 1, "arch: mask_convs must be positive");
    require<ConfigError>(mask_window >= 2, "arch: mask_window too small");
    require<ConfigError>(box_hidden >= 1, "arch: box_hidden must be positive");
    require<ConfigError>(box_pool_window >= 1, "arch: box_pool_window must be positive");
  }

  int mask_in_channels() const { return block_channels[1] + block_channels[2]; }
  // layer indices in the canonical layer order
  int conv_index(int block) const { return 2 * block; }
  int gn_index(int block) const { return 2 * block + 1; }
  int mask_conv_index(int j) const { return 8 + 2 * j; }
  int mask_gn_index(int j) const { return 8 + 2 * j + 1; }
  int mask_out_index() const { return 8 + 2 * mask_convs; }
  int fc1_index() const { return mask_out_index() + 1; }
  int fc2_index() const { return mask_out_index() + 2; }
  int layer_count() const { return fc2_index() + 1; }
};

/// Canonical layer order: block conv/gn pairs, mask conv/gn pairs, mask
/// output conv, box fc1, box fc2.
inline std::vector<LayerSpec> layer_specs(const ArchConfig& a) {
  a.validate();
  std::vector<LayerSpec> out;
  int prev = a.in_channels;
  for (size_t i = 0; i < a.block_channels.size(); ++i) {
    const int c = a.block_channels[i];
    const std::string base = "b" + std::to_string(i + 1);
    out.push_back({base + ".conv", LayerKind::conv, c, prev, 3, 1, 0});
    out.push_back({base + ".gn", LayerKind::norm_affine, c, c, 0, 0, a.gn_groups});
    prev = c;
  }
  prev = a.mask_in_channels();
  for (int j = 0; j < a.mask_convs; ++j) {
    const std::string base = "mask." + std::to_string(j + 1);
    out.push_back({base + ".conv", LayerKind::conv, a.mask_channels, prev, 3, 1, 0});
    out.push_back({base + ".gn", LayerKind::norm_affine, a.mask_channels, a.mask_channels, 0, 0,
                   a.gn_groups});
    prev = a.mask_channels;
  }
  out.push_back({"mask.out", LayerKind::conv, 2, a.mask_channels, 1, 0, 0});
  out.push_back({"box.fc1", LayerKind::fully_connected, a.box_hidden, a.block_channels[3], 0, 0, 0});
  out.push_back({"box.fc2", LayerKind::fully_connected, 4, a.box_hidden, 0, 0, 0});
  return out;
}

inline std::vector<int> layer_weight_shape(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv:
      return {s.out_ch, s.in_ch, s.ksize, s.ksize};
    case LayerKind::fully_connected:
      return {s.out_ch, s.in_ch};
    case LayerKind::norm_affine:
      return {s.out_ch};
  }
  throw StructureError("unknown layer kind");
}

/// Flat scalar count of one neuron's weight block within a layer.
inline Eigen::Index neuron_weight_size(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv:
      return static_cast<Eigen::Index>(s.in_ch) * s.ksize * s.ksize;
    case LayerKind::fully_connected:
      return s.in_ch;
    case LayerKind::norm_affine:
      return 1;
  }
  return 0;
}

template <class S>
struct LayerParams {
  LayerSpec spec;
  Tensor<S> w;  // conv [O,C,k,k] / fc [O,K] / norm gamma [C]
  Tensor<S> b;  // [O] (norm: beta)

  int neurons() const { return spec.out_ch; }
};

template <class S>
struct ModelParams {
  ArchConfig arch;
  std::vector<LayerParams<S>> layers;

  int neuron_count() const {
    int n = 0;
    for (const auto& l : layers) n += l.neurons();
    return n;
  }
  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers) n += l.w.numel() + l.b.numel();
    return n;
  }
  template <class T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.arch = arch;
    out.layers.reserve(layers.size());
    for (const auto& l : layers)
      out.layers.push_back({l.spec, l.w.template cast<T>(), l.b.template cast<T>()});
    return out;
  }
};

/// He fan-in initialization: weights ~ N(0, 2/fan_in), zero biases, identity
/// norm affine. Deterministic per (seed, layer index).
template <class S>
ModelParams<S> init_model(const ArchConfig& arch, uint64_t seed) {
  ModelParams<S> p;
  p.arch = arch;
  const auto specs = layer_specs(arch);
  for (size_t li = 0; li < specs.size(); ++li) {
    const LayerSpec& s = specs[li];
    Rng rng(derive_seed(seed, li));
    LayerParams<S> l;
    l.spec = s;
    switch (s.kind) {
      case LayerKind::conv: {
        const double std = std::sqrt(2.0 / (static_cast<double>(s.in_ch) * s.ksize * s.ksize));
        l.w = random_normal<S>({s.out_ch, s.in_ch, s.ksize, s.ksize}, rng, std);
        l.b = Tensor<S>::zeros({s.out_ch});
        break;
      }
      case LayerKind::fully_connected: {
        const double std = std::sqrt(2.0 / s.in_ch);
        l.w = random_normal<S>({s.out_ch, s.in_ch}, rng, std);
        l.b = Tensor<S>::zeros({s.out_ch});
        break;
      }
      case LayerKind::norm_affine:
        l.w = Tensor<S>::full({s.out_ch}, S(1));
        l.b = Tensor<S>::zeros({s.out_ch});
        break;
    }
    p.layers.push_back(std::move(l));
  }
  return p;
}

template <class S>
struct BoundLayer {
  Var<S> w, b;
};

/// Model parameters registered in a graph, in canonical layer order.
template <class S>
struct BoundModel {
  ArchConfig arch;
  std::vector<BoundLayer<S>> layers;
};

template <class S>
BoundModel<S> bind_params(Graph<S>& g, const ModelParams<S>& p, bool trainable = true) {
  BoundModel<S> bm;
  bm.arch = p.arch;
  bm.layers.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    if (trainable)
      bm.layers.push_back({g.leaf(l.w), g.leaf(l.b)});
    else
      bm.layers.push_back({g.constant(l.w), g.constant(l.b)});
  }
  return bm;
}

/// Backbone feature maps as rank-3 tensors plus the frame size.
template <class S>
struct Features {
  Var<S> f2;  // [C2, H/4,  W/4 ]
  Var<S> f3;  // [C3, H/8,  W/8 ]
  Var<S> f4;  // [C4, H/16, W/16]
  int H = 0, W = 0;
};

template <class S>
Features<S> backbone_forward(const BoundModel<S>& bm, Var<S> frame) {
  const auto& fv = frame.value();
  require<ShapeError>(fv.rank() == 3 && fv.dim(0) == bm.arch.in_channels,
                      "backbone: frame must be [C,H,W]");
  const int H = fv.dim(1), W = fv.dim(2);
  require<SizeError>(H % 16 == 0 && W % 16 == 0, "backbone: frame size must divide by 16");
  Features<S> out;
  out.H = H;
  out.W = W;
  Var<S> x = reshape(frame, {1, bm.arch.in_channels, H, W});
  for (int i = 0; i < 4; ++i) {
    const auto& conv = bm.layers[static_cast<size_t>(bm.arch.conv_index(i))];
    const auto& gn = bm.layers[static_cast<size_t>(bm.arch.gn_index(i))];
    x = maxpool2(relu(group_norm(conv2d(x, conv.w, conv.b, 1, 1), bm.arch.gn_groups, gn.w, gn.b)));
    const int c = bm.arch.block_channels[static_cast<size_t>(i)];
    const int s = 2 << i;  // cumulative stride after this block's pool
    if (i == 1) out.f2 = reshape(x, {c, H / s, W / s});
    if (i == 2) out.f3 = reshape(x, {c, H / s, W / s});
    if (i == 3) out.f4 = reshape(x, {c, H / s, W / s});
  }
  return out;
}

/// Maps a frame-space box onto a feature map of the given stride, clamped to
/// a valid >= 1-pixel region inside the map.
inline Box feature_box(const Box& b, int stride, int fw, int fh) {
  const double s = stride;
  return clip_box(Box(b.cx / s, b.cy / s, b.w / s, b.h / s), fw, fh, 1.0);
}

/// Pools block-4 features over `region` and regresses 4 box deltas.
template <class S>
Var<S> box_head_forward(const BoundModel<S>& bm, const Features<S>& feats, const Box& region) {
  const auto& f4v = feats.f4.value();
  const Box fb = feature_box(region, 16, f4v.dim(2), f4v.dim(1));
  Var<S> pooled = spatial_mean(roi_crop(feats.f4, fb, bm.arch.box_pool_window));
  const auto& fc1 = bm.layers[static_cast<size_t>(bm.arch.fc1_index())];
  const auto& fc2 = bm.layers[static_cast<size_t>(bm.arch.fc2_index())];
  return fc(relu(fc(pooled, fc1.w, fc1.b)), fc2.w, fc2.b);
}

/// Predicts window-local class probabilities [2,window,window] inside `box`.
template <class S>
Var<S> mask_head_forward(const BoundModel<S>& bm, const Features<S>& feats, const Box& box) {
  const ArchConfig& a = bm.arch;
  const int win = a.mask_window;
  const auto& f2v = feats.f2.value();
  const auto& f3v = feats.f3.value();
  Var<S> c2 = roi_crop(feats.f2, feature_box(box, 4, f2v.dim(2), f2v.dim(1)), win);
  Var<S> c3 = roi_crop(feats.f3, feature_box(box, 8, f3v.dim(2), f3v.dim(1)), win);
  Var<S> x = reshape(concat_channels(c2, c3), {1, a.mask_in_channels(), win, win});
  for (int j = 0; j < a.mask_convs; ++j) {
    const auto& conv = bm.layers[static_cast<size_t>(a.mask_conv_index(j))];
    const auto& gn = bm.layers[static_cast<size_t>(a.mask_gn_index(j))];
    x = relu(group_norm(conv2d(x, conv.w, conv.b, 1, 1), a.gn_groups, gn.w, gn.b));
  }
  const auto& out = bm.layers[static_cast<size_t>(a.mask_out_index())];
  x = conv2d(x, out.w, out.b, 1, 0);
  return channel_softmax(reshape(x, {2, win, win}));
}

inline Vec4 to_vec4(const Tensor<double>& t) {
  require<SizeError>(t.numel() == 4, "to_vec4: expected 4 elements");
  return Vec4(t.data[0], t.data[1], t.data[2], t.data[3]);
}
inline Vec4 to_vec4(const Tensor<float>& t) {
  require<SizeError>(t.numel() == 4, "to_vec4: expected 4 elements");
  return Vec4(t.data[0], t.data[1], t.data[2], t.data[3]);
}

/// Pastes the foreground channel of a window-local mask into frame
/// coordinates: bilinearly resized to the box's pixel rectangle, zero
/// elsewhere.
template <class S>
Tensor<S> assemble_full_mask(const Tensor<S>& mask_local, const Box& box, int H, int W) {
  require<ShapeError>(mask_local.rank() == 3 && mask_local.dim(0) == 2,
                      "assemble_full_mask: mask_local must be [2,w,w]");
  const int x0 = std::clamp(static_cast<int>(std::lround(box.x0())), 0, W - 1);
  const int x1 = std::clamp(static_cast<int>(std::lround(box.x1())), x0 + 1, W);
  const int y0 = std::clamp(static_cast<int>(std::lround(box.y0())), 0, H - 1);
  const int y1 = std::clamp(static_cast<int>(std::lround(box.y1())), y0 + 1, H);
  const int wl = mask_local.dim(1);
  const Eigen::Index pix = static_cast<Eigen::Index>(wl) * wl;
  Tensor<S> fg({1, wl, wl}, mask_local.data.segment(pix, pix));
  Graph<S> g;
  g.set_grad_enabled(false);
  Tensor<S> resized = bilinear_resize(g.constant(std::move(fg)), y1 - y0, x1 - x0).value();
  Tensor<S> canvas = Tensor<S>::zeros({H, W});
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      canvas.data[static_cast<Eigen::Index>(y) * W + x] =
          resized.data[static_cast<Eigen::Index>(y - y0) * (x1 - x0) + (x - x0)];
  return canvas;
}

/// Nearest-neighbor crop of a binary mask onto the roi_crop sampling grid.
inline Mask crop_mask_nearest(const Mask& m, const Box& box, int window) {
  require<BoxError>(box.w >= 1.0 && box.h >= 1.0, "crop_mask_nearest: degenerate box");
  Mask out(window, window);
  for (int i = 0; i < window; ++i) {
    const double sy = box.y0() + (i + 0.5) * box.h / window - 0.5;
    const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, m.h - 1);
    for (int j = 0; j < window; ++j) {
      const double sx = box.x0() + (j + 0.5) * box.w / window - 0.5;
      const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, m.w - 1);
      out.at(i, j) = m.at(iy, ix) ? 1 : 0;
    }
  }
  return out;
}

template <class S>
struct Prediction {
  Box box;               // chosen box, clipped to the frame, score = consensus
  Tensor<S> mask_local;  // [2,window,window] probabilities
  Tensor<S> mask_full;   // [H,W] foreground probability, zero outside box
  bool full_frame_fallback = false;
};

/// Inference forward: refines each prior (or predicts from the full frame
/// when none are given), picks the refinement with the highest consensus
/// score, and segments inside it. Degenerate boxes fall back to full frame.
template <class S>
Prediction<S> forward(const ModelParams<S>& params, const Tensor<S>& frame,
                      const std::vector<Box>& box_priors = {}) {
  Graph<S> g;
  g.set_grad_enabled(false);
  BoundModel<S> bm = bind_params(g, params, false);
  Features<S> feats = backbone_forward(bm, g.constant(frame));
  const int H = feats.H, W = feats.W;
  const Box ff = full_frame_box(W, H);

  std::vector<Box> refined;
  if (box_priors.empty()) {
    refined.push_back(decode_box_delta(ff, to_vec4(box_head_forward(bm, feats, ff).value())));
  } else {
    refined.reserve(box_priors.size());
    for (const Box& p : box_priors) {
      const Box pc = clip_box(p, W, H, 1.0);
      refined.push_back(
          decode_box_delta(pc, to_vec4(box_head_forward(bm, feats, pc).value())));
    }
  }

  // consensus: mean IoU with the other refinements (1 when alone)
  size_t best = 0;
  double best_score = -1.0;
  for (size_t i = 0; i < refined.size(); ++i) {
    double score = 1.0;
    if (refined.size() > 1) {
      double acc = 0.0;
      for (size_t j = 0; j < refined.size(); ++j)
        if (j != i) acc += box_iou(refined[i], refined[j]);
      score = acc / static_cast<double>(refined.size() - 1);
    }
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }

  Prediction<S> out;
  Box chosen = refined[best];
  if (chosen.w < 1.0 || chosen.h < 1.0) {
    chosen = ff;
    out.full_frame_fallback = true;
  }
  chosen = clip_box(chosen, W, H, 1.0);
  chosen.score = best_score;
  out.box = chosen;
  out.mask_local = mask_head_forward(bm, feats, chosen).value();
  out.mask_full = assemble_full_mask(out.mask_local, chosen, H, W);
  return out;
}

/// [3,H,W] tensor in [0,1] from an interleaved 8-bit RGB image.
template <class S>
Tensor<S> image_to_tensor(const Image& img) {
  Tensor<S> t({3, img.h, img.w});
  const Eigen::Index pix = static_cast<Eigen::Index>(img.h) * img.w;
  for (Eigen::Index i = 0; i < pix; ++i)
    for (int c = 0; c < 3; ++c)
      t.data[c * pix + i] = static_cast<S>(img.rgb[static_cast<size_t>(i * 3 + c)]) / S(255);
  return t;
}

/// Binary mask from a [H,W] probability map.
template <class S>
Mask mask_from_prob(const Tensor<S>& prob, double threshold = 0.5) {
  require<ShapeError>(prob.rank() == 2, "mask_from_prob: rank-2 input required");
  Mask m(prob.dim(0), prob.dim(1));
  for (Eigen::Index i = 0; i < prob.numel(); ++i)
    m.v[static_cast<size_t>(i)] = static_cast<double>(prob.data[i]) >= threshold ? 1 : 0;
  return m;
}

}  // namespace metaseg
