#pragma once

#include <cmath>
#include <vector>

#include "metaseg/box.hpp"
#include "metaseg/graph.hpp"

namespace metaseg {

template <class S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecC = Eigen::Matrix<S, Eigen::Dynamic, 1>;

namespace detail {

template <class S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  require<SizeError>(a.value().same_shape(b.value()),
                     std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
}

}  // namespace detail

// ---- elementwise arithmetic ----

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> out(a.value().shape, a.value().data + b.value().data);
  const int ai = a.id, bi = b.id;
  return a.g->op("add", std::move(out), {ai, bi},
                 [ai, bi](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout);
                   g.accum(bi, gout);
                 });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out(a.value().shape, a.value().data - b.value().data);
  const int ai = a.id, bi = b.id;
  return a.g->op("sub", std::move(out), {ai, bi},
                 [ai, bi](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout);
                   g.accum(bi, -gout);
                 });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out(a.value().shape, a.value().data * b.value().data);
  const int ai = a.id, bi = b.id;
  return a.g->op("mul", std::move(out), {ai, bi},
                 [ai, bi](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout * g.val(bi).data);
                   g.accum(bi, gout * g.val(ai).data);
                 });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tensor<S> out(a.value().shape, a.value().data * c);
  const int ai = a.id;
  return a.g->op("scale", std::move(out), {ai},
                 [ai, c](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout * c);
                 });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
  Tensor<S> out(a.value().shape, a.value().data + c);
  const int ai = a.id;
  return a.g->op("add_scalar", std::move(out), {ai},
                 [ai](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout);
                 });
}

/// y_i = s_i * a_i + o_i with constant coefficient vectors.
template <class S>
Var<S> affine_vec(Var<S> a, typename Tensor<S>::Array s, typename Tensor<S>::Array o) {
  require<SizeError>(s.size() == a.numel() && o.size() == a.numel(),
                     "affine_vec: coefficient size mismatch");
  Tensor<S> out(a.value().shape, a.value().data * s + o);
  const int ai = a.id;
  return a.g->op("affine_vec", std::move(out), {ai},
                 [ai, s = std::move(s)](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout * s);
                 });
}

// ---- elementwise nonlinearities ----

template <class S>
Var<S> relu(Var<S> a) {
  Tensor<S> out(a.value().shape, a.value().data.max(S(0)));
  const int ai = a.id;
  return a.g->op("relu", std::move(out), {ai},
                 [ai](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, (g.val(ai).data > S(0)).select(gout, S(0)));
                 });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tensor<S> out(a.value().shape, a.value().data.unaryExpr([](S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                     : std::exp(x) / (S(1) + std::exp(x));
  }));
  const int ai = a.id;
  return a.g->op("sigmoid", std::move(out), {ai},
                 [ai](Graph<S>& g, const typename Graph<S>::Array& gout, int self) {
                   const auto& y = g.val(self).data;
                   g.accum(ai, gout * y * (S(1) - y));
                 });
}

/// Elementwise Huber: 0.5 x^2 for |x| <= delta, else delta (|x| - delta/2).
template <class S>
Var<S> huber(Var<S> a, S delta = S(1)) {
  Tensor<S> out(a.value().shape, a.value().data.unaryExpr([delta](S x) {
    const S ax = std::abs(x);
    return ax <= delta ? S(0.5) * x * x : delta * (ax - S(0.5) * delta);
  }));
  const int ai = a.id;
  return a.g->op("huber", std::move(out), {ai},
                 [ai, delta](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout * g.val(ai).data.min(delta).max(-delta));
                 });
}

// ---- reductions and reindexing ----

template <class S>
Var<S> sum(Var<S> a) {
  Tensor<S> out = Tensor<S>::scalar(a.value().data.sum());
  const int ai = a.id;
  const Eigen::Index n = a.numel();
  return a.g->op("sum", std::move(out), {ai},
                 [ai, n](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, Graph<S>::Array::Constant(n, gout[0]));
                 });
}

template <class S>
Var<S> mean(Var<S> a) {
  const Eigen::Index n = a.numel();
  Tensor<S> out = Tensor<S>::scalar(a.value().data.sum() / static_cast<S>(n));
  const int ai = a.id;
  return a.g->op("mean", std::move(out), {ai},
                 [ai, n](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, Graph<S>::Array::Constant(n, gout[0] / static_cast<S>(n)));
                 });
}

/// Scalar product with a constant weight vector.
template <class S>
Var<S> dot_const(Var<S> a, typename Tensor<S>::Array w) {
  require<SizeError>(w.size() == a.numel(), "dot_const: weight size mismatch");
  Tensor<S> out = Tensor<S>::scalar((a.value().data * w).sum());
  const int ai = a.id;
  return a.g->op("dot_const", std::move(out), {ai},
                 [ai, w = std::move(w)](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout[0] * w);
                 });
}

/// out[k] = a.flat[idx[k]]. Duplicate indices accumulate in the VJP.
template <class S>
Var<S> gather(Var<S> a, std::vector<Eigen::Index> idx) {
  const auto& av = a.value();
  Tensor<S> out({static_cast<int>(idx.size())});
  for (size_t k = 0; k < idx.size(); ++k) {
    require<SizeError>(idx[k] >= 0 && idx[k] < av.numel(), "gather: index out of range");
    out.data[static_cast<Eigen::Index>(k)] = av.data[idx[k]];
  }
  const int ai = a.id;
  const Eigen::Index n = av.numel();
  return a.g->op("gather", std::move(out), {ai},
                 [ai, n, idx = std::move(idx)](Graph<S>& g,
                                               const typename Graph<S>::Array& gout, int) {
                   typename Graph<S>::Array da = Graph<S>::Array::Zero(n);
                   for (size_t k = 0; k < idx.size(); ++k)
                     da[idx[k]] += gout[static_cast<Eigen::Index>(k)];
                   g.accum(ai, da);
                 });
}

template <class S>
Var<S> reshape(Var<S> a, std::vector<int> sh) {
  require<SizeError>(Tensor<S>::numel_of(sh) == a.numel(), "reshape: numel mismatch");
  Tensor<S> out(std::move(sh), a.value().data);
  const int ai = a.id;
  return a.g->op("reshape", std::move(out), {ai},
                 [ai](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout);
                 });
}

/// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]; flat layout makes this a plain append.
template <class S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require<ShapeError>(av.rank() == 3 && bv.rank() == 3, "concat_channels: rank-3 inputs required");
  require<SizeError>(av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
                     "concat_channels: spatial shape mismatch");
  Tensor<S> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  out.data << av.data, bv.data;
  const int ai = a.id, bi = b.id;
  const Eigen::Index na = av.numel(), nb = bv.numel();
  return a.g->op("concat_channels", std::move(out), {ai, bi},
                 [ai, bi, na, nb](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   g.accum(ai, gout.head(na));
                   g.accum(bi, gout.tail(nb));
                 });
}

template <class S>
Var<S> select_channel(Var<S> x, int c) {
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 3, "select_channel: rank-3 input required");
  require<SizeError>(c >= 0 && c < xv.dim(0), "select_channel: channel out of range");
  const Eigen::Index pix = static_cast<Eigen::Index>(xv.dim(1)) * xv.dim(2);
  Tensor<S> out({xv.dim(1), xv.dim(2)}, xv.data.segment(c * pix, pix));
  const int xi = x.id;
  const Eigen::Index n = xv.numel();
  return x.g->op("select_channel", std::move(out), {xi},
                 [xi, c, pix, n](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   typename Graph<S>::Array dx = Graph<S>::Array::Zero(n);
                   dx.segment(c * pix, pix) = gout;
                   g.accum(xi, dx);
                 });
}

/// Softmax over the channel axis of a [C,H,W] tensor.
template <class S>
Var<S> channel_softmax(Var<S> x) {
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 3, "channel_softmax: rank-3 input required");
  const int C = xv.dim(0);
  const Eigen::Index pix = static_cast<Eigen::Index>(xv.dim(1)) * xv.dim(2);
  Tensor<S> out(xv.shape);
  for (Eigen::Index p = 0; p < pix; ++p) {
    S mx = xv.data[p];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xv.data[c * pix + p]);
    S z = S(0);
    for (int c = 0; c < C; ++c) {
      const S e = std::exp(xv.data[c * pix + p] - mx);
      out.data[c * pix + p] = e;
      z += e;
    }
    for (int c = 0; c < C; ++c) out.data[c * pix + p] /= z;
  }
  const int xi = x.id;
  return x.g->op("channel_softmax", std::move(out), {xi},
                 [xi, C, pix](Graph<S>& g, const typename Graph<S>::Array& gout, int self) {
                   const auto& y = g.val(self).data;
                   typename Graph<S>::Array dx(y.size());
                   for (Eigen::Index p = 0; p < pix; ++p) {
                     S s = S(0);
                     for (int c = 0; c < C; ++c) s += y[c * pix + p] * gout[c * pix + p];
                     for (int c = 0; c < C; ++c)
                       dx[c * pix + p] = y[c * pix + p] * (gout[c * pix + p] - s);
                   }
                   g.accum(xi, dx);
                 });
}

// ---- dense layers ----

/// x: [K] vector, w: [O,K], b: [O] -> [O].
template <class S>
Var<S> fc(Var<S> x, Var<S> w, Var<S> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require<ShapeError>(xv.rank() == 1 && wv.rank() == 2 && bv.rank() == 1,
                      "fc: expected x[K], w[O,K], b[O]");
  const int K = xv.dim(0), O = wv.dim(0);
  require<SizeError>(wv.dim(1) == K && bv.dim(0) == O, "fc: dimension mismatch");
  Tensor<S> out({O});
  Eigen::Map<const MatR<S>> Wm(wv.data.data(), O, K);
  Eigen::Map<const VecC<S>> xm(xv.data.data(), K);
  Eigen::Map<VecC<S>> om(out.data.data(), O);
  om.noalias() = Wm * xm;
  out.data += bv.data;
  const int xi = x.id, wi = w.id, bi = b.id;
  return x.g->op("fc", std::move(out), {xi, wi, bi},
                 [xi, wi, bi, K, O](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   Eigen::Map<const MatR<S>> Wm(g.val(wi).data.data(), O, K);
                   Eigen::Map<const VecC<S>> xm(g.val(xi).data.data(), K);
                   Eigen::Map<const VecC<S>> gm(gout.data(), O);
                   if (g.requires_grad(xi)) {
                     typename Graph<S>::Array dx(K);
                     Eigen::Map<VecC<S>>(dx.data(), K).noalias() = Wm.transpose() * gm;
                     g.accum(xi, dx);
                   }
                   if (g.requires_grad(wi)) {
                     typename Graph<S>::Array dw(O * K);
                     Eigen::Map<MatR<S>>(dw.data(), O, K).noalias() = gm * xm.transpose();
                     g.accum(wi, dw);
                   }
                   g.accum(bi, gout);
                 });
}

// ---- spatial ops ----

namespace detail {

struct ConvDims {
  int N, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
  Eigen::Index K() const { return static_cast<Eigen::Index>(C) * kh * kw; }
  Eigen::Index P() const { return static_cast<Eigen::Index>(Ho) * Wo; }
};

/// Fills colsT (K x P) with the unfolded receptive fields of sample n.
template <class S>
void im2col(const Tensor<S>& x, int n, const ConvDims& d, MatR<S>& colsT) {
  colsT.setZero(d.K(), d.P());
  for (int ci = 0; ci < d.C; ++ci)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * d.kh + ky) * d.kw + kx;
        for (int oh = 0; oh < d.Ho; ++oh) {
          const int ih = oh * d.stride - d.pad + ky;
          if (ih < 0 || ih >= d.H) continue;
          for (int ow = 0; ow < d.Wo; ++ow) {
            const int iw = ow * d.stride - d.pad + kx;
            if (iw < 0 || iw >= d.W) continue;
            colsT(row, static_cast<Eigen::Index>(oh) * d.Wo + ow) = x.at4(n, ci, ih, iw);
          }
        }
      }
}

/// Scatter-adds dColsT (K x P) back into sample n of dx.
template <class S>
void col2im(const MatR<S>& dColsT, int n, const ConvDims& d, Tensor<S>& dx) {
  for (int ci = 0; ci < d.C; ++ci)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * d.kh + ky) * d.kw + kx;
        for (int oh = 0; oh < d.Ho; ++oh) {
          const int ih = oh * d.stride - d.pad + ky;
          if (ih < 0 || ih >= d.H) continue;
          for (int ow = 0; ow < d.Wo; ++ow) {
            const int iw = ow * d.stride - d.pad + kx;
            if (iw < 0 || iw >= d.W) continue;
            dx.at4(n, ci, ih, iw) += dColsT(row, static_cast<Eigen::Index>(oh) * d.Wo + ow);
          }
        }
      }
}

}  // namespace detail

/// x: [N,C,H,W], k: [O,C,kh,kw], b: [O]. Zero padding, floor output size.
template <class S>
Var<S> conv2d(Var<S> x, Var<S> k, Var<S> b, int stride = 1, int pad = 0) {
  const auto& xv = x.value();
  const auto& kv = k.value();
  const auto& bv = b.value();
  require<ShapeError>(xv.rank() == 4 && kv.rank() == 4 && bv.rank() == 1,
                      "conv2d: expected x[N,C,H,W], k[O,C,kh,kw], b[O]");
  require<SizeError>(kv.dim(1) == xv.dim(1), "conv2d: channel mismatch");
  require<SizeError>(bv.dim(0) == kv.dim(0), "conv2d: bias size mismatch");
  require<ConfigError>(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  detail::ConvDims d;
  d.N = xv.dim(0);
  d.C = xv.dim(1);
  d.H = xv.dim(2);
  d.W = xv.dim(3);
  d.O = kv.dim(0);
  d.kh = kv.dim(2);
  d.kw = kv.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  require<SizeError>(d.H + 2 * pad >= d.kh && d.W + 2 * pad >= d.kw,
                     "conv2d: kernel larger than padded input");

  Tensor<S> out({d.N, d.O, d.Ho, d.Wo});
  Eigen::Map<const MatR<S>> Wm(kv.data.data(), d.O, d.K());
  Eigen::Map<const VecC<S>> bm(bv.data.data(), d.O);
  MatR<S> colsT;
  for (int n = 0; n < d.N; ++n) {
    detail::im2col(xv, n, d, colsT);
    Eigen::Map<MatR<S>> om(out.data.data() + static_cast<Eigen::Index>(n) * d.O * d.P(), d.O,
                           d.P());
    om.noalias() = Wm * colsT;
    om.colwise() += bm;
  }

  const int xi = x.id, ki = k.id, bi = b.id;
  return x.g->op(
      "conv2d", std::move(out), {xi, ki, bi},
      [xi, ki, bi, d](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
        const auto& xv = g.val(xi);
        const auto& kv = g.val(ki);
        const bool need_x = g.requires_grad(xi);
        const bool need_k = g.requires_grad(ki);
        const bool need_b = g.requires_grad(bi);
        Eigen::Map<const MatR<S>> Wm(kv.data.data(), d.O, d.K());
        typename Graph<S>::Array db;
        typename Graph<S>::Array dw;
        Tensor<S> dx;
        if (need_b) db = Graph<S>::Array::Zero(d.O);
        if (need_k) dw = Graph<S>::Array::Zero(kv.numel());
        if (need_x) dx = Tensor<S>::zeros(xv.shape);
        MatR<S> colsT, dColsT;
        for (int n = 0; n < d.N; ++n) {
          Eigen::Map<const MatR<S>> gm(gout.data() + static_cast<Eigen::Index>(n) * d.O * d.P(),
                                       d.O, d.P());
          if (need_b)
            Eigen::Map<VecC<S>>(db.data(), d.O) += gm.rowwise().sum();
          if (need_k) {
            detail::im2col(xv, n, d, colsT);
            Eigen::Map<MatR<S>>(dw.data(), d.O, d.K()).noalias() += gm * colsT.transpose();
          }
          if (need_x) {
            dColsT.noalias() = Wm.transpose() * gm;
            detail::col2im(dColsT, n, d, dx);
          }
        }
        if (need_b) g.accum(bi, db);
        if (need_k) g.accum(ki, dw);
        if (need_x) g.accum(xi, dx.data);
      });
}

/// Normalizes channel groups of x: [N,C,H,W] to zero mean / unit variance,
/// then applies per-channel scale and shift.
template <class S>
Var<S> group_norm(Var<S> x, int groups, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  require<ShapeError>(xv.rank() == 4, "group_norm: expected x[N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require<ConfigError>(groups >= 1 && C % groups == 0, "group_norm: C must divide by groups");
  require<SizeError>(gv.numel() == C && bv.numel() == C, "group_norm: affine size mismatch");
  const int cpg = C / groups;
  const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
  const Eigen::Index m = cpg * hw;

  Tensor<S> out(xv.shape);
  std::vector<S> mu(static_cast<size_t>(N) * groups), inv(static_cast<size_t>(N) * groups);
  for (int n = 0; n < N; ++n)
    for (int gidx = 0; gidx < groups; ++gidx) {
      const Eigen::Index off = (static_cast<Eigen::Index>(n) * C + gidx * cpg) * hw;
      auto seg = xv.data.segment(off, m);
      const S mean = seg.mean();
      const S var = (seg - mean).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      mu[static_cast<size_t>(n) * groups + gidx] = mean;
      inv[static_cast<size_t>(n) * groups + gidx] = is;
      for (int c = 0; c < cpg; ++c) {
        const int ch = gidx * cpg + c;
        out.data.segment(off + c * hw, hw) =
            (xv.data.segment(off + c * hw, hw) - mean) * is * gv.data[ch] + bv.data[ch];
      }
    }

  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return x.g->op(
      "group_norm", std::move(out), {xi, gi, bi},
      [xi, gi, bi, N, C, groups, cpg, hw, m, mu = std::move(mu),
       inv = std::move(inv)](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
        const auto& xv = g.val(xi);
        const auto& gv = g.val(gi);
        const bool need_x = g.requires_grad(xi);
        typename Graph<S>::Array dgamma = Graph<S>::Array::Zero(C);
        typename Graph<S>::Array dbeta = Graph<S>::Array::Zero(C);
        typename Graph<S>::Array dx;
        if (need_x) dx = Graph<S>::Array::Zero(xv.numel());
        typename Graph<S>::Array xhat(m), dxhat(m);
        for (int n = 0; n < N; ++n)
          for (int gidx = 0; gidx < groups; ++gidx) {
            const Eigen::Index off = (static_cast<Eigen::Index>(n) * C + gidx * cpg) * hw;
            const S mean = mu[static_cast<size_t>(n) * groups + gidx];
            const S is = inv[static_cast<size_t>(n) * groups + gidx];
            xhat = (xv.data.segment(off, m) - mean) * is;
            for (int c = 0; c < cpg; ++c) {
              const int ch = gidx * cpg + c;
              auto go = gout.segment(off + c * hw, hw);
              dgamma[ch] += (go * xhat.segment(c * hw, hw)).sum();
              dbeta[ch] += go.sum();
              if (need_x) dxhat.segment(c * hw, hw) = go * gv.data[ch];
            }
            if (need_x) {
              const S mean_dxhat = dxhat.mean();
              const S mean_dxhat_xhat = (dxhat * xhat).mean();
              dx.segment(off, m) = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
          }
        if (need_x) g.accum(xi, dx);
        g.accum(gi, dgamma);
        g.accum(bi, dbeta);
      });
}

/// 2x2 max pooling with stride 2; ties resolve to the first element in scan
/// order, which keeps the subgradient deterministic.
template <class S>
Var<S> maxpool2(Var<S> x) {
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 4, "maxpool2: expected x[N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require<SizeError>(H % 2 == 0 && W % 2 == 0, "maxpool2: odd spatial size");
  const int Ho = H / 2, Wo = W / 2;
  Tensor<S> out({N, C, Ho, Wo});
  std::vector<Eigen::Index> arg(static_cast<size_t>(out.numel()));
  Eigen::Index oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          S best = xv.at4(n, c, 2 * oh, 2 * ow);
          Eigen::Index bidx =
              ((static_cast<Eigen::Index>(n) * C + c) * H + 2 * oh) * W + 2 * ow;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx2 = 0; dx2 < 2; ++dx2) {
              const Eigen::Index idx =
                  ((static_cast<Eigen::Index>(n) * C + c) * H + 2 * oh + dy) * W + 2 * ow + dx2;
              if (xv.data[idx] > best) {
                best = xv.data[idx];
                bidx = idx;
              }
            }
          out.data[oi] = best;
          arg[static_cast<size_t>(oi)] = bidx;
        }
  const int xi = x.id;
  const Eigen::Index n_in = xv.numel();
  return x.g->op("maxpool2", std::move(out), {xi},
                 [xi, n_in, arg = std::move(arg)](Graph<S>& g,
                                                  const typename Graph<S>::Array& gout, int) {
                   typename Graph<S>::Array dx = Graph<S>::Array::Zero(n_in);
                   for (size_t i = 0; i < arg.size(); ++i)
                     dx[arg[i]] += gout[static_cast<Eigen::Index>(i)];
                   g.accum(xi, dx);
                 });
}

/// Mean over the spatial extent of a [C,h,w] tensor -> [C].
template <class S>
Var<S> spatial_mean(Var<S> x) {
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 3, "spatial_mean: rank-3 input required");
  const int C = xv.dim(0);
  const Eigen::Index hw = static_cast<Eigen::Index>(xv.dim(1)) * xv.dim(2);
  Tensor<S> out({C});
  for (int c = 0; c < C; ++c) out.data[c] = xv.data.segment(c * hw, hw).mean();
  const int xi = x.id;
  return x.g->op("spatial_mean", std::move(out), {xi},
                 [xi, C, hw](Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   typename Graph<S>::Array dx(C * hw);
                   for (int c = 0; c < C; ++c)
                     dx.segment(c * hw, hw).setConstant(gout[c] / static_cast<S>(hw));
                   g.accum(xi, dx);
                 });
}

namespace detail {

/// Shared bilinear sampling core for roi_crop and bilinear_resize.
/// Samples a (Ho x Wo) grid over the window [x0,x0+bw) x [y0,y0+bh) with
/// half-pixel centers and border replication.
template <class S>
struct BilinearPlan {
  int Ho, Wo;
  std::vector<int> ix0, ix1, iy0, iy1;  // per column / per row taps
  std::vector<S> ax, ay;                // interpolation weights toward the *1 tap

  BilinearPlan(double y0, double x0, double bh, double bw, int Ho_, int Wo_, int H, int W)
      : Ho(Ho_), Wo(Wo_), ix0(Wo_), ix1(Wo_), iy0(Ho_), iy1(Ho_), ax(Wo_), ay(Ho_) {
    for (int j = 0; j < Wo; ++j) {
      const double sx = x0 + (j + 0.5) * bw / Wo - 0.5;
      const double fl = std::floor(sx);
      ax[j] = static_cast<S>(sx - fl);
      ix0[j] = std::clamp(static_cast<int>(fl), 0, W - 1);
      ix1[j] = std::clamp(static_cast<int>(fl) + 1, 0, W - 1);
    }
    for (int i = 0; i < Ho; ++i) {
      const double sy = y0 + (i + 0.5) * bh / Ho - 0.5;
      const double fl = std::floor(sy);
      ay[i] = static_cast<S>(sy - fl);
      iy0[i] = std::clamp(static_cast<int>(fl), 0, H - 1);
      iy1[i] = std::clamp(static_cast<int>(fl) + 1, 0, H - 1);
    }
  }
};

template <class S>
Var<S> bilinear_sample(Var<S> x, double y0, double x0, double bh, double bw, int Ho, int Wo,
                       const char* opname) {
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 3, std::string(opname) + ": rank-3 input required");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  BilinearPlan<S> plan(y0, x0, bh, bw, Ho, Wo, H, W);
  const Eigen::Index hw_in = static_cast<Eigen::Index>(H) * W;
  const Eigen::Index hw_out = static_cast<Eigen::Index>(Ho) * Wo;
  Tensor<S> out({C, Ho, Wo});
  for (int c = 0; c < C; ++c) {
    const S* src = xv.data.data() + c * hw_in;
    S* dst = out.data.data() + c * hw_out;
    for (int i = 0; i < Ho; ++i) {
      const S b = plan.ay[i];
      const S* r0 = src + static_cast<Eigen::Index>(plan.iy0[i]) * W;
      const S* r1 = src + static_cast<Eigen::Index>(plan.iy1[i]) * W;
      for (int j = 0; j < Wo; ++j) {
        const S a = plan.ax[j];
        dst[static_cast<Eigen::Index>(i) * Wo + j] =
            (S(1) - b) * ((S(1) - a) * r0[plan.ix0[j]] + a * r0[plan.ix1[j]]) +
            b * ((S(1) - a) * r1[plan.ix0[j]] + a * r1[plan.ix1[j]]);
      }
    }
  }
  const int xi = x.id;
  return x.g->op(opname, std::move(out), {xi},
                 [xi, C, W, hw_in, hw_out, plan = std::move(plan)](
                     Graph<S>& g, const typename Graph<S>::Array& gout, int) {
                   typename Graph<S>::Array dx =
                       Graph<S>::Array::Zero(static_cast<Eigen::Index>(C) * hw_in);
                   for (int c = 0; c < C; ++c) {
                     S* dst = dx.data() + c * hw_in;
                     const S* go = gout.data() + c * hw_out;
                     for (int i = 0; i < plan.Ho; ++i) {
                       const S b = plan.ay[i];
                       S* r0 = dst + static_cast<Eigen::Index>(plan.iy0[i]) * W;
                       S* r1 = dst + static_cast<Eigen::Index>(plan.iy1[i]) * W;
                       for (int j = 0; j < plan.Wo; ++j) {
                         const S a = plan.ax[j];
                         const S gv = go[static_cast<Eigen::Index>(i) * plan.Wo + j];
                         r0[plan.ix0[j]] += (S(1) - b) * (S(1) - a) * gv;
                         r0[plan.ix1[j]] += (S(1) - b) * a * gv;
                         r1[plan.ix0[j]] += b * (S(1) - a) * gv;
                         r1[plan.ix1[j]] += b * a * gv;
                       }
                     }
                   }
                   g.accum(xi, dx);
                 });
}

}  // namespace detail

/// Crops `box` (in the feature map's own pixel coordinates) to a fixed
/// window x window grid via bilinear interpolation. The box must span at
/// least one pixel on each side.
template <class S>
Var<S> roi_crop(Var<S> x, const Box& box, int window) {
  require<BoxError>(box.w >= 1.0 && box.h >= 1.0, "roi_crop: degenerate box");
  require<ConfigError>(window >= 1, "roi_crop: window must be positive");
  return detail::bilinear_sample(x, box.y0(), box.x0(), box.h, box.w, window, window, "roi_crop");
}

/// Resizes a [C,h,w] tensor to [C,H,W] with half-pixel-center bilinear
/// interpolation (identity when sizes match).
template <class S>
Var<S> bilinear_resize(Var<S> x, int H, int W) {
  require<ConfigError>(H >= 1 && W >= 1, "bilinear_resize: target size must be positive");
  const auto& xv = x.value();
  require<ShapeError>(xv.rank() == 3, "bilinear_resize: rank-3 input required");
  return detail::bilinear_sample(x, 0.0, 0.0, static_cast<double>(xv.dim(1)),
                                 static_cast<double>(xv.dim(2)), H, W, "bilinear_resize");
}

}  // namespace metaseg
