#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metaseg/grad_check.hpp"

using namespace metaseg;

using T = Tensor<double>;
using G = Graph<double>;
using V = Var<double>;

namespace {

// Independent 6-nested-loop convolution reference.
T conv2d_naive(const T& x, const T& k, const T& b, int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  T out({N, O, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = b.data[o];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int ih = oh * stride - pad + ky;
                const int iw = ow * stride - pad + kx;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.at4(n, c, ih, iw) * k.at4(o, c, ky, kx);
              }
          out.at4(n, o, oh, ow) = acc;
        }
  return out;
}

// Pointwise bilinear interpolation at a single continuous coordinate,
// half-pixel centers, border replication. Independent of the op code.
double bilerp_ref(const T& x, int c, double sy, double sx) {
  const int H = x.dim(1), W = x.dim(2);
  const double u = sx - 0.5, v = sy - 0.5;
  const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
  const double a = u - x0, b = v - y0;
  auto px = [&](int yy, int xx) {
    return x.at3(c, std::clamp(yy, 0, H - 1), std::clamp(xx, 0, W - 1));
  };
  return (1 - b) * ((1 - a) * px(y0, x0) + a * px(y0, x0 + 1)) +
         b * ((1 - a) * px(y0 + 1, x0) + a * px(y0 + 1, x0 + 1));
}

}  // namespace

TEST_CASE("conv2d forward examples") {
  // zero input -> bias everywhere
  {
    G g;
    auto x = g.constant(T::zeros({1, 1, 3, 3}));
    auto k = g.constant(T::from({1, 1, 2, 2}, {0.3, -0.1, 0.7, 2.0}));
    auto b = g.constant(T::from({1}, {0.25}));
    auto y = conv2d(x, k, b, 1, 0);
    for (Eigen::Index i = 0; i < y.numel(); ++i) CHECK(y.value().data[i] == 0.25);
  }
  // scalar kernel acts as scaling
  {
    G g;
    auto x = g.constant(T::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    auto k = g.constant(T::from({1, 1, 1, 1}, {2}));
    auto b = g.constant(T::from({1}, {0}));
    auto y = conv2d(x, k, b, 1, 0);
    CHECK(y.value().data[0] == 2);
    CHECK(y.value().data[1] == 4);
    CHECK(y.value().data[2] == 6);
    CHECK(y.value().data[3] == 8);
  }
}

TEST_CASE("conv2d matches naive reference") {
  Rng rng(7);
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + trial % 2, pad = trial % 3;
    T x = random_normal<double>({1, 2, 5, 5}, rng);
    T k = random_normal<double>({3, 2, 3, 3}, rng);
    T b = random_normal<double>({3}, rng);
    G g;
    auto y = conv2d(g.constant(x), g.constant(k), g.constant(b), stride, pad);
    T ref = conv2d_naive(x, k, b, stride, pad);
    REQUIRE(y.value().shape == ref.shape);
    CHECK(((y.value().data - ref.data).abs().maxCoeff()) < 1e-12);
  }
}

TEST_CASE("group_norm examples") {
  {
    G g;
    auto x = g.constant(T::full({1, 4, 2, 2}, 3.7));
    auto gamma = g.constant(T::full({4}, 1.0));
    auto beta = g.constant(T::full({4}, 0.0));
    auto y = group_norm(x, 2, gamma, beta);
    CHECK(y.value().data.abs().maxCoeff() == 0.0);
  }
  {
    G g;
    auto x = g.constant(T::full({1, 4, 2, 2}, 3.7));
    auto gamma = g.constant(T::full({4}, 1.0));
    auto beta = g.constant(T::full({4}, 0.3));
    auto y = group_norm(x, 2, gamma, beta);
    CHECK(((y.value().data - 0.3).abs().maxCoeff()) < 1e-15);
  }
  {
    // single group, [1,2,3,4]: out = (x - 2.5)/sqrt(1.25 + 1e-5)
    G g;
    auto x = g.constant(T::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    auto y = group_norm(x, 1, g.constant(T::full({1}, 1.0)), g.constant(T::full({1}, 0.0)),
                        1e-5);
    for (int i = 0; i < 4; ++i) {
      const double expect = (1.0 + i - 2.5) / std::sqrt(1.25 + 1e-5);
      CHECK(std::abs(y.value().data[i] - expect) < 1e-12);
    }
  }
  // normalization invariant: per-group mean ~0, var ~1
  {
    Rng rng(3);
    T x = random_normal<double>({2, 8, 4, 4}, rng, 5.0);
    G g;
    auto y = group_norm(g.constant(x), 4, g.constant(T::full({8}, 1.0)),
                        g.constant(T::full({8}, 0.0)));
    const auto& yv = y.value();
    for (int n = 0; n < 2; ++n)
      for (int grp = 0; grp < 4; ++grp) {
        double s = 0, s2 = 0;
        for (int c = grp * 2; c < grp * 2 + 2; ++c)
          for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w) {
              const double v = yv.at4(n, c, h, w);
              s += v;
              s2 += v * v;
            }
        const double mean = s / 32, var = s2 / 32 - mean * mean;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
      }
  }
  G g;
  CHECK_THROWS_AS(group_norm(g.constant(T::zeros({1, 3, 2, 2})), 2,
                             g.constant(T::full({3}, 1.0)), g.constant(T::full({3}, 0.0))),
                  ConfigError);
}

TEST_CASE("roi_crop examples") {
  {
    // full box, window == size -> identity
    Rng rng(11);
    T x = random_normal<double>({2, 4, 4}, rng);
    G g;
    auto y = roi_crop(g.constant(x), full_frame_box(4, 4), 4);
    CHECK(((y.value().data - x.data).abs().maxCoeff()) < 1e-14);
  }
  {
    G g;
    auto y = roi_crop(g.constant(T::full({3, 5, 5}, 1.25)), Box{2.0, 2.5, 3.0, 2.0}, 4);
    CHECK(((y.value().data - 1.25).abs().maxCoeff()) < 1e-14);
  }
  {
    // ramp feature, box corners (1,1)-(3,3), window 2, vs pointwise oracle
    T x({1, 4, 4});
    for (int y_ = 0; y_ < 4; ++y_)
      for (int x_ = 0; x_ < 4; ++x_) x.at3(0, y_, x_) = 4.0 * y_ + x_;
    G g;
    const Box box = box_from_corners(1, 1, 3, 3);
    auto y = roi_crop(g.constant(x), box, 2);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double sy = box.y0() + (i + 0.5) * box.h / 2;
        const double sx = box.x0() + (j + 0.5) * box.w / 2;
        CHECK(std::abs(y.value().at3(0, i, j) - bilerp_ref(x, 0, sy, sx)) < 1e-12);
      }
  }
  G g;
  CHECK_THROWS_AS(roi_crop(g.constant(T::zeros({1, 4, 4})), Box{2, 2, 0.5, 3}, 2), BoxError);
}

TEST_CASE("bilinear_resize examples") {
  {
    Rng rng(5);
    T x = random_normal<double>({2, 3, 5}, rng);
    G g;
    auto y = bilinear_resize(g.constant(x), 3, 5);
    CHECK(((y.value().data - x.data).abs().maxCoeff()) < 1e-14);
  }
  {
    G g;
    auto y = bilinear_resize(g.constant(T::full({1, 2, 3}, 0.6)), 5, 7);
    CHECK(((y.value().data - 0.6).abs().maxCoeff()) < 1e-14);
  }
  {
    T x = T::from({1, 2, 2}, {0, 1, 0, 1});
    G g;
    auto y = bilinear_resize(g.constant(x), 1, 4);
    for (int j = 0; j < 4; ++j) {
      const double sx = (j + 0.5) * 2.0 / 4.0;
      const double sy = (0 + 0.5) * 2.0 / 1.0;
      CHECK(std::abs(y.value().at3(0, 0, j) - bilerp_ref(x, 0, sy, sx)) < 1e-12);
    }
  }
}

TEST_CASE("backward basics") {
  {
    G g;
    auto x = g.leaf(T::from({3}, {1, 2, 3}));
    auto y = sum(x);
    auto grads = g.backward(y);
    CHECK((grads.at(x).data == 1.0).all());
  }
  {
    G g;
    auto x = g.leaf(T::from({4}, {1, 2, 3, 4}));
    auto y = sum(scale(x, 2.0));
    auto grads = g.backward(y);
    CHECK((grads.at(x).data == 2.0).all());
  }
  {
    // unreached leaf gets zeros
    G g;
    auto x = g.leaf(T::from({2}, {1, 2}));
    auto z = g.leaf(T::from({2}, {5, 6}));
    auto y = sum(x);
    auto grads = g.backward(y);
    CHECK((grads.at(z).data == 0.0).all());
  }
  {
    // non-scalar seed
    G g;
    auto x = g.leaf(T::from({2}, {1, 2}));
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(g.backward(y), ShapeError);
  }
  {
    // determinism: identical graphs -> bit-identical gradients
    Rng rng(17);
    T x0 = random_normal<double>({1, 2, 6, 6}, rng);
    T k0 = random_normal<double>({2, 2, 3, 3}, rng);
    T b0 = random_normal<double>({2}, rng);
    auto run = [&]() {
      G g;
      auto x = g.leaf(x0);
      auto k = g.leaf(k0);
      auto b = g.leaf(b0);
      auto y = mean(relu(conv2d(x, k, b, 1, 1)));
      auto grads = g.backward(y);
      return std::make_tuple(grads.at(x).data, grads.at(k).data, grads.at(b).data);
    };
    auto [a1, a2, a3] = run();
    auto [b1, b2, b3] = run();
    CHECK((a1 == b1).all());
    CHECK((a2 == b2).all());
    CHECK((a3 == b3).all());
  }
}

TEST_CASE("NaN/Inf rejected at op boundaries") {
  G g;
  T bad = T::from({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(g.leaf(bad), NumericError);
  CHECK_THROWS_AS(add(g.leaf(T::from({2}, {1, 2})), g.leaf(T::from({3}, {1, 2, 3}))), SizeError);
}

TEST_CASE("grad_check sanity") {
  // linear
  {
    std::vector<T> in = {T::from({3}, {1, 2, 3})};
    double err = grad_check<double>(
        [](G&, const std::vector<V>& v) { return dot_const(v[0], T::Array{{2.0, -1.0, 0.5}}); },
        in);
    CHECK(err < 1e-10);
  }
  // quadratic
  {
    std::vector<T> in = {T::from({3}, {0.5, -1.5, 2.0})};
    double err = grad_check<double>(
        [](G&, const std::vector<V>& v) { return sum(mul(v[0], v[0])); }, in);
    CHECK(err < 1e-7);
  }
  CHECK_THROWS_AS(grad_check<double>(
                      [](G&, const std::vector<V>& v) { return sum(v[0]); },
                      std::vector<T>{T::from({1}, {1.0})}, 0.5),
                  ConfigError);
}

TEST_CASE("gradients of every op match finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    // conv2d (x, k, b)
    {
      std::vector<T> in = {random_normal<double>({1, 2, 5, 5}, rng),
                           random_normal<double>({3, 2, 3, 3}, rng, 0.5),
                           random_normal<double>({3}, rng, 0.5)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            return mean(mul(conv2d(v[0], v[1], v[2], 2, 1), conv2d(v[0], v[1], v[2], 2, 1)));
          },
          in);
      CHECK(err < 1e-4);
    }
    // group_norm
    {
      std::vector<T> in = {random_normal<double>({2, 4, 3, 3}, rng),
                           random_normal<double>({4}, rng, 0.5),
                           random_normal<double>({4}, rng, 0.5)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            auto y = group_norm(v[0], 2, v[1], v[2]);
            return mean(mul(y, y));
          },
          in);
      CHECK(err < 1e-4);
    }
    // roi_crop + bilinear_resize + spatial_mean
    {
      std::vector<T> in = {random_normal<double>({2, 6, 6}, rng)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            auto c = roi_crop(v[0], Box{2.7, 3.1, 3.4, 2.9}, 4);
            auto r = bilinear_resize(c, 3, 5);
            return sum(mul(spatial_mean(r), spatial_mean(r)));
          },
          in);
      CHECK(err < 1e-4);
    }
    // maxpool2 + relu (shift inputs away from kink/tie points)
    {
      T x = random_normal<double>({1, 2, 4, 4}, rng);
      std::vector<T> in = {x};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) { return sum(relu(maxpool2(v[0]))); }, in, 1e-6 * 9);
      CHECK(err < 1e-4);
    }
    // fc + sigmoid + huber
    {
      std::vector<T> in = {random_normal<double>({5}, rng), random_normal<double>({3, 5}, rng),
                           random_normal<double>({3}, rng)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            return sum(huber(sigmoid(fc(v[0], v[1], v[2])), 0.7));
          },
          in);
      CHECK(err < 1e-4);
    }
    // add/sub/mul/scale/add_scalar/affine_vec
    {
      std::vector<T> in = {random_normal<double>({6}, rng), random_normal<double>({6}, rng)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            auto t = add(mul(v[0], v[1]), sub(scale(v[0], 0.7), add_scalar(v[1], 0.3)));
            return mean(mul(t, affine_vec(t, T::Array::LinSpaced(6, 0.5, 1.5),
                                          T::Array::Zero(6))));
          },
          in);
      CHECK(err < 1e-4);
    }
    // channel_softmax + select_channel + gather + concat + reshape + dot_const
    {
      std::vector<T> in = {random_normal<double>({2, 3, 3}, rng),
                           random_normal<double>({1, 3, 3}, rng)};
      double err = grad_check<double>(
          [](G&, const std::vector<V>& v) {
            auto sm = channel_softmax(concat_channels(v[0], v[1]));
            auto ch = select_channel(sm, 1);
            auto flat = reshape(ch, {9});
            auto got = gather(flat, {0, 3, 3, 8});
            return dot_const(got, T::Array{{1.0, -2.0, 0.5, 3.0}});
          },
          in);
      CHECK(err < 1e-4);
    }
  }
}
