#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metaseg/grad_check.hpp"
#include "metaseg/losses.hpp"

using namespace metaseg;

using T = Tensor<double>;
using G = Graph<double>;
using V = Var<double>;

namespace {

// [2,H,W] probability tensor from a foreground probability vector.
T probs_from_fg(const std::vector<double>& p_fg, int h, int w) {
  T t({2, h, w});
  const Eigen::Index n = static_cast<Eigen::Index>(p_fg.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    t.data[i] = 1.0 - p_fg[static_cast<size_t>(i)];
    t.data[n + i] = p_fg[static_cast<size_t>(i)];
  }
  return t;
}

Mask mask_from(const std::vector<uint8_t>& v, int h, int w) {
  Mask m(h, w);
  m.v = v;
  return m;
}

double lovasz_value(const std::vector<double>& p_fg, const std::vector<uint8_t>& gt, int h,
                    int w, bool all_present = true) {
  G g;
  auto probs = g.constant(probs_from_fg(p_fg, h, w));
  return lovasz_softmax(probs, mask_from(gt, h, w), all_present).scalar();
}

// Oracle-side evaluation of the full lovasz_softmax (mean over present
// classes), built solely from jaccard_extension_oracle.
double lovasz_oracle(const std::vector<double>& p_fg, const std::vector<uint8_t>& gt,
                     bool all_present = true) {
  size_t fg = 0;
  for (uint8_t v : gt) fg += v != 0;
  const bool has_fg = fg > 0, has_bg = fg < gt.size();
  std::vector<int> classes;
  if (all_present) {
    if (has_bg) classes.push_back(0);
    if (has_fg) classes.push_back(1);
  } else {
    classes.push_back(has_fg ? 1 : 0);
  }
  double acc = 0;
  for (int c : classes) {
    std::vector<double> errors(gt.size());
    for (size_t i = 0; i < gt.size(); ++i) {
      const double pc = c == 1 ? p_fg[i] : 1.0 - p_fg[i];
      errors[i] = (gt[i] != 0) == (c == 1) ? 1.0 - pc : pc;
    }
    acc += jaccard_extension_oracle(errors, gt, c);
  }
  return acc / static_cast<double>(classes.size());
}

}  // namespace

TEST_CASE("lovasz_grad examples") {
  CHECK(lovasz_grad({}).empty());
  {
    auto w = lovasz_grad({1});
    REQUIRE(w.size() == 1);
    CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    auto w = lovasz_grad({1, 0});
    CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.0).epsilon(1e-12));
  }
  {
    auto w = lovasz_grad({0, 1});
    CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("lovasz_grad invariants: nonneg weights, prefix sums = jaccard, exhaustive <= 12") {
  for (int n = 1; n <= 12; ++n) {
    for (uint32_t bits = 0; bits < (1u << n); ++bits) {
      std::vector<uint8_t> gt(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) gt[static_cast<size_t>(i)] = (bits >> i) & 1;
      auto w = lovasz_grad(gt);
      double p = 0;
      for (auto v : gt) p += v;
      double prefix = 0, cg = 0, cn = 0;
      for (int k = 0; k < n; ++k) {
        REQUIRE(w[static_cast<size_t>(k)] >= -1e-12);
        prefix += w[static_cast<size_t>(k)];
        cg += gt[static_cast<size_t>(k)];
        cn += 1 - gt[static_cast<size_t>(k)];
        const double jac = 1.0 - (p - cg) / (p + cn);
        REQUIRE(prefix == doctest::Approx(jac).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("lovasz_softmax examples") {
  // perfect prediction -> 0
  CHECK(lovasz_value({1, 0, 1, 0}, {1, 0, 1, 0}, 2, 2) == doctest::Approx(0.0).epsilon(1e-12));
  // spec 2-pixel case
  CHECK(lovasz_value({0.6, 0.4}, {1, 0}, 1, 2) == doctest::Approx(0.4).epsilon(1e-12));
  // shape mismatch
  {
    G g;
    auto probs = g.constant(probs_from_fg({0.5, 0.5}, 1, 2));
    CHECK_THROWS_AS(lovasz_softmax(probs, Mask(2, 2)), SizeError);
  }
}

TEST_CASE("jaccard_extension_oracle basics") {
  CHECK(jaccard_extension_oracle({0, 0, 0}, {1, 0, 1}, 1) == doctest::Approx(0.0));
  // 2-pixel spec case, fg class
  CHECK(jaccard_extension_oracle({0.4, 0.4}, {1, 0}, 1) == doctest::Approx(0.4).epsilon(1e-9));
  // monotonicity in each coordinate
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> e = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    std::vector<uint8_t> gt = {1, 0, 0, 1};
    const double base = jaccard_extension_oracle(e, gt, 1);
    auto e2 = e;
    const size_t j = static_cast<size_t>(rng.uniform_int(4));
    e2[j] = std::min(1.0, e2[j] + rng.uniform(0, 0.5));
    CHECK(jaccard_extension_oracle(e2, gt, 1) >= base - 1e-12);
  }
}

TEST_CASE("lovasz_softmax agrees with the threshold-integration oracle") {
  Rng rng(42);
  for (int n = 1; n <= 9; ++n) {
    const int h = 1, w = n;
    for (uint32_t bits = 0; bits < (1u << n); ++bits) {
      std::vector<uint8_t> gt(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) gt[static_cast<size_t>(i)] = (bits >> i) & 1;
      for (int draw = 0; draw < 3; ++draw) {
        std::vector<double> p(static_cast<size_t>(n));
        for (auto& v : p) v = rng.uniform();
        CHECK(std::abs(lovasz_value(p, gt, h, w) - lovasz_oracle(p, gt)) < 2e-4);
      }
    }
  }
}

TEST_CASE("lovasz_softmax gradient passes grad_check away from ties") {
  Rng rng(9);
  for (int trial = 0; trial < 8; ++trial) {
    // logits as inputs so probs stay softmax-normalized under perturbation
    T logits = random_normal<double>({2, 3, 3}, rng);
    Mask gt(3, 3);
    for (auto& v : gt.v) v = rng.bernoulli(0.5) ? 1 : 0;
    if (gt.empty()) gt.v[4] = 1;
    std::vector<T> in = {logits};
    const double err = grad_check<double>(
        [&gt](G&, const std::vector<V>& v) {
          return lovasz_softmax(channel_softmax(v[0]), gt).value;
        },
        in);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("bce examples") {
  {
    G g;
    auto p = g.constant(T::from({4}, {1, 0, 1, 0}));
    const double v = bce(p, mask_from({1, 0, 1, 0}, 2, 2)).scalar();
    CHECK(v > 0);
    CHECK(v < 1e-6);
  }
  {
    G g;
    auto p = g.constant(T::full({4}, 0.5));
    CHECK(bce(p, mask_from({1, 0, 1, 1}, 2, 2)).scalar() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  {
    // direct-summation oracle on a random case
    Rng rng(5);
    std::vector<double> p(6);
    for (auto& v : p) v = rng.uniform(0.01, 0.99);
    std::vector<uint8_t> y = {1, 0, 0, 1, 1, 0};
    double ref = 0;
    for (int i = 0; i < 6; ++i)
      ref -= y[static_cast<size_t>(i)] * std::log(p[static_cast<size_t>(i)]) +
             (1 - y[static_cast<size_t>(i)]) * std::log(1 - p[static_cast<size_t>(i)]);
    ref /= 6;
    G g;
    T pt({6});
    for (int i = 0; i < 6; ++i) pt.data[i] = p[static_cast<size_t>(i)];
    CHECK(bce(g.constant(pt), mask_from(y, 2, 3)).scalar() ==
          doctest::Approx(ref).epsilon(1e-12));
  }
  {
    // gradient through sigmoid
    Rng rng(6);
    std::vector<T> in = {random_normal<double>({5}, rng)};
    Mask gt = mask_from({1, 0, 1, 1, 0}, 1, 5);
    const double err = grad_check<double>(
        [&gt](G&, const std::vector<V>& v) { return bce(sigmoid(v[0]), gt).value; }, in);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("box_loss examples") {
  G g;
  const Box a(10, 12, 20, 16);
  CHECK(box_loss<double>(g, a, a, 96, 96).scalar() == doctest::Approx(0.0).epsilon(1e-12));
  {
    // coordinate error 0.5 each -> 4 * 0.5^2/2 = 0.5 (quadratic branch)
    T pred = T::from({4}, {0.5, 0.5, 0.5, 0.5});
    Var<double> v = box_loss4(g.constant(pred), Vec4(0, 0, 0, 0));
    CHECK(v.value().data[0] == doctest::Approx(0.5).epsilon(1e-12));
  }
  {
    // coordinate error 2 each -> 4 * (2 - 0.5) = 6 (linear branch)
    T pred = T::from({4}, {2, 2, 2, 2});
    Var<double> v = box_loss4(g.constant(pred), Vec4(0, 0, 0, 0));
    CHECK(v.value().data[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  // half-frame center error larger than 1px error
  {
    const Box gt(48, 48, 20, 20);
    const Box off_half(0.5, 48, 20, 20);
    const Box off_1px(47, 48, 20, 20);
    G g2;
    CHECK(box_loss<double>(g2, off_half, gt, 96, 96).scalar() >
          box_loss<double>(g2, off_1px, gt, 96, 96).scalar());
  }
  CHECK_THROWS_AS(box_loss<double>(g, a, Box(5, 5, 0, 3), 96, 96), BoxError);
}

TEST_CASE("encode/decode roundtrip") {
  const Box prior(40, 50, 30, 20);
  const Box gt(44, 47, 36, 18);
  const Vec4 d = encode_box_delta(gt, prior);
  const Box back = decode_box_delta(prior, d);
  CHECK(back.cx == doctest::Approx(gt.cx).epsilon(1e-12));
  CHECK(back.cy == doctest::Approx(gt.cy).epsilon(1e-12));
  CHECK(back.w == doctest::Approx(gt.w).epsilon(1e-12));
  CHECK(back.h == doctest::Approx(gt.h).epsilon(1e-12));
}

TEST_CASE("seg_loss composition") {
  Rng rng(77);
  // perfect box and mask -> 0
  {
    G g;
    SegPrediction<double> pred;
    pred.box_deltas = {g.constant(T::zeros({4}))};
    pred.mask_probs = g.constant(probs_from_fg({1, 0, 0, 1}, 2, 2));
    SegTarget tgt{{Vec4(0, 0, 0, 0)}, mask_from({1, 0, 0, 1}, 2, 2)};
    CHECK(seg_loss(pred, tgt).scalar() == doctest::Approx(0.0).epsilon(1e-12));
  }
  // perfect mask, box off -> equals box_loss alone
  {
    G g;
    SegPrediction<double> pred;
    pred.box_deltas = {g.constant(T::from({4}, {0.3, -0.2, 0.1, 0.4}))};
    pred.mask_probs = g.constant(probs_from_fg({1, 0, 0, 1}, 2, 2));
    SegTarget tgt{{Vec4(0, 0, 0, 0)}, mask_from({1, 0, 0, 1}, 2, 2)};
    LossValue<double> lv = seg_loss(pred, tgt);
    Var<double> box_only = box_loss4(pred.box_deltas[0], tgt.box_targets[0]);
    CHECK(lv.scalar() == doctest::Approx(box_only.value().data[0]).epsilon(1e-12));
    CHECK(lv.components.at("mask") == doctest::Approx(0.0).epsilon(1e-12));
  }
  // random case: value == sum of components; components match standalone ops
  for (int trial = 0; trial < 10; ++trial) {
    G g;
    SegPrediction<double> pred;
    pred.box_deltas = {g.leaf(random_normal<double>({4}, rng)),
                       g.leaf(random_normal<double>({4}, rng))};
    T logits = random_normal<double>({2, 3, 3}, rng);
    pred.mask_probs = channel_softmax(g.leaf(logits));
    Mask gt(3, 3);
    for (auto& v : gt.v) v = rng.bernoulli(0.4) ? 1 : 0;
    SegTarget tgt{{Vec4(0.1, 0, -0.2, 0.05), Vec4(0, 0.3, 0, -0.1)}, gt};
    LossValue<double> lv = seg_loss(pred, tgt);
    CHECK(lv.scalar() == doctest::Approx(lv.components.at("box") + lv.components.at("mask"))
                             .epsilon(1e-12));
    const double box_ref =
        0.5 * (box_loss4(pred.box_deltas[0], tgt.box_targets[0]).value().data[0] +
               box_loss4(pred.box_deltas[1], tgt.box_targets[1]).value().data[0]);
    CHECK(lv.components.at("box") == doctest::Approx(box_ref).epsilon(1e-12));
    CHECK(lv.components.at("mask") ==
          doctest::Approx(lovasz_softmax(pred.mask_probs, gt).scalar()).epsilon(1e-12));
  }
  // bce variant wiring
  {
    G g;
    SegPrediction<double> pred;
    pred.box_deltas = {g.constant(T::zeros({4}))};
    pred.mask_probs = g.constant(probs_from_fg({0.5, 0.5, 0.5, 0.5}, 2, 2));
    SegTarget tgt{{Vec4(0, 0, 0, 0)}, mask_from({1, 0, 1, 0}, 2, 2)};
    LossOptions opt;
    opt.mask_loss = MaskLoss::bce;
    CHECK(seg_loss(pred, tgt, opt).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
}
