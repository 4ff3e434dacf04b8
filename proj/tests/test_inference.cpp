#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metaseg/inference.hpp"

using namespace metaseg;

namespace {

template <class S>
bool same_tensor(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape == b.shape && (a.data == b.data).all();
}

template <class S>
bool same_params(const ModelParams<S>& a, const ModelParams<S>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (!same_tensor(a.layers[i].w, b.layers[i].w) || !same_tensor(a.layers[i].b, b.layers[i].b))
      return false;
  return true;
}

ArchConfig small_arch() {
  ArchConfig a;
  a.block_channels = {8, 8, 16, 16};
  a.gn_groups = 4;
  a.mask_channels = 8;
  a.mask_convs = 2;
  a.mask_window = 8;
  a.box_hidden = 16;
  a.box_pool_window = 2;
  return a;
}

SynthConfig small_synth() {
  SynthConfig sc;
  sc.frame_w = 48;
  sc.frame_h = 48;
  sc.seq_len = 12;
  sc.n_sequences = 1;
  sc.min_objects = 1;
  sc.max_objects = 1;
  sc.max_distractors = 1;
  sc.min_radius = 5;
  sc.max_radius = 8;
  sc.max_translation = 2;
  return sc;
}

SynthConfig static_synth() {
  SynthConfig sc;
  sc.frame_w = 64;
  sc.frame_h = 64;
  sc.seq_len = 12;
  sc.n_sequences = 1;
  sc.min_objects = 1;
  sc.max_objects = 1;
  sc.max_distractors = 0;
  sc.min_radius = 8;
  sc.max_radius = 10;
  sc.max_translation = 0;
  sc.max_rotation_deg = 0;
  sc.max_scale_rate = 0;
  sc.hue_drift = 0;
  sc.occlusion_prob = 0;
  return sc;
}

InferenceConfig fast_cfg() {
  InferenceConfig cfg;
  cfg.T = 3;
  cfg.steps_ona = 2;
  return cfg;
}

MetaParams<float> small_meta(uint64_t seed) {
  return make_meta(init_model<float>(small_arch(), seed), 1e-3);
}

Tensor<float> prob_map(int h, int w, std::initializer_list<double> vals) {
  Tensor<float> t({h, w});
  Eigen::Index i = 0;
  for (double v : vals) t.data[i++] = static_cast<float>(v);
  return t;
}

// counts calls; each now() advances one tick
struct TickClock final : Clock {
  mutable int calls = 0;
  double now() const override { return static_cast<double>(calls++); }
};

}  // namespace

TEST_CASE("propagate_box: structure, determinism, and center statistics") {
  const Box prev(100, 80, 20, 16);
  JitterConfig j;
  j.n_priors = 0;
  std::vector<Box> only = propagate_box(prev, j, 200, 160, 9);
  REQUIRE(only.size() == 1);
  CHECK(only[0].cx == prev.cx);
  CHECK(only[0].cy == prev.cy);
  CHECK(only[0].w == prev.w);
  CHECK(only[0].h == prev.h);

  j.n_priors = 8;
  std::vector<Box> out = propagate_box(prev, j, 200, 160, 9);
  CHECK(out.size() == 9);  // prev + n_priors
  std::vector<Box> again = propagate_box(prev, j, 200, 160, 9);
  for (size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].cx == again[i].cx);
    CHECK(out[i].w == again[i].w);
  }
  for (const Box& b : out) {
    CHECK(b.x0() >= 0);
    CHECK(b.y0() >= 0);
    CHECK(b.x1() <= 200);
    CHECK(b.y1() <= 160);
  }

  // mean center of 10k jittered boxes within 3 sigma / sqrt(10k) of prev
  JitterConfig big;
  big.n_priors = 10000;
  std::vector<Box> cloud = propagate_box(prev, big, 400, 400, 123);
  double mx = 0, my = 0;
  for (size_t i = 1; i < cloud.size(); ++i) {
    mx += cloud[i].cx;
    my += cloud[i].cy;
  }
  mx /= 10000;
  my /= 10000;
  CHECK(std::abs(mx - prev.cx) < 3 * (big.sigma_trans * prev.w) / 100.0);
  CHECK(std::abs(my - prev.cy) < 3 * (big.sigma_trans * prev.h) / 100.0);
}

TEST_CASE("propagate_box: rejects degenerate inputs") {
  JitterConfig j;
  CHECK_THROWS_AS(propagate_box(Box(5, 5, 0, 4), j, 64, 64, 1), BoxError);
}

TEST_CASE("merge_objects: definitional cases") {
  std::map<int, Tensor<float>> one;
  one.emplace(3, prob_map(2, 2, {0.9, 0.9, 0.9, 0.9}));
  Mask m = merge_objects(one, 0.5);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) CHECK(m.at(y, x) == 3);

  std::map<int, Tensor<float>> two;
  two.emplace(1, prob_map(1, 2, {0.7, 0.4}));
  two.emplace(2, prob_map(1, 2, {0.6, 0.4}));
  Mask n = merge_objects(two, 0.5);
  CHECK(n.at(0, 0) == 1);  // 0.7 beats 0.6
  CHECK(n.at(0, 1) == 0);  // both 0.4 < threshold

  std::map<int, Tensor<float>> tie;
  tie.emplace(4, prob_map(1, 1, {0.8}));
  tie.emplace(7, prob_map(1, 1, {0.8}));
  CHECK(merge_objects(tie, 0.5).at(0, 0) == 4);  // tie -> smallest id

  CHECK_THROWS_AS(merge_objects(std::map<int, Tensor<float>>{}, 0.5), ConfigError);
  std::map<int, Tensor<float>> bad;
  bad.emplace(1, prob_map(1, 2, {0.1, 0.2}));
  bad.emplace(2, prob_map(2, 1, {0.1, 0.2}));
  CHECK_THROWS_AS(merge_objects(bad, 0.5), ShapeError);
}

TEST_CASE("merge_objects: exhaustive 2x2 maps against a brute-force oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<int, Tensor<float>> maps;
    maps.emplace(1, Tensor<float>({2, 2}));
    maps.emplace(2, Tensor<float>({2, 2}));
    for (auto& [id, t] : maps)
      for (Eigen::Index i = 0; i < 4; ++i)
        t.data[i] = static_cast<float>(rng.uniform_int(5)) / 4.0f;  // grid incl. exact ties
    Mask got = merge_objects(maps, 0.5);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        const double p1 = maps.at(1).data[y * 2 + x];
        const double p2 = maps.at(2).data[y * 2 + x];
        int expect = 0;
        if (std::max(p1, p2) >= 0.5) expect = p1 >= p2 ? 1 : 2;
        CHECK(got.at(y, x) == expect);
      }
  }
}

TEST_CASE("merge_objects: invariant under threshold-side-preserving rescaling") {
  Rng rng(77);
  std::map<int, Tensor<float>> maps, squeezed;
  for (int id : {1, 2, 3}) {
    Tensor<float> t({3, 3}), s({3, 3});
    for (Eigen::Index i = 0; i < 9; ++i) {
      t.data[i] = static_cast<float>(rng.uniform());
      s.data[i] = 0.5f + (t.data[i] - 0.5f) * 0.5f;  // order- and side-preserving
    }
    maps.emplace(id, std::move(t));
    squeezed.emplace(id, std::move(s));
  }
  Mask a = merge_objects(maps, 0.5);
  Mask b = merge_objects(squeezed, 0.5);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) CHECK(a.at(y, x) == b.at(y, x));
}

TEST_CASE("online_adapt: zero steps returns theta_T; zero gradient means no movement") {
  TaskSet ts = gen_synthetic(small_synth(), 3);
  const Task& task = ts.tasks[0];
  MetaParams<float> meta = small_meta(1);
  ModelParams<float> theta_T =
      fine_tune(meta, {task.train}, 2, std::nullopt, 0).theta_final;

  ModelParams<float> same = online_adapt(theta_T, task.train, {task.train}, 0, meta.lambda);
  CHECK(same_params(same, theta_T));

  // a perfectly-fit model has zero gradient, so parameters stay put; the
  // segmentation head cannot reach exactly-zero loss (softmax saturation),
  // so the property is exercised where zero loss is attainable
  MetaParams<double> toy;
  LayerParams<double> l;
  l.spec = {"w", LayerKind::fully_connected, 1, 1, 0, 0, 0};
  l.w = Tensor<double>({1, 1});
  l.w.data[0] = 1.0;  // already at the minimum of 0.5 (theta - 1)^2
  l.b = Tensor<double>::zeros({1});
  toy.theta0.layers.push_back(l);
  toy.lambda = make_lambda(toy.theta0, 0.5);
  InnerObjective<double> obj = [](Graph<double>& g, const BoundModel<double>& bm, int) {
    (void)g;
    Var<double> d = add_scalar(sum(bm.layers[0].w), -1.0);
    return scale(mul(d, d), 0.5);
  };
  Trajectory<double> traj = fine_tune_objective(toy, obj, 3);
  CHECK(traj.train_losses[0] == 0.0);
  CHECK(std::abs(traj.theta_final.layers[0].w.data[0] - 1.0) < 1e-9);

  CHECK_THROWS_AS(
      online_adapt(theta_T, task.train, {Sample{task.train.frame, Mask(48, 48), Box(), -1}}, 2,
                   meta.lambda),
      StructureError);
}

TEST_CASE("online_adapt: restarts from theta_T, not from the current model") {
  TaskSet ts = gen_synthetic(small_synth(), 5);
  const Task& task = ts.tasks[0];
  MetaParams<float> meta = small_meta(2);
  ModelParams<float> theta_T = fine_tune(meta, {task.train}, 2, std::nullopt, 0).theta_final;

  Sample pseudo = task.test.empty() ? task.train : task.test[0];
  if (pseudo.mask.area() == 0) pseudo = task.train;

  ModelParams<float> a = online_adapt(theta_T, task.train, {pseudo}, 3, meta.lambda);
  ModelParams<float> b = online_adapt(theta_T, task.train, {pseudo}, 3, meta.lambda);
  CHECK(same_params(a, b));  // pure function of (theta_T, d0, pred)
  CHECK(!same_params(a, theta_T));
}

TEST_CASE("run_object: single-frame sequence is the self-prediction record") {
  SynthConfig sc = small_synth();
  sc.seq_len = 2;
  std::vector<Sequence> seqs = gen_synthetic_sequences(sc, 11);
  Sequence seq = seqs[0];
  seq.frames.resize(1);
  seq.annotations.resize(1);

  MetaParams<float> meta = small_meta(3);
  InferenceConfig cfg = fast_cfg();
  cfg.record_debug = true;
  const int id = object_ids(seq)[0];
  ObjectResult<float> r = run_object(meta, seq, id, cfg, 99);
  CHECK(r.valid);
  CHECK(r.frames_done == 1);
  CHECK(r.start_frame == 0);
  CHECK(r.adapt_rounds == 0);
  CHECK(r.fine_tune_iters == cfg.T);

  // frame 0 is predicted at theta_T with the gt box as the only prior
  const Mask gt = seq.annotations[0].equals(static_cast<uint8_t>(id));
  Prediction<float> direct =
      forward(r.theta_T, image_to_tensor<float>(*seq.frames[0]), {tight_box(gt)});
  CHECK(same_tensor(direct.mask_full, r.probs[0]));
}

TEST_CASE("run_object: no online adaptation means the model never changes") {
  std::vector<Sequence> seqs = gen_synthetic_sequences(small_synth(), 21);
  const Sequence& seq = seqs[0];
  MetaParams<float> meta = small_meta(4);
  const int id = object_ids(seq)[0];

  InferenceConfig off = fast_cfg();
  off.use_ona = false;
  off.record_debug = true;
  ObjectResult<float> a = run_object(meta, seq, id, off, 7);
  CHECK(a.valid);
  CHECK(a.adapt_rounds == 0);
  CHECK(a.adapt_events.empty());
  CHECK(a.frames_done == static_cast<int>(seq.frames.size()));

  InferenceConfig zero = fast_cfg();
  zero.use_ona = true;
  zero.steps_ona = 0;  // T_OnA irrelevant when adaptation never runs
  ObjectResult<float> b = run_object(meta, seq, id, zero, 7);
  REQUIRE(a.probs.size() == b.probs.size());
  for (size_t i = 0; i < a.probs.size(); ++i) CHECK(same_tensor(a.probs[i], b.probs[i]));
}

TEST_CASE("run_object: deterministic for a fixed seed") {
  std::vector<Sequence> seqs = gen_synthetic_sequences(small_synth(), 33);
  const Sequence& seq = seqs[0];
  MetaParams<float> meta = small_meta(5);
  const int id = object_ids(seq)[0];
  InferenceConfig cfg = fast_cfg();

  ObjectResult<float> a = run_object(meta, seq, id, cfg, 42);
  ObjectResult<float> b = run_object(meta, seq, id, cfg, 42);
  REQUIRE(a.probs.size() == b.probs.size());
  for (size_t i = 0; i < a.probs.size(); ++i) {
    CHECK(same_tensor(a.probs[i], b.probs[i]));
    CHECK(a.boxes[i].cx == b.boxes[i].cx);
    CHECK(a.boxes[i].w == b.boxes[i].w);
  }
  CHECK(a.adapt_rounds == b.adapt_rounds);
}

TEST_CASE("run_object: adaptation always restarts from theta_T (reset semantics)") {
  std::vector<Sequence> seqs = gen_synthetic_sequences(small_synth(), 57);
  const Sequence& seq = seqs[0];
  REQUIRE(seq.frames.size() == 12);
  MetaParams<float> meta = small_meta(6);
  const int id = object_ids(seq)[0];

  InferenceConfig cfg = fast_cfg();
  cfg.record_debug = true;
  ObjectResult<float> r = run_object(meta, seq, id, cfg, 13);
  CHECK(r.valid);
  REQUIRE(r.adapt_rounds >= 2);  // interval 5 on 12 frames: rounds at +5 and +10
  REQUIRE(r.adapt_events.size() == static_cast<size_t>(r.adapt_rounds));

  Sample d0;
  d0.frame = seq.frames[static_cast<size_t>(r.start_frame)];
  d0.mask = seq.annotations[static_cast<size_t>(r.start_frame)].equals(static_cast<uint8_t>(id));
  d0.box = tight_box(d0.mask);
  d0.frame_index = r.start_frame;

  // recompute every round from (theta_T, d0, recorded preds) only: bit-exact
  for (const auto& ev : r.adapt_events) {
    ModelParams<float> again =
        online_adapt(r.theta_T, d0, ev.preds, cfg.steps_ona, meta.lambda, cfg.loss, cfg.priors);
    CHECK(same_params(again, ev.theta_after));
  }
}

TEST_CASE("run_object: numeric blow-up flags the result invalid") {
  std::vector<Sequence> seqs = gen_synthetic_sequences(small_synth(), 63);
  const Sequence& seq = seqs[0];
  MetaParams<float> meta = small_meta(8);
  for (auto& l : meta.lambda.layers) {
    l.w.data.setConstant(std::numeric_limits<float>::max());
    l.b.data.setConstant(std::numeric_limits<float>::max());
  }
  InferenceConfig cfg = fast_cfg();
  cfg.T = 3;  // step 0 stays finite, binding the exploded params then throws
  ObjectResult<float> r = run_object(meta, seq, object_ids(seq)[0], cfg, 1);
  CHECK(!r.valid);
}

TEST_CASE("run_object: static scene keeps IoU flat") {
  std::vector<Sequence> seqs = gen_synthetic_sequences(static_synth(), 101);
  const Sequence& seq = seqs[0];
  const int id = object_ids(seq)[0];
  // identical frames: stability depends only on priors and adaptation
  MetaParams<float> meta = make_meta(init_model<float>(small_arch(), 9), 1e-3);
  InferenceConfig cfg;
  cfg.T = 5;
  cfg.jitter.sigma_trans = 0;
  cfg.jitter.sigma_scale = 0;

  ObjectResult<float> r = run_object(meta, seq, id, cfg, 3);
  REQUIRE(r.valid);
  std::vector<double> ious;
  for (size_t i = 1; i < seq.frames.size(); ++i) {
    const Mask gt = seq.annotations[i].equals(static_cast<uint8_t>(id));
    ious.push_back(mask_iou(mask_from_prob(r.probs[i], 0.5), gt));
  }
  MESSAGE("static IoU frame1=", ious.front(), " last=", ious.back());
  CHECK(ious.front() - ious.back() <= 0.05);
}

TEST_CASE("run_sequence: merge matches per-frame merge_objects and label values") {
  SynthConfig sc = small_synth();
  sc.min_objects = 2;
  sc.max_objects = 2;
  std::vector<Sequence> seqs = gen_synthetic_sequences(sc, 71);
  const Sequence& seq = seqs[0];
  MetaParams<float> meta = small_meta(10);
  InferenceConfig cfg = fast_cfg();

  TickClock clock;
  SequenceResult<float> r = run_sequence(meta, seq, cfg, 5, &clock);
  CHECK(r.valid);
  const std::vector<int> ids = object_ids(seq);
  REQUIRE(ids.size() == 2);
  REQUIRE(r.labels.size() == seq.frames.size());

  for (size_t i = 0; i < seq.frames.size(); ++i) {
    std::map<int, Tensor<float>> maps;
    for (int k : ids) maps.emplace(k, r.objects.at(k).probs[i]);
    Mask manual = merge_objects(maps, cfg.merge_threshold);
    for (int y = 0; y < manual.h; ++y)
      for (int x = 0; x < manual.w; ++x) {
        CHECK(r.labels[i].at(y, x) == manual.at(y, x));
        const uint8_t v = r.labels[i].at(y, x);
        CHECK((v == 0 || v == ids[0] || v == ids[1]));
      }
  }

  // injected clock ticks once per read: per object 3 reads + 2 per adaptation
  // round, so stage timings are exact tick counts
  int rounds = 0;
  for (int k : ids) rounds += r.objects.at(k).adapt_rounds;
  CHECK(clock.calls == 3 * static_cast<int>(ids.size()) + 2 * rounds);
  CHECK(r.model_seconds ==
        doctest::Approx(static_cast<double>(clock.calls - static_cast<int>(ids.size()))));
  CHECK(r.fine_tune_seconds == doctest::Approx(static_cast<double>(ids.size())));
  CHECK(r.adapt_seconds == doctest::Approx(static_cast<double>(rounds)));
  CHECK(r.forward_seconds() ==
        doctest::Approx(r.model_seconds - r.fine_tune_seconds - r.adapt_seconds));
  for (int k : ids) {
    const ObjectResult<float>& o = r.objects.at(k);
    CHECK(o.model_seconds == doctest::Approx(2.0 + 2.0 * o.adapt_rounds));
    CHECK(o.fine_tune_seconds == doctest::Approx(1.0));
    CHECK(o.adapt_seconds == doctest::Approx(static_cast<double>(o.adapt_rounds)));
  }
}
