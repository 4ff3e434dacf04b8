#include "metaseg/runconfig.hpp"

#include <set>
#include <utility>

#include <json.hpp>

#include "metaseg/csv.hpp"

namespace metaseg {

namespace {

using json = nlohmann::ordered_json;

/// Wraps one JSON object: typed reads with field-qualified diagnostics plus
/// unknown-key rejection once all known keys have been pulled.
struct Section {
  const json& j;
  std::string name;
  std::set<std::string> known;

  Section(const json& j_, std::string name_) : j(j_), name(std::move(name_)) {
    require<ConfigError>(j.is_object(), "config: section '" + name + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for " + name + "." + key + ": " + e.what());
    }
  }

  bool sub(const char* key, json& out) {
    known.insert(key);
    if (!j.contains(key)) return false;
    out = j.at(key);
    return true;
  }

  void finish() const {
    for (const auto& item : j.items())
      require<ConfigError>(known.count(item.key()) > 0,
                           "config: unknown key " + name + "." + item.key());
  }
};

LambdaMode parse_lambda_mode(const std::string& s) {
  if (s == "per_neuron") return LambdaMode::per_neuron;
  if (s == "global") return LambdaMode::global;
  throw ConfigError("config: lambda_mode must be per_neuron or global, got '" + s + "'");
}

const char* to_string(LambdaMode m) {
  return m == LambdaMode::per_neuron ? "per_neuron" : "global";
}

MaskLoss parse_mask_loss(const std::string& s) {
  if (s == "lovasz") return MaskLoss::lovasz;
  if (s == "bce") return MaskLoss::bce;
  throw ConfigError("config: mask_loss must be lovasz or bce, got '" + s + "'");
}

const char* to_string(MaskLoss l) { return l == MaskLoss::lovasz ? "lovasz" : "bce"; }

void parse_arch(const json& j, ArchConfig& a) {
  Section s(j, "arch");
  s.get("in_channels", a.in_channels);
  s.get("block_channels", a.block_channels);
  s.get("gn_groups", a.gn_groups);
  s.get("mask_channels", a.mask_channels);
  s.get("mask_convs", a.mask_convs);
  s.get("mask_window", a.mask_window);
  s.get("box_hidden", a.box_hidden);
  s.get("box_pool_window", a.box_pool_window);
  s.finish();
}

void parse_aug(const json& j, AugConfig& a) {
  Section s(j, "aug");
  s.get("flip_prob", a.flip_prob);
  s.get("scale_min", a.scale_min);
  s.get("scale_max", a.scale_max);
  s.get("max_rotation_deg", a.max_rotation_deg);
  s.get("max_translate_frac", a.max_translate_frac);
  s.get("color_jitter", a.color_jitter);
  s.get("spatial_only", a.spatial_only);
  s.finish();
}

void parse_priors(const json& j, const std::string& name, PriorPolicy& p) {
  Section s(j, name);
  s.get("include_full_frame", p.include_full_frame);
  s.get("include_gt", p.include_gt);
  s.get("n_jitter", p.n_jitter);
  s.get("sigma", p.sigma);
  s.finish();
}

void parse_loss(Section& s, LossOptions& l) {
  std::string mask_loss = to_string(l.mask_loss);
  s.get("mask_loss", mask_loss);
  l.mask_loss = parse_mask_loss(mask_loss);
  s.get("lovasz_all_present", l.lovasz_all_present);
}

void parse_trainer(const json& j, TrainerConfig& t) {
  Section s(j, "trainer");
  s.get("T", t.T);
  s.get("batch", t.batch);
  s.get("beta", t.beta);
  s.get("outer_steps", t.outer_steps);
  s.get("lambda_init", t.lambda_init);
  s.get("meta_test_k", t.meta_test_k);
  s.get("average_batch", t.average_batch);
  s.get("skip_budget", t.skip_budget);
  s.get("freeze_lambda", t.freeze_lambda);
  s.get("freeze_theta", t.freeze_theta);
  std::string mode = to_string(t.lambda_mode);
  s.get("lambda_mode", mode);
  t.lambda_mode = parse_lambda_mode(mode);
  parse_loss(s, t.loss);
  json sub;
  if (s.sub("radam", sub)) {
    Section r(sub, "trainer.radam");
    r.get("beta1", t.radam.beta1);
    r.get("beta2", t.radam.beta2);
    r.get("eps", t.radam.eps);
    r.finish();
  }
  if (s.sub("priors", sub)) parse_priors(sub, "trainer.priors", t.priors);
  s.finish();
}

void parse_inference(const json& j, InferenceConfig& c) {
  Section s(j, "inference");
  s.get("T", c.T);
  s.get("use_ona", c.use_ona);
  s.get("interval_ona", c.interval_ona);
  s.get("steps_ona", c.steps_ona);
  s.get("use_box_propagation", c.use_box_propagation);
  s.get("merge_threshold", c.merge_threshold);
  s.get("spatial_aug", c.spatial_aug);
  s.get("ona_accumulate", c.ona_accumulate);
  parse_loss(s, c.loss);
  json sub;
  if (s.sub("jitter", sub)) {
    Section r(sub, "inference.jitter");
    r.get("n_priors", c.jitter.n_priors);
    r.get("sigma_trans", c.jitter.sigma_trans);
    r.get("sigma_scale", c.jitter.sigma_scale);
    r.finish();
  }
  if (s.sub("priors", sub)) parse_priors(sub, "inference.priors", c.priors);
  s.finish();
}

void parse_synth(const json& j, SynthConfig& c) {
  Section s(j, "synth");
  s.get("frame_w", c.frame_w);
  s.get("frame_h", c.frame_h);
  s.get("seq_len", c.seq_len);
  s.get("n_sequences", c.n_sequences);
  s.get("min_objects", c.min_objects);
  s.get("max_objects", c.max_objects);
  s.get("max_distractors", c.max_distractors);
  s.get("min_radius", c.min_radius);
  s.get("max_radius", c.max_radius);
  s.get("max_translation", c.max_translation);
  s.get("max_rotation_deg", c.max_rotation_deg);
  s.get("max_scale_rate", c.max_scale_rate);
  s.get("hue_drift", c.hue_drift);
  s.get("occlusion_prob", c.occlusion_prob);
  s.get("fps", c.fps);
  s.get("split", c.split);
  s.finish();
}

void parse_ablate(const json& j, AblateSettings& a) {
  Section s(j, "ablate");
  s.get("rows", a.rows);
  s.get("grid_lo", a.grid_lo);
  s.get("grid_hi", a.grid_hi);
  s.get("grid_points", a.grid_points);
  s.get("val_sequences", a.val_sequences);
  s.get("parent_steps", a.parent_steps);
  s.get("parent_batch", a.parent_batch);
  s.get("parent_lr", a.parent_lr);
  s.finish();
}

void parse_paths(const json& j, RunPaths& p) {
  Section s(j, "paths");
  s.get("train_data", p.train_data);
  s.get("val_data", p.val_data);
  s.get("out", p.out);
  s.finish();
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  RunConfig rc;
  Section top(j, "top-level");
  json sub;
  if (top.sub("arch", sub)) parse_arch(sub, rc.trainer.arch);
  if (top.sub("aug", sub)) parse_aug(sub, rc.trainer.aug);
  if (top.sub("trainer", sub)) parse_trainer(sub, rc.trainer);
  if (top.sub("inference", sub)) parse_inference(sub, rc.inference);
  if (top.sub("synth", sub)) parse_synth(sub, rc.synth);
  if (top.sub("ablate", sub)) parse_ablate(sub, rc.ablate);
  if (top.sub("paths", sub)) parse_paths(sub, rc.paths);
  top.get("seed", rc.seed);
  top.get("workers", rc.workers);
  top.finish();

  require<ConfigError>(rc.workers >= 1, "config: workers must be positive");
  rc.trainer.seed = rc.seed;
  rc.trainer.workers = rc.workers;
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return parse_config(text);
}

std::string serialize_config(const RunConfig& rc) {
  json j;
  const ArchConfig& a = rc.trainer.arch;
  j["arch"] = {{"in_channels", a.in_channels},
               {"block_channels", a.block_channels},
               {"gn_groups", a.gn_groups},
               {"mask_channels", a.mask_channels},
               {"mask_convs", a.mask_convs},
               {"mask_window", a.mask_window},
               {"box_hidden", a.box_hidden},
               {"box_pool_window", a.box_pool_window}};
  const AugConfig& g = rc.trainer.aug;
  j["aug"] = {{"flip_prob", g.flip_prob},
              {"scale_min", g.scale_min},
              {"scale_max", g.scale_max},
              {"max_rotation_deg", g.max_rotation_deg},
              {"max_translate_frac", g.max_translate_frac},
              {"color_jitter", g.color_jitter},
              {"spatial_only", g.spatial_only}};
  const TrainerConfig& t = rc.trainer;
  j["trainer"] = {{"T", t.T},
                  {"batch", t.batch},
                  {"beta", t.beta},
                  {"outer_steps", t.outer_steps},
                  {"lambda_init", t.lambda_init},
                  {"meta_test_k", t.meta_test_k},
                  {"average_batch", t.average_batch},
                  {"lambda_mode", to_string(t.lambda_mode)},
                  {"mask_loss", to_string(t.loss.mask_loss)},
                  {"lovasz_all_present", t.loss.lovasz_all_present},
                  {"skip_budget", t.skip_budget},
                  {"freeze_lambda", t.freeze_lambda},
                  {"freeze_theta", t.freeze_theta},
                  {"radam", {{"beta1", t.radam.beta1}, {"beta2", t.radam.beta2}, {"eps", t.radam.eps}}},
                  {"priors",
                   {{"include_full_frame", t.priors.include_full_frame},
                    {"include_gt", t.priors.include_gt},
                    {"n_jitter", t.priors.n_jitter},
                    {"sigma", t.priors.sigma}}}};
  const InferenceConfig& c = rc.inference;
  j["inference"] = {{"T", c.T},
                    {"use_ona", c.use_ona},
                    {"interval_ona", c.interval_ona},
                    {"steps_ona", c.steps_ona},
                    {"use_box_propagation", c.use_box_propagation},
                    {"merge_threshold", c.merge_threshold},
                    {"spatial_aug", c.spatial_aug},
                    {"ona_accumulate", c.ona_accumulate},
                    {"mask_loss", to_string(c.loss.mask_loss)},
                    {"lovasz_all_present", c.loss.lovasz_all_present},
                    {"jitter",
                     {{"n_priors", c.jitter.n_priors},
                      {"sigma_trans", c.jitter.sigma_trans},
                      {"sigma_scale", c.jitter.sigma_scale}}},
                    {"priors",
                     {{"include_full_frame", c.priors.include_full_frame},
                      {"include_gt", c.priors.include_gt},
                      {"n_jitter", c.priors.n_jitter},
                      {"sigma", c.priors.sigma}}}};
  const SynthConfig& y = rc.synth;
  j["synth"] = {{"frame_w", y.frame_w},
                {"frame_h", y.frame_h},
                {"seq_len", y.seq_len},
                {"n_sequences", y.n_sequences},
                {"min_objects", y.min_objects},
                {"max_objects", y.max_objects},
                {"max_distractors", y.max_distractors},
                {"min_radius", y.min_radius},
                {"max_radius", y.max_radius},
                {"max_translation", y.max_translation},
                {"max_rotation_deg", y.max_rotation_deg},
                {"max_scale_rate", y.max_scale_rate},
                {"hue_drift", y.hue_drift},
                {"occlusion_prob", y.occlusion_prob},
                {"fps", y.fps},
                {"split", y.split}};
  const AblateSettings& b = rc.ablate;
  j["ablate"] = {{"rows", b.rows},
                 {"grid_lo", b.grid_lo},
                 {"grid_hi", b.grid_hi},
                 {"grid_points", b.grid_points},
                 {"val_sequences", b.val_sequences},
                 {"parent_steps", b.parent_steps},
                 {"parent_batch", b.parent_batch},
                 {"parent_lr", b.parent_lr}};
  j["paths"] = {{"train_data", rc.paths.train_data},
                {"val_data", rc.paths.val_data},
                {"out", rc.paths.out}};
  j["seed"] = rc.seed;
  j["workers"] = rc.workers;
  return j.dump(2) + "\n";
}

}  // namespace metaseg
