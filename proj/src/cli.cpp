#include "metaseg/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metaseg/dataset_io.hpp"
#include "metaseg/experiments.hpp"
#include "metaseg/runconfig.hpp"

namespace metaseg {

namespace {

namespace fs = std::filesystem;

void apply_env_workers(RunConfig& rc) {
  const char* w = std::getenv("METASEG_WORKERS");
  if (!w || !*w) return;
  try {
    rc.workers = std::stoi(w);
  } catch (const std::exception&) {
    throw ConfigError(std::string("METASEG_WORKERS is not an integer: '") + w + "'");
  }
  require<ConfigError>(rc.workers >= 1, "METASEG_WORKERS must be positive");
  rc.trainer.workers = rc.workers;
}

std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.png", index);
  return buf;
}

void persist_config(const RunConfig& rc, const fs::path& dir) {
  fs::create_directories(dir);
  write_text_file((dir / "config.json").string(), serialize_config(rc));
}

// ---- meta-train ----

int cmd_meta_train(const std::string& cfg_path) {
  RunConfig rc = load_config(cfg_path);
  apply_env_workers(rc);
  rc.trainer.validate();

  TaskSet train = load_davis_layout(rc.paths.train_data, "train");
  require<ConfigError>(!train.tasks.empty(),
                       "meta-train: no training tasks under '" + rc.paths.train_data + "'");

  const fs::path out = rc.paths.out;
  persist_config(rc, out);

  CsvTable steps;
  steps.header = {"step",       "loss_bptt",  "test_iou",        "lambda_mean",
                  "lambda_min", "lambda_max", "lambda_neg_frac", "skipped"};
  MetaTrainResult<float> res = meta_train<float>(
      train, rc.trainer, std::nullopt, [&](const MetaStepLog& l) {
        steps.rows.push_back({std::to_string(l.step), fmt_fixed(l.mean_bptt, 6),
                              fmt_fixed(l.mean_test_iou, 6), fmt_fixed(l.lambda_mean, 8),
                              fmt_fixed(l.lambda_min, 8), fmt_fixed(l.lambda_max, 8),
                              fmt_fixed(l.lambda_neg_frac, 6), std::to_string(l.skipped)});
        if (l.step % 10 == 0 || l.step == rc.trainer.outer_steps)
          std::printf("step %d  loss %.4f  iou %.4f  lambda [%.2e, %.2e]\n", l.step, l.mean_bptt,
                      l.mean_test_iou, l.lambda_min, l.lambda_max);
      });

  save_meta(res.meta, (out / "checkpoint.eosm").string());
  write_text_file((out / "steps.csv").string(), steps.serialize());
  std::printf("wrote %s (%d steps, %d tasks skipped)\n", (out / "checkpoint.eosm").c_str(),
              rc.trainer.outer_steps, res.skipped_tasks);
  return 0;
}

// ---- infer ----

struct InferFlags {
  std::string checkpoint, data, out = "predictions";
  int iters = 5;
  std::string ona = "on";
  int ona_interval = 5;
  int ona_iters = 10;
  std::string box_prop = "on";
  uint64_t seed = 0;
};

int cmd_infer(const InferFlags& f) {
  const MetaParams<float> meta = load_meta(f.checkpoint);
  const std::vector<Sequence> seqs = load_davis_sequences(f.data);
  require<EvalError>(!seqs.empty(), "infer: no sequences under '" + f.data + "'");

  InferenceConfig ic;
  ic.T = f.iters;
  ic.use_ona = f.ona == "on";
  ic.interval_ona = f.ona_interval;
  ic.steps_ona = f.ona_iters;
  ic.use_box_propagation = f.box_prop == "on";
  ic.validate();

  const fs::path out = f.out;
  fs::create_directories(out);

  CsvTable timing;
  timing.header = {"sequence", "frames", "model_seconds", "fine_tune_seconds", "adapt_seconds"};
  CsvTable adapt;
  adapt.header = {"sequence", "object", "frame", "status"};

  for (size_t i = 0; i < seqs.size(); ++i) {
    const SequenceResult<float> r = run_sequence(meta, seqs[i], ic, derive_seed(f.seed, 0xEBA1, i));
    fs::create_directories(out / r.seq_id);
    for (size_t k = 0; k < r.labels.size(); ++k)
      write_png_gray((out / r.seq_id / frame_name(static_cast<int>(k))).string(), r.labels[k]);
    timing.rows.push_back({r.seq_id, std::to_string(r.labels.size()),
                           fmt_fixed(r.model_seconds, 6), fmt_fixed(r.fine_tune_seconds, 6),
                           fmt_fixed(r.adapt_seconds, 6)});
    for (const auto& [id, obj] : r.objects)
      for (const AdaptRecord& rec : obj.adapt_log)
        adapt.rows.push_back(
            {r.seq_id, std::to_string(id), std::to_string(rec.frame), to_string(rec.status)});
    if (!r.valid) std::printf("warning: %s stopped early on a numeric failure\n", r.seq_id.c_str());
  }

  write_text_file((out / "timing.csv").string(), timing.serialize());
  write_text_file((out / "adapt_log.csv").string(), adapt.serialize());

  RunConfig rc;
  rc.inference = ic;
  rc.seed = f.seed;
  rc.paths.out = f.out;
  persist_config(rc, out);

  std::printf("wrote predictions for %zu sequences to %s\n", seqs.size(), out.c_str());
  return 0;
}

// ---- eval ----

int cmd_eval(const std::string& pred_root, const std::string& gt_root) {
  const std::vector<Sequence> gt = load_davis_sequences(gt_root);
  require<EvalError>(!gt.empty(), "eval: no ground truth under '" + gt_root + "'");
  const TaskSet ts = tasks_from_sequences(gt, "val");

  // timing rows are optional; without them FPS reads 0
  std::map<std::string, std::array<double, 3>> timing;
  const fs::path timing_path = fs::path(pred_root) / "timing.csv";
  if (fs::exists(timing_path)) {
    const std::string text = read_text_file(timing_path.string());
    std::istringstream ss(text);
    std::string line;
    std::getline(ss, line);  // header
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string id, frames, model, ft, ad;
      std::getline(ls, id, ',');
      std::getline(ls, frames, ',');
      std::getline(ls, model, ',');
      std::getline(ls, ft, ',');
      std::getline(ls, ad, ',');
      timing[id] = {std::stod(model), std::stod(ft), std::stod(ad)};
    }
  }

  std::vector<std::string> gaps;
  std::vector<SequenceResult<float>> preds;
  for (const Sequence& seq : gt) {
    SequenceResult<float> r;
    r.seq_id = seq.id;
    for (size_t i = 0; i < seq.frames.size(); ++i) {
      const fs::path p = fs::path(pred_root) / seq.id / frame_name(static_cast<int>(i));
      if (!fs::exists(p)) {
        gaps.push_back("sequence " + seq.id + " frame " + std::to_string(i));
        r.labels.emplace_back();
        continue;
      }
      r.labels.push_back(read_png_gray(p.string()));
    }
    if (auto it = timing.find(seq.id); it != timing.end()) {
      r.model_seconds = it->second[0];
      r.fine_tune_seconds = it->second[1];
      r.adapt_seconds = it->second[2];
    }
    preds.push_back(std::move(r));
  }
  if (!gaps.empty()) {
    for (const std::string& g : gaps) std::fprintf(stderr, "missing prediction: %s\n", g.c_str());
    return 5;
  }

  const EvalReport rep = evaluate(preds, ts);
  const CsvTable table = report_table(rep);
  std::fputs(table.serialize().c_str(), stdout);
  std::fputs(report_summary(rep).c_str(), stdout);
  write_text_file((fs::path(pred_root) / "report.csv").string(), table.serialize());
  return 0;
}

// ---- gen-synth ----

int cmd_gen_synth(const std::string& cfg_path, const std::string& out) {
  RunConfig rc = load_config(cfg_path);
  rc.synth.validate();
  const std::vector<Sequence> seqs = gen_synthetic_sequences(rc.synth, rc.seed);
  write_davis_layout(out, seqs);
  rc.paths.out = out;
  persist_config(rc, out);
  std::printf("wrote %zu sequences to %s\n", seqs.size(), out.c_str());
  return 0;
}

// ---- ablate ----

std::vector<AblationRow> resolve_rows(const std::vector<std::string>& names) {
  const std::vector<AblationRow> all = default_ablation_rows();
  if (names.empty()) return all;
  std::vector<AblationRow> out;
  for (const std::string& n : names) {
    const auto it = std::find_if(all.begin(), all.end(),
                                 [&](const AblationRow& r) { return r.name == n; });
    require<ConfigError>(it != all.end(), "ablate: unknown row '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

int cmd_ablate(const std::string& cfg_path) {
  RunConfig rc = load_config(cfg_path);
  apply_env_workers(rc);
  rc.trainer.validate();
  rc.inference.validate();

  Benchmark bench;
  if (!rc.paths.train_data.empty() && !rc.paths.val_data.empty()) {
    bench.train = load_davis_layout(rc.paths.train_data, "train");
    bench.val_seqs = load_davis_sequences(rc.paths.val_data);
    bench.val_tasks = tasks_from_sequences(bench.val_seqs, "val");
    require<ConfigError>(!bench.train.tasks.empty() && !bench.val_seqs.empty(),
                         "ablate: empty dataset roots");
  } else {
    bench = make_benchmark(rc.synth, rc.ablate.val_sequences, rc.seed);
  }

  AblationConfig ac;
  ac.trainer = rc.trainer;
  ac.inference = rc.inference;
  ac.rows = resolve_rows(rc.ablate.rows);
  ac.grid = log_grid(rc.ablate.grid_lo, rc.ablate.grid_hi, rc.ablate.grid_points);
  ac.seed = rc.seed;
  ac.parent.arch = rc.trainer.arch;
  ac.parent.steps = rc.ablate.parent_steps;
  ac.parent.batch = rc.ablate.parent_batch;
  ac.parent.lr = rc.ablate.parent_lr;
  ac.parent.seed = rc.seed;
  ac.parent.priors = rc.trainer.priors;
  ac.parent.aug = rc.trainer.aug;

  const std::vector<AblationRowResult> rows = run_ablation<float>(
      bench, ac, [](const AblationRowResult& r) {
        std::printf("%-24s T=%-3d JF %6.2f  J %6.2f  F %6.2f  fps %.3f\n", r.row.name.c_str(),
                    r.row.T, r.jf, r.j_mean, r.f_mean, r.fps_amortized);
      });

  const fs::path out = rc.paths.out;
  persist_config(rc, out);
  write_text_file((out / "ablation.csv").string(), ablation_table(rows).serialize());
  std::printf("wrote %s\n", (out / "ablation.csv").c_str());
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const EvalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"meta-learned one-shot video object segmentation"};
  app.require_subcommand(1);

  std::string train_cfg;
  CLI::App* mt = app.add_subcommand("meta-train", "meta-learn the fine-tuning optimizer");
  mt->add_option("config", train_cfg, "run config (json)")->required();

  InferFlags inf;
  CLI::App* in = app.add_subcommand("infer", "segment sequences with a checkpoint");
  in->add_option("checkpoint", inf.checkpoint, "EOSM checkpoint")->required();
  in->add_option("data", inf.data, "dataset root")->required();
  in->add_option("-o,--out", inf.out, "output directory");
  in->add_option("--iters", inf.iters, "fine-tuning iterations");
  in->add_option("--ona", inf.ona, "online adaptation on|off")
      ->check(CLI::IsMember({"on", "off"}));
  in->add_option("--ona-interval", inf.ona_interval, "frames between adaptation rounds");
  in->add_option("--ona-iters", inf.ona_iters, "iterations per adaptation round");
  in->add_option("--box-prop", inf.box_prop, "bounding-box propagation on|off")
      ->check(CLI::IsMember({"on", "off"}));
  in->add_option("--seed", inf.seed, "inference seed");

  std::string pred_root, gt_root;
  CLI::App* ev = app.add_subcommand("eval", "score predictions against ground truth");
  ev->add_option("predictions", pred_root, "prediction root")->required();
  ev->add_option("ground_truth", gt_root, "dataset root")->required();

  std::string synth_cfg, synth_out;
  CLI::App* gs = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  gs->add_option("config", synth_cfg, "run config (json)")->required();
  gs->add_option("out", synth_out, "output directory")->required();

  std::string ablate_cfg;
  CLI::App* ab = app.add_subcommand("ablate", "run the component ablation matrix");
  ab->add_option("config", ablate_cfg, "run config (json)")->required();

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a config failure
  }

  if (mt->parsed()) return guarded([&] { return cmd_meta_train(train_cfg); });
  if (in->parsed()) return guarded([&] { return cmd_infer(inf); });
  if (ev->parsed()) return guarded([&] { return cmd_eval(pred_root, gt_root); });
  if (gs->parsed()) return guarded([&] { return cmd_gen_synth(synth_cfg, synth_out); });
  if (ab->parsed()) return guarded([&] { return cmd_ablate(ablate_cfg); });
  return 2;
}

}  // namespace metaseg
