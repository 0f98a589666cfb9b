// Command-line surface: synthetic dataset generation, two-stage training,
// evaluation, partial-annotation sweeps, and Grad-CAM export.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "lesionaware/checkpoint.hpp"
#include "lesionaware/data.hpp"
#include "lesionaware/eval.hpp"
#include "lesionaware/image_io.hpp"
#include "lesionaware/model.hpp"
#include "lesionaware/runtime.hpp"
#include "lesionaware/saliency.hpp"
#include "lesionaware/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lesionaware;

// Training runs use 32-bit scalars; the verification suites exercise the same
// code paths at 64-bit.
using TrainScalar = float;

namespace {

int dataset_image_size(const Dataset& ds) {
  if (ds.size() == 0) throw UsageError("dataset is empty");
  const int size = ds.samples[0].width;
  for (const auto& s : ds.samples) {
    if (s.width != size || s.height != size) {
      throw UsageError("dataset images must all be square and equally sized; '" + s.name +
                       "' is " + std::to_string(s.width) + "x" + std::to_string(s.height));
    }
  }
  return size;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

struct TrainOptions {
  TrainConfig train;
  double keep_loc_ratio = 1.0;
  bool vanilla = false;
  bool no_cam = false, no_sam = false, no_mam = false;
  bool cam_shared = false;
  int num_classes = 0;  // 0: infer from data
  std::string channels = "16,32,64,128";
  std::string blocks = "1,1,1,1";
  std::string config_file;
};

// Registers the shared training/model flags on a subcommand.
void add_train_options(CLI::App* cmd, TrainOptions& o) {
  cmd->add_option("--keep-loc-ratio", o.keep_loc_ratio,
                  "fraction of location labels kept (seeded drop)");
  cmd->add_option("--lambda", o.train.lambda, "hybrid loss weight of L_cls");
  cmd->add_option("--alpha", o.train.alpha, "pseudo-label loss weight");
  cmd->add_option("--tau", o.train.tau, "pseudo-label binarization threshold");
  cmd->add_option("--lr", o.train.lr, "Adam learning rate");
  cmd->add_option("--batch-labeled", o.train.batch_labeled, "located samples per step (m)");
  cmd->add_option("--batch-unlabeled", o.train.batch_unlabeled, "unlocated samples per step (m')");
  cmd->add_option("--stage1-epochs", o.train.stage1_epochs, "LA-Net pre-training epochs (t_l)");
  cmd->add_option("--epochs", o.train.stage2_epochs, "joint training epochs (t_c)");
  cmd->add_option("--val-fraction", o.train.val_fraction, "validation split fraction");
  cmd->add_option("--seed", o.train.seed, "run seed");
  cmd->add_flag("--no-augment", [&o](std::int64_t) { o.train.augment = false; },
                "disable training-time augmentation");
  cmd->add_flag("--vanilla", o.vanilla, "classifier-only baseline (no LA-Net, no MAM)");
  cmd->add_flag("--no-cam", o.no_cam, "ablation: bypass channel attention");
  cmd->add_flag("--no-sam", o.no_sam, "ablation: bypass spatial attention");
  cmd->add_flag("--no-mam", o.no_mam, "ablation: bypass mask attention");
  cmd->add_flag("--cam-shared", o.cam_shared, "share one CAM perceptron across levels");
  cmd->add_option("--classes", o.num_classes, "number of classes (default: inferred)");
  cmd->add_option("--channels", o.channels, "per-stage channel counts, comma separated");
  cmd->add_option("--blocks", o.blocks, "per-stage residual block counts, comma separated");
  cmd->add_option("--config", o.config_file, "JSON config file (defaults < file < flags)");
}

// Config file values override defaults but lose to explicit command-line flags.
void apply_config_file(const CLI::App* cmd, TrainOptions& o) {
  if (o.config_file.empty()) return;
  std::ifstream in(o.config_file);
  if (!in) throw IoError("cannot open config file: " + o.config_file);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed config file: ") + e.what());
  }
  const auto use_file = [&](const char* flag) {
    return j.contains(flag + 2) && cmd->count(flag) == 0;  // strip "--"
  };
  if (use_file("--keep-loc-ratio")) o.keep_loc_ratio = j["keep-loc-ratio"].get<double>();
  if (use_file("--lambda")) o.train.lambda = j["lambda"].get<double>();
  if (use_file("--alpha")) o.train.alpha = j["alpha"].get<double>();
  if (use_file("--tau")) o.train.tau = j["tau"].get<double>();
  if (use_file("--lr")) o.train.lr = j["lr"].get<double>();
  if (use_file("--batch-labeled")) o.train.batch_labeled = j["batch-labeled"].get<int>();
  if (use_file("--batch-unlabeled")) o.train.batch_unlabeled = j["batch-unlabeled"].get<int>();
  if (use_file("--stage1-epochs")) o.train.stage1_epochs = j["stage1-epochs"].get<int>();
  if (use_file("--epochs")) o.train.stage2_epochs = j["epochs"].get<int>();
  if (use_file("--val-fraction")) o.train.val_fraction = j["val-fraction"].get<double>();
  if (use_file("--seed")) o.train.seed = j["seed"].get<std::uint64_t>();
  if (use_file("--vanilla")) o.vanilla = j["vanilla"].get<bool>();
  if (use_file("--classes")) o.num_classes = j["classes"].get<int>();
  if (use_file("--channels")) o.channels = j["channels"].get<std::string>();
  if (use_file("--blocks")) o.blocks = j["blocks"].get<std::string>();
}

ModelConfig make_model_config(const TrainOptions& o, const Dataset& ds) {
  ModelConfig cfg;
  cfg.fex.input_size = dataset_image_size(ds);
  cfg.fex.channels = parse_int_list(o.channels);
  cfg.fex.blocks = parse_int_list(o.blocks);
  cfg.fex.n_stages = static_cast<int>(cfg.fex.channels.size());
  if (!cfg.fex.channels.empty()) cfg.fex.stem_channels = cfg.fex.channels.front();
  cfg.num_classes = o.num_classes > 0 ? o.num_classes : std::max(2, ds.num_classes());
  cfg.use_lanet = !o.vanilla;
  cfg.use_cam = !o.no_cam;
  cfg.use_sam = !o.no_sam;
  cfg.use_mam = !o.vanilla && !o.no_mam;
  cfg.cam_shared = o.cam_shared;
  cfg.validate();
  return cfg;
}

json train_config_to_json(const TrainConfig& t) {
  json j;
  j["lambda"] = t.lambda;
  j["alpha"] = t.alpha;
  j["tau"] = t.tau;
  j["lr"] = t.lr;
  j["batch_labeled"] = t.batch_labeled;
  j["batch_unlabeled"] = t.batch_unlabeled;
  j["stage1_epochs"] = t.stage1_epochs;
  j["stage2_epochs"] = t.stage2_epochs;
  j["val_fraction"] = t.val_fraction;
  j["seed"] = t.seed;
  j["repeats"] = t.repeats;
  j["augment"] = t.augment;
  return j;
}

void write_effective_config(const fs::path& out_dir, const std::string& command,
                            const ModelConfig& model_cfg, const TrainOptions& o) {
  json j;
  j["command"] = command;
  j["model"] = json::parse(model_config_to_json_text(model_cfg));
  j["train"] = train_config_to_json(o.train);
  j["keep_loc_ratio"] = o.keep_loc_ratio;
  std::ofstream out(out_dir / "config.json", std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing config echo in " + out_dir.string());
}

struct TrainRunResult {
  std::vector<EpochRow> rows;
  Stage2Result<TrainScalar> stage2;
  ModelSnapshot<TrainScalar> final_params;
};

// Stage 1 followed by stage 2 on an already loaded dataset; the model is left
// holding its final-epoch parameters.
TrainRunResult run_training(LesionModel<TrainScalar>& model, const Dataset& dataset,
                            const TrainConfig& cfg) {
  auto [train_set, val_set] = split(dataset, cfg.val_fraction, cfg.seed);
  TrainRunResult result;
  int offset = 0;
  if (model.lanet && cfg.stage1_epochs > 0) {
    if (train_set.located_count() > 0) {
      auto rows = train_stage1(model, train_set, cfg);
      offset = static_cast<int>(rows.size());
      result.rows = std::move(rows);
    } else {
      std::cerr << "warning: skipping stage 1, no location-labeled samples\n";
    }
  }
  result.stage2 = train_stage2(model, train_set, val_set, cfg, offset);
  result.rows.insert(result.rows.end(), result.stage2.rows.begin(), result.stage2.rows.end());
  result.final_params = snapshot_model(model);
  return result;
}

void write_train_outputs(const fs::path& out_dir, LesionModel<TrainScalar>& model,
                         TrainRunResult& result, const TrainConfig& cfg) {
  fs::create_directories(out_dir);
  write_epoch_csv(out_dir / "epochs.csv", result.rows);

  std::map<std::string, std::string> meta;
  meta["seed"] = std::to_string(cfg.seed);
  meta["best_epoch"] = std::to_string(result.stage2.best_epoch);
  meta["best_val_accuracy"] = format_number(result.stage2.best_val_accuracy);
  if (result.stage2.best_val_jsi) meta["best_val_jsi"] = format_number(*result.stage2.best_val_jsi);

  restore_snapshot(model, result.stage2.best);
  auto best_meta = meta;
  best_meta["kind"] = "best";
  save_checkpoint(make_checkpoint(model, static_cast<Adam<TrainScalar>*>(nullptr), best_meta),
                  out_dir / "best.ckpt");

  restore_snapshot(model, result.final_params);
  auto final_meta = meta;
  final_meta["kind"] = result.stage2.aborted_non_finite ? "last_good" : "final";
  save_checkpoint(make_checkpoint(model, static_cast<Adam<TrainScalar>*>(nullptr), final_meta),
                  out_dir / "final.ckpt");
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int per_class, int size, std::uint64_t seed,
                 double contrast, double speckle, double spike_amp, bool force) {
  const fs::path root(out);
  if (fs::exists(root) && !fs::is_empty(root) && !force) {
    throw UsageError("output directory " + out + " is not empty (use --force to overwrite)");
  }
  SynthConfig cfg;
  cfg.per_class = per_class;
  cfg.image_size = size;
  cfg.seed = seed;
  cfg.lesion_contrast = contrast;
  cfg.speckle = speckle;
  cfg.spike_amplitude = spike_amp;
  const Dataset ds = generate_synthetic(cfg);
  save_dataset(ds, root);
  std::cout << "wrote " << (root / "manifest.csv").string() << " (" << ds.size() << " samples, "
            << per_class << " per class)\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& out, TrainOptions& o) {
  Dataset ds = load_dataset(data);
  if (o.keep_loc_ratio < 1.0) ds = drop_location_labels(ds, o.keep_loc_ratio, o.train.seed);
  const ModelConfig model_cfg = make_model_config(o, ds);
  o.train.validate();

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  write_effective_config(out_dir, "train", model_cfg, o);

  auto model = LesionModel<TrainScalar>::build(model_cfg, o.train.seed);
  TrainRunResult result = run_training(model, ds, o.train);
  write_train_outputs(out_dir, model, result, o.train);

  if (result.stage2.aborted_non_finite) {
    std::cerr << "error: training aborted on non-finite loss (" << result.stage2.abort_reason
              << "); last-good checkpoint retained\n";
    return 3;
  }
  std::cout << "best epoch " << result.stage2.best_epoch << " val_accuracy "
            << format_number(result.stage2.best_val_accuracy) << '\n';
  return 0;
}

int cmd_eval(const std::string& data, const std::vector<std::string>& checkpoints,
             const std::string& out, bool as_bbox) {
  Dataset ds = load_dataset(data);
  const int size = dataset_image_size(ds);
  std::vector<RunMetrics> runs;
  for (const auto& path : checkpoints) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config.fex.input_size != size) {
      throw IoError("checkpoint " + path + " was trained at " +
                    std::to_string(ckpt.config.fex.input_size) + ", dataset images are " +
                    std::to_string(size));
    }
    auto model = restore_model<TrainScalar>(ckpt);
    runs.push_back(evaluate_run(model, ds, as_bbox));
  }
  const EvalReport report = aggregate_runs(runs);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "metrics.csv", std::ios::binary);
    csv << report.to_csv();
  }
  {
    std::ofstream txt(out_dir / "metrics.txt", std::ios::binary);
    txt << report.to_table();
  }
  std::cout << report.to_table();
  return 0;
}

int cmd_sweep(const std::string& data, const std::string& test_data, const std::string& out,
              const std::string& ratios_text, int repeats, TrainOptions& o) {
  const Dataset full = load_dataset(data);
  const Dataset test_set = load_dataset(test_data);
  const std::vector<double> ratios = parse_double_list(ratios_text);
  if (ratios.empty()) throw UsageError("sweep: no ratios given");
  if (repeats < 1) throw UsageError("sweep: repeats must be >= 1");

  const fs::path out_dir(out);
  fs::create_directories(out_dir / "runs");

  struct Row {
    double ratio;
    int repeat;
    std::uint64_t seed;
    RunMetrics metrics;
    bool has_loc;
  };
  std::vector<Row> rows(ratios.size() * static_cast<std::size_t>(repeats));
  std::vector<std::function<void()>> tasks;

  for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
    for (int rep = 0; rep < repeats; ++rep) {
      tasks.push_back([&, ri, rep] {
        const double ratio = ratios[ri];
        TrainOptions local = o;
        local.train.seed = o.train.seed + static_cast<std::uint64_t>(rep);
        local.vanilla = o.vanilla || ratio == 0.0;

        Dataset ds = drop_location_labels(full, ratio, local.train.seed);
        const ModelConfig model_cfg = make_model_config(local, ds);
        local.train.validate();

        std::ostringstream dir_name;
        dir_name << "ratio_" << ratio << "_rep" << rep;
        const fs::path run_dir = out_dir / "runs" / dir_name.str();
        fs::create_directories(run_dir);
        write_effective_config(run_dir, "sweep", model_cfg, local);

        auto model = LesionModel<TrainScalar>::build(model_cfg, local.train.seed);
        TrainRunResult result = run_training(model, ds, local.train);
        write_train_outputs(run_dir, model, result, local.train);
        if (result.stage2.aborted_non_finite) {
          throw NumericError("sweep run " + dir_name.str() + " aborted on non-finite loss");
        }

        restore_snapshot(model, result.stage2.best);
        Row row;
        row.ratio = ratio;
        row.repeat = rep;
        row.seed = local.train.seed;
        row.metrics = evaluate_run(model, test_set, /*as_bbox=*/false);
        row.has_loc = row.metrics.has_jsi;
        rows[ri * static_cast<std::size_t>(repeats) + rep] = row;
      });
    }
  }
  run_tasks(tasks, thread_cap());

  std::ofstream csv(out_dir / "sweep.csv", std::ios::binary);
  csv << "ratio,repeat,seed,accuracy,precision,specificity,sensitivity,f1,jsi\n";
  for (const auto& r : rows) {
    csv << format_number(r.ratio) << ',' << r.repeat << ',' << r.seed << ','
        << format_number(r.metrics.accuracy) << ',' << format_number(r.metrics.classification.precision)
        << ',' << format_number(r.metrics.classification.specificity) << ','
        << format_number(r.metrics.classification.sensitivity) << ','
        << format_number(r.metrics.classification.f1) << ','
        << (r.has_loc ? format_number(r.metrics.jsi_mean) : std::string()) << '\n';
  }
  if (!csv) throw IoError("failed writing sweep.csv");
  std::cout << "wrote " << (out_dir / "sweep.csv").string() << " (" << rows.size() << " rows)\n";
  return 0;
}

int cmd_saliency(const std::string& data, const std::string& checkpoint, const std::string& out,
                 int forced_class) {
  Dataset ds = load_dataset(data);
  const int size = dataset_image_size(ds);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (ckpt.config.fex.input_size != size) {
    throw IoError("checkpoint " + checkpoint + " was trained at " +
                  std::to_string(ckpt.config.fex.input_size) + ", dataset images are " +
                  std::to_string(size));
  }
  auto model = restore_model<TrainScalar>(ckpt);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "saliency.csv", std::ios::binary);
  csv << "file,true_class,pred_class,cam_class,degenerate,mass_inside_gt,peak_inside_gt\n";

  for (const auto& s : ds.samples) {
    int pred;
    {
      NoGradGuard ng;
      std::vector<Sample> batch{s};
      auto fwd = model.forward(images_to_tensor<TrainScalar>(batch, size), NormMode::kEval);
      pred = 0;
      for (int j = 1; j < model.cfg.num_classes; ++j) {
        if (fwd.probs.values()[static_cast<std::size_t>(j)] >
            fwd.probs.values()[static_cast<std::size_t>(pred)]) {
          pred = j;
        }
      }
    }
    const int cam_class = forced_class >= 0 ? forced_class : pred;
    const Heatmap heat = grad_cam(model, s, cam_class);

    GrayImage img;
    img.width = heat.width;
    img.height = heat.height;
    img.pixels.resize(heat.values.size());
    for (std::size_t i = 0; i < heat.values.size(); ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(heat.values[i] * 255.0));
    }
    png_write_gray8(out_dir / ("heat_" + s.name + ".png"), img);

    csv << s.name << ',' << s.class_label << ',' << pred << ',' << cam_class << ','
        << (heat.degenerate ? 1 : 0) << ',';
    if (s.location.present()) {
      const auto gt = location_to_mask(s.location, s.width, s.height);
      const auto overlap = heatmap_overlap(heat, gt);
      csv << format_number(overlap.mass_inside) << ',' << (overlap.peak_inside ? 1 : 0);

      // Overlay: heatmap with the GT bounding region traced in white.
      GrayImage overlay = img;
      const auto box = mask_to_bbox(gt, s.width, s.height);
      if (box) {
        for (int x = box->x0; x < box->x1; ++x) {
          overlay.pixels[static_cast<std::size_t>(box->y0) * s.width + x] = 255;
          overlay.pixels[static_cast<std::size_t>(box->y1 - 1) * s.width + x] = 255;
        }
        for (int y = box->y0; y < box->y1; ++y) {
          overlay.pixels[static_cast<std::size_t>(y) * s.width + box->x0] = 255;
          overlay.pixels[static_cast<std::size_t>(y) * s.width + box->x1 - 1] = 255;
        }
      }
      png_write_gray8(out_dir / ("overlay_" + s.name + ".png"), overlay);
    } else {
      csv << ',';
    }
    csv << '\n';
  }
  if (!csv) throw IoError("failed writing saliency.csv");
  std::cout << "wrote " << ds.size() << " heatmaps to " << out_dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lesion-aware joint localization and classification"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic ultrasound-like dataset");
  std::string gen_out;
  int per_class = 100, gen_size = 64;
  std::uint64_t gen_seed = 0;
  double gen_contrast = 0.45, gen_speckle = 0.10, gen_spike = 0.25;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--per-class", per_class, "images per class");
  gen->add_option("--size", gen_size, "square image size");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--contrast", gen_contrast, "lesion darkening in (0,1)");
  gen->add_option("--speckle", gen_speckle, "multiplicative speckle level");
  gen->add_option("--spike-amp", gen_spike, "malignant boundary perturbation amplitude");
  gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

  // train
  auto* train = app.add_subcommand("train", "two-stage semi-supervised training");
  std::string train_data, train_out;
  TrainOptions train_opts;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  add_train_options(train, train_opts);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on a dataset");
  std::string eval_data, eval_out;
  std::vector<std::string> eval_ckpts;
  bool as_bbox = false;
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpts, "checkpoint file (repeat to aggregate runs)")
      ->required();
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->add_flag("--as-bbox", as_bbox, "convert predicted masks to boxes for bbox-labeled GT");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "train/eval across location-label keep ratios");
  std::string sweep_data, sweep_test, sweep_out, sweep_ratios = "0,0.25,0.5,0.75,1.0";
  int sweep_repeats = 3;
  TrainOptions sweep_opts;
  sweep->add_option("--data", sweep_data, "training dataset directory")->required();
  sweep->add_option("--test", sweep_test, "test dataset directory")->required();
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--ratios", sweep_ratios, "comma-separated keep ratios (0 = vanilla baseline)");
  sweep->add_option("--repeats", sweep_repeats, "independent repeats per ratio");
  add_train_options(sweep, sweep_opts);

  // saliency
  auto* sal = app.add_subcommand("saliency", "Grad-CAM heatmaps for every image");
  std::string sal_data, sal_ckpt, sal_out;
  int sal_class = -1;
  sal->add_option("--data", sal_data, "dataset directory")->required();
  sal->add_option("--checkpoint", sal_ckpt, "trained checkpoint")->required();
  sal->add_option("--out", sal_out, "output directory")->required();
  sal->add_option("--class", sal_class, "fixed class index (default: predicted class)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) {
      return cmd_gen_data(gen_out, per_class, gen_size, gen_seed, gen_contrast, gen_speckle,
                          gen_spike, gen_force);
    }
    if (train->parsed()) {
      apply_config_file(train, train_opts);
      return cmd_train(train_data, train_out, train_opts);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_data, eval_ckpts, eval_out, as_bbox);
    }
    if (sweep->parsed()) {
      apply_config_file(sweep, sweep_opts);
      return cmd_sweep(sweep_data, sweep_test, sweep_out, sweep_ratios, sweep_repeats, sweep_opts);
    }
    if (sal->parsed()) {
      return cmd_saliency(sal_data, sal_ckpt, sal_out, sal_class);
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
