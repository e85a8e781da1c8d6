// Command-line driver: train / eval / predict / gradcheck / synth.
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
// failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "dsnet/trainer.hpp"

namespace {

using KvList = std::vector<std::pair<std::string, std::string>>;

// One flag per config key, collected as strings and funneled through the
// same parser the config file uses. CLI values are applied after the file,
// so they win.
void add_run_flags(CLI::App* cmd, std::string& config_path, KvList& overrides) {
  cmd->add_option("--config", config_path,
                  "config file with 'key = value' lines, '#' comments");
  for (const auto& key : dsnet::config_keys()) {
    std::string flag = "--" + key;
    if (key == "data_root") flag = "--data-root,--data_root";
    if (key == "out_dir") flag = "--out-dir,--out_dir";
    if (key == "augment" || key == "stratified_split") {
      cmd->add_flag_function(
          flag, [&overrides, key](std::int64_t) { overrides.emplace_back(key, "true"); });
      continue;
    }
    cmd->add_option_function<std::string>(
        flag,
        [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); });
  }
}

dsnet::RunConfig build_config(const std::string& config_path,
                              const KvList& overrides) {
  dsnet::RunConfig cfg;
  if (!config_path.empty()) dsnet::load_config_file(cfg, config_path);
  for (const auto& [k, v] : overrides) dsnet::apply_config_kv(cfg, k, v);
  return cfg;
}

dsnet::Dataset load_source(const dsnet::RunConfig& cfg) {
  if (cfg.synth_per_class > 0)
    return dsnet::synth_dataset(cfg.synth_per_class, cfg.model.num_classes,
                                cfg.model.input_size,
                                dsnet::hash_seed(cfg.seed, 4));
  if (cfg.data_root.empty())
    throw dsnet::ConfigError("no data source: set --data-root or --synth_per_class");
  return dsnet::load_dataset(cfg.data_root, cfg.model.input_size);
}

void print_confusion(const dsnet::ConfusionMatrix& cm,
                     const std::vector<std::string>& names) {
  std::printf("confusion matrix (rows = true, columns = predicted):\n");
  for (std::size_t t = 0; t < cm.classes; ++t) {
    const std::string label = t < names.size() ? names[t] : std::to_string(t);
    std::printf("%12s", label.c_str());
    for (std::size_t p = 0; p < cm.classes; ++p)
      std::printf(" %6zu", cm.at(t, p));
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-stream image classifier (attention + CNN)"};
  app.require_subcommand(1);

  std::string config_path;
  KvList overrides;

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_run_flags(train_cmd, config_path, overrides);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt;
  bool eval_force = false;
  add_run_flags(eval_cmd, config_path, overrides);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")
      ->required();
  eval_cmd->add_flag("--force", eval_force,
                     "load even if the config hash does not match");

  auto* predict_cmd = app.add_subcommand("predict", "classify one image");
  std::string predict_ckpt, predict_image_path;
  add_run_flags(predict_cmd, config_path, overrides);
  predict_cmd->add_option("--checkpoint", predict_ckpt, "checkpoint to load")
      ->required();
  predict_cmd->add_option("--image", predict_image_path, "PPM/PGM image")
      ->required();

  auto* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "finite-difference check of the full-model gradients");
  std::size_t gc_coords = 8;
  std::uint64_t gc_seed = 17;
  gradcheck_cmd->add_option("--coords", gc_coords,
                            "sampled coordinates per parameter group");
  gradcheck_cmd->add_option("--seed", gc_seed, "sampling seed");

  auto* synth_cmd =
      app.add_subcommand("synth", "write a synthetic corpus to disk");
  std::size_t synth_n = 0, synth_classes = 5, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "synth";
  synth_cmd->add_option("--per-class", synth_n, "images per class")->required();
  synth_cmd->add_option("--classes", synth_classes, "number of classes");
  synth_cmd->add_option("--image-size", synth_size, "square image edge");
  synth_cmd->add_option("--seed", synth_seed, "generator seed");
  synth_cmd->add_option("--out-dir,--out_dir", synth_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train_cmd->parsed()) {
      const dsnet::RunConfig cfg = build_config(config_path, overrides);
      const dsnet::TrainResult res = dsnet::train(cfg, &std::cout);
      std::printf("done: best test accuracy %.4f\n", res.best_test_acc);
      std::printf("metrics: %s\n", res.metrics_path.c_str());
      std::printf("last checkpoint: %s\n", res.last_checkpoint.c_str());
      if (!res.best_checkpoint.empty())
        std::printf("best checkpoint: %s\n", res.best_checkpoint.c_str());
      return 0;
    }

    if (eval_cmd->parsed()) {
      const dsnet::RunConfig cfg = build_config(config_path, overrides);
      const dsnet::Dataset ds = load_source(cfg);
      dsnet::ParamStore ps = dsnet::init_params(cfg.model);
      const dsnet::CheckpointMeta meta =
          dsnet::load_checkpoint(eval_ckpt, cfg.model, ps, nullptr, eval_force);
      const dsnet::EvalResult ev = dsnet::evaluate_split(
          cfg.model, ps, ds, cfg.schedule.batch_size);
      std::printf("samples: %zu\n", ev.confusion.total());
      std::printf("accuracy: %.6f\n", ev.accuracy);
      print_confusion(ev.confusion, meta.class_names.empty() ? ds.class_names
                                                             : meta.class_names);
      return 0;
    }

    if (predict_cmd->parsed()) {
      const dsnet::RunConfig cfg = build_config(config_path, overrides);
      const dsnet::Prediction p =
          dsnet::predict_image(cfg.model, predict_ckpt, predict_image_path);
      std::printf("prediction: %s\n", p.class_name.c_str());
      for (std::size_t k = 0; k < p.probs.size(); ++k)
        std::printf("%12s  %.6f\n", p.class_names[k].c_str(), p.probs[k]);
      return 0;
    }

    if (gradcheck_cmd->parsed())
      return dsnet::gradcheck_run(std::cout, gc_coords, gc_seed) == 0 ? 0 : 3;

    if (synth_cmd->parsed()) {
      const dsnet::Dataset ds = dsnet::synth_dataset(synth_n, synth_classes,
                                                     synth_size, synth_seed);
      dsnet::write_corpus(synth_out, ds);
      std::printf("wrote %zu images (%zu classes) to %s\n", ds.samples.size(),
                  ds.class_names.size(), synth_out.c_str());
      return 0;
    }
  } catch (const dsnet::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const dsnet::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const dsnet::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  }
  return 0;
}
