#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dsnet/data.hpp"
#include "dsnet/model.hpp"
#include "dsnet/optim.hpp"

namespace dsnet {

// Everything a training run needs. Exactly one data source must be set:
// data_root (PPM/PGM class directories) or synth_per_class (generated).
struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;  // master seed; init/split/shuffle/synth/augment
                           // streams are derived from it
  std::string data_root;
  std::size_t synth_per_class = 0;
  double train_fraction = 0.8;
  bool stratified_split = false;
  std::size_t eval_every = 1;  // evaluate/record/checkpoint cadence, epochs
  std::string out_dir = "run";
  bool augment = false;        // flip + rotate + shift, off by default
  std::string resume_from;     // optional checkpoint to continue from

  void validate() const;  // throws ConfigError
};

// Flat "key = value" config file with '#' comments. Every key mirrors a CLI
// flag of the same name; CLI values win over file values.
void apply_config_kv(RunConfig& cfg, const std::string& key,
                     const std::string& value);
void load_config_file(RunConfig& cfg, const std::string& path);
const std::vector<std::string>& config_keys();

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;  // schedule value at the epoch's first step
  double seconds = 0.0;
};

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = true class, column = predicted

  explicit ConfusionMatrix(std::size_t k = 0)
      : classes(k), counts(k * k, 0) {}
  std::size_t& at(std::size_t t, std::size_t p) {
    return counts[t * classes + p];
  }
  std::size_t at(std::size_t t, std::size_t p) const {
    return counts[t * classes + p];
  }
  std::size_t total() const;
  double accuracy() const;  // trace / total
};

struct EvalResult {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
};

// FNV-1a over ModelConfig::canonical(); stored in checkpoints so weights are
// not silently loaded into a different architecture.
std::uint64_t config_hash(const ModelConfig& cfg);

struct CheckpointMeta {
  std::uint64_t epoch = 0;  // completed epochs
  double best_test_acc = -1.0;
  std::vector<std::string> class_names;
};

// Binary format: "DSN1", u32 version, u64 config hash, u64 record count,
// then per record: u32 name length, name, u8 dtype, u32 rank, u64 dims,
// u64 payload bytes, little-endian payload. Covers parameters, batch-norm
// running stats, optimizer moments and step count, and run metadata. Writes
// go through a temp file + rename.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore& ps, const AdamW* opt,
                     const CheckpointMeta& meta);
// Fills ps (and opt when non-null) in place. Wrong magic/version/truncation
// raise DataError; a config-hash mismatch does too unless force is set.
CheckpointMeta load_checkpoint(const std::string& path, const ModelConfig& cfg,
                               ParamStore& ps, AdamW* opt, bool force = false);

struct TrainResult {
  std::vector<EpochRecord> records;
  std::string metrics_path;
  std::string last_checkpoint;
  std::string best_checkpoint;
  double best_test_acc = -1.0;
};

// Runs the full regimen: per-epoch seeded shuffle, cross-entropy training at
// lr_at(fractional epoch), eval_every-gated evaluation, CSV append
// ("epoch,train_loss,train_acc,test_acc,lr,seconds", 9 significant digits),
// last/best checkpoints. Resuming from a checkpoint continues the exact
// trace an uninterrupted run would have produced.
TrainResult train(const RunConfig& cfg, std::ostream* log = nullptr);

EvalResult evaluate_split(const ModelConfig& cfg, ParamStore& ps,
                          const Dataset& ds, std::size_t batch_size);

struct Prediction {
  std::size_t class_index = 0;
  std::string class_name;
  std::vector<double> probs;
  std::vector<std::string> class_names;  // from the checkpoint
};

Prediction predict_image(const ModelConfig& cfg, const std::string& checkpoint,
                         const std::string& image_path);

// Full-model finite-difference check on the miniature config (2 samples).
// Prints one line per parameter group with its max relative error; returns
// nonzero if any group exceeds 1e-4.
int gradcheck_run(std::ostream& os, std::size_t coords_per_group = 8,
                  std::uint64_t seed = 17);

}  // namespace dsnet
