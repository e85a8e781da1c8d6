#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsnet/model.hpp"

namespace dsnet {

struct ScheduleConfig {
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 2000;
  double base_lr = 1e-3;
  double warmup_lr = 2e-8;
  double min_lr = 2e-4;
  double weight_decay = 1e-8;
  std::size_t batch_size = 64;

  void validate() const;  // throws ConfigError
};

// Warmup then cosine decay, evaluated at a (possibly fractional) epoch.
// Linear warmup_lr -> base_lr over [0, warmup_epochs), then cosine
// base_lr -> min_lr over [warmup_epochs, total_epochs]. Both pieces are
// computed as convex blends so the endpoint values are exact.
double lr_at(double epoch, const ScheduleConfig& cfg);

// Decoupled weight decay: parameters shrink by (1 - lr*wd) before the
// bias-corrected moment update. Entries flagged decay=false (norm scales and
// shifts, the relative-bias table) skip the shrink.
class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  struct Slot {
    std::string name;
    std::vector<double> m, v;
  };

  AdamW(ParamStore& params, const ScheduleConfig& cfg);

  // Throws ConfigError when a trainable parameter has no grad and
  // NumericError when any gradient is non-finite; parameters are untouched
  // in both cases.
  void step(double lr);
  void zero_grads();

  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  ParamStore& params_;
  double weight_decay_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;  // one per trainable entry, in store order
};

}  // namespace dsnet
