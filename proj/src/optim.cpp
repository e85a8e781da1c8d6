#include "dsnet/optim.hpp"

#include <cmath>

namespace dsnet {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void ScheduleConfig::validate() const {
  if (warmup_epochs == 0 || total_epochs == 0 || batch_size == 0)
    throw ConfigError("schedule: epochs and batch size must be positive");
  if (warmup_epochs >= total_epochs)
    throw ConfigError("schedule: warmup_epochs " +
                      std::to_string(warmup_epochs) +
                      " must be below total_epochs " +
                      std::to_string(total_epochs));
  if (!(base_lr > 0.0) || !(warmup_lr > 0.0) || !(min_lr > 0.0))
    throw ConfigError("schedule: learning rates must be positive");
  if (warmup_lr > min_lr || min_lr > base_lr)
    throw ConfigError("schedule: want warmup_lr <= min_lr <= base_lr");
  if (weight_decay < 0.0)
    throw ConfigError("schedule: weight_decay must be nonnegative");
}

double lr_at(double epoch, const ScheduleConfig& cfg) {
  const double warm = static_cast<double>(cfg.warmup_epochs);
  const double total = static_cast<double>(cfg.total_epochs);
  if (!(epoch >= 0.0) || epoch > total)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) +
                      " outside [0, " + std::to_string(cfg.total_epochs) + "]");
  if (epoch < warm) {
    const double t = epoch / warm;
    return cfg.warmup_lr * (1.0 - t) + cfg.base_lr * t;
  }
  const double u = (epoch - warm) / (total - warm);
  const double s = 0.5 * (1.0 + std::cos(kPi * u));
  return cfg.base_lr * s + cfg.min_lr * (1.0 - s);
}

AdamW::AdamW(ParamStore& params, const ScheduleConfig& cfg)
    : params_(params), weight_decay_(cfg.weight_decay) {
  for (const auto& e : params_.entries()) {
    if (!e.trainable) continue;
    slots_.push_back({e.name, std::vector<double>(e.tensor.size(), 0.0),
                      std::vector<double>(e.tensor.size(), 0.0)});
  }
}

void AdamW::step(double lr) {
  // validate every gradient before mutating anything
  for (const auto& e : params_.entries()) {
    if (!e.trainable) continue;
    if (!e.tensor.has_grad())
      throw ConfigError("adamw: missing grad for " + e.name);
    for (double g : e.tensor.grad_vec())
      if (!std::isfinite(g))
        throw NumericError("adamw: non-finite gradient in " + e.name +
                           " at step " + std::to_string(t_ + 1));
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  std::size_t si = 0;
  for (auto& e : params_.entries()) {
    if (!e.trainable) continue;
    Slot& s = slots_[si++];
    std::vector<double>& th = e.tensor.vec();
    const std::vector<double>& gr = e.tensor.grad_vec();
    const double shrink = e.decay ? 1.0 - lr * weight_decay_ : 1.0;
    for (std::size_t i = 0; i < th.size(); ++i) {
      th[i] *= shrink;
      s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * gr[i];
      s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * gr[i] * gr[i];
      th[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + kEps);
    }
  }
}

void AdamW::zero_grads() { params_.zero_grads(); }

}  // namespace dsnet
