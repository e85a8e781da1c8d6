#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsnet/tensor.hpp"

namespace dsnet {

// Architectural hyperparameters. Defaults give the full-size network; the
// miniature config below is the small variant used by gradient checks.
struct ModelConfig {
  std::size_t input_size = 192;  // square input edge, divisible by 4
  std::size_t in_channels = 3;
  std::size_t stem_channels = 32;
  std::size_t embed_dim = 64;
  std::size_t num_lmhsa_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t kv_reduction = 2;  // spatial downsample ratio r for K/V
  std::size_t mlp_conv_hidden_ratio = 4;
  std::vector<std::size_t> cnn_channels{64, 64, 64, 64};
  std::size_t ffn_expansion = 4;
  std::size_t num_classes = 5;
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError
  // post-stem grid edge (two stride-2 stages)
  std::size_t grid() const { return input_size / 4; }
  // stable text form of every architectural field (seed excluded); feeds the
  // checkpoint config hash
  std::string canonical() const;
};

ModelConfig miniature_config();

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool decay = true;  // weight decay applies (norm scales/shifts and the
                      // relative-bias table opt out)
};

// Named, ordered parameter collection. Iteration order is creation order and
// defines both the init RNG stream and the checkpoint record order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t, bool trainable = true,
              bool decay = true);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  void zero_grads();

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Trainable scalar count.
std::size_t param_count(const ParamStore& ps);

enum class Mode { kTrain, kEval };

ParamStore init_params(const ModelConfig& cfg);

// Maps (query position, key position) to an entry of the relative-bias table
// of width (2h-1)*(2w-1). Key token (i,j) of the reduced grid sits at original
// coordinates (i*r, j*r). Length of the result is (h*w) * (h/r * w/r).
std::vector<std::size_t> relative_index_map(std::size_t h, std::size_t w,
                                            std::size_t r);

// Multiply-accumulate counts of the attention score (Q K^T) and value (A V)
// products, filled when a non-null pointer is passed to lmhsa_forward.
struct AttnCost {
  unsigned long long score_macs = 0;
  unsigned long long value_macs = 0;
};

Tensor grain_forward(const Tensor& images, const ModelConfig& cfg,
                     ParamStore& ps);
// x + depthwise 3x3 of x: residual local-perception unit / position encoding
Tensor lpu_forward(const Tensor& x, const Tensor& dw_weight);
Tensor lmhsa_forward(const Tensor& x, const ModelConfig& cfg, ParamStore& ps,
                     const std::string& prefix, AttnCost* cost = nullptr);
Tensor mlp_conv_forward(const Tensor& x, ParamStore& ps,
                        const std::string& prefix);
Tensor attention_stream_forward(const Tensor& x, const ModelConfig& cfg,
                                ParamStore& ps);
Tensor cnn_stream_forward(const Tensor& x, const ModelConfig& cfg,
                          ParamStore& ps, Mode mode);
Tensor fuse_and_classify(const Tensor& attn_feat, const Tensor& cnn_feat,
                         ParamStore& ps);
Tensor model_forward(const Tensor& images, const ModelConfig& cfg,
                     ParamStore& ps, Mode mode);

}  // namespace dsnet
