#include "dsnet/model.hpp"

#include <cmath>

#include "dsnet/ops.hpp"

namespace dsnet {

void ModelConfig::validate() const {
  if (input_size < 4 || input_size % 4 != 0)
    throw ConfigError("config: input_size must be a positive multiple of 4, got " +
                      std::to_string(input_size));
  if (in_channels == 0) throw ConfigError("config: in_channels must be positive");
  if (stem_channels == 0) throw ConfigError("config: stem_channels must be positive");
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
    throw ConfigError("config: embed_dim " + std::to_string(embed_dim) +
                      " must divide by num_heads " + std::to_string(num_heads));
  if (kv_reduction == 0 || grid() % kv_reduction != 0)
    throw ConfigError("config: grid " + std::to_string(grid()) +
                      " must divide by kv_reduction " +
                      std::to_string(kv_reduction));
  if (mlp_conv_hidden_ratio == 0)
    throw ConfigError("config: mlp_conv_hidden_ratio must be positive");
  if (cnn_channels.size() != 4)
    throw ConfigError("config: cnn_channels must list 4 widths, got " +
                      std::to_string(cnn_channels.size()));
  for (std::size_t c : cnn_channels)
    if (c == 0) throw ConfigError("config: cnn_channels must be positive");
  if (ffn_expansion == 0)
    throw ConfigError("config: ffn_expansion must be positive");
  if (num_classes < 2)
    throw ConfigError("config: num_classes must be at least 2");
}

std::string ModelConfig::canonical() const {
  std::string s;
  s += "input_size=" + std::to_string(input_size);
  s += ";in_channels=" + std::to_string(in_channels);
  s += ";stem_channels=" + std::to_string(stem_channels);
  s += ";embed_dim=" + std::to_string(embed_dim);
  s += ";num_lmhsa_blocks=" + std::to_string(num_lmhsa_blocks);
  s += ";num_heads=" + std::to_string(num_heads);
  s += ";kv_reduction=" + std::to_string(kv_reduction);
  s += ";mlp_conv_hidden_ratio=" + std::to_string(mlp_conv_hidden_ratio);
  s += ";cnn_channels=";
  for (std::size_t i = 0; i < cnn_channels.size(); ++i)
    s += (i ? "," : "") + std::to_string(cnn_channels[i]);
  s += ";ffn_expansion=" + std::to_string(ffn_expansion);
  s += ";num_classes=" + std::to_string(num_classes);
  return s;
}

ModelConfig miniature_config() {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.stem_channels = 8;
  cfg.embed_dim = 16;
  cfg.num_lmhsa_blocks = 1;
  cfg.num_heads = 4;
  cfg.kv_reduction = 2;
  cfg.cnn_channels = {16, 16, 16, 16};
  return cfg;
}

Tensor& ParamStore::add(const std::string& name, Tensor t, bool trainable,
                        bool decay) {
  if (index_.count(name))
    throw ConfigError("params: duplicate name " + name);
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(t), trainable, decay});
  Tensor& ref = entries_.back().tensor;
  if (trainable) ref.set_requires_grad(true);
  return ref;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("params: unknown name " + name);
  return entries_[it->second].tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("params: unknown name " + name);
  return entries_[it->second].tensor;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_)
    if (e.trainable) e.tensor.zero_grad();
}

std::size_t param_count(const ParamStore& ps) {
  std::size_t n = 0;
  for (const auto& e : ps.entries())
    if (e.trainable) n += e.tensor.size();
  return n;
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.vec()) v = rng.truncated_normal(stddev);
  return t;
}

void add_conv(ParamStore& ps, const std::string& prefix, std::size_t c_out,
              std::size_t c_in, std::size_t k, Rng& rng) {
  ps.add(prefix + ".weight", trunc_normal({c_out, c_in, k, k}, rng));
  ps.add(prefix + ".bias", Tensor::zeros({c_out}));
}

void add_linear(ParamStore& ps, const std::string& prefix, std::size_t d_out,
                std::size_t d_in, Rng& rng) {
  ps.add(prefix + ".weight", trunc_normal({d_out, d_in}, rng));
  ps.add(prefix + ".bias", Tensor::zeros({d_out}));
}

void add_norm(ParamStore& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".gamma", Tensor::full({d}, 1.0), true, false);
  ps.add(prefix + ".beta", Tensor::zeros({d}), true, false);
}

// [N,C,H,W] -> [N, H*W, C]
Tensor to_tokens(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  return ops::reshape(ops::transpose(x, {0, 2, 3, 1}), {n, l, c});
}

// [N, H*W, C] -> [N,C,H,W]
Tensor to_map(const Tensor& t, std::size_t h, std::size_t w) {
  const std::size_t n = t.dim(0), c = t.dim(2);
  return ops::transpose(ops::reshape(t, {n, h, w, c}), {0, 3, 1, 2});
}

Tensor linear_tokens(const Tensor& t, const Tensor& w, const Tensor& b) {
  const std::size_t n = t.dim(0), l = t.dim(1), c = t.dim(2);
  Tensor y = ops::linear(ops::reshape(t, {n * l, c}), w, b);
  return ops::reshape(y, {n, l, w.dim(0)});
}

// [N, L, C] -> [N, heads, L, C/heads]
Tensor split_heads(const Tensor& t, std::size_t heads) {
  const std::size_t n = t.dim(0), l = t.dim(1), c = t.dim(2);
  return ops::transpose(ops::reshape(t, {n, l, heads, c / heads}),
                        {0, 2, 1, 3});
}

// [N, heads, L, dk] -> [N, L, heads*dk]
Tensor merge_heads(const Tensor& t) {
  const std::size_t n = t.dim(0), heads = t.dim(1), l = t.dim(2), dk = t.dim(3);
  return ops::reshape(ops::transpose(t, {0, 2, 1, 3}), {n, l, heads * dk});
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ParamStore ps;

  add_conv(ps, "grain.conv1", cfg.stem_channels, cfg.in_channels, 3, rng);
  add_conv(ps, "grain.conv2", cfg.stem_channels, cfg.stem_channels, 3, rng);
  add_conv(ps, "grain.conv3", cfg.stem_channels, cfg.stem_channels, 3, rng);
  add_conv(ps, "grain.patch", cfg.embed_dim, cfg.stem_channels, 2, rng);
  add_norm(ps, "grain.norm", cfg.embed_dim);

  const std::size_t g = cfg.grid();
  const std::size_t table_w = (2 * g - 1) * (2 * g - 1);
  for (std::size_t b = 0; b < cfg.num_lmhsa_blocks; ++b) {
    const std::string p = "attn.block" + std::to_string(b);
    ps.add(p + ".lpu.weight",
           trunc_normal({cfg.embed_dim, 1, 3, 3}, rng));
    add_norm(ps, p + ".norm", cfg.embed_dim);
    add_linear(ps, p + ".q", cfg.embed_dim, cfg.embed_dim, rng);
    ps.add(p + ".kv_reduce.weight",
           trunc_normal({cfg.embed_dim, 1, cfg.kv_reduction, cfg.kv_reduction},
                        rng));
    add_linear(ps, p + ".k", cfg.embed_dim, cfg.embed_dim, rng);
    add_linear(ps, p + ".v", cfg.embed_dim, cfg.embed_dim, rng);
    add_linear(ps, p + ".proj", cfg.embed_dim, cfg.embed_dim, rng);
    ps.add(p + ".bias_table", Tensor::zeros({cfg.num_heads, table_w}), true,
           false);
    add_linear(ps, p + ".mlp.fc1",
               cfg.embed_dim * cfg.mlp_conv_hidden_ratio, cfg.embed_dim, rng);
    add_linear(ps, p + ".mlp.fc2", cfg.embed_dim,
               cfg.embed_dim * cfg.mlp_conv_hidden_ratio, rng);
  }

  std::size_t c_in = cfg.embed_dim;
  for (std::size_t b = 0; b < cfg.cnn_channels.size(); ++b) {
    const std::string p = "cnn.block" + std::to_string(b);
    add_conv(ps, p + ".conv", cfg.cnn_channels[b], c_in, 3, rng);
    add_norm(ps, p + ".bn", cfg.cnn_channels[b]);
    ps.add(p + ".bn.running_mean", Tensor::zeros({cfg.cnn_channels[b]}), false);
    ps.add(p + ".bn.running_var", Tensor::full({cfg.cnn_channels[b]}, 1.0),
           false);
    c_in = cfg.cnn_channels[b];
  }

  const std::size_t fused = cfg.embed_dim + cfg.cnn_channels.back();
  add_linear(ps, "head.fc1", fused * cfg.ffn_expansion, fused, rng);
  add_linear(ps, "head.fc2", cfg.num_classes, fused * cfg.ffn_expansion, rng);
  return ps;
}

std::vector<std::size_t> relative_index_map(std::size_t h, std::size_t w,
                                            std::size_t r) {
  if (r == 0 || h % r || w % r)
    throw ConfigError("relative_index_map: grid " + std::to_string(h) + "x" +
                      std::to_string(w) + " must divide by r=" +
                      std::to_string(r));
  const std::size_t hr = h / r, wr = w / r;
  std::vector<std::size_t> idx(h * w * hr * wr);
  std::size_t at = 0;
  for (std::size_t qy = 0; qy < h; ++qy)
    for (std::size_t qx = 0; qx < w; ++qx)
      for (std::size_t i = 0; i < hr; ++i)
        for (std::size_t j = 0; j < wr; ++j)
          idx[at++] = (qy - i * r + h - 1) * (2 * w - 1) + (qx - j * r + w - 1);
  return idx;
}

Tensor grain_forward(const Tensor& images, const ModelConfig& cfg,
                     ParamStore& ps) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels)
    throw ConfigError("grain: want [N," + std::to_string(cfg.in_channels) +
                      ",H,W], got " + shape_str(images.shape()));
  if (images.dim(2) != cfg.input_size || images.dim(3) != cfg.input_size)
    throw ConfigError("grain: input extent " + std::to_string(images.dim(2)) +
                      "x" + std::to_string(images.dim(3)) +
                      " vs configured " + std::to_string(cfg.input_size));
  Tensor x = ops::gelu(ops::conv2d(images, ps.at("grain.conv1.weight"),
                                   ps.at("grain.conv1.bias"), 2, 1));
  x = ops::gelu(ops::conv2d(x, ps.at("grain.conv2.weight"),
                            ps.at("grain.conv2.bias"), 1, 1));
  x = ops::gelu(ops::conv2d(x, ps.at("grain.conv3.weight"),
                            ps.at("grain.conv3.bias"), 1, 1));
  x = ops::conv2d(x, ps.at("grain.patch.weight"), ps.at("grain.patch.bias"), 2,
                  0);
  const std::size_t g = x.dim(2);
  Tensor t = ops::layer_norm(to_tokens(x), ps.at("grain.norm.gamma"),
                             ps.at("grain.norm.beta"));
  return to_map(t, g, g);
}

Tensor lpu_forward(const Tensor& x, const Tensor& dw_weight) {
  return ops::add(x, ops::depthwise_conv2d(x, dw_weight, 1, 1));
}

Tensor lmhsa_forward(const Tensor& x, const ModelConfig& cfg, ParamStore& ps,
                     const std::string& prefix, AttnCost* cost) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t heads = cfg.num_heads, r = cfg.kv_reduction;
  if (c % heads) throw ConfigError("lmhsa: channels must divide by heads");
  if (h % r || w % r)
    throw ConfigError("lmhsa: spatial extent " + std::to_string(h) + "x" +
                      std::to_string(w) + " must divide by r=" +
                      std::to_string(r));
  const std::size_t dk = c / heads, l = h * w, lr = (h / r) * (w / r);

  Tensor y = ops::layer_norm(to_tokens(x), ps.at(prefix + ".norm.gamma"),
                             ps.at(prefix + ".norm.beta"));
  Tensor q = split_heads(
      linear_tokens(y, ps.at(prefix + ".q.weight"), ps.at(prefix + ".q.bias")),
      heads);
  q = ops::scale(q, 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor red = to_tokens(ops::depthwise_conv2d(
      to_map(y, h, w), ps.at(prefix + ".kv_reduce.weight"), r, 0));
  Tensor k = split_heads(linear_tokens(red, ps.at(prefix + ".k.weight"),
                                       ps.at(prefix + ".k.bias")),
                         heads);
  Tensor v = split_heads(linear_tokens(red, ps.at(prefix + ".v.weight"),
                                       ps.at(prefix + ".v.bias")),
                         heads);
  Tensor bias = ops::reshape(ops::gather_cols(ps.at(prefix + ".bias_table"),
                                              relative_index_map(h, w, r)),
                             {heads, l, lr});

  // The score/softmax tensors are the memory peak of the whole network
  // ([n, heads, l, l/r^2]); batching the attention core over image groups
  // caps that peak without changing the math.
  constexpr std::size_t kChunkDoubles = 48ull << 20;
  const std::size_t group =
      std::max<std::size_t>(1, kChunkDoubles / std::max<std::size_t>(1, heads * l * lr));
  unsigned long long* outer = ops::mac_counter();
  Tensor ctx;
  for (std::size_t at = 0; at < n; at += group) {
    const std::size_t cnt = std::min(group, n - at);
    Tensor qc = cnt == n ? q : ops::slice_batch(q, at, cnt);
    Tensor kc = cnt == n ? k : ops::slice_batch(k, at, cnt);
    Tensor vc = cnt == n ? v : ops::slice_batch(v, at, cnt);
    unsigned long long counted = 0;
    if (cost) ops::set_mac_counter(&counted);
    Tensor scores = ops::matmul_nt(qc, kc);  // [cnt, heads, l, lr]
    if (cost) {
      ops::set_mac_counter(outer);
      cost->score_macs += counted;
    }
    Tensor attn = ops::softmax_lastdim(ops::add_broadcast_batch(scores, bias));
    if (cost) {
      counted = 0;
      ops::set_mac_counter(&counted);
    }
    Tensor c = ops::matmul(attn, vc);  // [cnt, heads, l, dk]
    if (cost) {
      ops::set_mac_counter(outer);
      cost->value_macs += counted;
    }
    ctx = ctx.defined() ? ops::concat(ctx, c, 0) : c;
  }

  Tensor out = linear_tokens(merge_heads(ctx), ps.at(prefix + ".proj.weight"),
                             ps.at(prefix + ".proj.bias"));
  return ops::add(x, to_map(out, h, w));
}

Tensor mlp_conv_forward(const Tensor& x, ParamStore& ps,
                        const std::string& prefix) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor t = to_tokens(x);
  t = linear_tokens(t, ps.at(prefix + ".mlp.fc1.weight"),
                    ps.at(prefix + ".mlp.fc1.bias"));
  t = ops::gelu(t);
  t = linear_tokens(t, ps.at(prefix + ".mlp.fc2.weight"),
                    ps.at(prefix + ".mlp.fc2.bias"));
  return ops::add(x, to_map(t, h, w));
}

Tensor attention_stream_forward(const Tensor& x, const ModelConfig& cfg,
                                ParamStore& ps) {
  Tensor y = x;
  for (std::size_t b = 0; b < cfg.num_lmhsa_blocks; ++b) {
    const std::string p = "attn.block" + std::to_string(b);
    y = lpu_forward(y, ps.at(p + ".lpu.weight"));
    y = lmhsa_forward(y, cfg, ps, p);
    y = mlp_conv_forward(y, ps, p);
  }
  return y;
}

Tensor cnn_stream_forward(const Tensor& x, const ModelConfig& cfg,
                          ParamStore& ps, Mode mode) {
  Tensor y = x;
  for (std::size_t b = 0; b < cfg.cnn_channels.size(); ++b) {
    const std::string p = "cnn.block" + std::to_string(b);
    y = ops::conv2d(y, ps.at(p + ".conv.weight"), ps.at(p + ".conv.bias"), 1,
                    1);
    y = ops::gelu(y);
    y = ops::batch_norm(y, ps.at(p + ".bn.gamma"), ps.at(p + ".bn.beta"),
                        ps.at(p + ".bn.running_mean"),
                        ps.at(p + ".bn.running_var"), mode == Mode::kTrain);
  }
  return y;
}

Tensor fuse_and_classify(const Tensor& attn_feat, const Tensor& cnn_feat,
                         ParamStore& ps) {
  auto pool = [](const Tensor& t) {
    const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
    return ops::mean_axis(ops::reshape(t, {n, c, hw}), 2);
  };
  Tensor fused = ops::concat(pool(attn_feat), pool(cnn_feat), 1);
  Tensor hid = ops::gelu(
      ops::linear(fused, ps.at("head.fc1.weight"), ps.at("head.fc1.bias")));
  return ops::linear(hid, ps.at("head.fc2.weight"), ps.at("head.fc2.bias"));
}

Tensor model_forward(const Tensor& images, const ModelConfig& cfg,
                     ParamStore& ps, Mode mode) {
  Tensor g = grain_forward(images, cfg, ps);
  Tensor a = attention_stream_forward(g, cfg, ps);
  Tensor c = cnn_stream_forward(g, cfg, ps, mode);
  return fuse_and_classify(a, c, ps);
}

}  // namespace dsnet
