#include "ccds/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ccds/errors.hpp"

namespace ccds {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoReLSA: return "no_relsa";
    case Ablation::NoEnCov: return "no_encov";
    case Ablation::NoCCDS: return "no_ccds";
  }
  return "?";
}

Ablation parse_ablation(const std::string& text) {
  if (text == "full") return Ablation::Full;
  if (text == "no_relsa") return Ablation::NoReLSA;
  if (text == "no_encov") return Ablation::NoEnCov;
  if (text == "no_ccds") return Ablation::NoCCDS;
  throw ConfigError("unknown ablation '" + text + "' (expected full, no_relsa, no_encov or no_ccds)");
}

// ---- config -----------------------------------------------------------------

namespace {

std::size_t size_key(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  const std::int64_t v = kv.get_int_or(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ConfigError(key + " must be non-negative, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

std::int64_t as_int(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k = {"d",     "layers",   "heads_ressa", "heads_retsa", "heads_redasa",
                                             "d_sk",  "input_len", "horizon",    "channels",    "k",
                                             "tau",   "geo_hops", "sem_topk",    "eps",         "seed",
                                             "ablation"};
  return k;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(head_count() >= 1, "at least one attention head is required");
  require(d % head_count() == 0, "d=" + std::to_string(d) + " is not divisible by the head count " +
                                     std::to_string(head_count()) + " (" + std::to_string(h_ressa) + "+" +
                                     std::to_string(h_retsa) + "+" + std::to_string(h_redasa) + ")");
  require(d >= 2, "d must be at least 2");
  require(layers >= 1, "layers must be at least 1");
  require(input_len >= 1 && horizon >= 1, "input_len and horizon must be at least 1");
  require(channels >= 1, "channels must be at least 1");
  require(d_sk >= 1, "d_sk must be at least 1");
  require(k >= 1, "k must be at least 1");
  require(sem_topk >= 1, "sem_topk must be at least 1");
  require(eps > 0.0, "eps must be positive");
  require(h_redasa == 0 || tau < input_len,
          "tau=" + std::to_string(tau) + " must be shorter than input_len=" + std::to_string(input_len));
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
  ModelConfig c;
  c.d = size_key(kv, "d", c.d);
  c.layers = size_key(kv, "layers", c.layers);
  c.h_ressa = size_key(kv, "heads_ressa", c.h_ressa);
  c.h_retsa = size_key(kv, "heads_retsa", c.h_retsa);
  c.h_redasa = size_key(kv, "heads_redasa", c.h_redasa);
  c.d_sk = size_key(kv, "d_sk", c.d_sk);
  c.input_len = size_key(kv, "input_len", c.input_len);
  c.horizon = size_key(kv, "horizon", c.horizon);
  c.channels = size_key(kv, "channels", c.channels);
  c.k = size_key(kv, "k", c.k);
  c.tau = size_key(kv, "tau", c.tau);
  c.geo_hops = size_key(kv, "geo_hops", c.geo_hops);
  c.sem_topk = size_key(kv, "sem_topk", c.sem_topk);
  c.eps = kv.get_double_or("eps", c.eps);
  c.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", static_cast<std::int64_t>(c.seed)));
  c.ablation = parse_ablation(kv.get_or("ablation", to_string(c.ablation)));
  c.validate();
  return c;
}

void ModelConfig::to_kv(KeyValues& kv) const {
  kv.set("d", as_int(d));
  kv.set("layers", as_int(layers));
  kv.set("heads_ressa", as_int(h_ressa));
  kv.set("heads_retsa", as_int(h_retsa));
  kv.set("heads_redasa", as_int(h_redasa));
  kv.set("d_sk", as_int(d_sk));
  kv.set("input_len", as_int(input_len));
  kv.set("horizon", as_int(horizon));
  kv.set("channels", as_int(channels));
  kv.set("k", as_int(k));
  kv.set("tau", as_int(tau));
  kv.set("geo_hops", as_int(geo_hops));
  kv.set("sem_topk", as_int(sem_topk));
  kv.set("eps", eps);
  kv.set("seed", static_cast<std::int64_t>(seed));
  kv.set("ablation", to_string(ablation));
}

GraphContext build_graph_context(const RoadNetwork& net, const TrafficTensor& train_history, const ModelConfig& cfg) {
  if (train_history.nodes() != net.node_count) {
    throw DataError("series has " + std::to_string(train_history.nodes()) + " nodes but the network has " +
                    std::to_string(net.node_count));
  }
  const Tensor adjacency = build_adjacency(net);
  GraphContext g;
  g.spe_input = laplacian_embedding(symmetric_eigen(normalized_laplacian(adjacency)), cfg.k);
  g.m_geo = geo_mask(adjacency, cfg.geo_hops);
  g.m_sem = sem_mask(train_history, cfg.sem_topk);
  return g;
}

// ---- layers -----------------------------------------------------------------

namespace {

// x [..., d_in] · w [d_in, d_out] (+ b [d_out]) over the last axis.
Var linear(const Var& x, const Var& w, const Var* b = nullptr) {
  Shape s = x.shape();
  const std::size_t d_in = s.back();
  if (w.dim(0) != d_in) {
    throw DimensionError("linear map " + shape_str(w.shape()) + " does not accept " + shape_str(s));
  }
  const std::size_t rows = x.value().size() / d_in;
  Var y = matmul(reshape(x, {rows, d_in}), w);
  if (b) y = broadcast_add(y, reshape(*b, {1, b->dim(0)}));
  s.back() = w.dim(1);
  return reshape(y, s);
}

// [B, T, N, f] <-> slice batches
Var spatial_view(const Var& x) { return reshape(x, {x.dim(0) * x.dim(1), x.dim(2), x.dim(3)}); }
Var temporal_view(const Var& x) {
  return reshape(permute(x, {0, 2, 1, 3}), {x.dim(0) * x.dim(2), x.dim(1), x.dim(3)});
}
Var from_spatial(const Var& y, std::size_t B, std::size_t T, std::size_t N) { return reshape(y, {B, T, N, y.dim(2)}); }
Var from_temporal(const Var& y, std::size_t B, std::size_t T, std::size_t N) {
  return permute(reshape(y, {B, N, T, y.dim(2)}), {0, 2, 1, 3});
}

HeadOptions head_options(const ModelConfig& cfg, const AttentionTap* tap, AttentionSite site) {
  HeadOptions opt;
  opt.rectified = cfg.ablation != Ablation::NoReLSA;
  opt.use_encov = cfg.ablation != Ablation::NoEnCov;
  opt.eps = cfg.eps;
  if (tap && *tap) {
    opt.on_weights = [tap, site](const Tensor& w) { (*tap)(site, w); };
  }
  return opt;
}

Var ressa_on(const Var& x, const AttentionHeadParams& p, const GraphContext& g, const ModelConfig& cfg,
             const AttentionTap* tap, AttentionSite site) {
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2);
  return from_spatial(ressa_forward(spatial_view(x), p, g.m_geo, head_options(cfg, tap, site)), B, T, N);
}

Var retsa_on(const Var& x, const AttentionHeadParams& p, const ModelConfig& cfg, const AttentionTap* tap,
             AttentionSite site) {
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2);
  return from_temporal(retsa_forward(temporal_view(x), p, head_options(cfg, tap, site)), B, T, N);
}

}  // namespace

StreamOutputs criss_cross_streams(const Var& x, const EncoderLayerParams& layer, const GraphContext& g,
                                  const ModelConfig& cfg, std::size_t layer_index, const AttentionTap* tap) {
  if (x.value().rank() != 4) throw DimensionError("encoder input must be [B,T,N,d], got " + shape_str(x.shape()));
  const bool crossed = cfg.ablation != Ablation::NoCCDS;
  StreamOutputs out;
  for (std::size_t i = 0; i < layer.s1_ressa.size(); ++i) {
    Var stage1 = ressa_on(x, layer.s1_ressa[i], g, cfg, tap, {layer_index, 1, i, AttentionKind::ReSSA});
    Var stage2 = retsa_on(crossed ? stage1 : x, layer.s2_retsa[i], cfg, tap, {layer_index, 2, i, AttentionKind::ReTSA});
    out.ressa.push_back(crossed ? stage2 : add(stage1, stage2));
  }
  for (std::size_t j = 0; j < layer.s1_retsa.size(); ++j) {
    Var stage1 = retsa_on(x, layer.s1_retsa[j], cfg, tap, {layer_index, 1, j, AttentionKind::ReTSA});
    Var stage2 = ressa_on(crossed ? stage1 : x, layer.s2_ressa[j], g, cfg, tap, {layer_index, 2, j, AttentionKind::ReSSA});
    out.retsa.push_back(crossed ? stage2 : add(stage1, stage2));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), N = x.dim(2);
  for (std::size_t r = 0; r < layer.redasa.size(); ++r) {
    HeadOptions opt = head_options(cfg, tap, {layer_index, 1, r, AttentionKind::ReDASA});
    out.redasa.push_back(from_spatial(redasa_forward(x, layer.redasa[r], g.m_sem, cfg.tau, opt), B, T, N));
  }
  return out;
}

Var restsa_mix(const StreamOutputs& heads, const Var& w_hat) {
  std::vector<Var> parts;
  parts.insert(parts.end(), heads.ressa.begin(), heads.ressa.end());
  parts.insert(parts.end(), heads.redasa.begin(), heads.redasa.end());
  parts.insert(parts.end(), heads.retsa.begin(), heads.retsa.end());
  if (parts.empty()) throw ContractError("restsa_mix: no head outputs");
  Var cat = concat_last(parts);
  if (cat.shape().back() != w_hat.dim(0)) {
    throw DimensionError("concatenated heads have width " + std::to_string(cat.shape().back()) + " but w_hat is " +
                         shape_str(w_hat.shape()));
  }
  return linear(cat, w_hat);
}

Var encoder_layer_forward(const Var& x, const EncoderLayerParams& layer, const GraphContext& g,
                          const ModelConfig& cfg, std::size_t layer_index, const AttentionTap* tap) {
  Var u = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
  Var y1 = restsa_mix(criss_cross_streams(u, layer, g, cfg, layer_index, tap), layer.w_hat);
  Var residual = add(y1, x);
  Var z = layer_norm(residual, layer.ln2_gain, layer.ln2_bias);
  Var ffn = linear(relu(linear(z, layer.ffn_w1, &layer.ffn_b1)), layer.ffn_w2, &layer.ffn_b2);
  return add(ffn, residual);
}

Var output_head(const std::vector<Var>& layer_outputs, const std::vector<EncoderLayerParams>& layers,
                const OutputHeadParams& head) {
  if (layer_outputs.empty() || layer_outputs.size() != layers.size()) {
    throw ContractError("output_head: " + std::to_string(layer_outputs.size()) + " layer outputs for " +
                        std::to_string(layers.size()) + " layers");
  }
  Var hidden;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Var tap = linear(layer_outputs[l], layers[l].skip_w, &layers[l].skip_b);
    hidden = l == 0 ? tap : add(hidden, tap);
  }
  const std::size_t B = hidden.dim(0), T = hidden.dim(1), N = hidden.dim(2), dsk = hidden.dim(3);
  if (head.conv1_w.dim(0) != T) {
    throw DimensionError("output head expects " + std::to_string(head.conv1_w.dim(0)) + " input steps, got " +
                         std::to_string(T));
  }
  const std::size_t H = head.conv1_w.dim(1);
  Var time_last = permute(hidden, {0, 2, 3, 1});  // [B, N, d_sk, T]
  Var mapped = linear(time_last, head.conv1_w, &head.conv1_b);
  Var back = permute(reshape(mapped, {B, N, dsk, H}), {0, 3, 1, 2});  // [B, h', N, d_sk]
  return linear(back, head.conv2_w, &head.conv2_b);
}

// ---- model ------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng root(cfg_.seed);
  Rng rng_embed = root.split(1);
  embedding_ = EmbeddingParams::create(store_, "embed/", cfg_.channels, cfg_.k, cfg_.d, rng_embed);

  const std::size_t d = cfg_.d, d0 = cfg_.d0();
  const bool encov_trainable = cfg_.ablation != Ablation::NoEnCov;
  const std::size_t stage2_in = cfg_.ablation == Ablation::NoCCDS ? d : d0;
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    Rng rng = root.split(100 + l);
    const std::string pre = "layer" + std::to_string(l) + "/";
    EncoderLayerParams p;
    auto heads = [&](std::vector<AttentionHeadParams>& dst, const std::string& name, std::size_t count, std::size_t d_in,
                     bool delay) {
      for (std::size_t i = 0; i < count; ++i) {
        dst.push_back(AttentionHeadParams::create(store_, pre + name + std::to_string(i) + "/", d_in, d0, delay,
                                                  encov_trainable, rng));
      }
    };
    heads(p.s1_ressa, "s1_ressa", cfg_.h_ressa, d, false);
    heads(p.s2_retsa, "s2_retsa", cfg_.h_ressa, stage2_in, false);
    heads(p.s1_retsa, "s1_retsa", cfg_.h_retsa, d, false);
    heads(p.s2_ressa, "s2_ressa", cfg_.h_retsa, stage2_in, false);
    heads(p.redasa, "redasa", cfg_.h_redasa, d, true);
    p.w_hat = store_.add(pre + "w_hat", glorot_uniform(rng, d, d));
    p.ln1_gain = store_.add(pre + "ln1_gain", Tensor({d}, 1.0));
    p.ln1_bias = store_.add(pre + "ln1_bias", Tensor({d}, 0.0));
    p.ln2_gain = store_.add(pre + "ln2_gain", Tensor({d}, 1.0));
    p.ln2_bias = store_.add(pre + "ln2_bias", Tensor({d}, 0.0));
    p.ffn_w1 = store_.add(pre + "ffn_w1", glorot_uniform(rng, d, 4 * d));
    p.ffn_b1 = store_.add(pre + "ffn_b1", Tensor({4 * d}, 0.0));
    p.ffn_w2 = store_.add(pre + "ffn_w2", glorot_uniform(rng, 4 * d, d));
    p.ffn_b2 = store_.add(pre + "ffn_b2", Tensor({d}, 0.0));
    p.skip_w = store_.add(pre + "skip_w", glorot_uniform(rng, d, cfg_.d_sk));
    p.skip_b = store_.add(pre + "skip_b", Tensor({cfg_.d_sk}, 0.0));
    layers_.push_back(std::move(p));
  }

  Rng rng_head = root.split(2);
  head_.conv1_w = store_.add("head/conv1_w", glorot_uniform(rng_head, cfg_.input_len, cfg_.horizon));
  head_.conv1_b = store_.add("head/conv1_b", Tensor({cfg_.horizon}, 0.0));
  head_.conv2_w = store_.add("head/conv2_w", glorot_uniform(rng_head, cfg_.d_sk, cfg_.channels));
  head_.conv2_b = store_.add("head/conv2_b", Tensor({cfg_.channels}, 0.0));
}

Var Model::forward(const Var& x, const std::vector<TemporalIndex>& time, const GraphContext& g,
                   const AttentionTap* tap) const {
  if (x.value().rank() != 4 || x.dim(1) != cfg_.input_len || x.dim(3) != cfg_.channels) {
    throw DimensionError("model expects input [B," + std::to_string(cfg_.input_len) + ",N," +
                         std::to_string(cfg_.channels) + "], got " + shape_str(x.shape()));
  }
  if (x.dim(2) != g.nodes()) {
    throw DimensionError("input has " + std::to_string(x.dim(2)) + " nodes but the graph has " +
                         std::to_string(g.nodes()));
  }
  Var h = embed(x, g.spe_input, time, embedding_);
  std::vector<Var> outputs;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = encoder_layer_forward(h, layers_[l], g, cfg_, l, tap);
    outputs.push_back(h);
  }
  return output_head(outputs, layers_, head_);
}

// ---- checkpoint -------------------------------------------------------------

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void Checkpoint::put(const std::string& name, Tensor value) {
  for (auto& t : tensors) {
    if (t.name == name) {
      t.value = std::move(value);
      return;
    }
  }
  tensors.push_back({name, std::move(value)});
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

bool is_training_state(const std::string& name) { return name.starts_with("norm/") || name.starts_with("adam/"); }

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string manifest;
  for (const auto& t : ckpt.tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n") != std::string::npos) {
      throw FormatError("tensor name '" + t.name + "' cannot be stored in a checkpoint");
    }
    manifest += t.name;
    for (auto e : t.value.shape()) manifest += " " + std::to_string(e);
    manifest += "\n";
  }
  std::string out(kCheckpointMagic, 8);
  put_u64(out, manifest.size());
  out += manifest;
  for (const auto& t : ckpt.tensors) {
    for (double v : t.value.storage()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  out += ckpt.config.to_text();
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::uint64_t manifest_len = get_u64(bytes, 8);
  if (manifest_len > bytes.size() - 16) throw FormatError("checkpoint truncated inside the manifest");
  std::istringstream manifest(std::string(bytes.substr(16, manifest_len)));
  Checkpoint ckpt;
  std::vector<Shape> shapes;
  std::string line;
  std::size_t payload_values = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name;
    fields >> name;
    Shape shape;
    std::string extent;
    while (fields >> extent) {
      try {
        const std::int64_t e = parse_int(extent);
        if (e <= 0) throw DataError("");
        shape.push_back(static_cast<std::size_t>(e));
      } catch (const DataError&) {
        throw FormatError("bad extent '" + extent + "' for tensor '" + name + "' in checkpoint manifest");
      }
    }
    if (shape.empty()) throw FormatError("tensor '" + name + "' has no shape in checkpoint manifest");
    payload_values += shape_numel(shape);
    ckpt.tensors.push_back({name, Tensor()});
    shapes.push_back(std::move(shape));
  }
  std::size_t at = 16 + manifest_len;
  if (bytes.size() - at < payload_values * 8) {
    throw FormatError("checkpoint payload truncated: expected " + std::to_string(payload_values) + " values, found " +
                      std::to_string((bytes.size() - at) / 8));
  }
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    std::vector<double> data(shape_numel(shapes[i]));
    for (auto& v : data) {
      v = std::bit_cast<double>(get_u64(bytes, at));
      at += 8;
    }
    ckpt.tensors[i].value = Tensor(shapes[i], std::move(data));
  }
  try {
    ckpt.config = KeyValues::parse(bytes.substr(at), "checkpoint config");
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

Checkpoint checkpoint_from_model(const Model& model) {
  Checkpoint ckpt;
  for (const auto& e : model.params().entries()) ckpt.tensors.push_back({e.name, e.var.value()});
  model.config().to_kv(ckpt.config);
  return ckpt;
}

void load_parameters(Model& model, const Checkpoint& ckpt) {
  for (const auto& t : ckpt.tensors) {
    if (!is_training_state(t.name) && !model.params().contains(t.name)) {
      throw FormatError("checkpoint tensor '" + t.name + "' has no counterpart in the model");
    }
  }
  for (auto& e : model.params().entries()) {
    const Tensor* t = ckpt.find(e.name);
    if (!t) throw FormatError("checkpoint lacks parameter '" + e.name + "'");
    if (t->shape() != e.var.shape()) {
      throw FormatError("parameter '" + e.name + "' has shape " + shape_str(t->shape()) + " in the checkpoint but " +
                        shape_str(e.var.shape()) + " in the model");
    }
    e.var.mutable_value() = *t;
  }
}

}  // namespace ccds
