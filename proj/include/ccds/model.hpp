#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ccds/attention.hpp"
#include "ccds/embedding.hpp"
#include "ccds/keyvalue.hpp"
#include "ccds/parameters.hpp"
#include "ccds/road_network.hpp"

namespace ccds {

enum class Ablation { Full, NoReLSA, NoEnCov, NoCCDS };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& text);

struct ModelConfig {
  std::size_t d = 16;
  std::size_t layers = 2;
  std::size_t h_ressa = 1;
  std::size_t h_retsa = 1;
  std::size_t h_redasa = 2;
  std::size_t d_sk = 256;
  std::size_t input_len = 12;
  std::size_t horizon = 12;
  std::size_t channels = 1;
  std::size_t k = 8;
  std::size_t tau = 3;
  std::size_t geo_hops = 2;
  std::size_t sem_topk = 10;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::Full;

  std::size_t head_count() const { return h_ressa + h_retsa + h_redasa; }
  std::size_t d0() const { return d / head_count(); }

  // Throws ConfigError on any inconsistency, including d not divisible by the head count.
  void validate() const;

  // Reads the keys this struct owns, leaving others alone; missing keys keep defaults.
  static ModelConfig from_kv(const KeyValues& kv);
  void to_kv(KeyValues& kv) const;
  static const std::vector<std::string>& keys();
};

// Static per-dataset inputs shared by every layer.
struct GraphContext {
  Tensor spe_input;  // [N, k] Laplacian embedding
  Tensor m_geo;      // [N, N]
  Tensor m_sem;      // [N, N]

  std::size_t nodes() const { return spe_input.dim(0); }
};

// Laplacian embedding and both masks; `train_history` feeds the semantic mask.
GraphContext build_graph_context(const RoadNetwork& net, const TrafficTensor& train_history, const ModelConfig& cfg);

struct EncoderLayerParams {
  // Stream 1 head i: ReSSA (stage 1) then ReTSA (stage 2). Stream 2 head j: ReTSA then ReSSA.
  std::vector<AttentionHeadParams> s1_ressa, s2_retsa;
  std::vector<AttentionHeadParams> s1_retsa, s2_ressa;
  std::vector<AttentionHeadParams> redasa;
  Var w_hat;                  // [d, d]
  Var ln1_gain, ln1_bias;     // [d]
  Var ln2_gain, ln2_bias;     // [d]
  Var ffn_w1, ffn_b1;         // [d, 4d], [4d]
  Var ffn_w2, ffn_b2;         // [4d, d], [d]
  Var skip_w, skip_b;         // [d, d_sk], [d_sk]
};

struct OutputHeadParams {
  Var conv1_w, conv1_b;  // [h, h'], [h']  (time axis)
  Var conv2_w, conv2_b;  // [d_sk, C], [C]
};

// Identifies one attention call inside the network for taps and dumps.
struct AttentionSite {
  std::size_t layer = 0;
  std::size_t stage = 1;  // 1 or 2; ReDASA is always stage 1
  std::size_t head = 0;
  AttentionKind kind = AttentionKind::ReSSA;
  friend bool operator==(const AttentionSite&, const AttentionSite&) = default;
};

// Receives the effective weights [S, L, L] of every attention call during a forward pass.
using AttentionTap = std::function<void(const AttentionSite&, const Tensor&)>;

// Layer-level pieces, exposed for testing. Shapes: x [B, T, N, d].
struct StreamOutputs {
  std::vector<Var> ressa;   // one [B, T, N, d0] per stream-1 head
  std::vector<Var> retsa;   // one [B, T, N, d0] per stream-2 head
  std::vector<Var> redasa;  // one [B, T, N, d0] per ReDASA head
};

StreamOutputs criss_cross_streams(const Var& x, const EncoderLayerParams& layer, const GraphContext& g,
                                  const ModelConfig& cfg, std::size_t layer_index = 0,
                                  const AttentionTap* tap = nullptr);
// Concatenate (ReSSA heads, ReDASA heads, ReTSA heads) on the feature axis and right-multiply by w_hat.
Var restsa_mix(const StreamOutputs& heads, const Var& w_hat);
Var encoder_layer_forward(const Var& x, const EncoderLayerParams& layer, const GraphContext& g,
                          const ModelConfig& cfg, std::size_t layer_index = 0, const AttentionTap* tap = nullptr);
// Skip taps of every layer output summed into Y_hid, then time map h -> h' and feature map d_sk -> C.
Var output_head(const std::vector<Var>& layer_outputs, const std::vector<EncoderLayerParams>& layers,
                const OutputHeadParams& head);

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const EmbeddingParams& embedding() const { return embedding_; }
  const std::vector<EncoderLayerParams>& layers() const { return layers_; }
  const OutputHeadParams& head() const { return head_; }

  // x [B, h, N, C] (normalized, imputed); time holds B*h indices, batch-major. Returns [B, h', N, C].
  Var forward(const Var& x, const std::vector<TemporalIndex>& time, const GraphContext& g,
              const AttentionTap* tap = nullptr) const;

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  EmbeddingParams embedding_;
  std::vector<EncoderLayerParams> layers_;
  OutputHeadParams head_;
};

// ---- checkpoint -------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Tensors in manifest order plus a config snapshot. Names under "norm/" and "adam/" carry
// training state; every other name is a model parameter.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  KeyValues config;

  const Tensor* find(const std::string& name) const;
  void put(const std::string& name, Tensor value);
};

inline constexpr char kCheckpointMagic[9] = "CCDSRF01";

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot of a model's parameters and config.
Checkpoint checkpoint_from_model(const Model& model);
// Copies parameters into `model`. Missing, extra, or mis-shaped tensors raise FormatError naming them.
void load_parameters(Model& model, const Checkpoint& ckpt);

}  // namespace ccds
