#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnpkr/attention.hpp"
#include "tnpkr/kernels.hpp"
#include "tnpkr/optim.hpp"
#include "tnpkr/tasks.hpp"

namespace tnpkr {

enum class HeadType { gaussian, categorical };

HeadType head_type_from_string(const std::string& name);
std::string head_type_to_string(HeadType h);

struct BiasTermConfig {
  std::string kernel = "tisa";
  std::vector<int64_t> components;  // empty = all index dims
  int64_t n_basis = 5;              // tisa only
};

struct ModelConfig {
  AttentionVariant variant = AttentionVariant::scan;
  int64_t n_blocks = 6;
  int64_t d_model = 128;
  int64_t heads = 4;
  int64_t ffn_width = 48;
  double dropout = 0.1;
  bool embed_locations = true;
  std::vector<BiasTermConfig> bias_terms = {BiasTermConfig{}};
  bool share_bias_across_blocks = false;
  HeadType head = HeadType::gaussian;
  int64_t n_classes = 3;  // categorical head width
  double sigma_min = 0.05;
  bool bound_sigma = false;
  int64_t scan_block = 128;
  int64_t scan_query_tile = 128;
  int64_t performer_features = 64;
  int64_t embed_width = 32;
  int64_t ds = 1;  // index-set dims, set from the task

  bool has_bias() const { return !bias_terms.empty(); }
  int64_t f_input_dims() const { return head == HeadType::categorical ? n_classes : 1; }
  void validate() const;
};

template <typename T>
struct PredictiveOutput {
  HeadType head = HeadType::gaussian;
  Tensor<T> mu;      // [bs, n_t, 1]
  Tensor<T> sigma;   // [bs, n_t, 1], strictly positive
  Tensor<T> logits;  // [bs, n_t, k]
};

// Mean negative log likelihood of the targets under the predictive output.
// Gaussian targets: [bs, n_t, 1] values. Categorical: class ids in f.
template <typename T>
Tensor<T> nll_loss(const PredictiveOutput<T>& out, const Tensor<T>& targets);

// Token embeddings for one padded batch of episodes.
template <typename T>
struct TokenEmbeddings {
  Tensor<T> qs;  // [bs, n_t, d_model]
  Tensor<T> ks;  // [bs, n_c_max, d_model]
  Tensor<T> s_t;  // [bs, n_t, ds] carried as attention meta
  Tensor<T> s_c;
  std::vector<uint8_t> key_mask;  // [bs * n_c_max]
};

template <typename T>
class TnpModel {
 public:
  TnpModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamMap<T>& params() { return params_; }
  const ParamMap<T>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  int64_t param_count() const;

  TokenEmbeddings<T> embed_inputs(std::span<const TaskBatch<T>> episodes) const;

  // One transformer block: pre-norm shared-parameter updates of the query and
  // key streams. Exposed for tests.
  std::pair<Tensor<T>, Tensor<T>> krblock_forward(int64_t block, const Tensor<T>& qs,
                                                  const Tensor<T>& ks,
                                                  const std::vector<uint8_t>& key_mask,
                                                  const Tensor<T>& s_t, const Tensor<T>& s_c,
                                                  bool training, RngStream* drop_rng) const;

  PredictiveOutput<T> forward(std::span<const TaskBatch<T>> episodes, bool training = false,
                              RngStream* drop_rng = nullptr) const;

  // Block stack and head applied to already-built token embeddings; the
  // gradient-integrity checks differentiate through this path.
  PredictiveOutput<T> forward_from_embeddings(const TokenEmbeddings<T>& emb,
                                              bool training = false,
                                              RngStream* drop_rng = nullptr) const;

  // Evaluation path for large episodes: context stream computed once, test
  // points processed in chunks so no n_c x n_t buffer is ever materialized.
  PredictiveOutput<T> forward_chunked(const TaskBatch<T>& episode, int64_t chunk_size) const;

  void zero_grads();

 private:
  struct BlockParams {
    MhaParams<T> mha;
    Tensor<T> ln1_g, ln1_s, ln2_g, ln2_s;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    BiasSpec<T> bias;  // empty when the config has no bias terms
    DkaParams<T> dka;
  };

  PredictiveOutput<T> apply_head(const Tensor<T>& h) const;
  Tensor<T> embed_tokens(const Tensor<T>& obs, const Tensor<T>& s, const Tensor<T>& f) const;
  MhaContext<T> block_context(int64_t block) const;

  ModelConfig cfg_;
  ParamMap<T> params_;
  std::map<std::string, Tensor<T>> buffers_;

  Tensor<T> w_obs_, b_obs_, w_s_, b_s_, w_f_, b_f_;
  Tensor<T> all_w1_, all_b1_, all_w2_, all_b2_;
  std::vector<BlockParams> blocks_;
  Tensor<T> head_w_, head_b_;
  FeatureMap<T> feature_map_;
};

// Deterministic deep-set baseline: per-point encoder, masked mean pool,
// decoder conditioned on the pooled representation and the target location.
template <typename T>
class CnpBaseline {
 public:
  CnpBaseline(ModelConfig cfg, int64_t hidden, uint64_t seed);
  const ModelConfig& config() const { return cfg_; }
  ParamMap<T>& params() { return params_; }
  int64_t param_count() const;
  PredictiveOutput<T> forward(std::span<const TaskBatch<T>> episodes) const;
  void zero_grads();

 private:
  ModelConfig cfg_;
  int64_t hidden_;
  ParamMap<T> params_;
  Tensor<T> enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  Tensor<T> dec_w1_, dec_b1_, dec_w2_, dec_b2_;
  Tensor<T> head_w_, head_b_;
};

// Self-describing checkpoint container (little-endian).
template <typename T>
struct Checkpoint {
  std::string config_json;
  int64_t step = 0;
  uint64_t rng_key = 0;
  uint64_t rng_counter = 0;
  int64_t opt_step = 0;
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> opt_m;
  std::map<std::string, Tensor<T>> opt_v;
  std::map<std::string, Tensor<T>> buffers;
};

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt);
// 0 = float32, 1 = float64.
uint8_t peek_checkpoint_dtype(const std::string& path);
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

}  // namespace tnpkr
