#include "tnpkr/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace tnpkr {

HeadType head_type_from_string(const std::string& name) {
  if (name == "gaussian") return HeadType::gaussian;
  if (name == "categorical") return HeadType::categorical;
  throw ConfigError("unknown head type '" + name + "'");
}

std::string head_type_to_string(HeadType h) {
  return h == HeadType::gaussian ? "gaussian" : "categorical";
}

void ModelConfig::validate() const {
  if (d_model < 1 || n_blocks < 0 || heads < 1 || ffn_width < 1 || embed_width < 1) {
    throw ConfigError("model config: dimensions must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  if (dropout < 0 || dropout >= 1) throw ConfigError("model config: dropout must be in [0,1)");
  if (sigma_min < 0 || sigma_min >= 1) {
    throw ConfigError("model config: sigma_min must be in [0,1)");
  }
  if (head == HeadType::categorical && n_classes < 2) {
    throw ConfigError("model config: categorical head needs at least 2 classes");
  }
  if ((variant == AttentionVariant::performer || variant == AttentionVariant::dka) &&
      has_bias()) {
    throw ConfigError("model config: " + attention_variant_to_string(variant) +
                      " attention does not take a kernel bias");
  }
  if (!embed_locations && !has_bias() && variant != AttentionVariant::dka) {
    throw ConfigError(
        "model config: embed_locations=false needs a kernel bias over the index set, "
        "otherwise the model cannot see locations");
  }
  if (scan_block < 1 || scan_query_tile < 1 || performer_features < 1) {
    throw ConfigError("model config: scan/performer sizes must be positive");
  }
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> nll_loss(const PredictiveOutput<T>& out, const Tensor<T>& targets) {
  if (out.head == HeadType::gaussian) {
    if (targets.shape() != out.mu.shape()) {
      throw DataError("nll_loss: target shape " + shape_str(targets.shape()) +
                      " does not match mu " + shape_str(out.mu.shape()));
    }
    constexpr double kHalfLog2Pi = 0.91893853320467274178;
    Tensor<T> log_term = add_scalar(log_op(out.sigma), static_cast<T>(kHalfLog2Pi));
    Tensor<T> quad = div(square(sub(targets, out.mu)), scale(square(out.sigma), T(2)));
    return mean(add(log_term, quad));
  }
  const int64_t rows = out.logits.numel() / out.logits.size(-1);
  if (targets.numel() != rows) {
    throw DataError("nll_loss: need one class id per row");
  }
  std::vector<int64_t> labels(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) {
    labels[static_cast<size_t>(i)] = static_cast<int64_t>(std::llround(static_cast<double>(targets[i])));
  }
  return cross_entropy(out.logits, labels);
}

// ---------------------------------------------------------------------------
// TNP model

template <typename T>
TnpModel<T>::TnpModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  RngStream root(seed);
  const int64_t ew = cfg_.embed_width;
  const int64_t dm = cfg_.d_model;
  const int64_t df = cfg_.f_input_dims();
  const int64_t dk = dm / cfg_.heads;

  const auto affine = [&](RngStream& r, int64_t in, int64_t out_w) {
    return std::pair<Tensor<T>, Tensor<T>>{
        Tensor<T>::randn({in, out_w}, r, static_cast<T>(1.0 / std::sqrt(static_cast<double>(in))),
                         true),
        Tensor<T>::zeros({out_w}, true)};
  };

  RngStream re = root.split("embed");
  std::tie(w_obs_, b_obs_) = affine(re, 1, ew);
  std::tie(w_s_, b_s_) = affine(re, cfg_.ds, ew);
  std::tie(w_f_, b_f_) = affine(re, df, ew);
  const int64_t cat_w = ew * (cfg_.embed_locations ? 3 : 2);
  std::tie(all_w1_, all_b1_) = affine(re, cat_w, dm);
  std::tie(all_w2_, all_b2_) = affine(re, dm, dm);
  params_.emplace("embed.obs.w", w_obs_);
  params_.emplace("embed.obs.b", b_obs_);
  params_.emplace("embed.s.w", w_s_);
  params_.emplace("embed.s.b", b_s_);
  params_.emplace("embed.f.w", w_f_);
  params_.emplace("embed.f.b", b_f_);
  params_.emplace("embed.all.w1", all_w1_);
  params_.emplace("embed.all.b1", all_b1_);
  params_.emplace("embed.all.w2", all_w2_);
  params_.emplace("embed.all.b2", all_b2_);

  const auto make_bias = [&](RngStream& r) {
    BiasSpec<T> spec;
    if (!cfg_.has_bias()) return spec;
    for (const auto& tc : cfg_.bias_terms) {
      BiasTerm<T> term;
      term.kernel = bias_kernel_from_string(tc.kernel);
      term.components = tc.components;
      if (term.kernel == BiasKernel::tisa) {
        RngStream rt = r.split("tisa");
        term.tisa = TisaParams<T>::init(tc.n_basis, rt);
      } else {
        const int64_t np = term.kernel == BiasKernel::matern32 ? 1 : 2;
        term.log_params = Tensor<T>::zeros({np}, true);
      }
      spec.terms.push_back(std::move(term));
    }
    spec.alpha = Tensor<T>::zeros({static_cast<int64_t>(spec.terms.size())}, true);
    return spec;
  };

  blocks_.resize(static_cast<size_t>(cfg_.n_blocks));
  for (int64_t i = 0; i < cfg_.n_blocks; ++i) {
    auto& blk = blocks_[static_cast<size_t>(i)];
    const std::string pfx = "block" + std::to_string(i);
    RngStream rb = root.split(pfx);
    blk.mha = MhaParams<T>::make(dm, rb);
    blk.mha.collect_params(pfx + ".mha", params_);
    blk.ln1_g = Tensor<T>::ones({dm}, true);
    blk.ln1_s = Tensor<T>::zeros({dm}, true);
    blk.ln2_g = Tensor<T>::ones({dm}, true);
    blk.ln2_s = Tensor<T>::zeros({dm}, true);
    params_.emplace(pfx + ".ln1.g", blk.ln1_g);
    params_.emplace(pfx + ".ln1.s", blk.ln1_s);
    params_.emplace(pfx + ".ln2.g", blk.ln2_g);
    params_.emplace(pfx + ".ln2.s", blk.ln2_s);
    std::tie(blk.ffn_w1, blk.ffn_b1) = affine(rb, dm, cfg_.ffn_width);
    std::tie(blk.ffn_w2, blk.ffn_b2) = affine(rb, cfg_.ffn_width, dm);
    params_.emplace(pfx + ".ffn.w1", blk.ffn_w1);
    params_.emplace(pfx + ".ffn.b1", blk.ffn_b1);
    params_.emplace(pfx + ".ffn.w2", blk.ffn_w2);
    params_.emplace(pfx + ".ffn.b2", blk.ffn_b2);
    if (cfg_.has_bias()) {
      if (cfg_.share_bias_across_blocks && i > 0) {
        blk.bias = blocks_[0].bias;
      } else {
        blk.bias = make_bias(rb);
        blk.bias.collect_params(pfx + ".bias", params_);
      }
    }
    if (cfg_.variant == AttentionVariant::dka) {
      RngStream rphi = rb.split("dka_phi");
      RngStream rpsi = rb.split("dka_psi");
      blk.dka.phi = Mlp<T>::make(dk + cfg_.ds, dm, dk, rphi);
      blk.dka.psi = Mlp<T>::make(dk, dm, dk, rpsi);
      blk.dka.ln_gain = Tensor<T>::ones({dk}, true);
      blk.dka.ln_shift = Tensor<T>::zeros({dk}, true);
      blk.dka.phi.collect_params(pfx + ".dka.phi", params_);
      blk.dka.psi.collect_params(pfx + ".dka.psi", params_);
      params_.emplace(pfx + ".dka.ln.g", blk.dka.ln_gain);
      params_.emplace(pfx + ".dka.ln.s", blk.dka.ln_shift);
    }
  }

  RngStream rh = root.split("head");
  const int64_t out_w = cfg_.head == HeadType::gaussian ? 2 : cfg_.n_classes;
  std::tie(head_w_, head_b_) = affine(rh, dm, out_w);
  params_.emplace("head.w", head_w_);
  params_.emplace("head.b", head_b_);

  if (cfg_.variant == AttentionVariant::performer) {
    feature_map_ = make_feature_map<T>(dk, cfg_.performer_features, root.split("performer").key());
    buffers_.emplace("performer.w", feature_map_.w);
  }
}

template <typename T>
int64_t TnpModel<T>::param_count() const {
  int64_t n = 0;
  for (const auto& [name, p] : params_) {
    (void)name;
    n += p.numel();
  }
  return n;
}

template <typename T>
void TnpModel<T>::zero_grads() {
  for (auto& [name, p] : params_) {
    (void)name;
    p.zero_grad();
  }
}

template <typename T>
Tensor<T> TnpModel<T>::embed_tokens(const Tensor<T>& obs, const Tensor<T>& s,
                                    const Tensor<T>& f) const {
  std::vector<Tensor<T>> parts;
  parts.push_back(gelu(linear(obs, w_obs_, b_obs_)));
  if (cfg_.embed_locations) parts.push_back(gelu(linear(s, w_s_, b_s_)));
  parts.push_back(gelu(linear(f, w_f_, b_f_)));
  Tensor<T> cat = concat_last(parts);
  return linear(gelu(linear(cat, all_w1_, all_b1_)), all_w2_, all_b2_);
}

template <typename T>
TokenEmbeddings<T> TnpModel<T>::embed_inputs(std::span<const TaskBatch<T>> episodes) const {
  if (episodes.empty()) throw DataError("embed_inputs: empty batch");
  const int64_t bs = static_cast<int64_t>(episodes.size());
  const int64_t n_t = episodes[0].n_test();
  const int64_t ds = episodes[0].s_t.size(-1);
  if (ds != cfg_.ds) {
    throw ConfigError("embed_inputs: task index dims " + std::to_string(ds) +
                      " do not match model ds " + std::to_string(cfg_.ds));
  }
  const bool categorical = task_is_categorical(episodes[0].kind);
  if (categorical != (cfg_.head == HeadType::categorical)) {
    throw ConfigError("embed_inputs: task and prediction head disagree");
  }
  int64_t n_c_max = 1;
  for (const auto& ep : episodes) {
    if (ep.n_test() != n_t || ep.kind != episodes[0].kind) {
      throw DataError("embed_inputs: episodes in a batch must share kind and test count");
    }
    n_c_max = std::max(n_c_max, ep.n_context());
  }
  const int64_t df = cfg_.f_input_dims();

  Tensor<T> obs_c = Tensor<T>::ones({bs, n_c_max, 1});
  Tensor<T> s_c = Tensor<T>::zeros({bs, n_c_max, ds});
  Tensor<T> f_c = Tensor<T>::zeros({bs, n_c_max, df});
  Tensor<T> obs_t = Tensor<T>::zeros({bs, n_t, 1});
  Tensor<T> s_t = Tensor<T>::zeros({bs, n_t, ds});
  Tensor<T> f_t0 = Tensor<T>::zeros({bs, n_t, df});
  std::vector<uint8_t> key_mask(static_cast<size_t>(bs * n_c_max), 0);

  for (int64_t b = 0; b < bs; ++b) {
    const auto& ep = episodes[static_cast<size_t>(b)];
    for (int64_t i = 0; i < ep.n_context(); ++i) {
      for (int64_t c = 0; c < ds; ++c) s_c[(b * n_c_max + i) * ds + c] = ep.s_c[i * ds + c];
      const double fv = static_cast<double>(ep.f_c[i]);
      if (!std::isfinite(fv)) throw DataError("embed_inputs: non-finite context value");
      if (categorical) {
        const int64_t cls = static_cast<int64_t>(std::llround(fv));
        if (cls < 0 || cls >= df) throw DataError("embed_inputs: class id out of range");
        f_c[(b * n_c_max + i) * df + cls] = T(1);
      } else {
        f_c[(b * n_c_max + i) * df] = static_cast<T>(fv);
      }
      key_mask[static_cast<size_t>(b * n_c_max + i)] =
          i < static_cast<int64_t>(ep.context_mask.size()) ? ep.context_mask[static_cast<size_t>(i)]
                                                           : 1;
    }
    for (int64_t i = 0; i < n_t; ++i) {
      if (!std::isfinite(static_cast<double>(ep.s_t[i * ds]))) {
        throw DataError("embed_inputs: non-finite test location");
      }
      for (int64_t c = 0; c < ds; ++c) s_t[(b * n_t + i) * ds + c] = ep.s_t[i * ds + c];
    }
  }

  TokenEmbeddings<T> emb;
  emb.qs = embed_tokens(obs_t, s_t, f_t0);
  emb.ks = embed_tokens(obs_c, s_c, f_c);
  emb.s_t = s_t;
  emb.s_c = s_c;
  emb.key_mask = std::move(key_mask);
  return emb;
}

template <typename T>
MhaContext<T> TnpModel<T>::block_context(int64_t block) const {
  MhaContext<T> ctx;
  const auto& blk = blocks_[static_cast<size_t>(block)];
  if (cfg_.has_bias()) ctx.bias = &blk.bias;
  if (cfg_.variant == AttentionVariant::performer) ctx.feature_map = &feature_map_;
  if (cfg_.variant == AttentionVariant::dka) ctx.dka = &blk.dka;
  ctx.scan.block_size = cfg_.scan_block;
  ctx.scan.query_tile = cfg_.scan_query_tile;
  return ctx;
}

namespace {
template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, bool training, RngStream* rng) {
  if (!training || p == 0.0) return x;
  if (rng == nullptr) {
    throw ConfigError("model forward: training with dropout needs an rng stream");
  }
  return dropout(x, p, true, *rng);
}
}  // namespace

template <typename T>
std::pair<Tensor<T>, Tensor<T>> TnpModel<T>::krblock_forward(
    int64_t block, const Tensor<T>& qs, const Tensor<T>& ks,
    const std::vector<uint8_t>& key_mask, const Tensor<T>& s_t, const Tensor<T>& s_c,
    bool training, RngStream* drop_rng) const {
  const auto& blk = blocks_[static_cast<size_t>(block)];
  const MhaContext<T> ctx = block_context(block);

  Tensor<T> ks_normed = layer_norm(ks, blk.ln1_g, blk.ln1_s);

  // Same parameters serve the query-stream and key-stream updates.
  const auto stream_update = [&](const Tensor<T>& x0, const Tensor<T>& s_x) {
    Tensor<T> x1 = layer_norm(x0, blk.ln1_g, blk.ln1_s);
    Tensor<T> x2 = multi_head_attention(cfg_.variant, x1, ks_normed, key_mask, s_x, s_c,
                                        blk.mha, cfg_.heads, ctx);
    Tensor<T> x3 = add(x0, maybe_dropout(x2, cfg_.dropout, training, drop_rng));
    Tensor<T> x4 = layer_norm(x3, blk.ln2_g, blk.ln2_s);
    Tensor<T> x5 = linear(gelu(linear(x4, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
    return add(x3, maybe_dropout(x5, cfg_.dropout, training, drop_rng));
  };

  Tensor<T> qs_next = stream_update(qs, s_t);
  Tensor<T> ks_next = stream_update(ks, s_c);
  return {qs_next, ks_next};
}

template <typename T>
PredictiveOutput<T> TnpModel<T>::apply_head(const Tensor<T>& h) const {
  PredictiveOutput<T> out;
  out.head = cfg_.head;
  Tensor<T> raw = linear(h, head_w_, head_b_);
  if (cfg_.head == HeadType::gaussian) {
    out.mu = slice_last(raw, 0, 1);
    Tensor<T> s_raw = slice_last(raw, 1, 1);
    if (cfg_.bound_sigma) {
      out.sigma = add_scalar(scale(softplus_op(s_raw), static_cast<T>(1.0 - cfg_.sigma_min)),
                             static_cast<T>(cfg_.sigma_min));
    } else {
      out.sigma = add_scalar(softplus_op(s_raw), static_cast<T>(1e-6));
    }
  } else {
    out.logits = raw;
  }
  return out;
}

template <typename T>
PredictiveOutput<T> TnpModel<T>::forward(std::span<const TaskBatch<T>> episodes, bool training,
                                         RngStream* drop_rng) const {
  return forward_from_embeddings(embed_inputs(episodes), training, drop_rng);
}

template <typename T>
PredictiveOutput<T> TnpModel<T>::forward_from_embeddings(const TokenEmbeddings<T>& emb,
                                                         bool training,
                                                         RngStream* drop_rng) const {
  Tensor<T> qs = emb.qs;
  Tensor<T> ks = emb.ks;
  for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
    auto next = krblock_forward(b, qs, ks, emb.key_mask, emb.s_t, emb.s_c, training, drop_rng);
    qs = next.first;
    ks = next.second;
  }
  return apply_head(qs);
}

template <typename T>
PredictiveOutput<T> TnpModel<T>::forward_chunked(const TaskBatch<T>& episode,
                                                 int64_t chunk_size) const {
  if (chunk_size < 1) throw ConfigError("forward_chunked: chunk size must be >= 1");
  NoGradGuard ng;
  const int64_t n_t = episode.n_test();

  // Context stream through all blocks, computed once. The key stream never
  // depends on the query tokens.
  std::span<const TaskBatch<T>> span1(&episode, 1);
  TokenEmbeddings<T> emb = embed_inputs(span1);
  std::vector<Tensor<T>> ks_normed_per_block;
  {
    Tensor<T> ks = emb.ks;
    for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
      const auto& blk = blocks_[static_cast<size_t>(b)];
      const MhaContext<T> ctx = block_context(b);
      Tensor<T> ks1 = layer_norm(ks, blk.ln1_g, blk.ln1_s);
      ks_normed_per_block.push_back(ks1);
      Tensor<T> x2 = multi_head_attention(cfg_.variant, ks1, ks1, emb.key_mask, emb.s_c,
                                          emb.s_c, blk.mha, cfg_.heads, ctx);
      Tensor<T> x3 = add(ks, x2);
      Tensor<T> x4 = layer_norm(x3, blk.ln2_g, blk.ln2_s);
      Tensor<T> x5 =
          linear(gelu(linear(x4, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
      ks = add(x3, x5);
    }
  }

  PredictiveOutput<T> out;
  out.head = cfg_.head;
  const int64_t out_w = cfg_.head == HeadType::gaussian ? 1 : cfg_.n_classes;
  if (cfg_.head == HeadType::gaussian) {
    out.mu = Tensor<T>::zeros({1, n_t, 1});
    out.sigma = Tensor<T>::zeros({1, n_t, 1});
  } else {
    out.logits = Tensor<T>::zeros({1, n_t, cfg_.n_classes});
  }

  for (int64_t t0 = 0; t0 < n_t; t0 += chunk_size) {
    const int64_t nt = std::min(chunk_size, n_t - t0);
    TaskBatch<T> chunk = episode;
    chunk.s_t = Tensor<T>::zeros({nt, episode.s_t.size(-1)});
    chunk.f_t = Tensor<T>::zeros({nt, episode.f_t.size(-1)});
    const int64_t ds = episode.s_t.size(-1);
    std::memcpy(chunk.s_t.data(), episode.s_t.data() + t0 * ds,
                sizeof(T) * static_cast<size_t>(nt * ds));
    if (episode.latent_truth.defined()) chunk.latent_truth = Tensor<T>();

    std::span<const TaskBatch<T>> cspan(&chunk, 1);
    TokenEmbeddings<T> cemb = embed_inputs(cspan);
    Tensor<T> qs = cemb.qs;
    for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
      const auto& blk = blocks_[static_cast<size_t>(b)];
      const MhaContext<T> ctx = block_context(b);
      Tensor<T> x1 = layer_norm(qs, blk.ln1_g, blk.ln1_s);
      Tensor<T> x2 = multi_head_attention(cfg_.variant, x1, ks_normed_per_block[static_cast<size_t>(b)],
                                          emb.key_mask, cemb.s_t, emb.s_c, blk.mha,
                                          cfg_.heads, ctx);
      Tensor<T> x3 = add(qs, x2);
      Tensor<T> x4 = layer_norm(x3, blk.ln2_g, blk.ln2_s);
      Tensor<T> x5 =
          linear(gelu(linear(x4, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
      qs = add(x3, x5);
    }
    PredictiveOutput<T> chunk_out = apply_head(qs);
    if (cfg_.head == HeadType::gaussian) {
      std::memcpy(out.mu.data() + t0, chunk_out.mu.data(), sizeof(T) * static_cast<size_t>(nt));
      std::memcpy(out.sigma.data() + t0, chunk_out.sigma.data(),
                  sizeof(T) * static_cast<size_t>(nt));
    } else {
      std::memcpy(out.logits.data() + t0 * out_w, chunk_out.logits.data(),
                  sizeof(T) * static_cast<size_t>(nt * out_w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CNP baseline

template <typename T>
CnpBaseline<T>::CnpBaseline(ModelConfig cfg, int64_t hidden, uint64_t seed)
    : cfg_(std::move(cfg)), hidden_(hidden) {
  if (hidden_ < 1) throw ConfigError("cnp: hidden width must be positive");
  RngStream root(seed);
  RngStream re = root.split("enc");
  const int64_t df = cfg_.f_input_dims();
  const auto affine = [&](RngStream& r, int64_t in, int64_t out_w) {
    return std::pair<Tensor<T>, Tensor<T>>{
        Tensor<T>::randn({in, out_w}, r, static_cast<T>(1.0 / std::sqrt(static_cast<double>(in))),
                         true),
        Tensor<T>::zeros({out_w}, true)};
  };
  std::tie(enc_w1_, enc_b1_) = affine(re, cfg_.ds + df, hidden_);
  std::tie(enc_w2_, enc_b2_) = affine(re, hidden_, hidden_);
  RngStream rd = root.split("dec");
  std::tie(dec_w1_, dec_b1_) = affine(rd, hidden_ + cfg_.ds, hidden_);
  std::tie(dec_w2_, dec_b2_) = affine(rd, hidden_, hidden_);
  RngStream rh = root.split("head");
  const int64_t out_w = cfg_.head == HeadType::gaussian ? 2 : cfg_.n_classes;
  std::tie(head_w_, head_b_) = affine(rh, hidden_, out_w);
  params_.emplace("enc.w1", enc_w1_);
  params_.emplace("enc.b1", enc_b1_);
  params_.emplace("enc.w2", enc_w2_);
  params_.emplace("enc.b2", enc_b2_);
  params_.emplace("dec.w1", dec_w1_);
  params_.emplace("dec.b1", dec_b1_);
  params_.emplace("dec.w2", dec_w2_);
  params_.emplace("dec.b2", dec_b2_);
  params_.emplace("head.w", head_w_);
  params_.emplace("head.b", head_b_);
}

template <typename T>
int64_t CnpBaseline<T>::param_count() const {
  int64_t n = 0;
  for (const auto& [name, p] : params_) {
    (void)name;
    n += p.numel();
  }
  return n;
}

template <typename T>
void CnpBaseline<T>::zero_grads() {
  for (auto& [name, p] : params_) {
    (void)name;
    p.zero_grad();
  }
}

template <typename T>
PredictiveOutput<T> CnpBaseline<T>::forward(std::span<const TaskBatch<T>> episodes) const {
  if (episodes.empty()) throw DataError("cnp forward: empty batch");
  const int64_t bs = static_cast<int64_t>(episodes.size());
  const int64_t n_t = episodes[0].n_test();
  const int64_t ds = cfg_.ds;
  const int64_t df = cfg_.f_input_dims();
  const bool categorical = cfg_.head == HeadType::categorical;
  int64_t n_c_max = 1;
  for (const auto& ep : episodes) n_c_max = std::max(n_c_max, ep.n_context());

  Tensor<T> enc_in = Tensor<T>::zeros({bs, n_c_max, ds + df});
  Tensor<T> s_t = Tensor<T>::zeros({bs, n_t, ds});
  std::vector<uint8_t> mask(static_cast<size_t>(bs * n_c_max), 0);
  for (int64_t b = 0; b < bs; ++b) {
    const auto& ep = episodes[static_cast<size_t>(b)];
    for (int64_t i = 0; i < ep.n_context(); ++i) {
      for (int64_t c = 0; c < ds; ++c) {
        enc_in[(b * n_c_max + i) * (ds + df) + c] = ep.s_c[i * ds + c];
      }
      if (categorical) {
        const int64_t cls = static_cast<int64_t>(std::llround(static_cast<double>(ep.f_c[i])));
        enc_in[(b * n_c_max + i) * (ds + df) + ds + cls] = T(1);
      } else {
        enc_in[(b * n_c_max + i) * (ds + df) + ds] = ep.f_c[i];
      }
      mask[static_cast<size_t>(b * n_c_max + i)] =
          i < static_cast<int64_t>(ep.context_mask.size()) ? ep.context_mask[static_cast<size_t>(i)]
                                                           : 1;
    }
    for (int64_t i = 0; i < n_t; ++i) {
      for (int64_t c = 0; c < ds; ++c) s_t[(b * n_t + i) * ds + c] = ep.s_t[i * ds + c];
    }
  }

  Tensor<T> e = gelu(linear(enc_in, enc_w1_, enc_b1_));
  e = gelu(linear(e, enc_w2_, enc_b2_));
  Tensor<T> pooled = masked_mean_rows(e, mask);           // [bs, hidden]
  Tensor<T> pooled3 = reshape(pooled, {bs, 1, hidden_});  // broadcast over test points
  Tensor<T> rep = matmul(Tensor<T>::ones({bs, n_t, 1}), pooled3);
  Tensor<T> dec_in = concat_last<T>({rep, s_t});
  Tensor<T> h = gelu(linear(dec_in, dec_w1_, dec_b1_));
  h = gelu(linear(h, dec_w2_, dec_b2_));
  Tensor<T> raw = linear(h, head_w_, head_b_);

  PredictiveOutput<T> out;
  out.head = cfg_.head;
  if (cfg_.head == HeadType::gaussian) {
    out.mu = slice_last(raw, 0, 1);
    Tensor<T> s_raw = slice_last(raw, 1, 1);
    if (cfg_.bound_sigma) {
      out.sigma = add_scalar(scale(softplus_op(s_raw), static_cast<T>(1.0 - cfg_.sigma_min)),
                             static_cast<T>(cfg_.sigma_min));
    } else {
      out.sigma = add_scalar(softplus_op(s_raw), static_cast<T>(1e-6));
    }
  } else {
    out.logits = raw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'T', 'N', 'P', 'K', 'R', 'C', 'P', '1'};
constexpr uint32_t kCkptVersion = 1;

template <typename P>
void wr(std::ofstream& os, P v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(P));
}

template <typename P>
P rd(std::ifstream& is) {
  P v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(P));
  if (!is) throw DataError("checkpoint: truncated");
  return v;
}

void wr_string(std::ofstream& os, const std::string& s) {
  wr<uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string rd_string(std::ifstream& is) {
  const uint64_t n = rd<uint64_t>(is);
  if (n > (1ull << 30)) throw DataError("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw DataError("checkpoint: truncated string");
  return s;
}

template <typename T>
void wr_tensor(std::ofstream& os, const Tensor<T>& t) {
  wr<uint32_t>(os, static_cast<uint32_t>(t.dim()));
  for (int64_t i = 0; i < t.dim(); ++i) wr<uint64_t>(os, static_cast<uint64_t>(t.size(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(T) * static_cast<size_t>(t.numel())));
}

template <typename T>
Tensor<T> rd_tensor(std::ifstream& is) {
  const uint32_t nd = rd<uint32_t>(is);
  if (nd > 8) throw DataError("checkpoint: corrupt tensor rank");
  std::vector<int64_t> shape(nd);
  for (uint32_t i = 0; i < nd; ++i) shape[i] = static_cast<int64_t>(rd<uint64_t>(is));
  Tensor<T> t = Tensor<T>::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(T) * static_cast<size_t>(t.numel())));
  if (!is) throw DataError("checkpoint: truncated tensor");
  return t;
}

template <typename T>
void wr_tensor_map(std::ofstream& os, const std::map<std::string, Tensor<T>>& m) {
  wr<uint64_t>(os, m.size());
  for (const auto& [name, t] : m) {
    wr_string(os, name);
    wr_tensor(os, t);
  }
}

template <typename T>
std::map<std::string, Tensor<T>> rd_tensor_map(std::ifstream& is) {
  const uint64_t n = rd<uint64_t>(is);
  std::map<std::string, Tensor<T>> m;
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = rd_string(is);
    m.emplace(std::move(name), rd_tensor<T>(is));
  }
  return m;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open '" + path + "'");
  os.write(kCkptMagic, sizeof(kCkptMagic));
  wr<uint32_t>(os, kCkptVersion);
  wr<uint8_t>(os, sizeof(T) == 4 ? 0 : 1);
  wr_string(os, ckpt.config_json);
  wr<int64_t>(os, ckpt.step);
  wr<uint64_t>(os, ckpt.rng_key);
  wr<uint64_t>(os, ckpt.rng_counter);
  wr<int64_t>(os, ckpt.opt_step);
  wr_tensor_map(os, ckpt.params);
  wr_tensor_map(os, ckpt.opt_m);
  wr_tensor_map(os, ckpt.opt_v);
  wr_tensor_map(os, ckpt.buffers);
  if (!os) throw IoError("save_checkpoint: write failed");
}

uint8_t peek_checkpoint_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const uint32_t version = rd<uint32_t>(is);
  if (version != kCkptVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  return rd<uint8_t>(is);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const uint32_t version = rd<uint32_t>(is);
  if (version != kCkptVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint8_t dtype = rd<uint8_t>(is);
  if ((sizeof(T) == 4 && dtype != 0) || (sizeof(T) == 8 && dtype != 1)) {
    throw ConfigError("checkpoint: dtype mismatch, stored " +
                      std::string(dtype == 0 ? "float32" : "float64"));
  }
  Checkpoint<T> c;
  c.config_json = rd_string(is);
  c.step = rd<int64_t>(is);
  c.rng_key = rd<uint64_t>(is);
  c.rng_counter = rd<uint64_t>(is);
  c.opt_step = rd<int64_t>(is);
  c.params = rd_tensor_map<T>(is);
  c.opt_m = rd_tensor_map<T>(is);
  c.opt_v = rd_tensor_map<T>(is);
  c.buffers = rd_tensor_map<T>(is);
  return c;
}

// ---------------------------------------------------------------------------

#define TNPKR_INSTANTIATE_MODEL(T)                                                  \
  template Tensor<T> nll_loss(const PredictiveOutput<T>&, const Tensor<T>&);        \
  template class TnpModel<T>;                                                       \
  template class CnpBaseline<T>;                                                    \
  template void save_checkpoint(const std::string&, const Checkpoint<T>&);          \
  template Checkpoint<T> load_checkpoint(const std::string&);

TNPKR_INSTANTIATE_MODEL(float)
TNPKR_INSTANTIATE_MODEL(double)

#undef TNPKR_INSTANTIATE_MODEL

}  // namespace tnpkr
