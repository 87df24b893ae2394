#include "tnpkr/harness.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tnpkr/attention.hpp"
#include "tnpkr/memtrack.hpp"
#include "tnpkr/optim.hpp"

namespace tnpkr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError(std::string("config: unknown key '") + it.key() + "' in " + where);
    }
  }
}

template <typename V>
void maybe(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

json model_to_json(const ModelConfig& m) {
  json bias = json::array();
  for (const auto& t : m.bias_terms) {
    bias.push_back({{"kernel", t.kernel}, {"components", t.components}, {"n_basis", t.n_basis}});
  }
  return json{{"variant", attention_variant_to_string(m.variant)},
              {"n_blocks", m.n_blocks},
              {"d_model", m.d_model},
              {"heads", m.heads},
              {"ffn_width", m.ffn_width},
              {"dropout", m.dropout},
              {"embed_locations", m.embed_locations},
              {"bias", bias},
              {"share_bias_across_blocks", m.share_bias_across_blocks},
              {"head", head_type_to_string(m.head)},
              {"n_classes", m.n_classes},
              {"sigma_min", m.sigma_min},
              {"bound_sigma", m.bound_sigma},
              {"scan_block", m.scan_block},
              {"scan_query_tile", m.scan_query_tile},
              {"performer_features", m.performer_features},
              {"embed_width", m.embed_width}};
}

ModelConfig model_from_json(const json& j) {
  expect_keys(j,
              {"variant", "n_blocks", "d_model", "heads", "ffn_width", "dropout",
               "embed_locations", "bias", "share_bias_across_blocks", "head", "n_classes",
               "sigma_min", "bound_sigma", "scan_block", "scan_query_tile",
               "performer_features", "embed_width"},
              "model");
  ModelConfig m;
  if (j.contains("variant")) m.variant = attention_variant_from_string(j.at("variant"));
  maybe(j, "n_blocks", m.n_blocks);
  maybe(j, "d_model", m.d_model);
  maybe(j, "heads", m.heads);
  maybe(j, "ffn_width", m.ffn_width);
  maybe(j, "dropout", m.dropout);
  maybe(j, "embed_locations", m.embed_locations);
  if (j.contains("bias")) {
    m.bias_terms.clear();
    for (const auto& bt : j.at("bias")) {
      expect_keys(bt, {"kernel", "components", "n_basis"}, "model.bias[]");
      BiasTermConfig t;
      maybe(bt, "kernel", t.kernel);
      maybe(bt, "components", t.components);
      maybe(bt, "n_basis", t.n_basis);
      m.bias_terms.push_back(std::move(t));
    }
  }
  maybe(j, "share_bias_across_blocks", m.share_bias_across_blocks);
  if (j.contains("head")) m.head = head_type_from_string(j.at("head"));
  maybe(j, "n_classes", m.n_classes);
  maybe(j, "sigma_min", m.sigma_min);
  maybe(j, "bound_sigma", m.bound_sigma);
  maybe(j, "scan_block", m.scan_block);
  maybe(j, "scan_query_tile", m.scan_query_tile);
  maybe(j, "performer_features", m.performer_features);
  maybe(j, "embed_width", m.embed_width);
  return m;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
  json j{{"arch", cfg.arch},
         {"model", model_to_json(cfg.model)},
         {"task",
          {{"kind", task_kind_to_string(cfg.task.kind)},
           {"sigma_n", cfg.task.sigma_n},
           {"sir_side", cfg.task.sir_side}}},
         {"optimizer",
          {{"lr_max", cfg.optim.lr_max},
           {"lr_min", cfg.optim.lr_min},
           {"beta1", cfg.optim.beta1},
           {"beta2", cfg.optim.beta2},
           {"eps", cfg.optim.eps},
           {"clip_norm", cfg.optim.clip_norm}}},
         {"total_steps", cfg.total_steps},
         {"batch_size", cfg.batch_size},
         {"seed", cfg.seed},
         {"eval_every", cfg.eval_every},
         {"eval_episodes", cfg.eval_episodes},
         {"cnp_hidden", cfg.cnp_hidden},
         {"precision", cfg.precision},
         {"out_dir", cfg.out_dir}};
  return j.dump(2);
}

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: parse failure: ") + e.what());
  }
  expect_keys(j,
              {"arch", "model", "task", "optimizer", "total_steps", "batch_size", "seed",
               "eval_every", "eval_episodes", "cnp_hidden", "precision", "out_dir"},
              "top level");
  RunConfig cfg;
  maybe(j, "arch", cfg.arch);
  if (cfg.arch != "tnpkr" && cfg.arch != "cnp") {
    throw ConfigError("config: arch must be 'tnpkr' or 'cnp'");
  }
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
  if (j.contains("task")) {
    const json& t = j.at("task");
    expect_keys(t, {"kind", "sigma_n", "sir_side"}, "task");
    if (t.contains("kind")) cfg.task.kind = task_kind_from_string(t.at("kind"));
    maybe(t, "sigma_n", cfg.task.sigma_n);
    maybe(t, "sir_side", cfg.task.sir_side);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    expect_keys(o, {"lr_max", "lr_min", "beta1", "beta2", "eps", "clip_norm"}, "optimizer");
    maybe(o, "lr_max", cfg.optim.lr_max);
    maybe(o, "lr_min", cfg.optim.lr_min);
    maybe(o, "beta1", cfg.optim.beta1);
    maybe(o, "beta2", cfg.optim.beta2);
    maybe(o, "eps", cfg.optim.eps);
    maybe(o, "clip_norm", cfg.optim.clip_norm);
  }
  maybe(j, "total_steps", cfg.total_steps);
  maybe(j, "batch_size", cfg.batch_size);
  maybe(j, "seed", cfg.seed);
  maybe(j, "eval_every", cfg.eval_every);
  maybe(j, "eval_episodes", cfg.eval_episodes);
  maybe(j, "cnp_hidden", cfg.cnp_hidden);
  maybe(j, "precision", cfg.precision);
  if (cfg.precision != "f32" && cfg.precision != "f64") {
    throw ConfigError("config: precision must be 'f32' or 'f64'");
  }
  maybe(j, "out_dir", cfg.out_dir);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return run_config_from_json_text(text);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  write_text_file(path, run_config_to_json(cfg) + "\n");
}

ModelConfig resolve_model_config(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  m.ds = task_index_dims(cfg.task.kind);
  if (task_is_categorical(cfg.task.kind)) {
    m.head = HeadType::categorical;
    m.n_classes = 3;
  } else {
    m.head = HeadType::gaussian;
  }
  m.validate();
  return m;
}

void write_text_file(const std::string& path, const std::string& content) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

std::string metrics_csv_header() { return "step,nll,rmse,mae,coverage"; }

namespace {
std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}
}  // namespace

std::string metrics_csv_line(const MetricsRow& row) {
  return std::to_string(row.step) + "," + fmt_g(row.nll) + "," + fmt_g(row.rmse) + "," +
         fmt_g(row.mae) + "," + fmt_g(row.coverage);
}

// ---------------------------------------------------------------------------
// Episode sampling

namespace {

TaskBatch<double> sample_episode(const TaskCfg& task, RngStream& rng) {
  switch (task.kind) {
    case TaskKind::gp1d_rbf: {
      Gp1dOptions opt;
      opt.sigma_n = task.sigma_n;
      return sample_gp_1d(GpKernelKind::rbf, rng, opt);
    }
    case TaskKind::gp1d_periodic: {
      Gp1dOptions opt;
      opt.sigma_n = task.sigma_n;
      return sample_gp_1d(GpKernelKind::periodic, rng, opt);
    }
    case TaskKind::gp1d_matern32: {
      Gp1dOptions opt;
      opt.sigma_n = task.sigma_n;
      return sample_gp_1d(GpKernelKind::matern32, rng, opt);
    }
    case TaskKind::gp2d_rbf: {
      Gp2dOptions opt;
      opt.sigma_n = task.sigma_n;
      return sample_gp_2d(rng, opt);
    }
    case TaskKind::sir: {
      SirOptions opt;
      opt.side = task.sir_side;
      return sample_sir(rng, opt);
    }
  }
  throw ConfigError("sample_episode: unhandled task");
}

template <typename T>
Tensor<T> batch_targets(std::span<const TaskBatch<T>> eps) {
  const int64_t bs = static_cast<int64_t>(eps.size());
  const int64_t n_t = eps[0].n_test();
  Tensor<T> y = Tensor<T>::zeros({bs, n_t, 1});
  for (int64_t b = 0; b < bs; ++b) {
    for (int64_t i = 0; i < n_t; ++i) y[b * n_t + i] = eps[static_cast<size_t>(b)].f_t[i];
  }
  return y;
}

// Pointwise metric accumulation shared by the model, oracle, and prior paths.
struct MetricAccum {
  double nll = 0, se = 0, ae = 0;
  int64_t n = 0, covered = 0;

  void add_gaussian(double mu, double sd, double y, double truth) {
    constexpr double kHalfLog2Pi = 0.91893853320467274178;
    nll += kHalfLog2Pi + std::log(sd) + (y - mu) * (y - mu) / (2 * sd * sd);
    se += (mu - truth) * (mu - truth);
    ae += std::abs(mu - truth);
    covered += std::abs(y - mu) <= 1.96 * sd ? 1 : 0;
    ++n;
  }

  void add_categorical(std::span<const double> probs, int64_t label) {
    const double p = std::max(probs[static_cast<size_t>(label)], 1e-300);
    nll += -std::log(p);
    // Brier-style residuals against the one-hot target.
    double sq = 0, a = 0;
    for (size_t k = 0; k < probs.size(); ++k) {
      const double r = probs[k] - (static_cast<int64_t>(k) == label ? 1.0 : 0.0);
      sq += r * r;
      a += std::abs(r);
    }
    se += sq / static_cast<double>(probs.size());
    ae += a / static_cast<double>(probs.size());
    // Smallest probability set reaching 95% that contains the true class.
    std::vector<size_t> idx(probs.size());
    for (size_t k = 0; k < probs.size(); ++k) idx[k] = k;
    std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y2) { return probs[x] > probs[y2]; });
    double cum = 0;
    bool in = false;
    for (size_t k : idx) {
      cum += probs[k];
      if (static_cast<int64_t>(k) == label) in = true;
      if (cum >= 0.95) break;
    }
    covered += in ? 1 : 0;
    ++n;
  }

  MetricsRow finish() const {
    MetricsRow row;
    row.nll = nll / static_cast<double>(n);
    row.rmse = std::sqrt(se / static_cast<double>(n));
    row.mae = ae / static_cast<double>(n);
    row.coverage = static_cast<double>(covered) / static_cast<double>(n);
    return row;
  }
};

template <typename T>
void accumulate_output(MetricAccum& acc, const PredictiveOutput<T>& out,
                       const TaskBatch<double>& ep, int64_t batch_index) {
  const int64_t n_t = ep.n_test();
  if (out.head == HeadType::gaussian) {
    for (int64_t i = 0; i < n_t; ++i) {
      const double y = ep.f_t[i];
      const double truth = ep.latent_truth.defined() ? ep.latent_truth[i] : y;
      acc.add_gaussian(static_cast<double>(out.mu[batch_index * n_t + i]),
                       static_cast<double>(out.sigma[batch_index * n_t + i]), y, truth);
    }
  } else {
    const int64_t k = out.logits.size(-1);
    std::vector<double> probs(static_cast<size_t>(k));
    for (int64_t i = 0; i < n_t; ++i) {
      double m = -1e300;
      for (int64_t c = 0; c < k; ++c) {
        m = std::max(m, static_cast<double>(out.logits[(batch_index * n_t + i) * k + c]));
      }
      double denom = 0;
      for (int64_t c = 0; c < k; ++c) {
        probs[static_cast<size_t>(c)] =
            std::exp(static_cast<double>(out.logits[(batch_index * n_t + i) * k + c]) - m);
        denom += probs[static_cast<size_t>(c)];
      }
      for (auto& p : probs) p /= denom;
      acc.add_categorical(probs, static_cast<int64_t>(std::llround(ep.f_t[i])));
    }
  }
}

}  // namespace

std::vector<TaskBatch<double>> make_eval_episodes(const TaskCfg& task, int64_t n,
                                                  uint64_t seed) {
  RngStream root(seed);
  RngStream eval = root.split("eval");
  std::vector<TaskBatch<double>> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    RngStream e = eval.split(static_cast<uint64_t>(i));
    out.push_back(sample_episode(task, e));
  }
  return out;
}

template <typename T>
MetricsRow evaluate_model(const TnpModel<T>& model, std::vector<TaskBatch<double>> episodes,
                          int64_t chunk_test_points) {
  NoGradGuard ng;
  const auto t0 = std::chrono::steady_clock::now();
  memtrack::Scope scope;
  MetricAccum acc;
  if (chunk_test_points > 0) {
    for (const auto& ep : episodes) {
      TaskBatch<T> cast = ep.cast<T>();
      auto out = model.forward_chunked(cast, chunk_test_points);
      accumulate_output(acc, out, ep, 0);
    }
  } else {
    const int64_t bs = 16;
    for (size_t start = 0; start < episodes.size(); start += bs) {
      const size_t end = std::min(episodes.size(), start + bs);
      std::vector<TaskBatch<T>> batch;
      for (size_t i = start; i < end; ++i) batch.push_back(episodes[i].cast<T>());
      auto out = model.forward(std::span<const TaskBatch<T>>(batch.data(), batch.size()));
      for (size_t i = start; i < end; ++i) {
        accumulate_output(acc, out, episodes[i], static_cast<int64_t>(i - start));
      }
    }
  }
  MetricsRow row = acc.finish();
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  row.peak_bytes = scope.peak_over_entry();
  return row;
}

template <typename T>
MetricsRow evaluate_cnp(const CnpBaseline<T>& model, std::vector<TaskBatch<double>> episodes) {
  NoGradGuard ng;
  const auto t0 = std::chrono::steady_clock::now();
  memtrack::Scope scope;
  MetricAccum acc;
  const int64_t bs = 16;
  for (size_t start = 0; start < episodes.size(); start += bs) {
    const size_t end = std::min(episodes.size(), start + bs);
    std::vector<TaskBatch<T>> batch;
    for (size_t i = start; i < end; ++i) batch.push_back(episodes[i].cast<T>());
    auto out = model.forward(std::span<const TaskBatch<T>>(batch.data(), batch.size()));
    for (size_t i = start; i < end; ++i) {
      accumulate_output(acc, out, episodes[i], static_cast<int64_t>(i - start));
    }
  }
  MetricsRow row = acc.finish();
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  row.peak_bytes = scope.peak_over_entry();
  return row;
}

MetricsRow evaluate_oracle(const TaskCfg& task, int64_t n_episodes, uint64_t seed) {
  if (task_is_categorical(task.kind)) {
    throw ConfigError("evaluate_oracle: exact GP oracle applies to GP tasks only");
  }
  auto episodes = make_eval_episodes(task, n_episodes, seed);
  MetricAccum acc;
  for (const auto& ep : episodes) {
    Tensor<double> mu, sigma;
    exact_gp_posterior(ep.s_c, ep.f_c, ep.s_t, ep.gp_kernel, ep.gp_ell, ep.gp_period,
                       ep.gp_sigma_n, mu, sigma);
    for (int64_t i = 0; i < ep.n_test(); ++i) {
      const double truth = ep.latent_truth.defined() ? ep.latent_truth[i] : ep.f_t[i];
      acc.add_gaussian(mu[i], sigma[i], ep.f_t[i], truth);
    }
  }
  return acc.finish();
}

MetricsRow evaluate_prior(const TaskCfg& task, int64_t n_episodes, uint64_t seed) {
  if (task_is_categorical(task.kind)) {
    throw ConfigError("evaluate_prior: defined for GP tasks");
  }
  auto episodes = make_eval_episodes(task, n_episodes, seed);
  MetricAccum acc;
  const double sd = std::sqrt(1.0 + task.sigma_n * task.sigma_n);
  for (const auto& ep : episodes) {
    for (int64_t i = 0; i < ep.n_test(); ++i) {
      const double truth = ep.latent_truth.defined() ? ep.latent_truth[i] : ep.f_t[i];
      acc.add_gaussian(0.0, sd, ep.f_t[i], truth);
    }
  }
  return acc.finish();
}

// ---------------------------------------------------------------------------
// Training

namespace {

template <typename T, typename FwdFn, typename EvalFn>
TrainResult train_core(const RunConfig& cfg, ParamMap<T>& params,
                       const std::map<std::string, Tensor<T>>* model_buffers, FwdFn&& fwd,
                       EvalFn&& eval_fn) {
  fs::create_directories(cfg.out_dir);
  const std::string ckpt_path = cfg.out_dir + "/checkpoint.bin";
  const std::string cfg_echo = run_config_to_json(cfg);
  save_run_config(cfg.out_dir + "/config.json", cfg);

  Yogi<T> opt(YogiConfig<T>{static_cast<T>(cfg.optim.beta1), static_cast<T>(cfg.optim.beta2),
                            static_cast<T>(cfg.optim.eps)});
  int64_t start_step = 0;
  if (fs::exists(ckpt_path)) {
    auto ck = load_checkpoint<T>(ckpt_path);
    if (ck.config_json != cfg_echo) {
      throw ConfigError("train: existing checkpoint in '" + cfg.out_dir +
                        "' was produced by a different config");
    }
    for (auto& [name, p] : params) {
      auto it = ck.params.find(name);
      if (it == ck.params.end() || it->second.shape() != p.shape()) {
        throw ConfigError("train: checkpoint missing parameter '" + name + "'");
      }
      std::copy(it->second.data(), it->second.data() + p.numel(), p.data());
    }
    for (auto& [name, slot_m] : ck.opt_m) {
      typename Yogi<T>::Slot slot{slot_m, ck.opt_v.at(name)};
      opt.slots()[name] = std::move(slot);
    }
    opt.set_step_count(ck.opt_step);
    start_step = ck.step;
  }

  const auto save_ckpt = [&](int64_t step) {
    Checkpoint<T> ck;
    ck.config_json = cfg_echo;
    ck.step = step;
    ck.rng_key = cfg.seed;
    ck.rng_counter = static_cast<uint64_t>(step);
    ck.opt_step = opt.step_count();
    for (auto& [name, p] : params) ck.params.emplace(name, p.detach());
    for (auto& [name, slot] : opt.slots()) {
      ck.opt_m.emplace(name, slot.m.detach());
      ck.opt_v.emplace(name, slot.v.detach());
    }
    if (model_buffers) {
      for (auto& [name, b] : *model_buffers) ck.buffers.emplace(name, b.detach());
    }
    const std::string tmp = ckpt_path + ".tmp";
    save_checkpoint(tmp, ck);
    fs::rename(tmp, ckpt_path);
  };

  auto eval_set = make_eval_episodes(cfg.task, cfg.eval_episodes, cfg.seed + 777);

  RngStream root(cfg.seed);
  RngStream data = root.split("data");
  RngStream drop = root.split("dropout");

  TrainResult result;
  result.checkpoint_path = ckpt_path;
  std::string metrics_csv = metrics_csv_header() + "\n";
  std::string timing_csv = "step,wall_seconds,peak_bytes\n";

  const auto record_eval = [&](int64_t step) {
    MetricsRow row = eval_fn(eval_set);
    row.step = step;
    result.history.push_back(row);
    metrics_csv += metrics_csv_line(row) + "\n";
    timing_csv += std::to_string(step) + "," + fmt_g(row.wall_seconds) + "," +
                  std::to_string(row.peak_bytes) + "\n";
  };

  if (cfg.total_steps == 0) {
    save_ckpt(0);
    record_eval(0);
    write_text_file(cfg.out_dir + "/metrics.csv", metrics_csv);
    write_text_file(cfg.out_dir + "/timing.csv", timing_csv);
    return result;
  }

  for (int64_t step = start_step; step < cfg.total_steps; ++step) {
    std::vector<TaskBatch<T>> episodes;
    episodes.reserve(static_cast<size_t>(cfg.batch_size));
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      RngStream es = data.split(static_cast<uint64_t>(step) * static_cast<uint64_t>(cfg.batch_size) +
                                static_cast<uint64_t>(b));
      episodes.push_back(sample_episode(cfg.task, es).cast<T>());
    }
    std::span<const TaskBatch<T>> span(episodes.data(), episodes.size());
    Tensor<T> targets = batch_targets(span);

    RngStream dstream = drop.split(static_cast<uint64_t>(step));
    for (auto& [name, p] : params) {
      (void)name;
      p.zero_grad();
    }
    Tensor<T> loss = nll_loss(fwd(span, true, &dstream), targets);
    const double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (seed " +
                         std::to_string(cfg.seed) + ")");
    }
    if (step == 0) result.first_train_nll = loss_v;
    result.final_train_nll = loss_v;
    loss.backward();
    clip_grad_norm(params, static_cast<T>(cfg.optim.clip_norm));
    const T lr = cosine_lr<T>(step, cfg.total_steps, static_cast<T>(cfg.optim.lr_max),
                              static_cast<T>(cfg.optim.lr_min));
    opt.step(params, lr);

    const int64_t done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.total_steps) {
      save_ckpt(done);
      record_eval(done);
    }
  }

  write_text_file(cfg.out_dir + "/metrics.csv", metrics_csv);
  write_text_file(cfg.out_dir + "/timing.csv", timing_csv);
  return result;
}

template <typename T>
TrainResult train_typed(const RunConfig& cfg) {
  const ModelConfig mc = resolve_model_config(cfg);
  if (cfg.arch == "tnpkr") {
    TnpModel<T> model(mc, cfg.seed);
    auto fwd = [&](std::span<const TaskBatch<T>> span, bool training, RngStream* rng) {
      return model.forward(span, training, rng);
    };
    auto eval_fn = [&](const std::vector<TaskBatch<double>>& eps) {
      return evaluate_model(model, eps);
    };
    return train_core<T>(cfg, model.params(), &model.buffers(), fwd, eval_fn);
  }
  CnpBaseline<T> model(mc, cfg.cnp_hidden, cfg.seed);
  auto fwd = [&](std::span<const TaskBatch<T>> span, bool, RngStream*) {
    return model.forward(span);
  };
  auto eval_fn = [&](const std::vector<TaskBatch<double>>& eps) {
    return evaluate_cnp(model, eps);
  };
  return train_core<T>(cfg, model.params(), nullptr, fwd, eval_fn);
}

}  // namespace

TrainResult train(const RunConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
  if (cfg.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  return cfg.precision == "f64" ? train_typed<double>(cfg) : train_typed<float>(cfg);
}

MetricsRow evaluate_checkpoint(const std::string& checkpoint_path, const TaskCfg& task,
                               int64_t n_episodes, uint64_t seed) {
  const uint8_t dtype = peek_checkpoint_dtype(checkpoint_path);
  auto episodes = make_eval_episodes(task, n_episodes, seed);
  const auto run = [&](auto tag) {
    using T = decltype(tag);
    auto ck = load_checkpoint<T>(checkpoint_path);
    RunConfig rc = run_config_from_json_text(ck.config_json);
    const ModelConfig mc = resolve_model_config(rc);
    if (task_is_categorical(task.kind) != (mc.head == HeadType::categorical)) {
      throw ConfigError("evaluate: checkpoint head does not match the requested task");
    }
    if (rc.arch == "tnpkr") {
      TnpModel<T> model(mc, rc.seed);
      for (auto& [name, p] : model.params()) {
        auto it = ck.params.find(name);
        if (it == ck.params.end()) throw ConfigError("evaluate: checkpoint missing '" + name + "'");
        std::copy(it->second.data(), it->second.data() + p.numel(), p.data());
      }
      return evaluate_model(model, std::move(episodes));
    }
    CnpBaseline<T> model(mc, rc.cnp_hidden, rc.seed);
    for (auto& [name, p] : model.params()) {
      auto it = ck.params.find(name);
      if (it == ck.params.end()) throw ConfigError("evaluate: checkpoint missing '" + name + "'");
      std::copy(it->second.data(), it->second.data() + p.numel(), p.data());
    }
    return evaluate_cnp(model, std::move(episodes));
  };
  return dtype == 0 ? run(float{}) : run(double{});
}

// ---------------------------------------------------------------------------
// Scaling bench

BenchReport bench_attention(AttentionVariant variant, const std::vector<int64_t>& sizes,
                            int64_t d_k, int64_t reps, std::size_t mem_budget_bytes,
                            bool with_backward) {
  for (size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) throw ConfigError("bench: sizes must be ascending");
  }
  BenchReport report;
  report.variant = variant;

  RngStream setup(1234);
  BiasSpec<float> spec = default_tisa_spec<float>(setup);
  spec.alpha[0] = 0.5f;
  FeatureMap<float> fm = make_feature_map<float>(d_k, 64, 99);
  DkaParams<float> dka;
  {
    RngStream rphi = setup.split("phi");
    RngStream rpsi = setup.split("psi");
    dka.phi = Mlp<float>::make(d_k + 1, 64, d_k, rphi);
    dka.psi = Mlp<float>::make(d_k, 64, d_k, rpsi);
    dka.ln_gain = Tensor<float>::ones({d_k}, true);
    dka.ln_shift = Tensor<float>::zeros({d_k}, true);
  }

  for (int64_t n : sizes) {
    BenchRow row;
    row.n = n;
    row.with_backward = with_backward;
    try {
      RngStream r(5000 + static_cast<uint64_t>(n));
      AttentionInputs<float> in;
      in.q = Tensor<float>::randn({n, d_k}, r, 1.0f, with_backward);
      in.k = Tensor<float>::randn({n, d_k}, r, 1.0f, with_backward);
      in.v = Tensor<float>::randn({n, d_k}, r, 1.0f, with_backward);
      in.s_q = Tensor<float>::uniform({n, 1}, r, -2.0f, 2.0f);
      in.s_k = in.s_q;

      const auto run_once = [&] {
        Tensor<float> out;
        switch (variant) {
          case AttentionVariant::full:
            out = full_biased_attention(in, &spec);
            break;
          case AttentionVariant::scan:
            out = scan_attention(in, &spec);
            break;
          case AttentionVariant::performer:
            out = performer_attention(in, fm);
            break;
          case AttentionVariant::dka:
            out = dka_attention(in, dka);
            break;
        }
        if (with_backward) {
          sum(out).backward();
          Tensor<float> q = in.q;
          q.zero_grad();
          Tensor<float> k = in.k;
          k.zero_grad();
          Tensor<float> v = in.v;
          v.zero_grad();
        }
      };

      memtrack::set_budget(mem_budget_bytes);
      if (!with_backward) {
        NoGradGuard ng;
        run_once();  // warmup
        std::vector<double> times;
        for (int64_t rep = 0; rep < reps; ++rep) {
          memtrack::Scope scope;
          const auto t0 = std::chrono::steady_clock::now();
          run_once();
          times.push_back(
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
          row.score_peak_bytes = std::max(row.score_peak_bytes, scope.score_peak_over_entry());
          row.peak_bytes = std::max(row.peak_bytes, scope.peak_over_entry());
        }
        std::sort(times.begin(), times.end());
        row.seconds = times[times.size() / 2];
      } else {
        run_once();
        std::vector<double> times;
        for (int64_t rep = 0; rep < reps; ++rep) {
          memtrack::Scope scope;
          const auto t0 = std::chrono::steady_clock::now();
          run_once();
          times.push_back(
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
          row.score_peak_bytes = std::max(row.score_peak_bytes, scope.score_peak_over_entry());
          row.peak_bytes = std::max(row.peak_bytes, scope.peak_over_entry());
        }
        std::sort(times.begin(), times.end());
        row.seconds = times[times.size() / 2];
      }
      memtrack::set_budget(0);
    } catch (const OomError&) {
      memtrack::set_budget(0);
      row.oom = true;
    }
    report.rows.push_back(row);
  }

  std::vector<double> ns, ts;
  for (const auto& row : report.rows) {
    if (row.oom) continue;
    ns.push_back(static_cast<double>(row.n));
    ts.push_back(row.seconds);
  }
  if (ns.size() >= 2) report.time_fit = fit_loglog(ns, ts);
  return report;
}

std::string bench_csv_header() {
  return "variant,n,seconds,score_peak_bytes,peak_bytes,status";
}

std::string bench_csv_line(AttentionVariant v, const BenchRow& row) {
  if (row.oom) {
    return attention_variant_to_string(v) + "," + std::to_string(row.n) + ",,,,OOM";
  }
  return attention_variant_to_string(v) + "," + std::to_string(row.n) + "," +
         fmt_g(row.seconds) + "," + std::to_string(row.score_peak_bytes) + "," +
         std::to_string(row.peak_bytes) + ",ok";
}

std::string bo_csv_header() { return "predictor,kernel,acquisition,seed,episode,regret"; }

std::string bo_csv_line(const BoRunRow& row) {
  return row.predictor + "," + row.kernel + "," + row.acquisition + "," +
         std::to_string(row.seed) + "," + std::to_string(row.episode) + "," + fmt_g(row.regret);
}

template MetricsRow evaluate_model(const TnpModel<float>&, std::vector<TaskBatch<double>>,
                                   int64_t);
template MetricsRow evaluate_model(const TnpModel<double>&, std::vector<TaskBatch<double>>,
                                   int64_t);
template MetricsRow evaluate_cnp(const CnpBaseline<float>&, std::vector<TaskBatch<double>>);
template MetricsRow evaluate_cnp(const CnpBaseline<double>&, std::vector<TaskBatch<double>>);

}  // namespace tnpkr
