#include "worldlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace worldlm {

namespace {

constexpr std::size_t kEmbed = 0;
constexpr std::size_t kProjW = 1;
constexpr std::size_t kProjB = 2;
constexpr std::size_t kFirstBlock = 3;

std::size_t fc1_w(std::size_t b) { return kFirstBlock + 4 * b; }
std::size_t fc1_b(std::size_t b) { return kFirstBlock + 4 * b + 1; }
std::size_t fc2_w(std::size_t b) { return kFirstBlock + 4 * b + 2; }
std::size_t fc2_b(std::size_t b) { return kFirstBlock + 4 * b + 3; }
std::size_t head_w(const ModelConfig& c) { return kFirstBlock + 4 * c.num_blocks; }
std::size_t head_b(const ModelConfig& c) { return kFirstBlock + 4 * c.num_blocks + 1; }

template <typename R>
struct Activations {
  std::vector<R> gathered;
  std::vector<std::vector<R>> hidden;
  std::vector<std::vector<R>> act;
  std::vector<double> probs;
};

// y[r, o] = b[o] + sum_i W[o, i] x[r, i]
template <typename Rin, typename Rw, typename Rout>
void linear(const Rin* x, std::size_t rows, std::size_t in, const Rw* w, const Rw* b,
            std::size_t out, Rout* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Rin* xr = x + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const Rw* wo = w + o * in;
      double acc = static_cast<double>(b[o]);
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(wo[i]) * static_cast<double>(xr[i]);
      y[r * out + o] = static_cast<Rout>(acc);
    }
  }
}

// Accumulates dW, db and writes dx for y = W x + b. dy is [rows x out].
template <typename Rin, typename Rw>
void linear_backward(const double* dy, const Rin* x, std::size_t rows, std::size_t in, const Rw* w,
                     std::size_t out, double* dw, double* db, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dyr = dy + r * out;
    const Rin* xr = x + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      db[o] += g;
      double* dwo = dw + o * in;
      for (std::size_t i = 0; i < in; ++i) dwo[i] += g * static_cast<double>(xr[i]);
    }
    if (dx != nullptr) {
      double* dxr = dx + r * in;
      std::fill(dxr, dxr + in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double g = dyr[o];
        const Rw* wo = w + o * in;
        for (std::size_t i = 0; i < in; ++i) dxr[i] += g * static_cast<double>(wo[i]);
      }
    }
  }
}

void check_tokens(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.width != cfg.context_len + 1) {
    throw InputError("batch width " + std::to_string(batch.width) + " != context_len + 1 = " +
                     std::to_string(cfg.context_len + 1));
  }
  if (batch.tokens.size() != batch.rows * batch.width) throw InputError("batch token count mismatch");
  if (batch.rows == 0) throw InputError("empty batch");
  for (Token t : batch.tokens) {
    if (t >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " out of range for vocab " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

template <typename R>
double run_forward(const ModelConfig& cfg, const std::vector<const R*>& w, const TokenBatch& batch,
                   Activations<R>& acts) {
  check_tokens(cfg, batch);
  const std::size_t rows = batch.rows, n = cfg.context_len, d = cfg.embed_dim;
  const std::size_t e = cfg.hidden_dim(), V = cfg.vocab_size, H = cfg.num_blocks;

  acts.gathered.assign(rows * n * d, R{});
  for (std::size_t r = 0; r < rows; ++r) {
    const Token* tok = batch.row(r);
    for (std::size_t p = 0; p < n; ++p) {
      std::copy_n(w[kEmbed] + tok[p] * d, d, acts.gathered.begin() + static_cast<std::ptrdiff_t>((r * n + p) * d));
    }
  }
  acts.hidden.assign(H + 1, std::vector<R>(rows * d));
  acts.act.assign(H, std::vector<R>(rows * e));
  linear(acts.gathered.data(), rows, n * d, w[kProjW], w[kProjB], d, acts.hidden[0].data());

  std::vector<R> branch(rows * d);
  for (std::size_t b = 0; b < H; ++b) {
    auto& a = acts.act[b];
    linear(acts.hidden[b].data(), rows, d, w[fc1_w(b)], w[fc1_b(b)], e, a.data());
    for (auto& v : a) v = static_cast<R>(std::tanh(static_cast<double>(v)));
    linear(a.data(), rows, e, w[fc2_w(b)], w[fc2_b(b)], d, branch.data());
    for (std::size_t i = 0; i < rows * d; ++i) {
      acts.hidden[b + 1][i] = static_cast<R>(static_cast<double>(acts.hidden[b][i]) + static_cast<double>(branch[i]));
    }
  }

  acts.probs.assign(rows * V, 0.0);
  linear(acts.hidden[H].data(), rows, d, w[head_w(cfg)], w[head_b(cfg)], V, acts.probs.data());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = acts.probs.data() + r * V;
    const double mx = *std::max_element(p, p + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      p[v] = std::exp(p[v] - mx);
      z += p[v];
    }
    for (std::size_t v = 0; v < V; ++v) p[v] /= z;
    const Token target = batch.row(r)[n];
    total += -std::log(std::max(p[target], 1e-300));
  }
  return total / static_cast<double>(rows);
}

template <typename R>
std::vector<std::vector<double>> run_backward(const ModelConfig& cfg, const std::vector<const R*>& w,
                                              const TokenBatch& batch, const Activations<R>& acts) {
  const std::size_t rows = batch.rows, n = cfg.context_len, d = cfg.embed_dim;
  const std::size_t e = cfg.hidden_dim(), V = cfg.vocab_size, H = cfg.num_blocks;
  const auto shapes = model_param_shapes(cfg);
  std::vector<std::vector<double>> g;
  g.reserve(shapes.size());
  for (const auto& s : shapes) g.emplace_back(shape_numel(s), 0.0);

  std::vector<double> dlogits(acts.probs);
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    dlogits[r * V + batch.row(r)[n]] -= 1.0;
    for (std::size_t v = 0; v < V; ++v) dlogits[r * V + v] *= inv_rows;
  }

  std::vector<double> dh(rows * d);
  linear_backward(dlogits.data(), acts.hidden[H].data(), rows, d, w[head_w(cfg)], V,
                  g[head_w(cfg)].data(), g[head_b(cfg)].data(), dh.data());

  std::vector<double> da(rows * e), dprev(rows * d);
  for (std::size_t bi = H; bi-- > 0;) {
    const auto& a = acts.act[bi];
    linear_backward(dh.data(), a.data(), rows, e, w[fc2_w(bi)], d, g[fc2_w(bi)].data(),
                    g[fc2_b(bi)].data(), da.data());
    for (std::size_t i = 0; i < rows * e; ++i) {
      const double av = static_cast<double>(a[i]);
      da[i] *= 1.0 - av * av;
    }
    linear_backward(da.data(), acts.hidden[bi].data(), rows, d, w[fc1_w(bi)], e,
                    g[fc1_w(bi)].data(), g[fc1_b(bi)].data(), dprev.data());
    for (std::size_t i = 0; i < rows * d; ++i) dh[i] += dprev[i];
  }

  std::vector<double> dgathered(rows * n * d);
  linear_backward(dh.data(), acts.gathered.data(), rows, n * d, w[kProjW], d, g[kProjW].data(),
                  g[kProjB].data(), dgathered.data());
  for (std::size_t r = 0; r < rows; ++r) {
    const Token* tok = batch.row(r);
    for (std::size_t p = 0; p < n; ++p) {
      double* dst = g[kEmbed].data() + tok[p] * d;
      const double* src = dgathered.data() + (r * n + p) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  return g;
}

void check_layout(const ModelConfig& cfg, const ParamSet& params) {
  const auto names = model_param_names(cfg);
  const auto shapes = model_param_shapes(cfg);
  if (params.size() != names.size()) {
    throw ShapeError("model expects " + std::to_string(names.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (params[i].name != names[i] || params[i].shape != shapes[i]) {
      throw ShapeError("model tensor " + std::to_string(i) + ": expected '" + names[i] + "' " +
                       shape_to_string(shapes[i]) + ", got '" + params[i].name + "' " +
                       shape_to_string(params[i].shape));
    }
  }
}

std::vector<const float*> pointers(const ParamSet& params) {
  std::vector<const float*> out;
  out.reserve(params.size());
  for (const auto& t : params) out.push_back(t.data.data());
  return out;
}

std::vector<const double*> pointers(const ModelConfig& cfg, const WideParams& params) {
  const auto names = model_param_names(cfg);
  const auto shapes = model_param_shapes(cfg);
  if (params.names != names || params.shapes != shapes) throw ShapeError("wide parameter layout mismatch");
  std::vector<const double*> out;
  out.reserve(params.data.size());
  for (const auto& t : params.data) out.push_back(t.data());
  return out;
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},           {"embed_dim", c.embed_dim},
          {"num_blocks", c.num_blocks},           {"expansion_ratio", c.expansion_ratio},
          {"key_block_count", c.key_block_count}, {"context_len", c.context_len},
          {"include_head_in_keys", c.include_head_in_keys},
          {"parameter_count", c.parameter_count()}};
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (vocab_size > 65536) throw std::invalid_argument("vocab_size must fit 16-bit token ids");
  if (embed_dim == 0 || num_blocks == 0 || expansion_ratio == 0 || context_len == 0) {
    throw std::invalid_argument("embed_dim, num_blocks, expansion_ratio and context_len must be positive");
  }
  if (key_block_count > num_blocks) {
    throw std::invalid_argument("key_block_count (" + std::to_string(key_block_count) +
                                ") exceeds num_blocks (" + std::to_string(num_blocks) + ")");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t V = vocab_size, d = embed_dim, e = hidden_dim(), n = context_len;
  return V * d + (n * d * d + d) + num_blocks * (2 * e * d + e + d) + (d * V + V);
}

std::vector<std::string> model_param_names(const ModelConfig& cfg) {
  std::vector<std::string> names{"embed", "proj.weight", "proj.bias"};
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    names.push_back(p + "fc1.weight");
    names.push_back(p + "fc1.bias");
    names.push_back(p + "fc2.weight");
    names.push_back(p + "fc2.bias");
  }
  names.emplace_back("head.weight");
  names.emplace_back("head.bias");
  return names;
}

std::vector<Shape> model_param_shapes(const ModelConfig& cfg) {
  const std::size_t V = cfg.vocab_size, d = cfg.embed_dim, e = cfg.hidden_dim(), n = cfg.context_len;
  std::vector<Shape> shapes{{V, d}, {d, n * d}, {d}};
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    shapes.push_back({e, d});
    shapes.push_back({e});
    shapes.push_back({d, e});
    shapes.push_back({d});
  }
  shapes.push_back({V, d});
  shapes.push_back({V});
  return shapes;
}

Partition make_partition(const ModelConfig& cfg) {
  cfg.validate();
  Partition part;
  const auto names = model_param_names(cfg);
  const std::size_t first_key_block = cfg.num_blocks - cfg.key_block_count;
  for (std::size_t i = 0; i < names.size(); ++i) {
    bool is_key = false;
    if (i >= kFirstBlock && i < head_w(cfg)) {
      is_key = (i - kFirstBlock) / 4 >= first_key_block;
    } else if (i >= head_w(cfg)) {
      is_key = cfg.include_head_in_keys;
    }
    (is_key ? part.key_names : part.backbone_names).push_back(names[i]);
  }
  check_partition(cfg, part);
  return part;
}

void check_partition(const ModelConfig& cfg, const Partition& part) {
  auto all = part.backbone_names;
  all.insert(all.end(), part.key_names.begin(), part.key_names.end());
  auto expected = model_param_names(cfg);
  std::ranges::sort(all);
  std::ranges::sort(expected);
  if (std::ranges::adjacent_find(all) != all.end()) throw ShapeError("partition lists overlap");
  if (all != expected) throw ShapeError("partition does not cover the model parameters exactly");
}

ParamSet backbone_of(const ParamSet& model, const Partition& part) {
  return model.select(part.backbone_names, ParamRole::backbone);
}

ParamSet keys_of(const ParamSet& model, const Partition& part) {
  return model.select(part.key_names, ParamRole::keys);
}

ParamSet join_model(const ModelConfig& cfg, const ParamSet& backbone, const ParamSet& keys) {
  ParamSet out(ParamRole::model);
  for (const auto& name : model_param_names(cfg)) {
    const Tensor* t = backbone.find(name);
    if (t == nullptr) t = keys.find(name);
    if (t == nullptr) throw ShapeError("join_model: missing tensor '" + name + "'");
    out.add(*t);
  }
  if (out.size() != backbone.size() + keys.size()) throw ShapeError("join_model: extra tensors");
  return out;
}

ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet params(ParamRole::model);
  const auto names = model_param_names(cfg);
  const auto shapes = model_param_shapes(cfg);
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor t(names[i], shapes[i]);
    if (shapes[i].size() == 2) {
      // embed is a lookup of a one-hot input, so its fan-in is the vocabulary
      const std::size_t fan_in = i == kEmbed ? cfg.vocab_size : shapes[i][1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.data) v = static_cast<float>(dist(rng));
    }
    params.add(std::move(t));
  }
  return params;
}

ForwardResult forward_loss(const ModelConfig& cfg, const ParamSet& params, const TokenBatch& batch) {
  check_layout(cfg, params);
  Activations<float> acts;
  ForwardResult out;
  out.loss = run_forward(cfg, pointers(params), batch, acts);
  out.cache.params_fingerprint = fingerprint(params);
  out.cache.batch = batch;
  out.cache.gathered = std::move(acts.gathered);
  out.cache.hidden = std::move(acts.hidden);
  out.cache.act = std::move(acts.act);
  out.cache.probs = std::move(acts.probs);
  return out;
}

ParamSet backward(const ModelConfig& cfg, const ParamSet& params, const ForwardCache& cache) {
  check_layout(cfg, params);
  if (cache.params_fingerprint != fingerprint(params) || cache.hidden.size() != cfg.num_blocks + 1) {
    throw StaleCacheError("backward: cache was produced for different parameters");
  }
  Activations<float> acts{cache.gathered, cache.hidden, cache.act, cache.probs};
  auto grads = run_backward(cfg, pointers(params), cache.batch, acts);
  ParamSet out = params.zeros_like(ParamRole::pseudo_gradient);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::ranges::transform(grads[i], out[i].data.begin(), [](double v) { return static_cast<float>(v); });
  }
  return out;
}

WideParams WideParams::from(const ParamSet& p) {
  WideParams w;
  for (const auto& t : p) {
    w.names.push_back(t.name);
    w.shapes.push_back(t.shape);
    w.data.emplace_back(t.data.begin(), t.data.end());
  }
  return w;
}

double forward_loss_wide(const ModelConfig& cfg, const WideParams& params, const TokenBatch& batch) {
  Activations<double> acts;
  return run_forward(cfg, pointers(cfg, params), batch, acts);
}

WideParams gradient_wide(const ModelConfig& cfg, const WideParams& params, const TokenBatch& batch) {
  Activations<double> acts;
  const auto ptrs = pointers(cfg, params);
  run_forward(cfg, ptrs, batch, acts);
  WideParams out{params.names, params.shapes, run_backward(cfg, ptrs, batch, acts)};
  return out;
}

void TrainerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (local_steps < 0) throw std::invalid_argument("local_steps must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  schedule.validate();
}

void Adam::step(ParamSet& params, const ParamSet& grad, double lr) {
  require_congruent(params, grad, "Adam::step");
  if (m_.empty()) {
    for (const auto& t : params) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    const auto& g = grad[i].data;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      p[j] = static_cast<float>(static_cast<double>(p[j]) - lr * update);
    }
  }
}

TrainResult local_train(const ModelConfig& cfg, ParamSet params, const TokenSplit& shard,
                        const TrainerConfig& trainer, std::uint64_t rng_seed, std::int64_t global_step) {
  if (shard.window_count(cfg.context_len) == 0) throw InputError("local_train: empty data shard");
  TrainResult result{std::move(params), 0, 0.0};
  if (trainer.local_steps == 0) return result;

  BatchSampler sampler(shard, cfg.context_len);
  Rng rng(rng_seed);
  Adam adam(trainer.beta1, trainer.beta2, trainer.epsilon);
  double loss_sum = 0.0;
  for (int i = 0; i < trainer.local_steps; ++i) {
    const TokenBatch batch = sampler.sample(trainer.batch_size, rng);
    const auto fwd = forward_loss(cfg, result.params, batch);
    const ParamSet grad = backward(cfg, result.params, fwd.cache);
    const double lr = lr_at(global_step + i, trainer.schedule);
    if (trainer.optimizer == OptimizerKind::adam) {
      adam.step(result.params, grad, lr);
    } else {
      result.params = axpy(-lr, grad, result.params);
    }
    loss_sum += fwd.loss;
  }
  require_finite(result.params, "local_train");
  result.steps_taken = trainer.local_steps;
  result.mean_loss = loss_sum / trainer.local_steps;
  return result;
}

EvalResult evaluate(const ModelConfig& cfg, const ParamSet& params, const TokenSplit& split) {
  check_layout(cfg, params);
  const auto batches = all_windows(split, cfg.context_len);
  if (batches.empty()) throw InputError("evaluate: empty shard");
  const auto ptrs = pointers(params);
  double total = 0.0;
  std::size_t windows = 0;
  Activations<float> acts;
  for (const auto& b : batches) {
    total += run_forward(cfg, ptrs, b, acts) * static_cast<double>(b.rows);
    windows += b.rows;
  }
  EvalResult r;
  r.windows = windows;
  r.loss = total / static_cast<double>(windows);
  r.perplexity = std::exp(r.loss);
  return r;
}

double evaluate_perplexity(const ModelConfig& cfg, const ParamSet& params, const TokenSplit& split) {
  return evaluate(cfg, params, split).perplexity;
}

void save_checkpoint(const ModelConfig& cfg, const ParamSet& params, const std::filesystem::path& stem) {
  check_layout(cfg, params);
  save_params(params, stem, nlohmann::json{{"model_config", config_json(cfg)}}.dump());
}

ParamSet load_checkpoint(const std::filesystem::path& stem, ModelConfig* cfg_out) {
  ParamSet params = load_params(stem);
  const auto meta = nlohmann::json::parse(load_params_meta(stem));
  if (!meta.is_object() || !meta.contains("model_config")) {
    throw std::runtime_error("checkpoint " + stem.string() + " has no model_config");
  }
  const auto& j = meta["model_config"];
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size");
  cfg.embed_dim = j.at("embed_dim");
  cfg.num_blocks = j.at("num_blocks");
  cfg.expansion_ratio = j.at("expansion_ratio");
  cfg.key_block_count = j.at("key_block_count");
  cfg.context_len = j.at("context_len");
  cfg.include_head_in_keys = j.at("include_head_in_keys");
  check_layout(cfg, params);
  if (cfg_out != nullptr) *cfg_out = cfg;
  return params;
}

}  // namespace worldlm
