#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "worldlm/schedule.hpp"
#include "worldlm/tensor.hpp"
#include "worldlm/tokens.hpp"

namespace worldlm {

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Causal n-gram feed-forward language model:
///   embed the last `context_len` tokens, concatenate, project to d,
///   then `num_blocks` residual blocks h += W2 tanh(W1 h + b1) + b2,
///   then an output head d -> V.
/// The final `key_block_count` blocks are the personalized key layers.
struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t embed_dim = 16;
  std::size_t num_blocks = 3;
  std::size_t expansion_ratio = 4;
  std::size_t key_block_count = 1;
  std::size_t context_len = 4;
  bool include_head_in_keys = false;

  void validate() const;
  std::size_t hidden_dim() const { return expansion_ratio * embed_dim; }
  /// V*d + (n*d*d + d) + H*(2*e*d*d + e*d + d) + (d*V + V)
  std::size_t parameter_count() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Canonical parameter names in insertion order.
std::vector<std::string> model_param_names(const ModelConfig& cfg);
std::vector<Shape> model_param_shapes(const ModelConfig& cfg);

struct Partition {
  std::vector<std::string> backbone_names;
  std::vector<std::string> key_names;
};

/// Keys are the final `key_block_count` blocks (plus the head when
/// `include_head_in_keys`). Embeddings always stay in the backbone.
Partition make_partition(const ModelConfig& cfg);
/// Throws unless the partition is disjoint and covers every model parameter.
void check_partition(const ModelConfig& cfg, const Partition& part);

ParamSet backbone_of(const ParamSet& model, const Partition& part);
ParamSet keys_of(const ParamSet& model, const Partition& part);
/// Reassemble a full model in canonical order.
ParamSet join_model(const ModelConfig& cfg, const ParamSet& backbone, const ParamSet& keys);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardCache {
  std::uint64_t params_fingerprint = 0;
  TokenBatch batch;
  std::vector<float> gathered;              // rows x (n*d)
  std::vector<std::vector<float>> hidden;   // H+1 tensors, rows x d
  std::vector<std::vector<float>> act;      // H tensors, rows x e*d
  std::vector<double> probs;                // rows x V
};

struct ForwardResult {
  double loss = 0.0;  // mean cross-entropy, nats
  ForwardCache cache;
};

ForwardResult forward_loss(const ModelConfig& cfg, const ParamSet& params, const TokenBatch& batch);
/// Gradient of the mean loss; throws StaleCacheError if `params` changed
/// since the forward pass.
ParamSet backward(const ModelConfig& cfg, const ParamSet& params, const ForwardCache& cache);

/// Double-precision mirror of a ParamSet, used only for gradient checks.
struct WideParams {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> data;

  static WideParams from(const ParamSet& p);
};

double forward_loss_wide(const ModelConfig& cfg, const WideParams& params, const TokenBatch& batch);
WideParams gradient_wide(const ModelConfig& cfg, const WideParams& params, const TokenBatch& batch);

enum class OptimizerKind { adam, sgd };

struct TrainerConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  int local_steps = 50;
  std::size_t batch_size = 32;
  ScheduleConfig schedule;

  void validate() const;
  friend bool operator==(const TrainerConfig&, const TrainerConfig&) = default;
};

/// Adam with bias correction; moments kept in double.
class Adam {
 public:
  Adam(double beta1, double beta2, double epsilon) : beta1_(beta1), beta2_(beta2), eps_(epsilon) {}
  void step(ParamSet& params, const ParamSet& grad, double lr);
  int steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  ParamSet params;
  int steps_taken = 0;
  double mean_loss = 0.0;  // mean training-batch loss over the steps taken
};

/// Runs `trainer.local_steps` optimizer steps. Step i uses
/// lr_at(global_step + i); batches come from Rng(rng_seed). Optimizer state
/// starts fresh on every call.
TrainResult local_train(const ModelConfig& cfg, ParamSet params, const TokenSplit& shard,
                        const TrainerConfig& trainer, std::uint64_t rng_seed,
                        std::int64_t global_step);

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t windows = 0;
};

/// Mean next-token NLL over every full-context window of the split.
EvalResult evaluate(const ModelConfig& cfg, const ParamSet& params, const TokenSplit& split);
double evaluate_perplexity(const ModelConfig& cfg, const ParamSet& params, const TokenSplit& split);

/// Checkpoint = parameter serialization with the ModelConfig echoed in the
/// manifest.
void save_checkpoint(const ModelConfig& cfg, const ParamSet& params, const std::filesystem::path& stem);
ParamSet load_checkpoint(const std::filesystem::path& stem, ModelConfig* cfg_out = nullptr);

}  // namespace worldlm
