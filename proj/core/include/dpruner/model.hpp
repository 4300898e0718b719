#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpruner/container.hpp"
#include "dpruner/corpus.hpp"
#include "dpruner/tape.hpp"
#include "dpruner/tensor.hpp"

namespace dpruner {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t context_length = 64;
  std::size_t num_layers = 2;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t d_ff = 128;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t head_dim() const { return d_model / num_heads; }
  /// num_layers * (4 d_model^2 + 3 d_model d_ff)
  std::size_t prunable_parameter_count() const;

  void to_metadata(Metadata& meta) const;
  static ModelConfig from_metadata(const Metadata& meta);

  bool operator==(const ModelConfig&) const = default;
};

/// The seven prunable projections of a layer, in their fixed enumeration order.
enum class Projection : std::uint8_t { q, k, v, o, gate, up, down };

inline constexpr std::array<Projection, 7> kProjections = {Projection::q,    Projection::k,  Projection::v,
                                                           Projection::o,    Projection::gate, Projection::up,
                                                           Projection::down};

std::string_view projection_name(Projection p);
Projection parse_projection(std::string_view name);

struct MatrixKey {
  std::size_t layer = 0;
  Projection projection = Projection::q;

  /// "layers.<layer>.<projection>", the parameter and block name.
  std::string name() const;
  auto operator<=>(const MatrixKey&) const = default;
};

/// Inverse of MatrixKey::name(); throws FormatError on anything else.
MatrixKey parse_matrix_key(std::string_view name);

struct NamedTensor {
  std::string name;
  Tensor value;

  bool operator==(const NamedTensor&) const = default;
};

struct PrunableMatrix {
  MatrixKey key;
  const Tensor* weight;
};

/// Decoder-only transformer: learned token and position embeddings, pre-norm
/// blocks of causal multi-head attention and a SiLU-gated MLP, RMS
/// normalisation, and an output head tied to the token embedding.
/// Projections are bias-free and act as x * W with W stored [in, out].
class TransformerModel {
 public:
  /// All weights zero; see init_model() for a seeded initialisation.
  explicit TransformerModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  std::span<NamedTensor> parameters() { return params_; }
  std::span<const NamedTensor> parameters() const { return params_; }
  Tensor& parameter(std::string_view name);
  const Tensor& parameter(std::string_view name) const;

  Tensor& matrix(const MatrixKey& key);
  const Tensor& matrix(const MatrixKey& key) const;

  /// Registers every parameter on `tape` and records the forward pass.
  /// Returns logits of shape [inputs.size(), vocab_size].
  Var forward(Tape& tape, std::span<const TokenId> inputs) const;

  std::string fingerprint() const;

  bool operator==(const TransformerModel& other) const = default;

 private:
  std::size_t matrix_index(const MatrixKey& key) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

TransformerModel init_model(const ModelConfig& config);

/// num_layers * 7 entries ordered by layer, then q, k, v, o, gate, up, down.
std::vector<PrunableMatrix> prunable_matrices(const TransformerModel& model);
std::vector<MatrixKey> prunable_keys(const ModelConfig& config);

struct TapedLoss {
  double loss = 0.0;
  Tape tape;
  Var loss_var;
};

/// Mean cross-entropy of predicting token t+1 from tokens <= t.
TapedLoss next_token_loss(const TransformerModel& model, std::span<const TokenId> sequence);

struct LossAndGradients {
  double loss = 0.0;
  Gradients gradients;
};
LossAndGradients loss_and_gradients(const TransformerModel& model, std::span<const TokenId> sequence);

/// Per-position next-token losses (length sequence.size() - 1).
std::vector<double> position_losses(const TransformerModel& model, std::span<const TokenId> sequence);

/// Mean of the per-sequence mean losses.
double mean_loss(const TransformerModel& model, std::span<const std::vector<TokenId>> sequences);

struct PretrainOptions {
  std::size_t steps = 2000;
  double learning_rate = 0.5;
  std::size_t batch_size = 4;
  double clip_norm = 1.0;  // global gradient-norm clip, 0 disables
  std::size_t log_every = 100;
  std::uint64_t seed = 1;
  std::ostream* log = nullptr;
};

struct PretrainResult {
  TransformerModel model;
  std::vector<double> losses;  // mean batch loss per step
  bool still_decreasing = false;
};

/// Momentum-free minibatch SGD on windows of `context_length` tokens drawn
/// uniformly from `streams`.
PretrainResult pretrain(TransformerModel model, std::span<const TokenStream> streams, const PretrainOptions& options);

/// True when the loss over the last 10% of steps still drops by more than 1%.
bool loss_still_decreasing(std::span<const double> losses);

struct Checkpoint {
  TransformerModel model;
  std::size_t step = 0;
  Metadata extra;  // free-form provenance (training state, applied mask)
};

Container checkpoint_container(const Checkpoint& ckpt);
Checkpoint checkpoint_from_container(const Container& c);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dpruner
