#include "dpruner/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <ostream>

#include "dpruner/errors.hpp"
#include "dpruner/hash.hpp"
#include "dpruner/random.hpp"

namespace dpruner {

namespace {

constexpr double kEmbeddingStd = 0.02;
constexpr std::size_t kParamsPerLayer = 9;

// Offset of each projection within a layer's parameter run:
// attn_norm, q, k, v, o, mlp_norm, gate, up, down.
constexpr std::array<std::size_t, 7> kProjectionSlot = {1, 2, 3, 4, 6, 7, 8};

std::size_t parse_count(const Metadata& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint lacks '" + key + "'");
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw FormatError("bad value for '" + key + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad value for '" + key + "'");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1 || num_layers < 1 || d_model < 1 || num_heads < 1 || d_ff < 1) {
    throw ValidationError("model config: all sizes must be at least 1");
  }
  if (context_length < 2) throw ValidationError("model config: context_length must be at least 2");
  if (d_model % num_heads != 0) {
    throw ValidationError("model config: d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
  }
}

std::size_t ModelConfig::prunable_parameter_count() const {
  return num_layers * (4 * d_model * d_model + 3 * d_model * d_ff);
}

void ModelConfig::to_metadata(Metadata& meta) const {
  meta["model.vocab_size"] = std::to_string(vocab_size);
  meta["model.context_length"] = std::to_string(context_length);
  meta["model.num_layers"] = std::to_string(num_layers);
  meta["model.d_model"] = std::to_string(d_model);
  meta["model.num_heads"] = std::to_string(num_heads);
  meta["model.d_ff"] = std::to_string(d_ff);
  meta["model.seed"] = std::to_string(seed);
}

ModelConfig ModelConfig::from_metadata(const Metadata& meta) {
  ModelConfig c;
  c.vocab_size = parse_count(meta, "model.vocab_size");
  c.context_length = parse_count(meta, "model.context_length");
  c.num_layers = parse_count(meta, "model.num_layers");
  c.d_model = parse_count(meta, "model.d_model");
  c.num_heads = parse_count(meta, "model.num_heads");
  c.d_ff = parse_count(meta, "model.d_ff");
  c.seed = parse_count(meta, "model.seed");
  return c;
}

std::string_view projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::o: return "o";
    case Projection::gate: return "gate";
    case Projection::up: return "up";
    case Projection::down: return "down";
  }
  return "?";
}

Projection parse_projection(std::string_view name) {
  for (auto p : kProjections) {
    if (projection_name(p) == name) return p;
  }
  throw ValidationError("unknown projection '" + std::string(name) + "'");
}

std::string MatrixKey::name() const {
  return "layers." + std::to_string(layer) + "." + std::string(projection_name(projection));
}

MatrixKey parse_matrix_key(std::string_view name) {
  const auto first = name.find('.');
  const auto second = first == std::string_view::npos ? first : name.find('.', first + 1);
  if (second == std::string_view::npos || name.substr(0, first) != "layers") {
    throw FormatError("'" + std::string(name) + "' is not a prunable matrix name");
  }
  const auto layer_text = name.substr(first + 1, second - first - 1);
  std::size_t layer = 0;
  auto [ptr, ec] = std::from_chars(layer_text.data(), layer_text.data() + layer_text.size(), layer);
  if (ec != std::errc() || ptr != layer_text.data() + layer_text.size() || layer_text.empty()) {
    throw FormatError("'" + std::string(name) + "' is not a prunable matrix name");
  }
  try {
    return MatrixKey{layer, parse_projection(name.substr(second + 1))};
  } catch (const ValidationError&) {
    throw FormatError("'" + std::string(name) + "' is not a prunable matrix name");
  }
}

TransformerModel::TransformerModel(ModelConfig config) : config_(config) {
  config_.validate();
  const auto d = config_.d_model, ff = config_.d_ff;
  params_.push_back({"tok_emb", Tensor({config_.vocab_size, d})});
  params_.push_back({"pos_emb", Tensor({config_.context_length, d})});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const auto prefix = "layers." + std::to_string(l) + ".";
    params_.push_back({prefix + "attn_norm", Tensor({d}, 1.0)});
    params_.push_back({prefix + "q", Tensor({d, d})});
    params_.push_back({prefix + "k", Tensor({d, d})});
    params_.push_back({prefix + "v", Tensor({d, d})});
    params_.push_back({prefix + "o", Tensor({d, d})});
    params_.push_back({prefix + "mlp_norm", Tensor({d}, 1.0)});
    params_.push_back({prefix + "gate", Tensor({d, ff})});
    params_.push_back({prefix + "up", Tensor({d, ff})});
    params_.push_back({prefix + "down", Tensor({ff, d})});
  }
  params_.push_back({"final_norm", Tensor({d}, 1.0)});
}

Tensor& TransformerModel::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ValidationError("model has no parameter '" + std::string(name) + "'");
}

const Tensor& TransformerModel::parameter(std::string_view name) const {
  return const_cast<TransformerModel*>(this)->parameter(name);
}

std::size_t TransformerModel::matrix_index(const MatrixKey& key) const {
  if (key.layer >= config_.num_layers) {
    throw ValidationError("layer " + std::to_string(key.layer) + " out of range for a " +
                          std::to_string(config_.num_layers) + "-layer model");
  }
  return 2 + key.layer * kParamsPerLayer + kProjectionSlot[static_cast<std::size_t>(key.projection)];
}

Tensor& TransformerModel::matrix(const MatrixKey& key) { return params_[matrix_index(key)].value; }
const Tensor& TransformerModel::matrix(const MatrixKey& key) const { return params_[matrix_index(key)].value; }

Var TransformerModel::forward(Tape& tape, std::span<const TokenId> inputs) const {
  if (inputs.empty() || inputs.size() > config_.context_length) {
    throw ValidationError("forward: input length " + std::to_string(inputs.size()) + " outside [1, " +
                          std::to_string(config_.context_length) + "]");
  }
  std::vector<Var> w;
  w.reserve(params_.size());
  for (const auto& p : params_) w.push_back(tape.weight(p.name, p.value));

  std::vector<TokenId> positions(inputs.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i);

  const std::size_t hd = config_.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Var h = add(tape, embedding(tape, w[0], inputs), embedding(tape, w[1], positions));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::size_t base = 2 + l * kParamsPerLayer;
    Var a = rms_norm(tape, h, w[base]);
    Var q = matmul(tape, a, w[base + 1]);
    Var k = matmul(tape, a, w[base + 2]);
    Var v = matmul(tape, a, w[base + 3]);
    std::vector<Var> heads;
    for (std::size_t head = 0; head < config_.num_heads; ++head) {
      Var qh = slice_columns(tape, q, head * hd, hd);
      Var kh = slice_columns(tape, k, head * hd, hd);
      Var vh = slice_columns(tape, v, head * hd, hd);
      Var scores = causal_mask(tape, scale(tape, matmul_transposed(tape, qh, kh), attn_scale));
      heads.push_back(matmul(tape, softmax(tape, scores), vh));
    }
    h = add(tape, h, matmul(tape, concat_columns(tape, heads), w[base + 4]));

    Var m = rms_norm(tape, h, w[base + 5]);
    Var gated = multiply(tape, silu(tape, matmul(tape, m, w[base + 6])), matmul(tape, m, w[base + 7]));
    h = add(tape, h, matmul(tape, gated, w[base + 8]));
  }
  Var out = rms_norm(tape, h, w.back());
  return matmul_transposed(tape, out, w[0]);
}

std::string TransformerModel::fingerprint() const {
  Fnv1a h;
  Metadata meta;
  config_.to_metadata(meta);
  for (const auto& [k, v] : meta) {
    h.update(k);
    h.update(v);
  }
  for (const auto& p : params_) {
    h.update(p.name);
    for (double x : p.value.data()) h.update_u64(std::bit_cast<std::uint64_t>(x));
  }
  return h.hex();
}

TransformerModel init_model(const ModelConfig& config) {
  TransformerModel model(config);
  Rng rng(config.seed);
  for (auto& p : model.parameters()) {
    if (p.value.rank() != 2) continue;  // norm gains stay at 1
    const bool is_embedding = p.name == "tok_emb" || p.name == "pos_emb";
    const double stddev = is_embedding ? kEmbeddingStd : 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
    for (double& x : p.value.data()) x = stddev * standard_normal(rng);
  }
  return model;
}

std::vector<MatrixKey> prunable_keys(const ModelConfig& config) {
  std::vector<MatrixKey> keys;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (auto p : kProjections) keys.push_back({l, p});
  }
  return keys;
}

std::vector<PrunableMatrix> prunable_matrices(const TransformerModel& model) {
  std::vector<PrunableMatrix> out;
  for (const auto& key : prunable_keys(model.config())) out.push_back({key, &model.matrix(key)});
  return out;
}

namespace {

void check_sequence(const TransformerModel& model, std::span<const TokenId> sequence) {
  const auto& cfg = model.config();
  if (sequence.size() < 2 || sequence.size() > cfg.context_length) {
    throw ValidationError("sequence length " + std::to_string(sequence.size()) + " outside [2, " +
                          std::to_string(cfg.context_length) + "]");
  }
  for (auto t : sequence) {
    if (t >= cfg.vocab_size) {
      throw ValidationError("token id " + std::to_string(t) + " out of vocabulary (size " +
                            std::to_string(cfg.vocab_size) + ")");
    }
  }
}

}  // namespace

TapedLoss next_token_loss(const TransformerModel& model, std::span<const TokenId> sequence) {
  check_sequence(model, sequence);
  TapedLoss out;
  const auto inputs = sequence.first(sequence.size() - 1);
  const auto targets = sequence.subspan(1);
  Var logits = model.forward(out.tape, inputs);
  out.loss_var = cross_entropy(out.tape, logits, targets);
  out.loss = out.tape.value(out.loss_var).item();
  return out;
}

LossAndGradients loss_and_gradients(const TransformerModel& model, std::span<const TokenId> sequence) {
  auto taped = next_token_loss(model, sequence);
  return {taped.loss, taped.tape.backward(taped.loss_var)};
}

std::vector<double> position_losses(const TransformerModel& model, std::span<const TokenId> sequence) {
  check_sequence(model, sequence);
  Tape tape;
  Var logits = model.forward(tape, sequence.first(sequence.size() - 1));
  return row_cross_entropy(tape.value(logits), sequence.subspan(1));
}

double mean_loss(const TransformerModel& model, std::span<const std::vector<TokenId>> sequences) {
  if (sequences.empty()) throw ValidationError("mean_loss: no sequences");
  double total = 0.0;
  for (const auto& s : sequences) total += next_token_loss(model, s).loss;
  return total / static_cast<double>(sequences.size());
}

bool loss_still_decreasing(std::span<const double> losses) {
  if (losses.size() < 8) return true;
  const std::size_t window = std::max<std::size_t>(losses.size() / 10, 8);
  const auto tail = losses.last(window);
  const std::size_t quarter = window / 4;
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < quarter; ++i) {
    early += tail[i];
    late += tail[window - quarter + i];
  }
  return (early - late) > 0.01 * early;
}

PretrainResult pretrain(TransformerModel model, std::span<const TokenStream> streams, const PretrainOptions& options) {
  if (options.steps < 1) throw ValidationError("pretrain: steps must be at least 1");
  if (options.batch_size < 1) throw ValidationError("pretrain: batch_size must be at least 1");
  if (!(options.learning_rate > 0.0)) throw ValidationError("pretrain: learning_rate must be positive");

  const std::size_t window = model.config().context_length;
  // Start positions are enumerated across all streams long enough to hold a window.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // (stream, count)
  std::uint64_t total_starts = 0;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    if (streams[s].tokens.size() >= window) {
      const auto n = streams[s].tokens.size() - window + 1;
      ranges.emplace_back(s, n);
      total_starts += n;
    }
  }
  if (total_starts == 0) {
    throw ValidationError("pretrain: no source holds a full window of " + std::to_string(window) + " tokens");
  }

  Rng rng(options.seed);
  PretrainResult result{std::move(model), {}, false};
  result.losses.reserve(options.steps);
  auto params = result.model.parameters();

  for (std::size_t step = 0; step < options.steps; ++step) {
    Gradients total;
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      auto pick = uniform_index(rng, total_starts);
      std::size_t s = 0;
      while (pick >= ranges[s].second) pick -= ranges[s++].second;
      const auto& tokens = streams[ranges[s].first].tokens;
      const std::span<const TokenId> seq(tokens.data() + pick, window);

      auto lg = loss_and_gradients(result.model, seq);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
      }
      batch_loss += lg.loss;
      if (total.empty()) {
        total = std::move(lg.gradients);
      } else {
        for (auto& [name, g] : lg.gradients) {
          auto dst = total.at(name).data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
      }
    }
    const double inv_batch = 1.0 / static_cast<double>(options.batch_size);
    batch_loss *= inv_batch;
    result.losses.push_back(batch_loss);

    double norm_sq = 0.0;
    for (auto& [name, g] : total) {
      for (double& x : g.data()) {
        x *= inv_batch;
        norm_sq += x * x;
      }
    }
    if (!std::isfinite(norm_sq)) throw NumericError("pretrain: non-finite gradient at step " + std::to_string(step));
    double lr = options.learning_rate;
    const double norm = std::sqrt(norm_sq);
    if (options.clip_norm > 0.0 && norm > options.clip_norm) lr *= options.clip_norm / norm;

    for (auto& p : params) {
      auto g = total.at(p.name).data();
      auto w = p.value.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }

    if (options.log && options.log_every > 0 && (step % options.log_every == 0 || step + 1 == options.steps)) {
      *options.log << "step " << step + 1 << "/" << options.steps << " loss " << batch_loss << "\n";
    }
  }
  result.still_decreasing = loss_still_decreasing(result.losses);
  return result;
}

Container checkpoint_container(const Checkpoint& ckpt) {
  Container c;
  c.kind = ArtifactKind::checkpoint;
  c.metadata = ckpt.extra;
  ckpt.model.config().to_metadata(c.metadata);
  c.metadata["step"] = std::to_string(ckpt.step);
  c.metadata["model_fingerprint"] = ckpt.model.fingerprint();
  for (const auto& p : ckpt.model.parameters()) c.blocks.push_back(tensor_block(p.name, p.value));
  return c;
}

Checkpoint checkpoint_from_container(const Container& c) {
  ModelConfig config = ModelConfig::from_metadata(c.metadata);
  try {
    config.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  Checkpoint ckpt{TransformerModel(config), parse_count(c.metadata, "step"), {}};
  for (auto& p : ckpt.model.parameters()) {
    Tensor t = block_tensor(c.block(p.name));
    if (t.shape() != p.value.shape()) {
      throw FormatError("checkpoint block '" + p.name + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(p.value.shape()));
    }
    p.value = std::move(t);
  }
  for (const auto& [k, v] : c.metadata) {
    if (k.rfind("model.", 0) == 0 || k == "step" || k == "model_fingerprint") continue;
    ckpt.extra[k] = v;
  }
  if (auto it = c.metadata.find("model_fingerprint"); it != c.metadata.end() && it->second != ckpt.model.fingerprint()) {
    throw FormatError("checkpoint weights do not match their recorded fingerprint");
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_container(path, checkpoint_container(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(read_container(path, ArtifactKind::checkpoint));
}

}  // namespace dpruner
