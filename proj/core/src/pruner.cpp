#include "dpruner/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dpruner/errors.hpp"
#include "dpruner/hash.hpp"

namespace dpruner {

namespace {

std::size_t prune_count(double sparsity, std::size_t n) {
  return static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n)));
}

void check_sparsity(double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw ValidationError("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
}

void check_scores(const MatrixSet& scores) {
  for (const auto& e : scores) {
    if (e.values.rank() != 2) throw ValidationError("scores for " + e.key.name() + " are not a matrix");
    for (double v : e.values.data()) {
      if (std::isnan(v)) throw ValidationError("NaN score in " + e.key.name());
    }
  }
}

struct Candidate {
  double score;
  std::size_t order;  // tie-break: lower goes first
  std::uint8_t* slot;
};

// Sets slot = 0 for the `count` lowest (score, order) candidates.
void prune_lowest(std::vector<Candidate>& pool, std::size_t count) {
  if (count == 0) return;
  auto less = [](const Candidate& a, const Candidate& b) {
    return a.score < b.score || (a.score == b.score && a.order < b.order);
  };
  // The order is total, so everything left of the nth element is exactly the lowest set.
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count - 1), pool.end(), less);
  for (std::size_t i = 0; i < count; ++i) *pool[i].slot = 0;
}

Mask empty_mask(const MatrixSet& scores, double sparsity, SelectionMode mode) {
  Mask mask;
  mask.sparsity = sparsity;
  mask.mode = mode;
  mask.score_fingerprint = matrix_set_fingerprint(scores);
  for (const auto& e : scores) {
    mask.matrices.push_back({e.key, e.values.shape(), std::vector<std::uint8_t>(e.values.size(), 1)});
  }
  return mask;
}

void select_columns(const Tensor& scores, MatrixMask& out, double sparsity, std::size_t block_size) {
  const std::size_t rows = scores.rows(), cols = scores.cols();
  for (std::size_t c0 = 0; c0 < cols; c0 += block_size) {
    const std::size_t width = std::min(block_size, cols - c0);
    std::vector<Candidate> pool;
    pool.reserve(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = c0; c < c0 + width; ++c) {
        const std::size_t flat = r * cols + c;
        pool.push_back({scores[flat], flat, &out.keep[flat]});
      }
    }
    prune_lowest(pool, prune_count(sparsity, pool.size()));
  }
}

}  // namespace

std::string_view selection_mode_name(SelectionMode m) {
  switch (m) {
    case SelectionMode::per_matrix: return "per-matrix";
    case SelectionMode::blocked: return "blocked";
    case SelectionMode::per_layer: return "per-layer";
  }
  return "?";
}

SelectionMode parse_selection_mode(std::string_view name) {
  for (auto m : {SelectionMode::per_matrix, SelectionMode::blocked, SelectionMode::per_layer}) {
    if (selection_mode_name(m) == name) return m;
  }
  throw ValidationError("unknown selection mode '" + std::string(name) + "'");
}

std::string_view prune_method_name(PruneMethod m) {
  switch (m) {
    case PruneMethod::dual: return "dual";
    case PruneMethod::magnitude: return "magnitude";
    case PruneMethod::noreg: return "noreg";
  }
  return "?";
}

PruneMethod parse_prune_method(std::string_view name) {
  for (auto m : {PruneMethod::dual, PruneMethod::magnitude, PruneMethod::noreg}) {
    if (prune_method_name(m) == name) return m;
  }
  throw ValidationError("unknown prune method '" + std::string(name) + "'");
}

std::size_t MatrixMask::zeros() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
}

std::size_t Mask::zeros() const {
  std::size_t n = 0;
  for (const auto& m : matrices) n += m.zeros();
  return n;
}

std::size_t Mask::total() const {
  std::size_t n = 0;
  for (const auto& m : matrices) n += m.keep.size();
  return n;
}

const MatrixMask& Mask::matrix(const MatrixKey& key) const {
  for (const auto& m : matrices) {
    if (m.key == key) return m;
  }
  throw ValidationError("mask has no matrix " + key.name());
}

std::string Mask::fingerprint() const {
  Fnv1a h;
  for (const auto& m : matrices) {
    h.update(m.key.name());
    h.update(m.keep);
  }
  return h.hex();
}

void PruneConfig::validate() const {
  check_sparsity(sparsity);
  if (block_base < 1) throw ValidationError("block size must be at least 1");
}

Mask select_mask_per_matrix(const MatrixSet& scores, double sparsity) {
  check_sparsity(sparsity);
  check_scores(scores);
  Mask mask = empty_mask(scores, sparsity, SelectionMode::per_matrix);
  for (std::size_t m = 0; m < scores.size(); ++m) {
    const Tensor& s = scores[m].values;
    std::vector<Candidate> pool;
    pool.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) pool.push_back({s[i], i, &mask.matrices[m].keep[i]});
    prune_lowest(pool, prune_count(sparsity, pool.size()));
  }
  return mask;
}

Mask select_mask_blocked(const MatrixSet& scores, double sparsity, std::size_t block_size) {
  check_sparsity(sparsity);
  check_scores(scores);
  if (block_size < 1) throw ValidationError("block size must be at least 1");
  Mask mask = empty_mask(scores, sparsity, SelectionMode::blocked);
  mask.block_size = block_size;
  for (std::size_t m = 0; m < scores.size(); ++m) select_columns(scores[m].values, mask.matrices[m], sparsity, block_size);
  return mask;
}

std::size_t scaled_block_size(std::size_t base, std::size_t cols, std::size_t min_cols) {
  if (base < 1 || min_cols < 1) throw ValidationError("block size must be at least 1");
  const double scaled = static_cast<double>(base) * static_cast<double>(cols) / static_cast<double>(min_cols);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scaled)));
}

Mask select_mask_blocked_scaled(const MatrixSet& scores, double sparsity, std::size_t base) {
  check_sparsity(sparsity);
  check_scores(scores);
  if (base < 1) throw ValidationError("block size must be at least 1");
  std::size_t min_cols = SIZE_MAX;
  for (const auto& e : scores) min_cols = std::min(min_cols, e.values.cols());
  Mask mask = empty_mask(scores, sparsity, SelectionMode::blocked);
  mask.block_size = base;
  for (std::size_t m = 0; m < scores.size(); ++m) {
    const Tensor& s = scores[m].values;
    select_columns(s, mask.matrices[m], sparsity, scaled_block_size(base, s.cols(), min_cols));
  }
  return mask;
}

Mask select_mask_per_layer(const MatrixSet& scores, double sparsity) {
  check_sparsity(sparsity);
  check_scores(scores);
  Mask mask = empty_mask(scores, sparsity, SelectionMode::per_layer);
  std::size_t m = 0;
  while (m < scores.size()) {
    const std::size_t layer = scores[m].key.layer;
    std::vector<Candidate> pool;
    std::size_t order = 0;
    for (; m < scores.size() && scores[m].key.layer == layer; ++m) {
      const Tensor& s = scores[m].values;
      for (std::size_t i = 0; i < s.size(); ++i) pool.push_back({s[i], order++, &mask.matrices[m].keep[i]});
    }
    prune_lowest(pool, prune_count(sparsity, pool.size()));
  }
  return mask;
}

Mask select_mask(const MatrixSet& scores, const PruneConfig& config) {
  config.validate();
  switch (config.mode) {
    case SelectionMode::per_matrix: return select_mask_per_matrix(scores, config.sparsity);
    case SelectionMode::blocked: return select_mask_blocked_scaled(scores, config.sparsity, config.block_base);
    case SelectionMode::per_layer: return select_mask_per_layer(scores, config.sparsity);
  }
  throw ValidationError("unknown selection mode");
}

MatrixSet magnitude_scores(const TransformerModel& model) {
  MatrixSet set;
  for (const auto& m : prunable_matrices(model)) {
    Tensor s = *m.weight;
    for (double& x : s.data()) x = std::abs(x);
    set.push_back({m.key, std::move(s)});
  }
  return set;
}

Mask magnitude_mask(const TransformerModel& model, double sparsity) {
  Mask mask = select_mask_per_matrix(magnitude_scores(model), sparsity);
  mask.method = PruneMethod::magnitude;
  mask.model_fingerprint = model.fingerprint();
  return mask;
}

TransformerModel apply_mask(const TransformerModel& model, const Mask& mask) {
  if (!mask.model_fingerprint.empty() && mask.model_fingerprint != model.fingerprint()) {
    throw ValidationError("mask was built for model " + mask.model_fingerprint + ", not " + model.fingerprint());
  }
  const auto keys = prunable_keys(model.config());
  if (mask.matrices.size() != keys.size()) {
    throw ValidationError("mask covers " + std::to_string(mask.matrices.size()) + " matrices, model has " +
                          std::to_string(keys.size()));
  }
  TransformerModel out = model;
  for (const auto& mm : mask.matrices) {
    Tensor& w = out.matrix(mm.key);
    if (w.shape() != mm.shape || mm.keep.size() != w.size()) {
      throw ValidationError("apply_mask: mask for " + mm.key.name() + " has shape " + shape_string(mm.shape) +
                            ", weight has " + shape_string(w.shape()));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!mm.keep[i]) w[i] = 0.0;
    }
  }
  return out;
}

Checkpoint apply_mask(const Checkpoint& ckpt, const Mask& mask) {
  Checkpoint out{apply_mask(ckpt.model, mask), ckpt.step, ckpt.extra};
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", mask.sparsity);
  out.extra["mask.fingerprint"] = mask.fingerprint();
  out.extra["mask.method"] = std::string(prune_method_name(mask.method));
  out.extra["mask.mode"] = std::string(selection_mode_name(mask.mode));
  out.extra["mask.sparsity"] = buf;
  out.extra["mask.score_fingerprint"] = mask.score_fingerprint;
  out.extra["mask.source_model"] = ckpt.model.fingerprint();
  return out;
}

Container mask_container(const Mask& mask) {
  Container c;
  c.kind = ArtifactKind::mask;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", mask.sparsity);
  c.metadata["sparsity"] = buf;
  c.metadata["mode"] = std::string(selection_mode_name(mask.mode));
  c.metadata["block_size"] = std::to_string(mask.block_size);
  c.metadata["method"] = std::string(prune_method_name(mask.method));
  c.metadata["score_fingerprint"] = mask.score_fingerprint;
  c.metadata["model_fingerprint"] = mask.model_fingerprint;
  c.metadata["mask_fingerprint"] = mask.fingerprint();
  for (const auto& m : mask.matrices) c.blocks.push_back(bits_block(m.key.name(), m.shape, m.keep));
  return c;
}

Mask mask_from_container(const Container& c) {
  Mask mask;
  try {
    mask.sparsity = std::stod(c.meta("sparsity"));
    mask.block_size = std::stoull(c.meta("block_size"));
  } catch (const std::logic_error&) {
    throw FormatError("mask metadata has malformed numbers");
  }
  mask.mode = parse_selection_mode(c.meta("mode"));
  mask.method = parse_prune_method(c.meta("method"));
  mask.score_fingerprint = c.meta("score_fingerprint");
  mask.model_fingerprint = c.meta("model_fingerprint");
  for (const auto& b : c.blocks) {
    mask.matrices.push_back({parse_matrix_key(b.name), b.shape, block_bits(b)});
  }
  if (mask.fingerprint() != c.meta("mask_fingerprint")) {
    throw FormatError("mask bits do not match their recorded fingerprint");
  }
  return mask;
}

void save_mask(const std::filesystem::path& path, const Mask& mask) { write_container(path, mask_container(mask)); }

Mask load_mask(const std::filesystem::path& path) {
  return mask_from_container(read_container(path, ArtifactKind::mask));
}

}  // namespace dpruner
