#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpruner/importance.hpp"
#include "dpruner/model.hpp"

namespace dpruner {

enum class SelectionMode { per_matrix, blocked, per_layer };
enum class PruneMethod { dual, magnitude, noreg };

std::string_view selection_mode_name(SelectionMode m);
SelectionMode parse_selection_mode(std::string_view name);
std::string_view prune_method_name(PruneMethod m);
PruneMethod parse_prune_method(std::string_view name);

struct MatrixMask {
  MatrixKey key;
  Shape shape;
  std::vector<std::uint8_t> keep;  // 1 keep, 0 prune; row-major

  std::size_t zeros() const;
  bool operator==(const MatrixMask&) const = default;
};

struct Mask {
  std::vector<MatrixMask> matrices;
  double sparsity = 0.0;
  SelectionMode mode = SelectionMode::per_matrix;
  std::size_t block_size = 0;  // base B_s in blocked mode
  PruneMethod method = PruneMethod::dual;
  std::string score_fingerprint;
  std::string model_fingerprint;

  std::size_t zeros() const;
  std::size_t total() const;
  const MatrixMask& matrix(const MatrixKey& key) const;
  std::string fingerprint() const;
};

struct PruneConfig {
  double sparsity = 0.5;
  SelectionMode mode = SelectionMode::per_matrix;
  std::size_t block_base = 16;
  PruneMethod method = PruneMethod::dual;

  void validate() const;
};

/// Zeros exactly floor(sparsity * M) lowest-scored weights of each matrix.
/// Ties go to the lowest flat index.
Mask select_mask_per_matrix(const MatrixSet& scores, double sparsity);

/// Per-matrix rule applied independently to each group of `block_size`
/// consecutive columns (the last group may be narrower).
Mask select_mask_blocked(const MatrixSet& scores, double sparsity, std::size_t block_size);

/// Blocked selection where each matrix's block width scales with its column
/// count: round(base * cols / min_cols) over all matrices in `scores`.
Mask select_mask_blocked_scaled(const MatrixSet& scores, double sparsity, std::size_t base);
std::size_t scaled_block_size(std::size_t base, std::size_t cols, std::size_t min_cols);

/// All seven matrices of a layer compete in one pool.
Mask select_mask_per_layer(const MatrixSet& scores, double sparsity);

/// Dispatches on config.mode.
Mask select_mask(const MatrixSet& scores, const PruneConfig& config);

MatrixSet magnitude_scores(const TransformerModel& model);
Mask magnitude_mask(const TransformerModel& model, double sparsity);

/// Copy of `model` with masked weights set to zero. Rejects masks whose shapes
/// or recorded model fingerprint do not match.
TransformerModel apply_mask(const TransformerModel& model, const Mask& mask);

/// apply_mask plus provenance recorded in the checkpoint metadata.
Checkpoint apply_mask(const Checkpoint& ckpt, const Mask& mask);

Container mask_container(const Mask& mask);
Mask mask_from_container(const Container& c);
void save_mask(const std::filesystem::path& path, const Mask& mask);
Mask load_mask(const std::filesystem::path& path);

}  // namespace dpruner
