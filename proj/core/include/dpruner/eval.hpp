#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dpruner/corpus.hpp"
#include "dpruner/model.hpp"
#include "dpruner/pruner.hpp"

namespace dpruner {

struct EvalReport {
  std::string model_fingerprint;
  std::string corpus_name;
  double mean_loss = 0.0;
  double perplexity = 0.0;  // exp(mean_loss)
  std::size_t token_count = 0;
};

/// exp of the token-weighted mean next-token cross-entropy over all sequences.
EvalReport perplexity(const TransformerModel& model, const Corpus& corpus);

struct MatrixSimilarity {
  MatrixKey key;
  double fraction = 0.0;  // shared ones / matrix size
};

struct SimilarityReport {
  std::vector<MatrixSimilarity> matrices;
  std::vector<std::pair<Projection, double>> by_projection;  // unweighted means
  std::vector<std::pair<std::size_t, double>> by_layer;
  double overall = 0.0;
};

SimilarityReport mask_similarity(const Mask& a, const Mask& b);

struct SweepRow {
  double sparsity = 0.0;
  double perplexity = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  bool monotone = false;  // perplexity non-decreasing in listed order
};

SweepResult sparsity_sweep(const TransformerModel& model, const MatrixSet& scores, const Corpus& corpus,
                           const std::vector<double>& sparsities, const PruneConfig& selection = {});

// Report writers. CSV files have a header row.
std::string eval_report_csv(const EvalReport& r);
std::string eval_report_text(const EvalReport& r);
std::string similarity_csv(const SimilarityReport& r);
/// Projection kinds as rows, layers as columns.
std::string similarity_grid_csv(const SimilarityReport& r);
std::string similarity_text(const SimilarityReport& r);
std::string sweep_csv(const SweepResult& r);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace dpruner
