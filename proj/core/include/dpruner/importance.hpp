#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpruner/container.hpp"
#include "dpruner/corpus.hpp"
#include "dpruner/model.hpp"

namespace dpruner {

struct MatrixEntry {
  MatrixKey key;
  Tensor values;
};

/// One tensor per prunable matrix, in prunable_keys() order.
using MatrixSet = std::vector<MatrixEntry>;

MatrixSet zeros_like_prunable(const TransformerModel& model);
const Tensor& find_matrix(const MatrixSet& set, const MatrixKey& key);
void require_same_layout(const char* op, const MatrixSet& a, const MatrixSet& b);

/// Diagonal empirical Fisher: mean over samples of squared per-sample gradients.
struct FisherDiagonal {
  MatrixSet diagonal;
  std::size_t samples = 0;
};

/// Per-weight loss increase from removing the weight, estimated on open-domain data.
struct ImportanceMatrixG {
  MatrixSet scores;
  double damping = 0.0;
  std::size_t samples = 0;
  bool normalized = false;
  std::string corpus_fingerprint;
  std::string model_fingerprint;
};

/// Per-weight pruning score blending the general importance (through the
/// regularized loss) with domain gradients.
struct DualScoreS {
  MatrixSet scores;
  double lambda = 0.0;
  double alpha = 0.0;
  std::size_t samples = 0;
  std::string method;  // "dual" or "noreg"
  std::string general_fingerprint;
  std::string open_corpus_fingerprint;
  std::string domain_corpus_fingerprint;
  std::string model_fingerprint;
};

struct NextTokenGradients {
  MatrixSet mean;          // (1/P) sum_j g_j
  MatrixSet mean_squared;  // (1/P) sum_j g_j^2
  std::size_t samples = 0;
  double mean_loss = 0.0;
};

/// Batch-size-1 gradients of the next-token loss for every sample, reduced in
/// sample order.
NextTokenGradients next_token_gradients(const TransformerModel& model, const Corpus& corpus);

FisherDiagonal estimate_fisher_diagonal(const TransformerModel& model, const Corpus& corpus);

/// G = 1/2 W^2 (H + damping), i.e. 1/2 W^2 / [H^-1] with the inverse Hessian
/// diagonal approximated by 1 / (H + damping).
ImportanceMatrixG general_importance_from_fisher(const TransformerModel& model, const FisherDiagonal& fisher,
                                                 double damping);

struct GeneralImportanceOptions {
  double damping = 1e-4;
  bool normalize = false;  // divide each matrix by its max score
};

ImportanceMatrixG general_importance(const TransformerModel& model, const Corpus& open_corpus,
                                     const GeneralImportanceOptions& options = {});

/// dL_regular/dW = 2 lambda alpha^2 G g H, elementwise.
MatrixSet regularizer_gradient(const ImportanceMatrixG& general, const MatrixSet& next_gradient,
                               const FisherDiagonal& fisher, double lambda, double alpha);

struct DualGradient {
  MatrixSet gradient;  // dL_next/dW + dL_regular/dW
  NextTokenGradients next;
  FisherDiagonal fisher;
};

/// Gradient of the regularized loss over the domain corpus. The Fisher
/// diagonal comes from the same domain pass unless `fisher_override` is given.
/// Model weights are not modified.
DualGradient dual_loss_gradient(const TransformerModel& model, const Corpus& domain_corpus,
                                const ImportanceMatrixG& general, double lambda, double alpha,
                                const FisherDiagonal* fisher_override = nullptr);

/// S = |u + u^2/2| with u = gradient * W.
MatrixSet taylor_scores(const TransformerModel& model, const MatrixSet& gradient);

DualScoreS dual_importance_scores(const TransformerModel& model, const Corpus& domain_corpus,
                                  const ImportanceMatrixG& general, double lambda, double alpha,
                                  const FisherDiagonal* fisher_override = nullptr);

/// The same score with the regularizer removed: S from the plain next-token gradient.
DualScoreS unregularized_scores(const TransformerModel& model, const Corpus& domain_corpus);

/// |L(corpus) - L_{W[i]=0}(corpus)| for each flat index of one prunable matrix.
std::vector<double> brute_force_importance(const TransformerModel& model, const Corpus& corpus, const MatrixKey& key,
                                           std::span<const std::size_t> indices);

// Score files share the checkpoint container, one f64 block per matrix.
Container general_importance_container(const ImportanceMatrixG& g);
ImportanceMatrixG general_importance_from_container(const Container& c);
Container dual_scores_container(const DualScoreS& s);
DualScoreS dual_scores_from_container(const Container& c);

void save_general_importance(const std::filesystem::path& path, const ImportanceMatrixG& g);
ImportanceMatrixG load_general_importance(const std::filesystem::path& path);
void save_dual_scores(const std::filesystem::path& path, const DualScoreS& s);
DualScoreS load_dual_scores(const std::filesystem::path& path);

std::string matrix_set_fingerprint(const MatrixSet& set);

}  // namespace dpruner
