#include "dpruner/importance.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "dpruner/errors.hpp"
#include "dpruner/hash.hpp"

namespace dpruner {

namespace {

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[40];
  const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::string(buf, end);
}

double parse_double(const Container& c, const std::string& key) {
  const auto& text = c.meta(key);
  try {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos == text.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw FormatError("bad numeric metadata '" + key + "=" + text + "'");
}

std::size_t parse_size(const Container& c, const std::string& key) {
  const auto& text = c.meta(key);
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(text, &pos);
    if (pos == text.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw FormatError("bad count metadata '" + key + "=" + text + "'");
}

void append_blocks(Container& c, const MatrixSet& set) {
  for (const auto& e : set) c.blocks.push_back(tensor_block(e.key.name(), e.values));
}

MatrixSet read_blocks(const Container& c) {
  MatrixSet set;
  for (const auto& b : c.blocks) set.push_back({parse_matrix_key(b.name), block_tensor(b)});
  return set;
}

void require_score_type(const Container& c, const std::string& type) {
  if (c.meta("score_type") != type) {
    throw ValidationError("score file holds '" + c.meta("score_type") + "' scores, expected '" + type + "'");
  }
}

}  // namespace

MatrixSet zeros_like_prunable(const TransformerModel& model) {
  MatrixSet set;
  for (const auto& m : prunable_matrices(model)) set.push_back({m.key, Tensor(m.weight->shape())});
  return set;
}

const Tensor& find_matrix(const MatrixSet& set, const MatrixKey& key) {
  for (const auto& e : set) {
    if (e.key == key) return e.values;
  }
  throw ValidationError("no scores for matrix " + key.name());
}

void require_same_layout(const char* op, const MatrixSet& a, const MatrixSet& b) {
  if (a.size() != b.size()) {
    throw ValidationError(std::string(op) + ": " + std::to_string(a.size()) + " matrices vs " +
                          std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].key != b[i].key) {
      throw ValidationError(std::string(op) + ": matrix order differs at " + a[i].key.name() + " vs " +
                            b[i].key.name());
    }
    require_same_shape(op, a[i].values, b[i].values);
  }
}

NextTokenGradients next_token_gradients(const TransformerModel& model, const Corpus& corpus) {
  if (corpus.empty()) throw ValidationError("next_token_gradients: corpus '" + corpus.name + "' is empty");
  NextTokenGradients out{zeros_like_prunable(model), zeros_like_prunable(model), corpus.size(), 0.0};

  for (std::size_t j = 0; j < corpus.size(); ++j) {
    auto lg = loss_and_gradients(model, corpus.sequences[j]);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("non-finite loss on sample " + std::to_string(j) + " of corpus '" + corpus.name + "'");
    }
    out.mean_loss += lg.loss;
    for (std::size_t m = 0; m < out.mean.size(); ++m) {
      const Tensor& g = lg.gradients.at(out.mean[m].key.name());
      if (!g.all_finite()) {
        throw NumericError("non-finite gradient on sample " + std::to_string(j) + " of corpus '" + corpus.name +
                           "' for " + out.mean[m].key.name());
      }
      auto sum = out.mean[m].values.data();
      auto sq = out.mean_squared[m].values.data();
      for (std::size_t i = 0; i < sum.size(); ++i) {
        sum[i] += g[i];
        sq[i] += g[i] * g[i];
      }
    }
  }
  const auto count = static_cast<double>(corpus.size());
  for (std::size_t m = 0; m < out.mean.size(); ++m) {
    for (double& x : out.mean[m].values.data()) x /= count;
    for (double& x : out.mean_squared[m].values.data()) x /= count;
  }
  out.mean_loss /= count;
  return out;
}

FisherDiagonal estimate_fisher_diagonal(const TransformerModel& model, const Corpus& corpus) {
  auto grads = next_token_gradients(model, corpus);
  return FisherDiagonal{std::move(grads.mean_squared), grads.samples};
}

ImportanceMatrixG general_importance_from_fisher(const TransformerModel& model, const FisherDiagonal& fisher,
                                                 double damping) {
  if (!(damping >= 0.0)) throw ValidationError("general_importance: damping must be non-negative");
  ImportanceMatrixG g;
  g.damping = damping;
  g.samples = fisher.samples;
  g.model_fingerprint = model.fingerprint();
  for (const auto& entry : fisher.diagonal) {
    const Tensor& w = model.matrix(entry.key);
    require_same_shape("general_importance", w, entry.values);
    Tensor scores(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) scores[i] = 0.5 * w[i] * w[i] * (entry.values[i] + damping);
    g.scores.push_back({entry.key, std::move(scores)});
  }
  return g;
}

ImportanceMatrixG general_importance(const TransformerModel& model, const Corpus& open_corpus,
                                     const GeneralImportanceOptions& options) {
  if (!(options.damping > 0.0)) throw ValidationError("general_importance: damping must be positive");
  auto g = general_importance_from_fisher(model, estimate_fisher_diagonal(model, open_corpus), options.damping);
  g.corpus_fingerprint = open_corpus.fingerprint();
  if (options.normalize) {
    for (auto& e : g.scores) {
      const auto data = e.values.data();
      const double mx = *std::max_element(data.begin(), data.end());
      if (mx > 0.0) {
        for (double& x : data) x /= mx;
      }
    }
    g.normalized = true;
  }
  return g;
}

MatrixSet regularizer_gradient(const ImportanceMatrixG& general, const MatrixSet& next_gradient,
                               const FisherDiagonal& fisher, double lambda, double alpha) {
  if (!(lambda >= 0.0)) throw ValidationError("regularizer_gradient: lambda must be non-negative");
  if (!(alpha > 0.0)) throw ValidationError("regularizer_gradient: alpha must be positive");
  require_same_layout("regularizer_gradient", general.scores, next_gradient);
  require_same_layout("regularizer_gradient", general.scores, fisher.diagonal);

  const double coeff = 2.0 * lambda * alpha * alpha;
  MatrixSet out;
  for (std::size_t m = 0; m < next_gradient.size(); ++m) {
    const Tensor& gm = general.scores[m].values;
    const Tensor& g = next_gradient[m].values;
    const Tensor& h = fisher.diagonal[m].values;
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = coeff * gm[i] * g[i] * h[i];
    out.push_back({next_gradient[m].key, std::move(r)});
  }
  return out;
}

DualGradient dual_loss_gradient(const TransformerModel& model, const Corpus& domain_corpus,
                                const ImportanceMatrixG& general, double lambda, double alpha,
                                const FisherDiagonal* fisher_override) {
  DualGradient out;
  out.next = next_token_gradients(model, domain_corpus);
  out.fisher = fisher_override ? *fisher_override : FisherDiagonal{out.next.mean_squared, out.next.samples};
  const auto reg = regularizer_gradient(general, out.next.mean, out.fisher, lambda, alpha);
  out.gradient = out.next.mean;
  for (std::size_t m = 0; m < out.gradient.size(); ++m) {
    auto dst = out.gradient[m].values.data();
    const auto src = reg[m].values.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  return out;
}

MatrixSet taylor_scores(const TransformerModel& model, const MatrixSet& gradient) {
  MatrixSet out;
  for (const auto& e : gradient) {
    const Tensor& w = model.matrix(e.key);
    require_same_shape("dual_importance_scores", w, e.values);
    Tensor s(w.shape());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double u = e.values[i] * w[i];
      s[i] = std::abs(u + 0.5 * u * u);
    }
    out.push_back({e.key, std::move(s)});
  }
  return out;
}

DualScoreS dual_importance_scores(const TransformerModel& model, const Corpus& domain_corpus,
                                  const ImportanceMatrixG& general, double lambda, double alpha,
                                  const FisherDiagonal* fisher_override) {
  const auto dual = dual_loss_gradient(model, domain_corpus, general, lambda, alpha, fisher_override);
  DualScoreS s;
  s.scores = taylor_scores(model, dual.gradient);
  s.lambda = lambda;
  s.alpha = alpha;
  s.samples = domain_corpus.size();
  s.method = "dual";
  s.general_fingerprint = matrix_set_fingerprint(general.scores);
  s.open_corpus_fingerprint = general.corpus_fingerprint;
  s.domain_corpus_fingerprint = domain_corpus.fingerprint();
  s.model_fingerprint = model.fingerprint();
  return s;
}

DualScoreS unregularized_scores(const TransformerModel& model, const Corpus& domain_corpus) {
  const auto next = next_token_gradients(model, domain_corpus);
  DualScoreS s;
  s.scores = taylor_scores(model, next.mean);
  s.samples = domain_corpus.size();
  s.method = "noreg";
  s.domain_corpus_fingerprint = domain_corpus.fingerprint();
  s.model_fingerprint = model.fingerprint();
  return s;
}

std::vector<double> brute_force_importance(const TransformerModel& model, const Corpus& corpus, const MatrixKey& key,
                                           std::span<const std::size_t> indices) {
  if (corpus.empty()) throw ValidationError("brute_force_importance: corpus is empty");
  const std::size_t size = model.matrix(key).size();
  for (auto i : indices) {
    if (i >= size) {
      throw ValidationError("brute_force_importance: index " + std::to_string(i) + " out of range for " +
                            key.name());
    }
  }
  const double base = mean_loss(model, corpus.sequences);
  TransformerModel work = model;
  Tensor& w = work.matrix(key);
  std::vector<double> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    const double original = w[i];
    if (original == 0.0) {
      out.push_back(0.0);
      continue;
    }
    w[i] = 0.0;
    out.push_back(std::abs(mean_loss(work, corpus.sequences) - base));
    w[i] = original;
  }
  return out;
}

std::string matrix_set_fingerprint(const MatrixSet& set) {
  Fnv1a h;
  for (const auto& e : set) {
    h.update(e.key.name());
    for (double x : e.values.data()) h.update_u64(std::bit_cast<std::uint64_t>(x));
  }
  return h.hex();
}

Container general_importance_container(const ImportanceMatrixG& g) {
  Container c;
  c.kind = ArtifactKind::scores;
  c.metadata["score_type"] = "general";
  c.metadata["damping"] = format_double(g.damping);
  c.metadata["samples"] = std::to_string(g.samples);
  c.metadata["normalized"] = g.normalized ? "1" : "0";
  c.metadata["corpus_fingerprint"] = g.corpus_fingerprint;
  c.metadata["model_fingerprint"] = g.model_fingerprint;
  c.metadata["score_fingerprint"] = matrix_set_fingerprint(g.scores);
  append_blocks(c, g.scores);
  return c;
}

ImportanceMatrixG general_importance_from_container(const Container& c) {
  require_score_type(c, "general");
  ImportanceMatrixG g;
  g.scores = read_blocks(c);
  g.damping = parse_double(c, "damping");
  g.samples = parse_size(c, "samples");
  g.normalized = c.meta("normalized") == "1";
  g.corpus_fingerprint = c.meta("corpus_fingerprint");
  g.model_fingerprint = c.meta("model_fingerprint");
  if (matrix_set_fingerprint(g.scores) != c.meta("score_fingerprint")) {
    throw FormatError("general importance scores do not match their recorded fingerprint");
  }
  return g;
}

Container dual_scores_container(const DualScoreS& s) {
  Container c;
  c.kind = ArtifactKind::scores;
  c.metadata["score_type"] = "dual";
  c.metadata["method"] = s.method;
  c.metadata["lambda"] = format_double(s.lambda);
  c.metadata["alpha"] = format_double(s.alpha);
  c.metadata["samples"] = std::to_string(s.samples);
  c.metadata["general_fingerprint"] = s.general_fingerprint;
  c.metadata["open_corpus_fingerprint"] = s.open_corpus_fingerprint;
  c.metadata["domain_corpus_fingerprint"] = s.domain_corpus_fingerprint;
  c.metadata["model_fingerprint"] = s.model_fingerprint;
  c.metadata["score_fingerprint"] = matrix_set_fingerprint(s.scores);
  append_blocks(c, s.scores);
  return c;
}

DualScoreS dual_scores_from_container(const Container& c) {
  require_score_type(c, "dual");
  DualScoreS s;
  s.scores = read_blocks(c);
  s.method = c.meta("method");
  s.lambda = parse_double(c, "lambda");
  s.alpha = parse_double(c, "alpha");
  s.samples = parse_size(c, "samples");
  s.general_fingerprint = c.meta("general_fingerprint");
  s.open_corpus_fingerprint = c.meta("open_corpus_fingerprint");
  s.domain_corpus_fingerprint = c.meta("domain_corpus_fingerprint");
  s.model_fingerprint = c.meta("model_fingerprint");
  if (matrix_set_fingerprint(s.scores) != c.meta("score_fingerprint")) {
    throw FormatError("dual scores do not match their recorded fingerprint");
  }
  return s;
}

void save_general_importance(const std::filesystem::path& path, const ImportanceMatrixG& g) {
  write_container(path, general_importance_container(g));
}

ImportanceMatrixG load_general_importance(const std::filesystem::path& path) {
  return general_importance_from_container(read_container(path, ArtifactKind::scores));
}

void save_dual_scores(const std::filesystem::path& path, const DualScoreS& s) {
  write_container(path, dual_scores_container(s));
}

DualScoreS load_dual_scores(const std::filesystem::path& path) {
  return dual_scores_from_container(read_container(path, ArtifactKind::scores));
}

}  // namespace dpruner
