#include "dpruner/eval.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "dpruner/container.hpp"
#include "dpruner/errors.hpp"

namespace dpruner {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

EvalReport perplexity(const TransformerModel& model, const Corpus& corpus) {
  if (corpus.empty()) throw ValidationError("perplexity: corpus '" + corpus.name + "' is empty");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& seq : corpus.sequences) {
    for (double l : position_losses(model, seq)) total += l;
    tokens += seq.size() - 1;
  }
  EvalReport r;
  r.model_fingerprint = model.fingerprint();
  r.corpus_name = corpus.name;
  r.token_count = tokens;
  r.mean_loss = total / static_cast<double>(tokens);
  if (!std::isfinite(r.mean_loss)) throw NumericError("perplexity: non-finite loss on corpus '" + corpus.name + "'");
  r.perplexity = std::exp(r.mean_loss);
  return r;
}

SimilarityReport mask_similarity(const Mask& a, const Mask& b) {
  if (a.matrices.size() != b.matrices.size()) {
    throw ValidationError("mask_similarity: masks cover " + std::to_string(a.matrices.size()) + " and " +
                          std::to_string(b.matrices.size()) + " matrices");
  }
  SimilarityReport r;
  std::map<Projection, std::pair<double, std::size_t>> kinds;
  std::map<std::size_t, std::pair<double, std::size_t>> layers;
  for (std::size_t m = 0; m < a.matrices.size(); ++m) {
    const auto& ma = a.matrices[m];
    const auto& mb = b.matrices[m];
    if (ma.key != mb.key || ma.shape != mb.shape) {
      throw ValidationError("mask_similarity: manifests differ at " + ma.key.name() + " " + shape_string(ma.shape) +
                            " vs " + mb.key.name() + " " + shape_string(mb.shape));
    }
    std::size_t shared = 0;
    for (std::size_t i = 0; i < ma.keep.size(); ++i) shared += (ma.keep[i] && mb.keep[i]) ? 1 : 0;
    const double f = static_cast<double>(shared) / static_cast<double>(ma.keep.size());
    r.matrices.push_back({ma.key, f});
    auto& k = kinds[ma.key.projection];
    k.first += f;
    ++k.second;
    auto& l = layers[ma.key.layer];
    l.first += f;
    ++l.second;
    r.overall += f;
  }
  for (auto p : kProjections) {
    if (auto it = kinds.find(p); it != kinds.end()) {
      r.by_projection.emplace_back(p, it->second.first / static_cast<double>(it->second.second));
    }
  }
  for (const auto& [layer, acc] : layers) r.by_layer.emplace_back(layer, acc.first / static_cast<double>(acc.second));
  if (!r.matrices.empty()) r.overall /= static_cast<double>(r.matrices.size());
  return r;
}

SweepResult sparsity_sweep(const TransformerModel& model, const MatrixSet& scores, const Corpus& corpus,
                           const std::vector<double>& sparsities, const PruneConfig& selection) {
  SweepResult out;
  for (double s : sparsities) {
    PruneConfig cfg = selection;
    cfg.sparsity = s;
    const Mask mask = select_mask(scores, cfg);
    const auto pruned = apply_mask(model, mask);
    out.rows.push_back({s, perplexity(pruned, corpus).perplexity});
  }
  out.monotone = true;
  for (std::size_t i = 1; i < out.rows.size(); ++i) {
    if (out.rows[i].perplexity < out.rows[i - 1].perplexity) out.monotone = false;
  }
  return out;
}

std::string eval_report_csv(const EvalReport& r) {
  return "model_fingerprint,corpus,mean_loss,perplexity,token_count\n" + r.model_fingerprint + "," + r.corpus_name +
         "," + num(r.mean_loss) + "," + num(r.perplexity) + "," + std::to_string(r.token_count) + "\n";
}

std::string eval_report_text(const EvalReport& r) {
  std::ostringstream out;
  out << "model       " << r.model_fingerprint << "\n"
      << "corpus      " << r.corpus_name << "\n"
      << "tokens      " << r.token_count << "\n"
      << "mean loss   " << num(r.mean_loss) << "\n"
      << "perplexity  " << num(r.perplexity) << "\n";
  return out.str();
}

std::string similarity_csv(const SimilarityReport& r) {
  std::string out = "matrix,layer,projection,similarity\n";
  for (const auto& m : r.matrices) {
    out += m.key.name() + "," + std::to_string(m.key.layer) + "," + std::string(projection_name(m.key.projection)) +
           "," + num(m.fraction) + "\n";
  }
  return out;
}

std::string similarity_grid_csv(const SimilarityReport& r) {
  std::size_t layers = 0;
  for (const auto& m : r.matrices) layers = std::max(layers, m.key.layer + 1);
  std::string out = "projection";
  for (std::size_t l = 0; l < layers; ++l) out += ",layer" + std::to_string(l);
  out += "\n";
  for (auto p : kProjections) {
    std::vector<std::string> cells(layers);
    bool any = false;
    for (const auto& m : r.matrices) {
      if (m.key.projection == p) {
        cells[m.key.layer] = num(m.fraction);
        any = true;
      }
    }
    if (!any) continue;
    out += std::string(projection_name(p));
    for (const auto& c : cells) out += "," + c;
    out += "\n";
  }
  return out;
}

std::string similarity_text(const SimilarityReport& r) {
  std::ostringstream out;
  out << "mask similarity (shared kept weights / matrix size)\n";
  out << "overall mean  " << num(r.overall) << "\n";
  for (const auto& [p, v] : r.by_projection) out << "  " << projection_name(p) << "\t" << num(v) << "\n";
  for (const auto& [l, v] : r.by_layer) out << "  layer " << l << "\t" << num(v) << "\n";
  return out.str();
}

std::string sweep_csv(const SweepResult& r) {
  std::string out = "sparsity,perplexity\n";
  for (const auto& row : r.rows) out += num(row.sparsity) + "," + num(row.perplexity) + "\n";
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace dpruner
