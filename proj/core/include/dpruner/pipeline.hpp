#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "dpruner/corpus.hpp"
#include "dpruner/model.hpp"
#include "dpruner/pruner.hpp"

namespace dpruner {

/// Everything one pipeline run needs. Read from a flat `key = value` file
/// (`#` starts a comment) and overridden key by key from the command line.
struct RunConfig {
  ModelConfig model;
  std::uint64_t seed = 1;

  std::string pretrain_sources = "data/general.txt,data/domain.txt@0:0.7";
  std::size_t pretrain_steps = 2000;
  double pretrain_lr = 0.5;
  std::size_t batch_size = 4;
  double clip_norm = 1.0;
  std::size_t log_every = 100;

  std::string open_sources = "data/general.txt";
  std::size_t open_samples = 128;
  std::string domain_sources = "data/domain.txt@0:0.7";
  std::size_t domain_samples = 128;
  std::string test_sources = "data/domain.txt@0.7:1";
  std::size_t test_samples = 64;
  std::size_t sequence_length = 64;
  // Optional corpus caches written by `calibrate`; used instead of sampling.
  std::string open_cache;
  std::string domain_cache;
  std::string test_cache;

  double lambda = 0.1;
  double alpha = 0.03;
  double damping = 1e-4;
  std::string fisher_source = "domain";  // "domain" or "open"
  bool normalize_g = false;

  double sparsity = 0.5;
  std::string mode = "per-matrix";
  std::size_t block_base = 16;
  std::string method = "dual";
  std::string sweep_sparsities = "0.1,0.2,0.3,0.4,0.5,0.6,0.7";

  std::filesystem::path out_dir = "out";
  // Stage inputs; empty means the default artifact inside out_dir.
  std::string checkpoint;
  std::string general_scores;
  std::string scores;

  /// Sets one key. Unknown keys and unparsable values raise ValidationError.
  void set(std::string_view key, std::string_view value);
  /// Numeric invariants and enum names; file existence is checked by the stage that reads them.
  void validate() const;

  PruneConfig prune_config() const;
  std::vector<double> sweep_list() const;

  std::filesystem::path checkpoint_path() const;
  std::filesystem::path general_scores_path() const;
  std::filesystem::path scores_path() const;

  /// Canonical `key = value` listing of every key, sorted.
  std::string to_text() const;
  static std::vector<std::string> keys();
};

void load_config_file(const std::filesystem::path& path, RunConfig& config);

/// Name of the environment variable that overrides out_dir.
inline constexpr const char* kOutDirEnv = "DPRUNER_OUT_DIR";

enum class CorpusRole { open, domain, test };
std::string_view corpus_role_name(CorpusRole role);
CorpusRole parse_corpus_role(std::string_view name);

/// The calibration spec of one role; each role draws with its own seed derived from config.seed.
CalibrationSpec calibration_spec(const RunConfig& config, CorpusRole role);
/// Loads the role's cache when configured, otherwise samples from its sources.
Corpus load_corpus(const RunConfig& config, CorpusRole role);

// Stages. Each writes into config.out_dir, logs progress to `log`, and
// returns the paths it wrote.
std::vector<std::filesystem::path> cmd_pretrain(const RunConfig& config, std::ostream& log);
std::vector<std::filesystem::path> cmd_calibrate(const RunConfig& config, std::ostream& log);
std::vector<std::filesystem::path> cmd_general_importance(const RunConfig& config, std::ostream& log);
std::vector<std::filesystem::path> cmd_prune(const RunConfig& config, std::ostream& log);
std::vector<std::filesystem::path> cmd_eval(const RunConfig& config, CorpusRole role, std::ostream& log);
std::vector<std::filesystem::path> cmd_masksim(const RunConfig& config, const std::filesystem::path& mask_a,
                                               const std::filesystem::path& mask_b, std::ostream& log);
std::vector<std::filesystem::path> cmd_sweep(const RunConfig& config, std::ostream& log);

/// 2 for ValidationError, 3 for FormatError, 4 for NumericError, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace dpruner
