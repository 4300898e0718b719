#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpruner/tape.hpp"

namespace dpruner {

inline constexpr std::size_t kByteVocab = 256;

std::vector<TokenId> tokenize(std::string_view text);
std::string detokenize(std::span<const TokenId> ids);

/// A text file restricted to the byte range [begin, end) of its token stream,
/// with the range given as fractions of the file length. Written as
/// `path` or `path@begin:end` in configs.
struct SourceSpec {
  std::filesystem::path path;
  double begin = 0.0;
  double end = 1.0;

  static SourceSpec parse(std::string_view text);
  std::string to_string() const;
};

std::vector<SourceSpec> parse_source_list(std::string_view comma_separated);

struct TokenStream {
  SourceSpec source;
  std::size_t base_offset = 0;  // position of tokens[0] within the whole file
  std::string file_fingerprint;
  std::vector<TokenId> tokens;
};

/// Reads and tokenizes the region of each source. Missing files raise a
/// ValidationError naming the path.
std::vector<TokenStream> load_streams(std::span<const SourceSpec> sources);

struct CalibrationSpec {
  std::string name;
  std::vector<SourceSpec> sources;
  std::size_t sample_count = 1;
  std::size_t sequence_length = 64;
  std::uint64_t seed = 0;
};

struct Window {
  std::size_t source = 0;  // index into CalibrationSpec::sources
  std::size_t offset = 0;  // token offset within the whole file
};

struct Corpus {
  std::string name;
  std::vector<std::vector<TokenId>> sequences;
  // Provenance, sufficient to rebuild the corpus.
  CalibrationSpec spec;
  std::vector<std::string> source_fingerprints;
  std::vector<Window> windows;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }
  /// FNV-1a over the token content, in sequence order.
  std::string fingerprint() const;
};

/// Samples `sample_count` non-overlapping windows of `sequence_length`
/// tokens. Candidate windows are the aligned slots of each source region;
/// they are shuffled with `seed` and the first `sample_count` are kept.
Corpus build_calibration(const CalibrationSpec& spec);

/// Same, over streams that are already loaded.
Corpus build_calibration(const CalibrationSpec& spec, std::span<const TokenStream> streams);

/// Corpus cache: a text file listing the spec, source fingerprints and window
/// offsets. Loading re-reads the sources and rejects changed files.
void write_corpus_cache(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus_cache(const std::filesystem::path& path);

}  // namespace dpruner
