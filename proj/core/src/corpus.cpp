#include "dpruner/corpus.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dpruner/container.hpp"
#include "dpruner/errors.hpp"
#include "dpruner/hash.hpp"
#include "dpruner/random.hpp"

namespace dpruner {

std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= kByteVocab) throw ValidationError("detokenize: id " + std::to_string(ids[i]) + " is not a byte");
    out[i] = static_cast<char>(ids[i]);
  }
  return out;
}

namespace {

double parse_fraction(std::string_view text, std::string_view whole) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || v < 0.0 || v > 1.0) {
    throw ValidationError("bad source region in '" + std::string(whole) + "'");
  }
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_fraction(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

SourceSpec SourceSpec::parse(std::string_view text) {
  SourceSpec s;
  const auto at = text.rfind('@');
  if (at == std::string_view::npos) {
    s.path = trim(text);
  } else {
    s.path = trim(text.substr(0, at));
    const auto region = text.substr(at + 1);
    const auto colon = region.find(':');
    if (colon == std::string_view::npos) throw ValidationError("bad source region in '" + std::string(text) + "'");
    s.begin = parse_fraction(region.substr(0, colon), text);
    s.end = parse_fraction(region.substr(colon + 1), text);
  }
  if (s.path.empty()) throw ValidationError("empty source path");
  if (!(s.begin < s.end)) throw ValidationError("empty source region in '" + std::string(text) + "'");
  return s;
}

std::string SourceSpec::to_string() const {
  if (begin == 0.0 && end == 1.0) return path.string();
  return path.string() + "@" + format_fraction(begin) + ":" + format_fraction(end);
}

std::vector<SourceSpec> parse_source_list(std::string_view comma_separated) {
  std::vector<SourceSpec> out;
  std::size_t start = 0;
  while (start <= comma_separated.size()) {
    auto comma = comma_separated.find(',', start);
    if (comma == std::string_view::npos) comma = comma_separated.size();
    const auto item = trim(comma_separated.substr(start, comma - start));
    if (!item.empty()) out.push_back(SourceSpec::parse(item));
    start = comma + 1;
  }
  return out;
}

std::vector<TokenStream> load_streams(std::span<const SourceSpec> sources) {
  std::vector<TokenStream> streams;
  for (const auto& src : sources) {
    if (!std::filesystem::is_regular_file(src.path)) {
      throw ValidationError("corpus source not found: " + src.path.string());
    }
    const auto bytes = read_file_bytes(src.path);
    Fnv1a h;
    h.update(bytes);
    const auto n = bytes.size();
    const auto b = static_cast<std::size_t>(std::floor(src.begin * static_cast<double>(n)));
    const auto e = static_cast<std::size_t>(std::floor(src.end * static_cast<double>(n)));
    TokenStream s{src, b, h.hex(), {}};
    s.tokens.reserve(e - b);
    for (std::size_t i = b; i < e; ++i) s.tokens.push_back(bytes[i]);
    streams.push_back(std::move(s));
  }
  return streams;
}

std::string Corpus::fingerprint() const {
  Fnv1a h;
  for (const auto& seq : sequences) {
    h.update_u64(seq.size());
    for (auto t : seq) h.update_u64(t);
  }
  return h.hex();
}

Corpus build_calibration(const CalibrationSpec& spec) {
  const auto streams = load_streams(spec.sources);
  return build_calibration(spec, streams);
}

Corpus build_calibration(const CalibrationSpec& spec, std::span<const TokenStream> streams) {
  if (spec.sample_count < 1) throw ValidationError("calibration sample_count must be at least 1");
  if (spec.sequence_length < 2) throw ValidationError("calibration sequence_length must be at least 2");
  if (streams.size() != spec.sources.size()) throw ValidationError("calibration streams do not match sources");

  std::vector<Window> slots;
  std::size_t available_tokens = 0;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const auto& tokens = streams[s].tokens;
    available_tokens += tokens.size();
    for (std::size_t off = 0; off + spec.sequence_length <= tokens.size(); off += spec.sequence_length) {
      slots.push_back(Window{s, streams[s].base_offset + off});
    }
  }
  if (slots.size() < spec.sample_count) {
    throw ValidationError("insufficient text for calibration set '" + spec.name + "': need " +
                          std::to_string(spec.sample_count) + " windows (" +
                          std::to_string(spec.sample_count * spec.sequence_length) + " tokens), have " +
                          std::to_string(slots.size()) + " windows (" + std::to_string(available_tokens) +
                          " tokens)");
  }

  Rng rng(spec.seed);
  shuffle(std::span(slots), rng);
  slots.resize(spec.sample_count);

  Corpus c;
  c.name = spec.name;
  c.spec = spec;
  for (const auto& st : streams) c.source_fingerprints.push_back(st.file_fingerprint);
  for (const auto& w : slots) {
    const auto& st = streams[w.source];
    const auto local = w.offset - st.base_offset;
    c.sequences.emplace_back(st.tokens.begin() + static_cast<std::ptrdiff_t>(local),
                             st.tokens.begin() + static_cast<std::ptrdiff_t>(local + spec.sequence_length));
  }
  c.windows = std::move(slots);
  return c;
}

void write_corpus_cache(const std::filesystem::path& path, const Corpus& corpus) {
  std::ostringstream out;
  out << "dpruner-corpus 1\n";
  out << "name " << corpus.spec.name << "\n";
  out << "sample_count " << corpus.spec.sample_count << "\n";
  out << "sequence_length " << corpus.spec.sequence_length << "\n";
  out << "seed " << corpus.spec.seed << "\n";
  out << "fingerprint " << corpus.fingerprint() << "\n";
  for (std::size_t i = 0; i < corpus.spec.sources.size(); ++i) {
    out << "source " << corpus.source_fingerprints[i] << " " << corpus.spec.sources[i].to_string() << "\n";
  }
  for (const auto& w : corpus.windows) out << "window " << w.source << " " << w.offset << "\n";
  const auto text = out.str();
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Corpus read_corpus_cache(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  if (!std::getline(in, line) || line != "dpruner-corpus 1") {
    throw FormatError(path.string() + " is not a corpus cache (version 1)");
  }
  CalibrationSpec spec;
  std::vector<std::string> fingerprints;
  std::vector<Window> windows;
  std::string expected_fp;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "name") {
      std::getline(fields >> std::ws, spec.name);
    } else if (key == "sample_count") {
      fields >> spec.sample_count;
    } else if (key == "sequence_length") {
      fields >> spec.sequence_length;
    } else if (key == "seed") {
      fields >> spec.seed;
    } else if (key == "fingerprint") {
      fields >> expected_fp;
    } else if (key == "source") {
      std::string fp, rest;
      fields >> fp;
      std::getline(fields >> std::ws, rest);
      fingerprints.push_back(fp);
      spec.sources.push_back(SourceSpec::parse(rest));
    } else if (key == "window") {
      Window w;
      fields >> w.source >> w.offset;
      windows.push_back(w);
    } else if (!key.empty()) {
      throw FormatError("unknown corpus cache entry '" + key + "'");
    }
    if (fields.fail()) throw FormatError("malformed corpus cache line '" + line + "'");
  }
  if (windows.size() != spec.sample_count) throw FormatError("corpus cache window count mismatch");

  const auto streams = load_streams(spec.sources);
  Corpus c;
  c.name = spec.name;
  c.spec = spec;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    if (streams[i].file_fingerprint != fingerprints[i]) {
      throw ValidationError("corpus source changed since the cache was written: " + spec.sources[i].path.string());
    }
    c.source_fingerprints.push_back(streams[i].file_fingerprint);
  }
  for (const auto& w : windows) {
    if (w.source >= streams.size()) throw FormatError("corpus cache window names unknown source");
    const auto& st = streams[w.source];
    if (w.offset < st.base_offset || w.offset - st.base_offset + spec.sequence_length > st.tokens.size()) {
      throw FormatError("corpus cache window lies outside its source region");
    }
    const auto local = w.offset - st.base_offset;
    c.sequences.emplace_back(st.tokens.begin() + static_cast<std::ptrdiff_t>(local),
                             st.tokens.begin() + static_cast<std::ptrdiff_t>(local + spec.sequence_length));
  }
  c.windows = std::move(windows);
  if (!expected_fp.empty() && c.fingerprint() != expected_fp) {
    throw ValidationError("corpus cache content fingerprint mismatch for " + path.string());
  }
  return c;
}

}  // namespace dpruner
