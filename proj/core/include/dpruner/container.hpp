#pragma once

// Shared on-disk container for checkpoints, score files and masks.
//
//   bytes 0..3   magic "DPRN"
//   byte  4      format version (kFormatVersion)
//   byte  5      artifact kind ('C' checkpoint, 'S' scores, 'M' mask)
//   bytes 6..7   reserved, zero
//   bytes 8..15  header length H, little-endian u64
//   H bytes      UTF-8 header text:
//                  [meta]
//                  key=value            (one per line, keys sorted)
//                  [manifest]
//                  name dtype shape offset nbytes
//   data         blocks; offsets in the manifest are relative to the data start
//
// dtype "f64": raw little-endian IEEE-754 doubles, row-major.
// dtype "bits": rank-2, each row packed into ceil(cols/8) bytes, most
// significant bit = lowest column index, trailing pad bits zero.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dpruner/tensor.hpp"

namespace dpruner {

inline constexpr std::uint8_t kFormatVersion = 1;

enum class ArtifactKind : std::uint8_t { checkpoint = 'C', scores = 'S', mask = 'M' };

enum class BlockType { f64, bits };

struct Block {
  std::string name;
  BlockType type = BlockType::f64;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

using Metadata = std::map<std::string, std::string>;

struct Container {
  ArtifactKind kind = ArtifactKind::checkpoint;
  Metadata metadata;
  std::vector<Block> blocks;

  const Block& block(const std::string& name) const;
  const std::string& meta(const std::string& key) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
/// Throws FormatError on malformed content, ValidationError if the file is
/// missing or holds a different artifact kind.
Container read_container(const std::filesystem::path& path, ArtifactKind expected);

Block tensor_block(std::string name, const Tensor& t);
Tensor block_tensor(const Block& b);

/// `keep` holds one 0/1 byte per element of the rank-2 `shape`.
Block bits_block(std::string name, const Shape& shape, const std::vector<std::uint8_t>& keep);
std::vector<std::uint8_t> block_bits(const Block& b);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace dpruner
