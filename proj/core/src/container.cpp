#include "dpruner/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dpruner/errors.hpp"
#include "dpruner/hash.hpp"

namespace dpruner {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'R', 'N'};
constexpr std::size_t kPreambleSize = 16;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

const char* type_name(BlockType t) { return t == BlockType::f64 ? "f64" : "bits"; }

std::size_t expected_bytes(BlockType type, const Shape& shape) {
  if (type == BlockType::f64) return shape_size(shape) * 8;
  if (shape.size() != 2) throw FormatError("bits block must be rank 2, got " + shape_string(shape));
  return shape[0] * ((shape[1] + 7) / 8);
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad shape '" + text + "' in manifest");
    }
    shape.push_back(std::stoull(part));
    if (shape.back() == 0) throw FormatError("zero dimension in manifest shape '" + text + "'");
  }
  if (shape.empty()) throw FormatError("empty shape in manifest");
  return shape;
}

std::string format_shape(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

bool valid_kind(std::uint8_t k) { return k == 'C' || k == 'S' || k == 'M'; }

}  // namespace

const Block& Container::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b;
  }
  throw FormatError("artifact has no block named '" + name + "'");
}

const std::string& Container::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw FormatError("artifact metadata lacks key '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  std::string header = "[meta]\n";
  for (const auto& [k, v] : c.metadata) {
    if (k.empty() || k.find_first_of("=\n ") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValidationError("metadata entry '" + k + "' cannot be serialized");
    }
    header += k + "=" + v + "\n";
  }
  header += "[manifest]\n";
  std::uint64_t offset = 0;
  for (const auto& b : c.blocks) {
    if (b.name.empty() || b.name.find_first_of(" \n") != std::string::npos) {
      throw ValidationError("block name '" + b.name + "' cannot be serialized");
    }
    if (b.bytes.size() != expected_bytes(b.type, b.shape)) {
      throw ValidationError("block '" + b.name + "' payload size does not match its shape");
    }
    header += b.name + " " + type_name(b.type) + " " + format_shape(b.shape) + " " + std::to_string(offset) + " " +
              std::to_string(b.bytes.size()) + "\n";
    offset += b.bytes.size();
  }

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + header.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(c.kind));
  out.push_back(0);
  out.push_back(0);
  put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& b : c.blocks) out.insert(out.end(), b.bytes.begin(), b.bytes.end());
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kPreambleSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a dpruner artifact (bad magic)");
  }
  if (bytes[4] != kFormatVersion) {
    throw FormatError("unsupported artifact format version " + std::to_string(bytes[4]));
  }
  if (!valid_kind(bytes[5])) throw FormatError("unknown artifact kind byte " + std::to_string(bytes[5]));
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - kPreambleSize) throw FormatError("artifact header is truncated");

  Container c;
  c.kind = static_cast<ArtifactKind>(bytes[5]);
  const std::string header(reinterpret_cast<const char*>(bytes.data() + kPreambleSize), header_len);
  const std::size_t data_start = kPreambleSize + header_len;
  const std::size_t data_len = bytes.size() - data_start;

  std::istringstream in(header);
  std::string line;
  enum { none, meta, manifest } section = none;
  while (std::getline(in, line)) {
    if (line == "[meta]") {
      section = meta;
    } else if (line == "[manifest]") {
      section = manifest;
    } else if (section == meta) {
      const auto eq = line.find('=');
      if (eq == std::string::npos || eq == 0) throw FormatError("bad metadata line '" + line + "'");
      c.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    } else if (section == manifest) {
      std::istringstream fields(line);
      std::string name, type, shape;
      std::uint64_t offset = 0, nbytes = 0;
      if (!(fields >> name >> type >> shape >> offset >> nbytes)) {
        throw FormatError("bad manifest line '" + line + "'");
      }
      Block b;
      b.name = name;
      if (type == "f64") {
        b.type = BlockType::f64;
      } else if (type == "bits") {
        b.type = BlockType::bits;
      } else {
        throw FormatError("unknown block type '" + type + "'");
      }
      b.shape = parse_shape(shape);
      if (nbytes != expected_bytes(b.type, b.shape)) throw FormatError("block '" + name + "' has inconsistent size");
      if (offset > data_len || nbytes > data_len - offset) throw FormatError("block '" + name + "' is truncated");
      const auto* begin = bytes.data() + data_start + offset;
      b.bytes.assign(begin, begin + nbytes);
      c.blocks.push_back(std::move(b));
    } else {
      throw FormatError("artifact header does not start with [meta]");
    }
  }
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

std::string file_fingerprint(const std::filesystem::path& path) {
  Fnv1a h;
  h.update(read_file_bytes(path));
  return h.hex();
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_bytes(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path, ArtifactKind expected) {
  if (!std::filesystem::exists(path)) throw ValidationError("artifact not found: " + path.string());
  Container c = decode_container(read_file_bytes(path));
  if (c.kind != expected) {
    throw ValidationError(path.string() + " holds artifact kind '" + std::string(1, static_cast<char>(c.kind)) +
                          "', expected '" + std::string(1, static_cast<char>(expected)) + "'");
  }
  return c;
}

Block tensor_block(std::string name, const Tensor& t) {
  Block b{std::move(name), BlockType::f64, t.shape(), {}};
  b.bytes.reserve(t.size() * 8);
  for (double v : t.data()) put_u64(b.bytes, std::bit_cast<std::uint64_t>(v));
  return b;
}

Tensor block_tensor(const Block& b) {
  if (b.type != BlockType::f64) throw FormatError("block '" + b.name + "' is not f64");
  std::vector<double> data(shape_size(b.shape));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<double>(get_u64(b.bytes.data() + 8 * i));
  return Tensor(b.shape, std::move(data));
}

Block bits_block(std::string name, const Shape& shape, const std::vector<std::uint8_t>& keep) {
  if (shape.size() != 2 || keep.size() != shape_size(shape)) {
    throw ValidationError("bits block '" + name + "' needs a rank-2 shape matching its values");
  }
  const std::size_t rows = shape[0], cols = shape[1], stride = (cols + 7) / 8;
  Block b{std::move(name), BlockType::bits, shape, std::vector<std::uint8_t>(rows * stride, 0)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep[r * cols + c]) b.bytes[r * stride + c / 8] |= static_cast<std::uint8_t>(0x80u >> (c % 8));
    }
  }
  return b;
}

std::vector<std::uint8_t> block_bits(const Block& b) {
  if (b.type != BlockType::bits) throw FormatError("block '" + b.name + "' is not bit-packed");
  const std::size_t rows = b.shape[0], cols = b.shape[1], stride = (cols + 7) / 8;
  std::vector<std::uint8_t> keep(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) keep[r * cols + c] = (b.bytes[r * stride + c / 8] >> (7 - c % 8)) & 1u;
  }
  return keep;
}

}  // namespace dpruner
