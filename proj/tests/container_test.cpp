#include <gtest/gtest.h>

#include "dpruner/container.hpp"
#include "dpruner/errors.hpp"
#include "test_support.hpp"

namespace dpruner {
namespace {

Container sample_container() {
  Container c;
  c.kind = ArtifactKind::scores;
  c.metadata = {{"b", "two"}, {"a", "one = 1"}};
  c.blocks.push_back(tensor_block("w", Tensor::matrix(2, 3, {1, -2, 0.5, -0.0, 1e-300, 7})));
  c.blocks.push_back(bits_block("m", {2, 9}, {1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1}));
  return c;
}

TEST(Container, RoundTripIsBitExact) {
  const auto c = sample_container();
  const auto bytes = encode_container(c);
  const auto back = decode_container(bytes);
  EXPECT_EQ(back.kind, c.kind);
  EXPECT_EQ(back.metadata, c.metadata);
  ASSERT_EQ(back.blocks.size(), 2u);
  EXPECT_TRUE(block_tensor(back.block("w")).bit_equal(block_tensor(c.block("w"))));
  EXPECT_EQ(block_bits(back.block("m")), block_bits(c.block("m")));
  EXPECT_EQ(encode_container(back), bytes);
}

TEST(Container, PreambleLayout) {
  const auto bytes = encode_container(sample_container());
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DPRN");
  EXPECT_EQ(bytes[4], kFormatVersion);
  EXPECT_EQ(bytes[5], 'S');
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 0);
}

TEST(Container, BitsPackMostSignificantBitFirst) {
  const auto b = bits_block("m", {1, 10}, {1, 0, 0, 0, 0, 0, 0, 1, 0, 1});
  ASSERT_EQ(b.bytes.size(), 2u);
  EXPECT_EQ(b.bytes[0], 0x81);
  EXPECT_EQ(b.bytes[1], 0x40);
}

TEST(Container, RejectsBadMagic) {
  auto bytes = encode_container(sample_container());
  bytes[0] = 'X';
  EXPECT_THROW(decode_container(bytes), FormatError);
}

TEST(Container, RejectsUnknownVersion) {
  auto bytes = encode_container(sample_container());
  bytes[4] = kFormatVersion + 1;
  EXPECT_THROW(decode_container(bytes), FormatError);
}

TEST(Container, RejectsUnknownKind) {
  auto bytes = encode_container(sample_container());
  bytes[5] = 'Z';
  EXPECT_THROW(decode_container(bytes), FormatError);
}

TEST(Container, RejectsTruncation) {
  auto bytes = encode_container(sample_container());
  for (std::size_t keep : {std::size_t{3}, std::size_t{15}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    EXPECT_THROW(decode_container(cut), FormatError) << keep;
  }
}

TEST(Container, MissingBlockOrKey) {
  const auto c = sample_container();
  EXPECT_THROW(c.block("nope"), FormatError);
  EXPECT_THROW(c.meta("nope"), FormatError);
}

TEST(Container, RejectsUnserializableMetadata) {
  auto c = sample_container();
  c.metadata["bad"] = "line\nbreak";
  EXPECT_THROW(encode_container(c), ValidationError);
}

TEST(Container, FileReadChecksKind) {
  testing::TempDir dir;
  const auto path = dir / "sub/a.scores";
  write_container(path, sample_container());
  EXPECT_NO_THROW(read_container(path, ArtifactKind::scores));
  EXPECT_THROW(read_container(path, ArtifactKind::mask), ValidationError);
  EXPECT_THROW(read_container(dir / "missing", ArtifactKind::scores), ValidationError);
}

TEST(Container, FileFingerprintTracksContent) {
  testing::TempDir dir;
  write_file_bytes(dir / "a", {1, 2, 3});
  write_file_bytes(dir / "b", {1, 2, 3});
  write_file_bytes(dir / "c", {1, 2, 4});
  EXPECT_EQ(file_fingerprint(dir / "a"), file_fingerprint(dir / "b"));
  EXPECT_NE(file_fingerprint(dir / "a"), file_fingerprint(dir / "c"));
  EXPECT_EQ(file_fingerprint(dir / "a").size(), 16u);
}

}  // namespace
}  // namespace dpruner
