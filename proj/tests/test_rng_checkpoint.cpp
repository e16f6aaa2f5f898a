#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "fmtl/checkpoint.hpp"
#include "fmtl/rng.hpp"

using namespace fmtl;

TEST(Rng, SameSeedAndStreamReproduceSequence) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  RngStream c(42, 7), d(42, 7);
  for (int i = 0; i < 101; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(Rng, PinnedFirstDraws) {
  // golden values of the pinned counter-based generator
  RngStream r(0, 0);
  const std::uint64_t key = mix64(0 ^ mix64(0));
  EXPECT_EQ(r.next_u64(), mix64(key));
  EXPECT_EQ(r.next_u64(), mix64(key + 0x9e3779b97f4a7c15ULL));
  EXPECT_EQ(mix64(0), 0xe220a8397b1dcdafULL);
}

TEST(Rng, DistinctStreamsDiffer) {
  std::set<std::uint64_t> firsts;
  for (int client = -1; client < 50; ++client) {
    firsts.insert(RngStream::for_purpose(1, client, "local-train").next_u64());
  }
  EXPECT_EQ(firsts.size(), 51u);
  EXPECT_NE(RngStream::for_purpose(1, 0, "a").next_u64(), RngStream::for_purpose(1, 0, "b").next_u64());
  EXPECT_NE(RngStream::for_purpose(1, 0, "a").next_u64(), RngStream::for_purpose(2, 0, "a").next_u64());
}

TEST(Rng, ForkDoesNotAdvanceParent) {
  RngStream a(5, 9), b(5, 9);
  (void)a.fork("child").next_u64();
  (void)a.fork(3).next_u64();
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(a.fork(0).next_u64(), a.fork(1).next_u64());
}

TEST(Rng, UniformMomentsAndRange) {
  RngStream r(3, 4);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
  }
  EXPECT_NEAR(s / n, 0.5, 0.005);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 0.002);
}

TEST(Rng, NormalMoments) {
  RngStream r(8, 1);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformIntCoversRangeAndShuffleIsPermutation) {
  RngStream r(1, 1);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[r.uniform_int(7)];
  for (int h : hits) EXPECT_GT(h, 800);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(std::span<int>(v));
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(v, sorted);
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  SegmentedParams p(Layout::from_lengths({{"encoder", 3}, {"decoder:depth_like", 2}}),
                    {1.5, -0.0, 1e-310, 3.141592653589793, -2e300});
  const auto bytes = encode_checkpoint(p, {{"note", "x"}});
  EXPECT_EQ(bytes.substr(0, 8), "FMTLCKPT");
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.params, p);
  EXPECT_TRUE(back.params.layout().compatible_with(p.layout()));
  EXPECT_EQ(back.meta["note"], "x");
  EXPECT_TRUE(std::signbit(back.params.values()[1]));
}

TEST(Checkpoint, ValuesAreLittleEndianFloat64AfterHeader) {
  SegmentedParams p(Layout::from_lengths({{"encoder", 1}}), {1.0});
  const auto bytes = encode_checkpoint(p);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const std::string tail = bytes.substr(16 + hlen);
  ASSERT_EQ(tail.size(), 8u);
  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(static_cast<unsigned char>(tail[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(tail[6]), 0xF0);
  EXPECT_EQ(static_cast<unsigned char>(tail[0]), 0x00);
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  EXPECT_EQ(header["count"], 1);
  EXPECT_EQ(header["segments"][0]["name"], "encoder");
}

TEST(Checkpoint, CorruptInputRejected) {
  SegmentedParams p(Layout::from_lengths({{"encoder", 2}}), {1.0, 2.0});
  auto bytes = encode_checkpoint(p);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), IoError);
  EXPECT_THROW(decode_checkpoint("short"), IoError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "fmtl_ckpt_test";
  std::filesystem::create_directories(dir);
  SegmentedParams p(Layout::from_lengths({{"encoder", 2}, {"decoder:shared", 1}}), {0.25, -4.0, 9.0});
  save_checkpoint(dir / "a.fmtlckpt", p);
  EXPECT_EQ(load_checkpoint(dir / "a.fmtlckpt").params, p);
  EXPECT_THROW(load_checkpoint(dir / "missing.fmtlckpt"), IoError);
  std::filesystem::remove_all(dir);
}
