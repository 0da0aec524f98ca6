#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "bbgc/store.hpp"
#include "fixtures.hpp"

using namespace bbgc;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> random_samples(std::uint64_t seed, std::size_t n, std::size_t latent_dim, std::size_t embed_dim) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(fixture::random_sample(rng, latent_dim, embed_dim));
    if (i % 3 == 0) out.back().image_ref = "img/" + std::to_string(i) + ".png";
  }
  return out;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Usage;
}

}  // namespace

TEST(StoreCodec, HeaderRoundTrip) {
  StoreHeader h{kStoreVersion, 3, 17, 42, 0xDEADBEEFCAFEull};
  std::string bytes;
  encode_header(h, bytes);
  ASSERT_EQ(bytes.size(), kStoreHeaderBytes);
  EXPECT_EQ(std::memcmp(bytes.data(), "BBGC", 4), 0);
  EXPECT_EQ(decode_header(bytes), h);
}

TEST(StoreCodec, LittleEndianLayout) {
  StoreHeader h{kStoreVersion, 2, 3, 1, 7};
  std::string bytes;
  encode_header(h, bytes);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);   // version
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);   // latent_dim
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 3);  // embed_dim
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 1);  // count
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 7);  // seed
}

TEST(StoreCodec, RejectsBadMagicAndVersion) {
  std::string bytes;
  encode_header(StoreHeader{kStoreVersion, 2, 3, 0, 0}, bytes);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(kind_of([&] { (void)decode_header(bad); }), ErrorKind::BadMagic);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(kind_of([&] { (void)decode_header(bad); }), ErrorKind::VersionMismatch);
  EXPECT_EQ(kind_of([&] { (void)decode_header(bytes.substr(0, 20)); }), ErrorKind::TruncatedStore);
}

TEST(StoreCodec, BatchRoundTripUpToF32) {
  const auto samples = random_samples(5, 20, 3, 16);
  const StoreHeader h{kStoreVersion, 3, 16, samples.size(), 9};
  const auto decoded = decode_batch(encode_batch(h, samples), EmbeddingCheck::unit);
  ASSERT_EQ(decoded.samples.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(decoded.samples[i].latent, samples[i].latent);
    EXPECT_EQ(decoded.samples[i].image_ref, samples[i].image_ref);
    for (std::size_t k = 0; k < 16; ++k) {
      EXPECT_EQ(decoded.samples[i].embedding[k], static_cast<double>(static_cast<float>(samples[i].embedding[k])));
    }
  }
}

TEST(StoreCodec, LatentBatchCarriesNoEmbedding) {
  const auto samples = random_samples(6, 4, 2, 8);
  std::vector<LatentCode> latents;
  for (const auto& s : samples) latents.push_back(s.latent);
  const StoreHeader h{kStoreVersion, 2, 8, latents.size(), 0};
  const auto decoded = decode_batch(encode_latent_batch(h, latents), EmbeddingCheck::none);
  ASSERT_EQ(decoded.samples.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(decoded.samples[i].latent, latents[i]);
    EXPECT_EQ(decoded.samples[i].embedding.dim(), 0u);
  }
}

TEST(StoreCodec, ShortBatchIsTruncated) {
  const auto samples = random_samples(7, 3, 2, 8);
  const auto bytes = encode_batch(StoreHeader{kStoreVersion, 2, 8, 3, 0}, samples);
  EXPECT_EQ(kind_of([&] { (void)decode_batch(bytes.substr(0, bytes.size() - 5), EmbeddingCheck::unit); }),
            ErrorKind::TruncatedStore);
}

TEST(StoreFile, WriteReadRoundTrip) {
  fixture::TempDir dir("store");
  const auto samples = random_samples(8, 100, 4, 12);
  const auto path = dir / "s.bbgc";
  EXPECT_EQ(write_store(path, StoreHeader{kStoreVersion, 4, 12, 0, 77}, samples), 100u);
  EXPECT_FALSE(fs::exists(dir / "s.bbgc.partial"));
  const auto contents = read_store(path);
  EXPECT_EQ(contents.header.count, 100u);
  EXPECT_EQ(contents.header.seed, 77u);
  EXPECT_FALSE(contents.truncated);
  ASSERT_EQ(contents.samples.size(), 100u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(contents.samples[i].latent, samples[i].latent);
    EXPECT_EQ(contents.samples[i].image_ref, samples[i].image_ref);
  }

  // Second generation of the round trip is the identity.
  const auto again = dir / "t.bbgc";
  write_store(again, contents.header, contents.samples);
  EXPECT_EQ(fixture::slurp(path), fixture::slurp(again));
}

TEST(StoreFile, WriterStagesUnderPartialName) {
  fixture::TempDir dir("partial");
  const auto path = dir / "s.bbgc";
  const auto samples = random_samples(9, 5, 2, 4);
  StoreWriter w(path, 2, 4, 1);
  for (const auto& s : samples) w.append(s);
  EXPECT_FALSE(fs::exists(path));
  EXPECT_TRUE(fs::exists(dir / "s.bbgc.partial"));
  EXPECT_EQ(w.close(), 5u);
  EXPECT_TRUE(fs::exists(path));
  EXPECT_FALSE(fs::exists(dir / "s.bbgc.partial"));
}

TEST(StoreFile, AbandonedWriterLeavesOnlyPartial) {
  fixture::TempDir dir("abandon");
  const auto path = dir / "s.bbgc";
  const auto samples = random_samples(10, 6, 2, 4);
  {
    StoreWriter w(path, 2, 4, 1);
    for (const auto& s : samples) w.append(s);
  }
  EXPECT_FALSE(fs::exists(path));
  StoreReader reader(dir / "s.bbgc.partial", ReadMode::recover);
  Sample s;
  std::size_t n = 0;
  while (reader.next(s)) ++n;
  EXPECT_EQ(n, 6u);
}

TEST(StoreFile, DimensionMismatchOnAppend) {
  fixture::TempDir dir("dims");
  std::mt19937_64 rng(1);
  StoreWriter w(dir / "s.bbgc", 2, 4, 0);
  EXPECT_EQ(kind_of([&] { w.append(fixture::random_sample(rng, 3, 4)); }), ErrorKind::DimensionMismatch);
}

TEST(StoreFile, TruncationIsDetectedAndRecoverable) {
  fixture::TempDir dir("trunc");
  const auto samples = random_samples(10, 10, 2, 8);
  const auto path = dir / "s.bbgc";
  write_store(path, StoreHeader{kStoreVersion, 2, 8, 0, 0}, samples);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 3);

  EXPECT_EQ(kind_of([&] { (void)read_store(path); }), ErrorKind::TruncatedStore);
  const auto recovered = read_store(path, ReadMode::recover);
  EXPECT_TRUE(recovered.truncated);
  ASSERT_EQ(recovered.samples.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(recovered.samples[i].latent, samples[i].latent);
}

TEST(StoreFile, UnfinalizedPartialIsRecoverable) {
  fixture::TempDir dir("unfinal");
  const auto samples = random_samples(11, 6, 2, 8);
  const auto path = dir / "s.bbgc";
  write_store(path, StoreHeader{kStoreVersion, 2, 8, 0, 0}, samples);
  // A writer that died before close leaves the sentinel count in place.
  std::string bytes = fixture::slurp(path);
  for (int i = 0; i < 8; ++i) bytes[16 + i] = static_cast<char>(0xFF);
  const auto crashed = dir / "crashed.bbgc";
  std::ofstream(crashed, std::ios::binary) << bytes;

  EXPECT_EQ(kind_of([&] { (void)read_store(crashed); }), ErrorKind::TruncatedStore);
  const auto recovered = read_store(crashed, ReadMode::recover);
  EXPECT_TRUE(recovered.truncated);
  EXPECT_EQ(recovered.samples.size(), 6u);
}

TEST(StoreFile, BadMagicOnDisk) {
  fixture::TempDir dir("magic");
  const auto path = dir / "junk.bbgc";
  std::ofstream(path, std::ios::binary) << std::string(64, 'x');
  EXPECT_EQ(kind_of([&] { (void)read_store(path); }), ErrorKind::BadMagic);
}

TEST(StoreExport, CsvAndJsonLines) {
  fixture::TempDir dir("export");
  Sample s;
  s.latent = LatentCode({0.5, -1.25});
  s.embedding = normalize(std::vector<double>{0.6, 0.8});
  s.image_ref = "a,b";
  const auto path = dir / "s.bbgc";
  write_store(path, StoreHeader{kStoreVersion, 2, 2, 0, 0}, std::span(&s, 1));

  const auto csv = dir / "s.csv";
  EXPECT_EQ(export_table(path, csv, TableFormat::csv, TableFields::parse("latent,embedding,image_ref")), 1u);
  EXPECT_EQ(fixture::slurp(csv), "index,z0,z1,e0,e1,image_ref\r\n0,0.5,-1.25,0.600000024,0.800000012,\"a,b\"\r\n");

  const auto jsonl = dir / "s.jsonl";
  export_table(path, jsonl, TableFormat::json_lines, TableFields::parse("latent"));
  EXPECT_EQ(fixture::slurp(jsonl), "{\"index\":0,\"latent\":[0.5,-1.25]}\n");

  EXPECT_EQ(kind_of([] { (void)TableFields::parse("latent,colour"); }), ErrorKind::Usage);
}

TEST(Collection, LoadSubsetAndDisjointness) {
  fixture::TempDir dir("coll");
  const auto samples = random_samples(12, 30, 2, 6);
  const auto path = dir / "s.bbgc";
  write_store(path, StoreHeader{kStoreVersion, 2, 6, 0, 0}, samples);
  const auto all = Collection::load(path);
  ASSERT_EQ(all.size(), 30u);
  EXPECT_EQ(all.latent(4), samples[4].latent);

  const auto head = all.prefix(10);
  std::vector<std::size_t> tail_idx;
  for (std::size_t i = 10; i < 30; ++i) tail_idx.push_back(i);
  const auto tail = all.subset(tail_idx);
  EXPECT_EQ(tail.size(), 20u);
  EXPECT_EQ(tail.latent(0), all.latent(10));
  EXPECT_TRUE(collections_disjoint(head, tail));
  EXPECT_FALSE(collections_disjoint(head, all));
  EXPECT_EQ(kind_of([&] { require_disjoint(all, all); }), ErrorKind::OverlappingCollections);
}
