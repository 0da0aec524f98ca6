#pragma once

// Append-only binary sample store.
//
// Layout (all integers and floats little-endian):
//
//   header  magic "BBGC" | version u32 | latent_dim u32 | embed_dim u32 |
//           count u64 | seed u64                                 (32 bytes)
//   record  latent f32[L] | embedding f32[D] | image_ref_len u32 |
//           image_ref u8[image_ref_len]
//
// A writer streams records to "<path>.partial" with count = 2^64-1 and only
// on close patches the count and renames the file into place, so a reader
// never sees a half-written store under the final name. A writer destroyed
// without close() leaves the .partial file behind. The same header and
// record framing carries batches over the subprocess and remote adapters.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bbgc/embedding.hpp"
#include "bbgc/sample.hpp"

namespace bbgc {

inline constexpr std::array<char, 4> kStoreMagic = {'B', 'B', 'G', 'C'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::uint64_t kUnfinalizedCount = ~std::uint64_t{0};
inline constexpr std::size_t kStoreHeaderBytes = 32;

struct StoreHeader {
  std::uint32_t version = kStoreVersion;
  std::uint32_t latent_dim = 0;
  std::uint32_t embed_dim = 0;
  std::uint64_t count = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const StoreHeader&, const StoreHeader&) = default;
};

// Stored embeddings are f32; on decode they must be unit norm within this.
inline constexpr double kStoredNormTolerance = 1e-4;

enum class EmbeddingCheck {
  unit,  // decoded embeddings must be unit norm (stores, adapter responses)
  none,  // embeddings are ignored and left empty (adapter requests)
};

void encode_header(const StoreHeader& header, std::string& out);
StoreHeader decode_header(std::string_view bytes);

void encode_record(const Sample& sample, const StoreHeader& header, std::string& out);
// Request record: the latent with a zero embedding and no image reference.
void encode_latent_record(const LatentCode& latent, const StoreHeader& header, std::string& out);

std::string encode_batch(const StoreHeader& header, std::span<const Sample> samples);
std::string encode_latent_batch(const StoreHeader& header, std::span<const LatentCode> latents);

struct DecodedBatch {
  StoreHeader header;
  std::vector<Sample> samples;
};

// Decodes a complete header + `count` records buffer.
DecodedBatch decode_batch(std::string_view bytes, EmbeddingCheck check);

class StoreWriter {
 public:
  StoreWriter(std::filesystem::path path, std::uint32_t latent_dim, std::uint32_t embed_dim, std::uint64_t seed);
  ~StoreWriter();
  StoreWriter(const StoreWriter&) = delete;
  StoreWriter& operator=(const StoreWriter&) = delete;

  void append(const Sample& sample);

  // Patches the header count and renames the file into place.
  std::uint64_t close();

  std::uint64_t count() const noexcept { return header_.count; }

 private:
  std::filesystem::path path_;
  std::filesystem::path partial_;
  StoreHeader header_;
  std::ofstream out_;
  std::string buffer_;
  bool open_ = false;
};

std::uint64_t write_store(const std::filesystem::path& path, const StoreHeader& fields,
                          std::span<const Sample> samples);

enum class ReadMode {
  strict,   // TruncatedStore is thrown when the file ends early
  recover,  // reading stops at the last complete record; truncated() is set
};

class StoreReader {
 public:
  explicit StoreReader(const std::filesystem::path& path, ReadMode mode = ReadMode::strict);

  const StoreHeader& header() const noexcept { return header_; }
  bool next(Sample& out);
  bool truncated() const noexcept { return truncated_; }
  std::uint64_t records_read() const noexcept { return read_; }

 private:
  bool fail_truncated(const std::string& what);

  std::filesystem::path path_;
  std::ifstream in_;
  StoreHeader header_;
  ReadMode mode_;
  std::uint64_t read_ = 0;
  bool truncated_ = false;
  bool done_ = false;
  std::vector<float> scratch_;
};

struct StoreContents {
  StoreHeader header;
  std::vector<Sample> samples;
  bool truncated = false;
};

StoreContents read_store(const std::filesystem::path& path, ReadMode mode = ReadMode::strict);

enum class TableFormat { csv, json_lines };

struct TableFields {
  bool latent = true;
  bool embedding = true;
  bool image_ref = false;

  // Comma-separated subset of {latent, embedding, image_ref}.
  static TableFields parse(std::string_view spec);
};

// Writes one row per record, floats at 9 significant digits. Returns rows.
std::uint64_t export_table(const std::filesystem::path& store, const std::filesystem::path& out, TableFormat format,
                           TableFields fields);

// In-memory collection of samples (the A and C of the diagnosis). Latents are
// kept at storage precision; embeddings are widened to f64 once on load.
class Collection {
 public:
  Collection() = default;
  Collection(std::size_t latent_dim, std::size_t embed_dim);

  static Collection from_samples(std::span<const Sample> samples);
  static Collection load(const std::filesystem::path& path);

  void append(const Sample& sample);

  std::size_t size() const noexcept { return embeddings_.rows(); }
  bool empty() const noexcept { return size() == 0; }
  std::size_t latent_dim() const noexcept { return latents_.cols(); }
  std::size_t embed_dim() const noexcept { return embeddings_.cols(); }

  const EmbeddingMatrix& embeddings() const noexcept { return embeddings_; }
  const RowMatrix<float>& latents() const noexcept { return latents_; }

  LatentCode latent(std::size_t i) const;
  EmbeddingVector embedding(std::size_t i) const;
  const std::string& image_ref(std::size_t i) const { return image_refs_[i]; }
  Sample sample(std::size_t i) const;

  Collection prefix(std::size_t n) const;
  Collection subset(std::span<const std::size_t> indices) const;

 private:
  RowMatrix<float> latents_;
  EmbeddingMatrix embeddings_;
  std::vector<std::string> image_refs_;
};

// Exact latent equality at storage precision.
bool collections_disjoint(const Collection& a, const Collection& b);

// Throws OverlappingCollections if any latent appears in both.
void require_disjoint(const Collection& anchors, const Collection& pool);

}  // namespace bbgc
