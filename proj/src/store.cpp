#include "bbgc/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <unordered_map>

#include <json.hpp>

#include "bbgc/rng.hpp"

namespace bbgc {

namespace {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <class T>
T get_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::size_t fixed_record_bytes(const StoreHeader& h) {
  return (static_cast<std::size_t>(h.latent_dim) + h.embed_dim) * sizeof(float) + sizeof(std::uint32_t);
}

void check_dims(const Sample& s, const StoreHeader& h) {
  if (s.latent.dim() != h.latent_dim || s.embedding.dim() != h.embed_dim) {
    throw Error(ErrorKind::DimensionMismatch, "sample dimensions (" + std::to_string(s.latent.dim()) + ", " +
                                                  std::to_string(s.embedding.dim()) + ") do not match store (" +
                                                  std::to_string(h.latent_dim) + ", " +
                                                  std::to_string(h.embed_dim) + ")");
  }
}

// Decodes one record starting at p (at least fixed_record_bytes available).
// Returns bytes consumed, or 0 if the variable part is incomplete.
std::size_t decode_record(const char* p, std::size_t available, const StoreHeader& h, EmbeddingCheck check,
                          Sample& out) {
  const std::size_t fixed = fixed_record_bytes(h);
  if (available < fixed) return 0;
  std::vector<double> latent(h.latent_dim);
  for (std::size_t i = 0; i < h.latent_dim; ++i) latent[i] = get_le<float>(p + 4 * i);
  const char* e = p + 4 * static_cast<std::size_t>(h.latent_dim);
  std::vector<double> emb;
  if (check == EmbeddingCheck::unit) {
    emb.resize(h.embed_dim);
    for (std::size_t i = 0; i < h.embed_dim; ++i) emb[i] = get_le<float>(e + 4 * i);
  }
  const std::uint32_t ref_len = get_le<std::uint32_t>(e + 4 * static_cast<std::size_t>(h.embed_dim));
  if (available < fixed + ref_len) return 0;
  out.latent = LatentCode(std::move(latent));
  out.embedding = check == EmbeddingCheck::unit ? EmbeddingVector::from_unit(std::move(emb), kStoredNormTolerance)
                                                : EmbeddingVector{};
  out.image_ref.assign(p + fixed, ref_len);
  return fixed + ref_len;
}

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

LatentCode::LatentCode(std::vector<double> values) : values_(std::move(values)) {
  for (double v : values_) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "latent code has a non-finite component");
  }
}

void encode_header(const StoreHeader& header, std::string& out) {
  out.append(kStoreMagic.data(), kStoreMagic.size());
  put_le(out, header.version);
  put_le(out, header.latent_dim);
  put_le(out, header.embed_dim);
  put_le(out, header.count);
  put_le(out, header.seed);
}

StoreHeader decode_header(std::string_view bytes) {
  if (bytes.size() < kStoreHeaderBytes) throw Error(ErrorKind::TruncatedStore, "header is shorter than 32 bytes");
  if (!std::equal(kStoreMagic.begin(), kStoreMagic.end(), bytes.begin())) {
    throw Error(ErrorKind::BadMagic, "expected magic \"BBGC\"");
  }
  StoreHeader h;
  h.version = get_le<std::uint32_t>(bytes.data() + 4);
  if (h.version != kStoreVersion) {
    throw Error(ErrorKind::VersionMismatch, "store version " + std::to_string(h.version) + ", expected " +
                                                std::to_string(kStoreVersion));
  }
  h.latent_dim = get_le<std::uint32_t>(bytes.data() + 8);
  h.embed_dim = get_le<std::uint32_t>(bytes.data() + 12);
  h.count = get_le<std::uint64_t>(bytes.data() + 16);
  h.seed = get_le<std::uint64_t>(bytes.data() + 24);
  return h;
}

void encode_record(const Sample& sample, const StoreHeader& header, std::string& out) {
  check_dims(sample, header);
  for (double v : sample.latent.values()) put_le(out, static_cast<float>(v));
  for (double v : sample.embedding.values()) put_le(out, static_cast<float>(v));
  put_le(out, static_cast<std::uint32_t>(sample.image_ref.size()));
  out.append(sample.image_ref);
}

void encode_latent_record(const LatentCode& latent, const StoreHeader& header, std::string& out) {
  if (latent.dim() != header.latent_dim) throw Error(ErrorKind::DimensionMismatch, "latent dimension mismatch");
  for (double v : latent.values()) put_le(out, static_cast<float>(v));
  for (std::uint32_t i = 0; i < header.embed_dim; ++i) put_le(out, 0.0f);
  put_le(out, std::uint32_t{0});
}

std::string encode_batch(const StoreHeader& header, std::span<const Sample> samples) {
  StoreHeader h = header;
  h.count = samples.size();
  std::string out;
  out.reserve(kStoreHeaderBytes + samples.size() * fixed_record_bytes(h));
  encode_header(h, out);
  for (const auto& s : samples) encode_record(s, h, out);
  return out;
}

std::string encode_latent_batch(const StoreHeader& header, std::span<const LatentCode> latents) {
  StoreHeader h = header;
  h.count = latents.size();
  std::string out;
  out.reserve(kStoreHeaderBytes + latents.size() * fixed_record_bytes(h));
  encode_header(h, out);
  for (const auto& z : latents) encode_latent_record(z, h, out);
  return out;
}

DecodedBatch decode_batch(std::string_view bytes, EmbeddingCheck check) {
  DecodedBatch batch;
  batch.header = decode_header(bytes);
  if (batch.header.count == kUnfinalizedCount) throw Error(ErrorKind::TruncatedStore, "batch count is unfinalized");
  std::size_t offset = kStoreHeaderBytes;
  batch.samples.reserve(batch.header.count);
  for (std::uint64_t i = 0; i < batch.header.count; ++i) {
    Sample s;
    const std::size_t used = decode_record(bytes.data() + offset, bytes.size() - offset, batch.header, check, s);
    if (used == 0) {
      throw Error(ErrorKind::TruncatedStore, "batch ends after " + std::to_string(i) + " of " +
                                                 std::to_string(batch.header.count) + " records");
    }
    offset += used;
    batch.samples.push_back(std::move(s));
  }
  if (offset != bytes.size()) throw Error(ErrorKind::IoError, "trailing bytes after the last record");
  return batch;
}

// ---------------------------------------------------------------------------

StoreWriter::StoreWriter(std::filesystem::path path, std::uint32_t latent_dim, std::uint32_t embed_dim,
                         std::uint64_t seed)
    : path_(std::move(path)) {
  if (latent_dim == 0 || embed_dim == 0) throw Error(ErrorKind::InvalidConfig, "store dimensions must be positive");
  partial_ = path_;
  partial_ += ".partial";
  header_.latent_dim = latent_dim;
  header_.embed_dim = embed_dim;
  header_.seed = seed;
  out_.open(partial_, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error(ErrorKind::IoError, "cannot open " + partial_.string() + " for writing");
  StoreHeader placeholder = header_;
  placeholder.count = kUnfinalizedCount;
  std::string bytes;
  encode_header(placeholder, bytes);
  out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  open_ = true;
}

StoreWriter::~StoreWriter() {
  // An abandoned writer keeps its records in the .partial file for recovery.
  if (open_) out_.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
}

void StoreWriter::append(const Sample& sample) {
  if (!open_) throw Error(ErrorKind::IoError, "store writer is closed");
  encode_record(sample, header_, buffer_);
  ++header_.count;
  if (buffer_.size() >= (1u << 20)) {
    out_.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    buffer_.clear();
  }
}

std::uint64_t StoreWriter::close() {
  if (!open_) return header_.count;
  open_ = false;
  out_.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
  buffer_.clear();
  out_.seekp(16);
  std::string count;
  put_le(count, header_.count);
  out_.write(count.data(), static_cast<std::streamsize>(count.size()));
  out_.flush();
  const bool ok = static_cast<bool>(out_);
  out_.close();
  if (!ok) throw Error(ErrorKind::IoError, "write to " + partial_.string() + " failed");
  std::error_code ec;
  std::filesystem::rename(partial_, path_, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename store into place: " + ec.message());
  return header_.count;
}

std::uint64_t write_store(const std::filesystem::path& path, const StoreHeader& fields,
                          std::span<const Sample> samples) {
  StoreWriter writer(path, fields.latent_dim, fields.embed_dim, fields.seed);
  for (const auto& s : samples) writer.append(s);
  return writer.close();
}

// ---------------------------------------------------------------------------

StoreReader::StoreReader(const std::filesystem::path& path, ReadMode mode) : path_(path), mode_(mode) {
  in_.open(path, std::ios::binary);
  if (!in_) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::string bytes(kStoreHeaderBytes, '\0');
  in_.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(in_.gcount()));
  header_ = decode_header(bytes);
  if (header_.latent_dim == 0 || header_.embed_dim == 0) {
    throw Error(ErrorKind::IoError, path.string() + ": store dimensions must be positive");
  }
  if (header_.count == kUnfinalizedCount && mode_ == ReadMode::strict) {
    throw Error(ErrorKind::TruncatedStore, path.string() + " was never finalized");
  }
}

bool StoreReader::fail_truncated(const std::string& what) {
  truncated_ = true;
  done_ = true;
  if (mode_ == ReadMode::strict) throw Error(ErrorKind::TruncatedStore, path_.string() + ": " + what);
  return false;
}

bool StoreReader::next(Sample& out) {
  if (done_) return false;
  if (header_.count != kUnfinalizedCount && read_ == header_.count) {
    done_ = true;
    if (in_.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::IoError, "trailing bytes in store");
    return false;
  }
  const std::size_t fixed = fixed_record_bytes(header_);
  std::string buf(fixed, '\0');
  in_.read(buf.data(), static_cast<std::streamsize>(fixed));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got == 0 && header_.count == kUnfinalizedCount) {
    return fail_truncated("store was never finalized");
  }
  if (got < fixed) {
    return fail_truncated("file ends inside record " + std::to_string(read_));
  }
  const std::uint32_t ref_len = get_le<std::uint32_t>(buf.data() + fixed - 4);
  if (ref_len > 0) {
    buf.resize(fixed + ref_len);
    in_.read(buf.data() + fixed, ref_len);
    if (static_cast<std::size_t>(in_.gcount()) < ref_len) {
      return fail_truncated("file ends inside record " + std::to_string(read_));
    }
  }
  decode_record(buf.data(), buf.size(), header_, EmbeddingCheck::unit, out);
  ++read_;
  return true;
}

StoreContents read_store(const std::filesystem::path& path, ReadMode mode) {
  StoreReader reader(path, mode);
  StoreContents contents;
  contents.header = reader.header();
  if (contents.header.count != kUnfinalizedCount) {
    contents.samples.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(contents.header.count, 1u << 24)));
  }
  Sample s;
  while (reader.next(s)) contents.samples.push_back(std::move(s));
  contents.truncated = reader.truncated();
  return contents;
}

// ---------------------------------------------------------------------------

TableFields TableFields::parse(std::string_view spec) {
  TableFields f{false, false, false};
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', pos), spec.size());
    const std::string_view item = spec.substr(pos, comma - pos);
    if (item == "latent") {
      f.latent = true;
    } else if (item == "embedding") {
      f.embedding = true;
    } else if (item == "image_ref") {
      f.image_ref = true;
    } else if (!item.empty()) {
      throw Error(ErrorKind::Usage, "unknown table field '" + std::string(item) + "'");
    }
    pos = comma + 1;
  }
  return f;
}

std::uint64_t export_table(const std::filesystem::path& store, const std::filesystem::path& out_path,
                           TableFormat format, TableFields fields) {
  StoreReader reader(store);
  const StoreHeader& h = reader.header();
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open " + out_path.string());

  if (format == TableFormat::csv) {
    std::string head = "index";
    if (fields.latent) {
      for (std::uint32_t i = 0; i < h.latent_dim; ++i) head += ",z" + std::to_string(i);
    }
    if (fields.embedding) {
      for (std::uint32_t i = 0; i < h.embed_dim; ++i) head += ",e" + std::to_string(i);
    }
    if (fields.image_ref) head += ",image_ref";
    out << head << "\r\n";
  }

  std::uint64_t rows = 0;
  Sample s;
  std::string line;
  while (reader.next(s)) {
    line.clear();
    if (format == TableFormat::csv) {
      line += std::to_string(rows);
      if (fields.latent) {
        for (double v : s.latent.values()) line += "," + fmt9(v);
      }
      if (fields.embedding) {
        for (double v : s.embedding.values()) line += "," + fmt9(v);
      }
      if (fields.image_ref) line += "," + csv_escape(s.image_ref);
      line += "\r\n";
    } else {
      line += "{\"index\":" + std::to_string(rows);
      auto array = [&](const char* key, std::span<const double> values) {
        line += ",\"";
        line += key;
        line += "\":[";
        for (std::size_t i = 0; i < values.size(); ++i) {
          if (i) line += ',';
          line += fmt9(values[i]);
        }
        line += ']';
      };
      if (fields.latent) array("latent", s.latent.values());
      if (fields.embedding) array("embedding", s.embedding.values());
      if (fields.image_ref) {
        line += ",\"image_ref\":" +
                nlohmann::json(s.image_ref).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
      }
      line += "}\n";
    }
    out << line;
    ++rows;
  }
  if (!out) throw Error(ErrorKind::IoError, "write to " + out_path.string() + " failed");
  return rows;
}

// ---------------------------------------------------------------------------

Collection::Collection(std::size_t latent_dim, std::size_t embed_dim) : latents_(latent_dim), embeddings_(embed_dim) {}

Collection Collection::from_samples(std::span<const Sample> samples) {
  if (samples.empty()) return Collection{};
  Collection c(samples.front().latent.dim(), samples.front().embedding.dim());
  c.latents_.reserve_rows(samples.size());
  c.embeddings_.reserve_rows(samples.size());
  for (const auto& s : samples) c.append(s);
  return c;
}

Collection Collection::load(const std::filesystem::path& path) {
  StoreReader reader(path);
  Collection c(reader.header().latent_dim, reader.header().embed_dim);
  c.latents_.reserve_rows(reader.header().count);
  c.embeddings_.reserve_rows(reader.header().count);
  Sample s;
  while (reader.next(s)) c.append(s);
  return c;
}

void Collection::append(const Sample& sample) {
  if (empty() && latents_.cols() == 0 && embeddings_.cols() == 0) {
    *this = Collection(sample.latent.dim(), sample.embedding.dim());
  }
  if (sample.latent.dim() != latent_dim() || sample.embedding.dim() != embed_dim()) {
    throw Error(ErrorKind::DimensionMismatch, "sample does not match collection dimensions");
  }
  std::vector<float> z(sample.latent.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(sample.latent[i]);
  latents_.append_row(std::span<const float>(z));
  embeddings_.append_row(sample.embedding.values());
  image_refs_.push_back(sample.image_ref);
}

LatentCode Collection::latent(std::size_t i) const {
  const auto row = latents_.row(i);
  return LatentCode(std::vector<double>(row.begin(), row.end()));
}

EmbeddingVector Collection::embedding(std::size_t i) const {
  const auto row = embeddings_.row(i);
  return EmbeddingVector::from_unit(std::vector<double>(row.begin(), row.end()), kStoredNormTolerance);
}

Sample Collection::sample(std::size_t i) const { return Sample{latent(i), embedding(i), image_refs_[i]}; }

Collection Collection::prefix(std::size_t n) const {
  n = std::min(n, size());
  Collection c(latent_dim(), embed_dim());
  c.latents_.reserve_rows(n);
  c.embeddings_.reserve_rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.latents_.append_row(latents_.row(i));
    c.embeddings_.append_row(embeddings_.row(i));
    c.image_refs_.push_back(image_refs_[i]);
  }
  return c;
}

Collection Collection::subset(std::span<const std::size_t> indices) const {
  Collection c(latent_dim(), embed_dim());
  c.latents_.reserve_rows(indices.size());
  c.embeddings_.reserve_rows(indices.size());
  for (std::size_t i : indices) {
    c.latents_.append_row(latents_.row(i));
    c.embeddings_.append_row(embeddings_.row(i));
    c.image_refs_.push_back(image_refs_[i]);
  }
  return c;
}

namespace {

std::uint64_t latent_key(std::span<const float> z) {
  std::uint64_t h = 0x84222325CBF29CE4ULL;
  for (float v : z) {
    const float canonical = v == 0.0f ? 0.0f : v;  // +0 and -0 compare equal
    h = hash_combine(h, std::bit_cast<std::uint32_t>(canonical));
  }
  return h;
}

}  // namespace

bool collections_disjoint(const Collection& a, const Collection& b) {
  if (a.empty() || b.empty()) return true;
  if (a.latent_dim() != b.latent_dim()) return true;
  const Collection& small = a.size() <= b.size() ? a : b;
  const Collection& large = a.size() <= b.size() ? b : a;
  std::unordered_multimap<std::uint64_t, std::size_t> index;
  index.reserve(small.size());
  for (std::size_t i = 0; i < small.size(); ++i) index.emplace(latent_key(small.latents().row(i)), i);
  for (std::size_t j = 0; j < large.size(); ++j) {
    const auto row = large.latents().row(j);
    const auto [lo, hi] = index.equal_range(latent_key(row));
    for (auto it = lo; it != hi; ++it) {
      const auto other = small.latents().row(it->second);
      if (std::equal(row.begin(), row.end(), other.begin())) return false;
    }
  }
  return true;
}

void require_disjoint(const Collection& anchors, const Collection& pool) {
  if (!collections_disjoint(anchors, pool)) {
    throw Error(ErrorKind::OverlappingCollections, "anchor and pool collections share latent codes");
  }
}

}  // namespace bbgc
