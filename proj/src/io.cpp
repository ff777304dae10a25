#include "refusalguard/io.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>
#include <zlib.h>

namespace rg {

namespace fs = std::filesystem;

Bytes read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) { write_bytes(path, Bytes(text.begin(), text.end())); }

std::string read_text(const fs::path& path) {
  const Bytes b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(n)));
}

namespace {

void put_u32(Bytes& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(Bytes& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(Bytes& b, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(b, u);
}

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw Error(ErrorCode::TruncatedFile, "file ends before its declared contents");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    const std::uint32_t u = u32();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  double f64() {
    const std::uint64_t u = u64();
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  const unsigned char* here() const { return data_ + pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

// Checks magic and version, returns a reader positioned after them.
Reader open_container(const Bytes& bytes, const char* magic) {
  if (bytes.size() < 4) throw Error(ErrorCode::TruncatedFile, "file is shorter than its magic");
  if (std::memcmp(bytes.data(), magic, 4) != 0)
    throw Error(ErrorCode::BadMagic, std::string("expected magic ") + magic);
  Reader r(bytes.data(), bytes.size());
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw Error(ErrorCode::UnsupportedVersion, "unsupported format version " + std::to_string(version));
  return r;
}

// Reads the payload of `n` bytes and the trailing CRC, verifying both.
Reader payload(Reader& r, std::size_t n) {
  r.need(n);
  const unsigned char* start = r.here();
  r.skip(n);
  const std::uint32_t stored = r.u32();
  if (crc32_of(start, n) != stored) throw Error(ErrorCode::ChecksumMismatch, "payload CRC32 does not match");
  if (r.remaining() != 0) throw Error(ErrorCode::TruncatedFile, "trailing bytes after checksum");
  return Reader(start, n);
}

void seal_payload(Bytes& b, std::size_t start) { put_u32(b, crc32_of(b.data() + start, b.size() - start)); }

MatrixXd read_block(Reader& r) {
  const auto rows = static_cast<Eigen::Index>(r.u64());
  const auto cols = static_cast<Eigen::Index>(r.u64());
  if (rows < 0 || cols < 0 || (rows > 0 && cols > 0 && std::size_t(rows) * std::size_t(cols) > r.remaining() / 8))
    throw Error(ErrorCode::TruncatedFile, "matrix block exceeds payload");
  MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = r.f64();
  return m;
}

VectorXd read_vector(Reader& r) {
  MatrixXd m = read_block(r);
  if (m.cols() != 1) throw Error(ErrorCode::CorruptCheckpoint, "expected a column vector");
  return m.col(0);
}

Gradients read_grads(Reader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error(ErrorCode::TruncatedFile, "gradient list exceeds payload");
  Gradients g(n);
  for (auto& mg : g) {
    mg.dR = read_block(r);
    mg.dW = read_block(r);
    mg.db = read_vector(r);
  }
  return g;
}

}  // namespace

Bytes encode_activations(const MatrixXd& rows) {
  Bytes b{'R', 'G', 'A', 'C'};
  put_u32(b, kFormatVersion);
  put_u32(b, static_cast<std::uint32_t>(rows.cols()));
  put_u32(b, static_cast<std::uint32_t>(rows.rows()));
  const std::size_t start = b.size();
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index j = 0; j < rows.cols(); ++j) put_f32(b, rows(i, j));
  seal_payload(b, start);
  return b;
}

MatrixXd decode_activations(const Bytes& bytes) {
  Reader r = open_container(bytes, "RGAC");
  const std::uint32_t d = r.u32();
  const std::uint32_t n = r.u32();
  Reader p = payload(r, std::size_t(n) * d * 4);
  MatrixXd m(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) m(i, j) = p.f32();
  return m;
}

Bytes encode_basis(const RefusalBasis<double>& basis) {
  Bytes b{'R', 'G', 'B', 'S'};
  put_u32(b, kFormatVersion);
  put_u32(b, static_cast<std::uint32_t>(basis.dim_d()));
  put_u32(b, static_cast<std::uint32_t>(basis.dim_k()));
  const std::size_t start = b.size();
  const auto& c = basis.columns();
  for (Eigen::Index j = 0; j < c.cols(); ++j)
    for (Eigen::Index i = 0; i < c.rows(); ++i) put_f32(b, c(i, j));
  seal_payload(b, start);
  return b;
}

LoadedBasis decode_basis(const Bytes& bytes, int layer) {
  Reader r = open_container(bytes, "RGBS");
  const std::uint32_t d = r.u32();
  const std::uint32_t k = r.u32();
  Reader p = payload(r, std::size_t(d) * k * 4);
  if (k < 1 || k > d) throw Error(ErrorCode::DimensionMismatch, "basis file needs 1 <= k <= d");
  MatrixXd m(d, k);
  for (std::uint32_t j = 0; j < k; ++j)
    for (std::uint32_t i = 0; i < d; ++i) m(i, j) = p.f32();
  LoadedBasis out;
  out.file_error = orthonormality_error(m);
  if (!(out.file_error <= 1e-6))
    throw Error(ErrorCode::DimensionMismatch,
                "basis file columns are not orthonormal at file precision (" + std::to_string(out.file_error) + ")");
  out.basis = RefusalBasis<double>::orthonormalized(m, layer);
  out.reorthonormalized = true;
  return out;
}

Bytes encode_checkpoint(const Checkpoint& cp) {
  const Bytes body = checkpoint_payload(cp);
  Bytes b{'R', 'G', 'C', 'K'};
  put_u32(b, kFormatVersion);
  put_u64(b, body.size());
  const std::size_t start = b.size();
  b.insert(b.end(), body.begin(), body.end());
  seal_payload(b, start);
  return b;
}

Checkpoint decode_checkpoint(const Bytes& bytes) {
  Reader r = open_container(bytes, "RGCK");
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error(ErrorCode::TruncatedFile, "checkpoint payload exceeds file");
  Reader p = payload(r, static_cast<std::size_t>(n));
  Checkpoint cp;
  cp.step = static_cast<int>(static_cast<std::int64_t>(p.u64()));
  cp.seed = p.u64();
  cp.losses.task = p.f64();
  cp.losses.geom = p.f64();
  cp.losses.total = p.f64();
  cp.losses.lambda_geom = p.f64();
  const std::uint64_t count = p.u64();
  if (count > p.remaining()) throw Error(ErrorCode::TruncatedFile, "module list exceeds payload");
  for (std::uint64_t i = 0; i < count; ++i) {
    InterventionModule<double> m;
    m.layer = static_cast<int>(static_cast<std::int64_t>(p.u64()));
    m.R = read_block(p);
    m.W = read_block(p);
    m.b = read_vector(p);
    if (m.W.rows() != m.R.rows() || m.W.cols() != m.R.cols() || m.b.size() != m.R.rows())
      throw Error(ErrorCode::CorruptCheckpoint, "module shapes disagree");
    cp.modules.push_back(std::move(m));
  }
  cp.optimizer.t = static_cast<std::int64_t>(p.u64());
  cp.optimizer.m = read_grads(p);
  cp.optimizer.v = read_grads(p);
  if (p.remaining() != 0) throw Error(ErrorCode::CorruptCheckpoint, "unparsed bytes in checkpoint payload");
  cp.checksum = crc32_of(bytes.data() + 16, static_cast<std::size_t>(n));
  return cp;
}

void write_activations(const fs::path& path, const MatrixXd& rows) { write_bytes(path, encode_activations(rows)); }
MatrixXd read_activations(const fs::path& path) { return decode_activations(read_bytes(path)); }
void write_basis(const fs::path& path, const RefusalBasis<double>& basis) { write_bytes(path, encode_basis(basis)); }
LoadedBasis read_basis(const fs::path& path, int layer) { return decode_basis(read_bytes(path), layer); }
void write_checkpoint(const fs::path& path, const Checkpoint& cp) { write_bytes(path, encode_checkpoint(cp)); }
Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_bytes(path)); }

std::string corpus_to_json(const Corpus& corpus) {
  nlohmann::json j;
  j["kind"] = to_string(corpus.kind);
  j["seed"] = corpus.seed;
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : corpus.sequences) seqs.push_back({{"prompt", s.prompt}, {"target", s.target}});
  j["sequences"] = std::move(seqs);
  return j.dump(1) + "\n";
}

Corpus corpus_from_json(const std::string& text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    Corpus c;
    c.kind = corpus_kind_from_string(j.at("kind").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("sequences")) {
      Sequence seq;
      seq.prompt = s.at("prompt").get<std::vector<int>>();
      seq.target = s.at("target").get<std::vector<int>>();
      if (seq.prompt.empty()) throw Error(ErrorCode::InvalidConfig, "corpus sequence has an empty prompt");
      c.sequences.push_back(std::move(seq));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed corpus manifest: ") + e.what());
  }
}

void write_corpus(const fs::path& path, const Corpus& corpus) { write_text(path, corpus_to_json(corpus)); }
Corpus read_corpus(const fs::path& path) { return corpus_from_json(read_text(path)); }

}  // namespace rg
