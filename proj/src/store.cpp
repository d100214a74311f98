#include "klr/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <zlib.h>

#include "klr/error.hpp"

namespace klr {

namespace fs = std::filesystem;

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::kF32;
  if (text == "f64") return Precision::kF64;
  throw ConfigError("unknown precision '" + std::string(text) + "' (expected f32|f64)");
}

const char* to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t pos = offset;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

class Writer {
 public:
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void real(double v, Precision p) {
    if (p == Precision::kF32) {
      uint(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      uint(std::bit_cast<std::uint64_t>(v));
    }
  }
  void reals(const Eigen::Ref<const Eigen::VectorXd>& v, Precision p) {
    for (Eigen::Index i = 0; i < v.size(); ++i) real(v(i), p);
  }
  std::size_t size() const noexcept { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  bool has(std::size_t n) const noexcept { return pos_ + n <= bytes_.size(); }
  std::size_t pos() const noexcept { return pos_; }

  template <typename T>
  T uint() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double real(Precision p) {
    if (p == Precision::kF32) return static_cast<double>(std::bit_cast<float>(uint<std::uint32_t>()));
    return std::bit_cast<double>(uint<std::uint64_t>());
  }
  Vector reals(std::size_t n, Precision p) {
    Vector v(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = real(p);
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (!has(n)) throw ChecksumError(path_ + ": file is truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(path.string() + ": read failed");
  return bytes;
}

// Writes through a sibling temporary so a failed write never leaves a partial file.
void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError(path.string() + ": write failed");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(path.string() + ": cannot move into place");
  }
}

void expect_magic(Reader& r, const char (&magic)[5], const std::string& path) {
  if (!r.has(4)) throw FormatError(path + ": not a " + std::string(magic) + " file");
  char got[4];
  for (char& ch : got) ch = static_cast<char>(r.uint<std::uint8_t>());
  if (std::memcmp(got, magic, 4) != 0) throw FormatError(path + ": not a " + std::string(magic) + " file");
}

std::uint16_t expect_version(Reader& r, std::uint16_t expected, const std::string& path) {
  if (!r.has(2)) throw ChecksumError(path + ": file is truncated");
  const auto v = r.uint<std::uint16_t>();
  if (v != expected) throw VersionError(path, v, expected);
  return v;
}

Precision read_precision(Reader& r, const std::string& path) {
  if (!r.has(2)) throw ChecksumError(path + ": file is truncated");
  const auto p = r.uint<std::uint16_t>();
  if (p != 4 && p != 8) throw FormatError(path + ": precision " + std::to_string(p) + " is neither 4 nor 8");
  return static_cast<Precision>(p);
}

void verify_crc(const std::vector<std::uint8_t>& bytes, std::size_t payload_begin, std::size_t expected_size,
                const std::string& path) {
  if (bytes.size() < expected_size) throw ChecksumError(path + ": file is truncated");
  if (bytes.size() > expected_size) throw ChecksumError(path + ": trailing bytes after checksum");
  const std::vector<std::uint8_t> payload(bytes.begin() + static_cast<std::ptrdiff_t>(payload_begin),
                                          bytes.end() - 4);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (crc32_of(payload) != stored) throw ChecksumError(path + ": payload checksum mismatch");
}

std::uint32_t as_u32(Eigen::Index v, const char* what) {
  if (v < 0 || v > static_cast<Eigen::Index>(UINT32_MAX)) throw ContractError(std::string(what) + " out of range");
  return static_cast<std::uint32_t>(v);
}

ConceptHeader parse_concept_header(Reader& r, const std::string& path) {
  expect_magic(r, "KLC1", path);
  ConceptHeader h;
  h.version = expect_version(r, kConceptFileVersion, path);
  h.precision = read_precision(r, path);
  if (!r.has(12)) throw ChecksumError(path + ": file is truncated");
  h.dims.d_w = r.uint<std::uint32_t>();
  h.dims.d_e = r.uint<std::uint32_t>();
  const auto layers = r.uint<std::uint32_t>();
  if (h.dims.d_w == 0 || h.dims.d_e == 0 || layers == 0) throw FormatError(path + ": zero dimension in header");
  if (!r.has(static_cast<std::size_t>(layers) * 8 + 4)) throw ChecksumError(path + ": file is truncated");
  for (std::uint32_t l = 0; l < layers; ++l) {
    LayerDims d;
    d.d_k = r.uint<std::uint32_t>();
    d.d_v = r.uint<std::uint32_t>();
    h.dims.layers.push_back(d);
  }
  h.superclass_index = r.uint<std::uint32_t>();
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Concepts

ConceptDims ConceptDims::of(const Concept& c) {
  ConceptDims d;
  d.d_w = as_u32(c.embedding.size(), "d_w");
  d.d_e = as_u32(c.i_star.size(), "d_e");
  if (c.key_targets.size() != c.value_targets.size()) throw ContractError("K and V layer counts differ");
  for (std::size_t l = 0; l < c.key_targets.size(); ++l) {
    d.layers.push_back({as_u32(c.key_targets[l].size(), "d_k"), as_u32(c.value_targets[l].size(), "d_v")});
  }
  return d;
}

std::size_t ConceptDims::payload_scalars() const {
  std::size_t n = static_cast<std::size_t>(d_w) + d_e + 1;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.d_k) + l.d_v;
  return n;
}

std::size_t ConceptDims::header_bytes() const { return 4 + 2 + 2 + 3 * 4 + 8 * layers.size() + 4; }

std::size_t predicted_size(const ConceptDims& dims, Precision precision) {
  return dims.header_bytes() + static_cast<std::size_t>(precision) * dims.payload_scalars() + 4;
}

std::size_t save_concept(const Concept& c, const Vocabulary& vocab, const fs::path& path, Precision precision) {
  const ConceptDims dims = ConceptDims::of(c);
  if (dims.layers.empty()) throw ContractError("concept has no layers");
  auto finite = [](const Vector& v) { return v.allFinite(); };
  bool ok = finite(c.embedding) && finite(c.i_star) && std::isfinite(c.beta);
  for (std::size_t l = 0; l < dims.layers.size(); ++l) ok = ok && finite(c.key_targets[l]) && finite(c.value_targets[l]);
  if (!ok) throw ContractError("concept '" + c.name + "' has non-finite values");

  Writer w;
  w.raw("KLC1", 4);
  w.uint(kConceptFileVersion);
  w.uint(static_cast<std::uint16_t>(precision));
  w.uint(dims.d_w);
  w.uint(dims.d_e);
  w.uint(static_cast<std::uint32_t>(dims.layers.size()));
  for (const auto& l : dims.layers) {
    w.uint(l.d_k);
    w.uint(l.d_v);
  }
  w.uint(static_cast<std::uint32_t>(vocab.index_of(c.superclass)));
  const std::size_t payload_begin = w.size();
  w.reals(c.embedding, precision);
  w.reals(c.i_star, precision);
  for (std::size_t l = 0; l < dims.layers.size(); ++l) {
    w.reals(c.key_targets[l], precision);
    w.reals(c.value_targets[l], precision);
  }
  w.real(c.beta, precision);
  w.uint(crc32_of(w.bytes(), payload_begin));
  write_file(path, w.bytes());
  return w.size();
}

ConceptHeader read_concept_header(const fs::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, path.string());
  return parse_concept_header(r, path.string());
}

Concept load_concept(const fs::path& path, const Vocabulary& vocab) {
  const std::string where = path.string();
  const auto bytes = read_file(path);
  Reader r(bytes, where);
  const ConceptHeader h = parse_concept_header(r, where);
  verify_crc(bytes, r.pos(), predicted_size(h.dims, h.precision), where);
  if (h.superclass_index >= static_cast<std::uint32_t>(vocab.size())) {
    throw LoadError(where + ": superclass index " + std::to_string(h.superclass_index) + " outside the vocabulary");
  }
  Concept c;
  c.name = path.stem().string();
  c.superclass = vocab.token(static_cast<int>(h.superclass_index));
  c.embedding = r.reals(h.dims.d_w, h.precision);
  c.i_star = r.reals(h.dims.d_e, h.precision);
  for (const auto& l : h.dims.layers) {
    c.key_targets.push_back(r.reals(l.d_k, h.precision));
    c.value_targets.push_back(r.reals(l.d_v, h.precision));
  }
  c.beta = r.real(h.precision);
  return c;
}

// ---------------------------------------------------------------------------
// Covariance cache

std::size_t save_covariance(const MetricSpace<double>& m, const fs::path& path) {
  Writer w;
  w.raw("KLR1", 4);
  w.uint(kCovarianceFileVersion);
  w.uint(as_u32(m.dim(), "d_e"));
  for (const Matrix* a : {&m.c_inv(), &m.chol()}) {
    for (Eigen::Index i = 0; i < a->rows(); ++i) {
      for (Eigen::Index j = 0; j < a->cols(); ++j) w.real((*a)(i, j), Precision::kF64);
    }
  }
  write_file(path, w.bytes());
  return w.size();
}

MetricSpace<double> load_covariance(const fs::path& path) {
  const std::string where = path.string();
  const auto bytes = read_file(path);
  Reader r(bytes, where);
  expect_magic(r, "KLR1", where);
  expect_version(r, kCovarianceFileVersion, where);
  if (!r.has(4)) throw ChecksumError(where + ": file is truncated");
  const auto d = r.uint<std::uint32_t>();
  if (d == 0) throw FormatError(where + ": zero dimension");
  const std::size_t expected = 10 + 2 * 8 * static_cast<std::size_t>(d) * d;
  if (bytes.size() != expected) {
    throw FormatError(where + ": size " + std::to_string(bytes.size()) + " does not match d_e = " + std::to_string(d));
  }
  auto matrix = [&] {
    Matrix a(d, d);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = r.real(Precision::kF64);
    }
    return a;
  };
  Matrix c_inv = matrix();
  Matrix chol = matrix();
  return MetricSpace<double>::from_factors(std::move(c_inv), std::move(chol));
}

// ---------------------------------------------------------------------------
// Feature grids

std::size_t save_grid(const FeatureGrid& grid, const fs::path& path, Precision precision) {
  grid.require_finite("feature grid");
  Writer w;
  w.raw("KLG1", 4);
  w.uint(kGridFileVersion);
  w.uint(static_cast<std::uint16_t>(precision));
  w.uint(static_cast<std::uint32_t>(grid.height));
  w.uint(static_cast<std::uint32_t>(grid.width));
  w.uint(static_cast<std::uint32_t>(grid.channels));
  const std::size_t payload_begin = w.size();
  for (Eigen::Index p = 0; p < grid.data.rows(); ++p) {
    for (Eigen::Index ch = 0; ch < grid.data.cols(); ++ch) w.real(grid.data(p, ch), precision);
  }
  w.uint(crc32_of(w.bytes(), payload_begin));
  write_file(path, w.bytes());
  return w.size();
}

FeatureGrid load_grid(const fs::path& path) {
  const std::string where = path.string();
  const auto bytes = read_file(path);
  Reader r(bytes, where);
  expect_magic(r, "KLG1", where);
  expect_version(r, kGridFileVersion, where);
  const Precision precision = read_precision(r, where);
  if (!r.has(12)) throw ChecksumError(where + ": file is truncated");
  const auto h = r.uint<std::uint32_t>();
  const auto w = r.uint<std::uint32_t>();
  const auto c = r.uint<std::uint32_t>();
  if (h == 0 || w == 0 || c == 0) throw FormatError(where + ": zero dimension");
  const std::size_t n = static_cast<std::size_t>(h) * w * c;
  verify_crc(bytes, r.pos(), r.pos() + n * static_cast<std::size_t>(precision) + 4, where);
  FeatureGrid grid(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  for (Eigen::Index p = 0; p < grid.data.rows(); ++p) {
    for (Eigen::Index ch = 0; ch < grid.data.cols(); ++ch) grid.data(p, ch) = r.real(precision);
  }
  return grid;
}

}  // namespace klr
