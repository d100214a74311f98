#pragma once

// Versioned little-endian binary files: concepts ("KLC1"), covariance caches
// ("KLR1") and feature grids ("KLG1"). Concept and grid payloads carry a CRC-32;
// headers stay readable when the payload is corrupt.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "klr/concept.hpp"
#include "klr/diffuser.hpp"
#include "klr/metric.hpp"
#include "klr/textenc.hpp"

namespace klr {

enum class Precision : std::uint16_t { kF32 = 4, kF64 = 8 };

Precision parse_precision(std::string_view text);
const char* to_string(Precision p);

inline constexpr std::uint16_t kConceptFileVersion = 1;
inline constexpr std::uint16_t kCovarianceFileVersion = 1;
inline constexpr std::uint16_t kGridFileVersion = 1;

struct LayerDims {
  std::uint32_t d_k = 0;
  std::uint32_t d_v = 0;
  bool operator==(const LayerDims&) const = default;
};

struct ConceptDims {
  std::uint32_t d_w = 0;
  std::uint32_t d_e = 0;
  std::vector<LayerDims> layers;
  bool operator==(const ConceptDims&) const = default;

  static ConceptDims of(const Concept& c);
  /// Scalars in the payload: embedding, i*, per-layer o*^K and o*^V, beta.
  std::size_t payload_scalars() const;
  std::size_t header_bytes() const;
};

/// header + precision * payload_scalars + 4-byte checksum.
std::size_t predicted_size(const ConceptDims& dims, Precision precision);

struct ConceptHeader {
  std::uint16_t version = kConceptFileVersion;
  Precision precision = Precision::kF32;
  ConceptDims dims;
  std::uint32_t superclass_index = 0;  // row of the vocabulary
};

/// Writes the concept; returns the byte count. The name is not stored: it is the file stem on load.
std::size_t save_concept(const Concept& c, const Vocabulary& vocab, const std::filesystem::path& path,
                         Precision precision = Precision::kF32);

/// Reads and validates the header only (no checksum verification).
ConceptHeader read_concept_header(const std::filesystem::path& path);

/// Full load with checksum verification; the superclass is resolved through `vocab`.
Concept load_concept(const std::filesystem::path& path, const Vocabulary& vocab);

std::size_t save_covariance(const MetricSpace<double>& m, const std::filesystem::path& path);
MetricSpace<double> load_covariance(const std::filesystem::path& path);

std::size_t save_grid(const FeatureGrid& grid, const std::filesystem::path& path,
                      Precision precision = Precision::kF64);
FeatureGrid load_grid(const std::filesystem::path& path);

/// CRC-32 (ISO-HDLC polynomial, as in zlib).
std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes, std::size_t offset = 0);

}  // namespace klr
