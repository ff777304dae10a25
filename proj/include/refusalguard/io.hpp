#pragma once

// Little-endian binary formats for activation dumps, bases and checkpoints,
// plus JSON corpus manifests.
//
//   RGAC: "RGAC" u32 version u32 d u32 n | n*d f32 row-major | u32 crc32
//   RGBS: "RGBS" u32 version u32 d u32 k | d*k f32 column-major | u32 crc32
//   RGCK: "RGCK" u32 version u64 bytes   | checkpoint payload (f64) | u32 crc32

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refusalguard/trainer.hpp"

namespace rg {

inline constexpr std::uint32_t kFormatVersion = 1;

using Bytes = std::vector<unsigned char>;

Bytes read_bytes(const std::filesystem::path& path);
// Writes through a temporary file renamed into place.
void write_bytes(const std::filesystem::path& path, const Bytes& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::uint32_t crc32_of(const unsigned char* data, std::size_t n);

Bytes encode_activations(const MatrixXd& rows);
MatrixXd decode_activations(const Bytes& bytes);

Bytes encode_basis(const RefusalBasis<double>& basis);

struct LoadedBasis {
  RefusalBasis<double> basis;
  // Orthonormality error of the decoded columns before re-orthonormalization.
  double file_error = 0.0;
  bool reorthonormalized = false;
};
LoadedBasis decode_basis(const Bytes& bytes, int layer = 0);

Bytes encode_checkpoint(const Checkpoint& cp);
Checkpoint decode_checkpoint(const Bytes& bytes);

void write_activations(const std::filesystem::path& path, const MatrixXd& rows);
MatrixXd read_activations(const std::filesystem::path& path);
void write_basis(const std::filesystem::path& path, const RefusalBasis<double>& basis);
LoadedBasis read_basis(const std::filesystem::path& path, int layer = 0);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& cp);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const std::string& text);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace rg
