#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spcl/patching.hpp"
#include "spcl/trainer.hpp"

namespace spcl {

// ---------------------------------------------------------------------------
// Manifest: tab-separated, header "path\tlabel\tsplit".

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  std::string split;  // may be empty

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  void validate() const;  // unique paths, non-negative labels
};

inline constexpr const char* kManifestName = "manifest.tsv";

Manifest parse_manifest(const std::string& text);
Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const Manifest& m);

// ---------------------------------------------------------------------------
// Binary 8-bit PGM (P5, maxval 255).

ImageGray load_pgm(const std::filesystem::path& file);
ImageGray parse_pgm(const std::string& bytes, const std::string& source = "<memory>");
std::string encode_pgm(const ImageGray& img);
void save_pgm(const std::filesystem::path& file, const ImageGray& img);

/// Images and labels of a data directory (manifest.tsv + PGMs), optionally
/// restricted to one split tag.
struct LabeledImages {
  std::vector<ImageGray> images;
  std::vector<int> labels;
};
LabeledImages load_dataset(const std::filesystem::path& dir,
                           const std::optional<std::string>& split = std::nullopt);

// ---------------------------------------------------------------------------
// Synthetic data: shared smooth background and two bright elliptical
// fields, plus one label-dependent local blob (quadrant and radius set by
// the label, centre jittered), plus Gaussian pixel noise.

struct SyntheticConfig {
  std::size_t classes = 4;
  std::size_t height = 64;
  std::size_t width = 64;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
};

ImageGray synthetic_image(const SyntheticConfig& cfg, std::size_t index, int label);
inline int synthetic_label(const SyntheticConfig& cfg, std::size_t index) {
  return static_cast<int>(index % cfg.classes);
}

/// Writes `count` PGMs plus manifest.tsv into `dir`. The last
/// ⌊count·test_fraction⌋ images are tagged "test", the rest "train".
Manifest gen_synthetic(const std::filesystem::path& dir, std::size_t count,
                       const SyntheticConfig& cfg, double test_fraction = 0.2);

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>");
/// Writes to a temporary sibling and renames over `file`.
void save_checkpoint(const std::filesystem::path& file, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Embedding export: header "label\td0\td1…", one row per embedding, values
// with 9 significant digits.

struct LabeledEmbeddings;  // probes.hpp

void export_embeddings(const std::filesystem::path& file, const LabeledEmbeddings& e);
std::string format_embeddings(const LabeledEmbeddings& e);
LabeledEmbeddings parse_embeddings(const std::string& text, const std::string& source = "<memory>");
LabeledEmbeddings import_embeddings(const std::filesystem::path& file);

std::string read_file(const std::filesystem::path& file);
// Atomic (temp + rename) write.
void write_file(const std::filesystem::path& file, const std::string& bytes);

}  // namespace spcl
