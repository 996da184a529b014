#pragma once

// Synthetic shapes detection corpus: generation, PPM/manifest I/O and
// adversarial-set emission.
//
// Directory layout:
//   manifest.json
//   images/NNNNNN.ppm
//   source/NNNNNN.ppm     (adversarial sets only: the clean originals)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rad/core/box.hpp"
#include "rad/core/tensor.hpp"

namespace rad::corpus {

inline constexpr std::size_t kImageSide = 128;
inline constexpr std::size_t kShapeKinds = 4;
inline constexpr int kManifestVersion = 1;

enum class ShapeKind : std::size_t { kCircle = 0, kSquare = 1, kTriangle = 2, kRing = 3 };
const char* shape_name(std::size_t class_id);

struct Annotation {
  Box box;
  std::size_t class_id = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

// image is H x W x 3 with integer values in [0, 255].
struct Sample {
  Tensor image;
  std::vector<Annotation> annotations;
};

struct ManifestEntry {
  std::string image_file;
  std::vector<Annotation> annotations;
  std::optional<std::string> source_file;
  std::optional<double> rmse;
};

struct DatasetManifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  std::size_t classes = kShapeKinds;
  std::size_t image_side = kImageSide;
  std::vector<ManifestEntry> entries;
  // Adversarial sets only.
  std::optional<std::string> surrogate_arch;
  std::optional<nlohmann::json> attack_config;
  std::optional<double> mean_rmse;
  std::optional<double> epsilon;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

// Binary PPM (P6, maxval 255, no comments).
void write_ppm(const std::filesystem::path& path, const Tensor& image_hwc);
Tensor read_ppm(const std::filesystem::path& path);
// Grayscale PGM (P5) from an H x W tensor of values in [0, 255].
void write_pgm(const std::filesystem::path& path, const Tensor& image_hw);

// Round to nearest and clamp to [0, 255].
Tensor quantize(const Tensor& image);

// Deterministic in (seed, index) alone, so samples can be generated in any order.
Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t classes);

// Writes n samples plus manifest under out_dir. Errors: n == 0, classes
// outside [1, 4], disk write failure.
DatasetManifest generate_corpus(std::uint64_t seed, std::size_t n, std::size_t classes,
                                const std::filesystem::path& out_dir, std::size_t jobs = 1);

void save_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& dir);

// Errors: missing file (named), corrupt header, annotation out of bounds.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, std::size_t jobs = 1);
// Source images of an adversarial set, in manifest order.
std::vector<Tensor> load_sources(const std::filesystem::path& dir, std::size_t jobs = 1);

struct AdversarialSetInfo {
  double epsilon = 16.0;
  std::uint64_t seed = 0;
  std::size_t classes = kShapeKinds;
  std::string surrogate_arch;
  nlohmann::json attack_config;
};

// Quantizes each adversarial image, checks max|adv - orig| <= eps + 0.5,
// writes images/, source/ and the manifest with per-sample and mean RMSE.
// Errors: count or shape mismatch (ShapeError), bound violation.
DatasetManifest emit_adversarial_set(const std::vector<Sample>& originals, const std::vector<Tensor>& adversarials,
                                     const AdversarialSetInfo& info, const std::filesystem::path& out_dir);

std::string image_file_name(std::size_t index);

}  // namespace rad::corpus
