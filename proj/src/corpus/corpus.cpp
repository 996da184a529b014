#include "rad/corpus/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "rad/core/error.hpp"
#include "rad/core/parallel.hpp"
#include "rad/metrics/metrics.hpp"

namespace rad::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

const char* shape_name(std::size_t class_id) {
  static constexpr std::array<const char*, kShapeKinds> names{"circle", "square", "triangle", "ring"};
  return class_id < names.size() ? names[class_id] : "unknown";
}

std::string image_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.ppm", index);
  return buf;
}

// ---------------------------------------------------------------------------
// PPM / PGM

namespace {

void write_netpbm(const fs::path& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

unsigned char to_byte(float v) {
  if (!(v >= 0.0f && v <= 255.0f) || v != std::round(v))
    throw UsageError("image value " + std::to_string(v) + " is not an integer in [0, 255]");
  return static_cast<unsigned char>(v);
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("PPM needs H x W x 3, got " + to_string(image.shape()));
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
  write_netpbm(path, "P6", image.dim(1), image.dim(0), bytes);
}

void write_pgm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("PGM needs H x W, got " + to_string(image.shape()));
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
  write_netpbm(path, "P5", image.dim(1), image.dim(0), bytes);
}

Tensor read_ppm(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError(path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  long w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || w <= 0 || h <= 0 || maxval != 255 || in.get() != '\n')
    throw CorruptDataError("bad PPM header in " + path.string());
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  std::vector<unsigned char> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw CorruptDataError("truncated PPM " + path.string() + " (" + std::to_string(in.gcount()) + " of " +
                           std::to_string(n) + " bytes)");
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptDataError("trailing bytes in " + path.string());
  Tensor image({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  for (std::size_t i = 0; i < n; ++i) image[i] = bytes[i];
  return image;
}

Tensor quantize(const Tensor& image) {
  Tensor out = image;
  // "+ 0.0f" folds a rounded -0 into +0 so quantized images compare bit-equal.
  for (float& v : out.values()) v = std::clamp(std::round(v), 0.0f, 255.0f) + 0.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr int kMinSide = 14;
constexpr int kMaxSide = 46;
constexpr int kMaxObjects = 6;
constexpr float kNoiseAmplitude = 16.0f;
constexpr std::size_t kNoiseCell = 16;
constexpr float kGrainSigma = 8.0f;

bool inside_shape(ShapeKind kind, float px, float py, float x0, float y0, float side) {
  const float r = 0.5f * side;
  const float dx = px - (x0 + r), dy = py - (y0 + r);
  switch (kind) {
    case ShapeKind::kCircle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare: return px >= x0 && px <= x0 + side && py >= y0 && py <= y0 + side;
    case ShapeKind::kRing: {
      const float d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36f * r * r;
    }
    case ShapeKind::kTriangle: {
      // Upright isosceles triangle: apex top-centre, base along the bottom.
      if (py < y0 || py > y0 + side) return false;
      const float half = 0.5f * side * (py - y0) / side;
      return std::abs(dx) <= half;
    }
  }
  return false;
}

// Smoothly interpolated lattice noise in [-1, 1].
std::vector<float> value_noise(std::mt19937_64& rng, std::size_t side) {
  const std::size_t lattice = side / kNoiseCell + 2;
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> grid(lattice * lattice);
  for (float& g : grid) g = u(rng);
  std::vector<float> out(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    const float fy = static_cast<float>(y) / kNoiseCell;
    const std::size_t gy = static_cast<std::size_t>(fy);
    float ty = fy - static_cast<float>(gy);
    ty = ty * ty * (3 - 2 * ty);
    for (std::size_t x = 0; x < side; ++x) {
      const float fx = static_cast<float>(x) / kNoiseCell;
      const std::size_t gx = static_cast<std::size_t>(fx);
      float tx = fx - static_cast<float>(gx);
      tx = tx * tx * (3 - 2 * tx);
      const float a = grid[gy * lattice + gx], b = grid[gy * lattice + gx + 1];
      const float c = grid[(gy + 1) * lattice + gx], d = grid[(gy + 1) * lattice + gx + 1];
      out[y * side + x] = (a + (b - a) * tx) * (1 - ty) + (c + (d - c) * tx) * ty;
    }
  }
  return out;
}

bool boxes_touch(const Box& a, const Box& b, float margin) {
  return a.x - margin < b.right() && b.x - margin < a.right() && a.y - margin < b.bottom() &&
         b.y - margin < a.bottom();
}

}  // namespace

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t classes) {
  if (classes == 0 || classes > kShapeKinds)
    throw UsageError("classes must be in [1, " + std::to_string(kShapeKinds) + "], got " + std::to_string(classes));
  std::mt19937_64 rng(splitmix(splitmix(seed) ^ index));
  const std::size_t s = kImageSide;

  std::uniform_int_distribution<int> base_dist(40, 215);
  const std::array<int, 3> base{base_dist(rng), base_dist(rng), base_dist(rng)};
  std::vector<std::array<float, 3>> pixels(s * s, {float(base[0]), float(base[1]), float(base[2])});

  Sample sample;
  std::uniform_int_distribution<int> count_dist(1, kMaxObjects);
  std::uniform_int_distribution<std::size_t> class_dist(0, classes - 1);
  std::uniform_int_distribution<int> side_dist(kMinSide, kMaxSide);
  std::uniform_int_distribution<int> channel_dist(0, 255);
  const int wanted = count_dist(rng);
  for (int k = 0; k < wanted; ++k) {
    const std::size_t cls = class_dist(rng);
    const int side = side_dist(rng);
    std::uniform_int_distribution<int> pos_dist(1, static_cast<int>(s) - side - 2);
    std::array<int, 3> color{};
    do {
      for (int& c : color) c = channel_dist(rng);
    } while (std::max({std::abs(color[0] - base[0]), std::abs(color[1] - base[1]), std::abs(color[2] - base[2])}) <
             80);

    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const float x0 = static_cast<float>(pos_dist(rng)), y0 = static_cast<float>(pos_dist(rng));
      const Box outline{x0, y0, static_cast<float>(side), static_cast<float>(side)};
      if (std::any_of(sample.annotations.begin(), sample.annotations.end(),
                      [&](const Annotation& a) { return boxes_touch(a.box, outline, 3.0f); }))
        continue;
      int xmin = INT32_MAX, ymin = INT32_MAX, xmax = -1, ymax = -1;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          if (!inside_shape(static_cast<ShapeKind>(cls), x + 0.5f, y + 0.5f, x0, y0, static_cast<float>(side)))
            continue;
          for (int c = 0; c < 3; ++c) pixels[y * s + x][c] = static_cast<float>(color[c]);
          xmin = std::min<int>(xmin, x), xmax = std::max<int>(xmax, x);
          ymin = std::min<int>(ymin, y), ymax = std::max<int>(ymax, y);
        }
      sample.annotations.push_back({Box{float(xmin), float(ymin), float(xmax - xmin + 1), float(ymax - ymin + 1)}, cls});
      placed = true;
    }
  }

  const auto noise = value_noise(rng, s);
  std::normal_distribution<float> grain(0.0f, kGrainSigma);
  sample.image = Tensor({s, s, 3});
  for (std::size_t p = 0; p < s * s; ++p)
    for (int c = 0; c < 3; ++c)
      sample.image[p * 3 + c] =
          std::clamp(std::round(pixels[p][c] + kNoiseAmplitude * noise[p] + grain(rng)), 0.0f, 255.0f) + 0.0f;
  return sample;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

json annotations_json(const std::vector<Annotation>& anns) {
  json arr = json::array();
  for (const auto& a : anns) arr.push_back({{"box", {a.box.x, a.box.y, a.box.w, a.box.h}}, {"class_id", a.class_id}});
  return arr;
}

std::vector<Annotation> annotations_from(const json& arr) {
  std::vector<Annotation> out;
  for (const auto& a : arr) {
    const auto& b = a.at("box");
    if (!b.is_array() || b.size() != 4) throw CorruptDataError("annotation box must have 4 numbers");
    out.push_back({Box{b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()},
                   a.at("class_id").get<std::size_t>()});
  }
  return out;
}

}  // namespace

json DatasetManifest::to_json() const {
  json j;
  j["version"] = version;
  j["seed"] = seed;
  j["classes"] = classes;
  j["image_side"] = image_side;
  if (surrogate_arch) j["surrogate_arch"] = *surrogate_arch;
  if (attack_config) j["attack_config"] = *attack_config;
  if (epsilon) j["epsilon"] = *epsilon;
  if (mean_rmse) j["mean_rmse"] = *mean_rmse;
  json samples = json::array();
  for (const auto& e : entries) {
    json s{{"image_file", e.image_file}, {"annotations", annotations_json(e.annotations)}};
    if (e.source_file) s["source_file"] = *e.source_file;
    if (e.rmse) s["rmse"] = *e.rmse;
    if (surrogate_arch) s["surrogate_arch"] = *surrogate_arch;
    samples.push_back(std::move(s));
  }
  j["samples"] = std::move(samples);
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  try {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) throw CorruptDataError("unsupported manifest version " + std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.classes = j.at("classes").get<std::size_t>();
    m.image_side = j.at("image_side").get<std::size_t>();
    if (j.contains("surrogate_arch")) m.surrogate_arch = j["surrogate_arch"].get<std::string>();
    if (j.contains("attack_config")) m.attack_config = j["attack_config"];
    if (j.contains("epsilon")) m.epsilon = j["epsilon"].get<double>();
    if (j.contains("mean_rmse")) m.mean_rmse = j["mean_rmse"].get<double>();
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      e.image_file = s.at("image_file").get<std::string>();
      e.annotations = annotations_from(s.at("annotations"));
      if (s.contains("source_file")) e.source_file = s["source_file"].get<std::string>();
      if (s.contains("rmse")) e.rmse = s["rmse"].get<double>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw CorruptDataError(std::string("manifest: ") + e.what());
  }
}

void save_manifest(const fs::path& dir, const DatasetManifest& manifest) {
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest.to_json().dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw MissingFileError(path.string());
  std::ifstream in(path, std::ios::binary);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptDataError(path.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j);
}

DatasetManifest generate_corpus(std::uint64_t seed, std::size_t n, std::size_t classes, const fs::path& out_dir,
                                std::size_t jobs) {
  if (n == 0) throw UsageError("corpus needs at least one sample");
  if (classes == 0 || classes > kShapeKinds) throw UsageError("classes must be in [1, 4]");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.classes = classes;
  manifest.entries.resize(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    Sample s = generate_sample(seed, i, classes);
    const std::string rel = "images/" + image_file_name(i);
    write_ppm(out_dir / rel, s.image);
    manifest.entries[i] = {rel, std::move(s.annotations), std::nullopt, std::nullopt};
  });
  save_manifest(out_dir, manifest);
  return manifest;
}

namespace {

void check_annotations(const ManifestEntry& e, std::size_t side, std::size_t classes) {
  for (const auto& a : e.annotations) {
    const Box& b = a.box;
    if (!(b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0 && b.right() <= static_cast<float>(side) &&
          b.bottom() <= static_cast<float>(side)))
      throw CorruptDataError("annotation out of bounds in " + e.image_file);
    if (a.class_id >= classes) throw CorruptDataError("class id out of range in " + e.image_file);
  }
}

}  // namespace

std::vector<Sample> load_dataset(const fs::path& dir, std::size_t jobs) {
  const DatasetManifest m = load_manifest(dir);
  std::vector<Sample> out(m.entries.size());
  parallel_for(m.entries.size(), jobs, [&](std::size_t i) {
    const auto& e = m.entries[i];
    check_annotations(e, m.image_side, m.classes);
    out[i].image = read_ppm(dir / e.image_file);
    if (out[i].image.shape() != Shape{m.image_side, m.image_side, 3})
      throw CorruptDataError(e.image_file + " has shape " + to_string(out[i].image.shape()));
    out[i].annotations = e.annotations;
  });
  return out;
}

std::vector<Tensor> load_sources(const fs::path& dir, std::size_t jobs) {
  const DatasetManifest m = load_manifest(dir);
  std::vector<Tensor> out(m.entries.size());
  parallel_for(m.entries.size(), jobs, [&](std::size_t i) {
    if (!m.entries[i].source_file) throw CorruptDataError("entry " + std::to_string(i) + " has no source_file");
    out[i] = read_ppm(dir / *m.entries[i].source_file);
  });
  return out;
}

DatasetManifest emit_adversarial_set(const std::vector<Sample>& originals, const std::vector<Tensor>& adversarials,
                                     const AdversarialSetInfo& info, const fs::path& out_dir) {
  if (originals.size() != adversarials.size())
    throw ShapeError(std::to_string(originals.size()) + " originals vs " + std::to_string(adversarials.size()) +
                     " adversarials");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "source", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.surrogate_arch = info.surrogate_arch;
  m.attack_config = info.attack_config;
  m.epsilon = info.epsilon;
  m.seed = info.seed;
  m.classes = info.classes;
  double total = 0.0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const Tensor& orig = originals[i].image;
    if (orig.shape() != adversarials[i].shape())
      throw ShapeError("sample " + std::to_string(i) + ": " + to_string(orig.shape()) + " vs " +
                       to_string(adversarials[i].shape()));
    const Tensor adv = quantize(adversarials[i]);
    float worst = 0.0f;
    for (std::size_t k = 0; k < adv.size(); ++k) worst = std::max(worst, std::abs(adv[k] - orig[k]));
    if (worst > static_cast<float>(info.epsilon) + 0.5f)
      throw BoundViolationError("sample " + std::to_string(i) + " moved " + std::to_string(worst) +
                                " > eps + 0.5");
    const std::string name = image_file_name(i);
    write_ppm(out_dir / "images" / name, adv);
    write_ppm(out_dir / "source" / name, orig);
    const double r = metrics::rmse(orig, adv);
    total += r;
    m.entries.push_back({"images/" + name, originals[i].annotations, "source/" + name, r});
  }
  m.mean_rmse = originals.empty() ? 0.0 : total / static_cast<double>(originals.size());
  save_manifest(out_dir, m);
  return m;
}

}  // namespace rad::corpus
