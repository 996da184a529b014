#include "rad/toynet/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "rad/core/error.hpp"

namespace rad::toynet {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'A', 'D', 'W'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CorruptDataError("truncated weights file " + path.string());
  return v;
}

void put_floats(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

void get_floats(std::ifstream& in, Tensor& t, const std::filesystem::path& path) {
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!in) throw CorruptDataError("truncated weights file " + path.string());
}

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kWeightsVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(arch_char(model.arch())));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& layer : model.layers()) {
    for (std::size_t d : layer.weight.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put_floats(out, layer.weight.values());
    put_floats(out, layer.bias);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError(path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw CorruptDataError("bad magic in " + path.string());
  if (const auto v = get<std::uint32_t>(in, path); v != kWeightsVersion)
    throw CorruptDataError("unsupported weights version " + std::to_string(v));
  const Arch arch = parse_arch(std::string(1, static_cast<char>(get<std::uint8_t>(in, path))));
  const auto count = get<std::uint32_t>(in, path);

  // The arch fixes strides, padding and widths; the head width fixes C.
  std::vector<std::array<std::uint32_t, 4>> dims;
  std::vector<Tensor> weights, biases;
  for (std::uint32_t l = 0; l < count; ++l) {
    std::array<std::uint32_t, 4> d{};
    for (auto& v : d) v = get<std::uint32_t>(in, path);
    Tensor w({d[0], d[1], d[2], d[3]});
    Tensor b({d[0]});
    get_floats(in, w, path);
    get_floats(in, b, path);
    dims.push_back(d);
    weights.push_back(std::move(w));
    biases.push_back(std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptDataError("trailing bytes in " + path.string());
  if (dims.empty()) throw CorruptDataError("weights file has no layers");

  const HeadLayout defaults;
  const std::size_t head_channels = dims.back()[0];
  if (head_channels % defaults.anchors != 0 || head_channels / defaults.anchors <= 5)
    throw CorruptDataError("head width " + std::to_string(head_channels) + " does not fit the anchor layout");
  Model model = build_detector(arch, head_channels / defaults.anchors - 5, 0);
  if (model.layers().size() != dims.size())
    throw CorruptDataError("arch " + std::string(1, arch_char(arch)) + " expects " +
                           std::to_string(model.layers().size()) + " layers, file has " + std::to_string(dims.size()));
  for (std::size_t l = 0; l < dims.size(); ++l) {
    auto& layer = model.layers()[l];
    if (layer.weight.shape() != weights[l].shape())
      throw CorruptDataError("layer " + std::to_string(l) + " has shape " + to_string(weights[l].shape()) +
                             ", arch expects " + to_string(layer.weight.shape()));
    layer.weight = WeightMatrix(std::move(weights[l]));
    layer.bias = std::move(biases[l]);
  }
  return model;
}

}  // namespace rad::toynet
