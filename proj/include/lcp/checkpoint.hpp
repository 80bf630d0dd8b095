#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "lcp/dataset.hpp"
#include "lcp/detector.hpp"

namespace lcp {

// ---------------------------------------------------------------------------
// Checkpoint format ("LCPM"):
//   magic "LCPM", version u32, layer count u32, then per layer:
//     kind tag u8 (0 conv s1, 1 conv s2, 2 head),
//     shape dims: u32 count then u32 each,
//     f64 little-endian weights,
//     channel mask: u32 count (0 = none) then u32 retained indices.
// Round-trips are bit-exact. Head geometry and class count are recovered
// from the stored shapes assuming the toy conventions (64 px input, 6
// default boxes per cell).
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_model(const ModelGraph& model, const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("save_model: cannot write " + path.string());
  os.write("LCPM", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(model.layers.size()));
  std::vector<char> buf;
  for (const auto& l : model.layers) {
    const char tag = static_cast<char>(l.kind);
    os.write(&tag, 1);
    detail::write_u32(os, static_cast<std::uint32_t>(l.weight.shape().size()));
    for (auto d : l.weight.shape())
      detail::write_u32(os, static_cast<std::uint32_t>(d));
    buf.resize(l.weight.data().size() * 8);
    std::memcpy(buf.data(), l.weight.data().data(), buf.size());
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(l.mask.size()));
    for (auto k : l.mask) detail::write_u32(os, static_cast<std::uint32_t>(k));
  }
}

inline ModelGraph load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path.string());
  std::uint64_t off = 0;
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "LCPM", 4) != 0)
    throw FormatError("bad checkpoint magic, want \"LCPM\"", 0);
  off += 4;
  const std::uint32_t version = detail::read_u32(is, off, "version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version),
                      off - 4);
  const std::uint32_t layer_count = detail::read_u32(is, off, "layer count");
  if (layer_count == 0 || layer_count > 256)
    throw FormatError("implausible layer count " + std::to_string(layer_count),
                      off - 4);

  ModelGraph model;
  std::int64_t downsample = 1;
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    char tag;
    is.read(&tag, 1);
    if (is.gcount() != 1)
      throw FormatError("truncated checkpoint at layer tag", off);
    off += 1;
    if (tag < 0 || tag > 2)
      throw FormatError("unknown layer kind tag " + std::to_string(int(tag)),
                        off - 1);
    const std::uint32_t ndims = detail::read_u32(is, off, "shape dim count");
    if (ndims != 4)
      throw FormatError("layer shape must have 4 dims, got " +
                        std::to_string(ndims), off - 4);
    Shape shape(4);
    for (auto& d : shape)
      d = detail::read_u32(is, off, "shape dim");
    const std::int64_t count = numel_of(shape);
    if (count <= 0 || count > (std::int64_t{1} << 28))
      throw FormatError("implausible weight count " + std::to_string(count),
                        off);
    std::vector<char> buf(static_cast<std::size_t>(count) * 8);
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size()))
      throw FormatError("truncated weight payload at layer " + std::to_string(li),
                        off);
    off += buf.size();
    std::vector<double> data(static_cast<std::size_t>(count));
    std::memcpy(data.data(), buf.data(), buf.size());
    ConvLayer l;
    l.kind = static_cast<LayerKind>(tag);
    l.weight = Tensor::from_data(std::move(shape), std::move(data),
                                 /*requires_grad=*/true);
    const std::uint32_t mask_count = detail::read_u32(is, off, "mask count");
    if (mask_count > static_cast<std::uint32_t>(l.weight.shape()[0]))
      throw FormatError("mask count " + std::to_string(mask_count) +
                        " exceeds layer channels", off - 4);
    for (std::uint32_t k = 0; k < mask_count; ++k)
      l.mask.push_back(detail::read_u32(is, off, "mask index"));
    if (l.kind == LayerKind::ConvStride2) downsample *= 2;
    model.layers.push_back(std::move(l));
  }

  // Recover head geometry from the stored shapes.
  const auto& headw = model.layers.back().weight;
  model.input_channels = model.layers.front().weight.shape()[1];
  model.head.grid = model.input_size / downsample;
  model.head.cell = static_cast<double>(model.input_size) /
                    static_cast<double>(model.head.grid);
  const std::int64_t per_anchor = headw.shape()[0] / model.head.anchors_per_cell();
  if (per_anchor * model.head.anchors_per_cell() != headw.shape()[0] ||
      per_anchor < 5)
    throw FormatError("head channel count " + std::to_string(headw.shape()[0]) +
                      " does not fit the anchor layout", off);
  model.num_classes = per_anchor - 4;
  return model;
}

}  // namespace lcp
