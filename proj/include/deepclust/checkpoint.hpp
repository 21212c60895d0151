#pragma once

// Binary checkpoint (.dcls) encoder/decoder. Byte layout is documented in
// docs/checkpoint_format.md; every multi-byte field is little-endian.

#include "deepclust/clustering.hpp"
#include "deepclust/error.hpp"
#include "deepclust/metrics.hpp"
#include "deepclust/nn/network.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

namespace deepclust {

inline constexpr char          kCheckpointMagic[4]     = {'D', 'C', 'L', 'S'};
inline constexpr std::uint16_t kCheckpointVersion      = 1;

/// Everything needed to continue or evaluate a run.
struct Checkpoint
{
  nn::Network<float>                 net;
  std::uint64_t                      run_seed{0};
  std::size_t                        epoch{0};  // completed epochs; also the per-epoch stream position
  std::optional<clustering::Labels>  prev_assignments;
  std::vector<metrics::EpochMetrics> metrics_log;
};

namespace detail {

class ByteWriter
{
public:
  void u8(std::uint8_t v)
  {
    bytes_.push_back(v);
  }
  void u16(std::uint16_t v)
  {
    put(v, 2);
  }
  void u32(std::uint64_t v)
  {
    if (v > 0xffffffffULL)
      throw ValueError("value " + std::to_string(v) + " does not fit the checkpoint's u32 field");
    put(v, 4);
  }
  void u64(std::uint64_t v)
  {
    put(v, 8);
  }
  void f32(float v)
  {
    put(std::bit_cast<std::uint32_t>(v), 4);
  }
  void f64(double v)
  {
    put(std::bit_cast<std::uint64_t>(v), 8);
  }
  void str(std::string const &s)
  {
    u32(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> &bytes()
  {
    return bytes_;
  }

private:
  void put(std::uint64_t v, int n)
  {
    for (int i = 0; i < n; ++i)
      bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader
{
public:
  ByteReader(std::vector<std::uint8_t> const &bytes, std::size_t end)
    : bytes_(bytes)
    , end_(end)
  {}

  std::uint8_t u8()
  {
    return static_cast<std::uint8_t>(get(1));
  }
  std::uint16_t u16()
  {
    return static_cast<std::uint16_t>(get(2));
  }
  std::uint32_t u32()
  {
    return static_cast<std::uint32_t>(get(4));
  }
  std::uint64_t u64()
  {
    return get(8);
  }
  float f32()
  {
    return std::bit_cast<float>(static_cast<std::uint32_t>(get(4)));
  }
  double f64()
  {
    return std::bit_cast<double>(get(8));
  }
  std::string str()
  {
    std::size_t const n = u32();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t position() const
  {
    return pos_;
  }

private:
  void need(std::size_t n) const
  {
    if (pos_ + n > end_)
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t get(int n)
  {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<std::uint8_t> const &bytes_;
  std::size_t                      end_;
  std::size_t                      pos_{0};
};

inline std::uint64_t fnv1a(std::uint8_t const *data, std::size_t n)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i)
  {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void write_layer_specs(ByteWriter &w, std::vector<nn::Layer<float>> const &layers)
{
  for (auto const &l : layers)
  {
    w.u8(static_cast<std::uint8_t>(l.spec.kind));
    w.u32(l.spec.in_channels);
    w.u32(l.spec.out_channels);
    w.u32(l.spec.kernel);
    w.u32(l.spec.stride);
    w.u32(l.spec.padding);
    w.u32(l.spec.output_size);
  }
}

inline nn::LayerSpec read_layer_spec(ByteReader &r)
{
  nn::LayerSpec s;
  auto const    kind = r.u8();
  if (kind < 1 || kind > 7)
    throw FormatError("checkpoint names unknown layer kind " + std::to_string(kind));
  s.kind         = static_cast<nn::LayerKind>(kind);
  s.in_channels  = r.u32();
  s.out_channels = r.u32();
  s.kernel       = r.u32();
  s.stride       = r.u32();
  s.padding      = r.u32();
  s.output_size  = r.u32();
  try
  {
    s.validate();
  }
  catch (ValueError const &e)
  {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(Checkpoint const &ckpt)
{
  detail::ByteWriter w;
  for (char c : kCheckpointMagic)
    w.u8(static_cast<std::uint8_t>(c));
  w.u16(kCheckpointVersion);
  w.u8(sizeof(float));
  w.u8(0);

  auto const &net = ckpt.net;
  w.str(net.architecture().preset);
  w.u32(net.architecture().input_channels);
  w.u32(net.architecture().pool_output);
  w.u64(net.seed());
  w.u32(net.feature_layers().size());
  w.u32(net.classifier_layers().size());
  detail::write_layer_specs(w, net.feature_layers());
  detail::write_layer_specs(w, net.classifier_layers());

  w.u64(ckpt.run_seed);
  w.u64(ckpt.epoch);
  w.u8(ckpt.prev_assignments ? 1 : 0);
  if (ckpt.prev_assignments)
  {
    w.u64(ckpt.prev_assignments->size());
    for (auto l : *ckpt.prev_assignments)
      w.u32(l);
  }
  w.u64(ckpt.metrics_log.size());
  for (auto const &m : ckpt.metrics_log)
  {
    w.u64(m.epoch);
    w.f64(m.loss);
    w.u8(m.nmi_prev ? 1 : 0);
    w.f64(m.nmi_prev.value_or(0.0));
    w.f64(m.nmi_labels);
    w.f64(m.purity);
    w.u64(m.sizes.min);
    w.u64(m.sizes.max);
    w.u64(m.sizes.nonempty);
  }

  for (auto const *layers : {&net.feature_layers(), &net.classifier_layers()})
    for (auto const &l : *layers)
      for (auto const *group : {&l.params, &l.momentum, &l.buffers})
        for (auto const &t : *group)
          for (float v : t.values())
            w.f32(v);

  auto &bytes = w.bytes();
  w.u64(detail::fnv1a(bytes.data(), bytes.size()));
  return std::move(bytes);
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> const &bytes)
{
  if (bytes.size() < 8 + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint file (missing DCLS magic)");
  {
    detail::ByteReader head(bytes, bytes.size());
    head.u32();
    auto const version = head.u16();
    if (version != kCheckpointVersion)
      throw FormatError("checkpoint format version " + std::to_string(version) +
                        " is not supported (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  std::size_t const body = bytes.size() - 8;
  std::uint64_t     stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[body + static_cast<std::size_t>(i)]) << (8 * i);
  if (stored != detail::fnv1a(bytes.data(), body))
    throw FormatError("checkpoint checksum mismatch (file corrupted or truncated)");

  detail::ByteReader r(bytes, body);
  r.u32();
  r.u16();
  if (auto const scalar = r.u8(); scalar != sizeof(float))
    throw FormatError("checkpoint stores " + std::to_string(scalar) + "-byte scalars; expected 4");
  r.u8();

  nn::Architecture arch;
  arch.preset          = r.str();
  arch.input_channels  = r.u32();
  arch.pool_output     = r.u32();
  auto const net_seed  = r.u64();
  auto const n_feature = r.u32();
  auto const n_head    = r.u32();
  std::vector<nn::LayerSpec> feature_specs, head_specs;
  for (std::uint32_t i = 0; i < n_feature; ++i)
    feature_specs.push_back(detail::read_layer_spec(r));
  for (std::uint32_t i = 0; i < n_head; ++i)
    head_specs.push_back(detail::read_layer_spec(r));

  Checkpoint ckpt;
  ckpt.run_seed = r.u64();
  ckpt.epoch    = r.u64();
  if (r.u8() != 0)
  {
    clustering::Labels prev(r.u64());
    for (auto &l : prev)
      l = r.u32();
    ckpt.prev_assignments = std::move(prev);
  }
  auto const rows = r.u64();
  for (std::uint64_t i = 0; i < rows; ++i)
  {
    metrics::EpochMetrics m;
    m.epoch             = r.u64();
    m.loss              = r.f64();
    bool const has_prev = r.u8() != 0;
    double const prev   = r.f64();
    if (has_prev)
      m.nmi_prev = prev;
    m.nmi_labels     = r.f64();
    m.purity         = r.f64();
    m.sizes.min      = r.u64();
    m.sizes.max      = r.u64();
    m.sizes.nonempty = r.u64();
    ckpt.metrics_log.push_back(m);
  }

  auto read_layers = [&](std::vector<nn::LayerSpec> const &specs) {
    std::vector<nn::Layer<float>> layers;
    for (auto const &spec : specs)
    {
      nn::Layer<float> l{spec, {}, {}, {}};
      auto             fill = [&](std::vector<Tensor<float>> &group, std::vector<Shape> const &shapes) {
        for (auto const &shape : shapes)
        {
          Tensor<float> t(shape);
          for (auto &v : t.values())
            v = r.f32();
          group.push_back(std::move(t));
        }
      };
      fill(l.params, nn::parameter_shapes(spec));
      fill(l.momentum, nn::parameter_shapes(spec));
      fill(l.buffers, nn::buffer_shapes(spec));
      layers.push_back(std::move(l));
    }
    return layers;
  };
  auto features   = read_layers(feature_specs);
  auto classifier = read_layers(head_specs);
  if (r.position() != body)
    throw FormatError("checkpoint has " + std::to_string(body - r.position()) + " unexpected trailing bytes");
  try
  {
    ckpt.net = nn::Network<float>(arch, std::move(features), std::move(classifier), net_seed);
  }
  catch (Error const &e)
  {
    throw FormatError(std::string("checkpoint network is inconsistent: ") + e.what());
  }
  return ckpt;
}

/// Writes via a temporary file and rename so a crash never leaves a partial checkpoint.
inline void save_checkpoint(Checkpoint const &ckpt, std::filesystem::path const &path)
{
  auto const bytes = encode_checkpoint(ckpt);
  auto       tmp   = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<char const *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush())
      throw IoError("write failed for checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(std::filesystem::path const &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace deepclust
