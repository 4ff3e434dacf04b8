#include <zlib.h>

#include <cstring>
#include <fstream>

#include "metaseg/metaopt.hpp"

namespace metaseg {
namespace {

constexpr char kMagic[4] = {'E', 'O', 'S', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    require<FormatError>(pos + n <= buf.size(), "checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(buf[pos]) | (static_cast<uint32_t>(buf[pos + 1]) << 8) |
                 (static_cast<uint32_t>(buf[pos + 2]) << 16) |
                 (static_cast<uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  float f32() {
    const uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
};

uint8_t kind_tag(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return 0;
    case LayerKind::fully_connected: return 1;
    case LayerKind::norm_affine: return 2;
  }
  throw FormatError("checkpoint: unknown layer kind");
}

}  // namespace

void save_meta(const MetaParams<float>& meta, const std::string& path) {
  require_isomorphic(meta.theta0, meta.lambda);
  const ArchConfig& a = meta.theta0.arch;
  a.validate();
  require<StructureError>(static_cast<int>(meta.theta0.layers.size()) == a.layer_count(),
                          "checkpoint: layer count does not match architecture");

  std::vector<uint8_t> payload;
  put_u32(payload, kVersion);
  uint32_t neurons = 0;
  for (const auto& l : meta.theta0.layers) neurons += static_cast<uint32_t>(l.neurons());
  put_u32(payload, neurons);
  put_u32(payload, static_cast<uint32_t>(a.in_channels));
  for (int c : a.block_channels) put_u32(payload, static_cast<uint32_t>(c));
  put_u32(payload, static_cast<uint32_t>(a.gn_groups));
  put_u32(payload, static_cast<uint32_t>(a.mask_channels));
  put_u32(payload, static_cast<uint32_t>(a.mask_convs));
  put_u32(payload, static_cast<uint32_t>(a.mask_window));
  put_u32(payload, static_cast<uint32_t>(a.box_hidden));
  put_u32(payload, static_cast<uint32_t>(a.box_pool_window));
  put_u32(payload, static_cast<uint32_t>(meta.theta0.layers.size()));
  for (size_t li = 0; li < meta.theta0.layers.size(); ++li) {
    const auto& l = meta.theta0.layers[li];
    const auto& lam = meta.lambda.layers[li];
    payload.push_back(kind_tag(l.spec.kind));
    put_u32(payload, static_cast<uint32_t>(l.spec.out_ch));
    put_u32(payload, static_cast<uint32_t>(l.spec.in_ch));
    put_u32(payload, static_cast<uint32_t>(l.spec.ksize));
    for (Eigen::Index i = 0; i < l.w.numel(); ++i) put_f32(payload, l.w.data[i]);
    for (Eigen::Index i = 0; i < l.b.numel(); ++i) put_f32(payload, l.b.data[i]);
    for (Eigen::Index i = 0; i < lam.w.numel(); ++i) put_f32(payload, lam.w.data[i]);
    for (Eigen::Index i = 0; i < lam.b.numel(); ++i) put_f32(payload, lam.b.data[i]);
  }

  const uint32_t crc =
      static_cast<uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require<FormatError>(f.good(), "checkpoint: cannot open for writing: " + path);
  f.write(kMagic, 4);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  std::vector<uint8_t> tail;
  put_u32(tail, crc);
  f.write(reinterpret_cast<const char*>(tail.data()), 4);
  require<FormatError>(f.good(), "checkpoint: write failed: " + path);
}

MetaParams<float> load_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require<FormatError>(f.good(), "checkpoint: cannot open: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require<FormatError>(buf.size() >= 12, "checkpoint: truncated file");
  require<FormatError>(std::memcmp(buf.data(), kMagic, 4) == 0, "checkpoint: bad magic");

  const size_t payload_len = buf.size() - 8;
  uint32_t stored_crc;
  {
    Reader tail{buf, buf.size() - 4};
    stored_crc = tail.u32();
  }
  const uint32_t crc =
      static_cast<uint32_t>(crc32(0L, buf.data() + 4, static_cast<uInt>(payload_len)));
  require<FormatError>(crc == stored_crc, "checkpoint: checksum mismatch");

  Reader r{buf, 4};
  const uint32_t version = r.u32();
  require<FormatError>(version == kVersion,
                       "checkpoint: unsupported version " + std::to_string(version));
  const uint32_t neurons = r.u32();

  ArchConfig a;
  a.in_channels = static_cast<int>(r.u32());
  a.block_channels.resize(4);
  for (int& c : a.block_channels) c = static_cast<int>(r.u32());
  a.gn_groups = static_cast<int>(r.u32());
  a.mask_channels = static_cast<int>(r.u32());
  a.mask_convs = static_cast<int>(r.u32());
  a.mask_window = static_cast<int>(r.u32());
  a.box_hidden = static_cast<int>(r.u32());
  a.box_pool_window = static_cast<int>(r.u32());
  a.validate();

  const std::vector<LayerSpec> specs = layer_specs(a);
  const uint32_t n_layers = r.u32();
  require<FormatError>(n_layers == specs.size(), "checkpoint: layer count mismatch");

  MetaParams<float> meta;
  meta.theta0.arch = a;
  uint32_t neuron_sum = 0;
  for (const LayerSpec& spec : specs) {
    const uint8_t tag = r.u8();
    require<FormatError>(tag == kind_tag(spec.kind), "checkpoint: layer kind mismatch");
    require<FormatError>(r.u32() == static_cast<uint32_t>(spec.out_ch) &&
                             r.u32() == static_cast<uint32_t>(spec.in_ch) &&
                             r.u32() == static_cast<uint32_t>(spec.ksize),
                         "checkpoint: layer shape mismatch");
    LayerParams<float> l;
    l.spec = spec;
    l.w = Tensor<float>(layer_weight_shape(spec));
    l.b = Tensor<float>({spec.out_ch});
    for (Eigen::Index i = 0; i < l.w.numel(); ++i) l.w.data[i] = r.f32();
    for (Eigen::Index i = 0; i < l.b.numel(); ++i) l.b.data[i] = r.f32();
    LambdaLayer<float> lam{Tensor<float>({spec.out_ch}), Tensor<float>({spec.out_ch})};
    for (Eigen::Index i = 0; i < lam.w.numel(); ++i) lam.w.data[i] = r.f32();
    for (Eigen::Index i = 0; i < lam.b.numel(); ++i) lam.b.data[i] = r.f32();
    meta.theta0.layers.push_back(std::move(l));
    meta.lambda.layers.push_back(std::move(lam));
    neuron_sum += static_cast<uint32_t>(spec.out_ch);
  }
  require<FormatError>(r.pos == buf.size() - 4, "checkpoint: trailing bytes");
  require<FormatError>(neuron_sum == neurons, "checkpoint: neuron count mismatch");
  return meta;
}

}  // namespace metaseg
