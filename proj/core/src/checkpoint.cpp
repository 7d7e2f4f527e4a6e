#include "rpcss/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "rpcss/error.hpp"

namespace rpcss {

namespace {

constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  char b[8];
  for (int i = 0; i < bytes; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, bytes);
}

std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("checkpoint: truncated data");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le(is, 4)); }

const Tensor& require(const Checkpoint& ckpt, const std::string& name) {
  const Tensor* t = ckpt.find(name);
  if (!t) throw FormatError("checkpoint: missing block '" + name + "'");
  return *t;
}

void pack_params(Checkpoint& ckpt, const std::string& prefix, const ParamStore& params) {
  for (std::size_t i = 0; i < params.size(); ++i) ckpt.add(prefix + params.name(i), params.at(i));
}

void unpack_params(const Checkpoint& ckpt, const std::string& prefix, ParamStore& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = require(ckpt, prefix + params.name(i));
    if (t.shape() != params.at(i).shape()) {
      throw FormatError("checkpoint: block '" + prefix + params.name(i) + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(params.at(i).shape()));
    }
    params.at(i) = t;
  }
}

std::size_t as_size(double v, const char* what) {
  if (!(v >= 0.0) || v != std::floor(v)) throw FormatError(std::string("checkpoint: bad ") + what);
  return static_cast<std::size_t>(v);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return &b.value;
  return nullptr;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& b : blocks)
    if (b.name.starts_with(prefix)) return true;
  return false;
}

void Checkpoint::add(std::string name, Tensor value) {
  if (find(name)) throw std::invalid_argument("checkpoint: duplicate block '" + name + "'");
  blocks.push_back({std::move(name), std::move(value)});
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("SEGM", 4);
  put_le(os, kCheckpointVersion, 4);
  put_le(os, ckpt.dim, 4);
  put_le(os, ckpt.num_classes, 4);
  for (const auto& b : ckpt.blocks) {
    put_le(os, b.name.size(), 4);
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    put_le(os, b.value.rank(), 4);
    for (std::size_t d : b.value.shape()) put_le(os, d, 4);
    for (double v : b.value.data()) put_le(os, std::bit_cast<std::uint64_t>(v), 8);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "SEGM") throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.dim = get_u32(is);
  ckpt.num_classes = get_u32(is);
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(is);
    if (len == 0 || len > kMaxNameLength) throw FormatError("checkpoint: bad block name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated block name");
    const std::uint32_t rank = get_u32(is);
    if (rank > kMaxRank) throw FormatError("checkpoint: block '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(is);
    Tensor t(shape);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = std::bit_cast<double>(get_le(is, 8));
    ckpt.add(std::move(name), std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// model.config = [neighbors, bias, hidden widths...]
Checkpoint pack_model(const SegModel& model) {
  Checkpoint ckpt;
  ckpt.dim = static_cast<std::uint32_t>(model.dim());
  ckpt.num_classes = static_cast<std::uint32_t>(model.num_classes());
  const SegModelConfig& cfg = model.config();
  std::vector<double> meta{static_cast<double>(cfg.neighbors), cfg.bias ? 1.0 : 0.0};
  for (std::size_t h : cfg.hidden) meta.push_back(static_cast<double>(h));
  ckpt.add("model.config", Tensor(Shape{meta.size()}, meta));
  pack_params(ckpt, "model/", model.params());
  return ckpt;
}

SegModel unpack_model(const Checkpoint& ckpt) {
  const Tensor& meta = require(ckpt, "model.config");
  if (meta.size() < 2) throw FormatError("checkpoint: short model.config");
  SegModelConfig cfg;
  cfg.num_classes = static_cast<int>(ckpt.num_classes);
  cfg.dim = ckpt.dim;
  cfg.neighbors = as_size(meta[0], "neighbour count");
  cfg.bias = meta[1] != 0.0;
  cfg.hidden.clear();
  for (std::size_t i = 2; i < meta.size(); ++i) cfg.hidden.push_back(as_size(meta[i], "hidden width"));
  SegModel model(cfg, 0);
  unpack_params(ckpt, "model/", model.params());
  return model;
}

void pack_flow(Checkpoint& ckpt, const CouplingFlow& flow) {
  const FlowConfig& c = flow.config();
  ckpt.add("flow.config", Tensor::vector({static_cast<double>(c.dim), static_cast<double>(c.blocks),
                                          static_cast<double>(c.hidden), c.scale_clamp}));
  pack_params(ckpt, "flow/", flow.params());
}

CouplingFlow unpack_flow(const Checkpoint& ckpt) {
  const Tensor& meta = require(ckpt, "flow.config");
  if (meta.size() != 4) throw FormatError("checkpoint: bad flow.config");
  CouplingFlow flow(FlowConfig{as_size(meta[0], "flow dim"), as_size(meta[1], "flow blocks"),
                               as_size(meta[2], "flow hidden"), meta[3]},
                    0);
  unpack_params(ckpt, "flow/", flow.params());
  return flow;
}

void pack_attention(Checkpoint& ckpt, const AttentionHead& att) {
  const AttentionConfig& c = att.config();
  ckpt.add("attention.config", Tensor::vector({static_cast<double>(c.dim), static_cast<double>(c.heads),
                                               static_cast<double>(c.head_dim), static_cast<double>(c.num_classes)}));
  pack_params(ckpt, "attention/", att.params());
}

AttentionHead unpack_attention(const Checkpoint& ckpt) {
  const Tensor& meta = require(ckpt, "attention.config");
  if (meta.size() != 4) throw FormatError("checkpoint: bad attention.config");
  AttentionHead att(AttentionConfig{as_size(meta[0], "attention dim"), as_size(meta[1], "attention heads"),
                                    as_size(meta[2], "attention head width"),
                                    static_cast<int>(as_size(meta[3], "attention classes"))},
                    0);
  unpack_params(ckpt, "attention/", att.params());
  return att;
}

void pack_projection(Checkpoint& ckpt, const ProjectionHead& head) {
  const ProjectionConfig& c = head.config();
  ckpt.add("projection.config", Tensor::vector({static_cast<double>(c.in), static_cast<double>(c.hidden),
                                                static_cast<double>(c.out)}));
  pack_params(ckpt, "projection/", head.params());
}

ProjectionHead unpack_projection(const Checkpoint& ckpt) {
  const Tensor& meta = require(ckpt, "projection.config");
  if (meta.size() != 3) throw FormatError("checkpoint: bad projection.config");
  ProjectionHead head(ProjectionConfig{as_size(meta[0], "projection in"), as_size(meta[1], "projection hidden"),
                                       as_size(meta[2], "projection out")},
                      0);
  unpack_params(ckpt, "projection/", head.params());
  return head;
}

// bank.meta = [momentum, clock]; bank.stamps holds the per-slot update clock
// (0 marks an unfilled slot).
void pack_bank(Checkpoint& ckpt, const MemoryBank& bank) {
  ckpt.add("bank.meta", Tensor::vector({bank.momentum(), static_cast<double>(bank.clock())}));
  ckpt.add("bank.prototypes", bank.prototypes());
  std::vector<double> stamps(bank.stamps().begin(), bank.stamps().end());
  ckpt.add("bank.stamps", Tensor(Shape{stamps.size()}, stamps));
}

MemoryBank unpack_bank(const Checkpoint& ckpt) {
  const Tensor& meta = require(ckpt, "bank.meta");
  if (meta.size() != 2) throw FormatError("checkpoint: bad bank.meta");
  const Tensor& stamps = require(ckpt, "bank.stamps");
  std::vector<std::uint64_t> s;
  for (double v : stamps.data()) s.push_back(as_size(v, "bank stamp"));
  return MemoryBank::restore(meta[0], require(ckpt, "bank.prototypes"), std::move(s),
                             as_size(meta[1], "bank clock"));
}

}  // namespace rpcss
