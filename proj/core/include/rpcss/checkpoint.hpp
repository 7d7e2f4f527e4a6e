#pragma once

// "SEGM" model container: a little-endian header followed by named f64
// tensor blocks. Segmentation model, flow, attention, projection head and
// memory bank each write blocks under their own name prefix.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rpcss/iaam.hpp"
#include "rpcss/qcmb.hpp"
#include "rpcss/segnet.hpp"

namespace rpcss {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
  std::string name;
  Tensor value;

  bool operator==(const CheckpointBlock&) const = default;
};

struct Checkpoint {
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<CheckpointBlock> blocks;

  const Tensor* find(const std::string& name) const;
  bool has_prefix(const std::string& prefix) const;
  void add(std::string name, Tensor value);

  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint pack_model(const SegModel& model);
SegModel unpack_model(const Checkpoint& ckpt);

void pack_flow(Checkpoint& ckpt, const CouplingFlow& flow);
CouplingFlow unpack_flow(const Checkpoint& ckpt);
void pack_attention(Checkpoint& ckpt, const AttentionHead& att);
AttentionHead unpack_attention(const Checkpoint& ckpt);
void pack_projection(Checkpoint& ckpt, const ProjectionHead& head);
ProjectionHead unpack_projection(const Checkpoint& ckpt);
void pack_bank(Checkpoint& ckpt, const MemoryBank& bank);
MemoryBank unpack_bank(const Checkpoint& ckpt);

}  // namespace rpcss
