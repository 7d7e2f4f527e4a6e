#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fixtures.hpp"
#include "rpcss/checkpoint.hpp"
#include "rpcss/error.hpp"

using namespace rpcss;

namespace {

Checkpoint round_trip(const Checkpoint& c) {
  std::stringstream ss;
  write_checkpoint(ss, c);
  return read_checkpoint(ss);
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsExact) {
  SegModel m(SegModelConfig{3, 12, {10, 7}, 5, true}, 9);
  const Checkpoint c = round_trip(pack_model(m));
  EXPECT_EQ(c.dim, 12u);
  EXPECT_EQ(c.num_classes, 3u);
  const SegModel back = unpack_model(c);
  EXPECT_TRUE(back == m);
  EXPECT_EQ(back.config().hidden, (std::vector<std::size_t>{10, 7}));
  EXPECT_EQ(back.config().neighbors, 5u);
}

TEST(Checkpoint, ComponentsRoundTrip) {
  CouplingFlow flow(FlowConfig{6, 3, 9, 1.5}, 1);
  flow.randomize(1, 0.2);
  const AttentionHead att(AttentionConfig{6, 2, 3, 4}, 2);
  const ProjectionHead head(ProjectionConfig{6, 8, 5}, 3);
  MemoryBank bank(4, 3, 5, 0.9);
  bank.update(2, std::vector<double>{1, 2, 3, 4, 5});
  bank.update(2, std::vector<double>{0.5, 0, 0, 0, -1});
  bank.update(0, std::vector<double>{9, 9, 9, 9, 9});

  Checkpoint c = pack_model(SegModel(SegModelConfig{4, 6, {8}, 4, true}, 4));
  pack_flow(c, flow);
  pack_attention(c, att);
  pack_projection(c, head);
  pack_bank(c, bank);
  const Checkpoint back = round_trip(c);
  EXPECT_TRUE(unpack_flow(back).params() == flow.params());
  EXPECT_EQ(unpack_flow(back).config().scale_clamp, 1.5);
  EXPECT_TRUE(unpack_attention(back).params() == att.params());
  EXPECT_TRUE(unpack_projection(back).params() == head.params());
  EXPECT_TRUE(unpack_bank(back) == bank);
  EXPECT_TRUE(back.has_prefix("flow/"));
}

TEST(Checkpoint, FileRoundTripAndByteStability) {
  const auto dir = std::filesystem::temp_directory_path() / "rpcss_ckpt_test";
  std::filesystem::create_directories(dir);
  const SegModel m(SegModelConfig{}, 5);
  save_checkpoint(dir / "a.segm", pack_model(m));
  save_checkpoint(dir / "b.segm", pack_model(unpack_model(load_checkpoint(dir / "a.segm"))));
  std::ifstream a(dir / "a.segm", std::ios::binary), b(dir / "b.segm", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa.substr(0, 4), "SEGM");
  EXPECT_EQ(sa, sb);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsMalformedInput) {
  std::stringstream bad("NOPE");
  EXPECT_THROW(read_checkpoint(bad), FormatError);

  std::stringstream ss;
  write_checkpoint(ss, pack_model(SegModel(SegModelConfig{}, 6)));
  const std::string full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), FormatError);

  std::string wrong_version = full;
  wrong_version[4] = 9;
  std::stringstream wv(wrong_version);
  EXPECT_THROW(read_checkpoint(wv), FormatError);

  Checkpoint c;
  EXPECT_THROW(unpack_model(c), FormatError);
  EXPECT_THROW(unpack_flow(c), FormatError);
  c.add("x", Tensor::scalar(1.0));
  EXPECT_THROW(c.add("x", Tensor::scalar(2.0)), std::invalid_argument);
}

TEST(Checkpoint, ShapeMismatchDetected) {
  Checkpoint c = pack_model(SegModel(SegModelConfig{4, 8, {6}, 4, true}, 7));
  for (auto& b : c.blocks)
    if (b.name.starts_with("model/") && b.value.rank() == 2) {
      b.value = Tensor(Shape{b.value.rows() + 1, b.value.cols()});
      break;
    }
  EXPECT_THROW(unpack_model(c), FormatError);
}
