#include <fstream>

#include "leaf/binary_io.hpp"
#include "leaf/encoder.hpp"

namespace leaf {
namespace {

constexpr std::uint32_t kEncoderVersion = 1;

void write_config(std::ostream& out, const EncoderConfig& c) {
  using namespace binary;
  write_u32(out, c.num_layers);
  write_u32(out, c.num_heads);
  write_u32(out, c.hidden_dim);
  write_u32(out, c.ffn_multiplier);
  write_u32(out, c.vocab_size);
  write_u32(out, c.max_context);
  write_u32(out, c.output_dim);
  write_u8(out, static_cast<std::uint8_t>(c.pooling));
  write_u8(out, c.normalize_output ? 1 : 0);
  write_u64(out, c.seed);
}

EncoderConfig read_config(std::istream& in) {
  using namespace binary;
  EncoderConfig c;
  c.num_layers = read_u32(in);
  c.num_heads = read_u32(in);
  c.hidden_dim = read_u32(in);
  c.ffn_multiplier = read_u32(in);
  c.vocab_size = read_u32(in);
  c.max_context = read_u32(in);
  c.output_dim = read_u32(in);
  const std::uint8_t pooling = read_u8(in);
  if (pooling > 1) throw Error(ErrorKind::Format, "unknown pooling code " + std::to_string(pooling));
  c.pooling = static_cast<Pooling>(pooling);
  c.normalize_output = read_u8(in) != 0;
  c.seed = read_u64(in);
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Format, std::string("stored encoder config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

void write_encoder(std::ostream& out, const EncoderState& state) {
  binary::write_magic(out, "LEFC");
  binary::write_u32(out, kEncoderVersion);
  write_config(out, state.config);
  for_each_parameter(state, [&](const std::string&, const Parameter& p) { binary::write_floats(out, p.value); });
}

EncoderState read_encoder(std::istream& in) {
  binary::expect_magic(in, "LEFC");
  const std::uint32_t version = binary::read_u32(in);
  if (version != kEncoderVersion) throw Error(ErrorKind::Format, "unsupported LEFC version " + std::to_string(version));
  // init_encoder gives the shapes; values are overwritten.
  EncoderConfig config = read_config(in);
  EncoderState state = init_encoder(config);
  for_each_parameter(state, [&](const std::string&, Parameter& p) { binary::read_floats(in, p.value); });
  return state;
}

void save_encoder(const std::filesystem::path& path, const EncoderState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_encoder(out, state);
}

EncoderState load_encoder(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  return read_encoder(in);
}

}  // namespace leaf
