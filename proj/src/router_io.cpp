#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "duet/router_train.hpp"

namespace duet::router {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'E', 'T', 'R', 'T', 'W', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_i32(std::ostream& os, std::int32_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
}

void put_f32(std::ostream& os, float v) {
  put_u32(os, std::bit_cast<std::uint32_t>(v));
}

void put_f64(std::ostream& os, double v) {
  const auto u = std::bit_cast<std::uint64_t>(v);
  put_u32(os, static_cast<std::uint32_t>(u & 0xffffffffULL));
  put_u32(os, static_cast<std::uint32_t>(u >> 32));
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2))
    throw SchemaMismatch("weights: truncated stream");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw SchemaMismatch("weights: truncated stream");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::int32_t get_i32(std::istream& is) {
  return static_cast<std::int32_t>(get_u32(is));
}

float get_f32(std::istream& is) {
  return std::bit_cast<float>(get_u32(is));
}

double get_f64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return std::bit_cast<double>(lo | (hi << 32));
}

}  // namespace

void save_weights(const RouterWeights& w, std::ostream& os) {
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  put_i32(os, w.cfg.topk);
  put_i32(os, w.cfg.hidden_dim_in);
  put_i32(os, w.cfg.embed_dim);
  put_i32(os, w.cfg.width);
  put_i32(os, w.cfg.blocks);
  put_i32(os, w.cfg.expansion);
  put_f64(os, w.cfg.dropout);
  put_f64(os, w.p_th);
  const auto tensors = w.tensors();
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t->rows));
    put_u32(os, static_cast<std::uint32_t>(t->cols));
    for (double v : t->data) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw FileError("weights: write failed");
}

RouterWeights load_weights(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw SchemaMismatch("weights: bad magic");
  if (get_u32(is) != kVersion)
    throw SchemaMismatch("weights: unsupported version");
  RouterConfig cfg;
  cfg.topk = get_i32(is);
  cfg.hidden_dim_in = get_i32(is);
  cfg.embed_dim = get_i32(is);
  cfg.width = get_i32(is);
  cfg.blocks = get_i32(is);
  cfg.expansion = get_i32(is);
  cfg.dropout = get_f64(is);
  cfg.validate();
  const double p_th = get_f64(is);

  RouterWeights w = RouterWeights::zeros(cfg);
  w.p_th = p_th;
  auto tensors = w.tensors();
  if (get_u32(is) != tensors.size())
    throw SchemaMismatch("weights: tensor count does not match config");
  for (auto& [name, t] : tensors) {
    const std::uint16_t len = get_u16(is);
    std::string got(len, '\0');
    if (!is.read(got.data(), len))
      throw SchemaMismatch("weights: truncated tensor name");
    if (got != name)
      throw SchemaMismatch("weights: expected tensor '" + name + "', found '" +
                           got + "'");
    if (get_u32(is) != t->rows || get_u32(is) != t->cols)
      throw SchemaMismatch("weights: tensor '" + name + "' has wrong shape");
    for (double& v : t->data) v = static_cast<double>(get_f32(is));
  }
  if (is.peek() != std::istream::traits_type::eof())
    throw SchemaMismatch("weights: trailing data after tensors");
  return w;
}

void save_weights_file(const RouterWeights& w,
                       const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write weights file: " + path.string());
  save_weights(w, f);
}

RouterWeights load_weights_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open weights file: " + path.string());
  return load_weights(f);
}

}  // namespace duet::router
