#include "nautilus/util.hpp"

#include <openssl/sha.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "nautilus/errors.hpp"

namespace nautilus {

void round_f32_inplace(Mat& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = f32(m(i, j));
}

std::array<std::uint8_t, 32> sha256(const void* data, std::size_t len) {
  std::array<std::uint8_t, 32> out{};
  SHA256(static_cast<const unsigned char*>(data), len, out.data());
  return out;
}

std::array<std::uint8_t, 32> sha256(const std::string& s) { return sha256(s.data(), s.size()); }

static std::string to_hex(const std::array<std::uint8_t, 32>& d) {
  static const char* digits = "0123456789abcdef";
  std::string out(64, '0');
  for (int i = 0; i < 32; ++i) {
    out[2 * i] = digits[d[static_cast<std::size_t>(i)] >> 4];
    out[2 * i + 1] = digits[d[static_cast<std::size_t>(i)] & 0xf];
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return to_hex(sha256(s)); }

std::string sha256_file_hex(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return sha256_hex(data);
}

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& ctx) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw IoError("truncated read in " + ctx);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u16(std::ostream& os, std::uint16_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }

void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_le(os, bits);
}

std::uint16_t read_u16(std::istream& is, const std::string& ctx) { return read_le<std::uint16_t>(is, ctx); }
std::uint32_t read_u32(std::istream& is, const std::string& ctx) { return read_le<std::uint32_t>(is, ctx); }
std::uint64_t read_u64(std::istream& is, const std::string& ctx) { return read_le<std::uint64_t>(is, ctx); }

float read_f32(std::istream& is, const std::string& ctx) {
  std::uint32_t bits = read_le<std::uint32_t>(is, ctx);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_le(os, bits);
}

double read_f64(std::istream& is, const std::string& ctx) {
  std::uint64_t bits = read_le<std::uint64_t>(is, ctx);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const std::string& ctx) {
  const std::uint32_t n = read_u32(is, ctx);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("truncated read in " + ctx);
  return s;
}

void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

void expect_magic(std::istream& is, const char magic[4], const std::string& ctx) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) throw IoError("bad magic in " + ctx);
}

void write_mat_f32(std::ostream& os, const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_f32(os, static_cast<float>(m(i, j)));
}

Mat read_mat_f32(std::istream& is, int rows, int cols, const std::string& ctx) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<double>(read_f32(is, ctx));
  return m;
}

void write_mat_f64(std::ostream& os, const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_f64(os, m(i, j));
}

Mat read_mat_f64(std::istream& is, int rows, int cols, const std::string& ctx) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = read_f64(is, ctx);
  return m;
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace nautilus
