#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace nautilus {

using Mat = Eigen::MatrixXd;

// Round a double to the nearest float-representable value. Parameters and
// stored features are kept float-representable so the f32 checkpoint and
// corpus formats round-trip exactly.
inline double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

void round_f32_inplace(Mat& m);

// SHA-256 as 32 raw bytes / lowercase hex.
std::array<std::uint8_t, 32> sha256(const void* data, std::size_t len);
std::array<std::uint8_t, 32> sha256(const std::string& s);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::filesystem::path& p);

// Little-endian binary primitives (throw IoError on short reads).
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
std::uint16_t read_u16(std::istream& is, const std::string& ctx);
std::uint32_t read_u32(std::istream& is, const std::string& ctx);
std::uint64_t read_u64(std::istream& is, const std::string& ctx);
float read_f32(std::istream& is, const std::string& ctx);
double read_f64(std::istream& is, const std::string& ctx);
void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4], const std::string& ctx);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is, const std::string& ctx);

// Row-major f32 matrix payloads; f64 for full-precision diagnostics.
void write_mat_f32(std::ostream& os, const Mat& m);
Mat read_mat_f32(std::istream& is, int rows, int cols, const std::string& ctx);
void write_mat_f64(std::ostream& os, const Mat& m);
Mat read_mat_f64(std::istream& is, int rows, int cols, const std::string& ctx);

std::string format_g17(double v);

}  // namespace nautilus
