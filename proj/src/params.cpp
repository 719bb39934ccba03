#include "nautilus/params.hpp"

#include <fstream>

#include "nautilus/errors.hpp"

namespace nautilus {

const Mat& ParamStore::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw ModelError("missing parameter: " + name);
  return it->second;
}

Mat& ParamStore::at(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end()) throw ModelError("missing parameter: " + name);
  return it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : values) n += static_cast<std::size_t>(m.size());
  return n;
}

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::array<std::uint8_t, 32>& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_magic(out, "NTLS");
  write_u32(out, 1);
  out.write(reinterpret_cast<const char*>(config_hash.data()), 32);
  write_u64(out, store.step);

  auto write_record = [&](const std::string& name, const Mat& m, bool as_rank1) {
    if (name.size() > 0xffff) throw IoError("parameter name too long: " + name);
    write_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    if (as_rank1) {
      out.put(1);
      write_u32(out, static_cast<std::uint32_t>(m.size()));
    } else {
      out.put(2);
      write_u32(out, static_cast<std::uint32_t>(m.rows()));
      write_u32(out, static_cast<std::uint32_t>(m.cols()));
    }
    write_mat_f32(out, m);
  };

  Mat flags(1, 1);
  flags(0, 0) = static_cast<double>(store.flags);
  write_record("meta.flags", flags, true);
  for (const auto& [name, m] : store.values) write_record(name, m, false);
  if (!out) throw IoError("short write: " + path);
}

ParamStore load_checkpoint(const std::string& path,
                           const std::array<std::uint8_t, 32>& expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  expect_magic(in, "NTLS", path);
  const std::uint32_t version = read_u32(in, path);
  if (version != 1) throw IoError("unsupported checkpoint version in " + path);
  std::array<std::uint8_t, 32> hash{};
  in.read(reinterpret_cast<char*>(hash.data()), 32);
  if (!in) throw IoError("truncated checkpoint header: " + path);
  if (hash != expected_hash)
    throw ConfigError("checkpoint config hash mismatch: " + path);

  ParamStore store;
  store.step = read_u64(in, path);
  while (true) {
    int first = in.peek();
    if (first == std::char_traits<char>::eof()) break;
    const std::uint16_t name_len = read_u16(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IoError("truncated parameter name in " + path);
    const int rank = in.get();
    if (rank != 1 && rank != 2) throw IoError("unsupported tensor rank in " + path);
    std::uint32_t rows = 1, cols = 0;
    if (rank == 1) {
      cols = read_u32(in, path);
    } else {
      rows = read_u32(in, path);
      cols = read_u32(in, path);
    }
    Mat m = read_mat_f32(in, static_cast<int>(rows), static_cast<int>(cols), path);
    if (name == "meta.flags") {
      store.flags = static_cast<std::uint32_t>(m(0, 0));
    } else {
      if (!store.values.emplace(name, std::move(m)).second)
        throw IoError("duplicate parameter " + name + " in " + path);
    }
  }
  return store;
}

std::string params_hash(const ParamStore& store) {
  std::string blob;
  for (const auto& [name, m] : store.values) {
    blob += name;
    blob.push_back('\0');
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const float v = static_cast<float>(m(i, j));
        blob.append(reinterpret_cast<const char*>(&v), sizeof v);
      }
  }
  return sha256_hex(blob);
}

}  // namespace nautilus
