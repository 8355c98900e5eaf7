#pragma once

// Little-endian raw payload helpers shared by the checkpoint and dataset formats.
// Both formats are one JSON header line terminated by '\n' followed by raw bytes.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg::io {

template <class T>
void write_le(std::ostream& os, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const T v : values) {
      char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      std::reverse(bytes, bytes + sizeof(T));
      os.write(bytes, sizeof(T));
    }
  }
}

template <class T>
void read_le(std::istream& is, std::span<T> out) {
  static_assert(std::is_arithmetic_v<T>);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
  if (static_cast<std::size_t>(is.gcount()) != out.size_bytes()) {
    throw ContractError("truncated payload: expected " + std::to_string(out.size_bytes()) +
                        " bytes, read " + std::to_string(is.gcount()));
  }
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : out) {
      char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      std::reverse(bytes, bytes + sizeof(T));
      std::memcpy(&v, bytes, sizeof(T));
    }
  }
}

inline void write_header(std::ostream& os, const nlohmann::json& header) {
  os << header.dump() << '\n';
}

inline nlohmann::json read_header(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw ContractError(what + ": missing header line");
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(what + ": malformed header: " + e.what());
  }
}

inline std::ofstream open_for_write(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("cannot open " + path + " for writing");
  return os;
}

inline std::ifstream open_for_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open " + path);
  return is;
}

}  // namespace sleepdg::io
