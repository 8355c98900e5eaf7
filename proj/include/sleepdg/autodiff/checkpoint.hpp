#pragma once

#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "sleepdg/autodiff/tensor.hpp"
#include "sleepdg/io/binary.hpp"

namespace sleepdg::ad {

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
constexpr const char* precision_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

/// Header line {format, precision, byte_order, tensors: [{name, shape}]} then the
/// raw values of each tensor in header order.
template <class T>
void save_checkpoint(std::ostream& os, const NamedTensors<T>& tensors) {
  nlohmann::json header;
  header["format"] = "sleepdg-checkpoint";
  header["precision"] = precision_tag<T>();
  header["byte_order"] = "little";
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t.shape()}});
  io::write_header(os, header);
  for (const auto& [name, t] : tensors) io::write_le<T>(os, t.data());
}

template <class T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
  auto os = io::open_for_write(path);
  save_checkpoint(os, tensors);
}

namespace detail {
template <class S, class T>
void read_into(std::istream& is, std::span<T> dst) {
  if constexpr (std::is_same_v<S, T>) {
    io::read_le<T>(is, dst);
  } else {
    std::vector<S> tmp(dst.size());
    io::read_le<S>(is, std::span<S>(tmp));
    for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
  }
}
}  // namespace detail

/// Overwrites the values of `tensors` (matched by name and shape) from a stream.
/// Stored precision may differ from T; values are converted.
template <class T>
void load_checkpoint(std::istream& is, NamedTensors<T>& tensors) {
  const auto header = io::read_header(is, "checkpoint");
  if (header.value("format", "") != "sleepdg-checkpoint") {
    throw ContractError("checkpoint: unexpected format tag");
  }
  const std::string precision = header.at("precision");
  if (precision != "f32" && precision != "f64") {
    throw ContractError("checkpoint: unknown precision " + precision);
  }
  const auto& list = header.at("tensors");
  if (list.size() != tensors.size()) {
    throw ContractError("checkpoint: holds " + std::to_string(list.size()) + " tensors, model has " +
                        std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, t] = tensors[i];
    const std::string stored = list[i].at("name");
    const Shape shape = list[i].at("shape").get<Shape>();
    if (stored != name || shape != t.shape()) {
      throw ContractError("checkpoint: entry " + std::to_string(i) + " is " + stored +
                          to_string(shape) + ", expected " + name + to_string(t.shape()));
    }
    auto dst = t.mutable_leaf_data();
    if (precision == "f32") {
      detail::read_into<float>(is, dst);
    } else {
      detail::read_into<double>(is, dst);
    }
  }
}

template <class T>
void load_checkpoint(const std::string& path, NamedTensors<T>& tensors) {
  auto is = io::open_for_read(path);
  load_checkpoint(is, tensors);
}

}  // namespace sleepdg::ad
