#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sleepdg/errors.hpp"
#include "sleepdg/io/binary.hpp"
#include "sleepdg/synthetic.hpp"

namespace sleepdg::data {

inline std::string domain_file_name(std::size_t domain_id) {
  return "domain_" + std::to_string(domain_id) + ".bin";
}

inline nlohmann::json dataset_header(const DomainDataset& ds) {
  const auto& s = ds.spec;
  return {{"domain_id", s.domain_id},
          {"shape", {ds.count, s.sequence_length, s.samples_per_epoch, s.channels}},
          {"label_shape", {ds.count, s.sequence_length}},
          {"spec", s},
          {"norm_mean", ds.norm_mean},
          {"norm_std", ds.norm_std},
          {"byte_order", "little"},
          {"dtype", "f32"},
          {"label_dtype", "u8"}};
}

inline void write_dataset(const std::string& path, const DomainDataset& ds) {
  if (ds.signals.size() != ds.count * ds.sequence_size() ||
      ds.labels.size() != ds.count * ds.spec.sequence_length) {
    throw ContractError("write_dataset: payload size does not match the dataset shape");
  }
  auto os = io::open_for_write(path);
  io::write_header(os, dataset_header(ds));
  io::write_le<float>(os, ds.signals);
  io::write_le<std::uint8_t>(os, ds.labels);
  if (!os) throw ContractError("write_dataset: failed writing " + path);
}

/// Parsed header of a dataset file; the payload is not touched.
struct DatasetHeader {
  std::size_t domain_id = 0;
  std::size_t count = 0;
  DomainSpec spec;
  std::vector<double> norm_mean, norm_std;
};

inline DatasetHeader parse_dataset_header(const nlohmann::json& h, const std::string& path) {
  try {
    if (h.at("byte_order") != "little" || h.at("dtype") != "f32") {
      throw ContractError(path + ": unsupported byte order or dtype");
    }
    DatasetHeader out;
    out.domain_id = h.at("domain_id").get<std::size_t>();
    out.spec = h.at("spec").get<DomainSpec>();
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4 || shape[1] != out.spec.sequence_length ||
        shape[2] != out.spec.samples_per_epoch || shape[3] != out.spec.channels) {
      throw ContractError(path + ": shape disagrees with the embedded spec");
    }
    const auto label_shape = h.at("label_shape").get<std::vector<std::size_t>>();
    if (label_shape != std::vector<std::size_t>{shape[0], shape[1]}) {
      throw ContractError(path + ": label shape disagrees with the signal shape");
    }
    out.count = shape[0];
    if (out.spec.domain_id != out.domain_id) throw ContractError(path + ": domain id mismatch");
    h.at("norm_mean").get_to(out.norm_mean);
    h.at("norm_std").get_to(out.norm_std);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(path + ": malformed dataset header: " + e.what());
  }
}

inline DatasetHeader read_dataset_header(const std::string& path) {
  auto is = io::open_for_read(path);
  return parse_dataset_header(io::read_header(is, path), path);
}

inline DomainDataset read_dataset(const std::string& path) {
  auto is = io::open_for_read(path);
  const auto h = parse_dataset_header(io::read_header(is, path), path);
  DomainDataset ds;
  ds.spec = h.spec;
  ds.count = h.count;
  ds.norm_mean = h.norm_mean;
  ds.norm_std = h.norm_std;
  ds.signals.resize(ds.count * ds.sequence_size());
  ds.labels.resize(ds.count * ds.spec.sequence_length);
  io::read_le<float>(is, ds.signals);
  io::read_le<std::uint8_t>(is, ds.labels);
  for (auto l : ds.labels) {
    if (l >= kStages) throw ContractError(path + ": label " + std::to_string(l) + " out of range");
  }
  return ds;
}

/// Maps domain ids to files. Registration reads headers only; payloads are
/// read on demand, so a domain that is never loaded is never touched.
class DatasetRegistry {
 public:
  void add(const std::string& path) {
    const auto h = read_dataset_header(path);
    if (!paths_.emplace(h.domain_id, path).second) {
      throw ContractError("duplicate domain id " + std::to_string(h.domain_id) + " in " + path);
    }
  }

  /// Registers every domain_*.bin file of a directory.
  static DatasetRegistry from_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ContractError("data directory not found: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.rfind("domain_", 0) == 0 && e.path().extension() == ".bin") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    DatasetRegistry reg;
    for (const auto& f : files) reg.add(f);
    if (reg.size() == 0) throw ContractError("no domain files in " + dir);
    return reg;
  }

  std::vector<std::size_t> ids() const {
    std::vector<std::size_t> out;
    for (const auto& [id, p] : paths_) out.push_back(id);
    return out;
  }
  std::size_t size() const { return paths_.size(); }
  bool contains(std::size_t id) const { return paths_.count(id) != 0; }

  DomainDataset load(std::size_t id) const {
    auto it = paths_.find(id);
    if (it == paths_.end()) throw ContractError("domain " + std::to_string(id) + " not registered");
    return read_dataset(it->second);
  }

 private:
  std::map<std::size_t, std::string> paths_;
};

}  // namespace sleepdg::data
