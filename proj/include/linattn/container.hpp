#pragma once

// Checkpoint container: a UTF-8 JSON manifest followed by a name-indexed
// table of contents and concatenated tensor records in the binary tensor
// format. Used for model checkpoints and recurrent-state snapshots.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "linattn/tensor.hpp"

namespace linattn {

namespace detail {
inline constexpr char kContainerMagic[4] = {'L', 'A', 'C', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;
}  // namespace detail

template <typename T>
class ContainerWriter {
 public:
  void add(const std::string& name, const Tensor<T>& t) {
    std::ostringstream os(std::ios::binary);
    save_tensor(os, t);
    records_.emplace_back(name, os.str());
  }

  void write(const std::string& path, const std::string& manifest_json) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(detail::kContainerMagic, 4);
    detail::write_pod(os, detail::kContainerVersion);
    detail::write_pod(os, static_cast<std::uint64_t>(manifest_json.size()));
    os.write(manifest_json.data(),
             static_cast<std::streamsize>(manifest_json.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(records_.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, payload] : records_) {
      detail::write_pod(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod(os, offset);
      detail::write_pod(os, static_cast<std::uint64_t>(payload.size()));
      offset += payload.size();
    }
    for (const auto& [name, payload] : records_)
      os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw std::runtime_error("container write failed: " + path);
  }

 private:
  std::vector<std::pair<std::string, std::string>> records_;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::string& path) : is_(path, std::ios::binary) {
    if (!is_) throw std::runtime_error("cannot open for read: " + path);
    char magic[4];
    is_.read(magic, 4);
    if (!is_ || std::memcmp(magic, detail::kContainerMagic, 4) != 0)
      throw std::runtime_error("not a checkpoint container: " + path);
    const auto version = detail::read_pod<std::uint32_t>(is_);
    if (version != detail::kContainerVersion)
      throw std::runtime_error("unsupported container version " +
                               std::to_string(version));
    const auto mlen = detail::read_pod<std::uint64_t>(is_);
    manifest_.resize(mlen);
    is_.read(manifest_.data(), static_cast<std::streamsize>(mlen));
    const auto count = detail::read_pod<std::uint32_t>(is_);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = detail::read_pod<std::uint16_t>(is_);
      std::string name(name_len, '\0');
      is_.read(name.data(), name_len);
      const auto offset = detail::read_pod<std::uint64_t>(is_);
      const auto len = detail::read_pod<std::uint64_t>(is_);
      order_.push_back(name);
      toc_[name] = {offset, len};
    }
    if (!is_) throw std::runtime_error("container read failed: " + path);
    data_start_ = is_.tellg();
  }

  const std::string& manifest() const { return manifest_; }
  const std::vector<std::string>& names() const { return order_; }
  bool contains(const std::string& name) const { return toc_.count(name) > 0; }

  template <typename T>
  Tensor<T> read(const std::string& name) {
    auto it = toc_.find(name);
    if (it == toc_.end())
      throw std::runtime_error("container: no tensor named '" + name + "'");
    is_.clear();
    is_.seekg(data_start_ + static_cast<std::streamoff>(it->second.first));
    return load_tensor<T>(is_);
  }

 private:
  std::ifstream is_;
  std::string manifest_;
  std::vector<std::string> order_;
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> toc_;
  std::streamoff data_start_ = 0;
};

}  // namespace linattn
