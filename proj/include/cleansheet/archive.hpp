#pragma once

// Single-file container: named dense arrays plus a JSON metadata document.
//
// Layout (little-endian):
//   8 bytes   magic "CSARCHV1"
//   8 bytes   header length H (uint64)
//   H bytes   JSON header {"metadata": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
//   payload   raw array bytes, offsets relative to the payload start

#include "cleansheet/core.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace cleansheet {

using Json = nlohmann::ordered_json;

struct ArrayRecord {
  std::string name;
  std::string dtype;  // "f4" or "f8"
  Index rows = 0;
  Index cols = 0;
  std::vector<std::byte> bytes;
};

class Archive {
 public:
  Json metadata = Json::object();

  template <typename Scalar>
  void put(const std::string& name, const Matrix<Scalar>& value);

  // Converts between f4/f8 storage if needed. Throws ParseError naming the array.
  template <typename Scalar>
  [[nodiscard]] Matrix<Scalar> get(const std::string& name) const;

  [[nodiscard]] bool has(const std::string& name) const;
  [[nodiscard]] const ArrayRecord& record(const std::string& name) const;
  [[nodiscard]] const std::vector<ArrayRecord>& arrays() const { return arrays_; }

 private:
  std::vector<ArrayRecord> arrays_;
  friend Archive read_archive(const std::filesystem::path& path);
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace cleansheet
