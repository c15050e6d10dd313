#include "cleansheet/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace cleansheet {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'A', 'R', 'C', 'H', 'V', '1'};

}  // namespace

template <typename Scalar>
void Archive::put(const std::string& name, const Matrix<Scalar>& value) {
  ArrayRecord rec{name, scalar_name<Scalar>(), value.rows(), value.cols(), {}};
  rec.bytes.resize(static_cast<std::size_t>(value.size()) * sizeof(Scalar));
  if (!rec.bytes.empty()) std::memcpy(rec.bytes.data(), value.data(), rec.bytes.size());
  for (auto& existing : arrays_) {
    if (existing.name == name) {
      existing = std::move(rec);
      return;
    }
  }
  arrays_.push_back(std::move(rec));
}

bool Archive::has(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return true;
  }
  return false;
}

const ArrayRecord& Archive::record(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw ParseError("archive is missing array '" + name + "'");
}

template <typename Scalar>
Matrix<Scalar> Archive::get(const std::string& name) const {
  const ArrayRecord& rec = record(name);
  Matrix<Scalar> out(rec.rows, rec.cols);
  const auto n = static_cast<std::size_t>(rec.rows * rec.cols);
  if (rec.dtype == "f4") {
    if (rec.bytes.size() != n * 4) throw ParseError("array '" + name + "' has the wrong byte length");
    std::vector<float> tmp(n);
    if (n > 0) std::memcpy(tmp.data(), rec.bytes.data(), n * 4);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = static_cast<Scalar>(tmp[i]);
  } else if (rec.dtype == "f8") {
    if (rec.bytes.size() != n * 8) throw ParseError("array '" + name + "' has the wrong byte length");
    std::vector<double> tmp(n);
    if (n > 0) std::memcpy(tmp.data(), rec.bytes.data(), n * 8);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = static_cast<Scalar>(tmp[i]);
  } else {
    throw ParseError("array '" + name + "' has unknown dtype '" + rec.dtype + "'");
  }
  return out;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  Json header;
  header["metadata"] = archive.metadata;
  header["arrays"] = Json::array();
  std::uint64_t offset = 0;
  for (const auto& a : archive.arrays()) {
    header["arrays"].push_back(
        {{"name", a.name}, {"dtype", a.dtype}, {"shape", {a.rows, a.cols}}, {"offset", offset}, {"nbytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  unsigned char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8U * static_cast<unsigned>(i))) & 0xFFU);
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : archive.arrays()) {
    out.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open archive " + path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, 8) != 0) {
    throw ParseError(path.string() + ": bad magic (field 'magic')");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[8 + static_cast<std::size_t>(i)])) << (8U * static_cast<unsigned>(i));
  if (16 + len > blob.size()) throw ParseError(path.string() + ": header length exceeds file size (field 'header')");
  Json header;
  try {
    header = Json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed header JSON (field 'header'): " + e.what());
  }
  if (!header.contains("metadata")) throw ParseError(path.string() + ": missing field 'metadata'");
  if (!header.contains("arrays") || !header["arrays"].is_array()) throw ParseError(path.string() + ": missing field 'arrays'");
  Archive archive;
  archive.metadata = header["metadata"];
  const std::size_t payload = 16 + len;
  for (const auto& entry : header["arrays"]) {
    ArrayRecord rec;
    try {
      rec.name = entry.at("name").get<std::string>();
      rec.dtype = entry.at("dtype").get<std::string>();
      rec.rows = entry.at("shape").at(0).get<Index>();
      rec.cols = entry.at("shape").at(1).get<Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (payload + offset + nbytes > blob.size()) throw ParseError(path.string() + ": array '" + rec.name + "' truncated");
      rec.bytes.resize(nbytes);
      if (nbytes > 0) std::memcpy(rec.bytes.data(), blob.data() + payload + offset, nbytes);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": malformed array entry '" + rec.name + "': " + e.what());
    }
    archive.arrays_.push_back(std::move(rec));
  }
  return archive;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template void Archive::put<float>(const std::string&, const Matrix<float>&);
template void Archive::put<double>(const std::string&, const Matrix<double>&);
template Matrix<float> Archive::get<float>(const std::string&) const;
template Matrix<double> Archive::get<double>(const std::string&) const;

}  // namespace cleansheet
