#include "lightclip/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lightclip/errors.hpp"

namespace lightclip {

namespace {

constexpr int kVersion = 1;

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

void put_le(double value, unsigned char* out) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  for (int b = 0; b < 8; ++b) out[b] = static_cast<unsigned char>(bits >> (8 * b));
}

double get_le(const unsigned char* in) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | in[b];
  return std::bit_cast<double>(bits);
}

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

std::uint64_t fnv1a(const unsigned char* bytes, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

const NamedArray& Container::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError(format + ": missing array '" + name + "'");
}

bool Container::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void write_container(const std::filesystem::path& manifest, const Container& container) {
  const auto blob = blob_path(manifest);
  nlohmann::json doc;
  doc["format"] = container.format;
  doc["version"] = kVersion;
  doc["blob"] = blob.filename().string();
  doc["byte_order"] = "little";
  doc["dtype"] = "float64";
  doc["meta"] = container.meta;
  doc["arrays"] = nlohmann::json::array();

  std::vector<unsigned char> bytes;
  for (const auto& a : container.arrays) {
    if (numel_of(a.shape) != a.values.size()) {
      throw DimensionError("container array '" + a.name + "' has " + std::to_string(a.values.size()) +
                           " values for shape " + shape_str(a.shape));
    }
    const std::size_t offset = bytes.size();
    bytes.resize(offset + 8 * a.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) put_le(a.values[i], bytes.data() + offset + 8 * i);
    doc["arrays"].push_back({{"name", a.name},
                             {"shape", a.shape},
                             {"offset", offset},
                             {"count", a.values.size()},
                             {"checksum", hex64(fnv1a(bytes.data() + offset, 8 * a.values.size()))}});
  }

  std::ofstream bin(blob, std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw InputError("cannot write " + blob.string());
  std::ofstream js(manifest, std::ios::trunc);
  js << doc.dump(2) << '\n';
  if (!js) throw InputError("cannot write " + manifest.string());
}

Container read_container(const std::filesystem::path& manifest, const std::string& expected_format) {
  std::ifstream js(manifest);
  if (!js) throw InputError("cannot open " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": invalid manifest: " + e.what());
  }

  Container out;
  std::vector<unsigned char> bytes;
  try {
    out.format = doc.at("format").get<std::string>();
    if (out.format != expected_format) {
      throw FormatError(manifest.string() + ": format '" + out.format + "', expected '" +
                        expected_format + "'");
    }
    if (doc.at("version").get<int>() != kVersion) throw FormatError(manifest.string() + ": unsupported version");
    if (doc.at("byte_order").get<std::string>() != "little" || doc.at("dtype").get<std::string>() != "float64") {
      throw FormatError(manifest.string() + ": only little-endian float64 blobs are supported");
    }
    out.meta = doc.at("meta").get<std::map<std::string, std::string>>();

    auto blob = manifest.parent_path() / doc.at("blob").get<std::string>();
    std::ifstream bin(blob, std::ios::binary);
    if (!bin) throw InputError("cannot open " + blob.string());
    bytes.assign(std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>());

    std::size_t expected_end = 0;
    for (const auto& entry : doc.at("arrays")) {
      NamedArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (count != numel_of(a.shape)) {
        throw FormatError("array '" + a.name + "': count " + std::to_string(count) +
                          " does not match shape " + shape_str(a.shape));
      }
      if (offset != expected_end) {
        throw FormatError("array '" + a.name + "': offset " + std::to_string(offset) +
                          " but previous array ends at byte " + std::to_string(expected_end));
      }
      if (offset + 8 * count > bytes.size()) {
        throw FormatError("array '" + a.name + "' spans bytes [" + std::to_string(offset) + ", " +
                          std::to_string(offset + 8 * count) + ") but blob has " +
                          std::to_string(bytes.size()) + " bytes");
      }
      const auto sum = hex64(fnv1a(bytes.data() + offset, 8 * count));
      if (sum != entry.at("checksum").get<std::string>()) {
        throw FormatError("array '" + a.name + "' at byte offset " + std::to_string(offset) +
                          " (" + std::to_string(8 * count) + " bytes): checksum mismatch");
      }
      a.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) a.values[i] = get_le(bytes.data() + offset + 8 * i);
      expected_end = offset + 8 * count;
      out.arrays.push_back(std::move(a));
    }
    if (expected_end != bytes.size()) {
      throw FormatError("blob has " + std::to_string(bytes.size()) + " bytes, manifest accounts for " +
                        std::to_string(expected_end));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace lightclip
