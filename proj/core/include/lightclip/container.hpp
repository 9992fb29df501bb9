#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lightclip/tensor.hpp"

namespace lightclip {

/// One named array stored in a container. Integer data is stored as reals
/// and must be exactly representable.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Manifest document plus one raw little-endian float64 blob. The manifest
/// records name, shape, byte offset, count and an FNV-1a checksum for each
/// array; `meta` carries free-form string fields.
struct Container {
  std::string format;  // e.g. "lightclip.checkpoint"
  std::vector<NamedArray> arrays;
  std::map<std::string, std::string> meta;

  const NamedArray& find(const std::string& name) const;
  bool contains(const std::string& name) const;
};

/// Writes `<stem>.json` and `<stem>.bin` next to each other, where `manifest`
/// is the path of the json file.
void write_container(const std::filesystem::path& manifest, const Container& container);

/// Throws FormatError with byte-offset diagnostics on any mismatch between
/// manifest and blob, or when the format tag is not `expected_format`.
Container read_container(const std::filesystem::path& manifest, const std::string& expected_format);

std::uint64_t fnv1a(const unsigned char* bytes, std::size_t size);

}  // namespace lightclip
