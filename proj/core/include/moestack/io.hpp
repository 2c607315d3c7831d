#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace moestack {
namespace io {

// Shared on-disk layout for every artifact: a JSON header followed by a raw
// little-endian float32 payload.
//
//   [u32 header byte length][header JSON, utf-8][payload floats]
//
// Writes go to a temp file in the same directory and are renamed into
// place, so a crashed write never leaves a half-written artifact behind.

struct HeaderedFile {
  nlohmann::json header;
  std::vector<float> payload;
};

void write_headered_atomic(const std::string& path,
                           const nlohmann::json& header,
                           std::span<const float> payload);

// Throws StorageError when the file is missing/unreadable and FormatError
// when the header is malformed or the payload length disagrees with it.
HeaderedFile read_headered(const std::string& path);

uint64_t payload_hash(std::span<const float> payload);

void write_text_atomic(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace io
}  // namespace moestack
