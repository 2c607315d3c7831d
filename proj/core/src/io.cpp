#include "moestack/io.hpp"

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "moestack/common.hpp"

namespace moestack {
namespace io {

namespace {

std::string temp_path_for(const std::string& path) {
  return path + ".tmp." + std::to_string(static_cast<unsigned>(::getpid()));
}

}  // namespace

void write_headered_atomic(const std::string& path,
                           const nlohmann::json& header,
                           std::span<const float> payload) {
  const std::string hdr = header.dump();
  if (hdr.size() > 0xFFFFFFFFu) throw FormatError("header too large");
  const uint32_t hlen = static_cast<uint32_t>(hdr.size());

  const std::string tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open for write: " + tmp);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) {
      std::filesystem::remove(tmp);
      throw StorageError("write failed: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw StorageError("rename failed for " + path + ": " + ec.message());
  }
}

HeaderedFile read_headered(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open: " + path);
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw FormatError("truncated header length in " + path);
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), hlen);
  if (!in) throw FormatError("truncated header in " + path);

  HeaderedFile f;
  try {
    f.header = nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("bad header JSON in " + path + ": " + e.what());
  }

  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  const auto payload_bytes =
      static_cast<size_t>(end) - sizeof(hlen) - static_cast<size_t>(hlen);
  if (payload_bytes % sizeof(float) != 0) {
    throw FormatError("payload size not float-aligned in " + path);
  }
  f.payload.resize(payload_bytes / sizeof(float));
  in.seekg(static_cast<std::streamoff>(sizeof(hlen) + hlen), std::ios::beg);
  in.read(reinterpret_cast<char*>(f.payload.data()),
          static_cast<std::streamsize>(payload_bytes));
  if (!in) throw FormatError("truncated payload in " + path);
  return f;
}

uint64_t payload_hash(std::span<const float> payload) {
  return fnv1a(payload.data(), payload.size() * sizeof(float));
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open for write: " + tmp);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
      std::filesystem::remove(tmp);
      throw StorageError("write failed: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw StorageError("rename failed for " + path + ": " + ec.message());
  }
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

}  // namespace io
}  // namespace moestack
