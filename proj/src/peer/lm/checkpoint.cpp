// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/lm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "peer/core/error.hpp"

namespace peer {

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries,
                      DType dtype) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    const auto count = static_cast<std::uint32_t>(entries.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& e : entries) {
      const auto len = static_cast<std::uint32_t>(e.name.size());
      out.write(reinterpret_cast<const char*>(&len), sizeof(len));
      out.write(e.name.data(), len);
      write_tensor(out, e.tensor, dtype);
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError(path.string() + " is not a PEERCKPT checkpoint");
  }
  std::uint32_t version = 0, count = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<NamedTensor> entries;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > 4096) throw IoError("corrupt entry name in " + path.string());
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("truncated entry name in " + path.string());
    if (!seen.insert(name).second) throw IoError("duplicate checkpoint entry '" + name + "'");
    entries.push_back({std::move(name), read_tensor(in)});
  }
  return entries;
}

}  // namespace peer
