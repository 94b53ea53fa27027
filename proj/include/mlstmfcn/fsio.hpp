#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace mlstmfcn {

// Writes to a sibling temp file and renames into place, so readers never see
// a partially written file.
void atomic_write_file(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

// Flat key=value text, one pair per line, '#' comments allowed. Keys are kept
// sorted so rendering is deterministic.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv(std::string_view text);
KvMap parse_kv_file(const std::filesystem::path& path);
std::string render_kv(const KvMap& kv);

}  // namespace mlstmfcn
