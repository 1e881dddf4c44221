#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace oclapo {

/// SHA-256 hex digest of a byte string.
std::string sha256_hex(const std::string& bytes);

/// SHA-256 hex digest of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

/// Combined digest of a directory: per-file digests of the sorted relative
/// paths, hashed together with the path names.
std::string sha256_tree(const std::filesystem::path& path);

}  // namespace oclapo
