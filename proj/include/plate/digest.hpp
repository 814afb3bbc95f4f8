#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace plate {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
/// SHA-256 of a file's contents; throws std::runtime_error if unreadable.
std::string file_digest(const std::string& path);

/// Stable 64-bit seed for one document of a run, independent of processing order.
std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view key);

}  // namespace plate
