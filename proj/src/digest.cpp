#include "plate/digest.hpp"

#include <openssl/sha.h>

#include <array>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <vector>

namespace plate {

namespace {

std::array<unsigned char, SHA256_DIGEST_LENGTH> sha256_raw(const void* data, std::size_t n) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> out{};
  SHA256(static_cast<const unsigned char*>(data), n, out.data());
  return out;
}

std::string to_hex(std::span<const unsigned char> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xF]);
  }
  return s;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  const auto raw = sha256_raw(bytes.data(), bytes.size());
  return to_hex(raw);
}

std::string sha256_hex(std::string_view text) {
  const auto raw = sha256_raw(text.data(), text.size());
  return to_hex(raw);
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto raw = sha256_raw(bytes.data(), bytes.size());
  return to_hex(raw);
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view key) {
  std::string material = std::to_string(run_seed);
  material.push_back('\0');
  material.append(key);
  const auto raw = sha256_raw(material.data(), material.size());
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | raw[static_cast<std::size_t>(i)];
  return seed;
}

}  // namespace plate
