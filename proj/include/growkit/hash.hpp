#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace growkit {

using Sha256Digest = std::array<uint8_t, 32>;

// Incremental SHA-256 (OpenSSL EVP underneath). Used for content hashes:
// cache keys, model fingerprints, config hashes.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update_u64(uint64_t v);  // little-endian
  void update_floats(std::span<const float> v);

  Sha256Digest finish();

 private:
  void* ctx_;
};

Sha256Digest sha256(std::string_view data);
std::string hex(const Sha256Digest& d);

}  // namespace growkit
