// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace metapt {

using Digest = std::array<std::uint8_t, 32>;

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update(std::string_view text);
  template <typename T>
  Sha256& update_pod(const T& v) {
    return update(std::span(reinterpret_cast<const std::uint8_t*>(&v), sizeof(T)));
  }
  Digest finish();

 private:
  void* ctx_;
};

std::string to_hex(const Digest& d);
std::string sha256_hex(std::string_view text);

/// Independent child seed for a named sub-stream of `base`.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

}  // namespace metapt
