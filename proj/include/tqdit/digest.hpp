// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "tqdit/tensor.hpp"

namespace tqdit {

/// Incremental SHA-256 (OpenSSL EVP), hex-encoded on finish.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }

  Sha256& update(std::span<const unsigned char> bytes) {
    EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
    return *this;
  }
  Sha256& update(std::string_view s) {
    return update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  }
  /// Little-endian IEEE-754 bytes of each value.
  Sha256& update(std::span<const double> values) {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      std::array<unsigned char, 8> le{};
      for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(bits >> (8 * i));
      update(std::span<const unsigned char>(le));
    }
    return *this;
  }
  Sha256& update(const Tensor& t) {
    update(shape_str(t.shape()));
    return update(t.data());
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view s) { return Sha256().update(s).hex(); }

}  // namespace tqdit
