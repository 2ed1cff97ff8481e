#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ibd {

// Text trigger bytes. Each character contributes 8 bits, most significant first.
struct BytePayload {
  std::vector<std::uint8_t> bytes;

  static BytePayload from_string(const std::string& s) { return {{s.begin(), s.end()}}; }
  std::size_t size() const noexcept { return bytes.size(); }
  std::size_t bit_length() const noexcept { return bytes.size() * 8; }
  std::string text() const { return {bytes.begin(), bytes.end()}; }
  bool operator==(const BytePayload&) const = default;
};

// k is the number of low bit planes the embedding may touch. Bits are laid out
// over image bytes in storage order (row-major, channel-minor); when the payload is
// longer than the image, pass p wraps to the start and writes bit plane p.
struct StegoConfig {
  unsigned k = 1;

  void validate() const;
};

constexpr unsigned kMaxBitPlanes = 4;

// Payload bits the image can hold under cfg.
std::size_t stego_capacity(std::size_t image_bytes, const StegoConfig& cfg);

std::vector<std::uint8_t> lsb_embed(std::span<const std::uint8_t> image, const BytePayload& payload,
                                    const StegoConfig& cfg);
// Reads `bit_length` bits back; a trailing partial byte is zero-padded.
std::vector<std::uint8_t> lsb_extract(std::span<const std::uint8_t> image, std::size_t bit_length,
                                      const StegoConfig& cfg);

// `base` repeated and cut to exactly `size` characters.
BytePayload make_text_trigger(const std::string& base, std::size_t size);

}  // namespace ibd
