#include "ibd/stego.hpp"

#include "ibd/error.hpp"

namespace ibd {

void StegoConfig::validate() const {
  require(k >= 1 && k <= kMaxBitPlanes, ErrorKind::Config,
          "stego k must be in 1.." + std::to_string(kMaxBitPlanes) + ", got " + std::to_string(k));
}

std::size_t stego_capacity(std::size_t image_bytes, const StegoConfig& cfg) {
  cfg.validate();
  return image_bytes * cfg.k;
}

namespace {

void check_fits(std::size_t bits, std::size_t image_bytes, const StegoConfig& cfg) {
  require(image_bytes > 0, ErrorKind::Invalid, "stego cover image is empty");
  const std::size_t cap = stego_capacity(image_bytes, cfg);
  require(bits <= cap, ErrorKind::Invalid,
          "payload of " + std::to_string(bits) + " bits exceeds capacity of " + std::to_string(cap) + " bits (" +
              std::to_string(image_bytes) + " bytes x " + std::to_string(cfg.k) + " planes)");
}

}  // namespace

std::vector<std::uint8_t> lsb_embed(std::span<const std::uint8_t> image, const BytePayload& payload,
                                    const StegoConfig& cfg) {
  require(!payload.bytes.empty(), ErrorKind::Invalid, "stego payload is empty");
  const std::size_t n = image.size(), bits = payload.bit_length();
  check_fits(bits, n, cfg);
  std::vector<std::uint8_t> out(image.begin(), image.end());
  for (std::size_t i = 0; i < bits; ++i) {
    const unsigned bit = (payload.bytes[i / 8] >> (7 - i % 8)) & 1u;
    const unsigned plane = static_cast<unsigned>(i / n);
    auto& b = out[i % n];
    b = static_cast<std::uint8_t>((b & ~(1u << plane)) | (bit << plane));
  }
  return out;
}

std::vector<std::uint8_t> lsb_extract(std::span<const std::uint8_t> image, std::size_t bit_length,
                                      const StegoConfig& cfg) {
  const std::size_t n = image.size();
  check_fits(bit_length, n, cfg);
  std::vector<std::uint8_t> out((bit_length + 7) / 8, 0);
  for (std::size_t i = 0; i < bit_length; ++i) {
    const unsigned plane = static_cast<unsigned>(i / n);
    const unsigned bit = (image[i % n] >> plane) & 1u;
    out[i / 8] |= static_cast<std::uint8_t>(bit << (7 - i % 8));
  }
  return out;
}

BytePayload make_text_trigger(const std::string& base, std::size_t size) {
  require(!base.empty(), ErrorKind::Invalid, "trigger base text is empty");
  require(size >= 1, ErrorKind::Invalid, "trigger size must be at least 1");
  BytePayload p;
  p.bytes.reserve(size);
  for (std::size_t i = 0; i < size; ++i) p.bytes.push_back(static_cast<std::uint8_t>(base[i % base.size()]));
  return p;
}

}  // namespace ibd
