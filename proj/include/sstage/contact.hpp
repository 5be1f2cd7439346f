#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "sstage/bytes.hpp"
#include "sstage/net.hpp"
#include "sstage/wire.hpp"

namespace sstage {

/// How readers find writer rank 0: stream identity plus its control endpoint.
///
/// Binary form (little-endian): u16 version | u8[16] stream id | u32 len + host | u16 port.
/// Text form: "SSTG1:" followed by the base64 of the binary form.
struct ContactRecord {
  std::uint16_t version = 1;
  wire::StreamId stream;
  std::string host;
  std::uint16_t port = 0;

  net::Endpoint endpoint() const { return {host, port}; }

  Bytes encode() const;
  static ContactRecord decode(std::span<const std::byte> in);
  std::string to_text() const;
  /// Accepts surrounding whitespace. Throws ParseError.
  static ContactRecord from_text(std::string_view text);

  friend bool operator==(const ContactRecord&, const ContactRecord&) = default;
};

inline constexpr std::string_view kContactPrefix = "SSTG1:";
inline constexpr const char* kEnvContactDir = "STAGE_CONTACT_DIR";

std::string base64_encode(std::span<const std::byte> in);
Bytes base64_decode(std::string_view in);

std::filesystem::path contact_file_path(const std::filesystem::path& dir,
                                        const std::string& stream_name);

/// Writes `<dir>/<stream_name>.sstg` atomically (temp file + rename).
void write_contact_file(const std::filesystem::path& dir, const std::string& stream_name,
                        const ContactRecord& rec);
void remove_contact_file(const std::filesystem::path& dir, const std::string& stream_name);

/// Polls for the contact file until it appears or `timeout_secs` elapse
/// (then Error{OpenTimeout}).
ContactRecord wait_for_contact_file(const std::filesystem::path& dir,
                                    const std::string& stream_name, double timeout_secs);

}  // namespace sstage
