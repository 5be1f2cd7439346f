#pragma once

// Byte-exact reference encodings of every control and data-plane message.
// The hex strings are the frame payloads; README's wire section documents
// the same layouts.

#include <string>
#include <string_view>
#include <vector>

#include "sstage/marshal.hpp"
#include "sstage/net.hpp"
#include "sstage/wire.hpp"

namespace sstage::wire {

inline Bytes from_hex(std::string_view hex) {
  Bytes out;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2) {
    out.push_back(static_cast<std::byte>(std::stoi(std::string(hex.substr(i, 2)), nullptr, 16)));
  }
  return out;
}

inline std::string to_hex(std::span<const std::byte> b) {
  static constexpr char d[] = "0123456789abcdef";
  std::string s;
  for (auto x : b) {
    s += d[std::to_integer<int>(x) >> 4];
    s += d[std::to_integer<int>(x) & 15];
  }
  return s;
}

inline StreamId fixed_stream() {
  StreamId id;
  for (std::uint8_t i = 0; i < 16; ++i) id.bytes[i] = i;
  return id;
}

inline constexpr std::string_view kStreamHex = "000102030405060708090a0b0c0d0e0f";

// version 1 | stream | role | cohort id | rank
inline std::string writer_prefix() { return "0100" + std::string(kStreamHex) + "00" + "00000000" + "00000000"; }
inline std::string reader_prefix() { return "0100" + std::string(kStreamHex) + "01" + "07000000" + "02000000"; }

inline Message writer_msg(Body b) { return {fixed_stream(), {Role::Writer, 0, 0}, std::move(b)}; }
inline Message reader_msg(Body b) { return {fixed_stream(), {Role::Reader, 7, 2}, std::move(b)}; }

inline FullMetadata small_metadata() {
  FullMetadata fm;
  fm.step = StepId{3};
  fm.dp_registration = {to_bytes("x")};
  fm.variables["v"] = {{"v", 8, {4}, "d"}, {{0, {{0}, {4}}, 0}}};
  return fm;
}

// u32 version | u32 body length (79) | body
inline const std::string kSmallMetadataHex =
    "01000000"
    "4f000000"
    "0300000000000000"  // step
    "01000000"          // ranks
    "0100000078"        // registration "x"
    "01000000"          // variables
    "0100000076"        // name "v"
    "08000000"          // element size
    "0100000064"        // type "d"
    "01000000"          // ndims
    "0400000000000000"  // shape
    "01000000"          // blocks
    "00000000"          // writer rank
    "0000000000000000"  // start
    "0400000000000000"  // count
    "0000000000000000"; // data offset

// Frame header for type 0x0105, payload length 0x01020304.
inline const std::string kFrameHeaderHex = "0403020105010000";

struct GoldenCase {
  std::string label;
  Message message;
  MsgType type;
  std::string payload_hex;
};

inline std::vector<GoldenCase> golden_cases() {
  return {
      {"ReaderJoin", reader_msg(ReaderJoin{{{"h:1", from_hex("ab")}}}), MsgType::ReaderJoin,
       reader_prefix() + "01000000" + "03000000683a31" + "01000000ab"},
      {"WriterHandshake",
       writer_msg(WriterHandshake{5, {{"a", {}}}, StepDistribution::RoundRobin, PreloadMode::DoubleBuffer}),
       MsgType::WriterHandshake,
       writer_prefix() + "05000000" + "01000000" + "0100000061" + "00000000" + "01" + "02"},
      {"ReaderActivate", reader_msg(ReaderActivate{}), MsgType::ReaderActivate, reader_prefix()},
      {"ProvideMetadata", writer_msg(ProvideMetadata{small_metadata(), true, {{0, 1}}}),
       MsgType::ProvideMetadata,
       writer_prefix() + "01" + "01000000" + "0000000001000000" + "57000000" + kSmallMetadataHex},
      {"ReleaseStep", reader_msg(ReleaseStep{StepId{0x1122}, 7, true}), MsgType::ReleaseStep,
       reader_prefix() + "2211000000000000" + "07000000" + "01"},
      {"RequestStep", reader_msg(RequestStep{7}), MsgType::RequestStep, reader_prefix() + "07000000"},
      {"ReaderClose", reader_msg(ReaderClose{7}), MsgType::ReaderClose, reader_prefix() + "07000000"},
      {"WriterClose", writer_msg(WriterClose{StepId{9}}), MsgType::WriterClose,
       writer_prefix() + "01" + "0900000000000000"},
      {"WriterCloseNoSteps", writer_msg(WriterClose{}), MsgType::WriterClose,
       writer_prefix() + "00" + "0000000000000000"},
      {"EndOfStream", writer_msg(EndOfStream{}), MsgType::EndOfStream, writer_prefix()},
      {"ReadRequest", reader_msg(ReadRequest{1, StepId{2}, 64, 24}), MsgType::ReadRequest,
       reader_prefix() + "0100000000000000" + "0200000000000000" + "4000000000000000" + "1800000000000000"},
      {"RequestResponse", writer_msg(RequestResponse{1, ReadStatus::Ok, from_hex("0102")}),
       MsgType::RequestResponse, writer_prefix() + "0100000000000000" + "00" + "020000000102"},
      {"RequestResponseStale", writer_msg(RequestResponse{2, ReadStatus::StaleStep, {}}),
       MsgType::RequestResponse, writer_prefix() + "0200000000000000" + "01" + "00000000"},
      {"PreloadData", writer_msg(PreloadData{StepId{4}, 3, {{8, 2}, {32, 1}}, from_hex("aabbcc")}),
       MsgType::PreloadData,
       writer_prefix() + "0400000000000000" + "03000000" + "02000000" + "0800000000000000" +
           "0200000000000000" + "2000000000000000" + "0100000000000000" + "03000000aabbcc"},
      {"RequestLogPublish", reader_msg(RequestLogPublish{StepId{6}, {{16, 8, 3}}}),
       MsgType::RequestLogPublish,
       reader_prefix() + "0600000000000000" + "01000000" + "1000000000000000" + "0800000000000000" +
           "03000000"},
      {"BufferRelease", reader_msg(BufferRelease{StepId{6}}), MsgType::BufferRelease,
       reader_prefix() + "0600000000000000"},
  };
}

}  // namespace sstage::wire
