#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sstage/bytes.hpp"
#include "sstage/core.hpp"
#include "sstage/marshal.hpp"
#include "sstage/net.hpp"

namespace sstage::wire {

inline constexpr std::uint16_t kWireVersion = 1;

/// 128-bit stream identity chosen by the writer at open.
struct StreamId {
  std::array<std::uint8_t, 16> bytes{};

  static StreamId random();
  std::string hex() const;
  friend bool operator==(const StreamId&, const StreamId&) = default;
};

enum class Role : std::uint8_t { Writer = 0, Reader = 1 };

struct Sender {
  Role role = Role::Writer;
  std::uint32_t cohort_id = 0;  // reader id for readers, 0 for the writer
  std::uint32_t rank = 0;

  friend bool operator==(const Sender&, const Sender&) = default;
};

/// Message type codes carried in the frame header.
enum class MsgType : std::uint16_t {
  ReaderJoin = 0x0001,
  WriterHandshake = 0x0002,
  ReaderActivate = 0x0003,
  ProvideMetadata = 0x0004,
  ReleaseStep = 0x0005,
  RequestStep = 0x0006,
  ReaderClose = 0x0007,
  WriterClose = 0x0008,
  EndOfStream = 0x0009,
  ReadRequest = 0x0101,
  RequestResponse = 0x0102,
  PreloadData = 0x0103,
  RequestLogPublish = 0x0104,
  BufferRelease = 0x0105,
};

/// Control and data-plane contact of one rank.
struct RankContact {
  std::string control;  // endpoint token of the rank's listener
  Bytes data_plane;     // opaque data-plane contact blob

  friend bool operator==(const RankContact&, const RankContact&) = default;
};

struct ReaderJoin {
  std::vector<RankContact> reader_contacts;
  friend bool operator==(const ReaderJoin&, const ReaderJoin&) = default;
};

struct WriterHandshake {
  ReaderId reader_id = 0;
  std::vector<RankContact> writer_contacts;
  StepDistribution distribution = StepDistribution::AllToAll;
  PreloadMode preload = PreloadMode::Off;
  friend bool operator==(const WriterHandshake&, const WriterHandshake&) = default;
};

struct ReaderActivate {
  friend bool operator==(const ReaderActivate&, const ReaderActivate&) = default;
};

/// (writer rank, reader rank) pairs for which the writer committed to push
/// this step's data without being asked.
struct PreloadNotice {
  std::uint32_t writer_rank = 0;
  std::uint32_t reader_rank = 0;
  friend bool operator==(const PreloadNotice&, const PreloadNotice&) = default;
};

struct ProvideMetadata {
  FullMetadata metadata;
  bool writer_locked = false;
  std::vector<PreloadNotice> preload;
  friend bool operator==(const ProvideMetadata&, const ProvideMetadata&) = default;
};

struct ReleaseStep {
  StepId step;
  ReaderId reader = 0;
  bool reader_locked = false;
  friend bool operator==(const ReleaseStep&, const ReleaseStep&) = default;
};

struct RequestStep {
  ReaderId reader = 0;
  friend bool operator==(const RequestStep&, const RequestStep&) = default;
};

struct ReaderClose {
  ReaderId reader = 0;
  friend bool operator==(const ReaderClose&, const ReaderClose&) = default;
};

struct WriterClose {
  std::optional<StepId> final_step;  // absent when the writer produced nothing
  friend bool operator==(const WriterClose&, const WriterClose&) = default;
};

struct EndOfStream {
  friend bool operator==(const EndOfStream&, const EndOfStream&) = default;
};

struct ReadRequest {
  std::uint64_t request_id = 0;
  StepId step;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  friend bool operator==(const ReadRequest&, const ReadRequest&) = default;
};

enum class ReadStatus : std::uint8_t { Ok = 0, StaleStep = 1, OutOfRange = 2 };

struct RequestResponse {
  std::uint64_t request_id = 0;
  ReadStatus status = ReadStatus::Ok;
  Bytes data;
  friend bool operator==(const RequestResponse&, const RequestResponse&) = default;
};

struct ByteRange {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

/// Data pushed ahead of any request: `data` is the concatenation of `ranges`.
struct PreloadData {
  StepId step;
  std::uint32_t pattern_id = 0;
  std::vector<ByteRange> ranges;
  Bytes data;
  friend bool operator==(const PreloadData&, const PreloadData&) = default;
};

struct LoggedRead {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t dest_token = 0;
  friend bool operator==(const LoggedRead&, const LoggedRead&) = default;
};

struct RequestLogPublish {
  StepId step;  // the timestep whose reads were logged
  std::vector<LoggedRead> reads;
  friend bool operator==(const RequestLogPublish&, const RequestLogPublish&) = default;
};

struct BufferRelease {
  StepId step;
  friend bool operator==(const BufferRelease&, const BufferRelease&) = default;
};

using Body = std::variant<ReaderJoin, WriterHandshake, ReaderActivate, ProvideMetadata,
                          ReleaseStep, RequestStep, ReaderClose, WriterClose, EndOfStream,
                          ReadRequest, RequestResponse, PreloadData, RequestLogPublish,
                          BufferRelease>;

/// A decoded frame. Every payload starts with
///   u16 version | u8[16] stream id | u8 sender role | u32 sender cohort id | u32 sender rank
/// followed by the type-specific body.
struct Message {
  StreamId stream;
  Sender sender;
  Body body;
  friend bool operator==(const Message&, const Message&) = default;
};

MsgType type_of(const Body& body);
std::string_view name_of(MsgType t);

Bytes encode_payload(const Message& m);
net::Frame encode(const Message& m);
/// Throws DecodeError for unknown type codes, version mismatch, or malformed bodies.
Message decode(const net::Frame& f);

/// Encodes and sends `m` on `conn`.
void send(net::Connection& conn, const Message& m);

}  // namespace sstage::wire
