#include "sstage/wire.hpp"

#include <random>

namespace sstage::wire {

StreamId StreamId::random() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  StreamId id;
  for (std::size_t i = 0; i < id.bytes.size(); i += 8) {
    auto v = rng();
    for (std::size_t j = 0; j < 8; ++j) id.bytes[i + j] = static_cast<std::uint8_t>(v >> (8 * j));
  }
  return id;
}

std::string StreamId::hex() const {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (auto b : bytes) {
    out += digits[b >> 4];
    out += digits[b & 15];
  }
  return out;
}

MsgType type_of(const Body& body) {
  return std::visit(
      [](const auto& b) -> MsgType {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, ReaderJoin>) return MsgType::ReaderJoin;
        else if constexpr (std::is_same_v<T, WriterHandshake>) return MsgType::WriterHandshake;
        else if constexpr (std::is_same_v<T, ReaderActivate>) return MsgType::ReaderActivate;
        else if constexpr (std::is_same_v<T, ProvideMetadata>) return MsgType::ProvideMetadata;
        else if constexpr (std::is_same_v<T, ReleaseStep>) return MsgType::ReleaseStep;
        else if constexpr (std::is_same_v<T, RequestStep>) return MsgType::RequestStep;
        else if constexpr (std::is_same_v<T, ReaderClose>) return MsgType::ReaderClose;
        else if constexpr (std::is_same_v<T, WriterClose>) return MsgType::WriterClose;
        else if constexpr (std::is_same_v<T, EndOfStream>) return MsgType::EndOfStream;
        else if constexpr (std::is_same_v<T, ReadRequest>) return MsgType::ReadRequest;
        else if constexpr (std::is_same_v<T, RequestResponse>) return MsgType::RequestResponse;
        else if constexpr (std::is_same_v<T, PreloadData>) return MsgType::PreloadData;
        else if constexpr (std::is_same_v<T, RequestLogPublish>) return MsgType::RequestLogPublish;
        else return MsgType::BufferRelease;
      },
      body);
}

std::string_view name_of(MsgType t) {
  switch (t) {
    case MsgType::ReaderJoin: return "ReaderJoin";
    case MsgType::WriterHandshake: return "WriterHandshake";
    case MsgType::ReaderActivate: return "ReaderActivate";
    case MsgType::ProvideMetadata: return "ProvideMetadata";
    case MsgType::ReleaseStep: return "ReleaseStep";
    case MsgType::RequestStep: return "RequestStep";
    case MsgType::ReaderClose: return "ReaderClose";
    case MsgType::WriterClose: return "WriterClose";
    case MsgType::EndOfStream: return "EndOfStream";
    case MsgType::ReadRequest: return "ReadRequest";
    case MsgType::RequestResponse: return "RequestResponse";
    case MsgType::PreloadData: return "PreloadData";
    case MsgType::RequestLogPublish: return "RequestLogPublish";
    case MsgType::BufferRelease: return "BufferRelease";
  }
  return "Unknown";
}

namespace {

void put_contacts(ByteWriter& w, const std::vector<RankContact>& cs) {
  w.u32(static_cast<std::uint32_t>(cs.size()));
  for (const auto& c : cs) {
    w.str(c.control);
    w.blob(c.data_plane);
  }
}

std::vector<RankContact> get_contacts(ByteReader& r) {
  std::vector<RankContact> cs(r.count(8));
  for (auto& c : cs) {
    c.control = r.str();
    c.data_plane = r.blob();
  }
  return cs;
}

bool get_bool(ByteReader& r) {
  const auto v = r.u8();
  if (v > 1) throw Error(ErrorCode::DecodeError, "bad boolean " + std::to_string(v));
  return v == 1;
}

template <typename E>
E get_enum(ByteReader& r, std::uint8_t max) {
  const auto v = r.u8();
  if (v > max) throw Error(ErrorCode::DecodeError, "enum value " + std::to_string(v));
  return static_cast<E>(v);
}

struct BodyWriter {
  ByteWriter& w;

  void operator()(const ReaderJoin& m) { put_contacts(w, m.reader_contacts); }
  void operator()(const WriterHandshake& m) {
    w.u32(m.reader_id);
    put_contacts(w, m.writer_contacts);
    w.u8(static_cast<std::uint8_t>(m.distribution));
    w.u8(static_cast<std::uint8_t>(m.preload));
  }
  void operator()(const ReaderActivate&) {}
  void operator()(const ProvideMetadata& m) {
    w.u8(m.writer_locked ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(m.preload.size()));
    for (const auto& p : m.preload) {
      w.u32(p.writer_rank);
      w.u32(p.reader_rank);
    }
    w.blob(encode_full_metadata(m.metadata));
  }
  void operator()(const ReleaseStep& m) {
    w.u64(m.step.value);
    w.u32(m.reader);
    w.u8(m.reader_locked ? 1 : 0);
  }
  void operator()(const RequestStep& m) { w.u32(m.reader); }
  void operator()(const ReaderClose& m) { w.u32(m.reader); }
  void operator()(const WriterClose& m) {
    w.u8(m.final_step ? 1 : 0);
    w.u64(m.final_step ? m.final_step->value : 0);
  }
  void operator()(const EndOfStream&) {}
  void operator()(const ReadRequest& m) {
    w.u64(m.request_id);
    w.u64(m.step.value);
    w.u64(m.offset);
    w.u64(m.length);
  }
  void operator()(const RequestResponse& m) {
    w.u64(m.request_id);
    w.u8(static_cast<std::uint8_t>(m.status));
    w.blob(m.data);
  }
  void operator()(const PreloadData& m) {
    w.u64(m.step.value);
    w.u32(m.pattern_id);
    w.u32(static_cast<std::uint32_t>(m.ranges.size()));
    for (const auto& r : m.ranges) {
      w.u64(r.offset);
      w.u64(r.length);
    }
    w.blob(m.data);
  }
  void operator()(const RequestLogPublish& m) {
    w.u64(m.step.value);
    w.u32(static_cast<std::uint32_t>(m.reads.size()));
    for (const auto& r : m.reads) {
      w.u64(r.offset);
      w.u64(r.length);
      w.u32(r.dest_token);
    }
  }
  void operator()(const BufferRelease& m) { w.u64(m.step.value); }
};

Body read_body(MsgType type, ByteReader& r) {
  switch (type) {
    case MsgType::ReaderJoin: return ReaderJoin{get_contacts(r)};
    case MsgType::WriterHandshake: {
      WriterHandshake m;
      m.reader_id = r.u32();
      m.writer_contacts = get_contacts(r);
      m.distribution = get_enum<StepDistribution>(r, 2);
      m.preload = get_enum<PreloadMode>(r, 2);
      return m;
    }
    case MsgType::ReaderActivate: return ReaderActivate{};
    case MsgType::ProvideMetadata: {
      ProvideMetadata m;
      m.writer_locked = get_bool(r);
      m.preload.resize(r.count(8));
      for (auto& p : m.preload) {
        p.writer_rank = r.u32();
        p.reader_rank = r.u32();
      }
      const auto meta = r.blob();
      m.metadata = decode_full_metadata(meta);
      return m;
    }
    case MsgType::ReleaseStep: {
      ReleaseStep m;
      m.step = StepId{r.u64()};
      m.reader = r.u32();
      m.reader_locked = get_bool(r);
      return m;
    }
    case MsgType::RequestStep: return RequestStep{r.u32()};
    case MsgType::ReaderClose: return ReaderClose{r.u32()};
    case MsgType::WriterClose: {
      WriterClose m;
      const bool has = get_bool(r);
      const auto v = r.u64();
      if (has) m.final_step = StepId{v};
      return m;
    }
    case MsgType::EndOfStream: return EndOfStream{};
    case MsgType::ReadRequest: {
      ReadRequest m;
      m.request_id = r.u64();
      m.step = StepId{r.u64()};
      m.offset = r.u64();
      m.length = r.u64();
      return m;
    }
    case MsgType::RequestResponse: {
      RequestResponse m;
      m.request_id = r.u64();
      m.status = get_enum<ReadStatus>(r, 2);
      m.data = r.blob();
      return m;
    }
    case MsgType::PreloadData: {
      PreloadData m;
      m.step = StepId{r.u64()};
      m.pattern_id = r.u32();
      m.ranges.resize(r.count(16));
      std::uint64_t total = 0;
      for (auto& x : m.ranges) {
        x.offset = r.u64();
        x.length = r.u64();
        total += x.length;
      }
      m.data = r.blob();
      if (total != m.data.size()) {
        throw Error(ErrorCode::DecodeError, "preload ranges cover " + std::to_string(total) +
                                                " bytes, payload has " +
                                                std::to_string(m.data.size()));
      }
      return m;
    }
    case MsgType::RequestLogPublish: {
      RequestLogPublish m;
      m.step = StepId{r.u64()};
      m.reads.resize(r.count(20));
      for (auto& x : m.reads) {
        x.offset = r.u64();
        x.length = r.u64();
        x.dest_token = r.u32();
      }
      return m;
    }
    case MsgType::BufferRelease: return BufferRelease{StepId{r.u64()}};
  }
  throw Error(ErrorCode::DecodeError, "unknown message type");
}

bool known_type(std::uint16_t t) {
  return (t >= 0x0001 && t <= 0x0009) || (t >= 0x0101 && t <= 0x0105);
}

}  // namespace

Bytes encode_payload(const Message& m) {
  Bytes out;
  ByteWriter w(out);
  w.u16(kWireVersion);
  for (auto b : m.stream.bytes) w.u8(b);
  w.u8(static_cast<std::uint8_t>(m.sender.role));
  w.u32(m.sender.cohort_id);
  w.u32(m.sender.rank);
  std::visit(BodyWriter{w}, m.body);
  return out;
}

net::Frame encode(const Message& m) {
  net::Frame f;
  f.type = static_cast<std::uint16_t>(type_of(m.body));
  f.flags = 0;
  f.payload = encode_payload(m);
  return f;
}

Message decode(const net::Frame& f) {
  if (!known_type(f.type)) {
    throw Error(ErrorCode::DecodeError, "unknown message type " + std::to_string(f.type));
  }
  ByteReader r(f.payload);
  const auto version = r.u16();
  if (version != kWireVersion) {
    throw Error(ErrorCode::DecodeError, "unsupported wire version " + std::to_string(version));
  }
  Message m;
  for (auto& b : m.stream.bytes) b = r.u8();
  m.sender.role = get_enum<Role>(r, 1);
  m.sender.cohort_id = r.u32();
  m.sender.rank = r.u32();
  m.body = read_body(static_cast<MsgType>(f.type), r);
  r.expect_done(name_of(static_cast<MsgType>(f.type)));
  return m;
}

void send(net::Connection& conn, const Message& m) {
  const auto payload = encode_payload(m);
  conn.send(static_cast<std::uint16_t>(type_of(m.body)), 0, payload);
}

}  // namespace sstage::wire
