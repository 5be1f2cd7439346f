#include "sstage/contact.hpp"

#include <cctype>
#include <chrono>
#include <fstream>
#include <thread>
#include <unistd.h>

namespace sstage {

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(std::span<const std::byte> in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const auto v = std::to_integer<unsigned>(in[i]) << 16 |
                   std::to_integer<unsigned>(in[i + 1]) << 8 | std::to_integer<unsigned>(in[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const auto rest = in.size() - i;
  if (rest) {
    unsigned v = std::to_integer<unsigned>(in[i]) << 16;
    if (rest == 2) v |= std::to_integer<unsigned>(in[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

Bytes base64_decode(std::string_view in) {
  if (in.size() % 4 != 0) throw Error(ErrorCode::ParseError, "base64 length not a multiple of 4");
  Bytes out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else if (pad || (v[k] = b64_value(c)) < 0) {
        throw Error(ErrorCode::ParseError, "invalid base64 character");
      }
    }
    const unsigned bits = static_cast<unsigned>(v[0] << 18 | v[1] << 12 | v[2] << 6 | v[3]);
    out.push_back(static_cast<std::byte>(bits >> 16));
    if (pad < 2) out.push_back(static_cast<std::byte>((bits >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<std::byte>(bits & 0xFF));
  }
  return out;
}

Bytes ContactRecord::encode() const {
  Bytes out;
  ByteWriter w(out);
  w.u16(version);
  for (auto b : stream.bytes) w.u8(b);
  w.str(host);
  w.u16(port);
  return out;
}

ContactRecord ContactRecord::decode(std::span<const std::byte> in) {
  ByteReader r(in);
  ContactRecord c;
  c.version = r.u16();
  if (c.version != 1) {
    throw Error(ErrorCode::ParseError, "unsupported contact version " + std::to_string(c.version));
  }
  for (auto& b : c.stream.bytes) b = r.u8();
  c.host = r.str();
  c.port = r.u16();
  r.expect_done("contact record");
  return c;
}

std::string ContactRecord::to_text() const {
  return std::string(kContactPrefix) + base64_encode(encode());
}

ContactRecord ContactRecord::from_text(std::string_view text) {
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) {
    text.remove_prefix(1);
  }
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) {
    text.remove_suffix(1);
  }
  if (!text.starts_with(kContactPrefix)) {
    throw Error(ErrorCode::ParseError, "contact string lacks " + std::string(kContactPrefix));
  }
  text.remove_prefix(kContactPrefix.size());
  try {
    return decode(base64_decode(text));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ParseError) throw;
    throw Error(ErrorCode::ParseError, std::string("contact record: ") + e.what());
  }
}

std::filesystem::path contact_file_path(const std::filesystem::path& dir,
                                        const std::string& stream_name) {
  return dir / (stream_name + ".sstg");
}

void write_contact_file(const std::filesystem::path& dir, const std::string& stream_name,
                        const ContactRecord& rec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto final_path = contact_file_path(dir, stream_name);
  auto tmp = final_path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << rec.to_text() << "\n";
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot publish " + final_path.string() + ": " + ec.message());
}

void remove_contact_file(const std::filesystem::path& dir, const std::string& stream_name) {
  std::error_code ec;
  std::filesystem::remove(contact_file_path(dir, stream_name), ec);
}

ContactRecord wait_for_contact_file(const std::filesystem::path& dir,
                                    const std::string& stream_name, double timeout_secs) {
  const auto path = contact_file_path(dir, stream_name);
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_secs);
  while (true) {
    std::ifstream in(path);
    std::string line;
    if (in && std::getline(in, line) && !line.empty()) return ContactRecord::from_text(line);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw Error(ErrorCode::OpenTimeout, "no contact file " + path.string() + " after " +
                                              std::to_string(timeout_secs) + " s");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

}  // namespace sstage
