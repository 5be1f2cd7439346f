#include "sstage/contact.hpp"

#include <chrono>
#include <fstream>
#include <random>
#include <thread>

#include <gtest/gtest.h>

namespace sstage {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("sstage_contact_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

TEST(Base64, KnownVectors) {
  EXPECT_EQ(base64_encode(to_bytes("")), "");
  EXPECT_EQ(base64_encode(to_bytes("f")), "Zg==");
  EXPECT_EQ(base64_encode(to_bytes("fo")), "Zm8=");
  EXPECT_EQ(base64_encode(to_bytes("foo")), "Zm9v");
  EXPECT_EQ(base64_encode(to_bytes("foobar")), "Zm9vYmFy");
  EXPECT_EQ(base64_decode("Zm9vYg=="), to_bytes("foob"));
  EXPECT_THROW(base64_decode("Zm9"), Error);
  EXPECT_THROW(base64_decode("Zm=v"), Error);
  EXPECT_THROW(base64_decode("Zm9*"), Error);
}

TEST(Base64, RoundTripRandom) {
  std::mt19937 rng(5);
  for (int t = 0; t < 500; ++t) {
    Bytes b(rng() % 40);
    for (auto& x : b) x = static_cast<std::byte>(rng());
    EXPECT_EQ(base64_decode(base64_encode(b)), b);
  }
}

ContactRecord sample() {
  ContactRecord c;
  for (std::uint8_t i = 0; i < 16; ++i) c.stream.bytes[i] = static_cast<std::uint8_t>(i * 3);
  c.host = "127.0.0.1";
  c.port = 40000;
  return c;
}

TEST(ContactRecord, TextRoundTrip) {
  const auto c = sample();
  const auto text = c.to_text();
  EXPECT_TRUE(text.starts_with("SSTG1:"));
  EXPECT_EQ(ContactRecord::from_text("  " + text + "\n"), c);
}

TEST(ContactRecord, RejectsGarbage) {
  EXPECT_THROW(ContactRecord::from_text("hello"), Error);
  EXPECT_THROW(ContactRecord::from_text("SSTG1:@@@@"), Error);
  EXPECT_THROW(ContactRecord::from_text("SSTG1:" + base64_encode(to_bytes("abc"))), Error);
  try {
    ContactRecord::from_text("SSTG1:AAAA");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
  }
}

TEST(ContactFile, WriteAndWait) {
  const auto dir = fresh_dir("write");
  write_contact_file(dir, "s", sample());
  EXPECT_EQ(wait_for_contact_file(dir, "s", 1), sample());
  remove_contact_file(dir, "s");
  EXPECT_FALSE(fs::exists(contact_file_path(dir, "s")));
  fs::remove_all(dir);
}

TEST(ContactFile, WaitSeesLateWriter) {
  const auto dir = fresh_dir("late");
  std::thread t([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(150));
    write_contact_file(dir, "s", sample());
  });
  EXPECT_EQ(wait_for_contact_file(dir, "s", 5), sample());
  t.join();
  fs::remove_all(dir);
}

TEST(ContactFile, TimesOut) {
  const auto dir = fresh_dir("timeout");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    wait_for_contact_file(dir, "none", 0.2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OpenTimeout);
  }
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(200));
}

}  // namespace
}  // namespace sstage
