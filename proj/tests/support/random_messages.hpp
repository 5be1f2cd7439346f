#pragma once

#include <random>
#include <string>

#include "sstage/wire.hpp"

namespace sstage::wire {

// Random but well-formed messages of every type, for round-trip fuzzing.
inline Message random_message(std::mt19937_64& rng) {
  auto u = [&](std::uint64_t n) { return n == 0 ? 0 : rng() % n; };
  auto bytes = [&](std::size_t max) {
    Bytes b(u(max + 1));
    for (auto& x : b) x = static_cast<std::byte>(rng());
    return b;
  };
  auto text = [&](std::size_t max) {
    std::string s(u(max + 1), ' ');
    for (auto& c : s) c = static_cast<char>('a' + u(26));
    return s;
  };
  auto contacts = [&] {
    std::vector<RankContact> cs(u(4));
    for (auto& c : cs) c = {text(12), bytes(8)};
    return cs;
  };
  auto metadata = [&] {
    FullMetadata fm;
    fm.step = StepId{rng()};
    const auto nranks = 1 + u(3);
    for (std::uint64_t r = 0; r < nranks; ++r) fm.dp_registration.push_back(bytes(6));
    const auto nvars = u(3);
    for (std::uint64_t i = 0; i < nvars; ++i) {
      VariableBlocks vb;
      const auto nd = 1 + u(3);
      vb.def = {"v" + std::to_string(i), static_cast<std::uint32_t>(1 + u(8)), Dims(nd), text(4)};
      for (auto& s : vb.def.shape) s = 1 + u(50);
      const auto nb = u(4);
      for (std::uint64_t b = 0; b < nb; ++b) {
        WriterBlock wb;
        wb.writer_rank = static_cast<std::uint32_t>(u(nranks));
        wb.extent = {Dims(nd), Dims(nd)};
        for (std::size_t d = 0; d < nd; ++d) {
          wb.extent.start[d] = u(vb.def.shape[d]);
          wb.extent.count[d] = 1 + u(vb.def.shape[d] - wb.extent.start[d]);
        }
        wb.data_offset = u(1 << 20);
        vb.blocks.push_back(wb);
      }
      fm.variables[vb.def.name] = vb;
    }
    return fm;
  };

  Message m;
  for (auto& b : m.stream.bytes) b = static_cast<std::uint8_t>(rng());
  m.sender = {u(2) ? Role::Reader : Role::Writer, static_cast<std::uint32_t>(rng()),
              static_cast<std::uint32_t>(rng())};
  switch (u(14)) {
    case 0: m.body = ReaderJoin{contacts()}; break;
    case 1:
      m.body = WriterHandshake{static_cast<ReaderId>(rng()), contacts(),
                               static_cast<StepDistribution>(u(3)), static_cast<PreloadMode>(u(3))};
      break;
    case 2: m.body = ReaderActivate{}; break;
    case 3: {
      ProvideMetadata p{metadata(), u(2) == 1, {}};
      p.preload.resize(u(4));
      for (auto& n : p.preload) n = {static_cast<std::uint32_t>(rng()), static_cast<std::uint32_t>(rng())};
      m.body = p;
      break;
    }
    case 4: m.body = ReleaseStep{StepId{rng()}, static_cast<ReaderId>(rng()), u(2) == 1}; break;
    case 5: m.body = RequestStep{static_cast<ReaderId>(rng())}; break;
    case 6: m.body = ReaderClose{static_cast<ReaderId>(rng())}; break;
    case 7: {
      WriterClose c;
      if (u(2)) c.final_step = StepId{rng()};
      m.body = c;
      break;
    }
    case 8: m.body = EndOfStream{}; break;
    case 9: m.body = ReadRequest{rng(), StepId{rng()}, rng(), rng()}; break;
    case 10:
      m.body = RequestResponse{rng(), static_cast<ReadStatus>(u(3)), bytes(32)};
      break;
    case 11: {
      PreloadData p{StepId{rng()}, static_cast<std::uint32_t>(rng()), {}, {}};
      const auto n = u(4);
      for (std::uint64_t i = 0; i < n; ++i) {
        const auto len = u(9);
        p.ranges.push_back({rng(), len});
        for (std::uint64_t k = 0; k < len; ++k) p.data.push_back(static_cast<std::byte>(rng()));
      }
      m.body = p;
      break;
    }
    case 12: {
      RequestLogPublish p{StepId{rng()}, {}};
      p.reads.resize(u(5));
      for (auto& r : p.reads) r = {rng(), rng(), static_cast<std::uint32_t>(rng())};
      m.body = p;
      break;
    }
    default: m.body = BufferRelease{StepId{rng()}}; break;
  }
  return m;
}

}  // namespace sstage::wire
