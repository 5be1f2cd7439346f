#include "sstage/payload.hpp"

#include <algorithm>
#include <charconv>
#include <random>

namespace sstage {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Splits [0, n) into `parts` near-equal contiguous ranges; the first n % parts get one extra.
std::pair<std::uint64_t, std::uint64_t> split_range(std::uint64_t n, std::uint64_t parts, std::uint64_t i) {
  const auto base = n / parts, extra = n % parts;
  const auto start = i * base + std::min(i, extra);
  return {start, base + (i < extra ? 1 : 0)};
}

std::vector<std::uint64_t> prime_factors(std::uint64_t n) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t p = 2; p * p <= n; ++p) {
    while (n % p == 0) {
      out.push_back(p);
      n /= p;
    }
  }
  if (n > 1) out.push_back(n);
  std::sort(out.rbegin(), out.rend());
  return out;
}

}  // namespace

std::uint64_t payload_element(std::uint64_t seed, StepId step, std::string_view variable,
                              std::uint64_t global_index) {
  auto h = splitmix64(seed ^ name_hash(variable));
  h = splitmix64(h ^ step.value);
  return splitmix64(h ^ global_index);
}

Bytes payload_block(std::uint64_t seed, StepId step, std::string_view variable, const Dims& shape,
                    const BlockExtent& extent) {
  require_valid_extent(shape, extent);
  const auto n = element_count(extent.count);
  Bytes out;
  out.reserve(n * kPayloadElementSize);
  ByteWriter w(out);
  if (n == 0) return out;
  const auto nd = shape.size();
  Dims idx(nd, 0);
  for (std::uint64_t e = 0; e < n; ++e) {
    std::uint64_t global = 0;
    for (std::size_t d = 0; d < nd; ++d) global = global * shape[d] + extent.start[d] + idx[d];
    w.u64(payload_element(seed, step, variable, global));
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < extent.count[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

VariableDef payload_variable(std::string name, Dims shape) {
  return {std::move(name), kPayloadElementSize, std::move(shape), "double"};
}

Decomposition Decomposition::parse(std::string_view text) {
  if (text == "striped") return {Kind::Striped, 0};
  if (text == "blocked") return {Kind::Blocked, 0};
  constexpr std::string_view kRandom = "random:";
  if (text.substr(0, kRandom.size()) == kRandom) {
    const auto digits = text.substr(kRandom.size());
    std::uint64_t seed = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), seed);
    if (ec == std::errc() && p == digits.data() + digits.size() && !digits.empty()) return {Kind::Random, seed};
  }
  throw Error(ErrorCode::ParseError,
              "decomposition '" + std::string(text) + "' is not striped, blocked or random:<seed>");
}

std::string Decomposition::to_string() const {
  switch (kind) {
    case Kind::Striped: return "striped";
    case Kind::Blocked: return "blocked";
    case Kind::Random: return "random:" + std::to_string(seed);
  }
  return "?";
}

std::vector<std::vector<BlockExtent>> decompose(const Dims& shape, int nranks, const Decomposition& d) {
  if (nranks < 1) throw Error(ErrorCode::InvalidParameter, "decompose needs at least one rank");
  if (shape.empty()) throw Error(ErrorCode::ExtentInvalid, "decompose needs at least one dimension");
  std::vector<std::vector<BlockExtent>> out(static_cast<std::size_t>(nranks));
  const auto nd = shape.size();
  if (std::any_of(shape.begin(), shape.end(), [](auto x) { return x == 0; })) return out;
  const auto ranks = static_cast<std::uint64_t>(nranks);

  if (d.kind == Decomposition::Kind::Random) {
    std::mt19937_64 rng(d.seed);
    std::vector<BlockExtent> pieces{{Dims(nd, 0), shape}};
    while (pieces.size() < ranks) {
      std::vector<std::size_t> splittable;
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (std::any_of(pieces[i].count.begin(), pieces[i].count.end(), [](auto c) { return c >= 2; })) {
          splittable.push_back(i);
        }
      }
      if (splittable.empty()) break;
      auto& p = pieces[splittable[rng() % splittable.size()]];
      std::vector<std::size_t> dims;
      for (std::size_t k = 0; k < nd; ++k) {
        if (p.count[k] >= 2) dims.push_back(k);
      }
      const auto k = dims[rng() % dims.size()];
      const auto cut = 1 + rng() % (p.count[k] - 1);
      BlockExtent rest = p;
      rest.start[k] += cut;
      rest.count[k] -= cut;
      p.count[k] = cut;
      pieces.push_back(std::move(rest));
    }
    std::shuffle(pieces.begin(), pieces.end(), rng);
    for (std::size_t i = 0; i < pieces.size(); ++i) out[i].push_back(std::move(pieces[i]));
    return out;
  }

  // Process grid: parts[k] slabs along dimension k.
  Dims parts(nd, 1);
  if (d.kind == Decomposition::Kind::Striped) {
    parts[0] = std::min(ranks, shape[0]);
  } else {
    for (auto f : prime_factors(ranks)) {
      std::size_t best = nd;
      for (std::size_t k = 0; k < nd; ++k) {
        if (parts[k] * f > shape[k]) continue;
        if (best == nd || shape[k] * parts[best] > shape[best] * parts[k]) best = k;
      }
      if (best != nd) parts[best] *= f;
    }
  }
  std::uint64_t cells = 1;
  for (auto p : parts) cells *= p;
  for (std::uint64_t r = 0; r < cells; ++r) {
    BlockExtent e{Dims(nd), Dims(nd)};
    auto rem = r;
    for (std::size_t k = nd; k-- > 0;) {
      const auto [s, c] = split_range(shape[k], parts[k], rem % parts[k]);
      e.start[k] = s;
      e.count[k] = c;
      rem /= parts[k];
    }
    out[r].push_back(std::move(e));
  }
  return out;
}

std::uint64_t checksum(std::span<const std::byte> data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : data) {
    h ^= std::to_integer<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sstage
