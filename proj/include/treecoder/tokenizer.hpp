#pragma once

// Byte-level BPE. Ids 0..2 are PAD/BOS/EOS, ids 3..258 are the 256 single
// bytes, and every learned merge appends one piece. Input bytes are never
// normalized, so any byte string encodes and decodes losslessly.

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "treecoder/errors.hpp"

namespace treecoder {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kFirstByteId = 3;
inline constexpr std::int32_t kFirstMergeId = kFirstByteId + 256;
inline constexpr int kVocabFormatVersion = 1;

class Vocab {
 public:
  Vocab() {
    pieces_ = {"<pad>", "<s>", "</s>"};
    for (int b = 0; b < 256; ++b) pieces_.emplace_back(1, static_cast<char>(b));
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw InputError("unknown token id " + std::to_string(id));
    }
    return pieces_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }

  static bool is_special(std::int32_t id) { return id >= 0 && id < kFirstByteId; }
  static std::int32_t byte_id(std::uint8_t b) { return kFirstByteId + b; }

  std::int32_t add_merge(std::int32_t left, std::int32_t right) {
    if (is_special(left) || is_special(right)) throw ConfigError("specials cannot be merged");
    const auto id = static_cast<std::int32_t>(pieces_.size());
    pieces_.push_back(piece(left) + piece(right));
    rank_[key(left, right)] = static_cast<std::int32_t>(merges_.size());
    merges_.emplace_back(left, right);
    return id;
  }

  // Merge priority of an adjacent pair, or -1 when no rule exists.
  std::int32_t rank(std::int32_t left, std::int32_t right) const {
    auto it = rank_.find(key(left, right));
    return it == rank_.end() ? -1 : it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = kVocabFormatVersion;
    j["vocab_size"] = pieces_.size();
    j["specials"] = {{"pad", kPadId}, {"bos", kBosId}, {"eos", kEosId}};
    auto pieces = nlohmann::json::array();
    for (const auto& p : pieces_) pieces.push_back(to_hex(p));
    j["pieces"] = std::move(pieces);
    auto merges = nlohmann::json::array();
    for (auto [l, r] : merges_) merges.push_back({l, r});
    j["merges"] = std::move(merges);
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != kVocabFormatVersion) throw InputError("unsupported vocab version");
      Vocab v;
      for (const auto& m : j.at("merges")) v.add_merge(m.at(0).get<std::int32_t>(), m.at(1).get<std::int32_t>());
      const auto& pieces = j.at("pieces");
      if (pieces.size() != v.size() || j.at("vocab_size").get<std::size_t>() != v.size()) {
        throw InputError("vocab piece count does not match its merges");
      }
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (from_hex(pieces[i].get<std::string>()) != v.pieces_[i]) {
          throw InputError("vocab piece " + std::to_string(i) + " disagrees with its merge rule");
        }
      }
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("malformed vocab file: ") + e.what());
    }
  }

  static std::string to_hex(std::string_view bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
      out.push_back(digits[c >> 4]);
      out.push_back(digits[c & 15]);
    }
    return out;
  }

  static std::string from_hex(std::string_view hex) {
    auto nibble = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      throw InputError("invalid hex digit in vocab");
    };
    if (hex.size() % 2) throw InputError("odd-length hex piece in vocab");
    std::string out;
    for (std::size_t i = 0; i < hex.size(); i += 2)
      out.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
    return out;
  }

 private:
  static std::uint64_t key(std::int32_t l, std::int32_t r) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
           static_cast<std::uint32_t>(r);
  }

  std::vector<std::string> pieces_;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::unordered_map<std::uint64_t, std::int32_t> rank_;
};

namespace detail {

inline bool is_digit_byte_piece(std::int32_t id) {
  return id >= Vocab::byte_id('0') && id <= Vocab::byte_id('9');
}

inline std::vector<std::int32_t> byte_ids(std::string_view text) {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(Vocab::byte_id(c));
  return out;
}

// Replaces every non-overlapping (left, right) occurrence, scanning left to right.
inline void apply_merge(std::vector<std::int32_t>& sym, std::int32_t left, std::int32_t right,
                        std::int32_t merged) {
  std::size_t w = 0;
  for (std::size_t i = 0; i < sym.size(); ++i) {
    if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
      sym[w++] = merged;
      ++i;
    } else {
      sym[w++] = sym[i];
    }
  }
  sym.resize(w);
}

}  // namespace detail

// Learns merges on the corpus split at '\n' (newlines never join pieces;
// spaces do). Stops at vocab_size or when no eligible pair occurs twice.
// With split_digits, pieces containing a digit never merge.
inline Vocab train_bpe(std::string_view corpus, std::size_t vocab_size, bool split_digits) {
  if (vocab_size <= static_cast<std::size_t>(kFirstMergeId)) {
    throw ConfigError("vocab_size must exceed " + std::to_string(kFirstMergeId) +
                      " (3 specials + 256 byte pieces), got " + std::to_string(vocab_size));
  }
  if (corpus.empty()) throw InputError("cannot train a tokenizer on an empty corpus");

  Vocab vocab;
  struct Word {
    std::vector<std::int32_t> sym;
    std::int64_t count;
  };
  std::vector<Word> words;
  {
    std::unordered_map<std::string_view, std::size_t> seen;
    std::size_t start = 0;
    while (start <= corpus.size()) {
      std::size_t end = corpus.find('\n', start);
      if (end == std::string_view::npos) end = corpus.size();
      auto line = corpus.substr(start, end - start);
      if (!line.empty()) {
        auto [it, fresh] = seen.emplace(line, words.size());
        if (fresh) words.push_back({detail::byte_ids(line), 0});
        ++words[it->second].count;
      }
      start = end + 1;
    }
  }

  auto key = [](std::int32_t l, std::int32_t r) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
           static_cast<std::uint32_t>(r);
  };
  auto eligible = [&](std::int32_t l, std::int32_t r) {
    return !split_digits || (!detail::is_digit_byte_piece(l) && !detail::is_digit_byte_piece(r));
  };

  struct Entry {
    std::int64_t count;
    std::int32_t left, right;
  };
  // Most frequent first; ties go to the lexicographically smallest pair of
  // piece byte strings.
  auto better = [&vocab](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count > b.count;
    const auto& al = vocab.piece(a.left);
    const auto& bl = vocab.piece(b.left);
    if (al != bl) return al < bl;
    const auto& ar = vocab.piece(a.right);
    const auto& br = vocab.piece(b.right);
    if (ar != br) return ar < br;
    if (a.left != b.left) return a.left < b.left;
    return a.right < b.right;
  };
  std::set<Entry, decltype(better)> queue(better);
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> where;

  auto change = [&](std::int32_t l, std::int32_t r, std::int64_t delta) {
    const auto k = key(l, r);
    auto& c = counts[k];
    if (c > 0) queue.erase(Entry{c, l, r});
    c += delta;
    if (c > 0) queue.insert(Entry{c, l, r});
  };
  auto account = [&](std::size_t wi, int sign) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
      const auto l = w.sym[i], r = w.sym[i + 1];
      if (!eligible(l, r)) continue;
      change(l, r, sign * w.count);
      if (sign > 0) where[key(l, r)].insert(wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, +1);

  while (vocab.size() < vocab_size && !queue.empty()) {
    const Entry top = *queue.begin();
    if (top.count < 2) break;
    const auto merged = vocab.add_merge(top.left, top.right);
    const auto affected = where[key(top.left, top.right)];
    std::vector<std::size_t> order(affected.begin(), affected.end());
    std::sort(order.begin(), order.end());
    for (auto wi : order) {
      auto& sym = words[wi].sym;
      bool present = false;
      for (std::size_t i = 0; i + 1 < sym.size() && !present; ++i)
        present = sym[i] == top.left && sym[i + 1] == top.right;
      if (!present) continue;
      account(wi, -1);
      detail::apply_merge(sym, top.left, top.right, merged);
      account(wi, +1);
    }
  }
  return vocab;
}

// Repeatedly applies the highest-priority (earliest learned) merge present.
inline std::vector<std::int32_t> encode(std::string_view text, const Vocab& vocab, bool add_specials) {
  auto sym = detail::byte_ids(text);
  while (sym.size() > 1) {
    std::int32_t best = -1;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto r = vocab.rank(sym[i], sym[i + 1]);
      if (r >= 0 && (best < 0 || r < best)) best = r;
    }
    if (best < 0) break;
    const auto [l, r] = vocab.merges()[static_cast<std::size_t>(best)];
    detail::apply_merge(sym, l, r, kFirstMergeId + best);
  }
  if (add_specials) {
    sym.insert(sym.begin(), kBosId);
    sym.push_back(kEosId);
  }
  return sym;
}

inline std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab, bool strip_specials) {
  std::string out;
  for (auto id : ids) {
    const auto& p = vocab.piece(id);
    if (strip_specials && Vocab::is_special(id)) continue;
    out += p;
  }
  return out;
}

}  // namespace treecoder
