#pragma once

// Corpus ingestion and packing. Every non-empty line becomes BOS … EOS; the
// lines of all given files are concatenated into one stream which is cut into
// windows of context_len ids. Targets are the stream shifted by one; positions
// past the end of the stream hold PAD and are masked.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "treecoder/tokenizer.hpp"
#include "treecoder/tree.hpp"

namespace treecoder {

struct PackedDataset {
  std::size_t context_len = 0;
  std::size_t count = 0;                 // number of windows
  std::vector<std::int32_t> sequences;   // [count×context_len]
  std::vector<std::int32_t> targets;     // [count×context_len]
  std::vector<std::uint8_t> pad_mask;    // [count×context_len], 1 = padding

  std::size_t real_tokens() const {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 0));
  }
  std::size_t target_tokens() const {
    return static_cast<std::size_t>(
        std::count_if(targets.begin(), targets.end(), [](auto t) { return t != kPadId; }));
  }
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Encodes each non-empty line with BOS/EOS and appends it to one stream.
inline std::vector<std::int32_t> encode_lines(std::string_view text, const Vocab& vocab) {
  std::vector<std::int32_t> stream;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty()) {
      auto ids = encode(line, vocab, true);
      stream.insert(stream.end(), ids.begin(), ids.end());
    }
    start = end + 1;
  }
  return stream;
}

inline PackedDataset pack_stream(std::span<const std::int32_t> stream, std::size_t context_len) {
  if (context_len == 0) throw ConfigError("context_len must be positive");
  if (stream.empty()) throw InputError("empty corpus: nothing to pack");
  PackedDataset ds;
  ds.context_len = context_len;
  ds.count = (stream.size() + context_len - 1) / context_len;
  const std::size_t n = ds.count * context_len;
  ds.sequences.assign(n, kPadId);
  ds.targets.assign(n, kPadId);
  ds.pad_mask.assign(n, 1);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    ds.sequences[i] = stream[i];
    ds.pad_mask[i] = 0;
    if (i + 1 < stream.size()) ds.targets[i] = stream[i + 1];
  }
  return ds;
}

// One split from one or more text files, concatenated in argument order.
inline PackedDataset load_and_pack(std::span<const std::filesystem::path> paths, const Vocab& vocab,
                                   std::size_t context_len) {
  std::vector<std::int32_t> stream;
  for (const auto& p : paths) {
    auto ids = encode_lines(read_file(p), vocab);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  if (stream.empty()) throw InputError("empty corpus: no non-empty lines in the given files");
  return pack_stream(stream, context_len);
}

struct Batch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::size_t> indices;  // dataset rows
};

inline Batch gather_batch(const PackedDataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  const std::size_t L = ds.context_len;
  b.inputs.batch = rows.size();
  b.inputs.len = L;
  b.indices.assign(rows.begin(), rows.end());
  for (auto r : rows) {
    if (r >= ds.count) throw InputError("batch row out of range");
    auto at = ds.sequences.begin() + static_cast<long>(r * L);
    b.inputs.ids.insert(b.inputs.ids.end(), at, at + static_cast<long>(L));
    auto pm = ds.pad_mask.begin() + static_cast<long>(r * L);
    b.inputs.pad.insert(b.inputs.pad.end(), pm, pm + static_cast<long>(L));
    auto tg = ds.targets.begin() + static_cast<long>(r * L);
    b.targets.insert(b.targets.end(), tg, tg + static_cast<long>(L));
  }
  return b;
}

inline std::uint64_t epoch_seed(std::uint64_t seed, std::uint64_t epoch) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (epoch + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Batches for one epoch in a seed- and epoch-determined order. The last batch
// may be short. Shuffling is skipped when `shuffle` is false.
class BatchPlan {
 public:
  BatchPlan(const PackedDataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
            bool shuffle = true)
      : ds_(&ds), batch_size_(batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    order_.resize(ds.count);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle) {
      Rng rng(epoch_seed(seed, epoch));
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::size_t size() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

  Batch operator[](std::size_t i) const {
    const std::size_t lo = i * batch_size_;
    const std::size_t hi = std::min(order_.size(), lo + batch_size_);
    return gather_batch(*ds_, std::span<const std::size_t>(order_).subspan(lo, hi - lo));
  }

 private:
  const PackedDataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

}  // namespace treecoder
