#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "assetformer/asset.hpp"

namespace assetformer {

// Partitioned token space: class, rotation, three position axes, EOS.
namespace vocab {
inline constexpr int kClassOffset = 0;
inline constexpr int kRotationOffset = 25;
inline constexpr int kX0Offset = 29;
inline constexpr int kX1Offset = 88;
inline constexpr int kX2Offset = 132;
inline constexpr int kEosId = 213;
inline constexpr int kSize = 214;

// FNV-1a over the segment layout; embedded in dataset and checkpoint headers.
uint64_t layout_hash();
}  // namespace vocab

enum class TokenType { Class, Rotation, X0, X1, X2, Eos };

const char* token_type_name(TokenType t);

// Periodic slot schedule over asset-token positions: (Class, Rotation, X0,
// X1, X2) with period 5. EOS is not a scheduled type; it is admitted at
// Class slots via valid_token_set.
TokenType token_type_at(std::size_t position);

struct TokenSet {
  int lo = 0, hi = 0;        // [lo, hi)
  bool include_eos = false;  // EOS admitted in addition to the segment

  bool contains(int id) const {
    return (id >= lo && id < hi) || (include_eos && id == vocab::kEosId);
  }
  int count() const { return hi - lo + (include_eos ? 1 : 0); }
};

TokenSet valid_token_set(TokenType t);

struct TokenSequence {
  std::vector<int> ids;
  bool truncated = false;  // max-token cutoff during generation

  bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

struct PermutationOrder {
  std::vector<int> tau;  // tau[k] = original index of the k-th primitive
};

enum class OrderingMethod { Raw, DFS, BFS, RandomPrimitive };

OrderingMethod ordering_method_from_string(const std::string& s);
const char* ordering_method_name(OrderingMethod m);

// Traversal starts at the primitive with lexicographically minimal
// (x1, x0, x2); ties among frontier candidates break uniformly at random
// from the seed. Disconnected components are visited in order of their
// minimal corners.
PermutationOrder reorder(const Asset& asset, OrderingMethod method, uint64_t seed = 0);

TokenSequence tokenize(const Asset& asset, const PermutationOrder& order);

struct TokenScheduleError : std::runtime_error {
  std::size_t position;
  TokenScheduleError(std::size_t pos, const std::string& what)
      : std::runtime_error(what), position(pos) {}
};

// Inverse of tokenize; throws TokenScheduleError on a token outside its
// slot's segment, a truncated tuple, or a missing terminator.
Asset detokenize(const TokenSequence& tokens);

// Closed caption vocabulary shared by the captioner and the condition
// embedding table. Ids are stable; kNullPhraseId is the learned
// unconditional row.
namespace phrases {
const std::vector<std::string>& vocabulary();
int id_of(const std::string& phrase);  // throws std::out_of_range on unknown phrase
inline constexpr int kVocabSize = 20;
inline constexpr int kNullPhraseId = 20;

std::array<int, 4> bundle_ids(const PhraseBundle& bundle);
}  // namespace phrases

// Binary tokenized-dataset container. Layout (little-endian):
//   magic "AFTK", u32 version, u64 vocab hash, u32 max_seq_len, u32 count,
//   then per record: 4 x u16 phrase ids, u32 length, length x u16 token ids.
struct TokenizedRecord {
  std::array<int, 4> phrase_ids{};
  std::vector<int> tokens;
};

struct TokenizedDataset {
  uint32_t max_seq_len = 0;
  std::vector<TokenizedRecord> records;
};

inline constexpr uint32_t kTokenizedFormatVersion = 1;

void write_tokenized(const TokenizedDataset& ds, const std::string& path);
TokenizedDataset read_tokenized(const std::string& path);

}  // namespace assetformer
