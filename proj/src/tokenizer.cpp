#include "assetformer/tokenizer.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "assetformer/rng.hpp"

namespace assetformer {

namespace vocab {

uint64_t layout_hash() {
  static const uint64_t hash = [] {
    const std::string layout = "class:0:25|rot:25:29|x0:29:88|x1:88:132|x2:132:213|eos:213";
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : layout) {
      h ^= uint8_t(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }();
  return hash;
}

}  // namespace vocab

const char* token_type_name(TokenType t) {
  switch (t) {
    case TokenType::Class: return "Class";
    case TokenType::Rotation: return "Rotation";
    case TokenType::X0: return "X0";
    case TokenType::X1: return "X1";
    case TokenType::X2: return "X2";
    case TokenType::Eos: return "Eos";
  }
  return "?";
}

TokenType token_type_at(std::size_t position) {
  switch (position % 5) {
    case 0: return TokenType::Class;
    case 1: return TokenType::Rotation;
    case 2: return TokenType::X0;
    case 3: return TokenType::X1;
    default: return TokenType::X2;
  }
}

TokenSet valid_token_set(TokenType t) {
  switch (t) {
    case TokenType::Class:
      return {vocab::kClassOffset, vocab::kRotationOffset, true};
    case TokenType::Rotation:
      return {vocab::kRotationOffset, vocab::kX0Offset, false};
    case TokenType::X0:
      return {vocab::kX0Offset, vocab::kX1Offset, false};
    case TokenType::X1:
      return {vocab::kX1Offset, vocab::kX2Offset, false};
    case TokenType::X2:
      return {vocab::kX2Offset, vocab::kEosId, false};
    case TokenType::Eos:
      return {vocab::kEosId, vocab::kEosId + 1, false};
  }
  throw std::logic_error("bad token type");
}

OrderingMethod ordering_method_from_string(const std::string& s) {
  if (s == "raw") return OrderingMethod::Raw;
  if (s == "dfs") return OrderingMethod::DFS;
  if (s == "bfs") return OrderingMethod::BFS;
  if (s == "random") return OrderingMethod::RandomPrimitive;
  throw std::invalid_argument("unknown ordering method: " + s);
}

const char* ordering_method_name(OrderingMethod m) {
  switch (m) {
    case OrderingMethod::Raw: return "raw";
    case OrderingMethod::DFS: return "dfs";
    case OrderingMethod::BFS: return "bfs";
    case OrderingMethod::RandomPrimitive: return "random";
  }
  return "?";
}

namespace {

// Lexicographic (x1, x0, x2) corner key; vertical coordinate first.
std::array<int, 3> corner_key(const Primitive& p) {
  return {p.pos[1], p.pos[0], p.pos[2]};
}

std::vector<int> traverse_component(const AdjacencyGraph& graph, const Asset& asset,
                                    const std::vector<int>& component, bool depth_first,
                                    std::mt19937_64& rng) {
  const int start = *std::min_element(
      component.begin(), component.end(),
      [&](int a, int b) { return corner_key(asset.primitives[a]) < corner_key(asset.primitives[b]); });

  std::vector<int> order;
  std::vector<char> visited(graph.num_nodes, 0);
  if (depth_first) {
    std::vector<int> stack{start};
    visited[start] = 1;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      order.push_back(u);
      std::vector<int> next;
      for (int v : graph.neighbors[u]) {
        if (!visited[v]) next.push_back(v);
      }
      shuffle(rng, next);
      for (int v : next) {
        visited[v] = 1;
        stack.push_back(v);
      }
    }
  } else {
    std::vector<int> queue{start};
    visited[start] = 1;
    for (size_t head = 0; head < queue.size(); ++head) {
      int u = queue[head];
      order.push_back(u);
      std::vector<int> next;
      for (int v : graph.neighbors[u]) {
        if (!visited[v]) next.push_back(v);
      }
      shuffle(rng, next);
      for (int v : next) {
        visited[v] = 1;
        queue.push_back(v);
      }
    }
  }
  return order;
}

}  // namespace

PermutationOrder reorder(const Asset& asset, OrderingMethod method, uint64_t seed) {
  const int n = int(asset.primitives.size());
  PermutationOrder result;
  result.tau.resize(n);
  std::iota(result.tau.begin(), result.tau.end(), 0);
  if (method == OrderingMethod::Raw) return result;

  std::mt19937_64 rng(seed);
  if (method == OrderingMethod::RandomPrimitive) {
    shuffle(rng, result.tau);
    return result;
  }

  auto graph = build_adjacency(asset);
  auto components = connected_components(graph);
  std::sort(components.begin(), components.end(),
            [&](const std::vector<int>& a, const std::vector<int>& b) {
              auto min_corner = [&](const std::vector<int>& comp) {
                std::array<int, 3> best = {INT32_MAX, INT32_MAX, INT32_MAX};
                for (int i : comp) best = std::min(best, corner_key(asset.primitives[i]));
                return best;
              };
              return min_corner(a) < min_corner(b);
            });

  result.tau.clear();
  for (const auto& comp : components) {
    auto order = traverse_component(graph, asset, comp, method == OrderingMethod::DFS, rng);
    result.tau.insert(result.tau.end(), order.begin(), order.end());
  }
  return result;
}

TokenSequence tokenize(const Asset& asset, const PermutationOrder& order) {
  if (order.tau.size() != asset.primitives.size()) {
    throw std::invalid_argument("permutation size does not match primitive count");
  }
  TokenSequence seq;
  seq.ids.reserve(order.tau.size() * 5 + 1);
  for (int idx : order.tau) {
    const Primitive& p = asset.primitives.at(size_t(idx));
    seq.ids.push_back(vocab::kClassOffset + p.cls);
    seq.ids.push_back(vocab::kRotationOffset + p.rot);
    seq.ids.push_back(vocab::kX0Offset + p.pos[0]);
    seq.ids.push_back(vocab::kX1Offset + p.pos[1]);
    seq.ids.push_back(vocab::kX2Offset + p.pos[2]);
  }
  seq.ids.push_back(vocab::kEosId);
  return seq;
}

Asset detokenize(const TokenSequence& tokens) {
  Asset asset;
  const auto& ids = tokens.ids;
  size_t pos = 0;
  while (true) {
    if (pos >= ids.size()) {
      throw TokenScheduleError(pos, "sequence ended without EOS");
    }
    int id = ids[pos];
    if (id == vocab::kEosId) {
      if (pos % 5 != 0) {
        throw TokenScheduleError(pos, "EOS inside a primitive tuple at position " +
                                          std::to_string(pos));
      }
      if (pos + 1 != ids.size()) {
        throw TokenScheduleError(pos + 1, "trailing tokens after EOS");
      }
      return asset;
    }
    if (pos + 5 > ids.size()) {
      throw TokenScheduleError(ids.size(), "truncated primitive tuple");
    }
    Primitive p;
    for (int k = 0; k < 5; ++k) {
      const TokenType t = token_type_at(pos + k);
      const TokenSet set = valid_token_set(t);
      const int v = ids[pos + k];
      if (v < set.lo || v >= set.hi) {
        throw TokenScheduleError(pos + k, std::string("token outside ") + token_type_name(t) +
                                              " segment at position " + std::to_string(pos + k));
      }
      switch (t) {
        case TokenType::Class: p.cls = v - vocab::kClassOffset; break;
        case TokenType::Rotation: p.rot = v - vocab::kRotationOffset; break;
        case TokenType::X0: p.pos[0] = v - vocab::kX0Offset; break;
        case TokenType::X1: p.pos[1] = v - vocab::kX1Offset; break;
        case TokenType::X2: p.pos[2] = v - vocab::kX2Offset; break;
        default: break;
      }
    }
    asset.primitives.push_back(p);
    pos += 5;
  }
}

namespace phrases {

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = {
      // building types
      "castle", "skyscraper", "courtyard", "mansion", "townhouse", "apartment", "cottage",
      "tower",
      // height phrases
      "single-story", "multi-story", "high-rise",
      // feature phrases
      "pitched roof", "flat roof", "lots of windows", "few windows", "minimal windows",
      "magnificent", "dull", "with stairs", "with courtyard"};
  return vocab;
}

int id_of(const std::string& phrase) {
  const auto& v = vocabulary();
  auto it = std::find(v.begin(), v.end(), phrase);
  if (it == v.end()) throw std::out_of_range("unknown phrase: " + phrase);
  return int(it - v.begin());
}

std::array<int, 4> bundle_ids(const PhraseBundle& bundle) {
  auto p = bundle.phrases();
  return {id_of(p[0]), id_of(p[1]), id_of(p[2]), id_of(p[3])};
}

}  // namespace phrases

namespace {

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw AssetIoError("truncated tokenized dataset");
  return value;
}

}  // namespace

void write_tokenized(const TokenizedDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AssetIoError("cannot open for writing: " + path);
  out.write("AFTK", 4);
  write_pod<uint32_t>(out, kTokenizedFormatVersion);
  write_pod<uint64_t>(out, vocab::layout_hash());
  write_pod<uint32_t>(out, ds.max_seq_len);
  write_pod<uint32_t>(out, uint32_t(ds.records.size()));
  for (const auto& rec : ds.records) {
    for (int id : rec.phrase_ids) write_pod<uint16_t>(out, uint16_t(id));
    write_pod<uint32_t>(out, uint32_t(rec.tokens.size()));
    for (int t : rec.tokens) write_pod<uint16_t>(out, uint16_t(t));
  }
  if (!out) throw AssetIoError("write failed: " + path);
}

TokenizedDataset read_tokenized(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AssetIoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "AFTK") throw AssetIoError("bad tokenized magic");
  const auto version = read_pod<uint32_t>(in);
  if (version != kTokenizedFormatVersion) {
    throw AssetIoError("unsupported tokenized dataset version " + std::to_string(version));
  }
  const auto hash = read_pod<uint64_t>(in);
  if (hash != vocab::layout_hash()) throw AssetIoError("vocabulary hash mismatch");
  TokenizedDataset ds;
  ds.max_seq_len = read_pod<uint32_t>(in);
  const auto count = read_pod<uint32_t>(in);
  ds.records.resize(count);
  for (auto& rec : ds.records) {
    for (auto& id : rec.phrase_ids) id = read_pod<uint16_t>(in);
    const auto len = read_pod<uint32_t>(in);
    rec.tokens.resize(len);
    for (auto& t : rec.tokens) t = read_pod<uint16_t>(in);
  }
  return ds;
}

}  // namespace assetformer
