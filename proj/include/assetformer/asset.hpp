#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace assetformer {

inline constexpr int kNumClasses = 25;
inline constexpr int kNumRotations = 4;
// Grid extents per axis; x1 is the vertical axis.
inline constexpr std::array<int, 3> kGridExtent = {59, 44, 81};
inline constexpr int kMaxPrimitives = 1000;

enum class PrimitiveCategory { Roof, Wall, Component };

// Fixed partition: ids 0-7 Roof, 8-15 Wall, 16-24 Component.
PrimitiveCategory category_of(int class_id);
const char* category_name(PrimitiveCategory c);

struct Primitive {
  int cls = 0;                       // [0, 25)
  int rot = 0;                       // quarter turns about the vertical axis, [0, 4)
  std::array<int, 3> pos = {0, 0, 0};

  bool operator==(const Primitive&) const = default;
  bool in_range() const;
};

struct PhraseBundle {
  std::string building_type;
  std::string height_phrase;
  std::array<std::string, 2> features;

  bool operator==(const PhraseBundle&) const = default;
  std::array<std::string, 4> phrases() const {
    return {building_type, height_phrase, features[0], features[1]};
  }
};

struct Asset {
  std::vector<Primitive> primitives;
  std::optional<PhraseBundle> caption;
};

struct AdjacencyGraph {
  int num_nodes = 0;
  std::vector<std::pair<int, int>> edges;    // i < j, unique
  std::vector<std::vector<int>> neighbors;   // symmetric lists, sorted
};

// Edge (i, j) iff Chebyshev distance between cell positions is <= 1 and i != j.
AdjacencyGraph build_adjacency(const Asset& asset);

std::vector<std::vector<int>> connected_components(const AdjacencyGraph& graph);

enum class Severity { Error, Warning, Info };

struct Finding {
  Severity severity = Severity::Info;
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;
  int num_components = 0;
  int roof_rule_violations = 0;

  int error_count() const;
  int warning_count() const;
  bool ok() const { return error_count() == 0; }
};

// Checks coordinate ranges, exact duplicates (error), position collisions
// (warning), connectivity, and the roof-support rule: every Roof primitive
// must have a Wall or Roof primitive in the 3x3 cell patch one layer below.
ValidationReport validate_asset(const Asset& asset);

// Wavefront OBJ with one group per primitive. Wall/Component classes emit a
// unit box (8 vertices, 12 triangles); Roof classes emit a wedge oriented by
// rotation (6 vertices, 8 triangles).
void export_mesh(const Asset& asset, const std::string& path);
void export_mesh(const Asset& asset, std::ostream& out);

struct AssetIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ReadResult {
  Asset asset;
  std::vector<std::string> warnings;  // e.g. unknown fields
};

inline constexpr int kAssetSchemaVersion = 1;

nlohmann::ordered_json asset_to_json(const Asset& asset);
ReadResult asset_from_json(const nlohmann::json& j);

ReadResult read_asset(std::istream& in);
ReadResult read_asset_file(const std::string& path);
void write_asset(const Asset& asset, std::ostream& out);
void write_asset_file(const Asset& asset, const std::string& path);

}  // namespace assetformer
