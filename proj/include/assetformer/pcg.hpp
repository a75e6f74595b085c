#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "assetformer/asset.hpp"

namespace assetformer {

// Primitive class ids used by the procedural generator. The 25-class space
// leaves room for classes the generator never emits.
namespace pcg_classes {
inline constexpr int kFlatRoof = 0;     // Roof
inline constexpr int kWedgeRoof = 1;    // Roof
inline constexpr int kWall = 8;         // Wall
inline constexpr int kWindow = 16;      // Component
inline constexpr int kDoor = 17;        // Component
inline constexpr int kStair = 18;       // Component
inline constexpr int kFloor = 19;       // Component
}  // namespace pcg_classes

struct PcgParams {
  int max_width = 8;            // footprint cells along x0
  int max_length = 8;           // footprint cells along x2
  int max_floor_height = 5;     // storeys
  int wall_height_per_storey = 2;
  double pitched_roof_prob = 0.5;
  double window_rate = 0.2;     // per eligible wall cell
  double stair_prob = 0.5;

  void validate() const;  // throws std::invalid_argument if it cannot fit the grid
};

enum class DataSource { Synthesized, Collected };

struct DatasetRecord {
  Asset asset;
  PhraseBundle caption;
  DataSource source = DataSource::Synthesized;
};

// Algorithm: draw width/length/storey count, place perimeter walls per layer
// (door + windows as decoration), one floor plane per storey, stairs, and a
// flat or pitched roof on top. Deterministic in (params, seed).
Asset generate_pcg(const PcgParams& params, uint64_t seed);

// Rule-based phrase bundle: building type, storey phrase, roof style,
// window-count phrase. Pure function of the asset.
PhraseBundle caption(const Asset& asset);

uint64_t record_seed(uint64_t dataset_seed, int index);

// Streams n records as line-delimited JSON; record i is generate_pcg with
// record_seed(seed, i), so any line is reproducible in isolation.
void build_dataset(int n, const PcgParams& params, uint64_t seed, const std::string& path);

std::vector<DatasetRecord> read_dataset(const std::string& path);
void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path);

}  // namespace assetformer
