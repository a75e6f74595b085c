#include "assetformer/pcg.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "assetformer/rng.hpp"

namespace assetformer {

namespace {

// Perimeter cells of a width x length footprint in a fixed walk order.
std::vector<std::array<int, 2>> perimeter_cells(int width, int length) {
  std::vector<std::array<int, 2>> cells;
  for (int i = 0; i < width; ++i) {
    for (int j = 0; j < length; ++j) {
      if (i == 0 || i == width - 1 || j == 0 || j == length - 1) {
        cells.push_back({i, j});
      }
    }
  }
  return cells;
}

int facing_rotation(int i, int j, int width, int length) {
  if (j == 0) return 0;
  if (i == width - 1) return 1;
  if (j == length - 1) return 2;
  return 3;
}

int max_pitched_layers(int width, int length) {
  return (std::min(width, length) + 1) / 2;
}

}  // namespace

void PcgParams::validate() const {
  if (max_width < 1 || max_length < 1 || max_floor_height < 1 || wall_height_per_storey < 1) {
    throw std::invalid_argument("pcg params must be >= 1");
  }
  if (max_width > kGridExtent[0]) {
    throw std::invalid_argument("max_width exceeds grid extent");
  }
  if (max_length > kGridExtent[2]) {
    throw std::invalid_argument("max_length exceeds grid extent");
  }
  int max_height = max_floor_height * wall_height_per_storey +
                   max_pitched_layers(max_width, max_length);
  if (max_height > kGridExtent[1]) {
    throw std::invalid_argument("storeys * wall height + roof exceeds vertical extent");
  }
}

Asset generate_pcg(const PcgParams& params, uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);

  const int width = uniform_int(rng, 1, params.max_width);
  const int length = uniform_int(rng, 1, params.max_length);
  const int storeys = uniform_int(rng, 1, params.max_floor_height);
  const int h = params.wall_height_per_storey;
  const int wall_top = storeys * h;  // roof base layer
  const bool pitched = bernoulli(rng, params.pitched_roof_prob);

  Asset asset;
  auto put = [&asset](int cls, int rot, int x0, int x1, int x2) {
    asset.primitives.push_back({cls, rot, {x0, x1, x2}});
  };

  // Walls on the perimeter, every layer; one ground-level door, windows on
  // intermediate layers. The top layer stays solid so the roof is supported.
  const auto perimeter = perimeter_cells(width, length);
  int door_index = perimeter.size() >= 2 ? uniform_int(rng, 0, int(perimeter.size()) - 1) : -1;
  for (int y = 0; y < wall_top; ++y) {
    for (size_t k = 0; k < perimeter.size(); ++k) {
      const auto [i, j] = perimeter[k];
      const int rot = facing_rotation(i, j, width, length);
      if (y == 0 && int(k) == door_index) {
        put(pcg_classes::kDoor, rot, i, y, j);
      } else if (y >= 1 && y != wall_top - 1 && bernoulli(rng, params.window_rate)) {
        put(pcg_classes::kWindow, rot, i, y, j);
      } else {
        put(pcg_classes::kWall, rot, i, y, j);
      }
    }
  }

  // One floor plane per storey.
  for (int s = 0; s < storeys; ++s) {
    for (int i = 0; i < width; ++i) {
      for (int j = 0; j < length; ++j) {
        put(pcg_classes::kFloor, 0, i, s * h, j);
      }
    }
  }

  // Stair column through the storeys.
  if (storeys >= 2 && bernoulli(rng, params.stair_prob)) {
    const int ci = width / 2, cj = length / 2;
    for (int y = 0; y < wall_top; ++y) {
      put(pcg_classes::kStair, 0, ci, y, cj);
    }
  }

  if (pitched) {
    // Inset wedge rings, one layer per inset step.
    for (int t = 0; ; ++t) {
      const int lo_i = t, hi_i = width - 1 - t, lo_j = t, hi_j = length - 1 - t;
      if (lo_i > hi_i || lo_j > hi_j) break;
      for (int i = lo_i; i <= hi_i; ++i) {
        for (int j = lo_j; j <= hi_j; ++j) {
          if (i != lo_i && i != hi_i && j != lo_j && j != hi_j) continue;
          int rot = j == lo_j ? 0 : (i == hi_i ? 1 : (j == hi_j ? 2 : 3));
          put(pcg_classes::kWedgeRoof, rot, i, wall_top + t, j);
        }
      }
    }
  } else {
    // Interior cells more than one cell away from the perimeter get a support
    // column so the flat plane satisfies the roof rule.
    for (int i = 0; i < width; ++i) {
      for (int j = 0; j < length; ++j) {
        if (std::min(i, width - 1 - i) >= 2 && std::min(j, length - 1 - j) >= 2) {
          put(pcg_classes::kWall, 0, i, wall_top - 1, j);
        }
      }
    }
    for (int i = 0; i < width; ++i) {
      for (int j = 0; j < length; ++j) {
        put(pcg_classes::kFlatRoof, 0, i, wall_top, j);
      }
    }
  }

  asset.caption = caption(asset);
  return asset;
}

PhraseBundle caption(const Asset& asset) {
  int windows = 0;
  bool any_roof = false, any_pitched = false;
  std::set<int> floor_layers;
  int min0 = kGridExtent[0], max0 = -1, min1 = kGridExtent[1], max1 = -1;
  int min2 = kGridExtent[2], max2 = -1;
  for (const auto& p : asset.primitives) {
    if (p.cls == pcg_classes::kWindow) ++windows;
    if (p.cls == pcg_classes::kFloor) floor_layers.insert(p.pos[1]);
    if (category_of(p.cls) == PrimitiveCategory::Roof) {
      any_roof = true;
      if (p.cls != pcg_classes::kFlatRoof) any_pitched = true;
    }
    min0 = std::min(min0, p.pos[0]);
    max0 = std::max(max0, p.pos[0]);
    min1 = std::min(min1, p.pos[1]);
    max1 = std::max(max1, p.pos[1]);
    min2 = std::min(min2, p.pos[2]);
    max2 = std::max(max2, p.pos[2]);
  }

  int storeys;
  if (!floor_layers.empty()) {
    storeys = int(floor_layers.size());
  } else {
    storeys = std::max(1, (max1 - min1 + 1) / 2);
  }
  const int area = std::max(0, max0 - min0 + 1) * std::max(0, max2 - min2 + 1);

  PhraseBundle b;
  b.height_phrase = storeys == 1 ? "single-story" : (storeys <= 5 ? "multi-story" : "high-rise");

  if (storeys > 5) {
    b.building_type = area <= 9 ? "tower" : "skyscraper";
  } else if (storeys == 1) {
    b.building_type = area >= 25 ? "courtyard" : "cottage";
  } else if (area >= 36) {
    b.building_type = "mansion";
  } else if (windows > 15) {
    b.building_type = "apartment";
  } else if (any_pitched) {
    b.building_type = "townhouse";
  } else {
    b.building_type = "castle";
  }

  b.features[0] = (any_roof && any_pitched) ? "pitched roof" : "flat roof";
  b.features[1] = windows > 15 ? "lots of windows"
                               : (windows >= 6 ? "few windows" : "minimal windows");
  return b;
}

uint64_t record_seed(uint64_t dataset_seed, int index) {
  return splitmix64(dataset_seed ^ splitmix64(uint64_t(index)));
}

namespace {

nlohmann::ordered_json record_to_json(const DatasetRecord& rec) {
  Asset a = rec.asset;
  a.caption = rec.caption;
  auto j = asset_to_json(a);
  j["source"] = rec.source == DataSource::Synthesized ? "Synthesized" : "Collected";
  return j;
}

DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord rec;
  rec.asset = asset_from_json(j).asset;
  if (!rec.asset.caption) throw AssetIoError("dataset record missing caption");
  rec.caption = *rec.asset.caption;
  std::string src = j.value("source", "Synthesized");
  if (src == "Collected") {
    rec.source = DataSource::Collected;
  } else if (src == "Synthesized") {
    rec.source = DataSource::Synthesized;
  } else {
    throw AssetIoError("unknown dataset source: " + src);
  }
  return rec;
}

}  // namespace

void build_dataset(int n, const PcgParams& params, uint64_t seed, const std::string& path) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  params.validate();
  std::ofstream out(path);
  if (!out) throw AssetIoError("cannot open for writing: " + path);
  for (int i = 0; i < n; ++i) {
    Asset asset = generate_pcg(params, record_seed(seed, i));
    DatasetRecord rec{asset, *asset.caption, DataSource::Synthesized};
    out << record_to_json(rec).dump() << "\n";
  }
  if (!out) throw AssetIoError("write failed: " + path);
}

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw AssetIoError("cannot open for writing: " + path);
  for (const auto& rec : records) {
    out << record_to_json(rec).dump() << "\n";
  }
  if (!out) throw AssetIoError("write failed: " + path);
}

std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw AssetIoError("cannot open: " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw AssetIoError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    records.push_back(record_from_json(j));
  }
  return records;
}

}  // namespace assetformer
