#include "assetformer/asset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace assetformer {

using ordered_json = nlohmann::ordered_json;

PrimitiveCategory category_of(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw std::out_of_range("class id out of range: " + std::to_string(class_id));
  }
  if (class_id < 8) return PrimitiveCategory::Roof;
  if (class_id < 16) return PrimitiveCategory::Wall;
  return PrimitiveCategory::Component;
}

const char* category_name(PrimitiveCategory c) {
  switch (c) {
    case PrimitiveCategory::Roof: return "Roof";
    case PrimitiveCategory::Wall: return "Wall";
    case PrimitiveCategory::Component: return "Component";
  }
  return "?";
}

bool Primitive::in_range() const {
  if (cls < 0 || cls >= kNumClasses) return false;
  if (rot < 0 || rot >= kNumRotations) return false;
  for (int a = 0; a < 3; ++a) {
    if (pos[a] < 0 || pos[a] >= kGridExtent[a]) return false;
  }
  return true;
}

namespace {

uint64_t cell_key(const std::array<int, 3>& p) {
  return (uint64_t(uint32_t(p[0])) << 42) | (uint64_t(uint32_t(p[1])) << 21) |
         uint64_t(uint32_t(p[2]));
}

}  // namespace

AdjacencyGraph build_adjacency(const Asset& asset) {
  const int n = int(asset.primitives.size());
  AdjacencyGraph g;
  g.num_nodes = n;
  g.neighbors.resize(n);

  // Bucket primitives per cell, then scan the 27-cell neighborhood.
  std::unordered_map<uint64_t, std::vector<int>> cells;
  cells.reserve(size_t(n) * 2);
  for (int i = 0; i < n; ++i) {
    cells[cell_key(asset.primitives[i].pos)].push_back(i);
  }
  for (int i = 0; i < n; ++i) {
    const auto& p = asset.primitives[i].pos;
    for (int d0 = -1; d0 <= 1; ++d0) {
      for (int d1 = -1; d1 <= 1; ++d1) {
        for (int d2 = -1; d2 <= 1; ++d2) {
          auto it = cells.find(cell_key({p[0] + d0, p[1] + d1, p[2] + d2}));
          if (it == cells.end()) continue;
          for (int j : it->second) {
            if (j > i) {
              g.edges.emplace_back(i, j);
              g.neighbors[i].push_back(j);
              g.neighbors[j].push_back(i);
            }
          }
        }
      }
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  return g;
}

std::vector<std::vector<int>> connected_components(const AdjacencyGraph& graph) {
  std::vector<std::vector<int>> comps;
  std::vector<int> label(graph.num_nodes, -1);
  for (int s = 0; s < graph.num_nodes; ++s) {
    if (label[s] >= 0) continue;
    const int id = int(comps.size());
    comps.emplace_back();
    std::vector<int> stack{s};
    label[s] = id;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      comps[id].push_back(u);
      for (int v : graph.neighbors[u]) {
        if (label[v] < 0) {
          label[v] = id;
          stack.push_back(v);
        }
      }
    }
    std::sort(comps[id].begin(), comps[id].end());
  }
  return comps;
}

int ValidationReport::error_count() const {
  return int(std::count_if(findings.begin(), findings.end(),
                           [](const Finding& f) { return f.severity == Severity::Error; }));
}

int ValidationReport::warning_count() const {
  return int(std::count_if(findings.begin(), findings.end(),
                           [](const Finding& f) { return f.severity == Severity::Warning; }));
}

ValidationReport validate_asset(const Asset& asset) {
  ValidationReport report;
  const auto& prims = asset.primitives;
  const int n = int(prims.size());

  if (n < 1 || n > kMaxPrimitives) {
    report.findings.push_back(
        {Severity::Error, "primitive count out of bounds: " + std::to_string(n)});
  }

  bool all_in_range = true;
  for (int i = 0; i < n; ++i) {
    const auto& p = prims[i];
    if (p.cls < 0 || p.cls >= kNumClasses) {
      report.findings.push_back({Severity::Error, "primitive " + std::to_string(i) +
                                                      ": class id out of range"});
      all_in_range = false;
    }
    if (p.rot < 0 || p.rot >= kNumRotations) {
      report.findings.push_back({Severity::Error, "primitive " + std::to_string(i) +
                                                      ": rotation out of range"});
      all_in_range = false;
    }
    for (int a = 0; a < 3; ++a) {
      if (p.pos[a] < 0 || p.pos[a] >= kGridExtent[a]) {
        report.findings.push_back({Severity::Error, "primitive " + std::to_string(i) +
                                                        ": coordinate x" + std::to_string(a) +
                                                        " out of range"});
        all_in_range = false;
      }
    }
  }

  // Duplicates and collisions.
  {
    std::unordered_map<uint64_t, std::vector<int>> by_cell;
    for (int i = 0; i < n; ++i) by_cell[cell_key(prims[i].pos)].push_back(i);
    for (const auto& [key, idxs] : by_cell) {
      (void)key;
      if (idxs.size() < 2) continue;
      for (size_t a = 0; a < idxs.size(); ++a) {
        for (size_t b = a + 1; b < idxs.size(); ++b) {
          const auto& pa = prims[idxs[a]];
          const auto& pb = prims[idxs[b]];
          if (pa == pb) {
            report.findings.push_back(
                {Severity::Error, "exact duplicate primitives at indices " +
                                      std::to_string(idxs[a]) + ", " + std::to_string(idxs[b])});
          }
        }
      }
      report.findings.push_back(
          {Severity::Warning, "position collision: " + std::to_string(idxs.size()) +
                                  " primitives share a cell"});
    }
  }

  if (n >= 1 && all_in_range) {
    auto graph = build_adjacency(asset);
    report.num_components = int(connected_components(graph).size());
    if (report.num_components > 1) {
      report.findings.push_back({Severity::Info, "asset has " +
                                                     std::to_string(report.num_components) +
                                                     " connected components"});
    }

    // Roof-support rule: each Roof primitive needs a Wall or Roof primitive in
    // the 3x3 patch one vertical layer below.
    std::unordered_map<uint64_t, bool> support;  // cell -> has wall/roof
    for (const auto& p : prims) {
      auto cat = category_of(p.cls);
      if (cat == PrimitiveCategory::Wall || cat == PrimitiveCategory::Roof) {
        support[cell_key(p.pos)] = true;
      }
    }
    for (int i = 0; i < n; ++i) {
      if (category_of(prims[i].cls) != PrimitiveCategory::Roof) continue;
      const auto& p = prims[i].pos;
      bool supported = false;
      for (int d0 = -1; d0 <= 1 && !supported; ++d0) {
        for (int d2 = -1; d2 <= 1 && !supported; ++d2) {
          if (support.count(cell_key({p[0] + d0, p[1] - 1, p[2] + d2}))) supported = true;
        }
      }
      if (!supported) {
        ++report.roof_rule_violations;
        report.findings.push_back({Severity::Warning, "roof primitive " + std::to_string(i) +
                                                          " has no wall/roof support below"});
      }
    }
  }
  return report;
}

namespace {

struct MeshShape {
  std::vector<std::array<double, 3>> vertices;  // local, unit cell
  std::vector<std::array<int, 3>> triangles;    // 0-based into vertices
};

const MeshShape& box_shape() {
  static const MeshShape box = [] {
    MeshShape s;
    for (int y = 0; y <= 1; ++y) {
      s.vertices.push_back({0, double(y), 0});
      s.vertices.push_back({1, double(y), 0});
      s.vertices.push_back({1, double(y), 1});
      s.vertices.push_back({0, double(y), 1});
    }
    auto quad = [&s](int a, int b, int c, int d) {
      s.triangles.push_back({a, b, c});
      s.triangles.push_back({a, c, d});
    };
    quad(0, 3, 2, 1);  // bottom
    quad(4, 5, 6, 7);  // top
    quad(0, 1, 5, 4);  // z = 0
    quad(2, 3, 7, 6);  // z = 1
    quad(1, 2, 6, 5);  // x = 1
    quad(3, 0, 4, 7);  // x = 0
    return s;
  }();
  return box;
}

const MeshShape& wedge_shape() {
  // Square base, ridge edge along the z = 0 side, slope facing +z.
  static const MeshShape wedge = [] {
    MeshShape s;
    s.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 0, 1}, {0, 0, 1}, {0, 1, 0}, {1, 1, 0}};
    auto quad = [&s](int a, int b, int c, int d) {
      s.triangles.push_back({a, b, c});
      s.triangles.push_back({a, c, d});
    };
    quad(0, 3, 2, 1);          // bottom
    quad(0, 1, 5, 4);          // back wall
    quad(2, 3, 4, 5);          // slope
    s.triangles.push_back({1, 2, 5});  // side x = 1
    s.triangles.push_back({3, 0, 4});  // side x = 0
    return s;
  }();
  return wedge;
}

std::array<double, 3> rotate_local(const std::array<double, 3>& v, int quarter_turns) {
  // Rotate about the vertical axis around the cell center.
  double x = v[0] - 0.5, z = v[2] - 0.5;
  for (int k = 0; k < quarter_turns; ++k) {
    double nx = -z, nz = x;
    x = nx;
    z = nz;
  }
  return {x + 0.5, v[1], z + 0.5};
}

}  // namespace

void export_mesh(const Asset& asset, std::ostream& out) {
  out << "# assetformer mesh export\n";
  int vertex_base = 1;
  for (size_t i = 0; i < asset.primitives.size(); ++i) {
    const auto& p = asset.primitives[i];
    const MeshShape& shape =
        category_of(p.cls) == PrimitiveCategory::Roof ? wedge_shape() : box_shape();
    out << "g prim_" << i << "\n";
    for (const auto& v : shape.vertices) {
      auto r = rotate_local(v, p.rot);
      out << "v " << r[0] + p.pos[0] << " " << r[1] + p.pos[1] << " " << r[2] + p.pos[2]
          << "\n";
    }
    for (const auto& t : shape.triangles) {
      out << "f " << vertex_base + t[0] << " " << vertex_base + t[1] << " "
          << vertex_base + t[2] << "\n";
    }
    vertex_base += int(shape.vertices.size());
  }
}

void export_mesh(const Asset& asset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw AssetIoError("cannot open for writing: " + path);
  export_mesh(asset, out);
  if (!out) throw AssetIoError("write failed: " + path);
}

ordered_json asset_to_json(const Asset& asset) {
  ordered_json j;
  j["schema_version"] = kAssetSchemaVersion;
  if (asset.caption) {
    j["caption"] = asset.caption->phrases();
  }
  ordered_json prims = ordered_json::array();
  for (const auto& p : asset.primitives) {
    ordered_json jp;
    jp["c"] = p.cls;
    jp["r"] = p.rot;
    jp["x"] = p.pos;
    prims.push_back(std::move(jp));
  }
  j["primitives"] = std::move(prims);
  return j;
}

ReadResult asset_from_json(const nlohmann::json& j) {
  ReadResult result;
  if (!j.is_object()) throw AssetIoError("asset JSON must be an object");
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    throw AssetIoError("missing schema_version");
  }
  if (j["schema_version"].get<int>() != kAssetSchemaVersion) {
    throw AssetIoError("unsupported schema_version " +
                       std::to_string(j["schema_version"].get<int>()));
  }
  static const std::vector<std::string> known = {"schema_version", "caption", "primitives",
                                                 "source"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      result.warnings.push_back("unknown field ignored: " + it.key());
    }
  }
  if (j.contains("caption") && !j["caption"].is_null()) {
    const auto& c = j["caption"];
    if (!c.is_array() || c.size() != 4) throw AssetIoError("caption must be 4 strings");
    PhraseBundle b;
    b.building_type = c[0].get<std::string>();
    b.height_phrase = c[1].get<std::string>();
    b.features[0] = c[2].get<std::string>();
    b.features[1] = c[3].get<std::string>();
    result.asset.caption = std::move(b);
  }
  if (!j.contains("primitives") || !j["primitives"].is_array()) {
    throw AssetIoError("missing primitives array");
  }
  for (const auto& jp : j["primitives"]) {
    Primitive p;
    p.cls = jp.at("c").get<int>();
    p.rot = jp.at("r").get<int>();
    auto x = jp.at("x");
    if (!x.is_array() || x.size() != 3) throw AssetIoError("x must be a 3-array");
    for (int a = 0; a < 3; ++a) p.pos[a] = x[a].get<int>();
    if (!p.in_range()) {
      throw AssetIoError("primitive out of range: c=" + std::to_string(p.cls) +
                         " r=" + std::to_string(p.rot));
    }
    result.asset.primitives.push_back(p);
  }
  return result;
}

ReadResult read_asset(std::istream& in) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw AssetIoError(std::string("malformed JSON: ") + e.what());
  }
  return asset_from_json(j);
}

ReadResult read_asset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw AssetIoError("cannot open: " + path);
  return read_asset(in);
}

void write_asset(const Asset& asset, std::ostream& out) {
  out << asset_to_json(asset).dump() << "\n";
}

void write_asset_file(const Asset& asset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw AssetIoError("cannot open for writing: " + path);
  write_asset(asset, out);
  if (!out) throw AssetIoError("write failed: " + path);
}

}  // namespace assetformer
