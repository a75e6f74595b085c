#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "assetformer/asset.hpp"

namespace assetformer {

struct Histograms {
  Eigen::VectorXd cls;       // 25 bins
  Eigen::VectorXd rot;       // 4 bins
  std::array<Eigen::VectorXd, 3> pos;  // 59 / 44 / 81 bins
};

// Normalized frequencies over all primitives of all assets.
Histograms histograms(const std::vector<Asset>& assets);

// Jensen-Shannon divergence with natural log; 0 <= JS <= ln 2.
double js_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

struct TimingStats {
  double tokens_per_second = 0.0;
  double acceptance_rate = -1.0;  // < 0 when not applicable
};

struct EvalReport {
  double class_histogram_js = 0.0;
  double rotation_histogram_js = 0.0;
  std::array<double, 3> position_histogram_js{};
  double validity_rate = 0.0;      // zero-error validation reports
  double connectivity_rate = 0.0;  // single connected component
  double mean_primitives = 0.0;
  double tokens_per_second = 0.0;
  double acceptance_rate = -1.0;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

EvalReport evaluate(const std::vector<Asset>& generated, const std::vector<Asset>& reference,
                    const TimingStats& timing);

}  // namespace assetformer
