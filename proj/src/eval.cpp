#include "assetformer/eval.hpp"

#include <cmath>
#include <stdexcept>

namespace assetformer {

Histograms histograms(const std::vector<Asset>& assets) {
  if (assets.empty()) throw std::invalid_argument("histograms: empty asset list");
  Histograms h;
  h.cls = Eigen::VectorXd::Zero(kNumClasses);
  h.rot = Eigen::VectorXd::Zero(kNumRotations);
  for (int a = 0; a < 3; ++a) h.pos[a] = Eigen::VectorXd::Zero(kGridExtent[a]);

  double total = 0;
  for (const auto& asset : assets) {
    for (const auto& p : asset.primitives) {
      h.cls[p.cls] += 1;
      h.rot[p.rot] += 1;
      for (int a = 0; a < 3; ++a) h.pos[a][p.pos[a]] += 1;
      total += 1;
    }
  }
  if (total > 0) {
    h.cls /= total;
    h.rot /= total;
    for (int a = 0; a < 3; ++a) h.pos[a] /= total;
  }
  return h;
}

namespace {

// sum p_i ln(p_i / q_i), with 0 ln 0 = 0.
double kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double s = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

}  // namespace

double js_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: support mismatch");
  Eigen::VectorXd m = 0.5 * (p + q);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

EvalReport evaluate(const std::vector<Asset>& generated, const std::vector<Asset>& reference,
                    const TimingStats& timing) {
  if (generated.empty() || reference.empty()) {
    throw std::invalid_argument("evaluate: empty input");
  }
  EvalReport report;
  const Histograms hg = histograms(generated);
  const Histograms hr = histograms(reference);
  report.class_histogram_js = js_divergence(hg.cls, hr.cls);
  report.rotation_histogram_js = js_divergence(hg.rot, hr.rot);
  for (int a = 0; a < 3; ++a) {
    report.position_histogram_js[a] = js_divergence(hg.pos[a], hr.pos[a]);
  }

  int valid = 0, connected = 0;
  double prims = 0;
  for (const auto& asset : generated) {
    auto rep = validate_asset(asset);
    if (rep.ok()) ++valid;
    if (rep.num_components == 1) ++connected;
    prims += double(asset.primitives.size());
  }
  report.validity_rate = double(valid) / double(generated.size());
  report.connectivity_rate = double(connected) / double(generated.size());
  report.mean_primitives = prims / double(generated.size());
  report.tokens_per_second = timing.tokens_per_second;
  report.acceptance_rate = timing.acceptance_rate;
  return report;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["class_histogram_js"] = class_histogram_js;
  j["rotation_histogram_js"] = rotation_histogram_js;
  j["position_histogram_js"] = position_histogram_js;
  j["validity_rate"] = validity_rate;
  j["connectivity_rate"] = connectivity_rate;
  j["mean_primitives"] = mean_primitives;
  j["tokens_per_second"] = tokens_per_second;
  if (acceptance_rate >= 0) j["acceptance_rate"] = acceptance_rate;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.class_histogram_js = j.at("class_histogram_js").get<double>();
  r.rotation_histogram_js = j.at("rotation_histogram_js").get<double>();
  r.position_histogram_js = j.at("position_histogram_js").get<std::array<double, 3>>();
  r.validity_rate = j.at("validity_rate").get<double>();
  r.connectivity_rate = j.at("connectivity_rate").get<double>();
  r.mean_primitives = j.at("mean_primitives").get<double>();
  r.tokens_per_second = j.at("tokens_per_second").get<double>();
  r.acceptance_rate = j.value("acceptance_rate", -1.0);
  return r;
}

}  // namespace assetformer
