#include <doctest.h>

#include <cmath>

#include "assetformer/eval.hpp"
#include "assetformer/pcg.hpp"

using namespace assetformer;

TEST_CASE("histograms normalize over all primitives") {
  Asset a;
  a.primitives.push_back({3, 1, {10, 5, 20}});
  Asset b;
  b.primitives.push_back({3, 2, {10, 6, 20}});
  b.primitives.push_back({8, 1, {11, 5, 21}});

  auto h = histograms({a, b});
  CHECK(h.cls.size() == 25);
  CHECK(h.rot.size() == 4);
  CHECK(h.pos[0].size() == 59);
  CHECK(h.pos[1].size() == 44);
  CHECK(h.pos[2].size() == 81);
  CHECK(h.cls.sum() == doctest::Approx(1.0));
  CHECK(h.cls[3] == doctest::Approx(2.0 / 3.0));
  CHECK(h.cls[8] == doctest::Approx(1.0 / 3.0));
  CHECK(h.rot[1] == doctest::Approx(2.0 / 3.0));
  CHECK(h.pos[0][10] == doctest::Approx(2.0 / 3.0));
  CHECK(h.pos[1][5] == doctest::Approx(2.0 / 3.0));

  CHECK_THROWS_AS((void)histograms({}), std::invalid_argument);
}

TEST_CASE("jensen-shannon divergence endpoints and oracle") {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(4), q = Eigen::VectorXd::Zero(4);
  p << 0.25, 0.25, 0.25, 0.25;
  q = p;
  CHECK(js_divergence(p, q) == doctest::Approx(0.0));

  p << 1, 0, 0, 0;
  q << 0, 1, 0, 0;
  CHECK(js_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Direct scalar computation as the reference.
  p << 0.5, 0.3, 0.2, 0.0;
  q << 0.1, 0.1, 0.4, 0.4;
  double expect = 0;
  for (int i = 0; i < 4; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) expect += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) expect += 0.5 * q[i] * std::log(q[i] / m);
  }
  CHECK(js_divergence(p, q) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(js_divergence(p, q) == doctest::Approx(js_divergence(q, p)).epsilon(1e-12));

  Eigen::VectorXd wrong(3);
  CHECK_THROWS_AS((void)js_divergence(p, wrong), std::invalid_argument);
}

TEST_CASE("evaluation aggregates validity and divergences") {
  PcgParams params;
  std::vector<Asset> gen, ref;
  for (uint64_t s = 0; s < 30; ++s) gen.push_back(generate_pcg(params, s));
  for (uint64_t s = 100; s < 130; ++s) ref.push_back(generate_pcg(params, s));
  // Make one generated asset disconnected and one invalid.
  gen[0].primitives.push_back({8, 0, {50, 40, 70}});
  gen[1].primitives.push_back(gen[1].primitives[0]);  // exact duplicate

  TimingStats timing{123.0, 0.8};
  auto report = evaluate(gen, ref, timing);
  CHECK(report.validity_rate == doctest::Approx(29.0 / 30.0));
  CHECK(report.connectivity_rate == doctest::Approx(29.0 / 30.0));
  CHECK(report.mean_primitives > 0);
  CHECK(report.class_histogram_js >= 0);
  CHECK(report.class_histogram_js < 0.2);  // same distribution family
  CHECK(report.tokens_per_second == 123.0);
  CHECK(report.acceptance_rate == 0.8);

  CHECK_THROWS_AS((void)evaluate({}, ref, timing), std::invalid_argument);
}

TEST_CASE("report json round trip") {
  EvalReport r;
  r.class_histogram_js = 0.01;
  r.rotation_histogram_js = 0.02;
  r.position_histogram_js = {0.03, 0.04, 0.05};
  r.validity_rate = 0.99;
  r.connectivity_rate = 0.98;
  r.mean_primitives = 123.5;
  r.tokens_per_second = 80.5;
  r.acceptance_rate = 0.75;
  auto j = r.to_json();
  auto back = EvalReport::from_json(j);
  CHECK(back.class_histogram_js == r.class_histogram_js);
  CHECK(back.rotation_histogram_js == r.rotation_histogram_js);
  CHECK(back.position_histogram_js == r.position_histogram_js);
  CHECK(back.validity_rate == r.validity_rate);
  CHECK(back.connectivity_rate == r.connectivity_rate);
  CHECK(back.mean_primitives == r.mean_primitives);
  CHECK(back.tokens_per_second == r.tokens_per_second);
  CHECK(back.acceptance_rate == r.acceptance_rate);

  // Acceptance rate is optional in serialized form.
  r.acceptance_rate = -1.0;
  auto j2 = r.to_json();
  CHECK_FALSE(j2.contains("acceptance_rate"));
  CHECK(EvalReport::from_json(j2).acceptance_rate == -1.0);
}
