#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "assetformer/decoder.hpp"
#include "assetformer/rng.hpp"

using namespace assetformer;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.model_dim = 16;
  cfg.max_seq_len = 256;
  return cfg;
}

const std::array<int, 4> kCond = {0, 8, 12, 15};

Eigen::VectorXd random_logits(std::mt19937_64& rng, int n = vocab::kSize) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

TEST_CASE("type mask keeps exactly the valid set") {
  std::mt19937_64 rng(1);
  for (auto t : {TokenType::Class, TokenType::Rotation, TokenType::X0, TokenType::X1,
                 TokenType::X2}) {
    Eigen::VectorXd logits = random_logits(rng);
    Eigen::VectorXd original = logits;
    type_mask(logits, t);
    const TokenSet set = valid_token_set(t);
    int finite = 0;
    for (int i = 0; i < vocab::kSize; ++i) {
      if (set.contains(i)) {
        CHECK(logits[i] == original[i]);
        ++finite;
      } else {
        CHECK(std::isinf(logits[i]));
        CHECK(logits[i] < 0);
      }
    }
    CHECK(finite == set.count());
  }
}

TEST_CASE("cfg combination arithmetic and bit-exact endpoints") {
  Eigen::VectorXd cond(3), uncond(3);
  cond << 2.0, -1.0, 0.5;
  uncond << 0.0, 1.0, 0.5;
  Eigen::VectorXd out = cfg_combine(cond, uncond, 2.0);
  CHECK(out[0] == doctest::Approx(4.0));   // 0 + 2*(2-0)
  CHECK(out[1] == doctest::Approx(-3.0));  // 1 + 2*(-1-1)
  CHECK(out[2] == doctest::Approx(0.5));

  std::mt19937_64 rng(2);
  Eigen::VectorXd c = random_logits(rng), u = random_logits(rng);
  CHECK(cfg_combine(c, u, 1.0) == c);  // bit-exact passthrough
  CHECK(cfg_combine(c, u, 0.0) == u);
  Eigen::VectorXd half = cfg_combine(c, u, 0.5);
  for (int i = 0; i < vocab::kSize; ++i) {
    CHECK(half[i] == doctest::Approx(0.5 * (c[i] + u[i])).epsilon(1e-12));
  }
  Eigen::VectorXd wrong(3);
  CHECK_THROWS_AS((void)cfg_combine(c, wrong, 2.0), std::invalid_argument);
}

TEST_CASE("pipeline distribution properties") {
  std::mt19937_64 rng(3);
  SamplingParams params;
  params.use_cfg = false;
  for (auto t : {TokenType::Class, TokenType::X2}) {
    Eigen::VectorXd logits = random_logits(rng);
    Eigen::VectorXd probs = next_token_distribution(logits, nullptr, t, params);
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
    const TokenSet set = valid_token_set(t);
    int support = 0;
    for (int i = 0; i < vocab::kSize; ++i) {
      CHECK(probs[i] >= 0);
      if (probs[i] > 0) {
        CHECK(set.contains(i));
        ++support;
      }
    }
    CHECK(support <= params.top_k);
  }

  // Greedy is a one-hot at the masked argmax; TopK(1) matches it.
  Eigen::VectorXd logits = random_logits(rng);
  SamplingParams greedy;
  greedy.strategy = SamplingParams::Strategy::Greedy;
  greedy.use_cfg = false;
  Eigen::VectorXd g = next_token_distribution(logits, nullptr, TokenType::Rotation, greedy);
  SamplingParams top1;
  top1.strategy = SamplingParams::Strategy::TopK;
  top1.top_k = 1;
  top1.use_cfg = false;
  Eigen::VectorXd t1 = next_token_distribution(logits, nullptr, TokenType::Rotation, top1);
  CHECK(g == t1);
  CHECK(g.maxCoeff() == 1.0);

  // Very low temperature concentrates on the argmax.
  SamplingParams cold;
  cold.temperature = 1e-6;
  cold.top_k = 10;
  cold.use_cfg = false;
  Eigen::VectorXd cc = next_token_distribution(logits, nullptr, TokenType::Rotation, cold);
  Eigen::Index am;
  cc.maxCoeff(&am);
  CHECK(cc[am] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(g[am] == 1.0);

  SamplingParams bad;
  bad.temperature = 0;
  bad.use_cfg = false;
  CHECK_THROWS_AS((void)next_token_distribution(logits, nullptr, TokenType::Class, bad),
                  std::invalid_argument);
  bad = SamplingParams{};
  bad.top_k = 0;
  bad.use_cfg = false;
  CHECK_THROWS_AS((void)next_token_distribution(logits, nullptr, TokenType::Class, bad),
                  std::invalid_argument);
}

TEST_CASE("sampling follows the distribution") {
  Eigen::VectorXd probs = Eigen::VectorXd::Zero(6);
  probs << 0.1, 0.0, 0.3, 0.2, 0.0, 0.4;
  std::mt19937_64 rng(4);
  const int n = 200000;
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) counts[sample_from(probs, rng)]++;
  CHECK(counts[1] == 0);
  CHECK(counts[4] == 0);
  // Chi-square over the four live bins; 7.81 is the 0.95 quantile at 3 dof,
  // use a generous 16.27 (0.999) to keep the test stable.
  double chi2 = 0;
  for (int i : {0, 2, 3, 5}) {
    const double expect = probs[i] * n;
    chi2 += (counts[i] - expect) * (counts[i] - expect) / expect;
  }
  CHECK(chi2 < 16.27);

  // Deterministic given the seed.
  std::mt19937_64 r1(9), r2(9);
  for (int i = 0; i < 100; ++i) CHECK(sample_from(probs, r1) == sample_from(probs, r2));

  Eigen::VectorXd zeros = Eigen::VectorXd::Zero(4);
  CHECK_THROWS_AS((void)sample_from(zeros, rng), std::runtime_error);
}

TEST_CASE("speculative kernel reproduces the target distribution exactly") {
  // For one slot: P(emit y) = p(y) min(1, q(y)/p(y))
  //                        + sum_x p(x) (1 - min(1, q(x)/p(x))) r(y)
  // must equal q(y) for every hand-built (p, q) pair.
  auto verify = [](const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
    Eigen::VectorXd r = residual_distribution(p, q);
    double worst = 0;
    for (int y = 0; y < p.size(); ++y) {
      double emit = p[y] * acceptance_probability(p, q, y);
      for (int x = 0; x < p.size(); ++x) {
        emit += p[x] * (1.0 - acceptance_probability(p, q, x)) * r[y];
      }
      worst = std::max(worst, std::abs(emit - q[y]));
    }
    return worst;
  };

  Eigen::VectorXd p(4), q(4);
  p << 0.25, 0.25, 0.25, 0.25;
  q << 0.1, 0.2, 0.3, 0.4;
  CHECK(verify(p, q) < 1e-12);
  p << 0.7, 0.1, 0.1, 0.1;
  q << 0.1, 0.1, 0.1, 0.7;
  CHECK(verify(p, q) < 1e-12);
  p << 0.5, 0.5, 0.0, 0.0;
  q << 0.0, 0.0, 0.5, 0.5;  // disjoint supports: every draft rejected
  CHECK(verify(p, q) < 1e-12);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = uniform_int(rng, 2, 6);
    Eigen::VectorXd pp(n), qq(n);
    for (int i = 0; i < n; ++i) {
      pp[i] = uniform_double(rng);
      qq[i] = uniform_double(rng);
    }
    // Random sparsity patterns, including zero draft mass on target support.
    if (trial % 3 == 0) pp[uniform_int(rng, 0, n - 1)] = 0;
    if (trial % 4 == 0) qq[uniform_int(rng, 0, n - 1)] = 0;
    if (pp.sum() == 0 || qq.sum() == 0) continue;
    pp /= pp.sum();
    qq /= qq.sum();
    CHECK(verify(pp, qq) < 1e-12);
  }
}

TEST_CASE("residual distribution falls back to q when p dominates") {
  Eigen::VectorXd p(3), q(3);
  p << 0.2, 0.3, 0.5;
  q = p;  // residual is identically zero
  CHECK(residual_distribution(p, q) == q);
  q << 0.1, 0.2, 0.7;
  Eigen::VectorXd r = residual_distribution(p, q);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == doctest::Approx(1.0));
}

TEST_CASE("untrained models still emit grammatical sequences") {
  Transformer<float> model(tiny_config());
  model.init_weights(6);
  SamplingParams params;
  params.max_tokens = 60;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    params.seed = seed;
    auto res = generate(model, kCond, params);
    REQUIRE_FALSE(res.tokens.ids.empty());
    CHECK(res.tokens.ids.back() == vocab::kEosId);
    CHECK((res.tokens.ids.size() - 1) % 5 == 0);
    for (size_t i = 0; i + 1 < res.tokens.ids.size(); ++i) {
      CHECK(valid_token_set(token_type_at(i)).contains(res.tokens.ids[i]));
    }
    CHECK_NOTHROW((void)detokenize(res.tokens));
    if (res.tokens.truncated) CHECK(res.tokens.ids.size() <= 61);
  }
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  Transformer<float> model(tiny_config());
  model.init_weights(7);
  SamplingParams params;
  params.max_tokens = 40;
  params.seed = 3;
  auto a = generate(model, kCond, params);
  auto b = generate(model, kCond, params);
  CHECK(a.tokens.ids == b.tokens.ids);
  params.seed = 4;
  auto c = generate(model, kCond, params);
  CHECK(a.tokens.ids != c.tokens.ids);
}

TEST_CASE("cfg scale one matches conditional-only decoding bit-exactly") {
  Transformer<float> model(tiny_config());
  model.init_weights(8);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SamplingParams with_cfg;
    with_cfg.cfg_scale = 1.0;
    with_cfg.max_tokens = 40;
    with_cfg.seed = seed;
    SamplingParams no_cfg = with_cfg;
    no_cfg.use_cfg = false;
    CHECK(generate(model, kCond, with_cfg).tokens.ids ==
          generate(model, kCond, no_cfg).tokens.ids);

    SamplingParams zero = with_cfg;
    zero.cfg_scale = 0.0;
    SamplingParams uncond = no_cfg;
    CHECK(generate(model, kCond, zero).tokens.ids ==
          generate(model, Transformer<float>::null_condition(), uncond).tokens.ids);
  }
}

TEST_CASE("max token cap truncates to whole primitives") {
  Transformer<float> model(tiny_config());
  model.init_weights(9);
  SamplingParams params;
  params.max_tokens = 7;  // forces a cut inside the second tuple
  params.seed = 1;
  auto res = generate(model, kCond, params);
  CHECK(res.tokens.truncated);
  CHECK(res.tokens.ids == std::vector<int>{res.tokens.ids[0], res.tokens.ids[1],
                                           res.tokens.ids[2], res.tokens.ids[3],
                                           res.tokens.ids[4], vocab::kEosId});
  CHECK_NOTHROW((void)detokenize(res.tokens));
}

TEST_CASE("beam width one equals greedy decoding") {
  Transformer<float> model(tiny_config());
  model.init_weights(10);
  SamplingParams greedy;
  greedy.strategy = SamplingParams::Strategy::Greedy;
  greedy.max_tokens = 60;
  auto g = generate(model, kCond, greedy);

  SamplingParams beam = greedy;
  beam.strategy = SamplingParams::Strategy::Beam;
  beam.beam_width = 1;
  auto b = generate(model, kCond, beam);
  CHECK(g.tokens.ids == b.tokens.ids);
}

TEST_CASE("beam score agrees with a recomputed forward pass") {
  Transformer<float> model(tiny_config());
  model.init_weights(11);
  SamplingParams params;
  params.strategy = SamplingParams::Strategy::Beam;
  params.beam_width = 4;
  params.max_tokens = 60;
  auto best = beam_search_best(model, kCond, params);
  REQUIRE(best.finished);
  REQUIRE(best.ids.size() % 5 == 0);

  // Independent rescoring: full forward, mask + CFG per slot, log-softmax.
  auto score = [&](const std::vector<int>& ids) {
    auto cond_state = model.make_state();
    auto uncond_state = model.make_state();
    Eigen::VectorXd cl = MatX<float>(model.prefill(cond_state, kCond))
                             .row(3).transpose().cast<double>();
    Eigen::VectorXd ul =
        MatX<float>(model.prefill(uncond_state, Transformer<float>::null_condition()))
            .row(3).transpose().cast<double>();
    double sum = 0;
    for (size_t t = 0; t <= ids.size(); ++t) {
      Eigen::VectorXd logits = cfg_combine(cl, ul, params.cfg_scale);
      type_mask(logits, token_type_at(t));
      const double mx = logits.maxCoeff();
      double z = 0;
      for (int i = 0; i < vocab::kSize; ++i) {
        if (std::isfinite(logits[i])) z += std::exp(logits[i] - mx);
      }
      const int id = t < ids.size() ? ids[t] : vocab::kEosId;
      sum += logits[id] - mx - std::log(z);
      if (t < ids.size()) {
        cl = RowX<float>(model.forward_step(cond_state, id)).transpose().cast<double>();
        ul = RowX<float>(model.forward_step(uncond_state, id)).transpose().cast<double>();
      }
    }
    return sum / double(ids.size() + 1);
  };
  CHECK(best.mean_logp == doctest::Approx(score(best.ids)).epsilon(1e-6));

  // The width-4 winner never scores worse than the greedy rollout.
  SamplingParams greedy;
  greedy.strategy = SamplingParams::Strategy::Greedy;
  greedy.max_tokens = 60;
  auto g = generate(model, kCond, greedy);
  std::vector<int> gids(g.tokens.ids.begin(), g.tokens.ids.end() - 1);
  CHECK(best.mean_logp >= score(gids) - 1e-6);
}

TEST_CASE("slowfast output is grammatical and tracks acceptance") {
  Transformer<float> draft(tiny_config());
  draft.init_weights(12);
  ModelConfig bigger = tiny_config();
  bigger.n_layers = 3;
  Transformer<float> target(bigger);
  target.init_weights(13);

  SamplingParams params;
  params.max_tokens = 60;
  SlowFastParams sf;
  for (uint64_t seed = 0; seed < 15; ++seed) {
    params.seed = seed;
    auto res = slowfast_generate(draft, target, kCond, params, sf);
    CHECK(res.tokens.ids.back() == vocab::kEosId);
    CHECK((res.tokens.ids.size() - 1) % 5 == 0);
    CHECK_NOTHROW((void)detokenize(res.tokens));
    REQUIRE(res.acceptance.has_value());
    CHECK(res.acceptance->proposed > 0);
    CHECK(res.acceptance->accepted <= res.acceptance->proposed);
    long by_slot_prop = 0, by_slot_acc = 0;
    for (int s = 0; s < 5; ++s) {
      CHECK(res.acceptance->accepted_by_slot[size_t(s)] <=
            res.acceptance->proposed_by_slot[size_t(s)]);
      by_slot_prop += res.acceptance->proposed_by_slot[size_t(s)];
      by_slot_acc += res.acceptance->accepted_by_slot[size_t(s)];
    }
    CHECK(by_slot_prop == res.acceptance->proposed);
    CHECK(by_slot_acc == res.acceptance->accepted);
  }

  // Identical draft and target accept every proposal and reproduce
  // single-model sampling exactly.
  for (uint64_t seed = 0; seed < 10; ++seed) {
    params.seed = seed;
    auto res = slowfast_generate(draft, draft, kCond, params, sf);
    CHECK(res.acceptance->accepted == res.acceptance->proposed);
  }

  SlowFastParams bad;
  bad.lookahead = 0;
  CHECK_THROWS_AS((void)slowfast_generate(draft, target, kCond, params, bad),
                  std::invalid_argument);
}

TEST_CASE("prefix continuation validates and extends the prefix") {
  Transformer<float> model(tiny_config());
  model.init_weights(14);
  SamplingParams params;
  params.max_tokens = 40;
  params.seed = 2;

  // Empty prefix reproduces plain generation bit-for-bit.
  auto plain = generate(model, kCond, params);
  auto empty = continue_from_prefix(model, kCond, {}, params);
  CHECK(plain.tokens.ids == empty.tokens.ids);

  std::vector<int> prefix = {3, 27, 39, 93, 152, 4, 26};
  auto res = continue_from_prefix(model, kCond, prefix, params);
  REQUIRE(res.tokens.ids.size() >= prefix.size());
  for (size_t i = 0; i < prefix.size(); ++i) CHECK(res.tokens.ids[i] == prefix[i]);
  CHECK(res.tokens.ids.back() == vocab::kEosId);
  CHECK_NOTHROW((void)detokenize(res.tokens));

  // A schedule-violating or EOS-bearing prefix is rejected with its position.
  try {
    (void)continue_from_prefix(model, kCond, {3, 3}, params);
    FAIL_CHECK("expected TokenScheduleError");
  } catch (const TokenScheduleError& e) {
    CHECK(e.position == 1);
  }
  CHECK_THROWS_AS((void)continue_from_prefix(model, kCond, {vocab::kEosId}, params),
                  TokenScheduleError);
}
