#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>

#include "assetformer/model.hpp"
#include "assetformer/train.hpp"

using namespace assetformer;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.model_dim = 16;
  cfg.max_seq_len = 64;
  return cfg;
}

const std::vector<int> kTokens = {3, 27, 39, 93, 152, 4, 26, 30, 88, 133};
const std::array<int, 4> kCond = {0, 8, 12, 15};

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(Transformer<float>{cfg}, std::invalid_argument);
  cfg = tiny_config();
  cfg.n_heads = 16;  // head_dim 1, odd
  CHECK_THROWS_AS(Transformer<float>{cfg}, std::invalid_argument);
  CHECK(ModelConfig::nano().head_dim() == 32);
  CHECK(ModelConfig::mini().head_dim() == 32);
}

TEST_CASE("forward shape and determinism") {
  Transformer<float> model(tiny_config());
  model.init_weights(1);
  auto logits = model.forward(kTokens, kCond);
  CHECK(logits.rows() == 4 + Eigen::Index(kTokens.size()));
  CHECK(logits.cols() == vocab::kSize);
  auto again = model.forward(kTokens, kCond);
  CHECK(logits == again);
}

TEST_CASE("causality: later tokens cannot affect earlier logits") {
  Transformer<float> model(tiny_config());
  model.init_weights(2);
  auto base = model.forward(kTokens, kCond);
  for (size_t t : {size_t(3), size_t(7), kTokens.size() - 1}) {
    std::vector<int> perturbed = kTokens;
    perturbed[t] = (perturbed[t] + 1) % vocab::kSize;
    auto out = model.forward(perturbed, kCond);
    const Eigen::Index row = 4 + Eigen::Index(t);
    CHECK(base.topRows(row) == out.topRows(row));
    CHECK(base.row(row) != out.row(row));
  }
  // Condition slots affect everything.
  std::array<int, 4> cond2 = kCond;
  cond2[0] = phrases::kNullPhraseId;
  auto out = model.forward(kTokens, cond2);
  CHECK(base.row(0) != out.row(0));
}

TEST_CASE("incremental decoding matches the full forward pass") {
  Transformer<float> model(tiny_config());
  model.init_weights(3);
  auto full = model.forward(kTokens, kCond);

  auto state = model.make_state();
  MatX<float> pre = model.prefill(state, kCond);
  REQUIRE(pre.rows() == 4);
  MatX<float> inc(full.rows(), full.cols());
  inc.topRows(4) = pre;
  // Mixed single-step and block appends.
  inc.row(4) = model.forward_step(state, kTokens[0]);
  std::vector<int> block(kTokens.begin() + 1, kTokens.begin() + 6);
  inc.middleRows(5, 5) = model.forward_append(state, block);
  for (size_t t = 6; t < kTokens.size(); ++t) {
    inc.row(4 + Eigen::Index(t)) = model.forward_step(state, kTokens[t]);
  }
  CHECK(state.len == int(full.rows()));

  const float scale = full.array().abs().maxCoeff();
  CHECK((full - inc).array().abs().maxCoeff() <= 1e-5f * scale);
}

TEST_CASE("cache truncation rewinds exactly") {
  Transformer<float> model(tiny_config());
  model.init_weights(4);
  auto state = model.make_state();
  model.prefill(state, kCond);
  RowX<float> after3;
  for (size_t t = 0; t < kTokens.size(); ++t) {
    auto row = model.forward_step(state, kTokens[t]);
    if (t == 3) after3 = row;
  }
  state.truncate(4 + 4);
  // Re-running token 4 onward reproduces the same logits bit-exactly.
  for (size_t t = 4; t < kTokens.size(); ++t) {
    auto row = model.forward_step(state, kTokens[t]);
    if (t == 4) {
      auto fresh = model.make_state();
      model.prefill(fresh, kCond);
      RowX<float> expect;
      for (size_t u = 0; u <= 4; ++u) expect = model.forward_step(fresh, kTokens[u]);
      CHECK(row == expect);
    }
  }
  CHECK_THROWS_AS(state.truncate(1000), std::logic_error);
}

TEST_CASE("state capacity and sequence limits") {
  ModelConfig cfg = tiny_config();
  cfg.max_seq_len = 12;
  Transformer<float> model(cfg);
  model.init_weights(5);
  auto state = model.make_state();
  model.prefill(state, kCond);
  for (int t = 0; t < 8; ++t) model.forward_step(state, kTokens[size_t(t)]);
  CHECK_THROWS_AS(model.forward_step(state, 0), std::length_error);
  CHECK_THROWS_AS(model.forward(kTokens, kCond), std::length_error);

  auto small = model.make_state(6);
  model.prefill(small, kCond);
  model.forward_step(small, 3);
  model.forward_step(small, 27);
  CHECK_THROWS_AS(model.forward_step(small, 39), std::length_error);
}

TEST_CASE("rotary rotation is invertible and relative") {
  std::mt19937_64 rng(6);
  const int n_heads = 2, dim = 16;
  MatX<double> x(3, dim);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < dim; ++c) x(r, c) = normal(rng);
  }
  MatX<double> y = x;
  apply_rotary<double>(y, n_heads, 7);
  apply_rotary<double>(y, n_heads, 7, /*inverse=*/true);
  CHECK((y - x).array().abs().maxCoeff() < 1e-12);

  // q . k after rotation depends only on the relative offset.
  MatX<double> q(1, dim), k(1, dim);
  for (int c = 0; c < dim; ++c) {
    q(0, c) = normal(rng);
    k(0, c) = normal(rng);
  }
  auto rotated_dot = [&](int pq, int pk) {
    MatX<double> qq = q, kk = k;
    apply_rotary<double>(qq, n_heads, pq);
    apply_rotary<double>(kk, n_heads, pk);
    return (qq.row(0).dot(kk.row(0)));
  };
  CHECK(rotated_dot(2, 5) == doctest::Approx(rotated_dot(12, 15)).epsilon(1e-10));
  CHECK(rotated_dot(0, 3) == doctest::Approx(rotated_dot(20, 23)).epsilon(1e-10));
  CHECK(rotated_dot(2, 5) != doctest::Approx(rotated_dot(2, 6)).epsilon(1e-10));
}

TEST_CASE("cross entropy against a scalar oracle") {
  // Uniform logits: loss is ln(vocab) per row.
  MatX<float> zeros = MatX<float>::Zero(3, vocab::kSize);
  std::vector<int> targets = {5, 40, 213};
  auto res = masked_cross_entropy(zeros, targets);
  CHECK(res.count == 3);
  CHECK(res.mean() == doctest::Approx(std::log(214.0)).epsilon(1e-6));

  // Random logits vs a directly computed double-precision reference.
  std::mt19937_64 rng(7);
  MatX<double> logits(4, 6);
  for (Eigen::Index r = 0; r < 4; ++r) {
    for (Eigen::Index c = 0; c < 6; ++c) logits(r, c) = normal(rng);
  }
  std::vector<int> tg = {2, -1, 0, 5};
  MatX<double> dlogits;
  auto got = masked_cross_entropy(logits, tg, &dlogits);
  double expect = 0;
  for (Eigen::Index r : {Eigen::Index(0), Eigen::Index(2), Eigen::Index(3)}) {
    double z = 0;
    for (Eigen::Index c = 0; c < 6; ++c) z += std::exp(logits(r, c));
    expect += std::log(z) - logits(r, tg[size_t(r)]);
  }
  CHECK(got.count == 3);
  CHECK(got.sum == doctest::Approx(expect).epsilon(1e-12));
  // Masked rows get zero gradient; live rows get softmax - onehot.
  CHECK(dlogits.row(1).isZero());
  for (Eigen::Index c = 0; c < 6; ++c) {
    double z = 0;
    for (Eigen::Index c2 = 0; c2 < 6; ++c2) z += std::exp(logits(0, c2));
    double p = std::exp(logits(0, c)) / z;
    CHECK(dlogits(0, c) == doctest::Approx(p - (c == 2 ? 1.0 : 0.0)).epsilon(1e-10));
  }
}

TEST_CASE("cross entropy masks rows after the first EOS") {
  MatX<float> logits = MatX<float>::Random(6, vocab::kSize);
  std::vector<int> with_eos = {3, 27, vocab::kEosId, 4, 26, 30};
  std::vector<int> masked = {3, 27, vocab::kEosId, -1, -1, -1};
  auto a = masked_cross_entropy(logits, with_eos);
  auto b = masked_cross_entropy(logits, masked);
  CHECK(a.count == 3);  // EOS row itself still counts
  CHECK(a.sum == b.sum);
  CHECK_THROWS_AS((void)masked_cross_entropy(logits, std::vector<int>{1, 2}),
                  std::invalid_argument);
}

TEST_CASE("training targets align rows to next tokens") {
  auto t = training_targets(4, {3, 27, 39});
  REQUIRE(t.size() == 7);
  CHECK(t == std::vector<int>{-1, -1, -1, 3, 27, 39, -1});
}

TEST_CASE("finite differences confirm the analytic gradient") {
  ModelConfig cfg = tiny_config();
  Transformer<double> model(cfg);
  model.init_weights(8);

  const std::vector<int> tokens = {3, 27, 39, 93, 152, 213};
  auto targets = training_targets(cfg.n_cond_slots, tokens);

  auto loss_at = [&]() {
    auto logits = model.forward(tokens, kCond);
    return masked_cross_entropy(logits, targets).sum;
  };

  Transformer<double>::ForwardCache cache;
  auto logits = model.forward(tokens, kCond, &cache);
  MatX<double> dlogits;
  masked_cross_entropy(logits, targets, &dlogits);
  VecX<double> grad = VecX<double>::Zero(model.params().size());
  model.backward(cache, dlogits, grad);

  // Richardson-extrapolated central differences cancel the h^2 truncation
  // term, which otherwise dominates at high-curvature parameters.
  auto central = [&](Eigen::Index i, double h) {
    const double saved = model.params().flat[i];
    model.params().flat[i] = saved + h;
    const double up = loss_at();
    model.params().flat[i] = saved - h;
    const double down = loss_at();
    model.params().flat[i] = saved;
    return (up - down) / (2 * h);
  };

  // Probe a deterministic sample of indices from every parameter slice.
  std::mt19937_64 rng(9);
  const double h = 1e-5;
  double worst = 0;
  for (const auto& slice : model.params().slices()) {
    for (int probe = 0; probe < 8; ++probe) {
      const Eigen::Index i =
          slice.offset + uniform_int(rng, 0, int(slice.rows * slice.cols) - 1);
      const double fd = (4 * central(i, h / 2) - central(i, h)) / 3;
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-3});
      worst = std::max(worst, std::abs(fd - grad[i]) / denom);
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  Transformer<float> model(tiny_config());
  model.init_weights(10);
  model.train_step = 77;
  model.rng_state = "1 2 3";
  const std::string path = "ckpt_test.bin";
  model.save(path);
  auto loaded = Transformer<float>::load(path);
  CHECK(loaded.config() == model.config());
  CHECK(loaded.train_step == 77);
  CHECK(loaded.rng_state == "1 2 3");
  CHECK(loaded.params().flat == model.params().flat);

  // Scalar width mismatch.
  CHECK_THROWS_AS((void)Transformer<double>::load(path), CheckpointError);

  // Truncation.
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS((void)Transformer<float>::load(path), CheckpointError);

  // Bad magic.
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE garbage";
  }
  CHECK_THROWS_AS((void)Transformer<float>::load(path), CheckpointError);
  std::remove(path.c_str());
  CHECK_THROWS_AS((void)Transformer<float>::load(path), CheckpointError);
}

TEST_CASE("training is deterministic and reduces the loss") {
  TokenizedDataset data;
  data.max_seq_len = 64;
  data.records.push_back({{0, 8, 12, 15}, {3, 27, 39, 93, 152, 213}});
  data.records.push_back({{1, 9, 11, 13}, {8, 25, 30, 90, 140, 213}});

  TrainConfig cfg;
  cfg.total_steps = 60;
  cfg.warmup_steps = 10;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  cfg.seed = 5;

  Transformer<float> m1(tiny_config());
  m1.init_weights(11);
  auto r1 = train(m1, data, cfg);
  Transformer<float> m2(tiny_config());
  m2.init_weights(11);
  auto r2 = train(m2, data, cfg);
  CHECK(r1.losses == r2.losses);
  CHECK(m1.params().flat == m2.params().flat);
  CHECK(m1.train_step == 60);
  CHECK_FALSE(m1.rng_state.empty());

  CHECK(r1.losses.front() > r1.losses.back());
  CHECK(r1.losses.back() < 1.0);

  // Config errors.
  TrainConfig bad = cfg;
  bad.total_steps = 0;
  CHECK_THROWS_AS((void)train(m1, data, bad), std::invalid_argument);
  TokenizedDataset empty;
  CHECK_THROWS_AS((void)train(m1, empty, cfg), std::invalid_argument);
}

TEST_CASE("loss is invariant to how records are padded into targets") {
  // Appending masked rows after EOS must not change the per-record loss sum.
  Transformer<float> model(tiny_config());
  model.init_weights(12);
  std::vector<int> toks = {3, 27, 39, 93, 152, 213, 0, 25, 29, 88};
  std::vector<int> short_toks(toks.begin(), toks.begin() + 6);
  auto t_long = training_targets(4, toks);
  auto t_short = training_targets(4, short_toks);
  auto l_long = masked_cross_entropy(model.forward(toks, kCond), t_long);
  auto l_short = masked_cross_entropy(model.forward(short_toks, kCond), t_short);
  CHECK(l_long.count == l_short.count);
  CHECK(l_long.sum == doctest::Approx(l_short.sum).epsilon(1e-5));
}
