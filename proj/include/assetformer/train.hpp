#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "assetformer/model.hpp"

namespace assetformer {

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 32;
  int total_steps = 1000;
  int warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  std::string metrics_path;  // optional line-delimited JSON {step, loss, lr}

  void validate() const {
    if (learning_rate <= 0 || batch_size < 1 || total_steps < 1 || warmup_steps < 0) {
      throw std::invalid_argument("invalid train config");
    }
  }
};

struct TrainResult {
  std::vector<double> losses;  // one per step
};

// Aligned targets for a record: row p of the logits predicts targets[p].
inline std::vector<int> training_targets(int n_cond_slots, const std::vector<int>& tokens) {
  std::vector<int> targets(size_t(n_cond_slots) + tokens.size(), -1);
  for (size_t i = 0; i < tokens.size(); ++i) {
    targets[size_t(n_cond_slots) - 1 + i] = tokens[i];
  }
  return targets;
}

// Next-token training with per-step uniform batch sampling, joint condition
// dropout, and Adam with linear warmup. Deterministic in cfg.seed.
template <typename Scalar>
TrainResult train(Transformer<Scalar>& model, const TokenizedDataset& data,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("empty training set");
  for (const auto& rec : data.records) {
    if (int(rec.tokens.size()) + model.config().n_cond_slots > model.config().max_seq_len) {
      throw std::length_error("training record exceeds max_seq_len");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  const Eigen::Index n_params = model.params().size();
  VecX<Scalar> grad = VecX<Scalar>::Zero(n_params);
  VecX<double> m = VecX<double>::Zero(n_params);
  VecX<double> v = VecX<double>::Zero(n_params);

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw std::runtime_error("cannot open metrics log: " + cfg.metrics_path);
  }

  TrainResult result;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    std::vector<const TokenizedRecord*> batch;
    std::vector<bool> dropped;
    Eigen::Index total_rows = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& rec =
          data.records[size_t(uniform_int(rng, 0, int(data.records.size()) - 1))];
      batch.push_back(&rec);
      dropped.push_back(bernoulli(rng, double(model.config().cond_dropout)));
      total_rows += Eigen::Index(rec.tokens.size());
    }

    grad.setZero();
    double loss_sum = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& rec = *batch[size_t(b)];
      const std::array<int, 4> cond = dropped[size_t(b)]
                                          ? Transformer<Scalar>::null_condition()
                                          : rec.phrase_ids;
      typename Transformer<Scalar>::ForwardCache cache;
      MatX<Scalar> logits = model.forward(rec.tokens, cond, &cache);
      MatX<Scalar> dlogits;
      auto targets = training_targets(model.config().n_cond_slots, rec.tokens);
      LossResult lr = masked_cross_entropy(logits, targets, &dlogits);
      loss_sum += lr.sum;
      dlogits *= Scalar(1.0 / double(total_rows));
      model.backward(cache, dlogits, grad);
    }
    const double loss = loss_sum / double(total_rows);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    }

    const double warm = cfg.warmup_steps > 0
                            ? std::min(1.0, double(step) / double(cfg.warmup_steps))
                            : 1.0;
    const double lr_t = cfg.learning_rate * warm;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
    for (Eigen::Index i = 0; i < n_params; ++i) {
      const double gi = double(grad[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      model.params().flat[i] -= Scalar(lr_t * update);
    }

    model.train_step += 1;
    result.losses.push_back(loss);
    if (metrics.is_open()) {
      metrics << "{\"step\":" << model.train_step << ",\"loss\":" << loss
              << ",\"lr\":" << lr_t << "}\n";
    }
  }

  std::ostringstream state;
  state << rng;
  model.rng_state = state.str();
  return result;
}

}  // namespace assetformer
