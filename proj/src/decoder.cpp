#include "assetformer/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "assetformer/rng.hpp"

namespace assetformer {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::VectorXd to_double(const RowX<float>& row) {
  return row.transpose().cast<double>();
}

}  // namespace

void type_mask(Eigen::VectorXd& logits, TokenType expected) {
  const TokenSet set = valid_token_set(expected);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (!set.contains(int(i))) logits[i] = kNegInf;
  }
}

Eigen::VectorXd cfg_combine(const Eigen::VectorXd& cond, const Eigen::VectorXd& uncond,
                            double scale) {
  if (cond.size() != uncond.size()) throw std::invalid_argument("cfg_combine: shape mismatch");
  if (scale == 1.0) return cond;
  if (scale == 0.0) return uncond;
  return uncond + scale * (cond - uncond);
}

namespace {

Eigen::VectorXd softmax_masked(const Eigen::VectorXd& logits) {
  double mx = kNegInf;
  for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
  Eigen::VectorXd probs = Eigen::VectorXd::Zero(logits.size());
  double sum = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (std::isfinite(logits[i])) {
      probs[i] = std::exp(logits[i] - mx);
      sum += probs[i];
    }
  }
  probs /= sum;
  return probs;
}

}  // namespace

Eigen::VectorXd next_token_distribution(const Eigen::VectorXd& cond_logits,
                                        const Eigen::VectorXd* uncond_logits,
                                        TokenType slot_type, const SamplingParams& params) {
  Eigen::VectorXd logits = (params.use_cfg && uncond_logits)
                               ? cfg_combine(cond_logits, *uncond_logits, params.cfg_scale)
                               : cond_logits;
  type_mask(logits, slot_type);

  if (params.strategy == SamplingParams::Strategy::Greedy) {
    Eigen::Index best;
    logits.maxCoeff(&best);
    Eigen::VectorXd probs = Eigen::VectorXd::Zero(logits.size());
    probs[best] = 1.0;
    return probs;
  }

  if (params.temperature <= 0) throw std::invalid_argument("temperature must be positive");
  logits /= params.temperature;

  if (params.strategy == SamplingParams::Strategy::TopK) {
    if (params.top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      if (std::isfinite(logits[i])) idx.push_back(i);
    }
    if (int(idx.size()) > params.top_k) {
      std::nth_element(idx.begin(), idx.begin() + params.top_k, idx.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return logits[a] > logits[b]; });
      for (size_t k = size_t(params.top_k); k < idx.size(); ++k) {
        logits[idx[k]] = kNegInf;
      }
    }
  }
  return softmax_masked(logits);
}

int sample_from(const Eigen::VectorXd& probs, std::mt19937_64& rng) {
  const double u = uniform_double(rng);
  double acc = 0;
  Eigen::Index last_positive = -1;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    last_positive = i;
    acc += probs[i];
    if (u < acc) return int(i);
  }
  if (last_positive < 0) throw std::runtime_error("sample_from: empty distribution");
  return int(last_positive);
}

double acceptance_probability(const Eigen::VectorXd& p, const Eigen::VectorXd& q, int id) {
  if (p[id] <= 0) return 1.0;  // never drafted in practice; accept vacuously
  return std::min(1.0, q[id] / p[id]);
}

Eigen::VectorXd residual_distribution(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  Eigen::VectorXd r = (q - p).cwiseMax(0.0);
  const double sum = r.sum();
  if (sum <= 0) return q;
  return r / sum;
}

namespace {

// Conditional + optional unconditional decoding streams over one model.
struct Session {
  const ModelF* model = nullptr;
  IncrementalState<float> cond_state, uncond_state;
  bool with_uncond = false;
  Eigen::VectorXd cond_logits, uncond_logits;  // for the next slot

  Session() = default;

  Session(const ModelF& m, const std::array<int, 4>& condition, bool uncond, int capacity)
      : model(&m), with_uncond(uncond) {
    cond_state = m.make_state(capacity);
    cond_logits = to_double(MatX<float>(m.prefill(cond_state, condition))
                                .row(m.config().n_cond_slots - 1));
    if (with_uncond) {
      uncond_state = m.make_state(capacity);
      uncond_logits = to_double(MatX<float>(m.prefill(uncond_state, ModelF::null_condition()))
                                    .row(m.config().n_cond_slots - 1));
    }
  }

  int committed() const { return cond_state.len - model->config().n_cond_slots; }

  void step(int token) {
    cond_logits = to_double(model->forward_step(cond_state, token));
    if (with_uncond) uncond_logits = to_double(model->forward_step(uncond_state, token));
  }

  void append(const std::vector<int>& tokens) {
    MatX<float> c = model->forward_append(cond_state, tokens);
    if (c.rows() > 0) cond_logits = to_double(RowX<float>(c.row(c.rows() - 1)));
    if (with_uncond) {
      MatX<float> u = model->forward_append(uncond_state, tokens);
      if (u.rows() > 0) uncond_logits = to_double(RowX<float>(u.row(u.rows() - 1)));
    }
  }

  void truncate_to(int n_tokens) {
    const int rows = model->config().n_cond_slots + n_tokens;
    cond_state.truncate(rows);
    if (with_uncond) uncond_state.truncate(rows);
  }

  Eigen::VectorXd distribution(TokenType slot, const SamplingParams& params) const {
    return next_token_distribution(cond_logits, with_uncond ? &uncond_logits : nullptr, slot,
                                   params);
  }
};

TokenSequence finish_sequence(std::vector<int> ids, bool hit_cap) {
  TokenSequence seq;
  if (hit_cap) {
    // Drop a partial tuple so the result still parses, then terminate.
    ids.resize(ids.size() - ids.size() % 5);
    seq.truncated = true;
  }
  seq.ids = std::move(ids);
  seq.ids.push_back(vocab::kEosId);
  return seq;
}

int state_capacity(const ModelF& model, const SamplingParams& params) {
  return std::min(model.config().max_seq_len,
                  model.config().n_cond_slots + params.max_tokens + 2);
}

}  // namespace

GenerationResult generate(const ModelF& model, const std::array<int, 4>& condition,
                          const SamplingParams& params) {
  if (params.strategy == SamplingParams::Strategy::Beam) {
    return beam_search(model, condition, params);
  }
  std::mt19937_64 rng(params.seed);
  const auto start = std::chrono::steady_clock::now();

  Session session(model, condition, params.use_cfg, state_capacity(model, params));
  std::vector<int> ids;
  bool hit_cap = true;
  int sampled = 0;
  while (int(ids.size()) < params.max_tokens) {
    const TokenType slot = token_type_at(ids.size());
    const Eigen::VectorXd probs = session.distribution(slot, params);
    const int id = sample_from(probs, rng);
    ++sampled;
    if (id == vocab::kEosId) {
      hit_cap = false;
      break;
    }
    ids.push_back(id);
    session.step(id);
  }

  GenerationResult result;
  result.tokens = finish_sequence(std::move(ids), hit_cap);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_s = result.seconds > 0 ? double(sampled) / result.seconds : 0.0;
  return result;
}

GenerationResult generate(const ModelF& model, const PhraseBundle& condition,
                          const SamplingParams& params) {
  return generate(model, phrases::bundle_ids(condition), params);
}

namespace {

struct Beam {
  std::vector<int> ids;
  double sum_logp = 0;
  Session session;

  double mean_logp() const {
    const size_t n = ids.size() + 1;  // EOS or current length counts once
    return sum_logp / double(n);
  }
};

Eigen::VectorXd log_softmax_masked(const Eigen::VectorXd& logits) {
  double mx = kNegInf;
  for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
  double sum = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (std::isfinite(logits[i])) sum += std::exp(logits[i] - mx);
  }
  const double lse = mx + std::log(sum);
  Eigen::VectorXd out(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    out[i] = std::isfinite(logits[i]) ? logits[i] - lse : kNegInf;
  }
  return out;
}

}  // namespace

BeamHypothesis beam_search_best(const ModelF& model, const std::array<int, 4>& condition,
                                const SamplingParams& params) {
  if (params.beam_width < 1) throw std::invalid_argument("beam width must be >= 1");
  const int capacity = state_capacity(model, params);

  std::vector<Beam> live;
  live.push_back({{}, 0.0, Session(model, condition, params.use_cfg, capacity)});
  std::optional<BeamHypothesis> best_finished;

  while (!live.empty()) {
    struct Candidate {
      size_t parent;
      int id;
      double sum_logp;
    };
    std::vector<Candidate> candidates;
    for (size_t b = 0; b < live.size(); ++b) {
      const TokenType slot = token_type_at(live[b].ids.size());
      Eigen::VectorXd logits =
          params.use_cfg
              ? cfg_combine(live[b].session.cond_logits, live[b].session.uncond_logits,
                            params.cfg_scale)
              : live[b].session.cond_logits;
      type_mask(logits, slot);
      const Eigen::VectorXd logp = log_softmax_masked(logits);
      for (Eigen::Index i = 0; i < logp.size(); ++i) {
        if (std::isfinite(logp[i])) {
          candidates.push_back({b, int(i), live[b].sum_logp + logp[i]});
        }
      }
    }
    const size_t keep = std::min(size_t(params.beam_width), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + long(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.sum_logp != b.sum_logp) return a.sum_logp > b.sum_logp;
                        return a.id < b.id;  // deterministic tie-break
                      });
    candidates.resize(keep);

    std::vector<Beam> next;
    for (const auto& c : candidates) {
      if (c.id == vocab::kEosId) {
        BeamHypothesis hyp;
        hyp.ids = live[c.parent].ids;
        hyp.finished = true;
        hyp.mean_logp = c.sum_logp / double(live[c.parent].ids.size() + 1);
        if (!best_finished || hyp.mean_logp > best_finished->mean_logp) {
          best_finished = hyp;
        }
        continue;
      }
      Beam nb;
      nb.ids = live[c.parent].ids;
      nb.ids.push_back(c.id);
      nb.sum_logp = c.sum_logp;
      nb.session = live[c.parent].session;  // copy of the KV state
      nb.session.step(c.id);
      if (int(nb.ids.size()) < params.max_tokens) {
        next.push_back(std::move(nb));
      } else if (!best_finished) {
        BeamHypothesis hyp;
        hyp.ids = nb.ids;
        hyp.finished = false;
        hyp.mean_logp = nb.sum_logp / double(nb.ids.size() + 1);
        best_finished = hyp;  // truncated fallback
      }
    }
    live = std::move(next);
    if (best_finished && live.empty()) break;
  }

  if (!best_finished) throw std::runtime_error("beam search produced no hypothesis");
  return *best_finished;
}

GenerationResult beam_search(const ModelF& model, const std::array<int, 4>& condition,
                             const SamplingParams& params) {
  const auto start = std::chrono::steady_clock::now();
  BeamHypothesis best = beam_search_best(model, condition, params);
  GenerationResult result;
  result.tokens = finish_sequence(std::move(best.ids), !best.finished);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double produced = double(result.tokens.ids.size());
  result.tokens_per_s = result.seconds > 0 ? produced / result.seconds : 0.0;
  return result;
}

GenerationResult slowfast_generate(const ModelF& draft, const ModelF& target,
                                   const std::array<int, 4>& condition,
                                   const SamplingParams& params, const SlowFastParams& sf) {
  if (sf.lookahead < 1) throw std::invalid_argument("lookahead must be >= 1");
  if (draft.config().vocab_size != target.config().vocab_size ||
      draft.config().phrase_vocab_size != target.config().phrase_vocab_size) {
    throw std::invalid_argument("draft and target vocabularies do not match");
  }
  std::mt19937_64 rng(params.seed);
  const auto start = std::chrono::steady_clock::now();

  Session draft_session(draft, condition, params.use_cfg, state_capacity(draft, params));
  Session target_session(target, condition, params.use_cfg, state_capacity(target, params));

  std::vector<int> ids;
  AcceptanceStats stats;
  bool done = false, hit_cap = false;
  int emitted = 0;

  // Target distribution for the next slot, refreshed after every commit.
  Eigen::VectorXd q_next =
      target_session.distribution(token_type_at(0), params);

  while (!done) {
    const int base = int(ids.size());
    if (base >= params.max_tokens) {
      hit_cap = true;
      break;
    }
    const int k_max = std::min(sf.lookahead, params.max_tokens - base);

    // Draft proposes up to k_max tokens from p.
    std::vector<int> proposals;
    std::vector<Eigen::VectorXd> p_dists;
    bool draft_eos = false;
    for (int t = 0; t < k_max; ++t) {
      const TokenType slot = token_type_at(size_t(base + t));
      Eigen::VectorXd p = draft_session.distribution(slot, params);
      const int id = sample_from(p, rng);
      proposals.push_back(id);
      p_dists.push_back(std::move(p));
      if (id == vocab::kEosId) {
        draft_eos = true;
        break;
      }
      draft_session.step(id);
    }
    const int k = int(proposals.size());

    // One target pass over the drafted block yields q for slots base+1..;
    // q for slot base carries over from the previous round.
    std::vector<int> fed(proposals.begin(), proposals.end() - (draft_eos ? 1 : 0));
    std::vector<Eigen::VectorXd> q_dists;  // q for proposals 1..fed
    if (!fed.empty()) {
      MatX<float> qc = target_session.model->forward_append(target_session.cond_state, fed);
      MatX<float> qu;
      if (params.use_cfg) {
        qu = target_session.model->forward_append(target_session.uncond_state, fed);
      }
      for (Eigen::Index r = 0; r < qc.rows(); ++r) {
        const TokenType slot = token_type_at(size_t(base + int(r) + 1));
        Eigen::VectorXd c = to_double(RowX<float>(qc.row(r)));
        if (params.use_cfg) {
          Eigen::VectorXd u = to_double(RowX<float>(qu.row(r)));
          q_dists.push_back(next_token_distribution(c, &u, slot, params));
        } else {
          q_dists.push_back(next_token_distribution(c, nullptr, slot, params));
        }
      }
    }

    // Left-to-right acceptance scan.
    stats.proposed += k;
    for (int t = 0; t < k; ++t) stats.proposed_by_slot[size_t((base + t) % 5)] += 1;

    bool rejected = false;
    for (int t = 0; t < k; ++t) {
      const Eigen::VectorXd& q = t == 0 ? q_next : q_dists[size_t(t - 1)];
      const Eigen::VectorXd& p = p_dists[size_t(t)];
      const int id = proposals[size_t(t)];
      const double u = uniform_double(rng);
      if (u < acceptance_probability(p, q, id)) {
        stats.accepted += 1;
        stats.accepted_by_slot[size_t((base + t) % 5)] += 1;
        ++emitted;
        if (id == vocab::kEosId) {
          done = true;
        } else {
          ids.push_back(id);
        }
        if (done) break;
      } else {
        // Corrective resample restricted to the slot's valid token set
        // (q and p are already masked to it).
        const int y = sample_from(residual_distribution(p, q), rng);
        ++emitted;
        target_session.truncate_to(base + t);
        draft_session.truncate_to(base + t);
        if (y == vocab::kEosId) {
          done = true;
        } else {
          ids.push_back(y);
          target_session.step(y);
          q_next = target_session.distribution(token_type_at(ids.size()), params);
          draft_session.step(y);
        }
        rejected = true;
        break;
      }
    }

    if (done) break;
    if (!rejected) {
      // Every proposal was accepted, so the target cache holds exactly the
      // committed tokens and q_dists.back() is the target distribution for
      // the next slot. Sample the bonus token from it when under the cap.
      q_next = q_dists.back();
      if (int(ids.size()) < params.max_tokens) {
        const int x = sample_from(q_next, rng);
        ++emitted;
        if (x == vocab::kEosId) {
          done = true;
        } else {
          ids.push_back(x);
          target_session.step(x);
          q_next = target_session.distribution(token_type_at(ids.size()), params);
          draft_session.step(x);
        }
      }
    }
  }

  GenerationResult result;
  result.tokens = finish_sequence(std::move(ids), hit_cap);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_s = result.seconds > 0 ? double(emitted) / result.seconds : 0.0;
  result.acceptance = stats;
  return result;
}

GenerationResult slowfast_generate(const ModelF& draft, const ModelF& target,
                                   const PhraseBundle& condition, const SamplingParams& params,
                                   const SlowFastParams& sf) {
  return slowfast_generate(draft, target, phrases::bundle_ids(condition), params, sf);
}

GenerationResult continue_from_prefix(const ModelF& model, const std::array<int, 4>& condition,
                                      const std::vector<int>& prefix,
                                      const SamplingParams& params) {
  for (size_t i = 0; i < prefix.size(); ++i) {
    const TokenSet set = valid_token_set(token_type_at(i));
    const int id = prefix[i];
    if (id == vocab::kEosId || id < set.lo || id >= set.hi) {
      throw TokenScheduleError(i, "prefix token outside its slot segment");
    }
  }
  std::mt19937_64 rng(params.seed);
  const auto start = std::chrono::steady_clock::now();

  Session session(model, condition, params.use_cfg, model.config().max_seq_len);
  if (!prefix.empty()) session.append(prefix);

  std::vector<int> ids = prefix;
  bool hit_cap = true;
  int sampled = 0;
  while (int(ids.size()) < params.max_tokens + int(prefix.size())) {
    const TokenType slot = token_type_at(ids.size());
    const Eigen::VectorXd probs = session.distribution(slot, params);
    const int id = sample_from(probs, rng);
    ++sampled;
    if (id == vocab::kEosId) {
      hit_cap = false;
      break;
    }
    ids.push_back(id);
    session.step(id);
  }

  GenerationResult result;
  result.tokens = finish_sequence(std::move(ids), hit_cap);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_s = result.seconds > 0 ? double(sampled) / result.seconds : 0.0;
  return result;
}

}  // namespace assetformer
