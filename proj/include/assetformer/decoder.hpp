#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "assetformer/model.hpp"
#include "assetformer/tokenizer.hpp"

namespace assetformer {

using ModelF = Transformer<float>;

struct SamplingParams {
  enum class Strategy { Greedy, Beam, TopK };

  Strategy strategy = Strategy::TopK;
  int beam_width = 4;
  double temperature = 0.7;
  int top_k = 10;
  double cfg_scale = 2.0;
  bool use_cfg = true;  // false: single-model decoding (conditional-only)
  int max_tokens = 5 * kMaxPrimitives + 1;
  uint64_t seed = 0;
};

struct SlowFastParams {
  int lookahead = 5;
};

struct AcceptanceStats {
  long proposed = 0;
  long accepted = 0;
  std::array<long, 5> proposed_by_slot{};  // indexed by position mod 5
  std::array<long, 5> accepted_by_slot{};

  double rate() const { return proposed > 0 ? double(accepted) / double(proposed) : 0.0; }
};

struct GenerationResult {
  TokenSequence tokens;
  double seconds = 0.0;
  double tokens_per_s = 0.0;
  std::optional<AcceptanceStats> acceptance;
};

// --- decoding pipeline pieces ------------------------------------------

// Ids outside valid_token_set(expected) are set to -inf.
void type_mask(Eigen::VectorXd& logits, TokenType expected);

// l_cfg = l_uncond + s * (l_cond - l_uncond); s == 1 and s == 0 return the
// respective input bit-exactly.
Eigen::VectorXd cfg_combine(const Eigen::VectorXd& cond, const Eigen::VectorXd& uncond,
                            double scale);

// Full pipeline to a probability vector over the vocabulary: CFG, type mask,
// temperature, top-k truncation (TopK strategy only), softmax. Entries
// outside the surviving support are exactly zero. Greedy yields a one-hot.
Eigen::VectorXd next_token_distribution(const Eigen::VectorXd& cond_logits,
                                        const Eigen::VectorXd* uncond_logits,
                                        TokenType slot_type, const SamplingParams& params);

int sample_from(const Eigen::VectorXd& probs, std::mt19937_64& rng);

// --- speculative kernel ------------------------------------------------

// Probability of keeping draft token `id` proposed from p when the target
// distribution is q: min(1, q(id)/p(id)).
double acceptance_probability(const Eigen::VectorXd& p, const Eigen::VectorXd& q, int id);

// normalize(max(0, q - p)); falls back to q when the residual is all-zero.
Eigen::VectorXd residual_distribution(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

// --- decoding entry points ---------------------------------------------

GenerationResult generate(const ModelF& model, const std::array<int, 4>& condition,
                          const SamplingParams& params);
GenerationResult generate(const ModelF& model, const PhraseBundle& condition,
                          const SamplingParams& params);

GenerationResult beam_search(const ModelF& model, const std::array<int, 4>& condition,
                             const SamplingParams& params);

// Raw beam output before EOS fix-up, for oracle comparisons: token ids and
// the length-normalized log-probability under mask+CFG scoring.
struct BeamHypothesis {
  std::vector<int> ids;  // without EOS
  bool finished = false;
  double mean_logp = 0.0;
};
BeamHypothesis beam_search_best(const ModelF& model, const std::array<int, 4>& condition,
                                const SamplingParams& params);

GenerationResult slowfast_generate(const ModelF& draft, const ModelF& target,
                                   const std::array<int, 4>& condition,
                                   const SamplingParams& params, const SlowFastParams& sf);
GenerationResult slowfast_generate(const ModelF& draft, const ModelF& target,
                                   const PhraseBundle& condition, const SamplingParams& params,
                                   const SlowFastParams& sf);

// Prefix must be schedule-valid and EOS-free; output repeats it verbatim and
// continues from the next slot.
GenerationResult continue_from_prefix(const ModelF& model, const std::array<int, 4>& condition,
                                      const std::vector<int>& prefix,
                                      const SamplingParams& params);

}  // namespace assetformer
