#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "assetformer/rng.hpp"
#include "assetformer/tokenizer.hpp"

namespace assetformer {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VecX = Eigen::Vector<Scalar, Eigen::Dynamic>;
template <typename Scalar>
using RowX = Eigen::RowVector<Scalar, Eigen::Dynamic>;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int model_dim = 128;
  int vocab_size = vocab::kSize;
  int max_seq_len = 2048;
  int n_cond_slots = 4;
  int phrase_vocab_size = phrases::kVocabSize;
  float cond_dropout = 0.1f;

  int head_dim() const { return model_dim / n_heads; }
  int ffn_dim() const { return 4 * model_dim; }

  void validate() const {
    if (model_dim % n_heads != 0) throw std::invalid_argument("model_dim % n_heads != 0");
    if (head_dim() % 2 != 0) throw std::invalid_argument("head_dim must be even for rotary");
    if (max_seq_len < n_cond_slots + 6) throw std::invalid_argument("max_seq_len too small");
  }

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig nano() { return {2, 4, 128, vocab::kSize, 2048}; }
  static ModelConfig mini() { return {4, 8, 256, vocab::kSize, 2048}; }
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// All parameters live in one flat vector; named slices map into it. Keeps
// the optimizer, checkpointing, and finite-difference checks trivial.
template <typename Scalar>
class ParameterStore {
 public:
  struct Slice {
    std::string name;
    Eigen::Index rows = 0, cols = 0, offset = 0;
  };

  int add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    Slice s{std::move(name), rows, cols, total_};
    total_ += rows * cols;
    slices_.push_back(std::move(s));
    return int(slices_.size()) - 1;
  }

  void allocate() { flat = VecX<Scalar>::Zero(total_); }

  Eigen::Map<MatX<Scalar>> mat(int handle) {
    const Slice& s = slices_[size_t(handle)];
    return {flat.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const MatX<Scalar>> mat(int handle) const {
    const Slice& s = slices_[size_t(handle)];
    return {flat.data() + s.offset, s.rows, s.cols};
  }
  // View of an external vector with this store's layout (gradients, Adam
  // moments).
  Eigen::Map<MatX<Scalar>> mat_in(VecX<Scalar>& ext, int handle) const {
    const Slice& s = slices_[size_t(handle)];
    return {ext.data() + s.offset, s.rows, s.cols};
  }

  Eigen::Index size() const { return total_; }
  const std::vector<Slice>& slices() const { return slices_; }

  VecX<Scalar> flat;

 private:
  std::vector<Slice> slices_;
  Eigen::Index total_ = 0;
};

namespace detail {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

// Interleaved cos/sin of pos * 10000^(-2i/hd), cached per head dimension.
// Recomputing the trig per row dominates the incremental-decode profile
// otherwise.
template <typename Scalar>
const Scalar* rotary_row(int hd, int pos) {
  static thread_local std::unordered_map<int, std::vector<Scalar>> cache;
  auto& table = cache[hd];
  const size_t stride = size_t(hd);  // hd/2 pairs of (cos, sin)
  if (table.size() < size_t(pos + 1) * stride) {
    const size_t old_rows = table.size() / stride;
    table.resize(size_t(pos + 1) * stride);
    for (size_t p = old_rows; p <= size_t(pos); ++p) {
      for (int i = 0; i < hd / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * double(i) / double(hd));
        const double angle = double(p) * freq;
        table[p * stride + 2 * size_t(i)] = Scalar(std::cos(angle));
        table[p * stride + 2 * size_t(i) + 1] = Scalar(std::sin(angle));
      }
    }
  }
  return table.data() + size_t(pos) * stride;
}

// Product of a few fresh rows with a big weight matrix. Eigen's general GEMM
// is tuned for large blocks and its GEMV for single rows; for the 2-16-row
// blocks of prefill and speculative verification, rank-1 accumulation streams
// the weights exactly once while the output rows stay cached.
template <typename Scalar, typename X, typename W>
MatX<Scalar> skinny_product(const X& x, const W& w) {
  const Eigen::Index rows = x.rows();
  if (rows == 1 || rows > 16) {
    MatX<Scalar> y(rows, w.cols());
    y.noalias() = x * w;
    return y;
  }
  MatX<Scalar> y = MatX<Scalar>::Zero(rows, w.cols());
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    const auto wk = w.row(k);
    for (Eigen::Index i = 0; i < rows; ++i) y.row(i) += x(i, k) * wk;
  }
  return y;
}

}  // namespace detail

// In-place rotary embedding over per-head (even, odd) pairs; row t of x is
// at absolute position start_pos + t.
template <typename Scalar>
void apply_rotary(Eigen::Ref<MatX<Scalar>> x, int n_heads, int start_pos, bool inverse = false) {
  const int dim = int(x.cols());
  const int hd = dim / n_heads;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const Scalar* cs = detail::rotary_row<Scalar>(hd, start_pos + int(t));
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < hd / 2; ++i) {
        const Scalar c = cs[2 * i];
        const Scalar s = inverse ? -cs[2 * i + 1] : cs[2 * i + 1];
        const int a = h * hd + 2 * i;
        const Scalar xa = x(t, a), xb = x(t, a + 1);
        x(t, a) = xa * c - xb * s;
        x(t, a + 1) = xa * s + xb * c;
      }
    }
  }
}

template <typename Scalar>
struct IncrementalState {
  std::vector<MatX<Scalar>> k_cache, v_cache;  // per layer, rows [0, len) valid
  int len = 0;

  void truncate(int n) {
    if (n > len) throw std::logic_error("truncate beyond cache length");
    len = n;
  }
};

template <typename Scalar>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& config) : cfg_(config) {
    cfg_.validate();
    const int d = cfg_.model_dim;
    tok_embed_ = params_.add("tok_embed", cfg_.vocab_size, d);
    phrase_embed_ = params_.add("phrase_embed", cfg_.phrase_vocab_size + 1, d);
    cond_w1_ = params_.add("cond.w1", d, d);
    cond_b1_ = params_.add("cond.b1", 1, d);
    cond_w2_ = params_.add("cond.w2", d, d);
    cond_b2_ = params_.add("cond.b2", 1, d);
    layers_.resize(size_t(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& h = layers_[size_t(l)];
      h.att_norm = params_.add(p + "att_norm", 1, d);
      h.wq = params_.add(p + "wq", d, d);
      h.wk = params_.add(p + "wk", d, d);
      h.wv = params_.add(p + "wv", d, d);
      h.wo = params_.add(p + "wo", d, d);
      h.ffn_norm = params_.add(p + "ffn_norm", 1, d);
      h.w_in = params_.add(p + "w_in", d, cfg_.ffn_dim());
      h.w_out = params_.add(p + "w_out", cfg_.ffn_dim(), d);
    }
    final_norm_ = params_.add("final_norm", 1, d);
    lm_head_ = params_.add("lm_head", d, cfg_.vocab_size);
    params_.allocate();
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }

  uint64_t train_step = 0;
  std::string rng_state;

  void init_weights(uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Eigen::Index i = 0; i < params_.flat.size(); ++i) {
      params_.flat[i] = Scalar(0.02 * normal(rng));
    }
    params_.mat(cond_b1_).setZero();
    params_.mat(cond_b2_).setZero();
    params_.mat(final_norm_).setOnes();
    for (auto& h : layers_) {
      params_.mat(h.att_norm).setOnes();
      params_.mat(h.ffn_norm).setOnes();
    }
  }

  // --- embeddings -----------------------------------------------------

  struct CondCache {
    MatX<Scalar> e, pre, act;  // n_cond x d
  };

  // Null condition = every slot on the learned null row.
  static std::array<int, 4> null_condition() {
    return {phrases::kNullPhraseId, phrases::kNullPhraseId, phrases::kNullPhraseId,
            phrases::kNullPhraseId};
  }

  MatX<Scalar> embed_condition(const std::array<int, 4>& phrase_ids,
                               CondCache* cache = nullptr) const {
    const int d = cfg_.model_dim;
    MatX<Scalar> e(cfg_.n_cond_slots, d);
    for (int s = 0; s < cfg_.n_cond_slots; ++s) {
      const int id = phrase_ids[size_t(s)];
      if (id < 0 || id > cfg_.phrase_vocab_size) {
        throw std::out_of_range("phrase id out of range: " + std::to_string(id));
      }
      e.row(s) = params_.mat(phrase_embed_).row(id);
    }
    MatX<Scalar> pre = e * params_.mat(cond_w1_);
    pre.rowwise() += params_.mat(cond_b1_).row(0);
    MatX<Scalar> act = pre.unaryExpr([](Scalar x) { return x * detail::sigmoid(x); });
    MatX<Scalar> out = act * params_.mat(cond_w2_);
    out.rowwise() += params_.mat(cond_b2_).row(0);
    if (cache) {
      cache->e = std::move(e);
      cache->pre = std::move(pre);
      cache->act = std::move(act);
    }
    return out;
  }

  MatX<Scalar> embed_tokens(std::span<const int> tokens) const {
    MatX<Scalar> x(Eigen::Index(tokens.size()), cfg_.model_dim);
    for (size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || tokens[t] >= cfg_.vocab_size) {
        throw std::out_of_range("token id out of range: " + std::to_string(tokens[t]));
      }
      x.row(Eigen::Index(t)) = params_.mat(tok_embed_).row(tokens[t]);
    }
    return x;
  }

  // --- full forward ---------------------------------------------------

  struct LayerCache {
    MatX<Scalar> x_in, normed, q, k, v;
    std::vector<MatX<Scalar>> probs;  // per head, T x T
    MatX<Scalar> att_concat, h_mid, ffn_normed, ffn_pre, ffn_act;
  };

  struct ForwardCache {
    CondCache cond;
    std::array<int, 4> phrase_ids;
    std::vector<int> tokens;
    MatX<Scalar> embedded;
    std::vector<LayerCache> layers;
    MatX<Scalar> final_in, final_normed;
  };

  // Returns logits for every row: n_cond_slots condition rows followed by
  // the token rows. Row p depends only on rows <= p.
  MatX<Scalar> forward(std::span<const int> tokens, const std::array<int, 4>& phrase_ids,
                       ForwardCache* cache = nullptr) const {
    const Eigen::Index total = cfg_.n_cond_slots + Eigen::Index(tokens.size());
    if (total > cfg_.max_seq_len) throw std::length_error("sequence exceeds max_seq_len");
    MatX<Scalar> x(total, cfg_.model_dim);
    CondCache cond_cache;
    x.topRows(cfg_.n_cond_slots) =
        embed_condition(phrase_ids, cache ? &cond_cache : nullptr);
    x.bottomRows(Eigen::Index(tokens.size())) = embed_tokens(tokens);
    if (cache) {
      cache->cond = std::move(cond_cache);
      cache->phrase_ids = phrase_ids;
      cache->tokens.assign(tokens.begin(), tokens.end());
      cache->embedded = x;
      cache->layers.resize(size_t(cfg_.n_layers));
    }

    for (int l = 0; l < cfg_.n_layers; ++l) {
      x = layer_forward(l, std::move(x), cache ? &cache->layers[size_t(l)] : nullptr);
    }

    if (cache) cache->final_in = x;
    MatX<Scalar> normed = rmsnorm(x, params_.mat(final_norm_));
    if (cache) cache->final_normed = normed;
    return normed * params_.mat(lm_head_);
  }

  // --- backward -------------------------------------------------------

  // Propagates d(logits) through the whole network, accumulating into
  // grad (same layout as params().flat).
  void backward(const ForwardCache& cache, const MatX<Scalar>& dlogits,
                VecX<Scalar>& grad) const {
    auto g = [&](int handle) { return params_.mat_in(grad, handle); };

    g(lm_head_) += cache.final_normed.transpose() * dlogits;
    MatX<Scalar> dnormed = dlogits * params_.mat(lm_head_).transpose();
    MatX<Scalar> dx = rmsnorm_backward(cache.final_in, params_.mat(final_norm_), dnormed,
                                       g(final_norm_));

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      dx = layer_backward(l, cache.layers[size_t(l)], std::move(dx), grad);
    }

    // Split embedding gradient between token rows and the condition path.
    for (size_t t = 0; t < cache.tokens.size(); ++t) {
      g(tok_embed_).row(cache.tokens[t]) += dx.row(cfg_.n_cond_slots + Eigen::Index(t));
    }
    MatX<Scalar> dcond = dx.topRows(cfg_.n_cond_slots);
    g(cond_b2_).row(0) += dcond.colwise().sum();
    g(cond_w2_) += cache.cond.act.transpose() * dcond;
    MatX<Scalar> dact = dcond * params_.mat(cond_w2_).transpose();
    MatX<Scalar> dpre = dact.cwiseProduct(cache.cond.pre.unaryExpr([](Scalar v) {
      const Scalar s = detail::sigmoid(v);
      return s * (Scalar(1) + v * (Scalar(1) - s));
    }));
    g(cond_b1_).row(0) += dpre.colwise().sum();
    g(cond_w1_) += cache.cond.e.transpose() * dpre;
    MatX<Scalar> de = dpre * params_.mat(cond_w1_).transpose();
    for (int s = 0; s < cfg_.n_cond_slots; ++s) {
      g(phrase_embed_).row(cache.phrase_ids[size_t(s)]) += de.row(s);
    }
  }

  // --- incremental decoding -------------------------------------------

  IncrementalState<Scalar> make_state(int capacity = -1) const {
    if (capacity < 0 || capacity > cfg_.max_seq_len) capacity = cfg_.max_seq_len;
    IncrementalState<Scalar> st;
    st.k_cache.assign(size_t(cfg_.n_layers), MatX<Scalar>(capacity, cfg_.model_dim));
    st.v_cache.assign(size_t(cfg_.n_layers), MatX<Scalar>(capacity, cfg_.model_dim));
    return st;
  }

  // Appends the given embedded rows at positions [state.len, state.len + B)
  // and returns their logits. Causal within the block and over the cache.
  MatX<Scalar> forward_append_rows(IncrementalState<Scalar>& state, MatX<Scalar> x) const {
    const int base = state.len;
    const Eigen::Index nb = x.rows();
    const Eigen::Index cap =
        state.k_cache.empty() ? Eigen::Index(cfg_.max_seq_len) : state.k_cache[0].rows();
    if (base + nb > cap || base + nb > cfg_.max_seq_len) {
      throw std::length_error("sequence exceeds max_seq_len");
    }
    const int nh = cfg_.n_heads, hd = cfg_.head_dim();
    const Scalar inv_sqrt = Scalar(1) / Scalar(std::sqrt(double(hd)));

    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& h = layers_[size_t(l)];
      MatX<Scalar> normed = rmsnorm(x, params_.mat(h.att_norm));
      MatX<Scalar> q = detail::skinny_product<Scalar>(normed, params_.mat(h.wq));
      MatX<Scalar> k = detail::skinny_product<Scalar>(normed, params_.mat(h.wk));
      MatX<Scalar> v = detail::skinny_product<Scalar>(normed, params_.mat(h.wv));
      apply_rotary<Scalar>(q, nh, base);
      apply_rotary<Scalar>(k, nh, base);
      state.k_cache[size_t(l)].middleRows(base, nb) = k;
      state.v_cache[size_t(l)].middleRows(base, nb) = v;

      MatX<Scalar> att(nb, cfg_.model_dim);
      for (int head = 0; head < nh; ++head) {
        auto qh = q.middleCols(head * hd, hd);
        auto kh = state.k_cache[size_t(l)].topRows(base + nb).middleCols(head * hd, hd);
        auto vh = state.v_cache[size_t(l)].topRows(base + nb).middleCols(head * hd, hd);
        MatX<Scalar> scores = (qh * kh.transpose()) * inv_sqrt;
        for (Eigen::Index r = 0; r < nb; ++r) {
          const Eigen::Index limit = base + r;  // attend to columns <= limit
          for (Eigen::Index c = limit + 1; c < scores.cols(); ++c) {
            scores(r, c) = -std::numeric_limits<Scalar>::infinity();
          }
        }
        softmax_rows(scores);
        att.middleCols(head * hd, hd) = scores * vh;
      }
      x += detail::skinny_product<Scalar>(att, params_.mat(h.wo));

      MatX<Scalar> fn = rmsnorm(x, params_.mat(h.ffn_norm));
      MatX<Scalar> pre = detail::skinny_product<Scalar>(fn, params_.mat(h.w_in));
      pre = pre.unaryExpr([](Scalar u) { return u * detail::sigmoid(u); });
      x += detail::skinny_product<Scalar>(pre, params_.mat(h.w_out));
    }
    state.len = base + int(nb);
    MatX<Scalar> normed = rmsnorm(x, params_.mat(final_norm_));
    return detail::skinny_product<Scalar>(normed, params_.mat(lm_head_));
  }

  MatX<Scalar> prefill(IncrementalState<Scalar>& state,
                       const std::array<int, 4>& phrase_ids) const {
    return forward_append_rows(state, embed_condition(phrase_ids));
  }

  RowX<Scalar> forward_step(IncrementalState<Scalar>& state, int token) const {
    const int ids[1] = {token};
    return forward_append_rows(state, embed_tokens(ids)).row(0);
  }

  MatX<Scalar> forward_append(IncrementalState<Scalar>& state, std::span<const int> tokens) const {
    return forward_append_rows(state, embed_tokens(tokens));
  }

  // --- checkpoint -----------------------------------------------------

  void save(const std::string& path) const;
  static Transformer load(const std::string& path);

 private:
  struct LayerHandles {
    int att_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out;
  };

  static MatX<Scalar> rmsnorm(const MatX<Scalar>& x, Eigen::Map<const MatX<Scalar>> gain) {
    MatX<Scalar> out(x.rows(), x.cols());
    const Scalar eps = Scalar(1e-6);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar rms = std::sqrt(x.row(r).squaredNorm() / Scalar(x.cols()) + eps);
      out.row(r) = x.row(r).cwiseProduct(gain.row(0)) / rms;
    }
    return out;
  }

  static MatX<Scalar> rmsnorm_backward(const MatX<Scalar>& x,
                                       Eigen::Map<const MatX<Scalar>> gain,
                                       const MatX<Scalar>& dout,
                                       Eigen::Map<MatX<Scalar>> dgain) {
    MatX<Scalar> dx(x.rows(), x.cols());
    const Scalar eps = Scalar(1e-6);
    const Scalar d = Scalar(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar ms = x.row(r).squaredNorm() / d + eps;
      const Scalar rms = std::sqrt(ms);
      dgain.row(0) += dout.row(r).cwiseProduct(x.row(r)) / rms;
      const RowX<Scalar> gdy = dout.row(r).cwiseProduct(gain.row(0));
      const Scalar dot = gdy.dot(x.row(r));
      dx.row(r) = gdy / rms - x.row(r) * (dot / (d * rms * ms));
    }
    return dx;
  }

  static void softmax_rows(MatX<Scalar>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const Scalar mx = m.row(r).maxCoeff();
      m.row(r) = (m.row(r).array() - mx).exp();
      m.row(r) /= m.row(r).sum();
    }
  }

  MatX<Scalar> layer_forward(int l, MatX<Scalar> x, LayerCache* cache) const {
    const auto& h = layers_[size_t(l)];
    const Eigen::Index T = x.rows();
    const int nh = cfg_.n_heads, hd = cfg_.head_dim();
    const Scalar inv_sqrt = Scalar(1) / Scalar(std::sqrt(double(hd)));

    if (cache) cache->x_in = x;
    MatX<Scalar> normed = rmsnorm(x, params_.mat(h.att_norm));
    MatX<Scalar> q = normed * params_.mat(h.wq);
    MatX<Scalar> k = normed * params_.mat(h.wk);
    MatX<Scalar> v = normed * params_.mat(h.wv);
    apply_rotary<Scalar>(q, nh, 0);
    apply_rotary<Scalar>(k, nh, 0);

    MatX<Scalar> att(T, cfg_.model_dim);
    std::vector<MatX<Scalar>> probs;
    if (cache) probs.reserve(size_t(nh));
    for (int head = 0; head < nh; ++head) {
      auto qh = q.middleCols(head * hd, hd);
      auto kh = k.middleCols(head * hd, hd);
      auto vh = v.middleCols(head * hd, hd);
      MatX<Scalar> scores = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < T; ++r) {
        for (Eigen::Index c = r + 1; c < T; ++c) {
          scores(r, c) = -std::numeric_limits<Scalar>::infinity();
        }
      }
      softmax_rows(scores);
      att.middleCols(head * hd, hd) = scores * vh;
      if (cache) probs.push_back(std::move(scores));
    }
    MatX<Scalar> h_mid = x + att * params_.mat(h.wo);

    MatX<Scalar> fn = rmsnorm(h_mid, params_.mat(h.ffn_norm));
    MatX<Scalar> pre = fn * params_.mat(h.w_in);
    MatX<Scalar> act = pre.unaryExpr([](Scalar u) { return u * detail::sigmoid(u); });
    MatX<Scalar> out = h_mid + act * params_.mat(h.w_out);

    if (cache) {
      cache->normed = std::move(normed);
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->probs = std::move(probs);
      cache->att_concat = std::move(att);
      cache->h_mid = std::move(h_mid);
      cache->ffn_normed = std::move(fn);
      cache->ffn_pre = std::move(pre);
      cache->ffn_act = std::move(act);
    }
    return out;
  }

  MatX<Scalar> layer_backward(int l, const LayerCache& cache, MatX<Scalar> dout,
                              VecX<Scalar>& grad) const {
    const auto& h = layers_[size_t(l)];
    auto g = [&](int handle) { return params_.mat_in(grad, handle); };
    const int nh = cfg_.n_heads, hd = cfg_.head_dim();
    const Scalar inv_sqrt = Scalar(1) / Scalar(std::sqrt(double(hd)));

    // FFN branch.
    g(h.w_out) += cache.ffn_act.transpose() * dout;
    MatX<Scalar> dact = dout * params_.mat(h.w_out).transpose();
    MatX<Scalar> dpre = dact.cwiseProduct(cache.ffn_pre.unaryExpr([](Scalar v) {
      const Scalar s = detail::sigmoid(v);
      return s * (Scalar(1) + v * (Scalar(1) - s));
    }));
    g(h.w_in) += cache.ffn_normed.transpose() * dpre;
    MatX<Scalar> dfn = dpre * params_.mat(h.w_in).transpose();
    MatX<Scalar> dh_mid =
        dout + rmsnorm_backward(cache.h_mid, params_.mat(h.ffn_norm), dfn, g(h.ffn_norm));

    // Attention branch.
    g(h.wo) += cache.att_concat.transpose() * dh_mid;
    MatX<Scalar> datt = dh_mid * params_.mat(h.wo).transpose();
    MatX<Scalar> dq(cache.q.rows(), cache.q.cols());
    MatX<Scalar> dk(cache.k.rows(), cache.k.cols());
    MatX<Scalar> dv(cache.v.rows(), cache.v.cols());
    for (int head = 0; head < nh; ++head) {
      const auto& P = cache.probs[size_t(head)];
      auto qh = cache.q.middleCols(head * hd, hd);
      auto kh = cache.k.middleCols(head * hd, hd);
      auto vh = cache.v.middleCols(head * hd, hd);
      auto dah = datt.middleCols(head * hd, hd);
      MatX<Scalar> dP = dah * vh.transpose();
      dv.middleCols(head * hd, hd) = P.transpose() * dah;
      // softmax backward, rowwise
      MatX<Scalar> dS(P.rows(), P.cols());
      for (Eigen::Index r = 0; r < P.rows(); ++r) {
        const Scalar dot = dP.row(r).cwiseProduct(P.row(r)).sum();
        dS.row(r) = P.row(r).cwiseProduct((dP.row(r).array() - dot).matrix());
      }
      dq.middleCols(head * hd, hd) = (dS * kh) * inv_sqrt;
      dk.middleCols(head * hd, hd) = (dS.transpose() * qh) * inv_sqrt;
    }
    apply_rotary<Scalar>(dq, nh, 0, /*inverse=*/true);
    apply_rotary<Scalar>(dk, nh, 0, /*inverse=*/true);

    MatX<Scalar> dnormed = dq * params_.mat(h.wq).transpose() +
                           dk * params_.mat(h.wk).transpose() +
                           dv * params_.mat(h.wv).transpose();
    g(h.wq) += cache.normed.transpose() * dq;
    g(h.wk) += cache.normed.transpose() * dk;
    g(h.wv) += cache.normed.transpose() * dv;
    return dh_mid +
           rmsnorm_backward(cache.x_in, params_.mat(h.att_norm), dnormed, g(h.att_norm));
  }

  ModelConfig cfg_;
  ParameterStore<Scalar> params_;
  int tok_embed_ = -1, phrase_embed_ = -1;
  int cond_w1_ = -1, cond_b1_ = -1, cond_w2_ = -1, cond_b2_ = -1;
  std::vector<LayerHandles> layers_;
  int final_norm_ = -1, lm_head_ = -1;
};

// --- loss --------------------------------------------------------------

struct LossResult {
  double sum = 0.0;          // summed cross-entropy over unmasked rows
  Eigen::Index count = 0;    // unmasked rows
  double mean() const { return count > 0 ? sum / double(count) : 0.0; }
};

// Row i of logits predicts targets[i]. Rows after the first EOS target are
// masked out; the EOS row itself counts. A target < 0 masks its row.
// If dlogits is given it receives d(sum)/d(logits) (unscaled).
template <typename Scalar>
LossResult masked_cross_entropy(const MatX<Scalar>& logits, const std::vector<int>& targets,
                                MatX<Scalar>* dlogits = nullptr) {
  if (Eigen::Index(targets.size()) != logits.rows()) {
    throw std::invalid_argument("targets length must match logits rows");
  }
  if (dlogits) *dlogits = MatX<Scalar>::Zero(logits.rows(), logits.cols());
  LossResult res;
  bool seen_eos = false;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int target = targets[size_t(r)];
    if (seen_eos || target < 0) continue;
    const Scalar mx = logits.row(r).maxCoeff();
    VecX<Scalar> shifted = (logits.row(r).array() - mx).transpose();
    const Scalar lse = std::log(shifted.array().exp().sum());
    res.sum += double(lse - shifted[target]);
    res.count += 1;
    if (dlogits) {
      dlogits->row(r) = (shifted.array() - lse).exp().transpose();
      (*dlogits)(r, target) -= Scalar(1);
    }
    if (target == vocab::kEosId) seen_eos = true;
  }
  if (!std::isfinite(res.sum)) throw std::runtime_error("non-finite loss");
  return res;
}

// --- checkpoint io -----------------------------------------------------

namespace detail {

template <typename T>
void ck_write(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ck_read(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint");
  return v;
}

inline void ck_write_string(std::ostream& out, const std::string& s) {
  ck_write<uint32_t>(out, uint32_t(s.size()));
  out.write(s.data(), std::streamsize(s.size()));
}

inline std::string ck_read_string(std::istream& in) {
  const auto len = ck_read<uint32_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), std::streamsize(len));
  if (!in) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace detail

template <typename Scalar>
void Transformer<Scalar>::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open for writing: " + path);
  out.write("AFCK", 4);
  detail::ck_write<uint32_t>(out, kCheckpointVersion);
  detail::ck_write<uint32_t>(out, uint32_t(sizeof(Scalar)));
  detail::ck_write<int32_t>(out, cfg_.n_layers);
  detail::ck_write<int32_t>(out, cfg_.n_heads);
  detail::ck_write<int32_t>(out, cfg_.model_dim);
  detail::ck_write<int32_t>(out, cfg_.vocab_size);
  detail::ck_write<int32_t>(out, cfg_.max_seq_len);
  detail::ck_write<int32_t>(out, cfg_.n_cond_slots);
  detail::ck_write<int32_t>(out, cfg_.phrase_vocab_size);
  detail::ck_write<float>(out, cfg_.cond_dropout);
  detail::ck_write<uint64_t>(out, vocab::layout_hash());
  detail::ck_write<uint64_t>(out, train_step);
  detail::ck_write_string(out, rng_state);
  detail::ck_write<uint32_t>(out, uint32_t(params_.slices().size()));
  for (const auto& s : params_.slices()) {
    detail::ck_write_string(out, s.name);
    detail::ck_write<uint64_t>(out, uint64_t(s.rows));
    detail::ck_write<uint64_t>(out, uint64_t(s.cols));
  }
  out.write(reinterpret_cast<const char*>(params_.flat.data()),
            std::streamsize(size_t(params_.flat.size()) * sizeof(Scalar)));
  if (!out) throw CheckpointError("write failed: " + path);
}

template <typename Scalar>
Transformer<Scalar> Transformer<Scalar>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "AFCK") throw CheckpointError("bad checkpoint magic");
  const auto version = detail::ck_read<uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto scalar_bytes = detail::ck_read<uint32_t>(in);
  if (scalar_bytes != sizeof(Scalar)) {
    throw CheckpointError("checkpoint scalar width mismatch");
  }
  ModelConfig cfg;
  cfg.n_layers = detail::ck_read<int32_t>(in);
  cfg.n_heads = detail::ck_read<int32_t>(in);
  cfg.model_dim = detail::ck_read<int32_t>(in);
  cfg.vocab_size = detail::ck_read<int32_t>(in);
  cfg.max_seq_len = detail::ck_read<int32_t>(in);
  cfg.n_cond_slots = detail::ck_read<int32_t>(in);
  cfg.phrase_vocab_size = detail::ck_read<int32_t>(in);
  cfg.cond_dropout = detail::ck_read<float>(in);
  const auto hash = detail::ck_read<uint64_t>(in);
  if (hash != vocab::layout_hash()) throw CheckpointError("vocabulary hash mismatch");

  Transformer model(cfg);
  model.train_step = detail::ck_read<uint64_t>(in);
  model.rng_state = detail::ck_read_string(in);
  const auto n_slices = detail::ck_read<uint32_t>(in);
  if (n_slices != model.params_.slices().size()) {
    throw CheckpointError("tensor table does not match config");
  }
  for (const auto& expected : model.params_.slices()) {
    const std::string name = detail::ck_read_string(in);
    const auto rows = detail::ck_read<uint64_t>(in);
    const auto cols = detail::ck_read<uint64_t>(in);
    if (name != expected.name || rows != uint64_t(expected.rows) ||
        cols != uint64_t(expected.cols)) {
      throw CheckpointError("tensor " + name + " does not match config shapes");
    }
  }
  in.read(reinterpret_cast<char*>(model.params_.flat.data()),
          std::streamsize(size_t(model.params_.flat.size()) * sizeof(Scalar)));
  if (!in || in.gcount() !=
                 std::streamsize(size_t(model.params_.flat.size()) * sizeof(Scalar))) {
    throw CheckpointError("truncated checkpoint tensors");
  }
  return model;
}

}  // namespace assetformer
