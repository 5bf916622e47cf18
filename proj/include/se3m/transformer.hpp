#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "se3m/checkpoint.hpp"
#include "se3m/error.hpp"
#include "se3m/layers.hpp"
#include "se3m/pretraining_data.hpp"
#include "se3m/rng.hpp"
#include "se3m/tensor.hpp"
#include "se3m/wordpiece.hpp"

namespace se3m {

/// Encoder hyper-parameters. JSON keys follow the usual bert_config.json
/// names.
struct TransformerConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ff = 512;
  std::size_t max_seq_len = 100;
  std::size_t vocab_size = 0;
  double dropout = 0.1;
  double init_range = 0.02;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    require_config(layers >= 1, "transformer: layers must be at least 1");
    require_config(hidden >= 1 && heads >= 1 && ff >= 1, "transformer: sizes must be positive");
    require_config(hidden % heads == 0, "transformer: hidden size " + std::to_string(hidden) +
                                            " is not divisible by " + std::to_string(heads) + " heads");
    require_config(max_seq_len >= 2, "transformer: max_seq_len must be at least 2");
    require_config(vocab_size > WordPieceVocab::kSpecials, "transformer: vocab_size must exceed the special pieces");
    require_config(dropout >= 0.0 && dropout < 1.0, "transformer: dropout must lie in [0, 1)");
    require_config(init_range > 0.0, "transformer: init_range must be positive");
  }

  nlohmann::json to_json() const {
    return {{"num_hidden_layers", layers},      {"hidden_size", hidden},
            {"num_attention_heads", heads},     {"intermediate_size", ff},
            {"max_position_embeddings", max_seq_len}, {"vocab_size", vocab_size},
            {"hidden_dropout_prob", dropout},   {"initializer_range", init_range},
            {"hidden_act", "gelu"},             {"type_vocab_size", 2},
            {"seed", seed}};
  }

  static TransformerConfig from_json(const nlohmann::json& j) {
    TransformerConfig c;
    try {
      c.layers = j.value("num_hidden_layers", c.layers);
      c.hidden = j.value("hidden_size", c.hidden);
      c.heads = j.value("num_attention_heads", c.heads);
      c.ff = j.value("intermediate_size", c.ff);
      c.max_seq_len = j.value("max_position_embeddings", c.max_seq_len);
      c.vocab_size = j.value("vocab_size", c.vocab_size);
      c.dropout = j.value("hidden_dropout_prob", c.dropout);
      c.init_range = j.value("initializer_range", c.init_range);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("transformer config: ") + e.what());
    }
    if (j.contains("hidden_act") && j["hidden_act"] != "gelu") throw ConfigError("transformer config: only gelu is supported");
    return c;
  }

  void save(const std::filesystem::path& path) const { write_file(path, to_json().dump(2) + "\n"); }
  static TransformerConfig load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("transformer config " + path.string() + ": " + e.what());
    }
  }

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-12;

/// tanh approximation of GELU.
template <typename T>
T gelu(T x) {
  constexpr double c = 0.7978845608028654;
  const double xd = static_cast<double>(x);
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
T gelu_grad(T x) {
  constexpr double c = 0.7978845608028654;
  const double xd = static_cast<double>(x);
  const double t = std::tanh(c * (xd + 0.044715 * xd * xd * xd));
  return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * xd * xd));
}

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

/// Row-wise layer normalization of x [rows x h] into out.
template <typename T>
void layer_norm(const Tensor<T>& x, const Parameter<T>& gamma, const Parameter<T>& beta, Tensor<T>& out,
                LayerNormCache<T>* cache) {
  const std::size_t rows = x.rows(), h = x.cols();
  out = Tensor<T>(x.shape());
  if (cache) {
    cache->xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(rows, T(0));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x(r, 0);
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(h);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
    for (std::size_t j = 0; j < h; ++j) {
      const T xh = static_cast<T>(xr[j] - mean) * inv;
      if (cache) cache->xhat(r, j) = xh;
      out(r, j) = xh * gamma.value[j] + beta.value[j];
    }
    if (cache) cache->inv_std[r] = inv;
  }
}

/// Accumulates gamma/beta gradients and returns the input gradient.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const LayerNormCache<T>& cache, Parameter<T>& gamma,
                              Parameter<T>& beta) {
  const std::size_t rows = dy.rows(), h = dy.cols();
  Tensor<T> dx(dy.shape());
  std::vector<T> dxhat(h);
  for (std::size_t r = 0; r < rows; ++r) {
    T sum = T(0), dot = T(0);
    for (std::size_t j = 0; j < h; ++j) {
      gamma.grad[j] += dy(r, j) * cache.xhat(r, j);
      beta.grad[j] += dy(r, j);
      dxhat[j] = dy(r, j) * gamma.value[j];
      sum += dxhat[j];
      dot += dxhat[j] * cache.xhat(r, j);
    }
    const T scale = cache.inv_std[r] / static_cast<T>(h);
    for (std::size_t j = 0; j < h; ++j)
      dx(r, j) = scale * (static_cast<T>(h) * dxhat[j] - sum - cache.xhat(r, j) * dot);
  }
  return dx;
}

template <typename T>
struct EncoderLayer {
  Parameter<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, o_weight, o_bias;
  Parameter<T> attn_ln_gamma, attn_ln_beta;
  Parameter<T> ff_in_weight, ff_in_bias, ff_out_weight, ff_out_bias;
  Parameter<T> ff_ln_gamma, ff_ln_beta;

  EncoderLayer() = default;
  EncoderLayer(const std::string& p, std::size_t h, std::size_t ff)
      : q_weight(p + ".attn.query.weight", {h, h}), q_bias(p + ".attn.query.bias", {h}),
        k_weight(p + ".attn.key.weight", {h, h}), k_bias(p + ".attn.key.bias", {h}),
        v_weight(p + ".attn.value.weight", {h, h}), v_bias(p + ".attn.value.bias", {h}),
        o_weight(p + ".attn.output.weight", {h, h}), o_bias(p + ".attn.output.bias", {h}),
        attn_ln_gamma(p + ".attn.ln.gamma", {h}), attn_ln_beta(p + ".attn.ln.beta", {h}),
        ff_in_weight(p + ".ffn.in.weight", {h, ff}), ff_in_bias(p + ".ffn.in.bias", {ff}),
        ff_out_weight(p + ".ffn.out.weight", {ff, h}), ff_out_bias(p + ".ffn.out.bias", {h}),
        ff_ln_gamma(p + ".ffn.ln.gamma", {h}), ff_ln_beta(p + ".ffn.ln.beta", {h}) {}

  ParameterRefs<T> parameters() {
    return {&q_weight,      &q_bias,       &k_weight,     &k_bias,      &v_weight,      &v_bias,
            &o_weight,      &o_bias,       &attn_ln_gamma, &attn_ln_beta, &ff_in_weight,  &ff_in_bias,
            &ff_out_weight, &ff_out_bias,  &ff_ln_gamma,  &ff_ln_beta};
  }
};

/// Loss statistics for one example. The MLM part is a sum over masked
/// positions; divide by mlm_count for the mean.
struct ExampleLoss {
  double mlm_sum = 0.0;
  std::size_t mlm_count = 0;
  std::size_t mlm_correct = 0;
  double nsp = 0.0;
  bool nsp_correct = false;

  double mlm_mean() const { return mlm_count ? mlm_sum / static_cast<double>(mlm_count) : 0.0; }
  double total() const { return mlm_mean() + nsp; }
};

/// NSP class 0 means "is next", class 1 "not next".
inline std::size_t nsp_class(bool is_next) { return is_next ? 0 : 1; }

/// Post-LN bidirectional encoder with MLM (decoder tied to the token
/// embedding) and NSP (tanh pooler over [CLS]) heads.
template <typename T>
class TransformerModel {
 public:
  TransformerModel() = default;

  explicit TransformerModel(TransformerConfig config) : config_(config) {
    config_.validate();
    const std::size_t h = config_.hidden, v = config_.vocab_size;
    token_ = Parameter<T>("embeddings.token", {v, h});
    position_ = Parameter<T>("embeddings.position", {config_.max_seq_len, h});
    segment_ = Parameter<T>("embeddings.segment", {2, h});
    emb_ln_gamma_ = Parameter<T>("embeddings.ln.gamma", {h});
    emb_ln_beta_ = Parameter<T>("embeddings.ln.beta", {h});
    for (std::size_t l = 0; l < config_.layers; ++l)
      layers_.emplace_back("encoder.layer" + std::to_string(l), h, config_.ff);
    pool_weight_ = Parameter<T>("pooler.weight", {h, h});
    pool_bias_ = Parameter<T>("pooler.bias", {h});
    nsp_weight_ = Parameter<T>("nsp.weight", {h, 2});
    nsp_bias_ = Parameter<T>("nsp.bias", {2});
    mlm_weight_ = Parameter<T>("mlm.transform.weight", {h, h});
    mlm_bias_ = Parameter<T>("mlm.transform.bias", {h});
    mlm_ln_gamma_ = Parameter<T>("mlm.ln.gamma", {h});
    mlm_ln_beta_ = Parameter<T>("mlm.ln.beta", {h});
    mlm_out_bias_ = Parameter<T>("mlm.output.bias", {v});
    initialize();
  }

  const TransformerConfig& config() const { return config_; }
  std::size_t num_layers() const { return config_.layers; }
  std::size_t hidden() const { return config_.hidden; }

  /// Normal(0, init_range) weights and embeddings, zero biases, unit gammas.
  void initialize() {
    RngStream rng = RngStream(config_.seed).derive("transformer.init");
    for (auto* p : parameters()) {
      const std::string& n = p->name;
      if (n.ends_with(".gamma")) {
        p->value.fill(T(1));
      } else if (n.ends_with(".bias") || n.ends_with(".beta")) {
        p->value.fill(T(0));
      } else {
        for (auto& x : p->value.values()) x = static_cast<T>(rng.normal() * config_.init_range);
      }
    }
  }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> out = {&token_, &position_, &segment_, &emb_ln_gamma_, &emb_ln_beta_};
    for (auto& layer : layers_)
      for (auto* p : layer.parameters()) out.push_back(p);
    for (auto* p : {&pool_weight_, &pool_bias_, &nsp_weight_, &nsp_bias_, &mlm_weight_, &mlm_bias_, &mlm_ln_gamma_,
                    &mlm_ln_beta_, &mlm_out_bias_})
      out.push_back(p);
    return out;
  }

  ParameterRefs<T> parameters() const { return const_cast<TransformerModel*>(this)->parameters(); }

  Parameter<T>& token_embedding() { return token_; }
  const Parameter<T>& token_embedding() const { return token_; }

  /// Per-layer token representations: entry 0 is the normalized embedding
  /// output, entries 1..L the encoder layer outputs, each [T x H]. The mask
  /// marks real tokens with 1; pad keys are excluded from attention.
  /// Segments and mask default to all zeros and all ones.
  std::vector<Tensor<T>> encode(std::span<const std::size_t> ids, std::span<const std::uint8_t> segments = {},
                                std::span<const std::uint8_t> mask = {}) const {
    Cache cache;
    run(ids, segments, mask, nullptr, cache);
    return std::move(cache.outputs);
  }

  /// Loss of one example in inference mode (no dropout, no gradients).
  ExampleLoss evaluate(const PretrainExample& ex) const {
    const auto labels = ex.dense_labels();
    return evaluate(ex.ids, ex.segments, ex.masked_positions, labels, ex.is_next);
  }

  /// Same, with the MLM targets read from a full-length label vector at the
  /// given positions only.
  ExampleLoss evaluate(std::span<const std::size_t> ids, std::span<const std::uint8_t> segments,
                       std::span<const std::size_t> positions, std::span<const std::size_t> dense_labels,
                       bool is_next) const {
    Cache cache;
    run(ids, segments, {}, nullptr, cache);
    HeadCache head;
    return const_cast<TransformerModel*>(this)->heads(cache, positions, dense_labels, is_next, head, 0.0, 0.0, false);
  }

  /// Forward and backward for one example. Gradients are added to the
  /// parameters with the MLM loss sum weighted by mlm_scale and the NSP loss
  /// by nsp_scale. Dropout is active when a stream is given.
  ExampleLoss accumulate_gradients(const PretrainExample& ex, double mlm_scale, double nsp_scale,
                                   RngStream* dropout_rng = nullptr) {
    Cache cache;
    run(ex.ids, ex.segments, {}, dropout_rng, cache);
    const auto labels = ex.dense_labels();
    HeadCache head;
    const ExampleLoss loss = heads(cache, ex.masked_positions, labels, ex.is_next, head, mlm_scale, nsp_scale, true);
    backward(cache, head.d_final);
    return loss;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.add_all(parameters());
    ckpt.sections["transformer_config"] = config_.to_json().dump();
    return ckpt;
  }

  static TransformerModel from_checkpoint(const Checkpoint& ckpt) {
    TransformerModel m(TransformerConfig::from_json(nlohmann::json::parse(ckpt.section("transformer_config"))));
    ckpt.restore_all(m.parameters());
    return m;
  }

 private:
  struct LayerCache {
    Tensor<T> q, k, v, probs, context, attn_out;
    std::vector<T> drop_attn, drop_ff;
    LayerNormCache<T> ln_attn, ln_ff;
    Tensor<T> mid, ff_pre, ff_act;
  };

  struct Cache {
    std::vector<std::size_t> ids;
    std::vector<std::uint8_t> segments, mask;
    LayerNormCache<T> ln_emb;
    std::vector<T> drop_emb;
    std::vector<Tensor<T>> outputs;
    std::vector<LayerCache> layers;
  };

  struct HeadCache {
    Tensor<T> d_final;
  };

  std::vector<T> dropout_mask(std::size_t n, RngStream* rng) const {
    if (!rng || config_.dropout <= 0.0) return {};
    std::vector<T> m(n);
    const T keep = static_cast<T>(1.0 / (1.0 - config_.dropout));
    for (auto& x : m) x = rng->bernoulli(config_.dropout) ? T(0) : keep;
    return m;
  }

  static void apply_mask(Tensor<T>& x, const std::vector<T>& m) {
    if (m.empty()) return;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= m[i];
  }

  static void linear(const Tensor<T>& x, const Parameter<T>& w, const Parameter<T>& b, Tensor<T>& y) {
    const std::size_t rows = x.rows(), in = w.value.dim(0), out = w.value.dim(1);
    y = Tensor<T>({rows, out});
    matmul(x.data(), w.value.data(), y.data(), rows, in, out);
    add_row_bias(y.data(), b.value.data(), rows, out);
  }

  /// Accumulates w/b gradients; adds the input gradient into dx.
  static void linear_backward(const Tensor<T>& x, const Tensor<T>& dy, Parameter<T>& w, Parameter<T>& b,
                              Tensor<T>& dx) {
    const std::size_t rows = x.rows(), in = w.value.dim(0), out = w.value.dim(1);
    matmul_tn(x.data(), dy.data(), w.grad.data(), rows, in, out, true);
    accumulate_column_sums(dy.data(), b.grad.data(), rows, out);
    matmul_nt(dy.data(), w.value.data(), dx.data(), rows, out, in, true);
  }

  void run(std::span<const std::size_t> ids, std::span<const std::uint8_t> segments,
           std::span<const std::uint8_t> mask, RngStream* rng, Cache& c) const {
    const std::size_t t_len = ids.size(), h = config_.hidden;
    require_shape(t_len >= 1, "encode: empty sequence");
    require_shape(t_len <= config_.max_seq_len, "encode: sequence length " + std::to_string(t_len) +
                                                   " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    require_shape(segments.empty() || segments.size() == t_len, "encode: segment ids length mismatch");
    require_shape(mask.empty() || mask.size() == t_len, "encode: attention mask length mismatch");
    c.ids.assign(ids.begin(), ids.end());
    c.segments = segments.empty() ? std::vector<std::uint8_t>(t_len, 0)
                                  : std::vector<std::uint8_t>(segments.begin(), segments.end());
    c.mask = mask.empty() ? std::vector<std::uint8_t>(t_len, 1) : std::vector<std::uint8_t>(mask.begin(), mask.end());
    require_shape(std::find(c.mask.begin(), c.mask.end(), 1) != c.mask.end(), "encode: no real tokens");

    Tensor<T> emb({t_len, h});
    for (std::size_t t = 0; t < t_len; ++t) {
      require_shape(c.ids[t] < config_.vocab_size, "encode: token id " + std::to_string(c.ids[t]) + " out of range");
      require_shape(c.segments[t] < 2, "encode: segment id must be 0 or 1");
      for (std::size_t j = 0; j < h; ++j)
        emb(t, j) = token_.value(c.ids[t], j) + position_.value(t, j) + segment_.value(c.segments[t], j);
    }
    c.outputs.assign(1, Tensor<T>());
    layer_norm(emb, emb_ln_gamma_, emb_ln_beta_, c.outputs[0], &c.ln_emb);
    c.drop_emb = dropout_mask(t_len * h, rng);
    apply_mask(c.outputs[0], c.drop_emb);

    c.layers.resize(config_.layers);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      Tensor<T> out;
      layer_forward(layers_[l], c.outputs[l], c.mask, rng, c.layers[l], out);
      c.outputs.push_back(std::move(out));
    }
  }

  void layer_forward(const EncoderLayer<T>& p, const Tensor<T>& x, const std::vector<std::uint8_t>& mask,
                     RngStream* rng, LayerCache& lc, Tensor<T>& out) const {
    const std::size_t t_len = x.rows(), h = config_.hidden, a = config_.heads, dh = config_.head_dim();
    linear(x, p.q_weight, p.q_bias, lc.q);
    linear(x, p.k_weight, p.k_bias, lc.k);
    linear(x, p.v_weight, p.v_bias, lc.v);
    lc.probs = Tensor<T>({a, t_len, t_len});
    lc.context = Tensor<T>({t_len, h});
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<T> scores(t_len);
    for (std::size_t head = 0; head < a; ++head) {
      const std::size_t off = head * dh;
      for (std::size_t i = 0; i < t_len; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < t_len; ++j) {
          if (!mask[j]) continue;
          T s = T(0);
          for (std::size_t d = 0; d < dh; ++d) s += lc.q(i, off + d) * lc.k(j, off + d);
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        T sum = T(0);
        T* prow = &lc.probs[(head * t_len + i) * t_len];
        for (std::size_t j = 0; j < t_len; ++j) {
          if (!mask[j]) continue;
          prow[j] = std::exp(scores[j] - mx);
          sum += prow[j];
        }
        for (std::size_t j = 0; j < t_len; ++j) {
          if (!mask[j]) continue;
          prow[j] /= sum;
          for (std::size_t d = 0; d < dh; ++d) lc.context(i, off + d) += prow[j] * lc.v(j, off + d);
        }
      }
    }
    linear(lc.context, p.o_weight, p.o_bias, lc.attn_out);
    lc.drop_attn = dropout_mask(lc.attn_out.size(), rng);
    apply_mask(lc.attn_out, lc.drop_attn);
    Tensor<T> resid = x;
    for (std::size_t i = 0; i < resid.size(); ++i) resid[i] += lc.attn_out[i];
    layer_norm(resid, p.attn_ln_gamma, p.attn_ln_beta, lc.mid, &lc.ln_attn);

    linear(lc.mid, p.ff_in_weight, p.ff_in_bias, lc.ff_pre);
    lc.ff_act = lc.ff_pre;
    for (auto& v : lc.ff_act.values()) v = gelu(v);
    Tensor<T> ff_out;
    linear(lc.ff_act, p.ff_out_weight, p.ff_out_bias, ff_out);
    lc.drop_ff = dropout_mask(ff_out.size(), rng);
    apply_mask(ff_out, lc.drop_ff);
    for (std::size_t i = 0; i < ff_out.size(); ++i) ff_out[i] += lc.mid[i];
    layer_norm(ff_out, p.ff_ln_gamma, p.ff_ln_beta, out, &lc.ln_ff);
  }

  /// Returns the gradient with respect to the layer input.
  Tensor<T> layer_backward(EncoderLayer<T>& p, const Tensor<T>& x, const std::vector<std::uint8_t>& mask,
                           LayerCache& lc, const Tensor<T>& dout) {
    const std::size_t t_len = x.rows(), h = config_.hidden, a = config_.heads, dh = config_.head_dim();
    Tensor<T> dmid = layer_norm_backward(dout, lc.ln_ff, p.ff_ln_gamma, p.ff_ln_beta);
    Tensor<T> dff = dmid;
    apply_mask(dff, lc.drop_ff);
    Tensor<T> dact(lc.ff_act.shape());
    linear_backward(lc.ff_act, dff, p.ff_out_weight, p.ff_out_bias, dact);
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(lc.ff_pre[i]);
    linear_backward(lc.mid, dact, p.ff_in_weight, p.ff_in_bias, dmid);

    Tensor<T> dresid = layer_norm_backward(dmid, lc.ln_attn, p.attn_ln_gamma, p.attn_ln_beta);
    Tensor<T> dattn = dresid;
    apply_mask(dattn, lc.drop_attn);
    Tensor<T> dctx({t_len, h});
    linear_backward(lc.context, dattn, p.o_weight, p.o_bias, dctx);

    Tensor<T> dq({t_len, h}), dk({t_len, h}), dv({t_len, h});
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<T> dp(t_len);
    for (std::size_t head = 0; head < a; ++head) {
      const std::size_t off = head * dh;
      for (std::size_t i = 0; i < t_len; ++i) {
        const T* prow = &lc.probs[(head * t_len + i) * t_len];
        T dot = T(0);
        for (std::size_t j = 0; j < t_len; ++j) {
          if (!mask[j]) continue;
          T s = T(0);
          for (std::size_t d = 0; d < dh; ++d) {
            s += dctx(i, off + d) * lc.v(j, off + d);
            dv(j, off + d) += prow[j] * dctx(i, off + d);
          }
          dp[j] = s;
          dot += prow[j] * s;
        }
        for (std::size_t j = 0; j < t_len; ++j) {
          if (!mask[j]) continue;
          const T ds = prow[j] * (dp[j] - dot) * scale;
          for (std::size_t d = 0; d < dh; ++d) {
            dq(i, off + d) += ds * lc.k(j, off + d);
            dk(j, off + d) += ds * lc.q(i, off + d);
          }
        }
      }
    }
    Tensor<T> dx = dresid;
    linear_backward(x, dq, p.q_weight, p.q_bias, dx);
    linear_backward(x, dk, p.k_weight, p.k_bias, dx);
    linear_backward(x, dv, p.v_weight, p.v_bias, dx);
    return dx;
  }

  void backward(Cache& c, Tensor<T> d) {
    for (std::size_t l = config_.layers; l-- > 0;) d = layer_backward(layers_[l], c.outputs[l], c.mask, c.layers[l], d);
    apply_mask(d, c.drop_emb);
    const Tensor<T> demb = layer_norm_backward(d, c.ln_emb, emb_ln_gamma_, emb_ln_beta_);
    const std::size_t h = config_.hidden;
    for (std::size_t t = 0; t < c.ids.size(); ++t)
      for (std::size_t j = 0; j < h; ++j) {
        token_.grad(c.ids[t], j) += demb(t, j);
        position_.grad(t, j) += demb(t, j);
        segment_.grad(c.segments[t], j) += demb(t, j);
      }
  }

  /// MLM and NSP heads on the final layer. With `grads`, parameter gradients
  /// are accumulated and the gradient on the final layer is left in head.
  ExampleLoss heads(const Cache& c, std::span<const std::size_t> positions, std::span<const std::size_t> labels,
                    bool is_next, HeadCache& head, double mlm_scale, double nsp_scale, bool grads) {
    const Tensor<T>& final = c.outputs.back();
    const std::size_t h = config_.hidden, v = config_.vocab_size, m = positions.size();
    ExampleLoss loss;
    if (grads) head.d_final = Tensor<T>(final.shape());

    if (m > 0) {
      require_shape(labels.size() == final.rows(), "mlm: label vector must cover the sequence");
      Tensor<T> hm({m, h});
      for (std::size_t k = 0; k < m; ++k) {
        require_shape(positions[k] < final.rows(), "mlm: masked position out of range");
        std::copy_n(&final(positions[k], 0), h, &hm(k, 0));
      }
      Tensor<T> pre;
      linear(hm, mlm_weight_, mlm_bias_, pre);
      Tensor<T> act = pre;
      for (auto& x : act.values()) x = gelu(x);
      Tensor<T> z;
      LayerNormCache<T> ln;
      layer_norm(act, mlm_ln_gamma_, mlm_ln_beta_, z, &ln);
      Tensor<T> logits({m, v});
      matmul_nt(z.data(), token_.value.data(), logits.data(), m, h, v);
      add_row_bias(logits.data(), mlm_out_bias_.value.data(), m, v);
      const Tensor<T> probs = softmax(logits);
      Tensor<T> dlogits({m, v});
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t y = labels[positions[k]];
        require_shape(y < v, "mlm: label out of range");
        loss.mlm_sum -= std::log(std::max(static_cast<double>(probs(k, y)), 1e-300));
        const auto row = probs.row(k);
        if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == y) ++loss.mlm_correct;
        if (grads)
          for (std::size_t j = 0; j < v; ++j)
            dlogits(k, j) = static_cast<T>((static_cast<double>(probs(k, j)) - (j == y ? 1.0 : 0.0)) * mlm_scale);
      }
      loss.mlm_count = m;
      if (grads) {
        accumulate_column_sums(dlogits.data(), mlm_out_bias_.grad.data(), m, v);
        matmul_tn(dlogits.data(), z.data(), token_.grad.data(), m, v, h, true);
        Tensor<T> dz({m, h});
        matmul(dlogits.data(), token_.value.data(), dz.data(), m, v, h);
        Tensor<T> dact = layer_norm_backward(dz, ln, mlm_ln_gamma_, mlm_ln_beta_);
        for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(pre[i]);
        Tensor<T> dhm({m, h});
        linear_backward(hm, dact, mlm_weight_, mlm_bias_, dhm);
        for (std::size_t k = 0; k < m; ++k)
          for (std::size_t j = 0; j < h; ++j) head.d_final(positions[k], j) += dhm(k, j);
      }
    }

    Tensor<T> cls({1, h});
    std::copy_n(&final(0, 0), h, cls.data());
    Tensor<T> pooled;
    linear(cls, pool_weight_, pool_bias_, pooled);
    for (auto& x : pooled.values()) x = std::tanh(x);
    Tensor<T> nsp_logits;
    linear(pooled, nsp_weight_, nsp_bias_, nsp_logits);
    const Tensor<T> nsp_probs = softmax(nsp_logits);
    const std::size_t y = nsp_class(is_next);
    loss.nsp = -std::log(std::max(static_cast<double>(nsp_probs[y]), 1e-300));
    loss.nsp_correct = (nsp_probs[0] >= nsp_probs[1] ? 0u : 1u) == y;
    if (grads) {
      Tensor<T> dl({1, 2});
      for (std::size_t j = 0; j < 2; ++j)
        dl[j] = static_cast<T>((static_cast<double>(nsp_probs[j]) - (j == y ? 1.0 : 0.0)) * nsp_scale);
      Tensor<T> dpooled({1, h});
      linear_backward(pooled, dl, nsp_weight_, nsp_bias_, dpooled);
      for (std::size_t j = 0; j < h; ++j) dpooled[j] *= T(1) - pooled[j] * pooled[j];
      Tensor<T> dcls({1, h});
      linear_backward(cls, dpooled, pool_weight_, pool_bias_, dcls);
      for (std::size_t j = 0; j < h; ++j) head.d_final(0, j) += dcls[j];
    }
    return loss;
  }

  TransformerConfig config_;
  Parameter<T> token_, position_, segment_, emb_ln_gamma_, emb_ln_beta_;
  std::vector<EncoderLayer<T>> layers_;
  Parameter<T> pool_weight_, pool_bias_, nsp_weight_, nsp_bias_;
  Parameter<T> mlm_weight_, mlm_bias_, mlm_ln_gamma_, mlm_ln_beta_, mlm_out_bias_;
};

}  // namespace se3m
