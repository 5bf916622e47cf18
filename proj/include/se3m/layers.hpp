#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "se3m/error.hpp"
#include "se3m/rng.hpp"
#include "se3m/tensor.hpp"

namespace se3m {

enum class Activation { identity, relu, tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::tanh: return std::tanh(x);
    case Activation::identity: break;
  }
  return x;
}

/// Derivative expressed through the activation output y.
template <typename T>
T activation_grad(Activation a, T y) {
  switch (a) {
    case Activation::relu: return y > T(0) ? T(1) : T(0);
    case Activation::tanh: return T(1) - y * y;
    case Activation::identity: break;
  }
  return T(1);
}

/// Fully connected layer y = act(x W + b) with W stored [in x out].
template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(std::string name, std::size_t in, std::size_t out, Activation act)
      : weight_(name + ".weight", {in, out}), bias_(name + ".bias", {out}), act_(act) {}

  std::size_t in_features() const { return weight_.value.dim(0); }
  std::size_t out_features() const { return weight_.value.dim(1); }
  Activation activation() const { return act_; }

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and bias.
  void init(RngStream& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    weight_.init_uniform(rng, bound);
    bias_.init_uniform(rng, bound);
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    require_shape(x.rank() == 2 && x.cols() == in_features(),
                  "dense " + weight_.name + ": expected input [B x " + std::to_string(in_features()) + "], got " +
                      shape_string(x.shape()));
    const std::size_t b = x.rows();
    Tensor<T> y({b, out_features()});
    matmul(x.data(), weight_.value.data(), y.data(), b, in_features(), out_features());
    add_row_bias(y.data(), bias_.value.data(), b, out_features());
    if (act_ != Activation::identity)
      for (auto& v : y.values()) v = activate(act_, v);
    return y;
  }

  /// Forward pass that keeps what backward() needs.
  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    output_ = apply(x);
    return output_;
  }

  /// Accumulates weight/bias gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    require_shape(grad_out.shape() == output_.shape(), "dense " + weight_.name + ": gradient shape mismatch");
    const std::size_t b = input_.rows();
    Tensor<T> g = grad_out;
    if (act_ != Activation::identity)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= activation_grad(act_, output_[i]);
    matmul_tn(input_.data(), g.data(), weight_.grad.data(), b, in_features(), out_features(), true);
    accumulate_column_sums(g.data(), bias_.grad.data(), b, out_features());
    Tensor<T> grad_in({b, in_features()});
    matmul_nt(g.data(), weight_.value.data(), grad_in.data(), b, out_features(), in_features());
    return grad_in;
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }
  ParameterRefs<T> parameters() { return {&weight_, &bias_}; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  Activation act_ = Activation::identity;
  Tensor<T> input_;
  Tensor<T> output_;
};

// ---------------------------------------------------------------------------
// LSTM

/// Gate pre-activations are laid out [input | forget | candidate | output],
/// each block H wide. One bias vector per gate.
template <typename T>
struct LstmParams {
  Parameter<T> input_weight;      // [I x 4H]
  Parameter<T> recurrent_weight;  // [H x 4H]
  Parameter<T> bias;              // [4H]

  LstmParams() = default;
  LstmParams(const std::string& name, std::size_t in, std::size_t hidden)
      : input_weight(name + ".input_weight", {in, 4 * hidden}),
        recurrent_weight(name + ".recurrent_weight", {hidden, 4 * hidden}),
        bias(name + ".bias", {4 * hidden}) {}

  std::size_t input_size() const { return input_weight.value.dim(0); }
  std::size_t hidden_size() const { return recurrent_weight.value.dim(0); }
  ParameterRefs<T> parameters() { return {&input_weight, &recurrent_weight, &bias}; }
};

/// Everything one timestep produces; kept for the backward pass.
template <typename T>
struct LstmStep {
  Tensor<T> h;      // [B x H]
  Tensor<T> c;      // [B x H]
  Tensor<T> gates;  // [B x 4H] post-activation (sigmoid/tanh)
  Tensor<T> tanh_c; // [B x H]
};

/// One LSTM timestep. Rows whose mask is 0 carry h and c through untouched.
template <typename T>
LstmStep<T> lstm_step(const LstmParams<T>& p, const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c,
                      std::span<const std::uint8_t> mask = {}) {
  const std::size_t hs = p.hidden_size();
  const std::size_t b = x.rows();
  require_shape(x.rank() == 2 && x.cols() == p.input_size(), "lstm: input width mismatch");
  require_shape(h.rows() == b && h.cols() == hs && c.rows() == b && c.cols() == hs, "lstm: state shape mismatch");
  require_shape(mask.empty() || mask.size() == b, "lstm: mask length mismatch");

  LstmStep<T> out{h, c, Tensor<T>({b, 4 * hs}), Tensor<T>({b, hs})};
  for (std::size_t r = 0; r < b; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    T* g = &out.gates(r, 0);
    for (std::size_t j = 0; j < 4 * hs; ++j) g[j] = p.bias.value[j];
    matmul(&x(r, 0), p.input_weight.value.data(), g, 1, p.input_size(), 4 * hs, true);
    matmul(&h(r, 0), p.recurrent_weight.value.data(), g, 1, hs, 4 * hs, true);
    for (std::size_t j = 0; j < hs; ++j) {
      const T i_gate = sigmoid(g[j]);
      const T f_gate = sigmoid(g[hs + j]);
      const T cand = std::tanh(g[2 * hs + j]);
      const T o_gate = sigmoid(g[3 * hs + j]);
      g[j] = i_gate;
      g[hs + j] = f_gate;
      g[2 * hs + j] = cand;
      g[3 * hs + j] = o_gate;
      const T c_new = f_gate * c(r, j) + i_gate * cand;
      out.c(r, j) = c_new;
      out.tanh_c(r, j) = std::tanh(c_new);
      out.h(r, j) = o_gate * out.tanh_c(r, j);
    }
  }
  return out;
}

/// Unrolled LSTM over a padded batch [B x T x I] with a [B x T] mask.
/// Returns the final hidden state, which serves as the sequence summary.
template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(std::string name, std::size_t in, std::size_t hidden) : params_(name, in, hidden) {}

  std::size_t input_size() const { return params_.input_size(); }
  std::size_t hidden_size() const { return params_.hidden_size(); }

  void init(RngStream& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(input_size()));
    params_.input_weight.init_uniform(rng, bound);
    const double rbound = 1.0 / std::sqrt(static_cast<double>(hidden_size()));
    params_.recurrent_weight.init_uniform(rng, rbound);
    params_.bias.init_uniform(rng, bound);
  }

  Tensor<T> apply(const Tensor<T>& seq, std::span<const std::uint8_t> mask) const {
    std::vector<LstmStep<T>> steps;
    return run(seq, mask, steps, false);
  }

  Tensor<T> forward(const Tensor<T>& seq, std::span<const std::uint8_t> mask) {
    input_ = seq;
    mask_.assign(mask.begin(), mask.end());
    return run(seq, mask, steps_, true);
  }

  /// Backpropagates a gradient on the final hidden state through time.
  /// Returns the gradient with respect to the input sequence.
  Tensor<T> backward(const Tensor<T>& grad_h) {
    const std::size_t b = input_.dim(0), t_len = input_.dim(1), in = input_.dim(2), hs = hidden_size();
    require_shape(grad_h.rows() == b && grad_h.cols() == hs, "lstm: gradient shape mismatch");
    Tensor<T> grad_in({b, t_len, in});
    Tensor<T> dh = grad_h;
    Tensor<T> dc({b, hs});
    Tensor<T> dgates({1, 4 * hs});
    const Tensor<T> zeros({b, hs});
    for (std::size_t t = t_len; t-- > 0;) {
      const LstmStep<T>& st = steps_[t];
      const Tensor<T>& h_prev = t > 0 ? steps_[t - 1].h : zeros;
      const Tensor<T>& c_prev = t > 0 ? steps_[t - 1].c : zeros;
      for (std::size_t r = 0; r < b; ++r) {
        if (!mask_[r * t_len + t]) continue;  // state passed straight through
        const T* g = &st.gates(r, 0);
        T* dg = dgates.data();
        for (std::size_t j = 0; j < hs; ++j) {
          const T i_gate = g[j], f_gate = g[hs + j], cand = g[2 * hs + j], o_gate = g[3 * hs + j];
          const T tc = st.tanh_c(r, j);
          const T dhj = dh(r, j);
          const T dcj = dc(r, j) + dhj * o_gate * (T(1) - tc * tc);
          dg[j] = dcj * cand * i_gate * (T(1) - i_gate);
          dg[hs + j] = dcj * c_prev(r, j) * f_gate * (T(1) - f_gate);
          dg[2 * hs + j] = dcj * i_gate * (T(1) - cand * cand);
          dg[3 * hs + j] = dhj * tc * o_gate * (T(1) - o_gate);
          dc(r, j) = dcj * f_gate;
        }
        const T* x = &input_.data()[(r * t_len + t) * in];
        matmul_tn(x, dg, params_.input_weight.grad.data(), 1, in, 4 * hs, true);
        matmul_tn(&h_prev(r, 0), dg, params_.recurrent_weight.grad.data(), 1, hs, 4 * hs, true);
        for (std::size_t j = 0; j < 4 * hs; ++j) params_.bias.grad[j] += dg[j];
        matmul_nt(dg, params_.input_weight.value.data(), &grad_in.data()[(r * t_len + t) * in], 1, 4 * hs, in);
        matmul_nt(dg, params_.recurrent_weight.value.data(), &dh(r, 0), 1, 4 * hs, hs);
      }
    }
    return grad_in;
  }

  LstmParams<T>& params() { return params_; }
  const LstmParams<T>& params() const { return params_; }
  ParameterRefs<T> parameters() { return params_.parameters(); }

 private:
  Tensor<T> run(const Tensor<T>& seq, std::span<const std::uint8_t> mask, std::vector<LstmStep<T>>& steps,
                bool keep) const {
    require_shape(seq.rank() == 3 && seq.dim(2) == input_size(), "lstm: expected input [B x T x " +
                                                                     std::to_string(input_size()) + "], got " +
                                                                     shape_string(seq.shape()));
    const std::size_t b = seq.dim(0), t_len = seq.dim(1), in = seq.dim(2), hs = hidden_size();
    require_shape(mask.size() == b * t_len, "lstm: mask must be [B x T]");
    Tensor<T> h({b, hs}), c({b, hs});
    Tensor<T> x({b, in});
    std::vector<std::uint8_t> step_mask(b);
    steps.clear();
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t r = 0; r < b; ++r) {
        step_mask[r] = mask[r * t_len + t];
        std::copy_n(&seq.data()[(r * t_len + t) * in], in, &x(r, 0));
      }
      LstmStep<T> st = lstm_step(params_, x, h, c, step_mask);
      h = st.h;
      c = st.c;
      if (keep) steps.push_back(std::move(st));
    }
    return h;
  }

  LstmParams<T> params_;
  Tensor<T> input_;
  std::vector<std::uint8_t> mask_;
  std::vector<LstmStep<T>> steps_;
};

// ---------------------------------------------------------------------------
// Softmax and losses

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T sum = T(0);
    for (T& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (T& v : row) v /= sum;
  }
  return out;
}

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;
};

/// Mean squared error over all elements; gradient w.r.t. predictions.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& predictions, std::span<const double> targets) {
  require_shape(predictions.size() == targets.size() && !targets.empty(), "mse: predictions/targets size mismatch");
  LossResult<T> res{0.0, Tensor<T>(predictions.shape())};
  const double n = static_cast<double>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double d = static_cast<double>(predictions[i]) - targets[i];
    res.value += d * d;
    res.grad[i] = static_cast<T>(2.0 * d / n);
  }
  res.value /= n;
  return res;
}

/// Mean cross-entropy of softmax(logits) against class indices; gradient
/// w.r.t. the logits.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_shape(logits.rank() == 2 && logits.rows() == targets.size() && !targets.empty(),
                "cross_entropy: one target per logit row required");
  const std::size_t classes = logits.cols();
  for (auto t : targets)
    if (t >= classes) throw ShapeError("cross_entropy: class index " + std::to_string(t) + " out of range");
  LossResult<T> res{0.0, softmax(logits)};
  const double n = static_cast<double>(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto row = logits.row(r);
    double mx = row[0];
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    res.value += (mx + std::log(sum)) - static_cast<double>(row[targets[r]]);
    for (std::size_t c = 0; c < classes; ++c) {
      T& g = res.grad(r, c);
      g = static_cast<T>((static_cast<double>(g) - (c == targets[r] ? 1.0 : 0.0)) / n);
    }
  }
  res.value /= n;
  return res;
}

}  // namespace se3m
