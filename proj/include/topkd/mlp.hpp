#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "topkd/matrix.hpp"
#include "topkd/numerics.hpp"
#include "topkd/rng.hpp"

namespace topkd {

// Fully-connected ReLU network: affine -> ReLU per hidden layer, final
// affine emits logits. weights[l] has shape dims[l+1] x dims[l].
struct MlpParams {
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return weights.size(); }
};

// He-style init: weights ~ Normal(0, 2/fan_in), biases zero.
inline MlpParams init_mlp(const std::vector<std::size_t>& layer_dims, std::uint64_t seed) {
  if (layer_dims.size() < 2) {
    throw std::invalid_argument("init_mlp: need at least input and output dims");
  }
  for (std::size_t d : layer_dims) {
    if (d < 1) throw std::invalid_argument("init_mlp: every layer dim must be >= 1");
  }
  MlpParams p;
  p.layer_dims = layer_dims;
  p.seed = seed;
  RandomStream rng(seed);
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const std::size_t fan_in = layer_dims[l];
    const std::size_t fan_out = layer_dims[l + 1];
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Matrix w(fan_out, fan_in);
    for (double& v : w.data()) v = rng.normal() * std_dev;
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(fan_out, 0.0);
  }
  return p;
}

// Activations recorded by forward for the matching backward pass.
// activations[0] is the input batch; activations[l+1] is the post-ReLU
// output of hidden layer l; pre_acts[l] is the affine output of layer l.
struct ForwardCache {
  std::vector<Matrix> activations;
  std::vector<Matrix> pre_acts;
};

inline Matrix forward(const MlpParams& p, const Matrix& batch,
                      ForwardCache* cache = nullptr) {
  if (batch.cols() != p.input_dim()) {
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) +
                                " features, model expects " +
                                std::to_string(p.input_dim()));
  }
  if (cache) {
    cache->activations.clear();
    cache->pre_acts.clear();
    cache->activations.push_back(batch);
  }
  Matrix a = batch;
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    Matrix z = matmul_transpose(a, p.weights[l]);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto row = z.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += p.biases[l][j];
    }
    if (cache) cache->pre_acts.push_back(z);
    if (l + 1 < p.num_layers()) {
      for (double& v : z.data()) v = v > 0.0 ? v : 0.0;  // ReLU
      if (cache) cache->activations.push_back(z);
    }
    a = std::move(z);
  }
  return a;
}

struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
};

inline MlpGrads zero_grads(const MlpParams& p) {
  MlpGrads g;
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    g.weights.emplace_back(p.weights[l].rows(), p.weights[l].cols());
    g.biases.emplace_back(p.biases[l].size(), 0.0);
  }
  return g;
}

// Exact reverse-mode gradients of all weights and biases given the gradient
// at the logits. The cache must come from a forward pass over the same
// parameters and batch.
inline MlpGrads backward(const MlpParams& p, const ForwardCache& cache,
                         const Matrix& grad_logits) {
  const std::size_t layers = p.num_layers();
  if (cache.pre_acts.size() != layers || cache.activations.size() != layers) {
    throw std::invalid_argument("backward: cache does not match network depth");
  }
  if (grad_logits.rows() != cache.activations[0].rows() ||
      grad_logits.cols() != p.output_dim()) {
    throw std::invalid_argument("backward: grad_logits shape mismatch");
  }

  MlpGrads grads = zero_grads(p);
  Matrix delta = grad_logits;
  for (std::size_t li = layers; li-- > 0;) {
    const Matrix& input = cache.activations[li];
    grads.weights[li] = matmul(transpose(delta), input);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      for (std::size_t j = 0; j < delta.cols(); ++j) {
        grads.biases[li][j] += delta(i, j);
      }
    }
    if (li > 0) {
      Matrix prev = matmul(delta, p.weights[li]);
      const Matrix& pre = cache.pre_acts[li - 1];
      for (std::size_t i = 0; i < prev.data().size(); ++i) {
        if (pre.data()[i] <= 0.0) prev.data()[i] = 0.0;
      }
      delta = std::move(prev);
    }
  }
  return grads;
}

// SGD with classical momentum and L2 weight decay folded into the velocity:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
struct SgdState {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  MlpGrads velocity;
};

inline SgdState make_sgd_state(const MlpParams& p, double learning_rate,
                               double momentum, double weight_decay) {
  if (learning_rate <= 0.0) throw std::invalid_argument("sgd: learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("sgd: weight decay must be >= 0");
  SgdState s;
  s.learning_rate = learning_rate;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.velocity = zero_grads(p);
  return s;
}

inline void sgd_step(MlpParams& p, const MlpGrads& grads, SgdState& state) {
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    auto& w = p.weights[l].data();
    auto& gw = grads.weights[l].data();
    auto& vw = state.velocity.weights[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      vw[i] = state.momentum * vw[i] + gw[i] + state.weight_decay * w[i];
      w[i] -= state.learning_rate * vw[i];
    }
    auto& b = p.biases[l];
    auto& gb = grads.biases[l];
    auto& vb = state.velocity.biases[l];
    for (std::size_t i = 0; i < b.size(); ++i) {
      vb[i] = state.momentum * vb[i] + gb[i];
      b[i] -= state.learning_rate * vb[i];
    }
  }
}

// Fraction of samples whose argmax logit equals the label.
inline double evaluate_accuracy(const MlpParams& p, const Matrix& features,
                                const IndexVector& labels) {
  if (features.rows() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  if (labels.size() != features.rows()) {
    throw std::invalid_argument("evaluate_accuracy: feature/label count mismatch");
  }
  const Matrix logits = forward(p, features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (argmax(logits.row(i)) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint: versioned JSON with layer dims, seed and per-layer row-major
// weight/bias arrays. Doubles are emitted with shortest round-trip
// precision, so reloading reproduces forward outputs bitwise.
inline void save_checkpoint(const MlpParams& p, const std::string& path) {
  nlohmann::json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  doc["layer_dims"] = p.layer_dims;
  doc["seed"] = p.seed;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    nlohmann::json layer;
    layer["weight"] = p.weights[l].data();
    layer["bias"] = p.biases[l];
    layers.push_back(std::move(layer));
  }
  doc["layers"] = std::move(layers);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out << doc.dump(2) << "\n";
}

inline MlpParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  if (!doc.contains("format_version") ||
      doc["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format_version in " + path);
  }
  MlpParams p;
  p.layer_dims = doc.at("layer_dims").get<std::vector<std::size_t>>();
  p.seed = doc.at("seed").get<std::uint64_t>();
  if (p.layer_dims.size() < 2) {
    throw std::runtime_error("load_checkpoint: fewer than two layer dims in " + path);
  }
  const auto& layers = doc.at("layers");
  if (layers.size() + 1 != p.layer_dims.size()) {
    throw std::runtime_error("load_checkpoint: layer count does not match dims in " + path);
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto weight = layers[l].at("weight").get<std::vector<double>>();
    auto bias = layers[l].at("bias").get<std::vector<double>>();
    const std::size_t rows = p.layer_dims[l + 1];
    const std::size_t cols = p.layer_dims[l];
    if (weight.size() != rows * cols || bias.size() != rows) {
      throw std::runtime_error("load_checkpoint: layer " + std::to_string(l) +
                               " shape mismatch in " + path);
    }
    p.weights.emplace_back(rows, cols, std::move(weight));
    p.biases.push_back(std::move(bias));
  }
  return p;
}

}  // namespace topkd
