// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "metapt/model.hpp"
#include "metapt/tokenizer.hpp"

namespace metapt::test {

inline const std::vector<std::string>& five_label_words() {
  static const std::vector<std::string> w{"terrible", "bad", "maybe", "good", "great"};
  return w;
}

inline std::vector<std::string> toy_texts() {
  return {"i love this movie", "the food was awful", "a fine and pleasant day", "the plot was dull",
          "what a superb camera", "the hotel room was dirty", "service felt average", "the battery died fast"};
}

inline Tokenizer toy_tokenizer() {
  std::vector<std::string> forced = five_label_words();
  forced.insert(forced.end(), {"it", "was", "."});
  return Tokenizer::build(toy_texts(), 200, forced);
}

inline ModelConfig tiny_config(const Tokenizer& tok, int prompt_len = 4) {
  ModelConfig c;
  c.vocab_size = static_cast<int>(tok.size());
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 32;
  c.prompt_len = prompt_len;
  return c;
}

/// Random weights with a larger spread than the training init so gradients
/// are not dominated by layer-norm saturation.
inline BackboneParams scrambled_backbone(const ModelConfig& c, std::uint64_t seed) {
  auto b = BackboneParams::random_init(c, seed);
  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (Tensor* t : b.parameters()) {
    Matrix m = t->value();
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += nd(rng);
    *t = Tensor::constant(m);
  }
  b.frozen = true;
  return b;
}

}  // namespace metapt::test
