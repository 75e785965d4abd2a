// SPDX-License-Identifier: Apache-2.0
//
// A small bidirectional transformer encoder with a tied masked-token head.
// A soft prompt (prompt_len x d_model) is prepended to the token embeddings;
// classification reads the log-probabilities at the single <mask> slot of
// the hard template "<input> it was <mask> .".
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/autodiff.hpp"
#include "metapt/tokenizer.hpp"

namespace metapt {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 160;
  int prompt_len = 16;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  std::vector<Tensor> wq, wk, wv, wo;  // one per head
  Tensor attn_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

/// Backbone weights. Once frozen every tensor is a graph constant, so no
/// gradient can ever be requested for it.
class BackboneParams {
 public:
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Tensor output_bias;  // 1 x vocab; output projection is tied to token_embedding
  bool frozen = false;

  static BackboneParams random_init(const ModelConfig& config, std::uint64_t seed);
  /// All weights zero (gains included): every mask distribution is uniform.
  static BackboneParams zeros(const ModelConfig& config);

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;

  /// Deep copy; `trainable` makes every tensor a fresh gradient leaf.
  BackboneParams clone(bool trainable) const;
  void freeze();
  std::string content_hash() const;
};

struct SoftPrompt {
  Matrix values;  // prompt_len x d_model
  bool operator==(const SoftPrompt&) const = default;
};

/// Ordered class -> label word mapping; every word is one vocabulary entry.
class Verbalizer {
 public:
  Verbalizer() = default;
  Verbalizer(std::vector<std::string> words, const Tokenizer& tokenizer);

  int n_classes() const { return static_cast<int>(words_.size()); }
  TokenId token_id(int cls) const;
  const std::string& word(int cls) const { return words_.at(static_cast<std::size_t>(cls)); }
  int class_of(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }
  const std::vector<TokenId>& ids() const { return ids_; }

 private:
  std::vector<std::string> words_;
  std::vector<TokenId> ids_;
};

/// Token ids of a templated input plus the index of its <mask> (relative to
/// the first non-prompt position).
struct TemplatedInput {
  std::vector<TokenId> ids;
  std::size_t mask_pos = 0;
};

struct LabeledInput {
  TemplatedInput input;
  int label = 0;
};

/// `text ++ "it was" ++ <mask> ++ "."`, truncating the text from the right so
/// that prompt_len + length <= max_seq_len. The suffix is always kept.
TemplatedInput apply_template(const std::string& text, const Tokenizer& tokenizer, const ModelConfig& config);

/// Final-layer hidden states for [prompt; ids]. `prompt` may be undefined
/// (no soft prompt rows).
Tensor encode(const Tensor& prompt, const BackboneParams& backbone, std::span<const TokenId> ids);

/// Log-probabilities over the vocabulary at the mask slot, 1 x vocab.
Tensor forward(const Tensor& prompt, const BackboneParams& backbone, const TemplatedInput& input);

/// Mask log-probabilities for a batch, batch x vocab.
Tensor forward_batch(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> batch);

/// Mean over the batch of -log p(mask = verbalizer(label)) over the full vocabulary.
Tensor label_loss(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> batch,
                  const Verbalizer& verbalizer);

/// Argmax over the verbalizer tokens only; ties go to the smallest class.
int predict(const Tensor& prompt, const BackboneParams& backbone, const TemplatedInput& input,
            const Verbalizer& verbalizer);

/// Argmax rule on a precomputed 1 x vocab row.
int predict_from_log_probs(const Matrix& log_probs_row, const Verbalizer& verbalizer);

/// Softmax over the verbalizer-token logits, one probability per class.
std::vector<double> class_probabilities(const Tensor& prompt, const BackboneParams& backbone,
                                        const TemplatedInput& input, const Verbalizer& verbalizer);

struct PretrainOptions {
  long steps = 2000;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
};

/// Masked-token pre-training of every backbone weight; returns a frozen backbone.
BackboneParams pretrain_backbone(const std::vector<std::vector<TokenId>>& corpus, const ModelConfig& config,
                                 const PretrainOptions& options);

/// Mean masked-token loss of `backbone` on `corpus` with a seeded mask draw.
double mlm_loss(const BackboneParams& backbone, const std::vector<std::vector<TokenId>>& corpus,
                double mask_prob, std::uint64_t seed);

enum class PromptInit { kRandomNormal, kSampleVocab, kLoadCheckpoint };

PromptInit parse_prompt_init(const std::string& name);

/// kRandomNormal: N(0, 0.02^2); kSampleVocab: rows copied from embeddings of
/// seed-sampled real tokens (needs `backbone`); kLoadCheckpoint: read `path`.
SoftPrompt init_prompt(const ModelConfig& config, PromptInit mode, std::uint64_t seed,
                       const BackboneParams* backbone = nullptr, const std::filesystem::path& path = {});

}  // namespace metapt
