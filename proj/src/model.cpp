// SPDX-License-Identifier: Apache-2.0
#include "metapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "metapt/checkpoint.hpp"
#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"
#include "metapt/optim.hpp"

namespace metapt {

void ModelConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("model.vocab_size must be at least 4");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  }
  if (n_layers < 0 || d_ff <= 0) throw ConfigError("model.n_layers must be >= 0 and model.d_ff > 0");
  if (prompt_len < 0) throw ConfigError("model.prompt_len must be >= 0");
  // The template suffix alone takes four slots.
  if (prompt_len + 4 > max_seq_len) throw ConfigError("model.prompt_len + template length exceeds max_seq_len");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
                     {"prompt_len", c.prompt_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("prompt_len").get_to(c.prompt_len);
}

namespace {

Matrix normal_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

template <typename Make>
BackboneParams build(const ModelConfig& config, Make&& make) {
  config.validate();
  const int d = config.d_model, dh = config.head_dim();
  BackboneParams b;
  b.config = config;
  b.token_embedding = make("normal", config.vocab_size, d);
  b.position_embedding = make("normal", config.max_seq_len, d);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = make("one", 1, d);
    lp.ln1_bias = make("zero", 1, d);
    for (int h = 0; h < config.n_heads; ++h) {
      lp.wq.push_back(make("normal", d, dh));
      lp.wk.push_back(make("normal", d, dh));
      lp.wv.push_back(make("normal", d, dh));
      lp.wo.push_back(make("normal", dh, d));
    }
    lp.attn_bias = make("zero", 1, d);
    lp.ln2_gain = make("one", 1, d);
    lp.ln2_bias = make("zero", 1, d);
    lp.ff_w1 = make("normal", d, config.d_ff);
    lp.ff_b1 = make("zero", 1, config.d_ff);
    lp.ff_w2 = make("normal", config.d_ff, d);
    lp.ff_b2 = make("zero", 1, d);
    b.layers.push_back(std::move(lp));
  }
  b.output_bias = make("zero", 1, config.vocab_size);
  return b;
}

}  // namespace

BackboneParams BackboneParams::random_init(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return build(config, [&](const std::string& kind, Eigen::Index r, Eigen::Index c) {
    if (kind == "one") return Tensor::constant(Matrix::Ones(r, c));
    if (kind == "zero") return Tensor::constant(Matrix::Zero(r, c));
    return Tensor::constant(normal_matrix(rng, r, c, 0.02));
  });
}

BackboneParams BackboneParams::zeros(const ModelConfig& config) {
  auto b = build(config, [](const std::string&, Eigen::Index r, Eigen::Index c) {
    return Tensor::constant(Matrix::Zero(r, c));
  });
  b.frozen = true;
  return b;
}

std::vector<Tensor*> BackboneParams::parameters() {
  std::vector<Tensor*> out{&token_embedding, &position_embedding};
  for (auto& l : layers) {
    out.push_back(&l.ln1_gain);
    out.push_back(&l.ln1_bias);
    for (auto& t : l.wq) out.push_back(&t);
    for (auto& t : l.wk) out.push_back(&t);
    for (auto& t : l.wv) out.push_back(&t);
    for (auto& t : l.wo) out.push_back(&t);
    for (Tensor* t : {&l.attn_bias, &l.ln2_gain, &l.ln2_bias, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2}) {
      out.push_back(t);
    }
  }
  out.push_back(&output_bias);
  return out;
}

std::vector<const Tensor*> BackboneParams::parameters() const {
  auto mut = const_cast<BackboneParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> BackboneParams::parameter_names() const {
  std::vector<std::string> names{"token_embedding", "position_embedding"};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    names.push_back(p + "ln1_gain");
    names.push_back(p + "ln1_bias");
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      for (std::size_t h = 0; h < layers[l].wq.size(); ++h) names.push_back(p + w + std::to_string(h));
    }
    for (const char* w : {"attn_bias", "ln2_gain", "ln2_bias", "ff_w1", "ff_b1", "ff_w2", "ff_b2"}) {
      names.push_back(p + w);
    }
  }
  names.push_back("output_bias");
  return names;
}

BackboneParams BackboneParams::clone(bool trainable) const {
  BackboneParams out = *this;
  for (Tensor* t : out.parameters()) {
    *t = trainable ? Tensor::parameter(t->value()) : Tensor::constant(t->value());
  }
  out.frozen = !trainable && frozen;
  return out;
}

void BackboneParams::freeze() {
  for (Tensor* t : parameters()) {
    if (t->requires_grad()) *t = Tensor::constant(t->value());
  }
  frozen = true;
}

std::string BackboneParams::content_hash() const {
  Sha256 h;
  h.update(nlohmann::json(config).dump());
  for (const Tensor* t : parameters()) {
    const auto r = static_cast<std::int64_t>(t->rows()), c = static_cast<std::int64_t>(t->cols());
    h.update_pod(r);
    h.update_pod(c);
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(t->value().data()),
                       static_cast<std::size_t>(t->size()) * sizeof(double)));
  }
  return to_hex(h.finish());
}

Verbalizer::Verbalizer(std::vector<std::string> words, const Tokenizer& tokenizer) : words_(std::move(words)) {
  if (words_.empty()) throw ConfigError("verbalizer: no label words");
  for (const auto& w : words_) {
    auto parts = Tokenizer::split(w);
    if (parts.size() != 1 || parts.front() != w) {
      throw ConfigError("verbalizer: label word '" + w + "' is not a single lowercase token");
    }
    auto id = tokenizer.find(w);
    if (!id) throw ConfigError("verbalizer: label word '" + w + "' is not in the vocabulary");
    if (std::find(ids_.begin(), ids_.end(), *id) != ids_.end()) {
      throw ConfigError("verbalizer: label word '" + w + "' repeated");
    }
    ids_.push_back(*id);
  }
}

TokenId Verbalizer::token_id(int cls) const {
  if (cls < 0 || cls >= n_classes()) {
    throw ContractError("verbalizer: class " + std::to_string(cls) + " outside [0, " + std::to_string(n_classes()) + ")");
  }
  return ids_[static_cast<std::size_t>(cls)];
}

int Verbalizer::class_of(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw ContractError("verbalizer: '" + word + "' is not a label word");
  return static_cast<int>(it - words_.begin());
}

TemplatedInput apply_template(const std::string& text, const Tokenizer& tokenizer, const ModelConfig& config) {
  static const std::vector<std::string> kLead{"it", "was"};
  std::vector<TokenId> body = tokenizer.encode(text);
  const std::size_t budget = static_cast<std::size_t>(config.max_seq_len - config.prompt_len);
  const std::size_t suffix = kLead.size() + 2;
  if (budget < suffix) throw ConfigError("apply_template: no room for the template suffix");
  if (body.size() > budget - suffix) body.resize(budget - suffix);
  TemplatedInput out;
  out.ids = std::move(body);
  for (const auto& w : kLead) out.ids.push_back(tokenizer.id(w));
  out.mask_pos = out.ids.size();
  out.ids.push_back(Tokenizer::kMask);
  out.ids.push_back(tokenizer.id("."));
  return out;
}

namespace {

Tensor attention_block(const Tensor& x, const LayerParams& lp, double inv_sqrt_dh) {
  const auto n = x.rows();
  Tensor out;
  for (std::size_t h = 0; h < lp.wq.size(); ++h) {
    auto q = ad::matmul(x, lp.wq[h]);
    auto k = ad::matmul(x, lp.wk[h]);
    auto v = ad::matmul(x, lp.wv[h]);
    auto weights = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_dh));
    auto head = ad::matmul(ad::matmul(weights, v), lp.wo[h]);
    out = out.defined() ? ad::add(out, head) : head;
  }
  return ad::add(out, ad::broadcast_rows(lp.attn_bias, n));
}

Tensor feed_forward(const Tensor& x, const LayerParams& lp) {
  auto h = ad::gelu(ad::add_row(ad::matmul(x, lp.ff_w1), lp.ff_b1));
  return ad::add_row(ad::matmul(h, lp.ff_w2), lp.ff_b2);
}

}  // namespace

Tensor encode(const Tensor& prompt, const BackboneParams& backbone, std::span<const TokenId> ids) {
  const auto& cfg = backbone.config;
  const Eigen::Index prompt_rows = prompt.defined() ? prompt.rows() : 0;
  if (prompt.defined() && (prompt.rows() != cfg.prompt_len || prompt.cols() != cfg.d_model)) {
    throw ShapeError("forward: prompt is " + std::to_string(prompt.rows()) + "x" + std::to_string(prompt.cols()) +
                     " but the model expects " + std::to_string(cfg.prompt_len) + "x" + std::to_string(cfg.d_model));
  }
  const auto total = prompt_rows + static_cast<Eigen::Index>(ids.size());
  if (total > cfg.max_seq_len) {
    throw ContractError("forward: sequence of " + std::to_string(total) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  if (ids.empty()) throw ContractError("forward: empty token sequence");
  std::vector<Eigen::Index> idx(ids.begin(), ids.end());
  for (auto i : idx) {
    if (i < 0 || i >= cfg.vocab_size) throw ContractError("forward: token id out of range");
  }
  // Prompt rows carry no position embedding; token positions start at 0 so
  // the text sees the same positions it saw during pre-training.
  std::vector<Eigen::Index> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<Eigen::Index>(i);
  auto tokens = ad::add(ad::gather_rows(backbone.token_embedding, idx),
                        ad::gather_rows(backbone.position_embedding, positions));
  auto x = prompt.defined() ? ad::concat_rows<double>({prompt, tokens}) : tokens;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  // Post-norm residual blocks: prompt rows enter the first attention
  // unnormalized, so their scale is free to grow during prompt tuning.
  for (const auto& lp : backbone.layers) {
    x = ad::layer_norm(ad::add(x, attention_block(x, lp, inv_sqrt_dh)), lp.ln1_gain, lp.ln1_bias);
    x = ad::layer_norm(ad::add(x, feed_forward(x, lp)), lp.ln2_gain, lp.ln2_bias);
  }
  return x;
}

namespace {

std::size_t single_mask(const TemplatedInput& input) {
  const auto n = std::count(input.ids.begin(), input.ids.end(), Tokenizer::kMask);
  if (n != 1) throw ContractError("forward: expected exactly one <mask>, found " + std::to_string(n));
  if (input.mask_pos >= input.ids.size() || input.ids[input.mask_pos] != Tokenizer::kMask) {
    throw ContractError("forward: recorded mask position does not hold <mask>");
  }
  return input.mask_pos;
}

Tensor mask_hidden(const Tensor& prompt, const BackboneParams& backbone, const TemplatedInput& input) {
  const auto pos = single_mask(input);
  auto h = encode(prompt, backbone, input.ids);
  const Eigen::Index prompt_rows = prompt.defined() ? prompt.rows() : 0;
  return ad::gather_rows(h, {prompt_rows + static_cast<Eigen::Index>(pos)});
}

Tensor vocab_log_probs(const Tensor& hidden_rows, const BackboneParams& backbone) {
  auto logits = ad::matmul(hidden_rows, ad::transpose(backbone.token_embedding));
  return ad::log_softmax(ad::add(logits, ad::broadcast_rows(backbone.output_bias, hidden_rows.rows())));
}

}  // namespace

Tensor forward(const Tensor& prompt, const BackboneParams& backbone, const TemplatedInput& input) {
  return vocab_log_probs(mask_hidden(prompt, backbone, input), backbone);
}

Tensor forward_batch(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> batch) {
  if (batch.empty()) throw ContractError("forward_batch: empty batch");
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (const auto& ex : batch) rows.push_back(mask_hidden(prompt, backbone, ex.input));
  return vocab_log_probs(rows.size() == 1 ? rows.front() : ad::concat_rows(rows), backbone);
}

Tensor label_loss(const Tensor& prompt, const BackboneParams& backbone, std::span<const LabeledInput> batch,
                  const Verbalizer& verbalizer) {
  std::vector<Eigen::Index> targets;
  targets.reserve(batch.size());
  for (const auto& ex : batch) targets.push_back(verbalizer.token_id(ex.label));
  return ad::nll_loss(forward_batch(prompt, backbone, batch), targets);
}

int predict_from_log_probs(const Matrix& row, const Verbalizer& verbalizer) {
  int best = 0;
  double best_score = row(0, verbalizer.token_id(0));
  for (int c = 1; c < verbalizer.n_classes(); ++c) {
    const double s = row(0, verbalizer.token_id(c));
    if (s > best_score) {
      best = c;
      best_score = s;
    }
  }
  return best;
}

int predict(const Tensor& prompt, const BackboneParams& backbone, const TemplatedInput& input,
            const Verbalizer& verbalizer) {
  ad::NoGrad guard;
  return predict_from_log_probs(forward(prompt, backbone, input).value(), verbalizer);
}

std::vector<double> class_probabilities(const Tensor& prompt, const BackboneParams& backbone,
                                        const TemplatedInput& input, const Verbalizer& verbalizer) {
  ad::NoGrad guard;
  const Matrix lp = forward(prompt, backbone, input).value();
  std::vector<double> scores;
  for (auto id : verbalizer.ids()) scores.push_back(lp(0, id));
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (auto& s : scores) z += (s = std::exp(s - mx));
  for (auto& s : scores) s /= z;
  return scores;
}

namespace {

struct MaskedSequence {
  std::vector<TokenId> ids;
  std::vector<Eigen::Index> positions;
  std::vector<Eigen::Index> targets;
};

MaskedSequence mask_sequence(const std::vector<TokenId>& seq, int max_len, double mask_prob, std::mt19937_64& rng) {
  MaskedSequence out;
  out.ids.assign(seq.begin(), seq.begin() + std::min<std::size_t>(seq.size(), static_cast<std::size_t>(max_len)));
  std::bernoulli_distribution coin(mask_prob);
  for (std::size_t i = 0; i < out.ids.size(); ++i) {
    if (coin(rng)) out.positions.push_back(static_cast<Eigen::Index>(i));
  }
  if (out.positions.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, out.ids.size() - 1);
    out.positions.push_back(static_cast<Eigen::Index>(pick(rng)));
  }
  for (auto p : out.positions) {
    out.targets.push_back(out.ids[static_cast<std::size_t>(p)]);
    out.ids[static_cast<std::size_t>(p)] = Tokenizer::kMask;
  }
  return out;
}

Tensor mlm_batch_loss(const BackboneParams& backbone, const std::vector<MaskedSequence>& batch) {
  std::vector<Tensor> rows;
  std::vector<Eigen::Index> targets;
  for (const auto& s : batch) {
    rows.push_back(ad::gather_rows(encode(Tensor{}, backbone, s.ids), s.positions));
    targets.insert(targets.end(), s.targets.begin(), s.targets.end());
  }
  return ad::nll_loss(vocab_log_probs(ad::concat_rows(rows), backbone), targets);
}

}  // namespace

BackboneParams pretrain_backbone(const std::vector<std::vector<TokenId>>& corpus, const ModelConfig& config,
                                 const PretrainOptions& options) {
  std::vector<const std::vector<TokenId>*> usable;
  for (const auto& s : corpus) {
    if (!s.empty()) usable.push_back(&s);
  }
  if (usable.empty()) throw DataError("pretrain_backbone: empty corpus");
  BackboneParams backbone = BackboneParams::random_init(config, options.seed).clone(true);
  if (options.steps > 0) {
    std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    AdamWState<double> state({.lr = options.lr, .weight_decay = options.weight_decay});
    auto params = backbone.parameters();
    std::vector<Tensor> leaves;
    for (auto* p : params) leaves.push_back(*p);
    std::vector<Matrix*> values;
    for (auto* p : params) values.push_back(&p->mutable_value());
    const long warmup = std::min<long>(options.steps / 10, 200);
    for (long step = 1; step <= options.steps; ++step) {
      std::vector<MaskedSequence> batch;
      for (int b = 0; b < options.batch_size; ++b) {
        batch.push_back(mask_sequence(*usable[pick(rng)], config.max_seq_len, options.mask_prob, rng));
      }
      std::vector<Matrix> grads;
      {
        auto loss = mlm_batch_loss(backbone, batch);
        for (auto& g : ad::grad(loss, leaves)) grads.push_back(g.value());
      }
      adamw_step<double>(values, grads, state, lr_schedule(step, warmup, options.steps, options.lr));
    }
  }
  backbone.freeze();
  return backbone;
}

double mlm_loss(const BackboneParams& backbone, const std::vector<std::vector<TokenId>>& corpus, double mask_prob,
                std::uint64_t seed) {
  ad::NoGrad guard;
  std::mt19937_64 rng(seed);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    if (s.empty()) continue;
    auto m = mask_sequence(s, backbone.config.max_seq_len, mask_prob, rng);
    total += mlm_batch_loss(backbone, {m}).item() * static_cast<double>(m.targets.size());
    count += m.targets.size();
  }
  if (count == 0) throw DataError("mlm_loss: empty corpus");
  return total / static_cast<double>(count);
}

PromptInit parse_prompt_init(const std::string& name) {
  if (name == "random-normal") return PromptInit::kRandomNormal;
  if (name == "sample-vocab-embeddings") return PromptInit::kSampleVocab;
  if (name == "load-checkpoint") return PromptInit::kLoadCheckpoint;
  throw ConfigError("unknown prompt init mode '" + name + "'");
}

SoftPrompt init_prompt(const ModelConfig& config, PromptInit mode, std::uint64_t seed, const BackboneParams* backbone,
                       const std::filesystem::path& path) {
  std::mt19937_64 rng(seed);
  switch (mode) {
    case PromptInit::kRandomNormal:
      return SoftPrompt{normal_matrix(rng, config.prompt_len, config.d_model, 0.02)};
    case PromptInit::kSampleVocab: {
      if (!backbone) throw ContractError("init_prompt: vocab sampling needs a backbone");
      const auto& emb = backbone->token_embedding.value();
      // Skip the reserved ids.
      std::uniform_int_distribution<Eigen::Index> pick(3, emb.rows() - 1);
      Matrix p(config.prompt_len, config.d_model);
      for (Eigen::Index r = 0; r < p.rows(); ++r) p.row(r) = emb.row(pick(rng));
      return SoftPrompt{std::move(p)};
    }
    case PromptInit::kLoadCheckpoint:
      return prompt_from_checkpoint(load_checkpoint(path), config);
  }
  throw ContractError("init_prompt: unknown mode");
}

}  // namespace metapt
