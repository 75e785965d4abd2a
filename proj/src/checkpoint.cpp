// SPDX-License-Identifier: Apache-2.0
#include "metapt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "metapt/errors.hpp"
#include "metapt/hashing.hpp"

namespace metapt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'P', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t limit) : buf_(buf), limit_(limit) {}
  template <typename T>
  T pod() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* out, std::size_t n) {
    if (pos_ + n > limit_) throw ArtifactError("checkpoint: truncated file");
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

Digest digest_of(const char* data, std::size_t n) {
  Sha256 h;
  h.update(std::span(reinterpret_cast<const std::uint8_t*>(data), n));
  return h.finish();
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("checkpoint: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::kBackbone: return "backbone";
    case CheckpointKind::kPrompt: return "prompt";
    case CheckpointKind::kAnnotator: return "annotator";
  }
  return "unknown";
}

std::string save_checkpoint(const std::filesystem::path& path, Checkpoint ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kVersion);
  w.pod(static_cast<std::uint32_t>(ckpt.kind));
  const std::string meta = ckpt.metadata.dump();
  w.pod(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.pod(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.pod(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.pod(static_cast<std::uint64_t>(t.value.rows()));
    w.pod(static_cast<std::uint64_t>(t.value.cols()));
  }
  for (const auto& t : ckpt.tensors) w.bytes(t.value.data(), static_cast<std::size_t>(t.value.size()) * sizeof(double));
  auto& buf = w.buffer();
  const Digest d = digest_of(buf.data(), buf.size());
  buf.insert(buf.end(), d.begin(), d.end());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("checkpoint: cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ArtifactError("checkpoint: write failed for " + path.string());
  return to_hex(d);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto buf = read_file(path);
  if (buf.size() < sizeof(kMagic) + 32) throw ArtifactError("checkpoint: file too short: " + path.string());
  const std::size_t body = buf.size() - 32;
  const Digest expected = digest_of(buf.data(), body);
  if (std::memcmp(expected.data(), buf.data() + body, 32) != 0) {
    throw ArtifactError("checkpoint: content hash mismatch in " + path.string());
  }
  Reader r(buf, body);
  char magic[8];
  r.take(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ArtifactError("checkpoint: bad magic in " + path.string());
  if (r.pod<std::uint32_t>() != kVersion) throw ArtifactError("checkpoint: unsupported version");
  Checkpoint ckpt;
  const auto kind = r.pod<std::uint32_t>();
  if (kind > 2) throw ArtifactError("checkpoint: unknown kind");
  ckpt.kind = static_cast<CheckpointKind>(kind);
  std::string meta(r.pod<std::uint32_t>(), '\0');
  r.take(meta.data(), meta.size());
  ckpt.metadata = nlohmann::json::parse(meta);
  const auto n = r.pod<std::uint32_t>();
  std::vector<std::pair<std::string, std::pair<std::uint64_t, std::uint64_t>>> shapes;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(r.pod<std::uint32_t>(), '\0');
    r.take(name.data(), name.size());
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    shapes.emplace_back(std::move(name), std::pair{rows, cols});
  }
  std::size_t payload = 0;
  for (const auto& [name, rc] : shapes) payload += rc.first * rc.second * sizeof(double);
  if (r.position() + payload != body) throw ArtifactError("checkpoint: shape metadata does not match payload length");
  for (auto& [name, rc] : shapes) {
    Matrix m(static_cast<Eigen::Index>(rc.first), static_cast<Eigen::Index>(rc.second));
    r.take(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    ckpt.tensors.push_back({std::move(name), std::move(m)});
  }
  ckpt.content_hash = to_hex(expected);
  return ckpt;
}

std::string checkpoint_hash(const std::filesystem::path& path) { return load_checkpoint(path).content_hash; }

Checkpoint to_checkpoint(const BackboneParams& backbone, CheckpointKind kind, const std::string& fingerprint) {
  Checkpoint c;
  c.kind = kind;
  c.metadata = {{"model", backbone.config}, {"config_fingerprint", fingerprint}};
  const auto names = backbone.parameter_names();
  const auto params = backbone.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.push_back({names[i], params[i]->value()});
  return c;
}

BackboneParams backbone_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind == CheckpointKind::kPrompt) throw ArtifactError("checkpoint: expected backbone weights, found a prompt");
  ModelConfig config = ckpt.metadata.at("model").get<ModelConfig>();
  BackboneParams b = BackboneParams::zeros(config);
  const auto names = b.parameter_names();
  auto params = b.parameters();
  if (params.size() != ckpt.tensors.size()) throw ArtifactError("checkpoint: backbone tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.name != names[i] || t.value.rows() != params[i]->rows() || t.value.cols() != params[i]->cols()) {
      throw ShapeError("checkpoint: tensor '" + t.name + "' does not match the backbone layout");
    }
    *params[i] = Tensor::constant(t.value);
  }
  b.frozen = true;
  return b;
}

Checkpoint to_checkpoint(const SoftPrompt& prompt, const ModelConfig& config, const std::string& fingerprint) {
  Checkpoint c;
  c.kind = CheckpointKind::kPrompt;
  c.metadata = {{"model", config}, {"config_fingerprint", fingerprint}};
  c.tensors.push_back({"prompt", prompt.values});
  return c;
}

SoftPrompt prompt_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& expected) {
  if (ckpt.kind != CheckpointKind::kPrompt || ckpt.tensors.size() != 1) {
    throw ArtifactError("checkpoint: expected a prompt, found " + to_string(ckpt.kind));
  }
  const auto& v = ckpt.tensors.front().value;
  if (v.rows() != expected.prompt_len || v.cols() != expected.d_model) {
    throw ShapeError("checkpoint: prompt shape " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) +
                     " does not match the configured " + std::to_string(expected.prompt_len) + "x" +
                     std::to_string(expected.d_model));
  }
  return SoftPrompt{v};
}

}  // namespace metapt
