#include "nanonet/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "nanonet/error.hpp"

namespace nanonet {

AttentionKind AttentionKind::global(double theta) { return {AttentionType::global, kLocalWindow, theta}; }

AttentionKind AttentionKind::local(std::size_t window, double theta) { return {AttentionType::local, window, theta}; }

bool AttentionKind::allows(std::size_t pos_i, std::size_t pos_j) const {
  if (type == AttentionType::global) return true;
  const std::size_t gap = pos_i > pos_j ? pos_i - pos_j : pos_j - pos_i;
  return gap < window;
}

std::vector<AttentionKind> make_schedule(std::size_t n_layers, std::size_t global_every, const AttentionKind& global,
                                         const AttentionKind& local) {
  if (global_every == 0) throw ConfigError("global_every must be at least 1");
  std::vector<AttentionKind> schedule;
  schedule.reserve(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) schedule.push_back(l % global_every == 0 ? global : local);
  return schedule;
}

void EncoderConfig::fill_schedule(std::size_t local_window, double global_theta, double local_theta) {
  attention_schedule = make_schedule(n_layers, global_every, AttentionKind::global(global_theta),
                                     AttentionKind::local(local_window, local_theta));
}

void EncoderConfig::validate() const {
  if (n_layers == 0) throw ConfigError("encoder needs at least one layer");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (d_head() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
  if (d_ff == 0 || vocab_size == 0 || n_classes == 0) throw ConfigError("d_ff, vocab_size and n_classes must be positive");
  if (attention_schedule.size() != n_layers) {
    throw ConfigError("attention schedule has " + std::to_string(attention_schedule.size()) + " entries for " +
                      std::to_string(n_layers) + " layers");
  }
  for (const auto& k : attention_schedule) {
    if (k.rope_theta <= 0.0) throw ConfigError("rope theta must be positive");
    if (k.type == AttentionType::local && k.window == 0) throw ConfigError("local window must be positive");
  }
  if (token_dropout < 0.0 || token_dropout >= 1.0 || hidden_dropout < 0.0 || hidden_dropout >= 1.0) {
    throw ConfigError("dropout probabilities must lie in [0, 1)");
  }
}

std::vector<int> tokenize(std::string_view text, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("tokenize: max_len must be at least 1");
  std::vector<int> ids{kClsToken};
  for (char c : text) {
    if (ids.size() >= max_len) break;
    ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  }
  return ids;
}

std::vector<std::size_t> PackedBatch::block_offsets() const {
  std::vector<std::size_t> offsets{0};
  for (std::size_t s = 0; s < n_sequences(); ++s) offsets.push_back(offsets.back() + seq_len(s) * seq_len(s));
  return offsets;
}

std::vector<std::vector<int>> PackedBatch::unpack() const {
  std::vector<std::vector<int>> seqs;
  for (std::size_t s = 0; s < n_sequences(); ++s) {
    seqs.emplace_back(token_ids.begin() + static_cast<std::ptrdiff_t>(cu_seqlens[s]),
                      token_ids.begin() + static_cast<std::ptrdiff_t>(cu_seqlens[s + 1]));
  }
  return seqs;
}

void PackedBatch::validate() const {
  if (cu_seqlens.size() < 2 || cu_seqlens.front() != 0 || cu_seqlens.back() != token_ids.size()) {
    throw ValidationError("packed batch offsets do not cover the token stream");
  }
  for (std::size_t s = 0; s + 1 < cu_seqlens.size(); ++s) {
    if (cu_seqlens[s + 1] <= cu_seqlens[s]) throw ValidationError("packed batch offsets must be strictly increasing");
  }
  if (positions.size() != token_ids.size()) throw ValidationError("packed batch needs one position per token");
  if (labels && labels->size() != n_sequences()) throw ValidationError("packed batch needs one label per sequence");
}

PackedBatch pack_sequences(const std::vector<std::vector<int>>& seqs, std::optional<std::vector<int>> labels) {
  if (seqs.empty()) throw ValidationError("cannot pack an empty batch");
  if (labels && labels->size() != seqs.size()) throw ValidationError("one label per sequence required");
  PackedBatch batch;
  batch.cu_seqlens.push_back(0);
  for (const auto& s : seqs) {
    if (s.empty()) throw ValidationError("cannot pack an empty sequence");
    for (std::size_t p = 0; p < s.size(); ++p) {
      batch.token_ids.push_back(s[p]);
      batch.positions.push_back(p);
    }
    batch.cu_seqlens.push_back(batch.token_ids.size());
  }
  batch.labels = std::move(labels);
  return batch;
}

std::string_view role_name(ParamRole role) {
  switch (role) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::embedding: return "embedding";
    case ParamRole::head: return "head";
  }
  return "weight";
}

ParamRole parse_role(std::string_view name) {
  if (name == "weight") return ParamRole::weight;
  if (name == "bias") return ParamRole::bias;
  if (name == "embedding") return ParamRole::embedding;
  if (name == "head") return ParamRole::head;
  throw ConfigError("unknown parameter role '" + std::string(name) + "'");
}

namespace {

Param normal_param(std::string name, ParamRole role, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return {std::move(name), role, Tensor::from_data(std::move(shape), std::move(values), true)};
}

Param constant_param(std::string name, ParamRole role, Shape shape, double value) {
  return {std::move(name), role, Tensor::full(std::move(shape), value, true)};
}

Norm make_norm(const std::string& prefix, std::size_t width, bool with_bias) {
  Norm n{constant_param(prefix + ".gain", ParamRole::weight, {width}, 1.0), std::nullopt};
  if (with_bias) n.bias = constant_param(prefix + ".bias", ParamRole::bias, {width}, 0.0);
  return n;
}

Norm clone_norm(const Norm& n) {
  Norm out{n.gain.clone(), std::nullopt};
  if (n.bias) out.bias = n.bias->clone();
  return out;
}

EncoderLayer clone_layer(const EncoderLayer& l) {
  return {l.kind,          clone_norm(l.attn_norm), l.w_q.clone(), l.b_q.clone(), l.w_k.clone(), l.b_k.clone(),
          l.w_v.clone(),   l.b_v.clone(),           l.w_o.clone(), l.b_o.clone(), clone_norm(l.ffn_norm),
          l.w_f.clone(),   l.b_f.clone(),           l.w_p.clone(), l.b_p.clone()};
}

template <typename P, typename L>
void visit_layer(L& l, std::vector<P*>& out) {
  out.push_back(&l.attn_norm.gain);
  if (l.attn_norm.bias) out.push_back(&*l.attn_norm.bias);
  for (P* p : {&l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o}) out.push_back(p);
  out.push_back(&l.ffn_norm.gain);
  if (l.ffn_norm.bias) out.push_back(&*l.ffn_norm.bias);
  for (P* p : {&l.w_f, &l.b_f, &l.w_p, &l.b_p}) out.push_back(p);
}

}  // namespace

Encoder::Encoder(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.attention_schedule.empty()) config_.fill_schedule();
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = in_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));

  embedding_ = normal_param("embedding.weight", ParamRole::embedding, {config_.vocab_size, d}, 1.0, rng);
  embedding_norm_ = make_norm("embedding_norm", d, config_.norm_bias);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l);
    EncoderLayer layer{
        config_.attention_schedule[l],
        make_norm(p + ".attn_norm", d, config_.norm_bias),
        normal_param(p + ".attn.w_q", ParamRole::weight, {d, d}, in_std, rng),
        constant_param(p + ".attn.b_q", ParamRole::bias, {d}, 0.0),
        normal_param(p + ".attn.w_k", ParamRole::weight, {d, d}, in_std, rng),
        constant_param(p + ".attn.b_k", ParamRole::bias, {d}, 0.0),
        normal_param(p + ".attn.w_v", ParamRole::weight, {d, d}, in_std, rng),
        constant_param(p + ".attn.b_v", ParamRole::bias, {d}, 0.0),
        normal_param(p + ".attn.w_o", ParamRole::weight, {d, d}, out_std, rng),
        constant_param(p + ".attn.b_o", ParamRole::bias, {d}, 0.0),
        make_norm(p + ".ffn_norm", d, config_.norm_bias),
        normal_param(p + ".ffn.w_f", ParamRole::weight, {d, 2 * ff}, in_std, rng),
        constant_param(p + ".ffn.b_f", ParamRole::bias, {2 * ff}, 0.0),
        normal_param(p + ".ffn.w_p", ParamRole::weight, {ff, d},
                     1.0 / std::sqrt(static_cast<double>(ff) * 2.0 * static_cast<double>(config_.n_layers)), rng),
        constant_param(p + ".ffn.b_p", ParamRole::bias, {d}, 0.0),
    };
    layers_.push_back(std::move(layer));
  }
  final_norm_ = make_norm("final_norm", d, config_.norm_bias);
  head_weight_ = normal_param("head.weight", ParamRole::head, {d, config_.n_classes}, in_std, rng);
  head_bias_ = constant_param("head.bias", ParamRole::head, {config_.n_classes}, 0.0);
}

Encoder Encoder::clone() const {
  std::vector<std::size_t> all(layers_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return select_layers(all);
}

Encoder Encoder::select_layers(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ConfigError("a model needs at least one layer");
  Encoder out;
  out.config_ = config_;
  out.config_.n_layers = indices.size();
  out.config_.attention_schedule.clear();
  out.embedding_ = embedding_.clone();
  out.embedding_norm_ = clone_norm(embedding_norm_);
  for (auto idx : indices) {
    if (idx >= layers_.size()) {
      throw ConfigError("layer index " + std::to_string(idx) + " out of range for a " + std::to_string(layers_.size()) +
                        "-layer model");
    }
    out.layers_.push_back(clone_layer(layers_[idx]));
    out.config_.attention_schedule.push_back(layers_[idx].kind);
  }
  out.final_norm_ = clone_norm(final_norm_);
  out.head_weight_ = head_weight_.clone();
  out.head_bias_ = head_bias_.clone();
  out.rename_layers();
  return out;
}

void Encoder::rename_layers() {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::vector<Param*> ps;
    visit_layer(layers_[l], ps);
    for (Param* p : ps) {
      const auto dot = p->name.find('.', std::string_view("layers.").size());
      p->name = "layers." + std::to_string(l) + p->name.substr(dot);
    }
  }
}

void Encoder::set_dropout(double token_dropout, double hidden_dropout) {
  EncoderConfig c = config_;
  c.token_dropout = token_dropout;
  c.hidden_dropout = hidden_dropout;
  c.validate();
  config_ = std::move(c);
}

std::vector<Param*> Encoder::params() {
  std::vector<Param*> out{&embedding_, &embedding_norm_.gain};
  if (embedding_norm_.bias) out.push_back(&*embedding_norm_.bias);
  for (auto& l : layers_) visit_layer(l, out);
  out.push_back(&final_norm_.gain);
  if (final_norm_.bias) out.push_back(&*final_norm_.bias);
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

std::vector<const Param*> Encoder::params() const {
  auto mut = const_cast<Encoder*>(this)->params();
  return {mut.begin(), mut.end()};
}

Param* Encoder::find_param(std::string_view name) {
  for (Param* p : params())
    if (p->name == name) return p;
  return nullptr;
}

void Encoder::zero_grad() {
  for (Param* p : params()) p->value.clear_grad();
}

Tensor ForwardTrace::cls_hidden(std::size_t layer) const {
  std::vector<std::size_t> rows(batch.cu_seqlens.begin(), batch.cu_seqlens.end() - 1);
  return gather_rows(hidden_states.at(layer), rows);
}

namespace {

Tensor linear(const Tensor& x, const Param& w, const Param& b) { return add_rowvec(matmul(x, w.value), b.value); }

Tensor maybe_dropout(const Tensor& x, double p, std::mt19937_64* rng) {
  return (rng && p > 0.0) ? dropout(x, p, *rng) : x;
}

}  // namespace

AttentionOutput attention_layer(const Tensor& h, const EncoderLayer& layer, const PackedBatch& batch,
                                std::size_t n_heads) {
  const std::size_t dh = h.cols() / n_heads;
  Tensor q = rope_apply(linear(h, layer.w_q, layer.b_q), batch.positions, layer.kind.rope_theta, dh);
  Tensor k = rope_apply(linear(h, layer.w_k, layer.b_k), batch.positions, layer.kind.rope_theta, dh);
  Tensor v = linear(h, layer.w_v, layer.b_v);
  Tensor probs = attention_probs(q, k, batch, layer.kind, n_heads);
  Tensor ctx = attention_context(probs, v, batch, n_heads);
  return {linear(ctx, layer.w_o, layer.b_o), probs};
}

Tensor ffn_geglu(const Tensor& x, const EncoderLayer& layer) {
  Tensor u = linear(x, layer.w_f, layer.b_f);
  const std::size_t ff = u.cols() / 2;
  Tensor gated = multiply(slice_cols(u, 0, ff), gelu(slice_cols(u, ff, 2 * ff)));
  return linear(gated, layer.w_p, layer.b_p);
}

LayerOutput encoder_layer(const Tensor& h, const EncoderLayer& layer, const PackedBatch& batch,
                          const EncoderConfig& config, std::mt19937_64* rng) {
  Tensor normed = layer_norm(h, layer.attn_norm.gain.value, layer.attn_norm.bias_tensor(), config.norm_eps);
  auto [mha, probs] = attention_layer(normed, layer, batch, config.n_heads);
  mha = maybe_dropout(mha, config.hidden_dropout, rng);
  Tensor residual = add(h, mha);
  Tensor m = ffn_geglu(layer_norm(residual, layer.ffn_norm.gain.value, layer.ffn_norm.bias_tensor(), config.norm_eps),
                       layer);
  m = maybe_dropout(m, config.hidden_dropout, rng);
  return {add(residual, m), probs};
}

ForwardTrace forward(const Encoder& model, const PackedBatch& batch, const ForwardOptions& options) {
  batch.validate();
  const auto& cfg = model.config();
  std::vector<std::size_t> ids(batch.token_ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = batch.token_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(id);
  }
  std::mt19937_64 rng(options.seed);
  std::mt19937_64* drop = options.train ? &rng : nullptr;

  ForwardTrace trace;
  trace.batch = batch;
  const auto& en = model.embedding_norm();
  Tensor h = layer_norm(gather_rows(model.embedding().value, ids), en.gain.value, en.bias_tensor(), cfg.norm_eps);
  h = maybe_dropout(h, cfg.token_dropout, drop);
  trace.hidden_states.push_back(h);
  for (const auto& layer : model.layers()) {
    auto out = encoder_layer(h, layer, batch, cfg, drop);
    h = out.hidden;
    trace.hidden_states.push_back(h);
    trace.attention_probs.push_back(out.probs);
    trace.kinds.push_back(layer.kind);
  }
  const auto& fn = model.final_norm();
  Tensor pooled = layer_norm(trace.cls_hidden(cfg.n_layers), fn.gain.value, fn.bias_tensor(), cfg.norm_eps);
  trace.logits = add_rowvec(matmul(pooled, model.head_weight().value), model.head_bias().value);
  return trace;
}

}  // namespace nanonet
