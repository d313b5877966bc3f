#pragma once

// Miniature encoder-only transformer over packed (unpadded) batches.
//
// Layer l computes, with pre-normalization,
//   MHA = Attn(norm1(H)),  m = GeGLU-FFN(norm2(H + MHA)),  H' = H + MHA + m
// where every projection carries a bias. Attention runs per sequence inside
// the packed stream, so tokens never see another sequence or any padding.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nanonet/tensor.hpp"

namespace nanonet {

inline constexpr int kClsToken = 256;
inline constexpr int kUnknownToken = 257;
inline constexpr std::size_t kByteVocabSize = 258;

inline constexpr double kGlobalRopeTheta = 160000.0;
inline constexpr double kLocalRopeTheta = 10000.0;
inline constexpr std::size_t kLocalWindow = 128;

enum class AttentionType { global, local };

struct AttentionKind {
  AttentionType type = AttentionType::global;
  // Tokens i and j of one sequence see each other iff |pos_i - pos_j| < window.
  std::size_t window = kLocalWindow;
  double rope_theta = kGlobalRopeTheta;

  static AttentionKind global(double theta = kGlobalRopeTheta);
  static AttentionKind local(std::size_t window = kLocalWindow, double theta = kLocalRopeTheta);

  bool allows(std::size_t pos_i, std::size_t pos_j) const;
  bool operator==(const AttentionKind&) const = default;
};

// Global attention at layer indices divisible by `global_every`, local elsewhere.
std::vector<AttentionKind> make_schedule(std::size_t n_layers, std::size_t global_every,
                                         const AttentionKind& global = AttentionKind::global(),
                                         const AttentionKind& local = AttentionKind::local());

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t d_ff = 16;
  std::size_t vocab_size = kByteVocabSize;
  std::size_t n_classes = 2;
  std::size_t global_every = 3;
  std::vector<AttentionKind> attention_schedule;
  double token_dropout = 0.0;
  double hidden_dropout = 0.0;
  bool norm_bias = false;
  double norm_eps = 1e-5;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }
  // Regenerates attention_schedule from global_every.
  void fill_schedule(std::size_t local_window = kLocalWindow, double global_theta = kGlobalRopeTheta,
                     double local_theta = kLocalRopeTheta);
  void validate() const;
};

// ---- tokenization and packing ----------------------------------------------

// Byte-level ids with a leading CLS, truncated to max_len.
std::vector<int> tokenize(std::string_view text, std::size_t max_len);

struct PackedBatch {
  std::vector<int> token_ids;
  std::vector<std::size_t> cu_seqlens;
  std::vector<std::size_t> positions;
  std::optional<std::vector<int>> labels;

  std::size_t n_sequences() const { return cu_seqlens.empty() ? 0 : cu_seqlens.size() - 1; }
  std::size_t total_tokens() const { return token_ids.size(); }
  std::size_t seq_begin(std::size_t s) const { return cu_seqlens[s]; }
  std::size_t seq_len(std::size_t s) const { return cu_seqlens[s + 1] - cu_seqlens[s]; }
  // Offset of sequence s's len×len block inside a packed attention map.
  std::vector<std::size_t> block_offsets() const;
  std::vector<std::vector<int>> unpack() const;
  void validate() const;
};

PackedBatch pack_sequences(const std::vector<std::vector<int>>& seqs,
                           std::optional<std::vector<int>> labels = std::nullopt);

// Dense additive mask: 0 where attention is allowed, -inf elsewhere.
Tensor build_mask(const PackedBatch& batch, const AttentionKind& kind);

// ---- attention primitives ---------------------------------------------------

// Rotates each (x_2i, x_2i+1) pair inside every head_dim-wide column group by
// p·theta^(-2i/head_dim). head_dim == 0 means one group spanning all columns.
Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double theta, std::size_t head_dim = 0);

// Post-softmax attention probabilities for all heads, stored block-packed:
// row h holds, sequence after sequence, each len×len block row-major.
// Disallowed pairs inside a block are exactly 0.
Tensor attention_probs(const Tensor& q, const Tensor& k, const PackedBatch& batch, const AttentionKind& kind,
                       std::size_t n_heads);

// Per-head probs·V, heads concatenated along columns.
Tensor attention_context(const Tensor& probs, const Tensor& v, const PackedBatch& batch, std::size_t n_heads);

// Expands one head of a block-packed map into a dense T×T matrix.
Tensor expand_attention(const Tensor& probs, const PackedBatch& batch, std::size_t head);

// ---- model --------------------------------------------------------------------

enum class ParamRole { weight, bias, embedding, head };

std::string_view role_name(ParamRole role);
ParamRole parse_role(std::string_view name);

struct Param {
  std::string name;
  ParamRole role = ParamRole::weight;
  Tensor value;

  bool trainable() const { return value.requires_grad(); }
  Param clone() const { return {name, role, value.clone()}; }
};

struct Norm {
  Param gain;
  std::optional<Param> bias;

  Tensor bias_tensor() const { return bias ? bias->value : Tensor(); }
};

struct EncoderLayer {
  AttentionKind kind;
  Norm attn_norm;
  Param w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Norm ffn_norm;
  // w_f projects d_model -> 2·d_ff: columns [0, d_ff) are the value half,
  // [d_ff, 2·d_ff) the GELU gate half.
  Param w_f, b_f, w_p, b_p;
};

class Encoder {
 public:
  // Random initialization, deterministic in seed. All parameters trainable.
  Encoder(EncoderConfig config, std::uint64_t seed);

  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  Encoder clone() const;
  // Deep copy keeping only the given layers (in order), each with its own
  // attention kind; embeddings, norms and head are copied as well.
  Encoder select_layers(std::span<const std::size_t> indices) const;

  const EncoderConfig& config() const { return config_; }
  void set_dropout(double token_dropout, double hidden_dropout);

  Param& embedding() { return embedding_; }
  const Param& embedding() const { return embedding_; }
  Norm& embedding_norm() { return embedding_norm_; }
  const Norm& embedding_norm() const { return embedding_norm_; }
  std::vector<EncoderLayer>& layers() { return layers_; }
  const std::vector<EncoderLayer>& layers() const { return layers_; }
  Norm& final_norm() { return final_norm_; }
  const Norm& final_norm() const { return final_norm_; }
  Param& head_weight() { return head_weight_; }
  const Param& head_weight() const { return head_weight_; }
  Param& head_bias() { return head_bias_; }
  const Param& head_bias() const { return head_bias_; }

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  Param* find_param(std::string_view name);

  void zero_grad();

 private:
  Encoder() = default;
  void rename_layers();

  EncoderConfig config_;
  Param embedding_;
  Norm embedding_norm_;
  std::vector<EncoderLayer> layers_;
  Norm final_norm_;
  Param head_weight_, head_bias_;
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
};

struct ForwardTrace {
  // H^0 (embedding output) through H^L.
  std::vector<Tensor> hidden_states;
  // One block-packed [n_heads × Σ len²] map per layer; see attention_probs.
  std::vector<Tensor> attention_probs;
  // Attention kind of each layer, parallel to attention_probs.
  std::vector<AttentionKind> kinds;
  // [n_sequences × n_classes]
  Tensor logits;
  PackedBatch batch;

  // CLS rows of hidden_states[layer], one per sequence.
  Tensor cls_hidden(std::size_t layer) const;
};

struct AttentionOutput {
  Tensor output;
  Tensor probs;
};

// Biased Q/K/V projections, RoPE with the kind's theta, masked scaled dot
// product attention, concatenated heads, output projection.
AttentionOutput attention_layer(const Tensor& h, const EncoderLayer& layer, const PackedBatch& batch,
                                std::size_t n_heads);

// W_p · (value ⊙ gelu(gate)) + b_p with (value, gate) = split(W_f · x + b_f).
Tensor ffn_geglu(const Tensor& x, const EncoderLayer& layer);

struct LayerOutput {
  Tensor hidden;
  Tensor probs;
};

// rng == nullptr disables dropout.
LayerOutput encoder_layer(const Tensor& h, const EncoderLayer& layer, const PackedBatch& batch,
                          const EncoderConfig& config, std::mt19937_64* rng);

ForwardTrace forward(const Encoder& model, const PackedBatch& batch, const ForwardOptions& options = {});

}  // namespace nanonet
