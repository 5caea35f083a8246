#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s2gr/corpus.hpp"
#include "s2gr/numerics/checkpoint.hpp"
#include "s2gr/numerics/ops.hpp"
#include "s2gr/numerics/tape.hpp"
#include "s2gr/rng.hpp"
#include "s2gr/semantics.hpp"
#include "s2gr/tokenizer.hpp"

namespace s2gr::model {

using tok::SemanticId;

enum class TargetEmbeddingSource { kModel, kCodebook };

struct ModelConfig {
  int encoder_layers = 4;
  int decoder_layers = 4;
  int d_model = 128;
  int heads = 4;
  int ffn = 512;
  double dropout = 0.1;
  double tau = 0.07;
  double lambda = 0.1;
  int clusters = 32;  // K', checked against the centroid set at train time
  int max_history = 50;
  std::uint64_t seed = 1;

  bool no_reason = false;
  bool no_think_loss = false;
  TargetEmbeddingSource target_embedding_source = TargetEmbeddingSource::kModel;

  int epochs = 20;
  int batch_size = 256;
  double lr = 1e-3;
  double clip_norm = 1.0;
  int val_users = 256;  // validation HR@10 subset per epoch; 0 disables
  int val_beam = 20;

  void validate() const;
};

// Token ids: PAD 0, BOS 1, code c at level l (0-based) -> 2 + l K + c.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;

template <typename P>
struct Norm {
  P g, b;
};
template <typename P>
struct Attn {
  P wq, bq, wk, bk, wv, bv, wo, bo;
};
template <typename P>
struct Ffn {
  P w1, b1, w2, b2;
};
template <typename P>
struct EncoderLayer {
  Norm<P> ln1;
  Attn<P> attn;
  Norm<P> ln2;
  Ffn<P> ffn;
};
template <typename P>
struct DecoderLayer {
  Norm<P> ln1;
  Attn<P> self;
  Norm<P> ln2;
  Attn<P> cross;
  Norm<P> ln3;
  Ffn<P> ffn;
};
template <typename P>
struct Weights {
  P tok_emb;     // V x d
  P enc_pos;     // max_history L x d, indexed by recency
  P dec_pos;     // (2L + 1) x d
  P think_pos;   // L x d, row l is p_l
  P out_w, out_b;  // d x LK, 1 x LK
  std::vector<EncoderLayer<P>> enc;
  Norm<P> enc_norm;
  std::vector<DecoderLayer<P>> dec;
  Norm<P> dec_norm;
  DecoderLayer<P> psi;
  Norm<P> psi_norm;
};

using Var = nx::Var<float>;
using Bound = Weights<Var>;

// Encoder output for a batch, padded to the longest history.
struct Encoded {
  Var h;                     // (batch * len) x d
  int batch = 0;
  int len = 0;               // padded positions per sample
  std::vector<int> key_len;  // valid positions per sample
};

// Cross-attention keys and values per decoder layer, computed once per batch.
struct CrossKV {
  std::vector<Var> k, v;
  int len = 0;
  std::vector<int> key_len;
};

// Self-attention cache: per layer, rows ordered (sample, position).
struct SelfKV {
  std::vector<Var> k, v;
  int len = 0;
};

struct DecoderTrace {
  std::vector<Var> think;   // per level, batch x d; empty with no_reason
  std::vector<Var> logits;  // per level, batch x K
  int decoder_input_len = 0;
};

struct LossBreakdown {
  double rec = 0;
  std::vector<double> align;
  double infonce = 0;
  double reg = 0;
  double think = 0;
  double total = 0;
  Var total_var;
};

class S2GRModel {
 public:
  S2GRModel() = default;
  S2GRModel(const ModelConfig& cfg, int levels, int codebook_size, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  int levels() const { return levels_; }
  int codebook_size() const { return k_; }
  int vocab_size() const { return 2 + levels_ * k_; }
  int token_id(int level, int code) const { return 2 + level * k_ + code; }
  nx::ParameterStore<float>& params() { return store_; }
  const nx::ParameterStore<float>& params() const { return store_; }
  const nx::Tensor<float>& token_embeddings() const { return w_.tok_emb->value; }

  Bound bind(nx::Tape<float>& tape) const;

  /// All histories must be nonempty; each is truncated to the most recent
  /// max_history items.
  Encoded encode_history(const Bound& w, const std::vector<std::vector<SemanticId>>& histories, bool train,
                         Rng* rng) const;
  CrossKV cross_kv(const Bound& w, const Encoded& enc) const;

  /// Runs the decoder stack over `x` (batch * q_len rows, ordered by sample)
  /// appended after `cache`; grows the cache and returns final-norm hidden
  /// states. `kv_index[b]` selects the encoder sample for query block b.
  Var decoder_step(const Bound& w, const Var& x, int batch, int q_len, SelfKV& cache, const CrossKV& cross,
                   std::span<const int> kv_index, bool train, Rng* rng) const;

  /// Teacher-forced decoding. Full mode interleaves thinking tokens and
  /// recomputes the prefix from scratch at each of the 2L passes.
  DecoderTrace stepwise_decode_train(const Bound& w, const CrossKV& cross, std::span<const SemanticId> targets,
                                     bool train, Rng* rng) const;
  /// Same trace computed with the incremental cache (one new position per pass).
  DecoderTrace stepwise_decode_incremental(const Bound& w, const CrossKV& cross,
                                           std::span<const SemanticId> targets) const;

  Var global_decode(const Bound& w, const CrossKV& cross, bool train, Rng* rng) const;
  Var target_item_embedding(const Bound& w, std::span<const SemanticId> targets) const;

  Var input_embedding(const Bound& w, std::span<const int> token_ids, int slot) const;
  Var level_logits(const Bound& w, const Var& h, int level) const;
  Var think_token(const Bound& w, const Var& h, int level) const;
  Var bos_inputs(const Bound& w, int batch) const;

  nx::Checkpoint to_checkpoint() const;
  static S2GRModel from_checkpoint(const nx::Checkpoint& ckpt);

 private:
  void build(Rng* rng);

  ModelConfig cfg_;
  int levels_ = 0;
  int k_ = 0;
  nx::ParameterStore<float> store_;
  Weights<nx::Parameter<float>*> w_;
};

// -log softmax over K' of cos(t, C_k) / tau at the true cluster; batch mean.
template <typename T>
nx::Var<T> align_loss(const nx::Var<T>& t, const nx::Tensor<T>& centroids, std::span<const int> clusters,
                      double tau);
// In-batch InfoNCE over cos(v_g^i, vbar^j) / tau; mean over i.
template <typename T>
nx::Var<T> infonce_loss(const nx::Var<T>& vg, const nx::Var<T>& vbar, double tau);
// 1 - mean cos(t_1, sg(v_g)).
template <typename T>
nx::Var<T> reg_loss(const nx::Var<T>& t1, const nx::Var<T>& vg);
// Sum over levels of the batch-mean cross-entropy.
template <typename T>
nx::Var<T> rec_loss(std::span<const nx::Var<T>> logits, const std::vector<std::vector<int>>& targets);

// Per-level precomputed alignment targets.
struct AlignContext {
  std::vector<nx::Tensor<float>> centroids;  // per level, K' x d
  std::vector<std::vector<int>> code_cluster;
  const std::vector<nx::Tensor<float>>* codebooks = nullptr;  // for kCodebook

  static AlignContext from(const sem::CentroidSet& set);
};

LossBreakdown total_loss(const S2GRModel& model, const Bound& w, const CrossKV& cross,
                         std::span<const SemanticId> targets, const AlignContext& ctx, bool train, Rng* rng,
                         DecoderTrace* trace_out = nullptr);

struct EpochLog {
  int epoch = 0;
  double loss_total = 0;
  double loss_rec = 0;
  double loss_think = 0;
  double val_hr10 = 0;
};
std::string format_epoch_log(const EpochLog& e);

struct TrainInputs {
  const corpus::SplitDataset* data = nullptr;
  const tok::SidTable* table = nullptr;
  const sem::CentroidSet* centroids = nullptr;
  const std::vector<nx::Tensor<float>>* codebooks = nullptr;  // tokenizer codebooks, for kCodebook
};

// Validation HR@10 callback; evaluated at the end of each epoch when set.
using Validator = std::function<double(const S2GRModel&)>;

struct TrainReport {
  std::vector<EpochLog> epochs;
};

/// Mini-batch Adam on total_loss over every (history, next item) prefix of the
/// training sequences. On a non-finite loss the model is restored to its last
/// good parameters and NumericalError is thrown.
TrainReport train_model(S2GRModel& model, const TrainInputs& in, const Validator& validate = {},
                        const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace s2gr::model
