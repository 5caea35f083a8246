#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "s2gr/numerics/checkpoint.hpp"
#include "s2gr/numerics/tape.hpp"
#include "s2gr/rng.hpp"

namespace s2gr::tok {

struct QuantizerConfig {
  int levels = 3;
  int codebook_size = 256;
  int latent_dim = 128;
  std::vector<int> hidden{512, 256};  // encoder widths; the decoder mirrors them

  double w_quant = 1.0;
  double w_uniform = 0.1;
  double uniform_percentile = 10.0;  // q, percentile of within-level pairwise distances giving delta
  double uniform_mu = 1.0;

  bool balance = true;
  double delta_max = 0.5;
  double balance_eps = 1e-6;
  double usage_decay = 0.99;
  bool assign_with_balance = false;

  bool kmeans_init = false;  // seed codebooks by residual k-means on initial latents
  int epochs = 30;
  int batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 1;

  void validate() const;
};

using SemanticId = std::vector<int>;

// Forward item -> SID map plus its reverse multimap (items ascending).
class SidTable {
 public:
  SidTable() = default;
  SidTable(int levels, int codebook_size, std::vector<SemanticId> codes);

  int levels() const { return levels_; }
  int codebook_size() const { return codebook_size_; }
  int num_items() const { return static_cast<int>(codes_.size()); }
  const SemanticId& sid(int item) const { return codes_.at(static_cast<std::size_t>(item)); }
  const std::vector<SemanticId>& codes() const { return codes_; }
  // Items carrying `sid`; empty when none.
  const std::vector<int>& items(const SemanticId& sid) const;
  bool contains(const SemanticId& sid) const { return reverse_.count(key(sid)) > 0; }
  std::size_t distinct() const { return reverse_.size(); }
  const std::map<std::uint64_t, std::vector<int>>& reverse() const { return reverse_; }
  std::uint64_t key(const SemanticId& sid) const;

  friend bool operator==(const SidTable& a, const SidTable& b) {
    return a.levels_ == b.levels_ && a.codebook_size_ == b.codebook_size_ && a.codes_ == b.codes_;
  }

 private:
  int levels_ = 0;
  int codebook_size_ = 0;
  std::vector<SemanticId> codes_;
  std::map<std::uint64_t, std::vector<int>> reverse_;
};

// `item_id \t c1 \t ... \t cL`
void write_sid_table(const std::filesystem::path& path, const SidTable& table);
SidTable read_sid_table(const std::filesystem::path& path, int codebook_size);

struct CurIcr {
  double cur = 0;
  double icr = 0;
};
/// CUR = distinct SIDs / K^L; ICR = items whose SID no other item shares / N.
CurIcr compute_cur_icr(const SidTable& table, int levels, int codebook_size);
std::string format_metrics(const CurIcr& m, const SidTable& table);

/// f_k = clip((u_mean - u_k) / (u_mean + eps), -delta_max, delta_max);
/// returns d_k (1 - f_k).
std::vector<double> balance_adjust(std::span<const double> d, std::span<const double> usage, double delta_max,
                                   double eps);

struct LevelChoice {
  int code = 0;
  std::vector<double> residual;
};
/// Nearest codeword to r_prev by squared distance (balance-adjusted when
/// `usage` is non-empty); ties go to the lowest index.
LevelChoice quantize_level(std::span<const double> r_prev, const nx::Tensor<double>& codebook,
                           std::span<const double> usage = {}, double delta_max = 0.5, double eps = 1e-6);

template <typename T>
struct QuantizerVars {
  std::vector<nx::Var<T>> enc;  // W0, b0, W1, b1, ...
  std::vector<nx::Var<T>> dec;
  std::vector<nx::Var<T>> codebooks;  // per level, K x d_z
};

// Linear layers with ReLU between them (none after the last).
template <typename T>
nx::Var<T> mlp(std::span<const nx::Var<T>> layers, const nx::Var<T>& x);

struct Selection {
  const nx::Tensor<double>* usage = nullptr;  // L x K; null selects by raw distance
  double delta_max = 0.5;
  double eps = 1e-6;
};

template <typename T>
struct VaeForward {
  nx::Var<T> z;
  nx::Var<T> z_hat;  // straight-through: value sum of codewords, gradient to z
  nx::Var<T> x_hat;
  nx::Var<T> recon;  // mean over rows of |x - x_hat|^2
  nx::Var<T> quant;  // sum over levels of row-mean |r - sg(e)|^2 + |e - sg(r)|^2
  std::vector<std::vector<int>> codes;  // [level][row]
};

template <typename T>
VaeForward<T> vae_forward(const QuantizerVars<T>& vars, const nx::Var<T>& x, const Selection& sel = {});

/// log(1 + sum over pairs i<j with |e_i - e_j|^2 <= delta of exp(-mu D_ij)).
template <typename T>
nx::Var<T> uniform_loss(const nx::Var<T>& codebook, double delta, double mu);

/// Nearest-rank q-th percentile of the K(K-1)/2 within-codebook squared distances.
double pairwise_percentile(const nx::Tensor<double>& codebook, double q);
/// Number of pairs i<j with squared distance <= delta.
long count_close_pairs(const nx::Tensor<double>& codebook, double delta);

struct EpochStats {
  double recon = 0;
  double quant = 0;
  double uniform = 0;
};

template <typename T>
class QuantizerModel {
 public:
  QuantizerModel() = default;
  QuantizerModel(int input_dim, const QuantizerConfig& cfg, Rng& rng);

  const QuantizerConfig& config() const { return cfg_; }
  int input_dim() const { return input_dim_; }
  nx::ParameterStore<T>& params() { return store_; }
  const nx::ParameterStore<T>& params() const { return store_; }
  nx::Tensor<T>& codebook(int level);
  const nx::Tensor<T>& codebook(int level) const;
  std::vector<nx::Parameter<T>*> encoder_params() const { return enc_; }

  nx::Tensor<double>& usage() { return usage_; }
  const nx::Tensor<double>& usage() const { return usage_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  QuantizerVars<T> bind(nx::Tape<T>& tape);
  nx::Tensor<T> encode(const nx::Tensor<T>& x) const;
  /// Codes per item (rows x L) of already-encoded latents.
  std::vector<SemanticId> quantize(const nx::Tensor<T>& z, bool with_balance) const;

  nx::Checkpoint to_checkpoint() const;
  static QuantizerModel from_checkpoint(const nx::Checkpoint& ckpt);

 private:
  void build(int input_dim, Rng* rng);

  QuantizerConfig cfg_;
  int input_dim_ = 0;
  nx::ParameterStore<T> store_;
  std::vector<nx::Parameter<T>*> enc_, dec_, books_;
  nx::Tensor<double> usage_;
  bool frozen_ = false;
};

using Quantizer = QuantizerModel<float>;

struct TrainResult {
  std::vector<EpochStats> epochs;
  double initial_recon = 0;
};

/// Adam over L_recon + w_quant L_quant + w_uniform sum_l L_uniform. Throws
/// NumericalError on a non-finite loss.
TrainResult train_tokenizer(Quantizer& model, const nx::Tensor<float>& h, const QuantizerConfig& cfg);

/// Encode every row then quantize with raw distances (or the frozen usage
/// bias when config().assign_with_balance).
SidTable assign_sids(const Quantizer& model, const nx::Tensor<float>& h);

struct RqKMeansResult {
  SidTable table;
  std::vector<nx::Tensor<double>> codebooks;
};
/// Level-wise k-means on residuals. Throws ConfigError if rows < K.
RqKMeansResult rq_kmeans(const nx::Tensor<double>& h, int levels, int codebook_size, std::uint64_t seed);

/// Shannon entropy (nats) of one level's code distribution and the largest
/// single-codeword share.
struct UsageStats {
  double entropy = 0;
  double max_share = 0;
};
UsageStats usage_stats(const SidTable& table, int level);

}  // namespace s2gr::tok
