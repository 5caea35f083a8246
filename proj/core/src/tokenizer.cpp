#include "s2gr/tokenizer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"
#include "s2gr/kmeans.hpp"
#include "s2gr/numerics/adam.hpp"
#include "s2gr/numerics/ops.hpp"

namespace s2gr::tok {

using nx::Tensor;
using nx::Var;

void QuantizerConfig::validate() const {
  if (levels < 1) throw ConfigError("tokenizer.levels must be >= 1");
  if (codebook_size < 2) throw ConfigError("tokenizer.codebook_size must be >= 2");
  if (latent_dim < 1) throw ConfigError("tokenizer.latent_dim must be >= 1");
  for (int h : hidden)
    if (h < 1) throw ConfigError("tokenizer.hidden widths must be >= 1");
  if (!(delta_max >= 0.0 && delta_max < 1.0)) throw ConfigError("tokenizer.delta_max must be in [0, 1)");
  if (!(balance_eps > 0.0)) throw ConfigError("tokenizer.balance_eps must be > 0");
  if (!(usage_decay >= 0.0 && usage_decay < 1.0)) throw ConfigError("tokenizer.usage_decay must be in [0, 1)");
  if (!(uniform_mu > 0.0)) throw ConfigError("tokenizer.uniform_mu must be > 0");
  if (!(uniform_percentile >= 0.0 && uniform_percentile <= 100.0))
    throw ConfigError("tokenizer.uniform_percentile must be in [0, 100]");
  if (w_uniform < 0.0 || w_quant < 0.0) throw ConfigError("tokenizer loss weights must be >= 0");
  if (epochs < 0) throw ConfigError("tokenizer.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("tokenizer.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("tokenizer.lr must be > 0");
  if (std::pow(static_cast<double>(codebook_size), levels) > 1.8e19)
    throw ConfigError("tokenizer: K^L does not fit a 64-bit SID key");
}

// ---- SidTable -------------------------------------------------------------

namespace {
const std::vector<int> kNoItems;
}

SidTable::SidTable(int levels, int codebook_size, std::vector<SemanticId> codes)
    : levels_(levels), codebook_size_(codebook_size), codes_(std::move(codes)) {
  for (std::size_t i = 0; i < codes_.size(); ++i) {
    if (static_cast<int>(codes_[i].size()) != levels_)
      throw ShapeError(fmt::format("SID of item {} has {} codes, expected {}", i, codes_[i].size(), levels_));
    for (int c : codes_[i])
      if (c < 0 || c >= codebook_size_) throw IndexError(fmt::format("SID code {} of item {} out of range", c, i));
    reverse_[key(codes_[i])].push_back(static_cast<int>(i));
  }
}

std::uint64_t SidTable::key(const SemanticId& sid) const {
  std::uint64_t k = 0;
  for (int c : sid) k = k * static_cast<std::uint64_t>(codebook_size_) + static_cast<std::uint64_t>(c);
  return k;
}

const std::vector<int>& SidTable::items(const SemanticId& sid) const {
  if (static_cast<int>(sid.size()) != levels_) return kNoItems;
  for (int c : sid)
    if (c < 0 || c >= codebook_size_) return kNoItems;
  auto it = reverse_.find(key(sid));
  return it == reverse_.end() ? kNoItems : it->second;
}

void write_sid_table(const std::filesystem::path& path, const SidTable& table) {
  std::string out;
  for (int i = 0; i < table.num_items(); ++i) {
    out += std::to_string(i);
    for (int c : table.sid(i)) {
      out += '\t';
      out += std::to_string(c);
    }
    out += '\n';
  }
  io::write_text(path, out);
}

SidTable read_sid_table(const std::filesystem::path& path, int codebook_size) {
  std::istringstream in(io::read_text(path));
  std::string line;
  long line_no = 0;
  int levels = -1;
  std::vector<SemanticId> codes;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    if (levels < 0) levels = static_cast<int>(f.size()) - 1;
    if (levels < 1 || static_cast<int>(f.size()) != levels + 1) throw ParseError("malformed SID row", line_no);
    std::vector<int> row;
    for (auto field : f) {
      field = io::trim(field);
      int v = 0;
      auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || p != field.data() + field.size()) throw ParseError("non-integer SID field", line_no);
      row.push_back(v);
    }
    if (row[0] != static_cast<int>(codes.size())) throw ParseError("SID rows must be in item order", line_no);
    codes.emplace_back(row.begin() + 1, row.end());
  }
  if (codes.empty()) throw ParseError("SID table is empty: " + path.string());
  return SidTable(levels, codebook_size, std::move(codes));
}

CurIcr compute_cur_icr(const SidTable& table, int levels, int codebook_size) {
  CurIcr m;
  if (table.num_items() == 0) return m;
  m.cur = static_cast<double>(table.distinct()) / std::pow(static_cast<double>(codebook_size), levels);
  long unique = 0;
  for (const auto& [k, items] : table.reverse())
    if (items.size() == 1) ++unique;
  m.icr = static_cast<double>(unique) / table.num_items();
  return m;
}

std::string format_metrics(const CurIcr& m, const SidTable& table) {
  return fmt::format(
      "items: {}\nlevels: {}\ncodebook_size: {}\ndistinct_sids: {}\ncur_percent: {:.6f}\nicr_percent: {:.4f}\n"
      "CUR={:.9g}\nICR={:.9g}\n",
      table.num_items(), table.levels(), table.codebook_size(), table.distinct(), 100 * m.cur, 100 * m.icr, m.cur,
      m.icr);
}

UsageStats usage_stats(const SidTable& table, int level) {
  std::vector<long> counts(static_cast<std::size_t>(table.codebook_size()), 0);
  for (const auto& s : table.codes()) ++counts[static_cast<std::size_t>(s.at(static_cast<std::size_t>(level)))];
  UsageStats st;
  const double n = table.num_items();
  for (long c : counts) {
    if (c == 0) continue;
    const double p = c / n;
    st.entropy -= p * std::log(p);
    st.max_share = std::max(st.max_share, p);
  }
  return st;
}

// ---- selection ------------------------------------------------------------

std::vector<double> balance_adjust(std::span<const double> d, std::span<const double> usage, double delta_max,
                                   double eps) {
  if (d.size() != usage.size()) throw ShapeError("balance_adjust: distance and usage sizes differ");
  const double u_mean = std::accumulate(usage.begin(), usage.end(), 0.0) / static_cast<double>(usage.size());
  std::vector<double> out(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) {
    const double f = std::clamp((u_mean - usage[k]) / (u_mean + eps), -delta_max, delta_max);
    out[k] = d[k] * (1.0 - f);
  }
  return out;
}

namespace {

template <typename V>
int select_code(const double* r, const V* book, std::size_t k, std::size_t dim, std::span<const double> usage,
                double delta_max, double eps, std::vector<double>& scratch) {
  scratch.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0;
    const V* e = book + j * dim;
    for (std::size_t c = 0; c < dim; ++c) {
      const double diff = r[c] - static_cast<double>(e[c]);
      s += diff * diff;
    }
    scratch[j] = s;
  }
  if (!usage.empty()) scratch = balance_adjust(scratch, usage, delta_max, eps);
  return static_cast<int>(std::min_element(scratch.begin(), scratch.end()) - scratch.begin());
}

}  // namespace

LevelChoice quantize_level(std::span<const double> r_prev, const Tensor<double>& codebook,
                           std::span<const double> usage, double delta_max, double eps) {
  if (r_prev.size() != codebook.cols())
    throw ShapeError(fmt::format("quantize_level: residual dim {} vs codebook {}", r_prev.size(), codebook.shape_str()));
  if (!usage.empty() && usage.size() != codebook.rows()) throw ShapeError("quantize_level: usage size mismatch");
  std::vector<double> scratch;
  LevelChoice out;
  out.code = select_code(r_prev.data(), codebook.data.data(), codebook.rows(), codebook.cols(), usage, delta_max,
                         eps, scratch);
  out.residual.assign(r_prev.begin(), r_prev.end());
  const auto e = codebook.row(static_cast<std::size_t>(out.code));
  for (std::size_t c = 0; c < out.residual.size(); ++c) out.residual[c] -= e[c];
  return out;
}

// ---- differentiable pieces ------------------------------------------------

template <typename T>
Var<T> mlp(std::span<const Var<T>> layers, const Var<T>& x) {
  if (layers.size() % 2 != 0 || layers.empty()) throw ShapeError("mlp: expected (W, b) pairs");
  Var<T> h = x;
  for (std::size_t i = 0; i < layers.size(); i += 2) {
    h = nx::linear(h, layers[i], layers[i + 1]);
    if (i + 2 < layers.size()) h = nx::relu(h);
  }
  return h;
}

template <typename T>
VaeForward<T> vae_forward(const QuantizerVars<T>& vars, const Var<T>& x, const Selection& sel) {
  VaeForward<T> out;
  out.z = mlp<T>(vars.enc, x);
  const std::size_t rows = out.z.rows(), dim = out.z.cols();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Var<T> r = out.z;
  Var<T> e_sum;
  std::vector<double> row_buf(dim), scratch;
  for (std::size_t l = 0; l < vars.codebooks.size(); ++l) {
    const Tensor<T>& book = vars.codebooks[l].value();
    if (book.cols() != dim) throw ShapeError("vae_forward: codebook width differs from latent dim");
    std::span<const double> usage;
    if (sel.usage != nullptr) usage = sel.usage->row(l);
    std::vector<int> codes(rows);
    const Tensor<T>& rv = r.value();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < dim; ++c) row_buf[c] = static_cast<double>(rv.data[i * dim + c]);
      codes[i] = select_code(row_buf.data(), book.data.data(), book.rows(), dim, usage, sel.delta_max, sel.eps, scratch);
    }
    Var<T> e = nx::gather_rows(vars.codebooks[l], std::span<const int>(codes));
    Var<T> commit = nx::sub(r, nx::stop_gradient(e));
    Var<T> pull = nx::sub(e, nx::stop_gradient(r));
    Var<T> term = nx::scale(nx::add(nx::sum(nx::mul(commit, commit)), nx::sum(nx::mul(pull, pull))), inv_rows);
    out.quant = out.quant.valid() ? nx::add(out.quant, term) : term;
    Var<T> e_fixed = nx::stop_gradient(e);
    r = nx::sub(r, e_fixed);
    e_sum = e_sum.valid() ? nx::add(e_sum, e_fixed) : e_fixed;
    out.codes.push_back(std::move(codes));
  }
  out.z_hat = nx::add(out.z, nx::stop_gradient(nx::sub(e_sum, out.z)));
  out.x_hat = mlp<T>(vars.dec, out.z_hat);
  Var<T> diff = nx::sub(x, out.x_hat);
  out.recon = nx::scale(nx::sum(nx::mul(diff, diff)), inv_rows);
  return out;
}

template <typename T>
Var<T> uniform_loss(const Var<T>& codebook, double delta, double mu) {
  Var<T> d = nx::pairwise_sq_dist(codebook);
  const std::size_t k = codebook.rows();
  Tensor<T> mask(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j)
      if (static_cast<double>(d.value()(i, j)) <= delta) mask(i, j) = T(1);
  Var<T> s = nx::sum(nx::mul(nx::exp(nx::scale(d, -mu)), d.tape()->constant(std::move(mask))));
  return nx::log(nx::add_scalar(s, 1.0));
}

double pairwise_percentile(const Tensor<double>& codebook, double q) {
  const std::size_t k = codebook.rows(), dim = codebook.cols();
  std::vector<double> v;
  v.reserve(k * (k - 1) / 2);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = codebook.data[i * dim + c] - codebook.data[j * dim + c];
        s += diff * diff;
      }
      v.push_back(s);
    }
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

long count_close_pairs(const Tensor<double>& codebook, double delta) {
  const std::size_t k = codebook.rows(), dim = codebook.cols();
  long n = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = codebook.data[i * dim + c] - codebook.data[j * dim + c];
        s += diff * diff;
      }
      n += s <= delta;
    }
  return n;
}

// ---- model ----------------------------------------------------------------

template <typename T>
QuantizerModel<T>::QuantizerModel(int input_dim, const QuantizerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  build(input_dim, &rng);
}

template <typename T>
void QuantizerModel<T>::build(int input_dim, Rng* rng) {
  if (input_dim < 1) throw ConfigError("tokenizer: input dim must be >= 1");
  input_dim_ = input_dim;
  auto layer = [&](const std::string& prefix, std::size_t i, int in, int out, bool relu_after) {
    Tensor<T> w(static_cast<std::size_t>(in), static_cast<std::size_t>(out));
    if (rng != nullptr) {
      const double sd = std::sqrt((relu_after ? 2.0 : 1.0) / in);
      for (auto& v : w.data) v = static_cast<T>(rng->normal(0.0, sd));
    }
    auto& pw = store_.add(fmt::format("{}.{}.w", prefix, i), std::move(w));
    auto& pb = store_.add(fmt::format("{}.{}.b", prefix, i), Tensor<T>(1, static_cast<std::size_t>(out)));
    return std::pair{&pw, &pb};
  };
  std::vector<int> widths{input_dim};
  widths.insert(widths.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  widths.push_back(cfg_.latent_dim);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    auto [w, b] = layer("enc", i, widths[i], widths[i + 1], i + 2 < widths.size());
    enc_.push_back(w);
    enc_.push_back(b);
  }
  std::reverse(widths.begin(), widths.end());
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    auto [w, b] = layer("dec", i, widths[i], widths[i + 1], i + 2 < widths.size());
    dec_.push_back(w);
    dec_.push_back(b);
  }
  for (int l = 0; l < cfg_.levels; ++l) {
    Tensor<T> book(static_cast<std::size_t>(cfg_.codebook_size), static_cast<std::size_t>(cfg_.latent_dim));
    if (rng != nullptr)
      for (auto& v : book.data) v = static_cast<T>(rng->normal(0.0, 1.0 / std::sqrt(cfg_.latent_dim)));
    books_.push_back(&store_.add(fmt::format("codebook.{}", l), std::move(book)));
  }
  usage_ = Tensor<double>(static_cast<std::size_t>(cfg_.levels), static_cast<std::size_t>(cfg_.codebook_size));
}

template <typename T>
Tensor<T>& QuantizerModel<T>::codebook(int level) {
  return books_.at(static_cast<std::size_t>(level))->value;
}

template <typename T>
const Tensor<T>& QuantizerModel<T>::codebook(int level) const {
  return books_.at(static_cast<std::size_t>(level))->value;
}

template <typename T>
QuantizerVars<T> QuantizerModel<T>::bind(nx::Tape<T>& tape) {
  QuantizerVars<T> v;
  for (auto* p : enc_) v.enc.push_back(tape.param(*p));
  for (auto* p : dec_) v.dec.push_back(tape.param(*p));
  for (auto* p : books_) v.codebooks.push_back(tape.param(*p));
  return v;
}

template <typename T>
Tensor<T> QuantizerModel<T>::encode(const Tensor<T>& x) const {
  if (x.cols() != static_cast<std::size_t>(input_dim_))
    throw ShapeError(fmt::format("encode: input has {} columns, model expects {}", x.cols(), input_dim_));
  nx::Tape<T> tape(false);
  std::vector<Var<T>> layers;
  for (auto* p : enc_) layers.push_back(tape.constant(p->value));
  return mlp<T>(layers, tape.constant(x)).value();
}

template <typename T>
std::vector<SemanticId> QuantizerModel<T>::quantize(const Tensor<T>& z, bool with_balance) const {
  const std::size_t rows = z.rows(), dim = z.cols();
  if (dim != static_cast<std::size_t>(cfg_.latent_dim)) throw ShapeError("quantize: latent width mismatch");
  std::vector<SemanticId> out(rows, SemanticId(static_cast<std::size_t>(cfg_.levels)));
  std::vector<double> r(dim), scratch;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t c = 0; c < dim; ++c) r[c] = static_cast<double>(z.data[i * dim + c]);
    for (int l = 0; l < cfg_.levels; ++l) {
      const Tensor<T>& book = codebook(l);
      std::span<const double> usage;
      if (with_balance) usage = usage_.row(static_cast<std::size_t>(l));
      const int code = select_code(r.data(), book.data.data(), book.rows(), dim, usage, cfg_.delta_max,
                                   cfg_.balance_eps, scratch);
      out[i][static_cast<std::size_t>(l)] = code;
      for (std::size_t c = 0; c < dim; ++c) r[c] -= static_cast<double>(book.data[static_cast<std::size_t>(code) * dim + c]);
    }
  }
  return out;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  if (s.empty()) return out;
  for (auto part : io::split(s, ',')) out.push_back(std::stoi(std::string(part)));
  return out;
}

}  // namespace

template <typename T>
nx::Checkpoint QuantizerModel<T>::to_checkpoint() const {
  nx::Checkpoint ck;
  ck.meta = {{"kind", "tokenizer"},
             {"input_dim", std::to_string(input_dim_)},
             {"levels", std::to_string(cfg_.levels)},
             {"codebook_size", std::to_string(cfg_.codebook_size)},
             {"latent_dim", std::to_string(cfg_.latent_dim)},
             {"hidden", join_ints(cfg_.hidden)},
             {"delta_max", fmt::format("{}", cfg_.delta_max)},
             {"balance_eps", fmt::format("{}", cfg_.balance_eps)},
             {"assign_with_balance", cfg_.assign_with_balance ? "1" : "0"},
             {"frozen", frozen_ ? "1" : "0"}};
  nx::append_parameters(ck, store_, "");
  ck.tensors.push_back({"usage", usage_.template cast<float>()});
  return ck;
}

template <typename T>
QuantizerModel<T> QuantizerModel<T>::from_checkpoint(const nx::Checkpoint& ck) {
  if (ck.meta_value("kind") != "tokenizer") throw ParseError("checkpoint is not a tokenizer");
  QuantizerModel<T> m;
  try {
    m.cfg_.levels = std::stoi(ck.meta_value("levels"));
    m.cfg_.codebook_size = std::stoi(ck.meta_value("codebook_size"));
    m.cfg_.latent_dim = std::stoi(ck.meta_value("latent_dim"));
    m.cfg_.hidden = parse_ints(ck.meta_value("hidden"));
    m.cfg_.delta_max = std::stod(ck.meta_value("delta_max", "0.5"));
    m.cfg_.balance_eps = std::stod(ck.meta_value("balance_eps", "1e-6"));
    m.cfg_.assign_with_balance = ck.meta_value("assign_with_balance") == "1";
    m.build(std::stoi(ck.meta_value("input_dim")), nullptr);
  } catch (const std::logic_error&) {
    throw ParseError("tokenizer checkpoint has malformed metadata");
  }
  nx::load_parameters(ck, m.store_, "");
  if (const auto* u = ck.find("usage")) {
    if (u->value.shape != m.usage_.shape) throw ShapeError("tokenizer checkpoint usage has wrong shape");
    m.usage_ = u->value.template cast<double>();
  }
  m.frozen_ = ck.meta_value("frozen") == "1";
  return m;
}

// ---- training / assignment ------------------------------------------------

RqKMeansResult rq_kmeans(const Tensor<double>& h, int levels, int codebook_size, std::uint64_t seed) {
  if (levels < 1 || codebook_size < 2) throw ConfigError("rq_kmeans: need L >= 1 and K >= 2");
  if (h.rows() < static_cast<std::size_t>(codebook_size))
    throw ConfigError(fmt::format("rq_kmeans: {} items is fewer than K = {}", h.rows(), codebook_size));
  RqKMeansResult out;
  Tensor<double> r = h;
  const std::size_t n = h.rows(), dim = h.cols();
  std::vector<SemanticId> codes(n);
  for (int l = 0; l < levels; ++l) {
    KMeansConfig kc;
    kc.k = codebook_size;
    kc.seed = seed + static_cast<std::uint64_t>(l) * 7919;
    auto km = kmeans(r, kc);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = km.assignment[i];
      codes[i].push_back(c);
      for (std::size_t j = 0; j < dim; ++j) r.data[i * dim + j] -= km.centroids.data[static_cast<std::size_t>(c) * dim + j];
    }
    out.codebooks.push_back(std::move(km.centroids));
  }
  out.table = SidTable(levels, codebook_size, std::move(codes));
  return out;
}

namespace {

Tensor<float> gather_batch(const Tensor<float>& h, std::span<const int> idx) {
  const std::size_t d = h.cols();
  Tensor<float> b(idx.size(), d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(h.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * d), d,
                b.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  return b;
}

}  // namespace

TrainResult train_tokenizer(Quantizer& model, const Tensor<float>& h, const QuantizerConfig& cfg) {
  cfg.validate();
  if (model.frozen()) throw ConfigError("train_tokenizer: model is frozen");
  if (h.cols() != static_cast<std::size_t>(model.input_dim()))
    throw ShapeError(fmt::format("train_tokenizer: embeddings have d = {}, model expects {}", h.cols(), model.input_dim()));
  if (!h.all_finite()) throw NumericalError("train_tokenizer: input embeddings contain non-finite values");
  const int n = static_cast<int>(h.rows());
  const int L = cfg.levels;
  Rng rng(cfg.seed * 0x2545F4914F6CDD1DULL + 17);

  if (cfg.kmeans_init && n >= cfg.codebook_size) {
    const auto init = rq_kmeans(model.encode(h).cast<double>(), L, cfg.codebook_size, cfg.seed);
    for (int l = 0; l < L; ++l) model.codebook(l) = init.codebooks[static_cast<std::size_t>(l)].cast<float>();
  }

  TrainResult result;
  {
    nx::Tape<float> tape(false);
    auto vars = model.bind(tape);
    result.initial_recon = vae_forward(vars, tape.constant(h)).recon.item();
  }

  nx::AdamConfig ac;
  ac.lr = cfg.lr;
  nx::Adam<float> adam(model.params(), ac);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto& usage = model.usage();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats st;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int len = std::min(cfg.batch_size, n - start);
      std::span<const int> idx(order.data() + start, static_cast<std::size_t>(len));
      model.params().zero_grad();
      nx::Tape<float> tape;
      auto vars = model.bind(tape);
      Selection sel;
      if (cfg.balance) sel = {&usage, cfg.delta_max, cfg.balance_eps};
      auto fwd = vae_forward(vars, tape.constant(gather_batch(h, idx)), sel);
      Var<float> loss = nx::add(fwd.recon, nx::scale(fwd.quant, cfg.w_quant));
      double uni_total = 0;
      if (cfg.w_uniform > 0) {
        for (int l = 0; l < L; ++l) {
          const double delta = pairwise_percentile(model.codebook(l).cast<double>(), cfg.uniform_percentile);
          Var<float> u = uniform_loss(vars.codebooks[static_cast<std::size_t>(l)], delta, cfg.uniform_mu);
          uni_total += u.item();
          loss = nx::add(loss, nx::scale(u, cfg.w_uniform));
        }
      }
      if (!std::isfinite(loss.item()))
        throw NumericalError(fmt::format("tokenizer diverged at epoch {} batch {}: recon={} quant={} uniform={}",
                                         epoch, batches, fwd.recon.item(), fwd.quant.item(), uni_total));
      tape.backward(loss);
      adam.step();
      if (cfg.balance) {
        for (int l = 0; l < L; ++l) {
          std::vector<double> counts(static_cast<std::size_t>(cfg.codebook_size), 0.0);
          for (int c : fwd.codes[static_cast<std::size_t>(l)]) counts[static_cast<std::size_t>(c)] += 1.0;
          auto row = usage.row(static_cast<std::size_t>(l));
          for (std::size_t k = 0; k < counts.size(); ++k)
            row[k] = cfg.usage_decay * row[k] + (1.0 - cfg.usage_decay) * counts[k];
        }
      }
      st.recon += fwd.recon.item();
      st.quant += fwd.quant.item();
      st.uniform += uni_total;
      ++batches;
    }
    if (batches > 0) {
      st.recon /= batches;
      st.quant /= batches;
      st.uniform /= batches;
    }
    result.epochs.push_back(st);
  }
  return result;
}

SidTable assign_sids(const Quantizer& model, const Tensor<float>& h) {
  const auto& cfg = model.config();
  return SidTable(cfg.levels, cfg.codebook_size, model.quantize(model.encode(h), cfg.assign_with_balance));
}

template Var<float> mlp<float>(std::span<const Var<float>>, const Var<float>&);
template Var<double> mlp<double>(std::span<const Var<double>>, const Var<double>&);
template VaeForward<float> vae_forward<float>(const QuantizerVars<float>&, const Var<float>&, const Selection&);
template VaeForward<double> vae_forward<double>(const QuantizerVars<double>&, const Var<double>&, const Selection&);
template Var<float> uniform_loss<float>(const Var<float>&, double, double);
template Var<double> uniform_loss<double>(const Var<double>&, double, double);
template class QuantizerModel<float>;
template class QuantizerModel<double>;

}  // namespace s2gr::tok
