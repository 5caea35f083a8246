#include "s2gr/model.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numeric>

#include "s2gr/errors.hpp"

namespace s2gr::model {

using nx::Parameter;
using nx::Tensor;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model." + m); };
  if (encoder_layers < 1) fail("encoder_layers must be >= 1");
  if (decoder_layers < 1) fail("decoder_layers must be >= 1");
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (ffn < 1) fail("ffn must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
  if (!(tau > 0)) fail("tau must be > 0");
  if (!(lambda >= 0)) fail("lambda must be >= 0");
  if (clusters < 1) fail("clusters must be >= 1");
  if (max_history < 1) fail("max_history must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be > 0");
  if (!(clip_norm >= 0)) fail("clip_norm must be >= 0");
  if (val_users < 0) fail("val_users must be >= 0");
  if (val_beam < 10) fail("val_beam must be >= 10");
}

// ---- construction ---------------------------------------------------------

namespace {

Tensor<float> normal_init(Rng* rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor<float> t(rows, cols, 0.0f);
  if (rng)
    for (auto& v : t.data) v = static_cast<float>(rng->normal(0, sd));
  return t;
}

struct Builder {
  nx::ParameterStore<float>& store;
  Rng* rng;
  int d, ffn;

  Parameter<float>* add(const std::string& name, Tensor<float> init) { return &store.add(name, std::move(init)); }
  Parameter<float>* weight(const std::string& name, int in, int out) {
    return add(name, normal_init(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
  }
  Parameter<float>* bias(const std::string& name, int n) { return add(name, Tensor<float>(1, n, 0.0f)); }
  Norm<Parameter<float>*> norm(const std::string& p) {
    return {add(p + ".g", Tensor<float>(1, d, 1.0f)), bias(p + ".b", d)};
  }
  Attn<Parameter<float>*> attn(const std::string& p) {
    return {weight(p + ".wq", d, d), bias(p + ".bq", d), weight(p + ".wk", d, d), bias(p + ".bk", d),
            weight(p + ".wv", d, d), bias(p + ".bv", d), weight(p + ".wo", d, d), bias(p + ".bo", d)};
  }
  Ffn<Parameter<float>*> ff(const std::string& p) {
    return {weight(p + ".w1", d, ffn), bias(p + ".b1", ffn), weight(p + ".w2", ffn, d), bias(p + ".b2", d)};
  }
  DecoderLayer<Parameter<float>*> dec_layer(const std::string& p) {
    DecoderLayer<Parameter<float>*> l;
    l.ln1 = norm(p + ".ln1");
    l.self = attn(p + ".self");
    l.ln2 = norm(p + ".ln2");
    l.cross = attn(p + ".cross");
    l.ln3 = norm(p + ".ln3");
    l.ffn = ff(p + ".ffn");
    return l;
  }
};

template <typename P, typename F>
auto map_norm(const Norm<P>& n, F f) {
  return Norm<decltype(f(n.g))>{f(n.g), f(n.b)};
}
template <typename P, typename F>
auto map_attn(const Attn<P>& a, F f) {
  return Attn<decltype(f(a.wq))>{f(a.wq), f(a.bq), f(a.wk), f(a.bk), f(a.wv), f(a.bv), f(a.wo), f(a.bo)};
}
template <typename P, typename F>
auto map_ffn(const Ffn<P>& a, F f) {
  return Ffn<decltype(f(a.w1))>{f(a.w1), f(a.b1), f(a.w2), f(a.b2)};
}
template <typename P, typename F>
auto map_dec(const DecoderLayer<P>& l, F f) {
  return DecoderLayer<decltype(f(l.ln1.g))>{map_norm(l.ln1, f),  map_attn(l.self, f), map_norm(l.ln2, f),
                                            map_attn(l.cross, f), map_norm(l.ln3, f), map_ffn(l.ffn, f)};
}

Var drop(const Var& x, double p, bool train, Rng* rng) { return train ? nx::dropout(x, p, rng) : x; }

Var ln(const Norm<Var>& n, const Var& x) { return nx::layer_norm(x, n.g, n.b); }

Var ffn_forward(const Ffn<Var>& f, const Var& x) {
  return nx::linear(nx::relu(nx::linear(x, f.w1, f.b1)), f.w2, f.b2);
}

// Rows (b, pos) of the concatenation [cache | fresh] along the position axis.
Var append_positions(const Var& cache, int prev, const Var& fresh, int q_len, int batch) {
  if (prev == 0) return fresh;
  const int total = prev + q_len;
  std::vector<int> part(static_cast<std::size_t>(batch) * total), row(part.size());
  for (int b = 0; b < batch; ++b)
    for (int p = 0; p < total; ++p) {
      const std::size_t r = static_cast<std::size_t>(b) * total + p;
      part[r] = p < prev ? 0 : 1;
      row[r] = p < prev ? b * prev + p : b * q_len + (p - prev);
    }
  const Var parts[2] = {cache, fresh};
  return nx::interleave_rows<float>(parts, part, row);
}

struct LayerIO {
  Var k, v;  // updated self-attention cache for this layer
};

Var decoder_layer(const DecoderLayer<Var>& layer, const Var& x_in, int batch, int q_len, int heads, int prev,
                  const Var* cache_k, const Var* cache_v, const Var& cross_k, const Var& cross_v, int cross_len,
                  const std::vector<int>& cross_key_len, std::span<const int> kv_index, double p, bool train,
                  Rng* rng, LayerIO* io) {
  Var x = x_in;
  Var h = ln(layer.ln1, x);
  Var q = nx::linear(h, layer.self.wq, layer.self.bq);
  Var k = nx::linear(h, layer.self.wk, layer.self.bk);
  Var v = nx::linear(h, layer.self.wv, layer.self.bv);
  if (prev > 0) {
    k = append_positions(*cache_k, prev, k, q_len, batch);
    v = append_positions(*cache_v, prev, v, q_len, batch);
  }
  nx::AttentionSpec self_spec;
  self_spec.batch = batch;
  self_spec.q_len = q_len;
  self_spec.k_len = prev + q_len;
  self_spec.heads = heads;
  self_spec.causal = true;
  self_spec.q_offset = prev;
  Var a = nx::attention(q, k, v, self_spec);
  x = nx::add(x, drop(nx::linear(a, layer.self.wo, layer.self.bo), p, train, rng));

  h = ln(layer.ln2, x);
  Var q2 = nx::linear(h, layer.cross.wq, layer.cross.bq);
  nx::AttentionSpec cs;
  cs.batch = batch;
  cs.q_len = q_len;
  cs.k_len = cross_len;
  cs.heads = heads;
  cs.kv_index.assign(kv_index.begin(), kv_index.end());
  cs.key_len.resize(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) cs.key_len[b] = cross_key_len[static_cast<std::size_t>(kv_index[b])];
  Var a2 = nx::attention(q2, cross_k, cross_v, cs);
  x = nx::add(x, drop(nx::linear(a2, layer.cross.wo, layer.cross.bo), p, train, rng));

  h = ln(layer.ln3, x);
  x = nx::add(x, drop(ffn_forward(layer.ffn, h), p, train, rng));
  if (io) {
    io->k = k;
    io->v = v;
  }
  return x;
}

std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Last position of each sample in a (batch x m) row block.
Var last_rows(const Var& h, int batch, int m) {
  std::vector<int> ids(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) ids[b] = b * m + m - 1;
  return nx::gather_rows<float>(h, ids);
}

// Interleave per-slot (batch x d) inputs into rows ordered (sample, slot).
Var assemble(const std::vector<Var>& slots, int batch) {
  const int m = static_cast<int>(slots.size());
  if (m == 1) return slots[0];
  std::vector<int> part(static_cast<std::size_t>(batch) * m), row(part.size());
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < m; ++s) {
      part[static_cast<std::size_t>(b) * m + s] = s;
      row[static_cast<std::size_t>(b) * m + s] = b;
    }
  return nx::interleave_rows<float>(slots, part, row);
}

std::vector<int> level_codes(std::span<const SemanticId> targets, int level) {
  std::vector<int> out(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) out[b] = targets[b][static_cast<std::size_t>(level)];
  return out;
}

}  // namespace

S2GRModel::S2GRModel(const ModelConfig& cfg, int levels, int codebook_size, Rng& rng)
    : cfg_(cfg), levels_(levels), k_(codebook_size) {
  cfg_.validate();
  if (levels < 1) throw ConfigError("model: levels must be >= 1");
  if (codebook_size < 1) throw ConfigError("model: codebook_size must be >= 1");
  build(&rng);
}

void S2GRModel::build(Rng* rng) {
  const int d = cfg_.d_model;
  Builder b{store_, rng, d, cfg_.ffn};
  w_.tok_emb = b.add("tok_emb", normal_init(rng, vocab_size(), d, 1.0));
  w_.enc_pos = b.add("enc_pos", normal_init(rng, static_cast<std::size_t>(cfg_.max_history) * levels_, d, 0.1));
  w_.dec_pos = b.add("dec_pos", normal_init(rng, 2 * levels_ + 1, d, 0.1));
  w_.think_pos = b.add("think_pos", normal_init(rng, levels_, d, 0.1));
  w_.out_w = b.weight("out.w", d, levels_ * k_);
  w_.out_b = b.bias("out.b", levels_ * k_);
  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    const std::string p = fmt::format("enc.{}", i);
    EncoderLayer<Parameter<float>*> l;
    l.ln1 = b.norm(p + ".ln1");
    l.attn = b.attn(p + ".attn");
    l.ln2 = b.norm(p + ".ln2");
    l.ffn = b.ff(p + ".ffn");
    w_.enc.push_back(l);
  }
  w_.enc_norm = b.norm("enc.norm");
  for (int i = 0; i < cfg_.decoder_layers; ++i) w_.dec.push_back(b.dec_layer(fmt::format("dec.{}", i)));
  w_.dec_norm = b.norm("dec.norm");
  w_.psi = b.dec_layer("psi");
  w_.psi_norm = b.norm("psi.norm");
}

Bound S2GRModel::bind(nx::Tape<float>& tape) const {
  auto f = [&tape](Parameter<float>* p) { return tape.param(*p); };
  Bound w;
  w.tok_emb = f(w_.tok_emb);
  w.enc_pos = f(w_.enc_pos);
  w.dec_pos = f(w_.dec_pos);
  w.think_pos = f(w_.think_pos);
  w.out_w = f(w_.out_w);
  w.out_b = f(w_.out_b);
  for (const auto& l : w_.enc)
    w.enc.push_back({map_norm(l.ln1, f), map_attn(l.attn, f), map_norm(l.ln2, f), map_ffn(l.ffn, f)});
  w.enc_norm = map_norm(w_.enc_norm, f);
  for (const auto& l : w_.dec) w.dec.push_back(map_dec(l, f));
  w.dec_norm = map_norm(w_.dec_norm, f);
  w.psi = map_dec(w_.psi, f);
  w.psi_norm = map_norm(w_.psi_norm, f);
  return w;
}

// ---- encoder --------------------------------------------------------------

Encoded S2GRModel::encode_history(const Bound& w, const std::vector<std::vector<SemanticId>>& histories,
                                  bool train, Rng* rng) const {
  if (histories.empty()) throw DomainError("encode_history: empty batch");
  const int batch = static_cast<int>(histories.size());
  Encoded enc;
  enc.batch = batch;
  enc.key_len.resize(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const auto n = std::min<std::size_t>(histories[b].size(), static_cast<std::size_t>(cfg_.max_history));
    if (n == 0) throw DomainError("encode_history: empty history");
    enc.key_len[b] = static_cast<int>(n) * levels_;
    enc.len = std::max(enc.len, enc.key_len[b]);
  }
  std::vector<int> ids(static_cast<std::size_t>(batch) * enc.len, kPad), pos(ids.size(), 0);
  for (int b = 0; b < batch; ++b) {
    const auto& hist = histories[b];
    const std::size_t n = static_cast<std::size_t>(enc.key_len[b] / levels_);
    const std::size_t start = hist.size() - n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& sid = hist[start + i];
      if (static_cast<int>(sid.size()) != levels_)
        throw ShapeError(fmt::format("history SID has {} levels, model expects {}", sid.size(), levels_));
      for (int l = 0; l < levels_; ++l) {
        const int code = sid[static_cast<std::size_t>(l)];
        if (code < 0 || code >= k_) throw IndexError(fmt::format("code {} out of range [0, {})", code, k_));
        const std::size_t j = i * levels_ + l;
        ids[static_cast<std::size_t>(b) * enc.len + j] = token_id(l, code);
        pos[static_cast<std::size_t>(b) * enc.len + j] = enc.key_len[b] - 1 - static_cast<int>(j);
      }
    }
  }
  Var x = nx::add(nx::gather_rows<float>(w.tok_emb, ids), nx::gather_rows<float>(w.enc_pos, pos));
  x = drop(x, cfg_.dropout, train, rng);
  nx::AttentionSpec spec;
  spec.batch = batch;
  spec.q_len = spec.k_len = enc.len;
  spec.heads = cfg_.heads;
  spec.key_len = enc.key_len;
  for (const auto& l : w.enc) {
    Var h = ln(l.ln1, x);
    Var a = nx::attention(nx::linear(h, l.attn.wq, l.attn.bq), nx::linear(h, l.attn.wk, l.attn.bk),
                          nx::linear(h, l.attn.wv, l.attn.bv), spec);
    x = nx::add(x, drop(nx::linear(a, l.attn.wo, l.attn.bo), cfg_.dropout, train, rng));
    x = nx::add(x, drop(ffn_forward(l.ffn, ln(l.ln2, x)), cfg_.dropout, train, rng));
  }
  enc.h = ln(w.enc_norm, x);
  return enc;
}

CrossKV S2GRModel::cross_kv(const Bound& w, const Encoded& enc) const {
  CrossKV c;
  c.len = enc.len;
  c.key_len = enc.key_len;
  for (const auto& l : w.dec) {
    c.k.push_back(nx::linear(enc.h, l.cross.wk, l.cross.bk));
    c.v.push_back(nx::linear(enc.h, l.cross.wv, l.cross.bv));
  }
  c.k.push_back(nx::linear(enc.h, w.psi.cross.wk, w.psi.cross.bk));
  c.v.push_back(nx::linear(enc.h, w.psi.cross.wv, w.psi.cross.bv));
  return c;
}

// ---- decoder --------------------------------------------------------------

Var S2GRModel::decoder_step(const Bound& w, const Var& x_in, int batch, int q_len, SelfKV& cache,
                            const CrossKV& cross, std::span<const int> kv_index, bool train, Rng* rng) const {
  const int n_layers = static_cast<int>(w.dec.size());
  if (cache.len > 0 && static_cast<int>(cache.k.size()) != n_layers) throw ShapeError("decoder cache layer count");
  if (static_cast<int>(kv_index.size()) != batch) throw ShapeError("decoder_step: kv_index size");
  std::vector<Var> nk(static_cast<std::size_t>(n_layers)), nv(nk.size());
  Var x = x_in;
  for (int i = 0; i < n_layers; ++i) {
    LayerIO io;
    x = decoder_layer(w.dec[i], x, batch, q_len, cfg_.heads, cache.len, cache.len ? &cache.k[i] : nullptr,
                      cache.len ? &cache.v[i] : nullptr, cross.k[i], cross.v[i], cross.len, cross.key_len,
                      kv_index, cfg_.dropout, train, rng, &io);
    nk[i] = io.k;
    nv[i] = io.v;
  }
  cache.k = std::move(nk);
  cache.v = std::move(nv);
  cache.len += q_len;
  return ln(w.dec_norm, x);
}

Var S2GRModel::input_embedding(const Bound& w, std::span<const int> token_ids, int slot) const {
  return nx::add_row(nx::gather_rows<float>(w.tok_emb, token_ids),
                     nx::slice_rows(w.dec_pos, static_cast<std::size_t>(slot), 1));
}

Var S2GRModel::bos_inputs(const Bound& w, int batch) const {
  const std::vector<int> ids(static_cast<std::size_t>(batch), kBos);
  return input_embedding(w, ids, 0);
}

Var S2GRModel::level_logits(const Bound& w, const Var& h, int level) const {
  const auto off = static_cast<std::size_t>(level) * k_;
  return nx::linear(h, nx::slice_cols(w.out_w, off, k_), nx::slice_cols(w.out_b, off, k_));
}

Var S2GRModel::think_token(const Bound& w, const Var& h, int level) const {
  return nx::add_row(h, nx::slice_rows(w.think_pos, static_cast<std::size_t>(level), 1));
}

DecoderTrace S2GRModel::stepwise_decode_train(const Bound& w, const CrossKV& cross,
                                              std::span<const SemanticId> targets, bool train, Rng* rng) const {
  const int batch = static_cast<int>(targets.size());
  const auto kv = iota_vec(batch);
  DecoderTrace tr;
  std::vector<Var> slots{bos_inputs(w, batch)};
  auto tokens = [&](int l) {
    auto c = level_codes(targets, l);
    for (auto& v : c) {
      if (v < 0 || v >= k_) throw IndexError(fmt::format("target code {} out of range", v));
      v = token_id(l, v);
    }
    return c;
  };
  if (cfg_.no_reason) {
    for (int l = 0; l + 1 < levels_; ++l) slots.push_back(input_embedding(w, tokens(l), l + 1));
    const int m = static_cast<int>(slots.size());
    SelfKV cache;
    Var h = decoder_step(w, assemble(slots, batch), batch, m, cache, cross, kv, train, rng);
    for (int l = 0; l < levels_; ++l) {
      std::vector<int> ids(static_cast<std::size_t>(batch));
      for (int b = 0; b < batch; ++b) ids[b] = b * m + l;
      tr.logits.push_back(level_logits(w, nx::gather_rows<float>(h, ids), l));
    }
    tr.decoder_input_len = levels_ + 1;
    return tr;
  }
  auto pass = [&]() {
    const int m = static_cast<int>(slots.size());
    SelfKV cache;
    return last_rows(decoder_step(w, assemble(slots, batch), batch, m, cache, cross, kv, train, rng), batch, m);
  };
  for (int l = 0; l < levels_; ++l) {
    Var t = think_token(w, pass(), l);
    tr.think.push_back(t);
    slots.push_back(t);
    tr.logits.push_back(level_logits(w, pass(), l));
    if (l + 1 < levels_) slots.push_back(input_embedding(w, tokens(l), 2 * l + 2));
  }
  tr.decoder_input_len = 2 * levels_ + 1;
  return tr;
}

DecoderTrace S2GRModel::stepwise_decode_incremental(const Bound& w, const CrossKV& cross,
                                                    std::span<const SemanticId> targets) const {
  const int batch = static_cast<int>(targets.size());
  const auto kv = iota_vec(batch);
  DecoderTrace tr;
  SelfKV cache;
  Var next = bos_inputs(w, batch);
  auto step = [&](const Var& x) { return decoder_step(w, x, batch, 1, cache, cross, kv, false, nullptr); };
  auto tokens = [&](int l) {
    auto c = level_codes(targets, l);
    for (auto& v : c) v = token_id(l, v);
    return c;
  };
  for (int l = 0; l < levels_; ++l) {
    if (cfg_.no_reason) {
      tr.logits.push_back(level_logits(w, step(next), l));
      next = input_embedding(w, tokens(l), l + 1);
    } else {
      Var t = think_token(w, step(next), l);
      tr.think.push_back(t);
      tr.logits.push_back(level_logits(w, step(t), l));
      next = input_embedding(w, tokens(l), 2 * l + 2);
    }
  }
  tr.decoder_input_len = cfg_.no_reason ? levels_ + 1 : 2 * levels_ + 1;
  return tr;
}

Var S2GRModel::global_decode(const Bound& w, const CrossKV& cross, bool train, Rng* rng) const {
  const int batch = static_cast<int>(cross.key_len.size());
  const auto kv = iota_vec(batch);
  Var x = decoder_layer(w.psi, bos_inputs(w, batch), batch, 1, cfg_.heads, 0, nullptr, nullptr, cross.k.back(),
                        cross.v.back(), cross.len, cross.key_len, kv, cfg_.dropout, train, rng, nullptr);
  return ln(w.psi_norm, x);
}

Var S2GRModel::target_item_embedding(const Bound& w, std::span<const SemanticId> targets) const {
  Var acc;
  for (int l = 0; l < levels_; ++l) {
    auto ids = level_codes(targets, l);
    for (auto& v : ids) v = token_id(l, v);
    Var e = nx::gather_rows<float>(w.tok_emb, ids);
    acc = acc.valid() ? nx::add(acc, e) : e;
  }
  return nx::scale(acc, 1.0 / levels_);
}

// ---- checkpoint -----------------------------------------------------------

nx::Checkpoint S2GRModel::to_checkpoint() const {
  nx::Checkpoint ck;
  ck.meta = {{"kind", "s2gr_model"},
             {"levels", std::to_string(levels_)},
             {"codebook_size", std::to_string(k_)},
             {"encoder_layers", std::to_string(cfg_.encoder_layers)},
             {"decoder_layers", std::to_string(cfg_.decoder_layers)},
             {"d_model", std::to_string(cfg_.d_model)},
             {"heads", std::to_string(cfg_.heads)},
             {"ffn", std::to_string(cfg_.ffn)},
             {"max_history", std::to_string(cfg_.max_history)},
             {"tau", fmt::format("{}", cfg_.tau)},
             {"lambda", fmt::format("{}", cfg_.lambda)},
             {"no_reason", cfg_.no_reason ? "1" : "0"},
             {"no_think_loss", cfg_.no_think_loss ? "1" : "0"}};
  nx::append_parameters(ck, store_, "");
  return ck;
}

S2GRModel S2GRModel::from_checkpoint(const nx::Checkpoint& ck) {
  if (ck.meta_value("kind") != "s2gr_model") throw ParseError("checkpoint is not an s2gr model");
  S2GRModel m;
  try {
    m.levels_ = std::stoi(ck.meta_value("levels"));
    m.k_ = std::stoi(ck.meta_value("codebook_size"));
    m.cfg_.encoder_layers = std::stoi(ck.meta_value("encoder_layers"));
    m.cfg_.decoder_layers = std::stoi(ck.meta_value("decoder_layers"));
    m.cfg_.d_model = std::stoi(ck.meta_value("d_model"));
    m.cfg_.heads = std::stoi(ck.meta_value("heads"));
    m.cfg_.ffn = std::stoi(ck.meta_value("ffn"));
    m.cfg_.max_history = std::stoi(ck.meta_value("max_history"));
    m.cfg_.tau = std::stod(ck.meta_value("tau"));
    m.cfg_.lambda = std::stod(ck.meta_value("lambda"));
  } catch (const std::logic_error&) {
    throw ParseError("model checkpoint has malformed metadata");
  }
  m.cfg_.no_reason = ck.meta_value("no_reason") == "1";
  m.cfg_.no_think_loss = ck.meta_value("no_think_loss") == "1";
  m.cfg_.validate();
  m.build(nullptr);
  nx::load_parameters(ck, m.store_, "");
  return m;
}

// ---- losses ---------------------------------------------------------------

template <typename T>
nx::Var<T> align_loss(const nx::Var<T>& t, const nx::Tensor<T>& centroids, std::span<const int> clusters,
                      double tau) {
  if (!(tau > 0)) throw ConfigError("align_loss: tau must be > 0");
  if (clusters.size() != t.rows()) throw ShapeError("align_loss: one cluster per row required");
  auto c = t.tape()->constant(centroids);
  return nx::mean(nx::cross_entropy_rows(nx::scale(nx::cosine_matrix(t, c), 1.0 / tau), clusters));
}

template <typename T>
nx::Var<T> infonce_loss(const nx::Var<T>& vg, const nx::Var<T>& vbar, double tau) {
  if (!(tau > 0)) throw ConfigError("infonce_loss: tau must be > 0");
  if (vg.rows() != vbar.rows() || vg.rows() == 0) throw ShapeError("infonce_loss: batch mismatch");
  std::vector<int> diag(vg.rows());
  std::iota(diag.begin(), diag.end(), 0);
  return nx::mean(nx::cross_entropy_rows<T>(nx::scale(nx::cosine_matrix(vg, vbar), 1.0 / tau), diag));
}

template <typename T>
nx::Var<T> reg_loss(const nx::Var<T>& t1, const nx::Var<T>& vg) {
  return nx::add_scalar(nx::scale(nx::mean(nx::cosine_rows(t1, nx::stop_gradient(vg))), -1.0), 1.0);
}

template <typename T>
nx::Var<T> rec_loss(std::span<const nx::Var<T>> logits, const std::vector<std::vector<int>>& targets) {
  if (logits.size() != targets.size() || logits.empty()) throw ShapeError("rec_loss: one target list per level");
  nx::Var<T> acc;
  for (std::size_t l = 0; l < logits.size(); ++l) {
    auto ce = nx::mean(nx::cross_entropy_rows<T>(logits[l], targets[l]));
    acc = acc.valid() ? nx::add(acc, ce) : ce;
  }
  return acc;
}

#define S2GR_INSTANTIATE_LOSSES(T)                                                                          \
  template nx::Var<T> align_loss(const nx::Var<T>&, const nx::Tensor<T>&, std::span<const int>, double); \
  template nx::Var<T> infonce_loss(const nx::Var<T>&, const nx::Var<T>&, double);                        \
  template nx::Var<T> reg_loss(const nx::Var<T>&, const nx::Var<T>&);                                    \
  template nx::Var<T> rec_loss(std::span<const nx::Var<T>>, const std::vector<std::vector<int>>&);
S2GR_INSTANTIATE_LOSSES(float)
S2GR_INSTANTIATE_LOSSES(double)

AlignContext AlignContext::from(const sem::CentroidSet& set) {
  AlignContext ctx;
  for (int l = 0; l < set.levels(); ++l) {
    ctx.centroids.push_back(set.level(l).centroids.cast<float>());
    ctx.code_cluster.push_back(set.level(l).assignment);
  }
  return ctx;
}

LossBreakdown total_loss(const S2GRModel& model, const Bound& w, const CrossKV& cross,
                         std::span<const SemanticId> targets, const AlignContext& ctx, bool train, Rng* rng,
                         DecoderTrace* trace_out) {
  const auto& cfg = model.config();
  const int levels = model.levels();
  DecoderTrace tr = model.stepwise_decode_train(w, cross, targets, train, rng);
  std::vector<std::vector<int>> codes;
  for (int l = 0; l < levels; ++l) codes.push_back(level_codes(targets, l));

  LossBreakdown lb;
  Var rec = rec_loss<float>(tr.logits, codes);
  lb.rec = rec.item();
  lb.align.assign(static_cast<std::size_t>(levels), 0.0);
  Var total = rec;
  if (!cfg.no_reason && !cfg.no_think_loss) {
    if (static_cast<int>(ctx.centroids.size()) != levels) throw ShapeError("alignment context level count");
    Var think;
    for (int l = 0; l < levels; ++l) {
      const auto& map = ctx.code_cluster[static_cast<std::size_t>(l)];
      std::vector<int> clusters(codes[l].size());
      for (std::size_t b = 0; b < clusters.size(); ++b) clusters[b] = map.at(static_cast<std::size_t>(codes[l][b]));
      Var a = align_loss<float>(tr.think[l], ctx.centroids[l], clusters, cfg.tau);
      lb.align[l] = a.item();
      think = think.valid() ? nx::add(think, a) : a;
    }
    Var vg = model.global_decode(w, cross, train, rng);
    Var vbar;
    if (cfg.target_embedding_source == TargetEmbeddingSource::kModel) {
      vbar = model.target_item_embedding(w, targets);
    } else {
      if (!ctx.codebooks) throw MissingPrerequisite("codebook target embeddings need the tokenizer", "train-tokenizer");
      Tensor<float> mean(targets.size(), static_cast<std::size_t>(cfg.d_model), 0.0f);
      for (int l = 0; l < levels; ++l) {
        const auto& book = (*ctx.codebooks)[l];
        if (book.cols() != mean.cols()) throw ConfigError("codebook dim must equal model.d_model");
        for (std::size_t b = 0; b < targets.size(); ++b) {
          const auto row = book.row(static_cast<std::size_t>(codes[l][b]));
          for (std::size_t c = 0; c < mean.cols(); ++c) mean(b, c) += row[c] / static_cast<float>(levels);
        }
      }
      vbar = vg.tape()->constant(std::move(mean));
    }
    Var nce = infonce_loss(vg, vbar, cfg.tau);
    Var reg = reg_loss(tr.think[0], vg);
    lb.infonce = nce.item();
    lb.reg = reg.item();
    think = nx::add(think, nx::add(nce, nx::scale(reg, cfg.lambda)));
    lb.think = lb.infonce + cfg.lambda * lb.reg;
    for (double a : lb.align) lb.think += a;
    total = nx::add(total, think);
  }
  lb.total = lb.rec + lb.think;
  lb.total_var = total;
  if (trace_out) *trace_out = std::move(tr);
  return lb;
}

std::string format_epoch_log(const EpochLog& e) {
  return fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}", e.epoch, e.loss_total, e.loss_rec, e.loss_think,
                     e.val_hr10);
}

}  // namespace s2gr::model
