#include "s2gr/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <map>
#include <sstream>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"
#include "s2gr/numerics/checkpoint.hpp"
#include "s2gr/rng.hpp"
#include "s2gr/semantics.hpp"

namespace s2gr::pipeline {

namespace fs = std::filesystem;

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Reads typed values and records what was resolved, defaults included.
class Reader {
 public:
  Reader(const cfg::Config& c, fs::path work) : c_(c), work_(std::move(work)) {}

  std::string str(const std::string& key, const std::string& def) {
    auto v = c_.get_string(key, def);
    put(key, v);
    return v;
  }
  fs::path path(const std::string& key, const fs::path& def) {
    const auto v = c_.get_string(key, def.string());
    values[key] = v;
    // Paths inside the work dir hash by their relative position.
    const auto w = work_.lexically_normal().string();
    const auto n = fs::path(v).lexically_normal().string();
    hashed[key] = n.rfind(w + "/", 0) == 0 ? "$work/" + n.substr(w.size() + 1) : v;
    return v;
  }
  int i(const std::string& key, int def) {
    const int v = c_.get_int(key, def);
    put(key, std::to_string(v));
    return v;
  }
  std::uint64_t u64(const std::string& key, std::uint64_t def) {
    const auto v = c_.get_u64(key, def);
    put(key, std::to_string(v));
    return v;
  }
  double d(const std::string& key, double def) {
    const double v = c_.get_double(key, def);
    put(key, fmt::format("{:.17g}", v));
    return v;
  }
  bool b(const std::string& key, bool def) {
    const bool v = c_.get_bool(key, def);
    put(key, v ? "true" : "false");
    return v;
  }
  std::vector<int> ints(const std::string& key, const std::vector<int>& def) {
    auto v = c_.get_ints(key, def);
    put(key, join_ints(v));
    return v;
  }
  void put(const std::string& key, const std::string& v) {
    values[key] = v;
    hashed[key] = v;
  }

  std::map<std::string, std::string> values, hashed;

 private:
  const cfg::Config& c_;
  fs::path work_;
};

void say(const Options& opt, const std::string& msg) {
  if (opt.log) *opt.log << msg << '\n' << std::flush;
}

std::string rel(const RunConfig& rc, const fs::path& p) {
  return fs::path(p).lexically_relative(rc.work_dir).generic_string();
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw MissingPrerequisite("missing " + p.string(), producer);
}

void require_input(const RunConfig& rc, const fs::path& p, const std::string& key) {
  if (fs::exists(p)) return;
  const auto r = fs::path(p).lexically_normal().lexically_relative(rc.work_dir.lexically_normal());
  if (!r.empty() && *r.begin() == "synth") throw MissingPrerequisite(key + " not found: " + p.string(), "synth");
  throw ConfigError(key + ": file not found: " + p.string());
}

// Manifest under construction for one stage.
class Stage {
 public:
  Stage(const RunConfig& rc, const std::string& command, const std::string& dir, std::uint64_t seed)
      : rc_(rc), dir_(dir) {
    fs::create_directories(rc.work_dir / dir);
    m_.add("command", command);
    m_.add("config_sha256", rc.hash());
    m_.add("seed", std::to_string(seed));
  }
  void add(const std::string& k, const std::string& v) { m_.add(k, v); }
  void input(const std::string& name, const fs::path& p) { m_.add("input:" + name, io::sha256_file(p)); }
  void work_input(const fs::path& p) { input(rel(rc_, p), p); }
  void output(const fs::path& p) { m_.add("output:" + rel(rc_, p), io::sha256_file(p)); }
  void finish() { m_.write(rc_.work_dir / dir_ / "manifest.tsv"); }

 private:
  const RunConfig& rc_;
  std::string dir_;
  Manifest m_;
};

struct Corpus {
  corpus::InteractionLog log;
  corpus::SplitDataset split;
  nx::Tensor<float> x;
};

Corpus load_corpus(const RunConfig& rc) {
  require_input(rc, rc.embeddings, "paths.embeddings");
  require_input(rc, rc.interactions, "paths.interactions");
  Corpus c;
  c.x = corpus::load_item_embeddings(rc.embeddings, -1).values;
  c.log = corpus::load_interactions(rc.interactions, static_cast<int>(c.x.rows()));
  c.split = corpus::chronological_split(c.log, rc.min_test_len);
  return c;
}

void add_corpus_inputs(Stage& s, const RunConfig& rc) {
  s.input("interactions", rc.interactions);
  s.input("embeddings", rc.embeddings);
}

Manifest stage_manifest(const Layout& lay, const std::string& stage, const std::string& producer) {
  require(lay.manifest(stage), producer);
  return Manifest::read(lay.manifest(stage));
}

// Tokenizer input as recorded by the tokenizer stage.
fs::path tokenizer_input_path(const RunConfig& rc, const std::string& provenance) {
  const Layout lay{rc.work_dir};
  if (provenance == "h_align") {
    require(lay.aligned_emb(), "build-graph");
    return lay.aligned_emb();
  }
  require_input(rc, rc.embeddings, "paths.embeddings");
  return rc.embeddings;
}

tok::Quantizer load_quantizer(const Layout& lay) {
  require(lay.tokenizer_ckpt(), "train-tokenizer");
  return tok::Quantizer::from_checkpoint(nx::read_checkpoint(lay.tokenizer_ckpt()));
}

std::vector<nx::Tensor<float>> float_codebooks(const tok::Quantizer& q) {
  std::vector<nx::Tensor<float>> out;
  for (int l = 0; l < q.config().levels; ++l) out.push_back(q.codebook(l));
  return out;
}

tok::SidTable load_sids(const Layout& lay) {
  const auto m = stage_manifest(lay, "sids", "assign-sids");
  require(lay.sids_tsv(), "assign-sids");
  return tok::read_sid_table(lay.sids_tsv(), std::stoi(m.get("codebook_size", "0")));
}

std::string slug(const std::string& name) {
  std::string out;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '_')
      out += '_';
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "variant" : out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  if (n == 0) return 0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

std::string RunConfig::hash() const { return io::sha256_hex(resolved); }

RunConfig RunConfig::from(const cfg::Config& c, bool apply_env) {
  RunConfig rc;
  rc.work_dir = c.get_string("paths.work_dir", "work");
  rc.threads = c.get_int("run.threads", 1);
  Reader r(c, rc.work_dir);

  rc.seed = r.u64("run.seed", 1);
  if (apply_env) {
    if (const char* env = std::getenv("S2GR_SEED"); env && *env) {
      std::uint64_t s = 0;
      const std::string_view v(env);
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
      if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(fmt::format("S2GR_SEED: expected a non-negative integer, got '{}'", v));
      rc.seed = s;
      r.put("run.seed", std::to_string(s));
    }
  }

  rc.interactions = r.path("paths.interactions", rc.work_dir / "synth" / "interactions.tsv");
  rc.embeddings = r.path("paths.embeddings", rc.work_dir / "synth" / "items.emb");
  rc.hierarchy = r.path("paths.hierarchy", rc.work_dir / "synth" / "hierarchy.tsv");

  auto& s = rc.synth;
  s.top_categories = r.i("synth.top_categories", s.top_categories);
  s.subcategories_per_top = r.i("synth.subcategories_per_top", s.subcategories_per_top);
  s.items_per_sub = r.i("synth.items_per_sub", s.items_per_sub);
  s.dim = r.i("synth.dim", s.dim);
  s.noise = r.d("synth.noise", s.noise);
  s.p_stay = r.d("synth.p_stay", s.p_stay);
  s.users = r.i("synth.users", s.users);
  s.min_session = r.i("synth.min_session", s.min_session);
  s.max_session = r.i("synth.max_session", s.max_session);
  s.top_scale = r.d("synth.top_scale", s.top_scale);
  s.sub_scale = r.d("synth.sub_scale", s.sub_scale);
  s.seed = r.u64("synth.seed", rc.seed);

  rc.min_test_len = r.i("split.min_test_len", rc.min_test_len);

  rc.window = r.i("coocgraph.window", rc.window);
  rc.propagation.alpha = r.d("coocgraph.alpha", rc.propagation.alpha);
  rc.propagation.hops = r.i("coocgraph.hops", rc.propagation.hops);
  rc.graph_source = r.str("coocgraph.source", rc.graph_source);

  auto& t = rc.tokenizer;
  t.levels = r.i("tokenizer.levels", t.levels);
  t.codebook_size = r.i("tokenizer.codebook_size", t.codebook_size);
  t.latent_dim = r.i("tokenizer.latent_dim", t.latent_dim);
  t.hidden = r.ints("tokenizer.hidden", t.hidden);
  t.w_quant = r.d("tokenizer.w_quant", t.w_quant);
  t.w_uniform = r.d("tokenizer.w_uniform", t.w_uniform);
  t.uniform_percentile = r.d("tokenizer.uniform_percentile", t.uniform_percentile);
  t.uniform_mu = r.d("tokenizer.uniform_mu", t.uniform_mu);
  t.balance = r.b("tokenizer.balance", t.balance);
  t.delta_max = r.d("tokenizer.delta_max", t.delta_max);
  t.balance_eps = r.d("tokenizer.balance_eps", t.balance_eps);
  t.usage_decay = r.d("tokenizer.usage_decay", t.usage_decay);
  t.assign_with_balance = r.b("tokenizer.assign_with_balance", t.assign_with_balance);
  t.kmeans_init = r.b("tokenizer.kmeans_init", t.kmeans_init);
  t.epochs = r.i("tokenizer.epochs", t.epochs);
  t.batch_size = r.i("tokenizer.batch_size", t.batch_size);
  t.lr = r.d("tokenizer.lr", t.lr);
  t.seed = r.u64("tokenizer.seed", rc.seed);
  rc.tokenizer_input = r.str("tokenizer.input", rc.tokenizer_input);

  rc.clusters = r.i("semantics.clusters", rc.clusters);
  rc.cluster_seed = r.u64("semantics.seed", rc.seed);

  auto& m = rc.model;
  m.encoder_layers = r.i("model.encoder_layers", m.encoder_layers);
  m.decoder_layers = r.i("model.decoder_layers", m.decoder_layers);
  m.d_model = r.i("model.d_model", m.d_model);
  m.heads = r.i("model.heads", m.heads);
  m.ffn = r.i("model.ffn", m.ffn);
  m.dropout = r.d("model.dropout", m.dropout);
  m.tau = r.d("model.tau", m.tau);
  m.lambda = r.d("model.lambda", m.lambda);
  m.max_history = r.i("model.max_history", m.max_history);
  m.seed = r.u64("model.seed", rc.seed);
  m.no_reason = r.b("model.no_reason", m.no_reason);
  m.no_think_loss = r.b("model.no_think_loss", m.no_think_loss);
  const auto src = r.str("model.target_embedding_source", "model");
  if (src == "model")
    m.target_embedding_source = model::TargetEmbeddingSource::kModel;
  else if (src == "codebook")
    m.target_embedding_source = model::TargetEmbeddingSource::kCodebook;
  else
    throw ConfigError("model.target_embedding_source must be model or codebook, got '" + src + "'");
  m.epochs = r.i("model.epochs", m.epochs);
  m.batch_size = r.i("model.batch_size", m.batch_size);
  m.lr = r.d("model.lr", m.lr);
  m.clip_norm = r.d("model.clip_norm", m.clip_norm);
  m.val_users = r.i("model.val_users", m.val_users);
  m.val_beam = r.i("model.val_beam", m.val_beam);
  m.clusters = rc.clusters;

  auto& inf = rc.infer;
  inf.beam = r.i("infer.beam", inf.beam);
  inf.constrain = r.b("infer.constrain", inf.constrain);
  inf.k_eval = r.i("infer.k_eval", inf.k_eval);
  inf.chunk = r.i("infer.chunk", inf.chunk);
  rc.report_unconstrained = r.b("infer.report_unconstrained", rc.report_unconstrained);

  rc.cutoffs = r.ints("eval.cutoffs", rc.cutoffs);
  rc.bucket_edges = r.ints("eval.buckets", rc.bucket_edges);
  rc.ablation_seeds = r.ints("ablation.seeds", rc.ablation_seeds);

  if (const auto extra = c.unused(); !extra.empty()) {
    std::string list;
    for (const auto& k : extra) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config key(s): " + list);
  }

  // Cross-field checks.
  if (rc.threads < 1) throw ConfigError("run.threads must be >= 1");
  rc.synth.validate();
  if (rc.window < 2) throw ConfigError("coocgraph.window must be >= 2, got " + std::to_string(rc.window));
  rc.propagation.validate();
  if (rc.graph_source != "train" && rc.graph_source != "full")
    throw ConfigError("coocgraph.source must be train or full, got '" + rc.graph_source + "'");
  rc.tokenizer.validate();
  if (rc.tokenizer_input != "aligned" && rc.tokenizer_input != "raw")
    throw ConfigError("tokenizer.input must be aligned or raw, got '" + rc.tokenizer_input + "'");
  if (rc.clusters < 1 || rc.clusters > rc.tokenizer.codebook_size)
    throw ConfigError(fmt::format("semantics.clusters must be in [1, tokenizer.codebook_size = {}], got {}",
                                  rc.tokenizer.codebook_size, rc.clusters));
  rc.model.validate();
  if (rc.model.d_model != rc.tokenizer.latent_dim)
    throw ConfigError(fmt::format("model.d_model ({}) must equal tokenizer.latent_dim ({})", rc.model.d_model,
                                  rc.tokenizer.latent_dim));
  if (rc.infer.beam < 0) throw ConfigError("infer.beam must be >= 0");
  if (rc.infer.k_eval < 1) throw ConfigError("infer.k_eval must be >= 1");
  if (rc.infer.chunk < 1) throw ConfigError("infer.chunk must be >= 1");
  if (rc.cutoffs.empty()) throw ConfigError("eval.cutoffs must not be empty");
  for (int k : rc.cutoffs) {
    if (k < 1) throw ConfigError("eval.cutoffs must be >= 1");
    if (k > rc.infer.k_eval)
      throw ConfigError(fmt::format("eval.cutoffs: {} exceeds infer.k_eval = {}", k, rc.infer.k_eval));
  }
  for (std::size_t i = 1; i < rc.bucket_edges.size(); ++i)
    if (rc.bucket_edges[i] <= rc.bucket_edges[i - 1]) throw ConfigError("eval.buckets must be strictly increasing");
  if (rc.ablation_seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  for (int sd : rc.ablation_seeds)
    if (sd < 0) throw ConfigError("ablation.seeds must be >= 0");

  for (const auto& [k, v] : r.hashed) rc.resolved += k + "=" + v + "\n";
  cfg::Config back;
  for (const auto& [k, v] : r.values) back.set(k, v);
  rc.settings = back.values();
  return rc;
}

cfg::Config RunConfig::to_config() const {
  cfg::Config c;
  for (const auto& [k, v] : settings) c.set(k, v);
  c.set("paths.work_dir", work_dir.string());
  c.set("run.threads", std::to_string(threads));
  return c;
}

// ---------------------------------------------------------------------------
// Manifest

std::string Manifest::get(const std::string& key, const std::string& fallback) const {
  for (const auto& [k, v] : entries)
    if (k == key) return v;
  return fallback;
}

std::string Manifest::text() const {
  std::string out;
  for (const auto& [k, v] : entries) out += k + "\t" + v + "\n";
  return out;
}

void Manifest::write(const fs::path& path) const { io::write_text(path, text()); }

Manifest Manifest::read(const fs::path& path) {
  Manifest m;
  std::istringstream in(io::read_text(path));
  std::string line;
  long no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("manifest: expected key<TAB>value in " + path.string(), no);
    m.add(line.substr(0, tab), line.substr(tab + 1));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Stages

void synth(const RunConfig& rc, const Options& opt) {
  const auto corpus = corpus::generate_synthetic(rc.synth);
  for (const auto& p : {rc.interactions, rc.embeddings, rc.hierarchy})
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  corpus::write_interactions(rc.interactions, corpus.log);
  corpus::write_emb1(rc.embeddings, corpus.embeddings.values);
  corpus::write_hierarchy(rc.hierarchy, corpus.hierarchy);
  Stage s(rc, "synth", "synth", rc.synth.seed);
  s.input("interactions", rc.interactions);
  s.input("embeddings", rc.embeddings);
  s.input("hierarchy", rc.hierarchy);
  s.add("items", std::to_string(corpus.embeddings.num_items()));
  s.add("users", std::to_string(corpus.log.num_users()));
  s.add("events", std::to_string(corpus.log.records.size()));
  s.finish();
  say(opt, fmt::format("synth: {} items, {} users, {} events", corpus.embeddings.num_items(),
                       corpus.log.num_users(), corpus.log.records.size()));
}

void build_graph(const RunConfig& rc, const Options& opt) {
  if (rc.graph_source == "full" && !opt.allow_leakage)
    throw ConfigError(
        "coocgraph.source = full reads validation and test interactions; pass --allow-leakage to permit it");
  const auto c = load_corpus(rc);
  const Layout lay{rc.work_dir};
  const auto& seqs = rc.graph_source == "train" ? c.split.train_sequences : c.log.sequences();
  const auto g = graph::build_cooc_graph(seqs, static_cast<int>(c.x.rows()), rc.window);
  const auto aligned = graph::align_embeddings(c.x, g, rc.propagation);
  fs::create_directories(lay.dir("graph"));
  graph::write_graph(lay.graph_tsv(), g);
  corpus::write_emb1(lay.aligned_emb(), aligned);

  Stage s(rc, "build-graph", "graph", rc.seed);
  add_corpus_inputs(s, rc);
  s.add("source", rc.graph_source);
  s.add("edges", std::to_string(g.edges.size()));
  s.output(lay.graph_tsv());
  s.output(lay.aligned_emb());
  s.finish();
  say(opt, fmt::format("build-graph: {} nodes, {} edges ({} split)", g.num_nodes, g.edges.size(), rc.graph_source));
}

void train_tokenizer(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const std::string prov = rc.tokenizer_input == "aligned" ? "h_align" : "raw_x";
  const auto in_path = tokenizer_input_path(rc, prov);
  const auto h = corpus::read_emb1(in_path);
  Rng rng(rc.tokenizer.seed);
  tok::Quantizer q(static_cast<int>(h.cols()), rc.tokenizer, rng);
  const auto res = tok::train_tokenizer(q, h, rc.tokenizer);

  fs::create_directories(lay.dir("tokenizer"));
  auto ckpt = q.to_checkpoint();
  ckpt.meta.emplace_back("provenance", prov);
  nx::write_checkpoint(lay.tokenizer_ckpt(), ckpt);
  std::string log = "epoch\trecon\tquant\tuniform\n";
  for (std::size_t e = 0; e < res.epochs.size(); ++e)
    log += fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\n", e + 1, res.epochs[e].recon, res.epochs[e].quant,
                       res.epochs[e].uniform);
  io::write_text(lay.dir("tokenizer") / "train.log", log);

  Stage s(rc, "train-tokenizer", "tokenizer", rc.tokenizer.seed);
  s.add("levels", std::to_string(rc.tokenizer.levels));
  s.add("codebook_size", std::to_string(rc.tokenizer.codebook_size));
  s.add("provenance", prov);
  s.input(prov == "h_align" ? rel(rc, in_path) : "embeddings", in_path);
  s.output(lay.tokenizer_ckpt());
  s.output(lay.dir("tokenizer") / "train.log");
  s.finish();
  if (!res.epochs.empty())
    say(opt, fmt::format("train-tokenizer: input {}, recon {:.4f} -> {:.4f}", prov, res.initial_recon,
                         res.epochs.back().recon));
}

void assign_sids(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const auto q = load_quantizer(lay);
  const auto tm = stage_manifest(lay, "tokenizer", "train-tokenizer");
  const auto prov = tm.get("provenance");
  const auto in_path = tokenizer_input_path(rc, prov);
  const auto h = corpus::read_emb1(in_path);
  const auto table = tok::assign_sids(q, h);
  const int L = q.config().levels, K = q.config().codebook_size;

  fs::create_directories(lay.dir("sids"));
  tok::write_sid_table(lay.sids_tsv(), table);
  const auto m = tok::compute_cur_icr(table, L, K);
  std::string metrics = tok::format_metrics(m, table);
  for (int l = 0; l < L; ++l) {
    const auto u = tok::usage_stats(table, l);
    metrics += fmt::format("level{}_entropy\t{:.6f}\nlevel{}_max_share\t{:.6f}\n", l + 1, u.entropy, l + 1,
                           u.max_share);
  }
  io::write_text(lay.dir("sids") / "metrics.txt", metrics);

  Stage s(rc, "assign-sids", "sids", q.config().seed);
  s.add("levels", std::to_string(L));
  s.add("codebook_size", std::to_string(K));
  s.add("provenance", prov);
  s.work_input(lay.tokenizer_ckpt());
  s.input(prov == "h_align" ? rel(rc, in_path) : "embeddings", in_path);
  s.output(lay.sids_tsv());
  s.output(lay.dir("sids") / "metrics.txt");
  s.finish();
  say(opt, fmt::format("assign-sids: {} items, {} distinct SIDs, CUR {:.6f}%, ICR {:.4f}", table.num_items(),
                       table.distinct(), 100.0 * m.cur, m.icr));
}

void cluster_codebooks(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const auto q = load_quantizer(lay);
  std::vector<nx::Tensor<double>> books;
  for (int l = 0; l < q.config().levels; ++l) books.push_back(q.codebook(l).cast<double>());
  const auto set = sem::cluster_codebooks(books, rc.clusters, rc.cluster_seed);
  fs::create_directories(lay.centroids_dir());
  sem::write_centroid_set(lay.centroids_dir(), set);

  Stage s(rc, "cluster-codebooks", "semantics", rc.cluster_seed);
  s.add("levels", std::to_string(set.levels()));
  s.add("codebook_size", std::to_string(set.codebook_size()));
  s.add("clusters", std::to_string(set.num_clusters()));
  s.work_input(lay.tokenizer_ckpt());
  s.output(lay.centroids_dir() / "clusters.tsv");
  for (int l = 0; l < set.levels(); ++l) s.output(lay.centroids_dir() / fmt::format("centroids_{}.emb", l));
  s.finish();
  say(opt, fmt::format("cluster-codebooks: {} levels x {} clusters", set.levels(), set.num_clusters()));
}

void train_model(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const auto table = load_sids(lay);
  require(lay.centroids_dir() / "clusters.tsv", "cluster-codebooks");
  const auto centroids = sem::read_centroid_set(lay.centroids_dir());
  const auto q = load_quantizer(lay);
  const auto books = float_codebooks(q);
  const auto c = load_corpus(rc);
  if (table.num_items() != static_cast<int>(c.x.rows()))
    throw ConfigError(fmt::format("SID table covers {} items but the catalog has {}", table.num_items(), c.x.rows()));

  Rng rng(rc.model.seed);
  model::S2GRModel m(rc.model, table.levels(), table.codebook_size(), rng);
  model::TrainInputs in;
  in.data = &c.split;
  in.table = &table;
  in.centroids = &centroids;
  in.codebooks = &books;
  fs::create_directories(lay.dir("model"));
  std::string log = "epoch\tloss_total\tloss_rec\tloss_think\tval_hr10\n";
  try {
    model::train_model(m, in, {}, [&](const model::EpochLog& e) {
      log += model::format_epoch_log(e) + "\n";
      say(opt, fmt::format("train-model: epoch {} loss {:.4f} (rec {:.4f}, think {:.4f}) val HR@10 {:.4f}", e.epoch,
                           e.loss_total, e.loss_rec, e.loss_think, e.val_hr10));
    });
  } catch (const NumericalError&) {
    nx::write_checkpoint(lay.dir("model") / "last_good.ckpt", m.to_checkpoint());
    io::write_text(lay.dir("model") / "train.log", log);
    throw;
  }
  nx::write_checkpoint(lay.model_ckpt(), m.to_checkpoint());
  io::write_text(lay.dir("model") / "train.log", log);

  Stage s(rc, "train-model", "model", rc.model.seed);
  s.add("levels", std::to_string(table.levels()));
  s.add("codebook_size", std::to_string(table.codebook_size()));
  s.add("no_reason", rc.model.no_reason ? "true" : "false");
  s.add("no_think_loss", rc.model.no_think_loss ? "true" : "false");
  add_corpus_inputs(s, rc);
  s.work_input(lay.sids_tsv());
  s.work_input(lay.centroids_dir() / "clusters.tsv");
  s.work_input(lay.tokenizer_ckpt());
  s.output(lay.model_ckpt());
  s.output(lay.dir("model") / "train.log");
  s.finish();
}

void infer(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const auto table = load_sids(lay);
  require(lay.model_ckpt(), "train-model");
  const auto m = model::S2GRModel::from_checkpoint(nx::read_checkpoint(lay.model_ckpt()));
  const auto c = load_corpus(rc);
  fs::create_directories(lay.dir("infer"));

  Stage s(rc, "infer", "infer", rc.seed);
  s.add("levels", std::to_string(m.levels()));
  s.add("codebook_size", std::to_string(m.codebook_size()));
  add_corpus_inputs(s, rc);
  s.work_input(lay.model_ckpt());
  s.work_input(lay.sids_tsv());
  auto run = [&](bool constrained) {
    auto cfg = rc.infer;
    cfg.constrain = constrained;
    const auto recs = infer::recommend(m, c.split.test, table, cfg);
    infer::write_recommendations(lay.recs_tsv(constrained), recs, &c.log.user_names);
    s.output(lay.recs_tsv(constrained));
    say(opt, fmt::format("infer: {} test users ({})", recs.size(), constrained ? "constrained" : "unconstrained"));
  };
  run(rc.infer.constrain);
  if (rc.report_unconstrained && rc.infer.constrain) run(false);
  s.finish();
}

eval::MetricReport evaluate(const RunConfig& rc, const Options& opt) {
  const Layout lay{rc.work_dir};
  const auto im = stage_manifest(lay, "infer", "infer");
  const auto mm = stage_manifest(lay, "model", "train-model");
  const auto sm = stage_manifest(lay, "sids", "assign-sids");
  for (const char* key : {"levels", "codebook_size"}) {
    const auto a = sm.get(key), b = mm.get(key), d = im.get(key);
    if (a != b || b != d)
      throw ConfigError(fmt::format("lineage mismatch: {} is {} (assign-sids), {} (train-model), {} (infer)", key, a,
                                    b, d));
  }
  const bool constrained = rc.infer.constrain;
  require(lay.recs_tsv(constrained), "infer");
  const auto c = load_corpus(rc);

  std::vector<int> targets, lengths;
  std::map<int, std::size_t> slot;
  for (const auto& ex : c.split.test) {
    slot[ex.user] = targets.size();
    targets.push_back(ex.target);
    lengths.push_back(static_cast<int>(ex.history.size()));
  }
  auto rankings_from = [&](const fs::path& p) {
    std::vector<eval::Ranking> r(targets.size());
    for (const auto& rec : infer::read_recommendations(p, &c.log.user_names)) {
      const auto it = slot.find(rec.user);
      if (it != slot.end()) r[it->second] = rec.ranked.items;
    }
    return r;
  };

  const auto main_rank = rankings_from(lay.recs_tsv(constrained));
  const auto report = eval::evaluate(main_rank, targets, rc.cutoffs);
  std::vector<eval::ReportRow> rows{{constrained ? "constrained" : "unconstrained", report}};
  const bool both = constrained && rc.report_unconstrained && fs::exists(lay.recs_tsv(false));
  if (both) rows.push_back({"unconstrained", eval::evaluate(rankings_from(lay.recs_tsv(false)), targets, rc.cutoffs)});
  std::vector<eval::ReportRow> buckets;
  for (const auto& b : eval::bucket_by_length(main_rank, targets, lengths, rc.bucket_edges, rc.cutoffs)) {
    auto r = b.report;
    if (r.n == 0) r.cutoffs.clear();
    buckets.push_back({"len " + b.label(), r});
  }

  fs::create_directories(lay.dir("eval"));
  const auto text = eval::format_table(rows) + "\nby history length\n" + eval::format_table(buckets);
  auto all_rows = rows;
  all_rows.insert(all_rows.end(), buckets.begin(), buckets.end());
  io::write_text(lay.report_txt(), text);
  io::write_text(lay.dir("eval") / "report.tsv", eval::format_tsv(all_rows));

  Stage s(rc, "evaluate", "eval", rc.seed);
  s.add("levels", sm.get("levels"));
  s.add("codebook_size", sm.get("codebook_size"));
  add_corpus_inputs(s, rc);
  s.work_input(lay.recs_tsv(constrained));
  if (both) s.work_input(lay.recs_tsv(false));
  s.output(lay.report_txt());
  s.output(lay.dir("eval") / "report.tsv");
  s.finish();
  say(opt, text);
  return report;
}

eval::MetricReport run_all(const RunConfig& rc, const Options& opt) {
  build_graph(rc, opt);
  train_tokenizer(rc, opt);
  assign_sids(rc, opt);
  cluster_codebooks(rc, opt);
  train_model(rc, opt);
  infer(rc, opt);
  return evaluate(rc, opt);
}

RunConfig apply_variant(const RunConfig& base, const eval::AblationVariant& v) {
  auto c = base.to_config();
  c.set("tokenizer.balance", v.balance && base.tokenizer.balance ? "true" : "false");
  if (!v.uniformity) c.set("tokenizer.w_uniform", "0");
  if (!v.graph_aligned) c.set("tokenizer.input", "raw");
  if (v.no_reason) c.set("model.no_reason", "true");
  if (v.no_think_loss) c.set("model.no_think_loss", "true");
  return RunConfig::from(c, false);
}

std::vector<eval::AblationRow> ablate(const RunConfig& rc, const Options& opt) {
  const auto variants = eval::standard_variants();
  const Layout lay{rc.work_dir};
  std::map<std::string, std::vector<eval::MetricReport>> per_variant;
  Stage s(rc, "ablate", "ablate", rc.seed);
  add_corpus_inputs(s, rc);
  std::vector<eval::ReportRow> seed_rows;

  for (int seed : rc.ablation_seeds) {
    // Variants with identical tokenizer settings share one tokenizer run.
    std::map<std::string, fs::path> tokenizer_runs;
    for (const auto& v : variants) {
      auto c = apply_variant(rc, v).to_config();
      const auto dir = lay.dir("ablate") / slug(v.name) / fmt::format("seed{}", seed);
      c.set("paths.work_dir", dir.string());
      for (const char* k : {"tokenizer.seed", "semantics.seed", "model.seed"}) c.set(k, std::to_string(seed));
      c.set("run.seed", std::to_string(seed));
      const auto vrc = RunConfig::from(c, false);
      say(opt, fmt::format("ablate: {} seed {}", v.name, seed));

      const auto key = fmt::format("{}|{}|{}", vrc.tokenizer.balance, vrc.tokenizer.w_uniform, vrc.tokenizer_input);
      if (const auto it = tokenizer_runs.find(key); it != tokenizer_runs.end()) {
        for (const char* stage : {"graph", "tokenizer", "sids", "semantics"}) {
          if (!fs::exists(it->second / stage)) continue;
          fs::create_directories(dir / stage);
          fs::copy(it->second / stage, dir / stage,
                   fs::copy_options::recursive | fs::copy_options::overwrite_existing);
        }
      } else {
        if (vrc.tokenizer_input == "aligned") build_graph(vrc, opt);
        train_tokenizer(vrc, opt);
        assign_sids(vrc, opt);
        cluster_codebooks(vrc, opt);
        tokenizer_runs[key] = dir;
      }
      train_model(vrc, opt);
      infer(vrc, opt);
      const auto rep = evaluate(vrc, opt);
      per_variant[v.name].push_back(rep);
      seed_rows.push_back({fmt::format("{} (seed {})", v.name, seed), rep});
      const auto prov = Manifest::read(Layout{dir}.manifest("sids")).get("provenance");
      s.add(fmt::format("provenance:{}:seed{}", slug(v.name), seed), prov);
      s.input(fmt::format("report:{}:seed{}", slug(v.name), seed), Layout{dir}.report_txt());
    }
  }

  std::vector<eval::AblationRow> out;
  for (const auto& v : variants) {
    const auto& reps = per_variant[v.name];
    eval::MetricReport med;
    med.cutoffs = reps.front().cutoffs;
    med.n = reps.front().n;
    for (std::size_t k = 0; k < med.cutoffs.size(); ++k) {
      std::vector<double> hr, nd;
      for (const auto& r : reps) {
        hr.push_back(r.hr[k]);
        nd.push_back(r.ndcg[k]);
      }
      med.hr.push_back(median(hr));
      med.ndcg.push_back(median(nd));
    }
    out.push_back({v.name, med});
  }

  std::vector<eval::ReportRow> rows;
  for (const auto& r : out) rows.push_back({r.name, r.report});
  const auto table = fmt::format("median over {} seed(s)\n", rc.ablation_seeds.size()) + eval::format_table(rows) +
                     "\nper seed\n" + eval::format_table(seed_rows);
  auto tsv_rows = rows;
  tsv_rows.insert(tsv_rows.end(), seed_rows.begin(), seed_rows.end());
  io::write_text(lay.dir("ablate") / "report.txt", table);
  io::write_text(lay.dir("ablate") / "report.tsv", eval::format_tsv(tsv_rows));
  s.output(lay.dir("ablate") / "report.txt");
  s.output(lay.dir("ablate") / "report.tsv");
  s.finish();
  say(opt, table);
  return out;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"build-graph", "train-tokenizer", "assign-sids", "cluster-codebooks",
                                              "train-model", "infer",           "evaluate",    "ablate",
                                              "synth",       "all"};
  return names;
}

void run_command(const std::string& name, const RunConfig& rc, const Options& opt) {
  if (name == "synth") return synth(rc, opt);
  if (name == "build-graph") return build_graph(rc, opt);
  if (name == "train-tokenizer") return train_tokenizer(rc, opt);
  if (name == "assign-sids") return assign_sids(rc, opt);
  if (name == "cluster-codebooks") return cluster_codebooks(rc, opt);
  if (name == "train-model") return train_model(rc, opt);
  if (name == "infer") return infer(rc, opt);
  if (name == "evaluate") {
    evaluate(rc, opt);
    return;
  }
  if (name == "ablate") {
    ablate(rc, opt);
    return;
  }
  if (name == "all") {
    run_all(rc, opt);
    return;
  }
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace s2gr::pipeline
