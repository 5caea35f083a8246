#include <fmt/format.h>

#include <cmath>
#include <numeric>

#include "s2gr/errors.hpp"
#include "s2gr/inference.hpp"
#include "s2gr/model.hpp"
#include "s2gr/numerics/adam.hpp"

namespace s2gr::model {

namespace {

double default_validation(const S2GRModel& m, const corpus::SplitDataset& data, const tok::SidTable& table) {
  const auto& cfg = m.config();
  const std::size_t n = std::min(data.valid.size(), static_cast<std::size_t>(cfg.val_users));
  if (n == 0) return 0;
  infer::InferenceConfig ic;
  ic.beam = cfg.val_beam;
  ic.k_eval = 10;
  const auto recs = infer::recommend(m, std::span(data.valid.data(), n), table, ic);
  int hits = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (int item : recs[i].ranked.items) hits += item == data.valid[i].target;
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TrainReport train_model(S2GRModel& model, const TrainInputs& in, const Validator& validate,
                        const std::function<void(const EpochLog&)>& on_epoch) {
  if (!in.data || !in.table || !in.centroids) throw ConfigError("train_model: dataset, SID table and centroids required");
  const auto& cfg = model.config();
  const auto& table = *in.table;
  if (table.levels() != model.levels() || table.codebook_size() != model.codebook_size())
    throw ConfigError(fmt::format("SID table (L={}, K={}) does not match the model (L={}, K={})", table.levels(),
                                  table.codebook_size(), model.levels(), model.codebook_size()));
  const bool need_align = !cfg.no_reason && !cfg.no_think_loss;
  if (need_align) {
    const auto& cs = *in.centroids;
    if (cs.levels() != model.levels() || cs.codebook_size() != model.codebook_size())
      throw ConfigError("centroid set does not match the SID table's L and K");
    if (cs.dim() != cfg.d_model)
      throw ConfigError(fmt::format("centroid dim {} must equal model.d_model {}", cs.dim(), cfg.d_model));
    if (cs.num_clusters() != cfg.clusters)
      throw ConfigError(fmt::format("centroid set has {} clusters, model.clusters = {}", cs.num_clusters(),
                                    cfg.clusters));
  }
  AlignContext ctx = need_align ? AlignContext::from(*in.centroids) : AlignContext{};
  ctx.codebooks = in.codebooks;

  const auto examples = in.data->training_examples(1);
  if (examples.empty()) throw ConfigError("train_model: no training examples");
  std::vector<std::vector<SemanticId>> hist(examples.size());
  std::vector<SemanticId> target(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& h = examples[i].history;
    const auto start = h.size() > static_cast<std::size_t>(cfg.max_history) ? h.size() - cfg.max_history : 0;
    for (std::size_t j = start; j < h.size(); ++j) hist[i].push_back(table.sid(h[j]));
    target[i] = table.sid(examples[i].target);
  }

  Rng rng(cfg.seed ^ 0x5eed5eedULL);
  nx::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.clip_norm = cfg.clip_norm;
  auto& store = model.params();
  nx::Adam<float> adam(store, ac);
  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<SemanticId>> bh;
      std::vector<SemanticId> bt;
      for (std::size_t i = start; i < end; ++i) {
        bh.push_back(hist[order[i]]);
        bt.push_back(target[order[i]]);
      }
      std::vector<nx::Tensor<float>> last_good;
      for (std::size_t p = 0; p < store.size(); ++p) last_good.push_back(store[p].value);
      auto restore = [&] {
        for (std::size_t p = 0; p < store.size(); ++p) store[p].value = last_good[p];
      };

      store.zero_grad();
      nx::Tape<float> tape;
      const auto w = model.bind(tape);
      const auto enc = model.encode_history(w, bh, true, &rng);
      const auto cross = model.cross_kv(w, enc);
      const auto lb = total_loss(model, w, cross, bt, ctx, true, &rng);
      if (!std::isfinite(lb.total))
        throw NumericalError(fmt::format("non-finite training loss at epoch {}", epoch));
      tape.backward(lb.total_var);
      const double gnorm = adam.step();
      bool finite = std::isfinite(gnorm);
      for (std::size_t p = 0; finite && p < store.size(); ++p) finite = store[p].value.all_finite();
      if (!finite) {
        restore();
        throw NumericalError(fmt::format("non-finite parameters after an update at epoch {}", epoch));
      }
      const double n = static_cast<double>(end - start);
      log.loss_total += lb.total * n;
      log.loss_rec += lb.rec * n;
      log.loss_think += lb.think * n;
    }
    const double n = static_cast<double>(order.size());
    log.loss_total /= n;
    log.loss_rec /= n;
    log.loss_think /= n;
    if (validate)
      log.val_hr10 = validate(model);
    else if (cfg.val_users > 0)
      log.val_hr10 = default_validation(model, *in.data, table);
    report.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return report;
}

}  // namespace s2gr::model
