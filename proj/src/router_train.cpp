#include "duet/router_train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace duet::router {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw InvalidArgument("train config: lr must be positive");
  if (batch_size < 1)
    throw InvalidArgument("train config: batch_size must be >= 1");
  if (max_epochs < 0)
    throw InvalidArgument("train config: max_epochs must be >= 0");
  if (max_epochs > 0 && (patience < 1 || patience > max_epochs))
    throw InvalidArgument("train config: patience must be in [1, max_epochs]");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw InvalidArgument("train config: betas must be in [0,1)");
  if (weight_decay < 0.0)
    throw InvalidArgument("train config: weight_decay must be >= 0");
}

std::vector<Sample> make_samples(const label::LabelDataset& ds,
                                 const EmbeddingTable& embeddings,
                                 const RouterConfig& cfg) {
  cfg.validate();
  if (embeddings.dim != cfg.embed_dim)
    throw ShapeMismatch("make_samples: embedding dim does not match config");
  std::vector<Sample> out;
  out.reserve(ds.records.size());
  for (const auto& r : ds.records) {
    if (r.hidden.empty()) continue;  // backend exposed no hidden state
    if (r.topk.size() != static_cast<std::size_t>(cfg.topk))
      throw ShapeMismatch("make_samples: record top-k width " +
                          std::to_string(r.topk.size()) +
                          " does not match config " + std::to_string(cfg.topk));
    if (r.hidden.size() != static_cast<std::size_t>(cfg.hidden_dim_in))
      throw ShapeMismatch("make_samples: hidden dim mismatch");
    Sample s;
    s.logits.reserve(r.topk.size());
    for (const auto& [id, v] : r.topk) s.logits.push_back(v);
    s.hidden = r.hidden;
    const auto row = embeddings.row(r.slm_token);
    s.embed.assign(row.begin(), row.end());
    s.divergent = r.label.kind == label::Kind::divergent;
    out.push_back(std::move(s));
  }
  return out;
}

double recall_at_matched_rate(std::span<const double> probs,
                              std::span<const std::uint8_t> labels) {
  const std::size_t n = probs.size();
  if (labels.size() != n)
    throw InvalidArgument("recall: probs/labels size mismatch");
  std::size_t m = 0;
  for (std::uint8_t b : labels) m += b ? 1 : 0;
  if (m == 0) return 1.0;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return probs[a] > probs[b];
  });
  std::size_t tp = 0;
  for (std::size_t i = 0; i < m; ++i) tp += labels[idx[i]] ? 1 : 0;
  return static_cast<double>(tp) / static_cast<double>(m);
}

double roc_auc(std::span<const double> scores,
               std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  if (labels.size() != n)
    throw InvalidArgument("roc_auc: scores/labels size mismatch");
  std::size_t n_pos = 0;
  for (std::uint8_t b : labels) n_pos += b ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  // Average ranks over ties, then the Mann-Whitney statistic.
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t t = 0; t < n; ++t)
    if (labels[t]) rank_sum_pos += rank[t];
  const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace {

// Decoupled weight decay applies to weight matrices only.
bool decayed(const std::string& name) { return name.ends_with(".w"); }

struct AdamState {
  RouterWeights m;
  RouterWeights v;
  long step = 0;
};

void adam_update(RouterWeights& w, const Grads& g, AdamState& st,
                 const TrainConfig& tc) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.step));
  auto wt = w.tensors();
  auto gt = g.tensors();
  auto mt = st.m.tensors();
  auto vt = st.v.tensors();
  for (std::size_t i = 0; i < wt.size(); ++i) {
    const bool decay = decayed(wt[i].first);
    auto& wd = wt[i].second->data;
    const auto& gd = gt[i].second->data;
    auto& md = mt[i].second->data;
    auto& vd = vt[i].second->data;
    for (std::size_t j = 0; j < wd.size(); ++j) {
      md[j] = tc.beta1 * md[j] + (1.0 - tc.beta1) * gd[j];
      vd[j] = tc.beta2 * vd[j] + (1.0 - tc.beta2) * gd[j] * gd[j];
      const double mhat = md[j] / bc1;
      const double vhat = vd[j] / bc2;
      wd[j] -= tc.lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
      if (decay) wd[j] -= tc.lr * tc.weight_decay * wd[j];
    }
  }
}

void quantize_to_f32(RouterWeights& w) {
  for (auto& [name, t] : w.tensors())
    for (double& v : t->data) v = static_cast<double>(static_cast<float>(v));
}

void check_finite(const RouterWeights& w, int epoch, double loss_value) {
  if (!std::isfinite(loss_value)) {
    std::ostringstream os;
    os << "training diverged: non-finite loss " << loss_value << " at epoch "
       << epoch;
    throw TrainingDiverged(os.str());
  }
  for (const auto& [name, t] : w.tensors())
    for (double v : t->data)
      if (!std::isfinite(v))
        throw TrainingDiverged("training diverged: non-finite value in " +
                               name + " at epoch " + std::to_string(epoch));
}

}  // namespace

TrainResult train(const label::LabelDataset& train_ds,
                  const label::LabelDataset& val_ds, const TrainConfig& tc,
                  const RouterConfig& rc, const EmbeddingTable& embeddings) {
  tc.validate();
  rc.validate();

  TrainResult res;
  res.weights = RouterWeights::init(rc, tc.seed);
  if (tc.max_epochs == 0) {
    if (tc.quantize_f32) quantize_to_f32(res.weights);
    return res;
  }

  const std::vector<Sample> train_samples =
      make_samples(train_ds, embeddings, rc);
  const std::vector<Sample> val_samples = make_samples(val_ds, embeddings, rc);
  if (train_samples.empty() || val_samples.empty())
    throw InvalidArgument("train: empty train or validation sample set");

  std::size_t n_pos = 0;
  for (const auto& s : train_samples) n_pos += s.divergent ? 1 : 0;
  if (n_pos == 0 || n_pos == train_samples.size())
    throw InvalidArgument("train: training set must contain both classes");
  const ClassWeights cw =
      ClassWeights::from_counts(n_pos, train_samples.size() - n_pos);

  Labels val_labels;
  val_labels.reserve(val_samples.size());
  for (const auto& s : val_samples) val_labels.push_back(s.divergent ? 1 : 0);

  RouterWeights w = res.weights;
  AdamState st{RouterWeights::zeros(rc), RouterWeights::zeros(rc), 0};
  Rng shuffle_rng(mix_seed(tc.seed, 1));
  Rng dropout_rng(mix_seed(tc.seed, 2));

  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Sample> batch;

  double best_recall = -1.0;
  double best_loss = 0.0;
  int since_best = 0;

  for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
    // Fisher-Yates with the run's own rng keeps epochs reproducible.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size();
         off += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end =
          std::min(order.size(), off + static_cast<std::size_t>(tc.batch_size));
      batch.clear();
      for (std::size_t i = off; i < end; ++i)
        batch.push_back(train_samples[order[i]]);
      auto [l, g] = loss_and_grads(w, batch, cw, true, &dropout_rng);
      if (!std::isfinite(l)) check_finite(w, epoch, l);
      adam_update(w, g, st, tc);
      epoch_loss += l;
      ++batches;
    }
    check_finite(w, epoch, epoch_loss);

    std::vector<double> val_probs(val_samples.size());
    for (std::size_t i = 0; i < val_samples.size(); ++i)
      val_probs[i] = forward(w, val_samples[i]);
    EpochStats es;
    es.train_loss = epoch_loss / static_cast<double>(batches);
    es.val_loss = loss(w, val_samples, cw);
    es.val_recall = recall_at_matched_rate(val_probs, val_labels);
    res.history.push_back(es);

    const bool improved =
        es.val_recall > best_recall ||
        (es.val_recall == best_recall && es.val_loss < best_loss);
    if (improved) {
      best_recall = es.val_recall;
      best_loss = es.val_loss;
      res.best_epoch = epoch;
      res.weights = w;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
  }

  if (tc.quantize_f32) quantize_to_f32(res.weights);
  return res;
}

namespace {

SweepPoint sweep_point(double threshold, std::span<const double> probs,
                       std::span<const std::uint8_t> labels,
                       const CalibrationTarget& t) {
  SweepPoint p;
  p.threshold = threshold;
  std::size_t above = 0, pos = 0, tp = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool routed = probs[i] > threshold;
    above += routed ? 1 : 0;
    if (labels[i]) {
      ++pos;
      tp += routed ? 1 : 0;
    }
  }
  p.usage = probs.empty()
                ? 0.0
                : static_cast<double>(above) / static_cast<double>(probs.size());
  p.recall = pos == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(pos);
  p.params_b = t.slm_params_b + t.router_params_b + p.usage * t.llm_params_b;
  return p;
}

bool admissible(const SweepPoint& p, const CalibrationTarget& t) {
  switch (t.kind) {
    case TargetKind::usage_max: return p.usage <= t.value;
    case TargetKind::params_max: return p.params_b <= t.value;
    case TargetKind::recall_min: return p.recall >= t.value;
  }
  throw InvalidArgument("calibrate: bad target kind");
}

// Distance from satisfying the constraint, for the unachievable report.
double violation(const SweepPoint& p, const CalibrationTarget& t) {
  switch (t.kind) {
    case TargetKind::usage_max: return p.usage - t.value;
    case TargetKind::params_max: return p.params_b - t.value;
    case TargetKind::recall_min: return t.value - p.recall;
  }
  throw InvalidArgument("calibrate: bad target kind");
}

}  // namespace

Calibration calibrate_probs(std::span<const double> probs,
                            std::span<const std::uint8_t> labels,
                            const CalibrationTarget& target) {
  if (probs.size() != labels.size())
    throw InvalidArgument("calibrate: probs/labels size mismatch");
  Calibration cal;
  cal.sweep.reserve(101);
  for (int i = 0; i <= 100; ++i)
    cal.sweep.push_back(
        sweep_point(static_cast<double>(i) / 100.0, probs, labels, target));

  for (std::size_t i = cal.sweep.size(); i-- > 0;) {
    const SweepPoint& p = cal.sweep[i];
    if (admissible(p, target)) {
      cal.threshold = p.threshold;
      cal.usage = p.usage;
      cal.recall = p.recall;
      cal.params_b = p.params_b;
      return cal;
    }
  }
  const auto closest = std::min_element(
      cal.sweep.begin(), cal.sweep.end(),
      [&](const SweepPoint& a, const SweepPoint& b) {
        return violation(a, target) < violation(b, target);
      });
  std::ostringstream os;
  os << "no threshold meets target " << target_to_string(target)
     << "; closest at threshold " << closest->threshold << " (usage "
     << closest->usage << ", recall " << closest->recall << ", params "
     << closest->params_b << "B)";
  throw TargetUnachievable(os.str());
}

Calibration calibrate_threshold(const RouterWeights& w,
                                const label::LabelDataset& val,
                                const CalibrationTarget& target,
                                const EmbeddingTable& embeddings) {
  const std::vector<Sample> samples = make_samples(val, embeddings, w.cfg);
  if (samples.empty()) throw InvalidArgument("calibrate: empty validation set");
  std::vector<double> probs(samples.size());
  Labels labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    probs[i] = forward(w, samples[i]);
    labels[i] = samples[i].divergent ? 1 : 0;
  }
  return calibrate_probs(probs, labels, target);
}

std::string target_to_string(const CalibrationTarget& t) {
  std::ostringstream os;
  switch (t.kind) {
    case TargetKind::usage_max: os << "usage<=" << t.value; break;
    case TargetKind::params_max: os << "params<=" << t.value; break;
    case TargetKind::recall_min: os << "recall>=" << t.value; break;
  }
  return os.str();
}

CalibrationTarget target_from_string(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos)
    throw InvalidArgument("target: expected kind=value, got '" + s + "'");
  const std::string kind = s.substr(0, eq);
  CalibrationTarget t;
  try {
    t.value = std::stod(s.substr(eq + 1));
  } catch (const std::exception&) {
    throw InvalidArgument("target: bad numeric value in '" + s + "'");
  }
  if (kind == "usage")
    t.kind = TargetKind::usage_max;
  else if (kind == "params")
    t.kind = TargetKind::params_max;
  else if (kind == "recall")
    t.kind = TargetKind::recall_min;
  else
    throw InvalidArgument("target: unknown kind '" + kind + "'");
  return t;
}

}  // namespace duet::router
