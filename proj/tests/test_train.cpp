#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "duet/router_train.hpp"

using namespace duet;
using router::CalibrationTarget;
using router::ClassWeights;
using router::RouterConfig;
using router::RouterWeights;
using router::Sample;
using router::TargetKind;
using router::TrainConfig;

namespace {

RouterConfig train_config() {
  RouterConfig rc;
  rc.topk = 4;
  rc.hidden_dim_in = 2;
  rc.embed_dim = 3;
  rc.width = 8;
  rc.blocks = 2;
  rc.expansion = 2;
  rc.dropout = 0.0;
  return rc;
}

// Dataset whose divergence is decided by the sign of the first hidden unit;
// the other inputs are noise. Any competent trainer separates it.
label::LabelDataset make_signed_dataset(const RouterConfig& rc, std::size_t n,
                                        std::uint64_t seed, bool shuffle_labels,
                                        int vocab) {
  label::LabelDataset ds;
  ds.k = rc.topk;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    label::StepRecord r;
    r.query_index = 0;
    r.position = i;
    const bool divergent = rng.uniform() < 0.35;
    const double h0 = (divergent ? 1.0 : -1.0) + 0.3 * rng.normal();
    r.hidden = {h0, rng.normal()};
    std::vector<double> vals;
    for (int k = 0; k < rc.topk; ++k) vals.push_back(rng.normal());
    std::sort(vals.rbegin(), vals.rend());
    for (int k = 0; k < rc.topk; ++k)
      r.topk.emplace_back(k % vocab, vals[static_cast<std::size_t>(k)]);
    r.slm_token = Token{static_cast<std::int32_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1))};
    r.llm_token = r.slm_token;
    const bool label = shuffle_labels ? rng.uniform() < 0.35 : divergent;
    r.label.kind = label ? label::Kind::divergent : label::Kind::neutral;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

Sample random_sample(const RouterConfig& cfg, Rng& rng, bool divergent) {
  Sample s;
  for (int i = 0; i < cfg.topk; ++i) s.logits.push_back(rng.normal());
  std::sort(s.logits.rbegin(), s.logits.rend());
  for (int i = 0; i < cfg.hidden_dim_in; ++i) s.hidden.push_back(rng.normal());
  for (int i = 0; i < cfg.embed_dim; ++i) s.embed.push_back(rng.normal());
  s.divergent = divergent;
  return s;
}

// Central-difference check of every parameter gradient at a generic point.
void check_gradients(const RouterConfig& cfg, std::uint64_t seed) {
  RouterWeights w = RouterWeights::init(cfg, seed);
  Rng rng(seed + 13);
  for (auto& [name, t] : w.tensors())
    for (double& v : t->data) v += 0.3 * rng.normal();

  std::vector<Sample> batch;
  for (int i = 0; i < 6; ++i)
    batch.push_back(random_sample(cfg, rng, i % 3 == 0));
  const ClassWeights cw = ClassWeights::from_counts(2, 4);

  const auto [base_loss, grads] = router::loss_and_grads(w, batch, cw);
  CHECK(std::isfinite(base_loss));

  const double h = 1e-5;
  auto wt = w.tensors();
  auto gt = grads.tensors();
  double worst = 0.0;
  for (std::size_t ti = 0; ti < wt.size(); ++ti) {
    auto& data = wt[ti].second->data;
    const auto& gdata = gt[ti].second->data;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + h;
      const double lp = router::loss(w, batch, cw);
      data[j] = saved - h;
      const double lm = router::loss(w, batch, cw);
      data[j] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = gdata[j];
      const double rel =
          std::fabs(g - fd) / std::max({1e-4, std::fabs(g), std::fabs(fd)});
      worst = std::max(worst, rel);
    }
  }
  CAPTURE(seed);
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  check_gradients(train_config(), 51);

  RouterConfig narrow = train_config();
  narrow.width = 3;
  narrow.blocks = 1;
  narrow.topk = 2;
  narrow.hidden_dim_in = 1;
  check_gradients(narrow, 52);

  RouterConfig wide = train_config();
  wide.width = 5;
  wide.blocks = 3;
  wide.expansion = 3;
  wide.embed_dim = 2;
  check_gradients(wide, 53);
}

TEST_CASE("recall at matched positive rate") {
  using router::recall_at_matched_rate;
  const std::vector<std::uint8_t> labels{1, 0, 1, 0};
  CHECK(recall_at_matched_rate(std::vector<double>{0.9, 0.8, 0.1, 0.2},
                               labels) == doctest::Approx(0.5));
  CHECK(recall_at_matched_rate(std::vector<double>{0.9, 0.1, 0.8, 0.2},
                               labels) == doctest::Approx(1.0));
  CHECK(recall_at_matched_rate(std::vector<double>{0.1, 0.9, 0.2, 0.8},
                               labels) == doctest::Approx(0.0));
  // No positives: vacuously perfect.
  CHECK(recall_at_matched_rate(std::vector<double>{0.4, 0.6},
                               std::vector<std::uint8_t>{0, 0}) == 1.0);
  // Ties resolve by original order (stable sort).
  CHECK(recall_at_matched_rate(std::vector<double>{0.5, 0.5},
                               std::vector<std::uint8_t>{0, 1}) == 0.0);
  CHECK_THROWS_AS((void)recall_at_matched_rate(std::vector<double>{0.5},
                                               labels),
                  InvalidArgument);
}

TEST_CASE("rank-based auc") {
  using router::roc_auc;
  CHECK(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8},
                std::vector<std::uint8_t>{0, 0, 1, 1}) ==
        doctest::Approx(0.75));
  CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.7, 0.8},
                std::vector<std::uint8_t>{0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(roc_auc(std::vector<double>{0.8, 0.7, 0.2, 0.1},
                std::vector<std::uint8_t>{0, 0, 1, 1}) == doctest::Approx(0.0));
  // All-tied scores and single-class inputs are chance level.
  CHECK(roc_auc(std::vector<double>{0.5, 0.5},
                std::vector<std::uint8_t>{1, 0}) == doctest::Approx(0.5));
  CHECK(roc_auc(std::vector<double>{0.3, 0.9},
                std::vector<std::uint8_t>{1, 1}) == 0.5);
  CHECK_THROWS_AS((void)roc_auc(std::vector<double>{0.5},
                                std::vector<std::uint8_t>{1, 0}),
                  InvalidArgument);
}

TEST_CASE("sample extraction from labeled records") {
  const auto rc = train_config();
  auto ds = make_signed_dataset(rc, 20, 3, false, 6);
  ds.records[4].hidden.clear();  // remote-style record without a hidden state
  const auto table = EmbeddingTable::derive(99, 6, rc.embed_dim);

  const auto samples = router::make_samples(ds, table, rc);
  REQUIRE(samples.size() == 19);
  std::size_t si = 0;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (i == 4) continue;
    const auto& r = ds.records[i];
    const auto& s = samples[si++];
    for (std::size_t k = 0; k < r.topk.size(); ++k)
      CHECK(s.logits[k] == r.topk[k].second);
    CHECK(s.hidden == r.hidden);
    const auto row = table.row(r.slm_token);
    CHECK(std::equal(s.embed.begin(), s.embed.end(), row.begin()));
    CHECK(s.divergent == (r.label.kind == label::Kind::divergent));
  }

  // Mismatched widths are structural errors, not silent truncation.
  auto bad_rc = rc;
  bad_rc.topk = rc.topk + 1;
  CHECK_THROWS_AS((void)router::make_samples(ds, table, bad_rc), ShapeMismatch);
  bad_rc = rc;
  bad_rc.hidden_dim_in = 5;
  CHECK_THROWS_AS((void)router::make_samples(ds, table, bad_rc), ShapeMismatch);
  const auto wrong_table = EmbeddingTable::derive(99, 6, rc.embed_dim + 2);
  CHECK_THROWS_AS((void)router::make_samples(ds, wrong_table, rc),
                  ShapeMismatch);
}

TEST_CASE("training separates a sign-decided dataset") {
  const auto rc = train_config();
  const int vocab = 6;
  const auto train_ds = make_signed_dataset(rc, 400, 71, false, vocab);
  const auto val_ds = make_signed_dataset(rc, 200, 72, false, vocab);
  const auto table = EmbeddingTable::derive(99, vocab, rc.embed_dim);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 32;
  tc.max_epochs = 40;
  tc.patience = 10;
  tc.seed = 7;

  const auto res = router::train(train_ds, val_ds, tc, rc, table);
  REQUIRE_FALSE(res.history.empty());
  CHECK(res.history.size() <= 40);
  REQUIRE(res.best_epoch >= 0);
  REQUIRE(static_cast<std::size_t>(res.best_epoch) < res.history.size());

  const auto val_samples = router::make_samples(val_ds, table, rc);
  std::vector<double> probs;
  router::Labels labels;
  for (const auto& s : val_samples) {
    probs.push_back(router::forward(res.weights, s));
    labels.push_back(s.divergent ? 1 : 0);
  }
  const double recall = router::recall_at_matched_rate(probs, labels);
  CHECK(recall >= 0.99);
  CHECK(router::roc_auc(probs, labels) >= 0.99);
  CHECK(res.history[static_cast<std::size_t>(res.best_epoch)].val_recall ==
        doctest::Approx(recall));

  // The exact same configuration reproduces the exact same network.
  const auto res2 = router::train(train_ds, val_ds, tc, rc, table);
  CHECK(res2.weights == res.weights);
  CHECK(res2.best_epoch == res.best_epoch);
}

TEST_CASE("label-shuffled data trains to chance level") {
  const auto rc = train_config();
  const int vocab = 6;
  const auto train_ds = make_signed_dataset(rc, 400, 81, true, vocab);
  const auto val_ds = make_signed_dataset(rc, 200, 82, true, vocab);
  const auto table = EmbeddingTable::derive(99, vocab, rc.embed_dim);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 32;
  tc.max_epochs = 20;
  tc.patience = 20;
  tc.seed = 8;

  const auto res = router::train(train_ds, val_ds, tc, rc, table);
  const auto val_samples = router::make_samples(val_ds, table, rc);
  std::vector<double> probs;
  router::Labels labels;
  for (const auto& s : val_samples) {
    probs.push_back(router::forward(res.weights, s));
    labels.push_back(s.divergent ? 1 : 0);
  }
  // Independent labels leave nothing to learn; even the best epoch stays far
  // from the separable run's near-perfect recall.
  CHECK(router::recall_at_matched_rate(probs, labels) <= 0.85);
  const double auc = router::roc_auc(probs, labels);
  CHECK(auc > 0.2);
  CHECK(auc < 0.8);
}

TEST_CASE("zero-epoch training returns the seeded initialization") {
  const auto rc = train_config();
  const auto ds = make_signed_dataset(rc, 10, 5, false, 6);
  const auto table = EmbeddingTable::derive(99, 6, rc.embed_dim);
  TrainConfig tc;
  tc.max_epochs = 0;
  tc.seed = 123;

  const auto res = router::train(ds, ds, tc, rc, table);
  CHECK(res.best_epoch == -1);
  CHECK(res.history.empty());
  CHECK(res.weights == RouterWeights::init(rc, 123));

  // Quantization rounds every parameter through 32-bit floats.
  tc.quantize_f32 = true;
  const auto quantized = router::train(ds, ds, tc, rc, table);
  for (const auto& [name, t] : quantized.weights.tensors())
    for (double v : t->data)
      CHECK(v == static_cast<double>(static_cast<float>(v)));
}

TEST_CASE("runaway learning rates are reported as divergence") {
  const auto rc = train_config();
  const auto train_ds = make_signed_dataset(rc, 64, 61, false, 6);
  const auto val_ds = make_signed_dataset(rc, 32, 62, false, 6);
  const auto table = EmbeddingTable::derive(99, 6, rc.embed_dim);
  TrainConfig tc;
  tc.lr = 1e12;
  tc.weight_decay = 1.0;
  tc.batch_size = 8;
  tc.max_epochs = 40;
  tc.patience = 40;
  CHECK_THROWS_AS((void)router::train(train_ds, val_ds, tc, rc, table),
                  TrainingDiverged);
}

TEST_CASE("training configuration validation") {
  TrainConfig tc;
  tc.lr = 0.0;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = TrainConfig{};
  tc.patience = 0;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = TrainConfig{};
  tc.patience = tc.max_epochs + 1;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = TrainConfig{};
  tc.beta2 = 1.0;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = TrainConfig{};
  tc.weight_decay = -0.1;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  CHECK_NOTHROW(TrainConfig{}.validate());

  // Single-class training sets are rejected up front.
  const auto rc = train_config();
  const auto table = EmbeddingTable::derive(99, 6, rc.embed_dim);
  auto ds = make_signed_dataset(rc, 16, 4, false, 6);
  for (auto& r : ds.records) r.label.kind = label::Kind::neutral;
  CHECK_THROWS_AS((void)router::train(ds, ds, TrainConfig{}, rc, table),
                  InvalidArgument);
}

TEST_CASE("threshold sweep grid and selection") {
  const std::vector<double> probs{0.1, 0.2, 0.3, 0.9};
  const router::Labels labels{0, 0, 1, 1};

  CalibrationTarget recall_target;
  recall_target.kind = TargetKind::recall_min;
  recall_target.value = 1.0;
  const auto cal = router::calibrate_probs(probs, labels, recall_target);
  // Routing is strict (p > threshold), so 0.29 is the largest grid point
  // that still routes the 0.30 positive.
  CHECK(cal.threshold == doctest::Approx(0.29));
  CHECK(cal.recall == 1.0);
  CHECK(cal.usage == doctest::Approx(0.5));
  REQUIRE(cal.sweep.size() == 101);
  for (std::size_t i = 0; i < cal.sweep.size(); ++i)
    CHECK(cal.sweep[i].threshold ==
          doctest::Approx(static_cast<double>(i) / 100.0));

  // Usage never increases as the threshold rises.
  for (std::size_t i = 1; i < cal.sweep.size(); ++i)
    CHECK(cal.sweep[i].usage <= cal.sweep[i - 1].usage);
  CHECK(cal.sweep.back().usage == 0.0);

  // Budget targets are loosest at the top of the grid: the selected point is
  // threshold 1.00 with zero usage (the sweep is the useful output).
  CalibrationTarget usage_target;
  usage_target.kind = TargetKind::usage_max;
  usage_target.value = 0.5;
  const auto usage_cal = router::calibrate_probs(probs, labels, usage_target);
  CHECK(usage_cal.threshold == 1.0);
  CHECK(usage_cal.usage == 0.0);

  CalibrationTarget params_target;
  params_target.kind = TargetKind::params_max;
  params_target.value = 5.5;
  params_target.slm_params_b = 0.5;
  params_target.router_params_b = 0.056;
  params_target.llm_params_b = 32.0;
  const auto params_cal = router::calibrate_probs(probs, labels, params_target);
  CHECK(params_cal.threshold == 1.0);
  CHECK(params_cal.params_b == doctest::Approx(0.556));
  for (const auto& p : params_cal.sweep)
    CHECK(p.params_b ==
          doctest::Approx(0.556 + 32.0 * p.usage).epsilon(1e-12));
}

TEST_CASE("unreachable targets raise with the closest point") {
  // One positive can never be routed: its score is exactly 0.
  const std::vector<double> probs{0.0, 0.9};
  const router::Labels labels{1, 1};
  CalibrationTarget t;
  t.kind = TargetKind::recall_min;
  t.value = 1.0;
  CHECK_THROWS_WITH_AS((void)router::calibrate_probs(probs, labels, t),
                       doctest::Contains("closest"), TargetUnachievable);

  t.kind = TargetKind::usage_max;
  t.value = -0.5;
  CHECK_THROWS_AS((void)router::calibrate_probs(probs, labels, t),
                  TargetUnachievable);

  CHECK_THROWS_AS((void)router::calibrate_probs(
                      std::vector<double>{0.5}, router::Labels{1, 0}, t),
                  InvalidArgument);
}

TEST_CASE("calibrating a trained router on its validation set") {
  const auto rc = train_config();
  const int vocab = 6;
  const auto train_ds = make_signed_dataset(rc, 400, 91, false, vocab);
  const auto val_ds = make_signed_dataset(rc, 200, 92, false, vocab);
  const auto table = EmbeddingTable::derive(99, vocab, rc.embed_dim);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 32;
  tc.max_epochs = 30;
  tc.patience = 10;

  const auto res = router::train(train_ds, val_ds, tc, rc, table);
  CalibrationTarget t;
  t.kind = TargetKind::recall_min;
  t.value = 0.9;
  const auto cal = router::calibrate_threshold(res.weights, val_ds, t, table);
  CHECK(cal.recall >= 0.9);

  // The reported usage matches an independent count at the chosen threshold.
  const auto samples = router::make_samples(val_ds, table, rc);
  std::size_t above = 0;
  for (const auto& s : samples)
    above += router::forward(res.weights, s) > cal.threshold ? 1 : 0;
  CHECK(cal.usage ==
        doctest::Approx(static_cast<double>(above) / samples.size()));
}

TEST_CASE("calibration target strings") {
  const auto usage = router::target_from_string("usage=0.2");
  CHECK(usage.kind == TargetKind::usage_max);
  CHECK(usage.value == doctest::Approx(0.2));
  CHECK(router::target_to_string(usage) == "usage<=0.2");

  const auto params = router::target_from_string("params=5.5");
  CHECK(params.kind == TargetKind::params_max);
  CHECK(params.value == doctest::Approx(5.5));
  CHECK(router::target_to_string(params) == "params<=5.5");

  const auto recall = router::target_from_string("recall=0.95");
  CHECK(recall.kind == TargetKind::recall_min);
  CHECK(recall.value == doctest::Approx(0.95));
  CHECK(router::target_to_string(recall) == "recall>=0.95");

  CHECK_THROWS_AS((void)router::target_from_string("recall"), InvalidArgument);
  CHECK_THROWS_AS((void)router::target_from_string("foo=1"), InvalidArgument);
  CHECK_THROWS_AS((void)router::target_from_string("usage=abc"),
                  InvalidArgument);
}
