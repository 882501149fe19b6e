// Command-line surface: label generation, router training, threshold
// calibration, mixed inference, efficiency reports, and world self-checks.
//
// Exit codes: 0 success, 1 property violation or unexpected failure,
// 2 invalid configuration, 3 missing/unreadable file, 4 schema mismatch,
// 5 calibration target unachievable, 6 backend failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "duet/engine.hpp"
#include "duet/labeling.hpp"
#include "duet/metrics.hpp"
#include "duet/model.hpp"
#include "duet/remote_model.hpp"
#include "duet/router_train.hpp"
#include "duet/segments.hpp"
#include "duet/table_model.hpp"
#include "duet/verifier.hpp"
#include "duet/world.hpp"

namespace {

using nlohmann::json;
using namespace duet;

json load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot open config file: " + path.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded())
    throw InvalidArgument("config is not valid json: " + path.string());
  return j;
}

world::WorldConfig world_from_json(const json& j) {
  world::WorldConfig wc;
  wc.seed = j.value("seed", wc.seed);
  wc.stages = j.value("stages", wc.stages);
  wc.symbols = j.value("symbols", wc.symbols);
  wc.n_queries = j.value("queries", wc.n_queries);
  wc.hidden_dim = j.value("hidden_dim", wc.hidden_dim);
  wc.embed_dim = j.value("embed_dim", wc.embed_dim);
  wc.p_diff = j.value("p_diff", wc.p_diff);
  wc.p_synonym = j.value("p_synonym", wc.p_synonym);
  wc.sentence_every = j.value("sentence_every", wc.sentence_every);
  wc.delta_logits = j.value("delta_logits", wc.delta_logits);
  wc.slm_params_b = j.value("slm_params_b", wc.slm_params_b);
  wc.llm_params_b = j.value("llm_params_b", wc.llm_params_b);
  return wc;
}

label::PipelineConfig pipeline_from_json(const json& j) {
  label::PipelineConfig pc;
  if (j.contains("stop")) pc.stop = stop_from_string(j.at("stop"));
  pc.topk = j.value("topk", pc.topk);
  pc.continuation_cap = j.value("continuation_cap", pc.continuation_cap);
  pc.response_cap = j.value("response_cap", pc.response_cap);
  pc.parallelism = j.value("parallelism", pc.parallelism);
  pc.cache_continuations = j.value("cache", pc.cache_continuations);
  pc.seed = j.value("seed", pc.seed);
  pc.samples = j.value("samples", pc.samples);
  pc.p_threshold = j.value("p_threshold", pc.p_threshold);
  pc.temperature = j.value("temperature", pc.temperature);
  pc.top_p = j.value("top_p", pc.top_p);
  return pc;
}

router::TrainConfig train_from_json(const json& j) {
  router::TrainConfig tc;
  tc.lr = j.value("lr", tc.lr);
  tc.beta1 = j.value("beta1", tc.beta1);
  tc.beta2 = j.value("beta2", tc.beta2);
  tc.weight_decay = j.value("weight_decay", tc.weight_decay);
  tc.batch_size = j.value("batch_size", tc.batch_size);
  tc.max_epochs = j.value("max_epochs", tc.max_epochs);
  tc.patience = j.value("patience", tc.patience);
  tc.seed = j.value("seed", tc.seed);
  tc.quantize_f32 = j.value("quantize_f32", tc.quantize_f32);
  return tc;
}

engine::EngineConfig engine_from_json(const json& j) {
  engine::EngineConfig ec;
  ec.p_th = j.value("p_th", ec.p_th);
  ec.max_tokens = j.value("max_tokens", ec.max_tokens);
  ec.temperature = j.value("temperature", ec.temperature);
  ec.top_p = j.value("top_p", ec.top_p);
  ec.seed = j.value("seed", ec.seed);
  return ec;
}

RemoteConfig remote_from_json(const json& j) {
  RemoteConfig rc;
  rc.base_url = j.value("base_url", rc.base_url);
  rc.path = j.value("path", rc.path);
  rc.model = j.value("model", rc.model);
  rc.api_key_env = j.value("api_key_env", rc.api_key_env);
  rc.logprobs = j.value("logprobs", rc.logprobs);
  rc.timeout_sec = j.value("timeout_sec", rc.timeout_sec);
  return rc;
}

// Models, queries, pieces, verifier — either a synthetic world or explicit
// model files plus an optional remote judge.
struct Stack {
  std::optional<world::World> w;
  std::shared_ptr<TableModel> slm, llm;
  Detokenizer detok;
  std::vector<Query> queries;
  std::unique_ptr<verify::TextBackend> backend;
  std::unique_ptr<verify::SequenceVerifier> verifier;

  const Model& slm_model() const { return *slm; }
  const Model& llm_model() const { return *llm; }
};

std::vector<Query> queries_from_json(const json& arr) {
  std::vector<Query> out;
  for (const auto& q : arr) {
    Query query;
    query.id = q.at("id").get<std::string>();
    query.category = q.value("category", "default");
    query.prompt = TokenSequence::from_ids(
        q.at("prompt").get<std::vector<std::int32_t>>());
    out.push_back(std::move(query));
  }
  return out;
}

Stack build_stack(const json& cfg) {
  Stack s;
  if (cfg.contains("world")) {
    s.w = world::make_world(world_from_json(cfg.at("world")));
    s.slm = s.w->slm;
    s.llm = s.w->llm;
    s.detok = s.w->detok;
    s.queries = s.w->queries;
    s.verifier = std::make_unique<world::WorldOracle>(*s.w);
    return s;
  }
  if (!cfg.contains("slm_file") || !cfg.contains("llm_file"))
    throw InvalidArgument(
        "config needs either a \"world\" section or slm_file/llm_file");
  s.slm = std::make_shared<TableModel>(
      TableModel::load_file(cfg.at("slm_file").get<std::string>()));
  s.llm = std::make_shared<TableModel>(
      TableModel::load_file(cfg.at("llm_file").get<std::string>()));
  s.detok = s.slm->detokenizer();
  if (cfg.contains("queries")) s.queries = queries_from_json(cfg.at("queries"));
  if (cfg.contains("verifier")) {
    s.backend = std::make_unique<verify::HttpTextBackend>(
        remote_from_json(cfg.at("verifier")));
    s.verifier =
        std::make_unique<verify::LlmVerifier>(*s.backend, s.detok);
  } else {
    throw InvalidArgument(
        "file-based model configs need a \"verifier\" section");
  }
  return s;
}

// Embedding table for router inputs; the drafting model must expose one.
const EmbeddingTable& embeddings_of(const Stack& s) {
  const EmbeddingTable* e = s.slm->embeddings();
  if (e == nullptr)
    throw InvalidArgument("drafting model exposes no embedding table");
  return *e;
}

router::RouterConfig router_from_json(const json& j,
                                      const label::LabelDataset& ds,
                                      int embed_dim) {
  router::RouterConfig rc;
  rc.topk = ds.k;
  rc.hidden_dim_in = ds.slm_profile.hidden_dim;
  rc.embed_dim = embed_dim;
  rc.width = j.value("width", 64);
  rc.blocks = j.value("blocks", rc.blocks);
  rc.expansion = j.value("expansion", rc.expansion);
  rc.dropout = j.value("dropout", 0.0);
  return rc;
}

// Stratified record split so both halves keep both classes when possible.
std::pair<label::LabelDataset, label::LabelDataset> split_dataset(
    const label::LabelDataset& ds, double val_fraction, std::uint64_t seed) {
  if (ds.records.size() < 2)
    throw InvalidArgument("dataset too small to split");
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw InvalidArgument("val_fraction must be in (0,1)");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    (ds.records[i].label.kind == label::Kind::divergent ? pos : neg)
        .push_back(i);
  Rng rng(mix_seed(seed, 7));
  auto shuffle = [&](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(
                              0, static_cast<std::int64_t>(i) - 1))]);
  };
  shuffle(pos);
  shuffle(neg);
  label::LabelDataset train = ds, val = ds;
  train.records.clear();
  val.records.clear();
  auto deal = [&](const std::vector<std::size_t>& v) {
    const auto n_val = static_cast<std::size_t>(
        std::max(1.0, std::round(val_fraction * static_cast<double>(v.size()))));
    for (std::size_t i = 0; i < v.size(); ++i)
      (i < n_val ? val : train).records.push_back(ds.records[v[i]]);
  };
  if (!pos.empty()) deal(pos);
  if (!neg.empty()) deal(neg);
  if (train.records.empty() || val.records.empty())
    throw InvalidArgument("split produced an empty partition");
  return {std::move(train), std::move(val)};
}

void print_stats(const label::LabelDataset& ds) {
  const auto st = ds.stats();
  std::printf("queries=%zu tokens=%zu different=%zu (%.4f) divergent=%zu (%.4f)\n",
              st.queries, st.tokens, st.different, st.diff_rate, st.divergent,
              st.div_rate);
  for (const auto& q : ds.queries)
    if (q.failed)
      std::printf("failed query %s: %s\n", q.id.c_str(), q.error.c_str());
}

// ---- subcommand bodies ------------------------------------------------

struct CommonOpts {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_gen_labels(const CommonOpts& opt) {
  const json cfg = load_config(opt.config);
  Stack s = build_stack(cfg);
  label::PipelineConfig pc =
      pipeline_from_json(cfg.value("labels", json::object()));
  if (opt.seed) pc.seed = *opt.seed;
  const label::LabelDataset ds = label::generate_labels(
      s.slm_model(), s.llm_model(), s.queries, *s.verifier, s.detok, pc);
  if (!opt.out.empty()) ds.save_file(opt.out);
  print_stats(ds);
  return 0;
}

int cmd_train(const CommonOpts& opt, const std::string& labels_path,
              const std::string& val_path) {
  const json cfg = load_config(opt.config);
  Stack s = build_stack(cfg);
  const EmbeddingTable& emb = embeddings_of(s);
  const label::LabelDataset full = label::LabelDataset::load_file(labels_path);

  router::TrainConfig tc = train_from_json(cfg.value("train", json::object()));
  if (opt.seed) tc.seed = *opt.seed;
  const router::RouterConfig rc =
      router_from_json(cfg.value("router", json::object()), full, emb.dim);

  label::LabelDataset train_ds, val_ds;
  if (!val_path.empty()) {
    train_ds = full;
    val_ds = label::LabelDataset::load_file(val_path);
  } else {
    const double frac =
        cfg.value("train", json::object()).value("val_fraction", 0.2);
    std::tie(train_ds, val_ds) = split_dataset(full, frac, tc.seed);
  }

  const router::TrainResult res =
      router::train(train_ds, val_ds, tc, rc, emb);
  router::save_weights_file(res.weights, opt.out);
  for (std::size_t e = 0; e < res.history.size(); ++e)
    std::printf("epoch=%zu train_loss=%.6f val_loss=%.6f val_recall=%.4f\n", e,
                res.history[e].train_loss, res.history[e].val_loss,
                res.history[e].val_recall);
  std::printf("best_epoch=%d params=%zu saved=%s\n", res.best_epoch,
              rc.param_count(), opt.out.c_str());
  return 0;
}

int cmd_calibrate(const CommonOpts& opt, const std::string& labels_path,
                  const std::string& weights_path, const std::string& target_s,
                  const std::string& save_weights_path) {
  const json cfg = load_config(opt.config);
  Stack s = build_stack(cfg);
  const EmbeddingTable& emb = embeddings_of(s);
  const label::LabelDataset val = label::LabelDataset::load_file(labels_path);
  router::RouterWeights w = router::load_weights_file(weights_path);

  router::CalibrationTarget target = router::target_from_string(target_s);
  const json rep = cfg.value("report", json::object());
  target.slm_params_b = rep.value("slm_params_b", val.slm_profile.param_count_b);
  target.llm_params_b = rep.value("llm_params_b", val.llm_profile.param_count_b);
  target.router_params_b =
      rep.value("router_params_b",
                static_cast<double>(w.cfg.param_count()) / 1e9);

  const router::Calibration cal =
      router::calibrate_threshold(w, val, target, emb);

  std::ostringstream csv;
  csv << "threshold,usage,recall,params_b\n";
  for (const auto& p : cal.sweep)
    csv << p.threshold << ',' << p.usage << ',' << p.recall << ','
        << p.params_b << '\n';
  if (opt.out.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    std::ofstream f(opt.out);
    if (!f) throw FileError("cannot write sweep csv: " + opt.out);
    f << csv.str();
  }
  std::printf("threshold=%.2f usage=%.4f recall=%.4f params_b=%.3f\n",
              cal.threshold, cal.usage, cal.recall, cal.params_b);
  if (!save_weights_path.empty()) {
    w.p_th = cal.threshold;
    router::save_weights_file(w, save_weights_path);
  }
  return 0;
}

int cmd_infer(const CommonOpts& opt, const std::string& weights_path,
              std::optional<double> threshold, bool oracle_router,
              bool summary, int parallelism) {
  const json cfg = load_config(opt.config);
  Stack s = build_stack(cfg);
  if (s.queries.empty()) throw InvalidArgument("no queries to run");

  engine::EngineConfig ec =
      engine_from_json(cfg.value("engine", json::object()));
  if (opt.seed) ec.seed = *opt.seed;

  std::unique_ptr<engine::Router> router;
  label::PipelineConfig pc =
      pipeline_from_json(cfg.value("labels", json::object()));
  if (oracle_router) {
    router = std::make_unique<engine::PathFollowingRouter>(
        s.llm_model(), *s.verifier, s.detok, pc.stop, pc.continuation_cap);
  } else {
    if (weights_path.empty())
      throw InvalidArgument("infer needs --weights or --oracle-router");
    router::RouterWeights w = router::load_weights_file(weights_path);
    if (!cfg.value("engine", json::object()).contains("p_th"))
      ec.p_th = w.p_th;
    router = std::make_unique<engine::NeuralRouter>(std::move(w),
                                                    &embeddings_of(s));
  }
  if (threshold) ec.p_th = *threshold;
  ec.validate();

  std::vector<TokenSequence> prompts;
  std::vector<std::string> ids;
  for (const auto& q : s.queries) {
    prompts.push_back(q.prompt);
    ids.push_back(q.id);
  }
  const auto traces = engine::generate_batch(
      s.slm_model(), s.llm_model(), *router, prompts, ec, parallelism, ids);
  if (!opt.out.empty()) engine::save_traces_file(traces, opt.out, !summary);

  bool any_error = false;
  for (const auto& t : traces) {
    std::printf("id=%s tokens=%zu llm=%zu usage=%.4f finished=%d%s%s\n",
                t.query_id.c_str(), t.decisions.size(), t.llm_tokens(),
                t.usage_rate(), t.finished ? 1 : 0,
                t.error.empty() ? "" : " error=", t.error.c_str());
    any_error = any_error || !t.error.empty();
  }
  const auto rep = metrics::summarize(traces, s.slm->profile().param_count_b,
                                      0.0, s.llm->profile().param_count_b);
  std::printf("traces=%zu usage_rate=%.4f avg_tokens_k=%.4f\n", rep.traces,
              rep.usage_rate, rep.avg_tokens_k);
  return any_error ? 6 : 0;
}

int cmd_report(const CommonOpts& opt, const std::string& traces_path) {
  const json cfg =
      opt.config.empty() ? json::object() : load_config(opt.config);
  const auto traces = engine::load_traces_file(traces_path);
  const json rep = cfg.value("report", json::object());
  const double slm_b = rep.value("slm_params_b", 1.5);
  const double router_b = rep.value("router_params_b", 0.056);
  const double llm_b = rep.value("llm_params_b", 32.0);
  const double bpp = rep.value("bytes_per_param", 2.0);
  const int bins = rep.value("bins", 10);

  ModelProfile slm_p{"slm", slm_b, 2, 1, bpp};
  ModelProfile llm_p{"llm", llm_b, 2, 1, bpp};
  const auto router_params =
      static_cast<std::size_t>(rep.value("router_params", 0));
  const metrics::EfficiencyReport er = metrics::summarize(
      traces, slm_p, llm_p, router_b, router_params,
      rep.value("router_bytes_per_param", 4.0),
      rep.value("kv_bytes_per_token", 0.0));
  std::printf(
      "traces=%zu usage_rate=%.4f avg_tokens_k=%.4f avg_params_b=%.3f "
      "cost_kb=%.3f\n",
      er.traces, er.usage_rate, er.avg_tokens_k, er.avg_params_b, er.cost_kb);
  std::printf("total_flops_t=%.6f total_mem_tb=%.6f mem_per_token_gb=%.6f\n",
              er.total_flops_t.value_or(0.0), er.total_mem_tb.value_or(0.0),
              er.mem_per_token_gb.value_or(0.0));

  std::ostringstream out;
  out << "kind,key,value\n";
  for (const auto& [gap, count] : metrics::interval_histogram(traces))
    out << "interval," << gap << ',' << count << '\n';

  if (cfg.contains("world")) {
    Stack s = build_stack(cfg);
    const auto nb = static_cast<std::size_t>(bins);
    std::vector<std::size_t> pos_llm(nb, 0), pos_all(nb, 0);
    std::vector<std::size_t> thought_llm(nb, 0), thought_all(nb, 0);
    auto pool = [&](const engine::GenerationTrace& t, engine::SegmentSpan span,
                    std::vector<std::size_t>& llm,
                    std::vector<std::size_t>& all) {
      if (span.length() == 0) return;
      for (std::size_t j = span.begin; j < span.end; ++j) {
        const double center = (static_cast<double>(j - span.begin) + 0.5) /
                              static_cast<double>(span.length());
        const auto bin =
            std::min(nb - 1, static_cast<std::size_t>(center * bins));
        ++all[bin];
        if (t.decisions[j].routed_to == engine::Route::LLM) ++llm[bin];
      }
    };
    for (const auto& t : traces) {
      pool(t, {0, t.decisions.size()}, pos_llm, pos_all);
      const auto seg = engine::segment_trace(t, s.detok);
      for (const auto& th : seg.thoughts) pool(t, th, thought_llm, thought_all);
    }
    auto emit = [&](const char* kind, const std::vector<std::size_t>& llm,
                    const std::vector<std::size_t>& all) {
      for (std::size_t b = 0; b < nb; ++b)
        out << kind << ',' << b << ','
            << (all[b] == 0 ? 0.0
                            : static_cast<double>(llm[b]) /
                                  static_cast<double>(all[b]))
            << '\n';
    };
    emit("position_usage", pos_llm, pos_all);
    emit("thought_usage", thought_llm, thought_all);
  }

  if (opt.out.empty()) {
    std::fputs(out.str().c_str(), stdout);
  } else {
    std::ofstream f(opt.out);
    if (!f) throw FileError("cannot write report csv: " + opt.out);
    f << out.str();
  }
  return 0;
}

int cmd_verify_world(const CommonOpts& opt, int worlds, int parallelism) {
  json cfg = opt.config.empty() ? json::object() : load_config(opt.config);
  world::WorldConfig base = world_from_json(cfg.value("world", json::object()));
  if (opt.seed) base.seed = *opt.seed;
  label::PipelineConfig pc =
      pipeline_from_json(cfg.value("labels", json::object()));

  bool all_ok = true;
  for (int i = 0; i < worlds; ++i) {
    world::WorldConfig wc = base;
    wc.seed = mix_seed(base.seed, static_cast<std::uint64_t>(i));
    const world::World w = world::make_world(wc);
    const world::WorldOracle oracle(w);
    const engine::PathFollowingRouter router(*w.llm, oracle, w.detok, pc.stop,
                                             pc.continuation_cap);
    engine::EngineConfig ec;
    ec.p_th = 0.5;
    ec.max_tokens = static_cast<std::size_t>(wc.stages) + 2;

    std::vector<TokenSequence> prompts;
    std::vector<std::string> ids;
    for (const auto& q : w.queries) {
      prompts.push_back(q.prompt);
      ids.push_back(q.id);
    }
    const auto traces = engine::generate_batch(*w.slm, *w.llm, router, prompts,
                                               ec, parallelism, ids);
    int ok = 0;
    for (std::size_t qi = 0; qi < w.queries.size(); ++qi) {
      const auto llm_only =
          continue_until(*w.llm, w.queries[qi].prompt, StopCondition::eos(),
                         nullptr, static_cast<int>(ec.max_tokens));
      if (!traces[qi].error.empty()) {
        all_ok = false;
        continue;
      }
      if (world::equivalent_answers(w, traces[qi].output, llm_only.seq))
        ++ok;
      else
        all_ok = false;
    }
    std::printf("world seed=%llu: %d/%zu queries equivalent\n",
                static_cast<unsigned long long>(wc.seed), ok,
                w.queries.size());
    if (static_cast<std::size_t>(ok) != w.queries.size()) all_ok = false;
  }
  if (!opt.out.empty()) {
    // Export the base world for file-based runs.
    const world::World w = world::make_world(base);
    std::filesystem::create_directories(opt.out);
    w.slm->save_file(std::filesystem::path(opt.out) / "slm.model");
    w.llm->save_file(std::filesystem::path(opt.out) / "llm.model");
    std::ofstream qf(std::filesystem::path(opt.out) / "queries.json");
    json arr = json::array();
    for (const auto& q : w.queries)
      arr.push_back({{"category", q.category},
                     {"id", q.id},
                     {"prompt", q.prompt.ids()}});
    qf << arr.dump() << "\n";
  }
  std::puts(all_ok ? "verify-world: PASS" : "verify-world: FAIL");
  return all_ok ? 0 : 1;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"token-routed small/large mixed inference"};
  app.require_subcommand(1);

  CommonOpts opt;
  std::string labels_path, val_path, weights_path, traces_path;
  std::string target_s = "recall=0.95", save_weights_path;
  std::optional<double> threshold;
  bool oracle_router = false, summary = false;
  int parallelism = 1, worlds = 20;
  std::uint64_t seed_raw = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", opt.config, "json config file");
    if (config_required) c->required();
    sub->add_option("--seed", seed_raw, "seed override")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--out", opt.out, "output path");
  };

  auto* gen = app.add_subcommand("gen-labels", "run the labeling pipeline");
  add_common(gen, true);

  auto* train = app.add_subcommand("train", "train the router on labels");
  add_common(train, true);
  train->add_option("--labels", labels_path, "label dataset (jsonl)")
      ->required();
  train->add_option("--val", val_path, "separate validation dataset");

  auto* cal = app.add_subcommand("calibrate", "sweep routing thresholds");
  add_common(cal, true);
  cal->add_option("--labels", labels_path, "validation dataset")->required();
  cal->add_option("--weights", weights_path, "router weights")->required();
  cal->add_option("--target", target_s, "usage=r | params=M | recall=q");
  cal->add_option("--save-weights", save_weights_path,
                  "write weights with the calibrated threshold");

  auto* infer = app.add_subcommand("infer", "mixed small/large decoding");
  add_common(infer, true);
  infer->add_option("--weights", weights_path, "router weights");
  infer->add_option("--threshold", threshold, "p_th override");
  infer->add_flag("--oracle-router", oracle_router,
                  "use the path-following reference policy");
  infer->add_flag("--summary", summary, "write summary traces (no decisions)");
  infer->add_option("--parallelism", parallelism, "worker threads");

  auto* report = app.add_subcommand("report", "metrics over saved traces");
  add_common(report, false);
  report->add_option("--traces", traces_path, "trace file (jsonl)")->required();

  auto* verify = app.add_subcommand("verify-world",
                                    "equivalence self-check on mock worlds");
  add_common(verify, false);
  verify->add_option("--worlds", worlds, "number of randomized worlds");
  verify->add_option("--parallelism", parallelism, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (seed_set) opt.seed = seed_raw;

  if (app.got_subcommand(gen)) return cmd_gen_labels(opt);
  if (app.got_subcommand(train)) return cmd_train(opt, labels_path, val_path);
  if (app.got_subcommand(cal))
    return cmd_calibrate(opt, labels_path, weights_path, target_s,
                         save_weights_path);
  if (app.got_subcommand(infer))
    return cmd_infer(opt, weights_path, threshold, oracle_router, summary,
                     parallelism);
  if (app.got_subcommand(report)) return cmd_report(opt, traces_path);
  if (app.got_subcommand(verify))
    return cmd_verify_world(opt, worlds, parallelism);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const FileError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const SchemaMismatch& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const TargetUnachievable& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const BackendUnavailable& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 6;
  } catch (const UnparseableResponse& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 6;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
