#include "duet/world.hpp"

#include <algorithm>
#include <deque>
#include <set>

#include "duet/rng.hpp"

namespace duet::world {

namespace {

constexpr std::int32_t kPrompt = 0;
constexpr std::int32_t kEos = 1;

struct Layout {
  const WorldConfig& cfg;

  std::int32_t content(int stage, int sym) const {
    return 2 + stage * cfg.symbols + sym;
  }
  std::int32_t topic(int q) const { return 2 + cfg.stages * cfg.symbols + q; }
  // Stage of a token: -1 for prompt/topic tokens, stages for EOS.
  int stage_of(std::int32_t id) const {
    if (id == kEos) return cfg.stages;
    if (id == kPrompt || id >= topic(0)) return -1;
    return (id - 2) / cfg.symbols;
  }
};

std::uint64_t ctx_hash(std::span<const std::int32_t> ids) {
  return hash_ids(ids);
}

}  // namespace

World make_world(const WorldConfig& cfg) {
  if (cfg.stages < 2 || cfg.symbols < 2 || cfg.n_queries < 1)
    throw InvalidArgument("world config: need stages>=2, symbols>=2, queries>=1");
  Layout lay{cfg};
  const int vocab = cfg.vocab();

  World w;
  w.cfg = cfg;
  w.token_class.resize(static_cast<std::size_t>(vocab));
  for (std::int32_t id = 0; id < vocab; ++id)
    w.token_class[static_cast<std::size_t>(id)] = id;

  // Synonym classes: one same-class pair per selected stage.
  Rng class_rng(mix_seed(cfg.seed, 0x5e7));
  for (int s = 0; s < cfg.stages; ++s) {
    if (class_rng.uniform() < cfg.p_synonym && cfg.symbols >= 2) {
      const int b1 = static_cast<int>(class_rng.uniform_int(0, cfg.symbols - 1));
      int b2 = static_cast<int>(class_rng.uniform_int(0, cfg.symbols - 2));
      if (b2 >= b1) ++b2;
      w.token_class[static_cast<std::size_t>(lay.content(s, std::max(b1, b2)))] =
          lay.content(s, std::min(b1, b2));
    }
  }

  // Pieces: " w<stage><letter>" for content, '.' appended at sentence stages.
  std::vector<std::string> pieces(static_cast<std::size_t>(vocab));
  pieces[kPrompt] = "Q:";
  pieces[kEos] = "";
  for (int s = 0; s < cfg.stages; ++s)
    for (int b = 0; b < cfg.symbols; ++b) {
      std::string p = " ";
      p += (s == cfg.stages - 1) ? "ans" : "w";
      p += std::to_string(s);
      p += static_cast<char>('a' + b);
      const bool sentence =
          s == cfg.stages - 1 || (s + 1) % cfg.sentence_every == 0;
      if (sentence) p += ".";
      pieces[static_cast<std::size_t>(lay.content(s, b))] = std::move(p);
    }
  for (int q = 0; q < cfg.n_queries; ++q)
    pieces[static_cast<std::size_t>(lay.topic(q))] = " q" + std::to_string(q);
  w.detok.pieces = pieces;

  ModelProfile slm_prof{"world-slm", cfg.slm_params_b, vocab, cfg.hidden_dim, 2.0};
  ModelProfile llm_prof{"world-llm", cfg.llm_params_b, vocab, cfg.hidden_dim, 2.0};
  w.slm = std::make_shared<TableModel>(slm_prof, cfg.order(), Token{kEos});
  w.llm = std::make_shared<TableModel>(llm_prof, cfg.order(), Token{kEos});
  w.slm->derive_embeddings(cfg.embed_dim, mix_seed(cfg.seed, 0xe5));
  w.llm->derive_embeddings(cfg.embed_dim, mix_seed(cfg.seed, 0xe6));
  w.slm->set_pieces(pieces);
  w.llm->set_pieces(pieces);

  // Rows keyed on raw contexts but derived from the class-mapped context, so
  // same-class contexts behave identically (convergence is absorbing).
  const auto class_ctx = [&](std::span<const std::int32_t> ctx) {
    std::vector<std::int32_t> c(ctx.begin(), ctx.end());
    for (auto& id : c) id = w.token_class[static_cast<std::size_t>(id)];
    return c;
  };

  const auto make_row = [&](std::span<const std::int32_t> ctx, bool is_llm,
                            std::int32_t chosen) {
    TableModel::Row row;
    row.logits.assign(static_cast<std::size_t>(vocab), 0.0);
    row.hidden.assign(static_cast<std::size_t>(cfg.hidden_dim), 0.0);
    const auto cc = class_ctx(ctx);
    Rng noise(mix_seed(mix_seed(cfg.seed, is_llm ? 0x11 : 0x22), ctx_hash(cc)));
    if (cfg.delta_logits) {
      for (auto& v : row.logits) v = -12.0;
      row.logits[static_cast<std::size_t>(chosen)] = 12.0;
    } else {
      for (auto& v : row.logits) v = std::min(noise.normal(), 3.0);
      row.logits[static_cast<std::size_t>(chosen)] = 4.0 + noise.uniform();
    }
    for (auto& v : row.hidden) v = noise.normal();
    return row;
  };

  // Choice of next token at a class context, per model.
  const auto choose = [&](std::span<const std::int32_t> cc, bool is_llm,
                          int next_stage) -> std::int32_t {
    if (next_stage >= cfg.stages) return kEos;
    const std::uint64_t h =
        mix_seed(mix_seed(cfg.seed, 0xc0ffee), ctx_hash(cc));
    const int llm_b = static_cast<int>(h % static_cast<std::uint64_t>(cfg.symbols));
    if (is_llm) return lay.content(next_stage, llm_b);
    const std::uint64_t hs = splitmix64(h ^ 0x51a7);
    const double u = static_cast<double>(hs >> 11) * 0x1.0p-53;
    if (u >= cfg.p_diff) return lay.content(next_stage, llm_b);
    int b = static_cast<int>(splitmix64(hs) %
                             static_cast<std::uint64_t>(cfg.symbols - 1));
    if (b >= llm_b) ++b;
    return lay.content(next_stage, b);
  };

  // BFS over contexts reachable under either model's choice.
  std::deque<std::vector<std::int32_t>> frontier;
  std::set<std::vector<std::int32_t>> seen;
  for (int q = 0; q < cfg.n_queries; ++q) {
    std::vector<std::int32_t> ctx = {kPrompt, lay.topic(q)};
    if (seen.insert(ctx).second) frontier.push_back(ctx);
    Query query;
    query.id = "q" + std::to_string(q);
    static const char* kCats[3] = {"math", "code", "qa"};
    query.category = kCats[q % 3];
    query.prompt = TokenSequence::from_ids(ctx);
    w.queries.push_back(std::move(query));
  }
  while (!frontier.empty()) {
    const auto ctx = frontier.front();
    frontier.pop_front();
    const std::int32_t last = ctx.back();
    if (last == kEos) continue;
    const int next_stage = lay.stage_of(last) + 1;
    const auto cc = class_ctx(ctx);
    const std::int32_t llm_tok = choose(cc, true, next_stage);
    const std::int32_t slm_tok = choose(cc, false, next_stage);
    w.llm->set_row(ctx, make_row(ctx, true, llm_tok));
    w.slm->set_row(ctx, make_row(ctx, false, slm_tok));
    for (std::int32_t succ : {llm_tok, slm_tok}) {
      if (succ == kEos) continue;
      std::vector<std::int32_t> nxt = ctx;
      nxt.push_back(succ);
      if (nxt.size() > static_cast<std::size_t>(cfg.order()))
        nxt.erase(nxt.begin());
      if (seen.insert(nxt).second) frontier.push_back(nxt);
    }
  }

  // Safety net for contexts outside the reachable set (e.g. free sampling).
  TableModel::Row fallback;
  fallback.logits.assign(static_cast<std::size_t>(vocab), -12.0);
  fallback.logits[kEos] = 12.0;
  fallback.hidden.assign(static_cast<std::size_t>(cfg.hidden_dim), 0.0);
  w.slm->set_default_row(fallback);
  w.llm->set_default_row(fallback);
  return w;
}

std::optional<Token> final_answer(const World& w, const TokenSequence& s) {
  if (s.size() < 2 || s.back() != w.eos()) return std::nullopt;
  return s[s.size() - 2];
}

bool equivalent_answers(const World& w, const TokenSequence& a,
                        const TokenSequence& b) {
  if (a == b) return true;
  const auto fa = final_answer(w, a);
  const auto fb = final_answer(w, b);
  if (!fa || !fb) return false;
  return w.cls(*fa) == w.cls(*fb);
}

verify::Verdict WorldOracle::verify(const TokenSequence& s_a,
                                    const TokenSequence& s_b,
                                    std::size_t diverge_pos) const {
  if (s_a.empty() || s_b.empty() || diverge_pos >= s_a.size() ||
      diverge_pos >= s_b.size())
    throw UnknownSequencePair("oracle verifier: malformed sequence pair");
  for (const auto& s : {&s_a, &s_b})
    for (Token t : s->tokens()) (void)w_.cls(t);  // vocabulary check

  const bool fin_a = s_a.back() == w_.eos();
  const bool fin_b = s_b.back() == w_.eos();
  verify::Verdict v;
  if (fin_a && fin_b) {
    v.divergent = !equivalent_answers(w_, s_a, s_b);
    v.reasoning = v.divergent ? "final answers differ" : "same final answer";
    return v;
  }
  if (fin_a != fin_b) {
    v.divergent = true;
    v.reasoning = "one path already finished";
    return v;
  }
  const auto tail_class = [&](const TokenSequence& s) {
    const std::size_t k =
        std::min(s.size(), static_cast<std::size_t>(w_.cfg.order()));
    std::vector<std::int32_t> out;
    for (std::size_t i = s.size() - k; i < s.size(); ++i)
      out.push_back(w_.cls(s[i]));
    return out;
  };
  v.divergent = tail_class(s_a) != tail_class(s_b);
  v.reasoning = v.divergent ? "paths have not re-converged"
                            : "paths re-converged";
  return v;
}

}  // namespace duet::world
