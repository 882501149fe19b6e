#include "duet/table_model.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace duet {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

TableModel::TableModel(ModelProfile profile, int order, Token eos)
    : profile_(std::move(profile)), order_(order), eos_(eos) {
  profile_.validate();
  if (order_ < 1) throw InvalidArgument("table model: order must be >= 1");
  if (eos_.id < 0 || eos_.id >= profile_.vocab_size)
    throw InvalidToken("table model: eos outside vocabulary");
}

std::string TableModel::key_of(std::span<const std::int32_t> ctx) {
  std::string k;
  k.reserve(ctx.size() * 4);
  for (std::int32_t id : ctx) {
    const auto u = static_cast<std::uint32_t>(id);
    k.push_back(static_cast<char>(u & 0xff));
    k.push_back(static_cast<char>((u >> 8) & 0xff));
    k.push_back(static_cast<char>((u >> 16) & 0xff));
    k.push_back(static_cast<char>((u >> 24) & 0xff));
  }
  return k;
}

void TableModel::check_row(const Row& row) const {
  if (row.logits.size() != static_cast<std::size_t>(profile_.vocab_size))
    throw ShapeMismatch("table model: logits length != vocab_size");
  if (row.hidden.size() != static_cast<std::size_t>(profile_.hidden_dim))
    throw ShapeMismatch("table model: hidden length != hidden_dim");
  for (double v : row.logits)
    if (!std::isfinite(v)) throw InvalidArgument("table model: non-finite logit");
}

void TableModel::set_row(std::span<const std::int32_t> ctx, Row row) {
  if (ctx.empty() || ctx.size() > static_cast<std::size_t>(order_))
    throw InvalidArgument("table model: context length must be in [1, order]");
  for (std::int32_t id : ctx)
    if (id < 0 || id >= profile_.vocab_size)
      throw InvalidToken("table model: context id outside vocabulary");
  check_row(row);
  rows_[key_of(ctx)] = std::move(row);
}

void TableModel::set_default_row(Row row) {
  check_row(row);
  default_row_ = std::move(row);
}

void TableModel::derive_embeddings(int dim, std::uint64_t seed) {
  embed_ = EmbeddingTable::derive(seed, profile_.vocab_size, dim);
  embed_dim_ = dim;
  embed_seed_ = seed;
}

void TableModel::set_pieces(std::vector<std::string> pieces) {
  if (pieces.size() != static_cast<std::size_t>(profile_.vocab_size))
    throw ShapeMismatch("table model: pieces length != vocab_size");
  pieces_ = std::move(pieces);
}

StepOutput TableModel::step(const TokenSequence& seq) const {
  const auto ids = seq.ids();
  const std::size_t k =
      std::min(ids.size(), static_cast<std::size_t>(order_));
  const std::span<const std::int32_t> ctx(ids.data() + (ids.size() - k), k);
  const Row* row = nullptr;
  auto it = rows_.find(key_of(ctx));
  if (it != rows_.end()) {
    row = &it->second;
  } else if (default_row_) {
    row = &*default_row_;
  } else {
    std::string repr;
    for (auto id : ctx) repr += std::to_string(id) + " ";
    throw UnknownContext("table model '" + profile_.name +
                         "': no row for context [" + repr + "]");
  }
  StepOutput out;
  out.logits = row->logits;
  out.hidden = row->hidden;
  out.token = Token{static_cast<std::int32_t>(argmax_lowest(out.logits))};
  return out;
}

void TableModel::save(std::ostream& os) const {
  os << "duet-mock v1\n";
  os << "name " << nlohmann::json(profile_.name).dump() << " params "
     << fmt_double(profile_.param_count_b) << " vocab " << profile_.vocab_size
     << " hidden " << profile_.hidden_dim << " order " << order_ << " eos "
     << eos_.id << " bytes_per_param " << fmt_double(profile_.bytes_per_param)
     << "\n";
  if (embed_) os << "embed dim " << embed_dim_ << " seed " << embed_seed_ << "\n";
  for (std::size_t i = 0; i < pieces_.size(); ++i)
    os << "tok " << i << " " << nlohmann::json(pieces_[i]).dump() << "\n";
  // Canonical order: contexts sorted by length then ids.
  std::map<std::vector<std::int32_t>, const Row*> sorted;
  for (const auto& [key, row] : rows_) {
    std::vector<std::int32_t> ctx(key.size() / 4);
    for (std::size_t i = 0; i < ctx.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b)
        u = (u << 8) | static_cast<unsigned char>(key[i * 4 + static_cast<std::size_t>(b)]);
      ctx[i] = static_cast<std::int32_t>(u);
    }
    sorted.emplace(std::move(ctx), &row);
  }
  auto write_row = [&](const Row& r) {
    os << "->";
    for (double v : r.logits) os << " " << fmt_double(v);
    os << " |";
    for (double v : r.hidden) os << " " << fmt_double(v);
    os << "\n";
  };
  for (const auto& [ctx, row] : sorted) {
    os << "row";
    for (auto id : ctx) os << " " << id;
    os << " ";
    write_row(*row);
  }
  if (default_row_) {
    os << "default ";
    write_row(*default_row_);
  }
}

void TableModel::save_file(const std::filesystem::path& p) const {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw FileError("cannot write mock model file: " + p.string());
  save(f);
}

namespace {

std::string json_token(std::istringstream& ls) {
  // A JSON string literal: starts at the next '"', honors escapes. The
  // stream is left positioned just past the closing quote.
  std::string rest;
  std::getline(ls, rest);
  const auto q = rest.find('"');
  if (q == std::string::npos)
    throw SchemaMismatch("mock model: expected JSON string");
  std::size_t i = q + 1;
  bool esc = false;
  for (; i < rest.size(); ++i) {
    if (esc) {
      esc = false;
      continue;
    }
    if (rest[i] == '\\') esc = true;
    else if (rest[i] == '"') break;
  }
  if (i >= rest.size()) throw SchemaMismatch("mock model: unterminated string");
  const std::string lit = rest.substr(q, i - q + 1);
  ls.clear();
  ls.str(rest.substr(i + 1));
  return nlohmann::json::parse(lit).get<std::string>();
}

}  // namespace

TableModel TableModel::load(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw SchemaMismatch("mock model: empty file");
  if (line != "duet-mock v1")
    throw SchemaMismatch("mock model: unknown format line: " + line);
  if (!std::getline(is, line))
    throw SchemaMismatch("mock model: missing header");
  std::istringstream hs(line);
  std::string kw;
  hs >> kw;
  if (kw != "name") throw SchemaMismatch("mock model: header must start with name");
  ModelProfile prof;
  prof.name = json_token(hs);
  int order = 0;
  int eos = 0;
  while (hs >> kw) {
    if (kw == "params") hs >> prof.param_count_b;
    else if (kw == "vocab") hs >> prof.vocab_size;
    else if (kw == "hidden") hs >> prof.hidden_dim;
    else if (kw == "order") hs >> order;
    else if (kw == "eos") hs >> eos;
    else if (kw == "bytes_per_param") hs >> prof.bytes_per_param;
    else throw SchemaMismatch("mock model: unknown header field " + kw);
  }
  TableModel m(prof, order, Token{eos});

  std::vector<std::string> pieces;
  bool any_tok = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ls >> kw;
    if (kw == "embed") {
      std::string f1, f2;
      int dim = 0;
      std::uint64_t seed = 0;
      ls >> f1 >> dim >> f2 >> seed;
      if (f1 != "dim" || f2 != "seed")
        throw SchemaMismatch("mock model: bad embed line");
      m.derive_embeddings(dim, seed);
    } else if (kw == "tok") {
      int id = 0;
      ls >> id;
      std::string piece = json_token(ls);
      if (!any_tok) {
        pieces.assign(static_cast<std::size_t>(prof.vocab_size), "");
        any_tok = true;
      }
      if (id < 0 || id >= prof.vocab_size)
        throw InvalidToken("mock model: tok id outside vocabulary");
      pieces[static_cast<std::size_t>(id)] = std::move(piece);
    } else if (kw == "row" || kw == "default") {
      std::vector<std::int32_t> ctx;
      std::string tok;
      if (kw == "row") {
        while (ls >> tok && tok != "->") ctx.push_back(std::stoi(tok));
        if (tok != "->") throw SchemaMismatch("mock model: row without ->");
      } else {
        ls >> tok;
        if (tok != "->") throw SchemaMismatch("mock model: default without ->");
      }
      Row row;
      while (ls >> tok && tok != "|") row.logits.push_back(std::stod(tok));
      while (ls >> tok) row.hidden.push_back(std::stod(tok));
      if (kw == "row") m.set_row(ctx, std::move(row));
      else m.set_default_row(std::move(row));
    } else {
      throw SchemaMismatch("mock model: unknown line: " + line);
    }
  }
  if (any_tok) m.set_pieces(std::move(pieces));
  return m;
}

TableModel TableModel::load_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FileError("cannot open mock model file: " + p.string());
  return load(f);
}

}  // namespace duet
