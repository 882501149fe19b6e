#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/model.hpp"

namespace duet {

// Deterministic mock backend: an explicit transition table from the last
// `order` token ids (shorter near the start of a sequence) to a logits
// vector and a hidden-state vector. Contexts not in the table fall back to
// the default row if one is set.
//
// Text file format (one model per file):
//   duet-mock v1
//   name <json> params <f> vocab <n> hidden <n> order <n> eos <id> bytes_per_param <f>
//   embed dim <n> seed <u64>          (optional; embeddings derived from seed)
//   tok <id> <json>                   (optional detokenizer pieces)
//   row <id...> -> <logits...> | <hidden...>
//   default -> <logits...> | <hidden...>
class TableModel : public Model {
 public:
  struct Row {
    std::vector<double> logits;
    std::vector<double> hidden;
  };

  TableModel(ModelProfile profile, int order, Token eos);

  void set_row(std::span<const std::int32_t> ctx, Row row);
  void set_default_row(Row row);
  void derive_embeddings(int dim, std::uint64_t seed);
  void set_pieces(std::vector<std::string> pieces);

  const ModelProfile& profile() const override { return profile_; }
  Token eos() const override { return eos_; }
  StepOutput step(const TokenSequence& seq) const override;
  const EmbeddingTable* embeddings() const override {
    return embed_ ? &*embed_ : nullptr;
  }

  int order() const { return order_; }
  bool has_pieces() const { return !pieces_.empty(); }
  Detokenizer detokenizer() const { return Detokenizer{pieces_}; }
  std::size_t row_count() const { return rows_.size(); }

  void save(std::ostream& os) const;
  void save_file(const std::filesystem::path& p) const;
  static TableModel load(std::istream& is);
  static TableModel load_file(const std::filesystem::path& p);

 private:
  static std::string key_of(std::span<const std::int32_t> ctx);
  void check_row(const Row& row) const;

  ModelProfile profile_;
  int order_;
  Token eos_;
  std::unordered_map<std::string, Row> rows_;
  std::optional<Row> default_row_;
  std::optional<EmbeddingTable> embed_;
  int embed_dim_ = 0;
  std::uint64_t embed_seed_ = 0;
  std::vector<std::string> pieces_;
};

// Shortest exact decimal form of v (round-trips to the same double).
std::string fmt_double(double v);

}  // namespace duet
