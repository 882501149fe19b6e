#include "duet/tokens.hpp"

#include <cmath>

#include "duet/rng.hpp"

namespace duet {

EmbeddingTable EmbeddingTable::derive(std::uint64_t seed, int vocab, int dim) {
  if (vocab < 1 || dim < 1)
    throw InvalidArgument("embedding table: vocab and dim must be positive");
  EmbeddingTable t;
  t.dim = dim;
  t.data.resize(static_cast<std::size_t>(vocab) * static_cast<std::size_t>(dim));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int id = 0; id < vocab; ++id) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(id)));
    for (int j = 0; j < dim; ++j)
      t.data[static_cast<std::size_t>(id) * static_cast<std::size_t>(dim) +
             static_cast<std::size_t>(j)] = rng.normal() * scale;
  }
  return t;
}

}  // namespace duet
