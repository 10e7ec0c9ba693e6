#pragma once

// Attention-guided non-uniform token cropping and the analytic encoder cost model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "transgeo/vit.hpp"

namespace transgeo {

struct CropPolicy {
  double beta = 1.0;   // kept fraction of patches, (0, 1]
  double gamma = 1.0;  // patch-count (area) scale, >= 1
  int patch_size = 16;
  double budget = 1.0 + 1e-6;  // upper bound on beta * gamma

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in (0, 1]");
    if (!(gamma >= 1.0)) throw std::invalid_argument("gamma must be >= 1");
    if (patch_size <= 0) throw std::invalid_argument("patch size must be positive");
    if (beta * gamma > budget) {
      throw std::invalid_argument("beta * gamma = " + std::to_string(beta * gamma) + " exceeds the token budget");
    }
  }
};

struct ScaledGrid {
  int side_px = 0;
  GridShape grid;
};

/// Side length after scaling the patch count by gamma: round(side * sqrt(gamma)), then up to
/// the next multiple of the patch size.
inline ScaledGrid scaled_grid(int side_px, double gamma, int patch_size) {
  if (!(gamma >= 1.0)) throw std::invalid_argument("gamma must be >= 1");
  if (patch_size <= 0 || side_px % patch_size != 0) {
    throw std::invalid_argument("side must be a multiple of the patch size");
  }
  const long scaled = std::lround(double(side_px) * std::sqrt(gamma));
  const long side = (scaled + patch_size - 1) / patch_size * patch_size;
  const auto cells = static_cast<std::size_t>(side / patch_size);
  return {static_cast<int>(side), {cells, cells}};
}

/// floor(beta * N), guarded against representation error just under an integer.
inline std::size_t keep_count(double beta, std::size_t n) {
  return static_cast<std::size_t>(std::floor(beta * double(n) + 1e-9));
}

/// Bilinear resampling of the score field; nonnegativity is preserved.
inline AttentionMap resize_attention(const AttentionMap& map, GridShape new_grid) {
  if (map.grid.size() == 0 || new_grid.size() == 0) throw std::invalid_argument("degenerate attention grid");
  if (map.values.size() != map.grid.size()) throw std::invalid_argument("attention map size mismatch");
  AttentionMap out;
  out.grid = new_grid;
  out.class_weight = map.class_weight;
  out.values = new_grid == map.grid ? map.values : resample_field(map.values.data(), map.grid, new_grid, 1);
  return out;
}

struct TokenMask {
  GridShape grid;
  std::vector<std::size_t> kept;  // row-major patch indices, ascending
};

/// Keeps the floor(beta * N) highest-scoring patches; ties go to the lower row-major index.
inline TokenMask select_tokens(const AttentionMap& map, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in (0, 1]");
  const std::size_t n = map.grid.size();
  if (map.values.size() != n) throw std::invalid_argument("attention map size mismatch");
  const std::size_t k = keep_count(beta, n);
  if (k == 0) throw std::invalid_argument("beta keeps zero patches");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.values[a] > map.values[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return {map.grid, std::move(order)};
}

/// Keeps the class token and the masked patch tokens, in mask order, with their positions.
template <class T>
TokenSet<T> crop_tokens(const TokenSet<T>& tokens, const TokenMask& mask) {
  if (!(tokens.grid == mask.grid)) throw std::invalid_argument("mask grid does not match token grid");
  std::vector<std::size_t> row_of(tokens.grid.size(), SIZE_MAX);
  for (std::size_t i = 0; i < tokens.positions.size(); ++i) {
    const auto& p = tokens.positions[i];
    row_of[p.row * tokens.grid.cols + p.col] = i + 1;
  }
  std::vector<std::size_t> rows{0};
  std::vector<GridPos> positions;
  rows.reserve(mask.kept.size() + 1);
  positions.reserve(mask.kept.size());
  for (auto idx : mask.kept) {
    if (idx >= row_of.size() || row_of[idx] == SIZE_MAX) {
      throw std::invalid_argument("mask keeps a patch that is not present in the token set");
    }
    rows.push_back(row_of[idx]);
    positions.push_back(tokens.positions[row_of[idx] - 1]);
  }
  return {gather_rows(tokens.tokens, rows), std::move(positions), tokens.grid};
}

/// Multiply-add counts of one encoder forward. Per layer:
///   projections   4 n D^2      (Q, K, V, output)
///   attn scores   n^2 D
///   attn apply    n^2 D
///   mlp           2 n D (ratio D)
/// plus the patch embedding (n-1) P^2 C D and the head D E.
struct FlopReport {
  std::uint64_t n_tokens = 0;
  std::uint64_t projection = 0;  // per layer
  std::uint64_t attention_score = 0;
  std::uint64_t attention_apply = 0;
  std::uint64_t mlp = 0;
  std::uint64_t layers = 0;
  std::uint64_t patch_embed = 0;
  std::uint64_t head = 0;

  std::uint64_t per_layer() const { return projection + attention_score + attention_apply + mlp; }
  std::uint64_t total() const { return per_layer() * layers + patch_embed + head; }
};

/// `n_tokens` counts the class token.
inline FlopReport flops(const ViTConfig& cfg, std::uint64_t n_tokens) {
  if (n_tokens < 1) throw std::invalid_argument("token count must be >= 1");
  const std::uint64_t n = n_tokens;
  const std::uint64_t D = cfg.model_dim;
  const std::uint64_t hidden = cfg.mlp_hidden();
  FlopReport r;
  r.n_tokens = n;
  r.projection = 4 * n * D * D;
  r.attention_score = n * n * D;
  r.attention_apply = n * n * D;
  r.mlp = 2 * n * D * hidden;
  r.layers = cfg.layers;
  r.patch_embed = (n - 1) * cfg.patch_dim() * D;
  r.head = D * std::uint64_t(cfg.embed_out);
  return r;
}

/// CSV breakdown, one row per term.
inline std::string flops_csv(const FlopReport& r) {
  std::string out = "term,multiply_adds\n";
  auto row = [&](const char* name, std::uint64_t v) { out += std::string(name) + "," + std::to_string(v) + "\n"; };
  row("n_tokens", r.n_tokens);
  row("projection_per_layer", r.projection);
  row("attention_score_per_layer", r.attention_score);
  row("attention_apply_per_layer", r.attention_apply);
  row("mlp_per_layer", r.mlp);
  row("layers", r.layers);
  row("patch_embed", r.patch_embed);
  row("head", r.head);
  row("total", r.total());
  return out;
}

}  // namespace transgeo
