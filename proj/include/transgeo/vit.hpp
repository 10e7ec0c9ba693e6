#pragma once

// Vision-transformer encoder used for both the street and the aerial stream.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "transgeo/checkpoint.hpp"
#include "transgeo/image.hpp"
#include "transgeo/ops.hpp"

namespace transgeo {

enum class PosEmbedKind { learnable, fixed_sincos_2d };

inline const char* to_string(PosEmbedKind k) {
  return k == PosEmbedKind::learnable ? "learnable" : "fixed_sincos_2d";
}

inline PosEmbedKind parse_pos_embed_kind(const std::string& s) {
  if (s == "learnable") return PosEmbedKind::learnable;
  if (s == "fixed_sincos_2d" || s == "fixed") return PosEmbedKind::fixed_sincos_2d;
  throw std::invalid_argument("unknown position embedding kind '" + s + "'");
}

struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

struct GridPos {
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const GridPos&) const = default;
};

struct ViTConfig {
  int image_height = 256;
  int image_width = 256;
  int channels = 3;
  int patch_size = 16;
  int model_dim = 384;
  int layers = 12;
  int heads = 6;
  double mlp_ratio = 4.0;
  int embed_out = 1000;
  PosEmbedKind pos_embed = PosEmbedKind::learnable;

  int head_dim() const { return model_dim / heads; }
  int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * model_dim)); }
  GridShape grid() const {
    return {static_cast<std::size_t>(image_height / patch_size),
            static_cast<std::size_t>(image_width / patch_size)};
  }
  std::size_t patch_dim() const { return std::size_t(patch_size) * patch_size * channels; }

  void validate() const {
    if (patch_size <= 0 || model_dim <= 0 || layers <= 0 || heads <= 0 || embed_out < 1 || mlp_ratio <= 0) {
      throw std::invalid_argument("ViT config extents must be positive");
    }
    if (model_dim % heads != 0) throw std::invalid_argument("model_dim must be divisible by heads");
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
      throw std::invalid_argument("patch size must divide the input height and width");
    }
    if (pos_embed == PosEmbedKind::fixed_sincos_2d && model_dim % 4 != 0) {
      throw std::invalid_argument("fixed 2D sinusoid embedding needs model_dim divisible by 4");
    }
  }
};

template <class T>
struct Patches {
  Tensor<T> rows;  // [N x P*P*C]
  GridShape grid;
};

/// Splits an image into non-overlapping PxP patches, row-major over the grid; each patch is
/// flattened in (row, col, channel) order.
template <class T>
Patches<T> patchify(const Image& img, int P) {
  if (P <= 0 || img.height % P != 0 || img.width % P != 0) {
    throw std::invalid_argument("patch size " + std::to_string(P) + " does not divide " +
                                std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  const GridShape grid{std::size_t(img.height / P), std::size_t(img.width / P)};
  const std::size_t pd = std::size_t(P) * P * img.channels;
  std::vector<T> data(grid.size() * pd);
  std::size_t o = 0;
  for (std::size_t gr = 0; gr < grid.rows; ++gr) {
    for (std::size_t gc = 0; gc < grid.cols; ++gc) {
      for (int r = 0; r < P; ++r) {
        for (int c = 0; c < P; ++c) {
          for (int ch = 0; ch < img.channels; ++ch) {
            data[o++] = static_cast<T>(img.at(int(gr) * P + r, int(gc) * P + c, ch));
          }
        }
      }
    }
  }
  return {Tensor<T>::from({grid.size(), pd}, std::move(data)), grid};
}

/// Class token (row 0) followed by patch tokens, each carrying its grid position.
template <class T>
struct TokenSet {
  Tensor<T> tokens;  // [(n+1) x D]
  std::vector<GridPos> positions;
  GridShape grid;

  std::size_t patch_count() const { return positions.size(); }

  void validate() const {
    if (tokens.rank() != 2 || tokens.dim(0) != positions.size() + 1) {
      throw std::invalid_argument("token rows must equal patch positions + class token");
    }
    std::vector<bool> seen(grid.size(), false);
    for (const auto& p : positions) {
      if (p.row >= grid.rows || p.col >= grid.cols) throw std::invalid_argument("token position outside grid");
      const std::size_t i = p.row * grid.cols + p.col;
      if (seen[i]) throw std::invalid_argument("duplicate token position");
      seen[i] = true;
    }
  }
};

inline std::vector<GridPos> full_grid_positions(GridShape g) {
  std::vector<GridPos> out;
  out.reserve(g.size());
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) out.push_back({r, c});
  return out;
}

template <class T>
struct PositionEmbedding {
  GridShape grid;
  Tensor<T> table;  // [(rows*cols + 1) x D], row 0 = class token
  PosEmbedKind kind = PosEmbedKind::learnable;
};

/// Fixed 2D sinusoid table: channels [0, D/2) encode the grid row, [D/2, D) the column;
/// within each half the first D/4 are sin(pos * w_i), the rest cos(pos * w_i) with
/// w_i = 10000^(-i / (D/4)). The class-token row is zero.
template <class T>
Tensor<T> sincos_2d_table(GridShape grid, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sinusoid table needs dim divisible by 4");
  const std::size_t d = dim;
  const std::size_t quarter = d / 4;
  std::vector<T> data((grid.size() + 1) * d, T(0));
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      T* row = data.data() + (1 + r * grid.cols + c) * d;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -double(i) / double(quarter));
        row[i] = static_cast<T>(std::sin(double(r) * omega));
        row[quarter + i] = static_cast<T>(std::cos(double(r) * omega));
        row[2 * quarter + i] = static_cast<T>(std::sin(double(c) * omega));
        row[3 * quarter + i] = static_cast<T>(std::cos(double(c) * omega));
      }
    }
  }
  return Tensor<T>::from({grid.size() + 1, d}, std::move(data));
}

/// Bilinear resampling (half-pixel centers, clamped edges) of a rows x cols x D field.
template <class T>
std::vector<T> resample_field(const T* src, GridShape from, GridShape to, std::size_t depth) {
  std::vector<T> out(to.size() * depth);
  const double sy = double(from.rows) / double(to.rows);
  const double sx = double(from.cols) / double(to.cols);
  for (std::size_t r = 0; r < to.rows; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, double(from.rows - 1));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, from.rows - 1);
    const double ty = fy - double(y0);
    for (std::size_t c = 0; c < to.cols; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, double(from.cols - 1));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, from.cols - 1);
      const double tx = fx - double(x0);
      const T* a = src + (y0 * from.cols + x0) * depth;
      const T* b = src + (y0 * from.cols + x1) * depth;
      const T* e = src + (y1 * from.cols + x0) * depth;
      const T* f = src + (y1 * from.cols + x1) * depth;
      T* dst = out.data() + (r * to.cols + c) * depth;
      for (std::size_t k = 0; k < depth; ++k) {
        const double top = double(a[k]) * (1 - tx) + double(b[k]) * tx;
        const double bot = double(e[k]) * (1 - tx) + double(f[k]) * tx;
        dst[k] = static_cast<T>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

/// Resamples a learnable table to a new grid; the class-token row is copied unchanged.
template <class T>
PositionEmbedding<T> interpolate_pos_embed(const PositionEmbedding<T>& pe, GridShape new_grid) {
  if (pe.kind != PosEmbedKind::learnable) {
    throw std::invalid_argument("interpolation applies to learnable position embeddings only");
  }
  if (pe.grid.size() == 0 || new_grid.size() == 0) throw std::invalid_argument("degenerate grid");
  const std::size_t d = pe.table.dim(1);
  PositionEmbedding<T> out{new_grid, {}, pe.kind};
  if (new_grid == pe.grid) {
    out.table = pe.table.clone();
    return out;
  }
  const auto& src = pe.table.storage();
  std::vector<T> patch = resample_field(src.data() + d, pe.grid, new_grid, d);
  std::vector<T> data(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(d));
  data.insert(data.end(), patch.begin(), patch.end());
  out.table = Tensor<T>::from({new_grid.size() + 1, d}, std::move(data));
  return out;
}

/// Adds to every token the embedding row of its own grid position (class row to the class
/// token), so cropped token sets keep their original positional encoding.
template <class T>
TokenSet<T> add_position(const TokenSet<T>& tokens, const PositionEmbedding<T>& pe) {
  if (!(tokens.grid == pe.grid)) throw std::invalid_argument("token grid does not match position table grid");
  std::vector<std::size_t> rows;
  rows.reserve(tokens.positions.size() + 1);
  rows.push_back(0);
  for (const auto& p : tokens.positions) {
    if (p.row >= pe.grid.rows || p.col >= pe.grid.cols) {
      throw std::invalid_argument("token position outside the position table grid");
    }
    rows.push_back(1 + p.row * pe.grid.cols + p.col);
  }
  return {add(tokens.tokens, gather_rows(pe.table, rows)), tokens.positions, tokens.grid};
}

/// Head-averaged last-layer attention of the class token over patch tokens.
struct AttentionMap {
  GridShape grid;
  std::vector<double> values;  // rows*cols, row-major
  double class_weight = 0.0;   // head-averaged class->class weight
};

template <class T>
struct EncoderOutput {
  Tensor<T> embedding;  // [1 x embed_out], unit l2 norm
  std::optional<AttentionMap> attention;
};

namespace detail {

template <class T>
Tensor<T> truncated_normal(Shape shape, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = static_cast<T>(z * sigma);
  }
  return Tensor<T>::from(std::move(shape), std::move(data));
}

}  // namespace detail

/// ViT encoder: linear patch embedding, class token, position embedding, L pre-norm blocks
/// of multi-head self-attention and GELU MLP, final norm and linear head on the class token,
/// l2-normalized.
template <class T>
class VisionTransformer {
 public:
  VisionTransformer() = default;

  VisionTransformer(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t D = cfg_.model_dim;
    const std::size_t H = cfg_.mlp_hidden();
    const double sigma = 0.02;
    auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
      params_.add(name + ".weight", detail::truncated_normal<T>({in, out}, sigma, rng));
      params_.add(name + ".bias", Tensor<T>::zeros({out}));
    };
    auto norm = [&](const std::string& name) {
      params_.add(name + ".gain", Tensor<T>::full({D}, T(1)));
      params_.add(name + ".bias", Tensor<T>::zeros({D}));
    };
    weight("patch_embed", cfg_.patch_dim(), D);
    params_.add("cls_token", detail::truncated_normal<T>({1, D}, sigma, rng));
    const GridShape grid = cfg_.grid();
    if (cfg_.pos_embed == PosEmbedKind::learnable) {
      params_.add("pos_embed", detail::truncated_normal<T>({grid.size() + 1, D}, sigma, rng));
    } else {
      fixed_table_ = sincos_2d_table<T>(grid, cfg_.model_dim);
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string b = "blocks." + std::to_string(l);
      norm(b + ".norm1");
      weight(b + ".attn.q", D, D);
      weight(b + ".attn.k", D, D);
      weight(b + ".attn.v", D, D);
      weight(b + ".attn.proj", D, D);
      norm(b + ".norm2");
      weight(b + ".mlp.fc1", D, H);
      weight(b + ".mlp.fc2", H, D);
    }
    norm("norm");
    weight("head", D, std::size_t(cfg_.embed_out));
  }

  const ViTConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  PositionEmbedding<T> position_embedding() const {
    if (cfg_.pos_embed == PosEmbedKind::learnable) {
      return {cfg_.grid(), params_.at("pos_embed"), PosEmbedKind::learnable};
    }
    return {cfg_.grid(), fixed_table_, PosEmbedKind::fixed_sincos_2d};
  }

  /// Changes the expected input size. A learnable table is bilinearly resampled to the new
  /// grid; a fixed table is regenerated.
  void resize_input(int height, int width) {
    ViTConfig next = cfg_;
    next.image_height = height;
    next.image_width = width;
    next.validate();
    if (next.grid() == cfg_.grid()) {
      cfg_ = next;
      return;
    }
    if (cfg_.pos_embed == PosEmbedKind::learnable) {
      auto pe = interpolate_pos_embed(position_embedding(), next.grid());
      params_.replace("pos_embed", pe.table);
    } else {
      fixed_table_ = sincos_2d_table<T>(next.grid(), cfg_.model_dim);
    }
    cfg_ = next;
  }

  /// Patch embedding plus class token; positions cover the full grid, no position added yet.
  TokenSet<T> embed(const Image& img) const {
    if (img.height != cfg_.image_height || img.width != cfg_.image_width || img.channels != cfg_.channels) {
      throw std::invalid_argument("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                  " does not match encoder input " + std::to_string(cfg_.image_height) + "x" +
                                  std::to_string(cfg_.image_width));
    }
    auto patches = patchify<T>(img, cfg_.patch_size);
    auto proj = linear(patches.rows, "patch_embed");
    return {concat<T>({params_.at("cls_token"), proj}, 0), full_grid_positions(patches.grid), patches.grid};
  }

  /// Runs the encoder blocks on position-encoded tokens.
  EncoderOutput<T> forward(const TokenSet<T>& in, bool want_attention = false) const {
    const std::size_t n = in.tokens.dim(0);
    const std::size_t D = cfg_.model_dim;
    const std::size_t heads = cfg_.heads;
    const std::size_t hd = cfg_.head_dim();
    const T inv_scale = T(1) / std::sqrt(T(hd));
    Tensor<T> x = in.tokens;
    std::optional<AttentionMap> attention;
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string b = "blocks." + std::to_string(l);
      Tensor<T> h = norm(x, b + ".norm1");
      auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {n, heads, hd}), {1, 0, 2}); };
      Tensor<T> q = split(scale(linear(h, b + ".attn.q"), inv_scale));
      Tensor<T> k = split(linear(h, b + ".attn.k"));
      Tensor<T> v = split(linear(h, b + ".attn.v"));
      Tensor<T> weights = softmax(matmul(q, transpose(k)), -1);  // [heads x n x n]
      if (want_attention && l + 1 == cfg_.layers) attention = class_attention(weights, in);
      Tensor<T> mixed = reshape(permute(matmul(weights, v), {1, 0, 2}), {n, D});
      x = add(x, linear(mixed, b + ".attn.proj"));
      Tensor<T> h2 = norm(x, b + ".norm2");
      x = add(x, linear(gelu(linear(h2, b + ".mlp.fc1")), b + ".mlp.fc2"));
    }
    Tensor<T> cls = norm(gather_rows(x, {0}), "norm");
    return {l2_normalize(linear(cls, "head")), std::move(attention)};
  }

  /// embed -> add_position -> forward.
  EncoderOutput<T> encode(const Image& img, bool want_attention = false) const {
    return forward(add_position(embed(img), position_embedding()), want_attention);
  }

 private:
  Tensor<T> linear(const Tensor<T>& x, const std::string& name) const {
    return add(matmul(x, params_.at(name + ".weight")), params_.at(name + ".bias"));
  }

  Tensor<T> norm(const Tensor<T>& x, const std::string& name) const {
    return layer_norm(x, params_.at(name + ".gain"), params_.at(name + ".bias"), T(1e-6));
  }

  static AttentionMap class_attention(const Tensor<T>& weights, const TokenSet<T>& in) {
    const std::size_t heads = weights.dim(0);
    const std::size_t n = weights.dim(1);
    AttentionMap map;
    map.grid = in.grid;
    map.values.assign(in.grid.size(), 0.0);
    const auto& w = weights.storage();
    for (std::size_t h = 0; h < heads; ++h) {
      const T* row = w.data() + h * n * n;  // class-token query row
      map.class_weight += double(row[0]);
      for (std::size_t j = 1; j < n; ++j) {
        const auto& p = in.positions[j - 1];
        map.values[p.row * in.grid.cols + p.col] += double(row[j]);
      }
    }
    map.class_weight /= double(heads);
    for (auto& v : map.values) v /= double(heads);
    return map;
  }

  ViTConfig cfg_;
  ParameterSet<T> params_;
  Tensor<T> fixed_table_;
};

/// Writes "ATTN <rows> <cols>" then one grid row of values per line.
inline std::string encode_attention(const AttentionMap& map) {
  if (map.values.size() != map.grid.size()) throw std::invalid_argument("attention map size mismatch");
  std::string out = "ATTN " + std::to_string(map.grid.rows) + " " + std::to_string(map.grid.cols) + "\n";
  char buf[32];
  for (std::size_t r = 0; r < map.grid.rows; ++r) {
    for (std::size_t c = 0; c < map.grid.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", map.values[r * map.grid.cols + c]);
      if (c) out += ' ';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline AttentionMap decode_attention(const std::string& text) {
  std::istringstream in(text);
  std::string tag;
  AttentionMap map;
  if (!(in >> tag >> map.grid.rows >> map.grid.cols) || tag != "ATTN" || map.grid.size() == 0) {
    throw std::runtime_error("malformed ATTN header");
  }
  map.values.resize(map.grid.size());
  for (auto& v : map.values) {
    if (!(in >> v)) throw std::runtime_error("truncated ATTN payload");
    if (!(v >= 0.0)) throw std::runtime_error("negative or invalid attention value");
  }
  std::string extra;
  if (in >> extra) throw std::runtime_error("trailing data in ATTN file");
  return map;
}

inline void write_attention(const AttentionMap& map, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << encode_attention(map);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline AttentionMap read_attention(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open attention file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_attention(text);
}

}  // namespace transgeo
