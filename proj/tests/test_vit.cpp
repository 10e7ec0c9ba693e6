#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "support/gradcheck.hpp"

using namespace transgeo;
using tgtest::TensorD;

namespace {

Image ramp_image(int h, int w, int c = 3) {
  Image img(h, w, c);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i % 251) / 251.0f;
  return img;
}

PositionEmbedding<double> random_table(GridShape g, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {g, tgtest::random_tensor({g.size() + 1, d}, rng), PosEmbedKind::learnable};
}

}  // namespace

TEST(Patchify, CountsMatchGridArithmetic) {
  auto a = patchify<double>(Image(256, 256, 3), 16);
  EXPECT_EQ(a.rows.dim(0), 256u);
  EXPECT_EQ(a.grid, (GridShape{16, 16}));
  EXPECT_EQ(a.rows.dim(1), 768u);
  auto b = patchify<double>(Image(320, 320, 3), 16);
  EXPECT_EQ(b.rows.dim(0), 400u);
  EXPECT_EQ(b.grid, (GridShape{20, 20}));
}

TEST(Patchify, SinglePatchIsTheFlattenedImage) {
  Image img = ramp_image(16, 16);
  auto p = patchify<double>(img, 16);
  ASSERT_EQ(p.rows.dim(0), 1u);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(p.rows[i], double(img.data[i]));
}

TEST(Patchify, RowMajorGridAndRowColChannelOrder) {
  Image img = ramp_image(4, 6, 2);
  auto p = patchify<double>(img, 2);
  ASSERT_EQ(p.grid, (GridShape{2, 3}));
  // patch 4 is grid (1, 1); its element (r=1, c=0, ch=1) comes from pixel (3, 2).
  const std::size_t elem = (1 * 2 + 0) * 2 + 1;
  EXPECT_EQ(p.rows[4 * 8 + elem], double(img.at(3, 2, 1)));
}

TEST(Patchify, RejectsNonDivisibleSize) {
  EXPECT_THROW(patchify<double>(Image(10, 16, 3), 4), std::invalid_argument);
}

TEST(AddPosition, FullGridAddsWholeTable) {
  std::mt19937_64 rng(1);
  GridShape g{2, 3};
  auto pe = random_table(g, 4, 2);
  TokenSet<double> ts{tgtest::random_tensor({7, 4}, rng), full_grid_positions(g), g};
  auto out = add_position(ts, pe);
  for (std::size_t i = 0; i < 28; ++i) EXPECT_DOUBLE_EQ(out.tokens[i], ts.tokens[i] + pe.table[i]);
}

TEST(AddPosition, CroppedTokensReceiveTheirOwnRows) {
  std::mt19937_64 rng(3);
  GridShape g{4, 5};
  auto pe = random_table(g, 3, 4);
  TokenSet<double> ts{tgtest::random_tensor({3, 3}, rng), {{1, 0}, {3, 2}}, g};  // patches 5 and 17
  auto out = add_position(ts, pe);
  const std::size_t rows[3] = {0, 1 + 5, 1 + 17};
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(out.tokens[t * 3 + k], ts.tokens[t * 3 + k] + pe.table[rows[t] * 3 + k]);
}

TEST(AddPosition, PositionOutsideTableThrows) {
  GridShape g{2, 2};
  auto pe = random_table(g, 2, 5);
  TokenSet<double> ts{TensorD::zeros({2, 2}), {{2, 0}}, g};
  EXPECT_THROW(add_position(ts, pe), std::invalid_argument);
}

TEST(SincosTable, MatchesIndependentDerivation) {
  const int D = 8;
  auto t = sincos_2d_table<double>({2, 2}, D);
  ASSERT_EQ(t.shape(), (Shape{5, 8}));
  for (int k = 0; k < D; ++k) EXPECT_EQ(t[k], 0.0);
  // Standard form: frequencies 1 / 10000^(2i / (D/2)) over a quarter of the channels.
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double* row = t.storage().data() + (1 + r * 2 + c) * D;
      const double w[2] = {1.0, 1.0 / 100.0};
      for (int i = 0; i < 2; ++i) {
        EXPECT_NEAR(row[i], std::sin(r * w[i]), 1e-15);
        EXPECT_NEAR(row[2 + i], std::cos(r * w[i]), 1e-15);
        EXPECT_NEAR(row[4 + i], std::sin(c * w[i]), 1e-15);
        EXPECT_NEAR(row[6 + i], std::cos(c * w[i]), 1e-15);
      }
    }
  }
}

TEST(InterpolatePosEmbed, SameGridIsBitIdentical) {
  auto pe = random_table({3, 4}, 5, 6);
  auto out = interpolate_pos_embed(pe, {3, 4});
  EXPECT_EQ(out.table.storage(), pe.table.storage());
}

TEST(InterpolatePosEmbed, ConstantTableStaysConstant) {
  GridShape g{2, 3};
  PositionEmbedding<double> pe{g, TensorD::full({7, 3}, 0.25), PosEmbedKind::learnable};
  for (GridShape to : {GridShape{5, 5}, GridShape{1, 7}, GridShape{9, 2}}) {
    auto out = interpolate_pos_embed(pe, to);
    ASSERT_EQ(out.table.dim(0), to.size() + 1);
    for (double v : out.table.storage()) EXPECT_NEAR(v, 0.25, 1e-15);
  }
}

TEST(InterpolatePosEmbed, CenterOfThreeByThreeIsCornerMean) {
  auto pe = random_table({2, 2}, 4, 7);
  auto out = interpolate_pos_embed(pe, {3, 3});
  for (std::size_t k = 0; k < 4; ++k) {
    double mean = 0;
    for (std::size_t p = 1; p <= 4; ++p) mean += pe.table[p * 4 + k] / 4;
    EXPECT_NEAR(out.table[(1 + 4) * 4 + k], mean, 1e-12);
    EXPECT_EQ(out.table[k], pe.table[k]);  // class row copied
  }
}

TEST(InterpolatePosEmbed, RejectsFixedKindAndEmptyGrid) {
  auto pe = random_table({2, 2}, 4, 8);
  EXPECT_THROW(interpolate_pos_embed(pe, {0, 3}), std::invalid_argument);
  pe.kind = PosEmbedKind::fixed_sincos_2d;
  EXPECT_THROW(interpolate_pos_embed(pe, {3, 3}), std::invalid_argument);
}

TEST(Encoder, EmbeddingHasUnitNorm) {
  std::mt19937_64 rng(9);
  for (auto pe : {PosEmbedKind::learnable, PosEmbedKind::fixed_sincos_2d}) {
    VisionTransformer<double> enc(tgtest::tiny_vit(8, 16, pe), 3);
    for (int trial = 0; trial < 5; ++trial) {
      auto e = enc.encode(tgtest::random_image(8, 16, rng)).embedding;
      double n = 0;
      for (double v : e.storage()) n += v * v;
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
  }
}

TEST(Encoder, AttentionMapPlusClassWeightSumsToOne) {
  std::mt19937_64 rng(10);
  VisionTransformer<double> enc(tgtest::tiny_vit(12, 12), 4);
  auto out = enc.encode(tgtest::random_image(12, 12, rng), true);
  ASSERT_TRUE(out.attention.has_value());
  const auto& m = *out.attention;
  EXPECT_EQ(m.grid, (GridShape{3, 3}));
  double s = m.class_weight;
  for (double v : m.values) {
    EXPECT_GE(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-5);
}

TEST(Encoder, TwoTokenAttentionMatchesDirectComputation) {
  // One patch + class token, one layer, one head: the map is softmax([q.kc, q.kp])[1].
  ViTConfig c = tgtest::tiny_vit(4, 4);
  c.layers = 1;
  c.heads = 1;
  VisionTransformer<double> enc(c, 11);
  std::mt19937_64 rng(12);
  Image img = tgtest::random_image(4, 4, rng);
  auto tokens = add_position(enc.embed(img), enc.position_embedding());
  auto out = enc.forward(tokens, true);

  NoGradGuard g;
  const auto& P = enc.params();
  auto h = layer_norm(tokens.tokens, P.at("blocks.0.norm1.gain"), P.at("blocks.0.norm1.bias"), 1e-6);
  auto q = add(matmul(h, P.at("blocks.0.attn.q.weight")), P.at("blocks.0.attn.q.bias"));
  auto k = add(matmul(h, P.at("blocks.0.attn.k.weight")), P.at("blocks.0.attn.k.bias"));
  const std::size_t D = c.model_dim;
  double s0 = 0, s1 = 0;
  for (std::size_t i = 0; i < D; ++i) {
    s0 += q[i] * k[i];
    s1 += q[i] * k[D + i];
  }
  s0 /= std::sqrt(double(D));
  s1 /= std::sqrt(double(D));
  const double expected = std::exp(s1) / (std::exp(s0) + std::exp(s1));
  ASSERT_EQ(out.attention->values.size(), 1u);
  EXPECT_NEAR(out.attention->values[0], expected, 1e-12);
  EXPECT_NEAR(out.attention->class_weight, 1 - expected, 1e-12);
}

TEST(Encoder, PermutingCroppedTokensLeavesEmbeddingUnchanged) {
  VisionTransformer<double> enc(tgtest::tiny_vit(12, 12), 13);
  std::mt19937_64 rng(14);
  auto tokens = add_position(enc.embed(tgtest::random_image(12, 12, rng)), enc.position_embedding());
  auto kept = crop_tokens(tokens, TokenMask{{3, 3}, {1, 2, 4, 7, 8}});
  const std::vector<std::size_t> perm{0, 4, 2, 5, 1, 3};
  TokenSet<double> shuffled{gather_rows(kept.tokens, perm), {}, kept.grid};
  for (std::size_t i = 1; i < perm.size(); ++i) shuffled.positions.push_back(kept.positions[perm[i] - 1]);
  auto a = enc.forward(kept).embedding;
  auto b = enc.forward(shuffled).embedding;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(Encoder, StreamsShareNoParameters) {
  VisionTransformer<double> s(tgtest::tiny_vit(8, 16), 1);
  VisionTransformer<double> a(tgtest::tiny_vit(8, 8), 2);
  for (const auto& es : s.params().entries()) {
    for (const auto& ea : a.params().entries()) {
      EXPECT_NE(es.tensor.storage().data(), ea.tensor.storage().data()) << es.name;
    }
  }
  // Training one leaves the other untouched.
  auto before = a.params().at("head.weight").storage();
  s.params().at("head.weight")[0] += 1.0;
  EXPECT_EQ(a.params().at("head.weight").storage(), before);
}

TEST(Encoder, FixedTableHasNoLearnableParameters) {
  VisionTransformer<double> enc(tgtest::tiny_vit(8, 8, PosEmbedKind::fixed_sincos_2d), 1);
  for (const auto& e : enc.params().entries()) EXPECT_NE(e.name, "pos_embed");
}

TEST(Encoder, ResizeInputResamplesLearnableTable) {
  VisionTransformer<double> enc(tgtest::tiny_vit(8, 8), 15);
  const auto before = enc.position_embedding();
  enc.resize_input(12, 12);
  const auto after = enc.position_embedding();
  EXPECT_EQ(after.grid, (GridShape{3, 3}));
  auto expected = interpolate_pos_embed(before, {3, 3});
  EXPECT_EQ(after.table.storage(), expected.table.storage());
  std::mt19937_64 rng(16);
  EXPECT_NO_THROW(enc.encode(tgtest::random_image(12, 12, rng)));
}

TEST(EncoderGradient, FullTinyEncoderWithTripletLoss) {
  const auto r = tgtest::encoder_loss_gradient();
  EXPECT_GT(r.checked, 1000u);
  EXPECT_LT(r.max_rel, 1e-5) << r.worst_analytic << " vs " << r.worst_numeric;
}

TEST(EncoderGradient, CroppedAerialPath) {
  const auto r = tgtest::cropped_encoder_gradient();
  EXPECT_LT(r.max_rel, 1e-5);
}

TEST(AttentionFile, RoundTripsAndRejectsBadInput) {
  AttentionMap m;
  m.grid = {2, 3};
  m.values = {0.1, 0.2, 0.05, 0.0, 0.3, 0.125};
  const std::string text = encode_attention(m);
  EXPECT_EQ(text.rfind("ATTN 2 3\n", 0), 0u);
  auto back = decode_attention(text);
  EXPECT_EQ(back.grid, m.grid);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(back.values[i], m.values[i], 1e-9);

  const auto path = std::filesystem::temp_directory_path() / "transgeo_attn_test.attn";
  write_attention(m, path.string());
  EXPECT_EQ(read_attention(path.string()).values, back.values);
  std::filesystem::remove(path);

  EXPECT_THROW(decode_attention("ATTN 2 2\n1 2 3"), std::runtime_error);
  EXPECT_THROW(decode_attention("ATT 1 1\n1"), std::runtime_error);
  EXPECT_THROW(decode_attention("ATTN 1 1\n-1"), std::runtime_error);
}
