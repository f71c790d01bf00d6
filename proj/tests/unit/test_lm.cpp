#include <gtest/gtest.h>

#include "oracle.hpp"
#include "test_util.hpp"
#include "vlm/error.hpp"
#include "vlm/lm.hpp"

using namespace vlm;
using namespace vlm::lm;
namespace o = vlm::oracle;

namespace {

LMConfig tiny(std::size_t d = 8, std::size_t layers = 2, std::optional<std::size_t> every = std::nullopt) {
  LMConfig c;
  c.vocab_size = 20;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = 2;
  c.max_seq = 16;
  c.cross_attn_every = every;
  return c;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a vlm::Error";
  return ErrorCode::kIo;
}

o::Mat decode_oracle(const LanguageModel& lm, const Tensor& emb, const ImageContext* images = nullptr) {
  const std::size_t t = emb.dim(0);
  o::Mat x = o::add(o::Mat(emb), o::Mat(slice_rows(lm.pos_embed.value, 0, t)));
  for (std::size_t i = 0; i < lm.blocks.size(); ++i) {
    if (lm.cross[i] && images && images->n_states() > 0) {
      const auto& cb = *lm.cross[i];
      const o::Mat a = o::attention(o::layer_norm(x, cb.ln_text), o::layer_norm(o::Mat(images->states), cb.ln_image),
                                    cb.attn, [&](std::size_t q, std::size_t s) {
                                      return images->available_from[images->state_image[s]] <= q;
                                    });
      const double g = std::tanh(cb.gate.value.at(0));
      for (std::size_t k = 0; k < x.v.size(); ++k) x.v[k] += g * a.v[k];
    }
    x = o::block(x, lm.blocks[i], [](std::size_t q, std::size_t k) { return k <= q; });
  }
  return o::linear(o::layer_norm(x, lm.final_norm), lm.head);
}

std::size_t trainable_count(LanguageModel& lm) {
  std::size_t n = 0;
  for (Parameter* p : lm.parameters()) n += p->trainable ? p->value.numel() : 0;
  return n;
}

}  // namespace

TEST(Tokenizer, ByteLevelRoundTrip) {
  const std::string text = "colour? r\xc3\xa9";
  const auto ids = tokenize(text);
  EXPECT_EQ(ids.size(), text.size());
  EXPECT_EQ(detokenize(ids), text);
  const int specials[] = {'a', tokens::kEndOfUtterance, tokens::kImage};
  EXPECT_EQ(detokenize(specials), "a<end_of_utterance><image>");
  EXPECT_EQ(special_from_name("eos"), tokens::kEos);
  EXPECT_FALSE(special_from_name("bos").has_value());
}

TEST(Decode, MatchesBruteForceOracle) {
  Rng rng(1);
  LanguageModel lm(tiny(8, 2), rng);
  o::randomize(lm, rng);
  const Tensor emb = Tensor::randn({4, 8}, 1.0, rng);
  EXPECT_LT(o::max_abs_diff(decode_oracle(lm, emb), lm.decode(emb)), 1e-10);
}

TEST(Decode, GatedCrossAttentionMatchesOracle) {
  Rng rng(2);
  LanguageModel lm(tiny(8, 2, 1), rng);
  o::randomize(lm, rng);
  ImageContext images;
  images.states = Tensor::randn({5, 8}, 1.0, rng);
  images.state_image = {0, 0, 0, 1, 1};
  images.available_from = {1, 3};
  const Tensor emb = Tensor::randn({5, 8}, 1.0, rng);
  EXPECT_LT(o::max_abs_diff(decode_oracle(lm, emb, &images), lm.decode(emb, &images)), 1e-10);
}

TEST(Decode, ZeroGateEqualsPlainLanguageModel) {
  Rng a(3), b(3);
  LanguageModel plain(tiny(8, 4), a);
  LanguageModel cross(tiny(8, 4, 2), b);
  const int ids[] = {1, 5, 7, 2, 9, 11};
  EXPECT_TRUE(vlm::testing::bit_identical(plain.forward_ids(ids), cross.forward_ids(ids)));

  ImageContext images;
  Rng s(4);
  images.states = Tensor::randn({3, 8}, 1.0, s);
  images.state_image = {0, 0, 0};
  images.available_from = {0};
  EXPECT_TRUE(vlm::testing::bit_identical(plain.decode(plain.embed(ids)), cross.decode(cross.embed(ids), &images)));
}

TEST(Decode, CausalityExactForFuturePerturbations) {
  Rng rng(5);
  LanguageModel lm(tiny(8, 2), rng);
  const Tensor emb = Tensor::randn({6, 8}, 1.0, rng);
  const Tensor base = lm.decode(emb);
  const std::size_t v = 20;
  for (std::size_t t = 0; t < 6; ++t) {
    Tensor pert = emb.clone();
    for (std::size_t c = 0; c < 8; ++c) pert.mutable_data()[t * 8 + c] += 3.0;
    const Tensor out = lm.decode(pert);
    for (std::size_t q = 0; q < t; ++q)
      for (std::size_t k = 0; k < v; ++k) ASSERT_EQ(out.at(q * v + k), base.at(q * v + k)) << "t=" << t;
    double moved = 0.0;
    for (std::size_t k = 0; k < v; ++k) moved += std::abs(out.at(t * v + k) - base.at(t * v + k));
    EXPECT_GT(moved, 0.0);
  }
}

TEST(Decode, ImagesBecomeVisibleAtTheirPlaceholder) {
  Rng rng(6);
  LanguageModel lm(tiny(8, 2, 1), rng);
  lm.cross[0]->gate.value.mutable_data()[0] = 0.8;
  lm.cross[1]->gate.value.mutable_data()[0] = -0.5;
  const Tensor emb = Tensor::randn({6, 8}, 1.0, rng);
  ImageContext images;
  images.states = Tensor::randn({2, 8}, 1.0, rng);
  images.state_image = {0, 0};
  images.available_from = {3};
  const Tensor with = lm.decode(emb, &images);
  ImageContext none;
  const Tensor without = lm.decode(emb, &none);
  for (std::size_t i = 0; i < 3 * 20; ++i) EXPECT_EQ(with.at(i), without.at(i));
  EXPECT_GT(vlm::testing::max_abs_diff(slice_rows(with, 3, 6), slice_rows(without, 3, 6)), 1e-6);
}

TEST(Decode, PaddingMaskHidesKeys) {
  Rng rng(7);
  LanguageModel lm(tiny(8, 2), rng);
  const Tensor emb = Tensor::randn({5, 8}, 1.0, rng);
  const std::uint8_t mask[] = {1, 0, 1, 1, 0};
  const Tensor base = lm.decode(emb, nullptr, mask);
  Tensor pert = emb.clone();
  for (std::size_t c = 0; c < 8; ++c) pert.mutable_data()[8 + c] -= 2.0;
  const Tensor out = lm.decode(pert, nullptr, mask);
  for (std::size_t q : {0u, 2u, 3u})
    for (std::size_t k = 0; k < 20; ++k) EXPECT_EQ(out.at(q * 20 + k), base.at(q * 20 + k));
}

TEST(Decode, ErrorContracts) {
  Rng rng(8);
  LanguageModel plain(tiny(8, 2), rng);
  LanguageModel cross(tiny(8, 2, 1), rng);
  ImageContext none;
  EXPECT_EQ(code_of([&] { cross.decode(Tensor::zeros({3, 8})); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { plain.decode(Tensor::zeros({3, 8}), &none); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { plain.decode(Tensor::zeros({17, 8})); }), ErrorCode::kCapacity);
  EXPECT_EQ(code_of([&] { plain.decode(Tensor::zeros({3, 4})); }), ErrorCode::kShape);
  const int bad[] = {1, 20};
  EXPECT_EQ(code_of([&] { plain.embed(bad); }), ErrorCode::kInput);
  LMConfig c = tiny(8, 2, 3);
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  c = tiny(9, 2);
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
}

TEST(Decode, FiniteDifferenceGradientsWithCrossBlocks) {
  Rng rng(9);
  LMConfig cfg = tiny(4, 2, 1);
  cfg.vocab_size = 6;
  LanguageModel lm(cfg, rng);
  o::randomize(lm, rng);
  ImageContext images;
  images.states = Tensor::randn({2, 4}, 1.0, rng, true);
  images.state_image = {0, 0};
  images.available_from = {1};
  const Tensor emb = Tensor::randn({3, 4}, 1.0, rng, true);
  std::vector<vlm::testing::NamedLeaf> leaves{{"emb", emb}, {"states", images.states}};
  for (Parameter* p : lm.parameters()) leaves.push_back({p->name, p->value});
  const auto report = vlm::testing::check_gradients([&] { return vlm::testing::probe(lm.decode(emb, &images)); },
                                                    leaves, 1e-5, 1e-4);
  EXPECT_TRUE(report.all_passed()) << report.pass_rate();
}

TEST(CrossBlocks, ParameterCountClosedForm) {
  Rng rng(10);
  for (std::size_t d : {4u, 8u, 16u}) {
    GatedCrossAttention block("x", d, 2, rng);
    std::size_t n = 0;
    struct Counter : ModuleVisitor {
      std::size_t* n;
      void param(Parameter& p) override { *n += p.value.numel(); }
    } c;
    c.n = &n;
    block.visit(c);
    EXPECT_EQ(n, 4 * d * d + 1 + 4 * d);
    EXPECT_EQ(cross_block_param_count(d), n);
  }
}

TEST(CrossBlocks, MoreFrequentInsertionMeansMoreTrainable) {
  Rng a(11), b(11);
  LanguageModel every1(tiny(8, 4, 1), a);
  LanguageModel every4(tiny(8, 4, 4), b);
  EXPECT_EQ(tiny(8, 4, 1).n_cross_blocks(), 4u);
  EXPECT_EQ(tiny(8, 4, 4).n_cross_blocks(), 1u);
  EXPECT_GT(trainable_count(every1), trainable_count(every4));
  EXPECT_EQ(trainable_count(every1) - trainable_count(every4), 3 * cross_block_param_count(8));
}

TEST(Generate, ZeroBudgetIsEmpty) {
  const int prompt[] = {1, 2};
  const auto out = generate_greedy([](std::span<const int>) { return std::vector<double>(10, 0.0); }, prompt, 0, {}, 8);
  EXPECT_TRUE(out.empty());
}

TEST(Generate, ConstantArgmaxRepeats) {
  const int prompt[] = {1};
  auto rigged = [](std::span<const int>) {
    std::vector<double> l(10, 0.0);
    l[7] = 5.0;
    return l;
  };
  EXPECT_EQ(generate_greedy(rigged, prompt, 4, {}, 8), (std::vector<int>{7, 7, 7, 7}));
}

TEST(Generate, TieGoesToLowestId) {
  const int prompt[] = {1};
  auto rigged = [](std::span<const int>) {
    std::vector<double> l(10, 0.0);
    l[6] = 2.0;
    l[3] = 2.0;
    return l;
  };
  EXPECT_EQ(generate_greedy(rigged, prompt, 2, {}, 8), (std::vector<int>{3, 3}));
}

TEST(Generate, StopTokenEndsAndIsExcluded) {
  const int prompt[] = {0};
  auto counting = [](std::span<const int> ids) {
    std::vector<double> l(10, 0.0);
    l[ids.size() < 3 ? 4 : 9] = 1.0;
    return l;
  };
  const int stops[] = {9};
  EXPECT_EQ(generate_greedy(counting, prompt, 6, stops, 16), (std::vector<int>{4, 4}));
}

TEST(Generate, OverflowIsCapacityError) {
  const int prompt[] = {1, 2, 3};
  EXPECT_EQ(code_of([&] {
              generate_greedy([](std::span<const int>) { return std::vector<double>(4, 0.0); }, prompt, 6, {}, 8);
            }),
            ErrorCode::kCapacity);
}

TEST(Generate, PureFunctionOfModelAndPrompt) {
  Rng rng(12);
  LanguageModel lm(tiny(8, 2), rng);
  auto next = [&](std::span<const int> ids) {
    NoGradGuard guard;
    const Tensor logits = lm.forward_ids(ids);
    const std::size_t v = logits.dim(1);
    return std::vector<double>(logits.data().end() - static_cast<long>(v), logits.data().end());
  };
  const int prompt[] = {3, 1, 4};
  const auto a = generate_greedy(next, prompt, 8, {}, 16);
  const auto b = generate_greedy(next, prompt, 8, {}, 16);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 8u);
}
