#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "toy.hpp"
#include "vlm/adapters.hpp"
#include "vlm/error.hpp"
#include "vlm/fusion.hpp"
#include "vlm/pipeline.hpp"

using namespace vlm;
using vlm::testing::toy_config;
using vlm::testing::toy_document;

namespace {

using Images = std::vector<std::shared_ptr<const vision::ImageGrid>>;

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

Document image_then_text(const std::string& text, Rng& rng) {
  Document doc;
  doc.images.push_back(vlm::testing::random_image(4, 4, rng));
  doc.segments.push_back(ImageSegment{0});
  doc.segments.push_back(TextSegment{text, {}});
  return doc;
}

Document text_only(const std::string& text) {
  Document doc;
  doc.segments.push_back(TextSegment{text, {{0, text.size()}}});
  return doc;
}

/// Random interleaved document with 0..4 image references and answer spans.
Document random_document(Rng& rng) {
  std::uniform_int_distribution<int> n_seg(1, 8), kind(0, 2), len(0, 6), byte('a', 'z');
  Document doc;
  const std::size_t n_images = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
  for (std::size_t i = 0; i < n_images; ++i) doc.images.push_back(vlm::testing::random_image(2, 2, rng));
  const int segments = n_seg(rng);
  for (int s = 0; s < segments; ++s) {
    switch (kind(rng)) {
      case 0: doc.segments.push_back(ImageSegment{std::uniform_int_distribution<std::size_t>(0, n_images - 1)(rng)}); break;
      case 1: {
        std::string t(static_cast<std::size_t>(len(rng)), 'x');
        for (char& c : t) c = static_cast<char>(byte(rng));
        doc.segments.push_back(TextSegment{t, {{0, t.size() / 2}}});
        break;
      }
      default: doc.segments.push_back(SpecialSegment{lm::tokens::kEndOfUtterance, (s % 2) == 0}); break;
    }
  }
  return doc;
}

std::size_t count_placeholders(const MultimodalSequence& seq) {
  return static_cast<std::size_t>(std::count(seq.token_ids.begin(), seq.token_ids.end(), lm::tokens::kImage));
}

/// Independent tabulation of forward FLOPs, one line item per matmul.
double tabulated_flops(const VLMConfig& c, std::size_t text, std::size_t n_images) {
  const double g = static_cast<double>(c.vision.max_side / c.vision.patch_size);
  const double p = g * g, pd = static_cast<double>(c.vision.patch_dim()), dv = static_cast<double>(c.vision.d_vision);
  const double d = static_cast<double>(c.lm.d_model), v = static_cast<double>(c.lm.vocab_size);
  const double lat = static_cast<double>(c.connector.n_latents), n = static_cast<double>(n_images);
  const double vl = static_cast<double>(c.vision.n_layers), cl = static_cast<double>(c.connector.n_layers);
  const double ll = static_cast<double>(c.lm.n_layers);
  const bool cross = c.architecture == Architecture::kCrossAttention;

  double vision = 2 * p * pd * dv;                 // patch embedding
  vision += vl * (4 * 2 * p * dv * dv);            // q, k, v, o
  vision += vl * (2 * 2 * p * p * dv);             // scores + weighted sum
  vision += vl * (2 * 2 * p * dv * 4 * dv);        // MLP up + down

  double conn = 2 * p * dv * d + 2 * p * d * d;    // pre-MLP
  if (!cross) {
    const double kv = p + lat;
    conn += cl * (2 * 2 * lat * d * d);            // q, o on latents
    conn += cl * (2 * 2 * kv * d * d);             // k, v on context + latents
    conn += cl * (2 * 2 * lat * kv * d);           // scores + weighted sum
    conn += cl * (2 * 2 * lat * d * 4 * d);        // latent MLP
  }

  const double t = static_cast<double>(text) + (cross ? n : n * lat);
  double lm = ll * (4 * 2 * t * d * d + 2 * 2 * t * t * d + 2 * 2 * t * d * 4 * d) + 2 * t * d * v;
  if (cross && n_images > 0) {
    const double s = n * p;
    lm += static_cast<double>(c.lm.n_cross_blocks()) * (2 * 2 * t * d * d + 2 * 2 * s * d * d + 2 * 2 * t * s * d);
  }
  return n * (vision + conn) + lm;
}

std::size_t trainable_after(Module& m) {
  std::size_t n = 0;
  for (Parameter* p : m.parameters()) n += p->trainable ? p->value.numel() : 0;
  return n;
}

}  // namespace

TEST(BuildSequence, FullyAutoregressiveExpandsEachImage) {
  Rng rng(1);
  const Document doc = image_then_text("hi", rng);
  const auto seq = build_sequence(doc, Architecture::kFullyAutoregressive, 64);
  EXPECT_EQ(seq.size(), 64u + lm::tokenize("hi").size());
  ASSERT_EQ(seq.visual_spans.size(), 1u);
  EXPECT_EQ(seq.visual_spans[0].start, 0u);
  EXPECT_EQ(seq.visual_spans[0].length, 64u);
  EXPECT_EQ(count_placeholders(seq), 64u);
  seq.validate();
}

TEST(BuildSequence, CrossAttentionUsesOnePlaceholder) {
  Rng rng(2);
  const auto seq = build_sequence(image_then_text("hi", rng), Architecture::kCrossAttention, 64);
  ASSERT_EQ(seq.visual_spans.size(), 1u);
  EXPECT_EQ(seq.visual_spans[0].length, 1u);
  EXPECT_EQ(seq.size(), 3u);
}

TEST(BuildSequence, SplitImageGivesFiveSpansAnd320Placeholders) {
  Rng rng(3);
  pipeline::SplitConfig split;
  split.enabled = true;
  split.apply_prob = 1.0;
  const Document doc = pipeline::split_document_images(image_then_text("hi", rng), split, rng);
  const auto seq = build_sequence(doc, Architecture::kFullyAutoregressive, 64);
  EXPECT_EQ(seq.visual_spans.size(), 5u);
  EXPECT_EQ(count_placeholders(seq), 320u);
}

TEST(BuildSequence, AnswerSpansDriveLossMask) {
  Document doc;
  doc.segments.push_back(TextSegment{"q?", {}});
  doc.segments.push_back(SpecialSegment{lm::tokens::kEndOfUtterance, false});
  doc.segments.push_back(TextSegment{"abc", {{1, 3}}});
  doc.segments.push_back(SpecialSegment{lm::tokens::kEndOfUtterance, true});
  const auto seq = build_sequence(doc, Architecture::kFullyAutoregressive, 4);
  EXPECT_EQ(seq.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1, 1}));
}

TEST(BuildSequence, ErrorContracts) {
  Rng rng(4);
  Document doc = image_then_text("hi", rng);
  doc.segments.push_back(ImageSegment{3});
  EXPECT_EQ(code_of([&] { build_sequence(doc, Architecture::kFullyAutoregressive, 4); }), ErrorCode::kDanglingRef);
  EXPECT_EQ(code_of([&] { build_sequence(Document{}, Architecture::kCrossAttention, 4); }), ErrorCode::kInput);
  Document bad_span = text_only("ab");
  std::get<TextSegment>(bad_span.segments[0]).answer_spans = {{1, 5}};
  EXPECT_EQ(code_of([&] { build_sequence(bad_span, Architecture::kCrossAttention, 4); }), ErrorCode::kInput);
}

TEST(BuildSequence, RandomDocumentsSatisfyInvariants) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const Document doc = random_document(rng);
    for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
      const auto seq = build_sequence(doc, arch, 7);
      seq.validate();
      EXPECT_EQ(seq.visual_spans.size(), doc.n_image_refs());
      std::size_t covered = 0;
      for (const auto& span : seq.visual_spans) {
        EXPECT_EQ(span.length, arch == Architecture::kCrossAttention ? 1u : 7u);
        covered += span.length;
        for (std::size_t i = span.start; i < span.start + span.length; ++i) ASSERT_EQ(seq.loss_mask[i], 0);
      }
      EXPECT_EQ(covered, count_placeholders(seq));
    }
  }
}

TEST(BuildSequence, SequenceLengthIdentity) {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const Document doc = random_document(rng);
    const std::size_t tpi = std::uniform_int_distribution<std::size_t>(1, 100)(rng);
    const auto fa = build_sequence(doc, Architecture::kFullyAutoregressive, tpi);
    const auto ca = build_sequence(doc, Architecture::kCrossAttention, tpi);
    ASSERT_EQ(ca.size() + (tpi - 1) * doc.n_image_refs(), fa.size());
  }
}

TEST(Forward, TextOnlyReducesToPlainLanguageModel) {
  VLMModel fa(toy_config(Architecture::kFullyAutoregressive), 7);
  VLMModel ca(toy_config(Architecture::kCrossAttention), 7);
  const auto seq = build_sequence(text_only("hello"), Architecture::kFullyAutoregressive, 4);
  const Tensor plain = fa.lm.decode(fa.lm.embed(seq.token_ids), nullptr, seq.attn_mask);
  EXPECT_TRUE(vlm::testing::bit_identical(fa.forward(seq, {}), plain));
  EXPECT_TRUE(vlm::testing::bit_identical(ca.forward(seq, {}), plain));
  EXPECT_TRUE(vlm::testing::bit_identical(fa.lm.forward_ids(seq.token_ids), plain));
}

TEST(Forward, ZeroConnectorOutputEqualsZeroRowsAtSpans) {
  VLMModel model(toy_config(Architecture::kFullyAutoregressive), 8);
  for (double& v : model.connector.out_norm->gain.value.mutable_data()) v = 0.0;
  for (double& v : model.connector.out_norm->bias.value.mutable_data()) v = 0.0;
  Rng rng(8);
  const Document doc = toy_document(rng);
  const auto seq = model.build(doc);
  const auto& span = seq.visual_spans.at(0);
  const Tensor emb = replace_rows(model.lm.embed(seq.token_ids), span.start, Tensor::zeros({span.length, 16}));
  EXPECT_TRUE(vlm::testing::bit_identical(model.forward(seq, doc.images), model.lm.decode(emb, nullptr, seq.attn_mask)));
}

TEST(Forward, ImageRegistrationOrderIsIrrelevant) {
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    VLMModel model(toy_config(arch), 9);
    Rng rng(9);
    Document doc;
    doc.images = {vlm::testing::random_image(4, 4, rng), vlm::testing::random_image(4, 2, rng)};
    doc.segments = {ImageSegment{0}, TextSegment{"x", {}}, ImageSegment{1}, TextSegment{"y", {{0, 1}}}};
    Document swapped = doc;
    swapped.images = {doc.images[1], doc.images[0]};
    swapped.segments[0] = ImageSegment{1};
    swapped.segments[2] = ImageSegment{0};
    EXPECT_TRUE(vlm::testing::bit_identical(model.forward(model.build(doc), doc.images),
                                            model.forward(model.build(swapped), swapped.images)));
  }
}

TEST(Forward, ErrorContracts) {
  VLMModel fa(toy_config(Architecture::kFullyAutoregressive), 10);
  VLMModel ca(toy_config(Architecture::kCrossAttention), 10);
  Rng rng(10);
  const Document doc = toy_document(rng);
  EXPECT_EQ(code_of([&] { fa.forward(fa.build(doc), {}); }), ErrorCode::kDanglingRef);
  const auto wide = build_sequence(doc, Architecture::kFullyAutoregressive, 3);
  EXPECT_EQ(code_of([&] { fa.forward(wide, doc.images); }), ErrorCode::kShape);
  EXPECT_EQ(code_of([&] { ca.forward(wide, doc.images); }), ErrorCode::kShape);
  VLMConfig bad = toy_config(Architecture::kCrossAttention);
  bad.lm.cross_attn_every.reset();
  EXPECT_EQ(code_of([&] { bad.resolved(); }), ErrorCode::kConfig);
}

TEST(Forward, FiniteDifferenceGradientsBothArchitectures) {
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    VLMModel model(toy_config(arch), 11);
    for (auto& c : model.lm.cross)
      if (c) c->gate.value.mutable_data()[0] = 0.7;
    Rng rng(11);
    const Document doc = toy_document(rng);
    const auto seq = model.build(doc);
    std::vector<vlm::testing::NamedLeaf> leaves;
    for (Parameter* p : model.parameters()) leaves.push_back({p->name, p->value});
    const auto report =
        vlm::testing::check_gradients([&] { return model.loss(seq, doc.images); }, leaves, 1e-4, 1e-3);
    EXPECT_GE(report.pass_rate(), 0.99) << to_string(arch);
    for (const auto& e : report.entries) {
      if (component_of(e.tensor) == "connector") {
        EXPECT_TRUE(e.passed) << e.tensor << "[" << e.index << "] " << e.analytic << " vs " << e.numeric;
      }
    }
  }
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  Document doc;
  doc.segments = {TextSegment{"q", {}}, TextSegment{"a", {{0, 1}}}};
  const auto seq = build_sequence(doc, Architecture::kFullyAutoregressive, 1);
  EXPECT_NEAR(next_token_loss(Tensor::zeros({2, 260}), seq).item(), std::log(260.0), 1e-12);
}

TEST(Loss, InvariantToTargetsAtMaskedPositions) {
  Rng rng(12);
  Document doc;
  doc.segments = {TextSegment{"what?", {}}, TextSegment{"red", {{0, 3}}}};
  auto seq = build_sequence(doc, Architecture::kFullyAutoregressive, 1);
  const Tensor logits = Tensor::randn({seq.size(), 260}, 2.0, rng);
  const double base = next_token_loss(logits, seq).item();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.loss_mask[i]) continue;
    auto changed = seq;
    changed.token_ids[i] = (changed.token_ids[i] + 17) % 256;
    EXPECT_EQ(next_token_loss(logits, changed).item(), base) << i;
  }
}

TEST(Loss, HandComputedFiveTokenExample) {
  MultimodalSequence seq;
  seq.token_ids = {1, 2, 3, 4, 0};
  seq.attn_mask = {1, 1, 1, 1, 1};
  seq.loss_mask = {0, 0, 1, 1, 0};
  std::vector<double> raw(5 * 6);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::sin(0.7 * static_cast<double>(i)) * 3.0;
  const Tensor logits = Tensor::from({5, 6}, raw);
  auto nll = [&](std::size_t row, int target) {
    double z = 0.0;
    for (std::size_t k = 0; k < 6; ++k) z += std::exp(raw[row * 6 + k]);
    return std::log(z) - raw[row * 6 + static_cast<std::size_t>(target)];
  };
  // Targets at positions 2 and 3 are predicted from rows 1 and 2.
  const double expected = (nll(1, 3) + nll(2, 4)) / 2.0;
  EXPECT_NEAR(next_token_loss(logits, seq).item(), expected, 1e-12);
}

TEST(Loss, NoAnswerTokensIsAnError) {
  VLMModel model(toy_config(Architecture::kFullyAutoregressive), 13);
  Document doc;
  doc.segments = {TextSegment{"abc", {}}};
  EXPECT_THROW(model.loss(model.build(doc), {}), Error);
}

TEST(CountParams, FreezeAllGivesZeroTrainable) {
  VLMModel model(toy_config(Architecture::kCrossAttention), 14);
  const adapters::FreezePolicy none{{}, false};
  const auto counts = adapters::count_params(model, none);
  EXPECT_EQ(counts.trainable, 0u);
  EXPECT_GT(counts.total, 0u);
}

TEST(CountParams, CrossAttentionFrozenBackbonesClosedForm) {
  VLMModel model(toy_config(Architecture::kCrossAttention), 15);
  adapters::apply_policy(model, adapters::FreezePolicy::frozen_backbones());
  const std::size_t dv = 8, d = 16, layers = 2;
  const std::size_t pre_mlp = dv * d + d + d * d + d;
  const std::size_t cross = layers * (4 * d * d + 1 + 4 * d);
  const std::size_t placeholder = d;
  const auto counts = count_params(model);
  EXPECT_EQ(counts.trainable, pre_mlp + cross + placeholder);
  EXPECT_EQ(counts.by_component.at("cross_attn").second, cross);
  EXPECT_EQ(counts.by_component.at("vision").second, 0u);
  EXPECT_EQ(counts.by_component.at("lm").second, 0u);
}

TEST(CountParams, LoraEverywhereClosedForm) {
  VLMModel model(toy_config(Architecture::kFullyAutoregressive), 16);
  const std::size_t before = count_params(model).total;
  adapters::AdapterSpec spec;
  spec.rank = 4;
  Rng rng(16);
  adapters::apply_named_policy(model, "lora", spec, rng);
  const std::size_t dv = 8, d = 16, r = 4;
  const std::size_t per_vision_layer = 4 * (dv + dv) + (dv + 4 * dv) + (4 * dv + dv);
  const std::size_t per_lm_layer = 4 * (d + d) + (d + 4 * d) + (4 * d + d);
  const std::size_t adapters = r * (1 * per_vision_layer + 2 * per_lm_layer);
  const std::size_t connector = connector::connector_param_count(model.config().connector);
  const auto counts = count_params(model);
  EXPECT_EQ(counts.trainable, adapters + connector);
  EXPECT_EQ(counts.total, before + adapters);
  EXPECT_EQ(counts.by_component.at("adapters").second, adapters);
}

TEST(CountParams, RuleMatchingNothingIsPolicyError) {
  VLMModel model(toy_config(Architecture::kFullyAutoregressive), 17);
  const adapters::FreezePolicy policy{{{"decoder.*", false}}, true};
  EXPECT_EQ(code_of([&] { adapters::count_params(model, policy); }), ErrorCode::kPolicy);
}

TEST(Flops, ZeroLayerLanguageModelIsHeadOnly) {
  VLMConfig cfg = toy_config(Architecture::kFullyAutoregressive);
  cfg.lm.n_layers = 0;
  cfg.lm.cross_attn_every.reset();
  VLMModel model(cfg, 18);
  EXPECT_EQ(estimate_flops(model, 10, 0), 2.0 * 10 * 16 * 260);
}

TEST(Flops, DoublingTextMoreThanDoubles) {
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    VLMModel model(toy_config(arch), 19);
    for (std::size_t t : {1u, 5u, 50u}) EXPECT_GT(estimate_flops(model, 2 * t, 0), 2.0 * estimate_flops(model, t, 0));
  }
}

TEST(Flops, DoubleEntryAgainstTabulation) {
  VLMModel fa(toy_config(Architecture::kFullyAutoregressive), 20);
  VLMModel ca(toy_config(Architecture::kCrossAttention), 20);
  for (std::size_t n_images : {0u, 1u, 3u}) {
    const double f_fa = estimate_flops(fa, 12, n_images), f_ca = estimate_flops(ca, 12, n_images);
    EXPECT_DOUBLE_EQ(f_fa, tabulated_flops(fa.config(), 12, n_images));
    EXPECT_DOUBLE_EQ(f_ca, tabulated_flops(ca.config(), 12, n_images));
    EXPECT_DOUBLE_EQ(f_ca / f_fa, tabulated_flops(ca.config(), 12, n_images) / tabulated_flops(fa.config(), 12, n_images));
  }
}

TEST(Gradients, FrozenBaseWeightsStayZeroUnderLora) {
  VLMModel model(toy_config(Architecture::kFullyAutoregressive), 21);
  adapters::AdapterSpec spec;
  spec.rank = 2;
  Rng rng(21);
  adapters::apply_named_policy(model, "lora", spec, rng);
  const Document doc = toy_document(rng);
  const auto seq = model.build(doc);
  for (int step = 0; step < 3; ++step) backward(model.loss(seq, doc.images));
  double connector_norm = 0.0, adapter_norm = 0.0;
  for (Parameter* p : model.parameters()) {
    const auto grad = p->value.grad();
    const double norm = std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0);
    if (!p->trainable) EXPECT_EQ(norm, 0.0) << p->name;
    if (component_of(p->name) == "connector") connector_norm += norm;
    if (component_of(p->name) == "adapters") adapter_norm += norm;
  }
  EXPECT_GT(connector_norm, 0.0);
  EXPECT_GT(adapter_norm, 0.0);
  EXPECT_EQ(trainable_after(model), count_params(model).trainable);
}

TEST(Generate, GreedyIsDeterministicAndBounded) {
  VLMModel model(toy_config(Architecture::kCrossAttention), 22);
  Rng rng(22);
  Document doc = toy_document(rng);
  doc.segments.pop_back();
  const auto prompt = model.build(doc);
  const auto a = generate(model, prompt, doc.images, 4, {});
  EXPECT_EQ(a, generate(model, prompt, doc.images, 4, {}));
  EXPECT_EQ(a.size(), 4u);
  EXPECT_THROW(generate(model, prompt, doc.images, 16, {}), Error);
}
