// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [criterion numbers...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "toy.hpp"
#include "vlm/adapters.hpp"
#include "vlm/error.hpp"
#include "vlm/harness.hpp"
#include "vlm/pipeline.hpp"

using namespace vlm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed checks; the first few are echoed in the detail line.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (ok) return;
    ++failed_;
    if (failed_ <= 3) notes_ << (failed_ > 1 ? "; " : "") << what;
  }
  void note(const std::string& s) { info_ << (info_.tellp() > 0 ? ", " : "") << s; }
  Outcome outcome() const {
    Outcome o;
    o.pass = failed_ == 0;
    o.detail = info_.str();
    if (failed_) o.detail += (o.detail.empty() ? "" : " | ") + std::to_string(failed_) + " failed: " + notes_.str();
    return o;
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::ostringstream notes_, info_;
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

using Images = std::vector<std::shared_ptr<const vision::ImageGrid>>;

Document random_document(Rng& rng) {
  std::uniform_int_distribution<int> n_seg(1, 10), kind(0, 2), len(0, 8), byte(' ', '~');
  Document doc;
  const std::size_t n_images = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
  for (std::size_t i = 0; i < n_images; ++i) doc.images.push_back(vlm::testing::random_image(2, 2, rng));
  const int segments = n_seg(rng);
  for (int s = 0; s < segments; ++s) {
    switch (kind(rng)) {
      case 0: doc.segments.push_back(ImageSegment{std::uniform_int_distribution<std::size_t>(0, n_images - 1)(rng)}); break;
      case 1: {
        std::string t(static_cast<std::size_t>(len(rng)), ' ');
        for (char& c : t) c = static_cast<char>(byte(rng));
        doc.segments.push_back(TextSegment{t, {}});
        break;
      }
      default: doc.segments.push_back(SpecialSegment{lm::tokens::kEndOfUtterance, true}); break;
    }
  }
  return doc;
}

Document text_document(std::size_t n_bytes, std::size_t n_images, Rng& rng) {
  Document doc;
  for (std::size_t i = 0; i < n_images; ++i) {
    doc.images.push_back(vlm::testing::random_image(2, 2, rng));
    doc.segments.push_back(ImageSegment{i});
  }
  doc.segments.push_back(TextSegment{std::string(n_bytes, 'x'), {{0, n_bytes}}});
  return doc;
}

std::vector<Tensor> logits_for(const VLMModel& model, const std::vector<Document>& docs) {
  NoGradGuard guard;
  std::vector<Tensor> out;
  for (const auto& d : docs) out.push_back(model.forward(model.build(d), d.images));
  return out;
}

// 1. Token-budget accounting.
Outcome token_budget() {
  Checks c;
  VLMConfig cfg;
  cfg.connector.n_latents = 64;
  VLMModel model(cfg, 0);
  Rng rng(1);
  const auto image = vlm::testing::random_image(378, 378, rng);
  c.expect(model.tokens_per_image(*image) == 64, "one image != 64 tokens");

  Document doc;
  doc.images.push_back(image);
  doc.segments = {ImageSegment{0}, TextSegment{"hi", {{0, 2}}}};
  const Document split = pipeline::split_document_images(doc, pipeline::SplitConfig{true, 1.0}, rng);
  const auto seq = model.build(split);
  const auto placeholders = std::count(seq.token_ids.begin(), seq.token_ids.end(), lm::tokens::kImage);
  c.expect(placeholders == 320, "split image gave " + std::to_string(placeholders) + " tokens");

  const Tensor states = model.encode_image(*image);
  c.expect(states.dim(0) == 729, "27x27 grid gave " + std::to_string(states.dim(0)) + " states");
  c.expect(model.connector.project(states).dim(0) == 64, "connector output != 64");
  c.note("1 image=" + std::to_string(model.tokens_per_image(*image)) + ", split=" + std::to_string(placeholders) +
         ", states=" + std::to_string(states.dim(0)));
  return c.outcome();
}

// 2. End-to-end finite-difference gradients on the toy model.
Outcome gradient_check() {
  Checks c;
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    VLMModel model(vlm::testing::toy_config(arch), 2);
    Rng rng(2);
    adapters::AdapterSpec spec;
    spec.rank = 2;
    adapters::apply_named_policy(model, "lora", spec, rng);
    adapters::apply_policy(model, adapters::FreezePolicy::full());
    {
      NoGradGuard guard;
      std::normal_distribution<double> n(0.0, 0.3);
      for (Linear* l : model.linears())
        if (l->adapter)
          for (double& v : l->adapter->up.value.mutable_data()) v = n(rng);
      for (auto& x : model.lm.cross)
        if (x) x->gate.value.mutable_data()[0] = 0.5;
    }
    const Document doc = vlm::testing::toy_document(rng);
    const auto seq = model.build(doc);
    std::vector<vlm::testing::NamedLeaf> leaves;
    for (Parameter* p : model.parameters()) leaves.push_back({p->name, p->value});
    const auto report = vlm::testing::check_gradients([&] { return model.loss(seq, doc.images); }, leaves, 1e-4, 1e-3);

    std::size_t strict = 0, strict_pass = 0;
    for (const auto& e : report.entries) {
      const std::string comp = component_of(e.tensor);
      if (comp != "connector" && comp != "adapters") continue;
      ++strict;
      strict_pass += e.passed;
    }
    const std::string name(to_string(arch));
    c.expect(report.pass_rate() >= 0.99, name + " significant pass rate " + num(report.pass_rate()));
    c.expect(strict_pass == strict, name + " connector/adapter " + std::to_string(strict_pass) + "/" +
                                        std::to_string(strict));
    c.expect(report.significant() > 0, name + " no significant entries");
    c.note(name + " " + std::to_string(report.passed_significant()) + "/" + std::to_string(report.significant()) +
           " significant, connector+adapters " + std::to_string(strict_pass) + "/" + std::to_string(strict));
  }
  return c.outcome();
}

// 3. Adapter identity at attach, merge fidelity and merged FLOPs.
Outcome adapter_merge() {
  Checks c;
  double worst_merge = 0.0;
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    for (auto kind : {AdapterKind::kLora, AdapterKind::kDora}) {
      const std::string tag = std::string(to_string(arch)) + "/" + std::string(adapters::to_string(kind));
      VLMModel model(vlm::testing::toy_config(arch), 3);
      Rng rng(3);
      std::vector<Document> inputs;
      for (int i = 0; i < 16; ++i) {
        Document d = vlm::testing::toy_document(rng);
        inputs.push_back(std::move(d));
      }
      const auto base = logits_for(model, inputs);
      const double base_flops = estimate_flops(model, 12, 2);

      adapters::AdapterSpec spec;
      spec.rank = 2;
      adapters::apply_named_policy(model, std::string(adapters::to_string(kind)), spec, rng);
      const auto fresh = logits_for(model, inputs);
      bool identical = true;
      for (std::size_t i = 0; i < inputs.size(); ++i) identical = identical && vlm::testing::bit_identical(base[i], fresh[i]);
      c.expect(identical, tag + " fresh adapter not bit-identical");

      harness::TrainConfig tc;
      harness::AdamW opt(model.parameters(), tc);
      const Document train_doc = vlm::testing::toy_document(rng);
      const auto train_seq = model.build(train_doc);
      for (int step = 0; step < 5; ++step) {
        backward(model.loss(train_seq, train_doc.images));
        opt.step(1e-2);
      }
      const auto adapted = logits_for(model, inputs);
      double moved = 0.0;
      for (std::size_t i = 0; i < inputs.size(); ++i) moved = std::max(moved, vlm::testing::max_abs_diff(base[i], adapted[i]));
      c.expect(moved > 1e-6, tag + " adapters did not train");

      adapters::merge(model);
      const auto merged = logits_for(model, inputs);
      double worst = 0.0;
      for (std::size_t i = 0; i < inputs.size(); ++i) worst = std::max(worst, vlm::testing::max_abs_diff(adapted[i], merged[i]));
      worst_merge = std::max(worst_merge, worst);
      c.expect(worst < 1e-10, tag + " merge diff " + num(worst));
      c.expect(estimate_flops(model, 12, 2) == base_flops, tag + " merged FLOPs differ");
      c.expect(adapters::count_adapters(model) == 0, tag + " adapters remain");
    }
  }
  c.note("max merge diff " + num(worst_merge, 3) + " over 16 inputs x 4 setups");
  return c.outcome();
}

// 4. Zero-gate cross-attention identity.
Outcome zero_gate() {
  Checks c;
  VLMConfig big;
  big.lm.n_layers = 4;
  big.lm.cross_attn_every = 2;
  for (const VLMConfig& base : {vlm::testing::toy_config(Architecture::kCrossAttention), big}) {
    VLMConfig cross_cfg = base;
    cross_cfg.architecture = Architecture::kCrossAttention;
    cross_cfg.lm.max_seq = std::max<std::size_t>(cross_cfg.lm.max_seq, 64);
    VLMConfig plain_cfg = base;
    plain_cfg.architecture = Architecture::kFullyAutoregressive;
    plain_cfg.lm.max_seq = cross_cfg.lm.max_seq;
    VLMModel cross(cross_cfg, 4), plain(plain_cfg, 4);
    for (const std::string text : {"a", "what colour is the square?", "zzzz zzzz"}) {
      Document doc;
      doc.segments = {TextSegment{text, {{0, text.size()}}}};
      const auto seq = cross.build(doc);
      const Tensor reference = plain.lm.forward_ids(seq.token_ids);
      c.expect(vlm::testing::bit_identical(cross.forward(seq, {}), reference), "cross != plain for '" + text + "'");
      c.expect(vlm::testing::bit_identical(plain.forward(seq, {}), reference), "plain forward != LM for '" + text + "'");
    }
  }
  c.note("2 configs x 3 prompts bit-identical");
  return c.outcome();
}

// 5. Causality and loss masking.
Outcome causality() {
  Checks c;
  std::size_t compared = 0;
  for (auto arch : {Architecture::kFullyAutoregressive, Architecture::kCrossAttention}) {
    VLMModel model(vlm::testing::toy_config(arch), 5);
    for (auto& x : model.lm.cross)
      if (x) x->gate.value.mutable_data()[0] = 0.9;
    Rng rng(5);
    const Document doc = vlm::testing::toy_document(rng);
    const auto seq = model.build(doc);
    const Tensor base = model.forward(seq, doc.images);
    const std::size_t v = base.dim(1);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      if (seq.token_ids[t] == lm::tokens::kImage) continue;
      auto changed = seq;
      changed.token_ids[t] = (changed.token_ids[t] + 37) % 256;
      const Tensor out = model.forward(changed, doc.images);
      bool same_past = true;
      for (std::size_t i = 0; i < t * v; ++i) same_past = same_past && out.at(i) == base.at(i);
      c.expect(same_past, std::string(to_string(arch)) + " position " + std::to_string(t) + " leaks backwards");
      ++compared;
    }
    // Changing the image only affects positions from its placeholder onward.
    Document other = doc;
    other.images[0] = vlm::testing::random_image(4, 4, rng);
    const Tensor out = model.forward(seq, other.images);
    const std::size_t start = seq.visual_spans[0].start;
    bool same_before = true;
    for (std::size_t i = 0; i < start * v; ++i) same_before = same_before && out.at(i) == base.at(i);
    c.expect(same_before, std::string(to_string(arch)) + " image visible before its placeholder");

    const Tensor logits = Tensor::randn({seq.size(), v}, 2.0, rng);
    const double loss = next_token_loss(logits, seq).item();
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq.loss_mask[t]) continue;
      auto changed = seq;
      changed.token_ids[t] = (changed.token_ids[t] + 11) % 256;
      c.expect(next_token_loss(logits, changed).item() == loss, "loss moved with masked target " + std::to_string(t));
    }
  }
  c.note(std::to_string(compared) + " future perturbations, exact");
  return c.outcome();
}

// 6. Aspect-ratio patching and positional interpolation.
Outcome aspect_patching() {
  Checks c;
  const vision::VisionConfig cfg;
  Rng rng(6);
  std::uniform_int_distribution<std::size_t> side(1, 2000);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = side(rng), w = side(rng);
    const auto [rows, cols] = vision::patch_grid(h, w, cfg, vision::PatchMode::kAspectPreserving);
    const std::string shape = std::to_string(h) + "x" + std::to_string(w);
    c.expect(rows >= 1 && cols >= 1, shape + " empty grid");
    c.expect(rows * cfg.patch_size <= cfg.max_side && cols * cfg.patch_size <= cfg.max_side, shape + " over cap");
    const std::size_t long_p = std::max(rows, cols), short_p = std::min(rows, cols);
    const double ratio = static_cast<double>(std::min(h, w)) / static_cast<double>(std::max(h, w));
    c.expect(std::abs(static_cast<double>(short_p) - static_cast<double>(long_p) * ratio) <= 1.0,
             shape + " -> " + std::to_string(rows) + "x" + std::to_string(cols) + " off aspect by more than a patch");
    c.expect((h >= w) == (rows >= cols) || rows == cols, shape + " orientation flipped");
  }
  // Resampled image sides are whole patches.
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = vlm::testing::random_image(side(rng) % 500 + 1, side(rng) % 500 + 1, rng);
    const auto seq = vision::patchify(*img, cfg, vision::PatchMode::kAspectPreserving);
    c.expect(seq.n_patches() == seq.rows * seq.cols, "patch count != rows*cols");
    c.expect(seq.patches.dim(1) == cfg.patch_dim(), "patch width");
  }
  double worst = 0.0;
  for (std::size_t n : {2u, 5u, 27u}) {
    const vision::PosEmbedTable src{n, n, Tensor::randn({n * n, 8}, 1.0, rng)};
    for (std::size_t factor : {2u, 3u, 4u}) {
      const std::size_t m = (n - 1) * factor + 1;
      const auto dst = vision::interpolate_pos_embed(src, m, m);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t col = 0; col < n; ++col)
          for (std::size_t ch = 0; ch < 8; ++ch)
            worst = std::max(worst, std::abs(dst.table.at(((r * factor) * m + col * factor) * 8 + ch) -
                                             src.table.at((r * n + col) * 8 + ch)));
    }
  }
  c.expect(worst <= 1e-12, "grid-aligned interpolation off by " + num(worst));
  c.note("1000 shapes, interpolation max err " + num(worst, 3));
  return c.outcome();
}

// 7. Mixture proportions, per-source caps and packing round trip.
Outcome mixture_packing() {
  Checks c;
  Rng rng(7);
  {
    const auto spec = pipeline::MixtureSpec::stage1();
    pipeline::Corpora corpora;
    for (const auto& s : spec.sources) corpora[s.name] = {text_document(2, 0, rng)};
    const auto ex = pipeline::sample_mixture(spec, corpora, rng, 100000, Architecture::kFullyAutoregressive, 64);
    const auto stats = pipeline::mixture_stats(spec, ex);
    const double p = static_cast<double>(stats.at("interleaved").examples) / 100000.0;
    c.expect(std::abs(p - 0.70) <= 0.01, "stage-1 proportion " + num(p));
    c.note("stage-1 interleaved share " + num(p));
  }
  {
    const auto spec = pipeline::MixtureSpec::stage2();
    pipeline::Corpora corpora;
    std::uniform_int_distribution<std::size_t> len(1, 3000), imgs(0, 4);
    for (const auto& s : spec.sources)
      for (int i = 0; i < 30; ++i) corpora[s.name].push_back(text_document(len(rng), imgs(rng), rng));
    const auto ex = pipeline::sample_mixture(spec, corpora, rng, 5000, Architecture::kFullyAutoregressive, 64);
    std::size_t violations = 0, truncated = 0;
    for (const auto& e : ex) {
      violations += e.sequence.size() > spec.sources[e.source].max_seq_len;
      truncated += e.truncated;
    }
    const bool caps = spec.sources[0].max_seq_len == 2048 && spec.sources[1].max_seq_len == 1536 &&
                      spec.sources[2].max_seq_len == 1024;
    c.expect(caps, "stage-2 caps are not 2048/1536/1024");
    c.expect(violations == 0, std::to_string(violations) + " cap violations");
    c.note("stage-2 violations " + std::to_string(violations) + " (" + std::to_string(truncated) + " truncated)");
  }
  std::size_t docs_checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Document> docs;
    std::uniform_int_distribution<std::size_t> len(1, 60), imgs(0, 3);
    for (int i = 0; i < 40; ++i) docs.push_back(text_document(len(rng), imgs(rng), rng));
    const std::size_t max_len = 96, tpi = 8;
    const auto batch = pipeline::pack(docs, max_len, tpi);
    c.expect(batch.stats.content_tokens + batch.stats.padding_tokens == batch.sequences.size() * max_len,
             "token accounting");
    for (const auto& packed : batch.sequences) {
      for (const auto& pl : packed.documents) {
        auto expected = build_sequence(docs[pl.document], Architecture::kFullyAutoregressive, tpi);
        pipeline::truncate_sequence(expected, max_len);
        const auto got = pipeline::unpack_document(packed, pl);
        bool same = got.token_ids == expected.token_ids && got.loss_mask == expected.loss_mask &&
                    got.visual_spans.size() == expected.visual_spans.size();
        for (std::size_t k = 0; same && k < got.visual_spans.size(); ++k) {
          same = got.visual_spans[k].start == expected.visual_spans[k].start &&
                 got.visual_spans[k].length == expected.visual_spans[k].length &&
                 batch.images[pl.image_offset + got.visual_spans[k].image_index] ==
                     docs[pl.document].images[expected.visual_spans[k].image_index];
        }
        c.expect(same, "document " + std::to_string(pl.document) + " did not round-trip");
        ++docs_checked;
      }
    }
  }
  c.note(std::to_string(docs_checked) + " packed documents round-tripped");
  return c.outcome();
}

// 8. Sequence-length identity between the two architectures.
Outcome sequence_length() {
  Checks c;
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const Document doc = random_document(rng);
    const std::size_t tpi = std::uniform_int_distribution<std::size_t>(1, 128)(rng);
    const auto fa = build_sequence(doc, Architecture::kFullyAutoregressive, tpi);
    const auto ca = build_sequence(doc, Architecture::kCrossAttention, tpi);
    c.expect(ca.size() + (tpi - 1) * doc.n_image_refs() == fa.size(), "identity broken on trial " + std::to_string(trial));
  }
  c.note("1000 documents");
  return c.outcome();
}

// 9. Memorization convergence and the frozen-backbone comparison.
Outcome convergence() {
  Checks c;
  const auto cfg = harness::load_run_config(fs::path(VLM_CONFIG_DIR) / "memorize_fa_lora.json");
  c.expect(cfg.model.architecture == Architecture::kFullyAutoregressive && cfg.policy == "lora" &&
               cfg.train.steps == 200 && cfg.train.lr == 1e-4 && cfg.data.n_examples == 32,
           "bundled config does not describe the 32-example, 200-step, lr 1e-4 LoRA run");
  const auto lora = harness::train(cfg).report;
  const double floor = std::log(260.0) * 0.9;
  c.expect(lora.initial_loss >= floor, "initial loss " + num(lora.initial_loss) + " below 0.9 ln(vocab)");
  c.expect(lora.final_loss <= 0.2, "final loss " + num(lora.final_loss));
  c.expect(lora.accuracy >= 0.95, "accuracy " + num(lora.accuracy));

  auto frozen_cfg = cfg;
  frozen_cfg.policy = "frozen";
  const auto frozen = harness::train(frozen_cfg).report;
  c.expect(frozen.accuracy < lora.accuracy, "frozen accuracy " + num(frozen.accuracy) + " not below LoRA");
  c.note("lora loss " + num(lora.initial_loss) + "->" + num(lora.final_loss) + " acc " + num(lora.accuracy) +
         "; frozen loss " + num(frozen.final_loss) + " acc " + num(frozen.accuracy));
  return c.outcome();
}

// 10. Table-3 grid fidelity and reproducibility.
Outcome grid_fidelity() {
  Checks c;
  const auto grid = harness::load_grid(fs::path(VLM_CONFIG_DIR) / "table3_grid.json");
  const fs::path root = fs::temp_directory_path() / "vlm_acceptance_grid";
  std::vector<std::string> csv, md;
  for (int run = 0; run < 2; ++run) {
    const auto result = harness::run_grid(grid);
    c.expect(result.failures.empty(), std::to_string(result.failures.size()) + " cells failed");
    c.expect(result.reports.size() == 5, std::to_string(result.reports.size()) + " rows");
    std::set<std::tuple<std::string, std::string, std::string>> combos;
    for (const auto& r : result.reports) combos.emplace(r.arch, r.policy, r.arch == "cross_attention" ? "-" : r.connector);
    const std::set<std::tuple<std::string, std::string, std::string>> expected{
        {"cross_attention", "frozen", "-"},
        {"cross_attention", "lora", "-"},
        {"fully_autoregressive", "frozen", "mapping_network"},
        {"fully_autoregressive", "frozen", "perceiver"},
        {"fully_autoregressive", "lora", "perceiver"},
    };
    c.expect(combos == expected, "row combinations differ from the table");
    const fs::path dir = root / std::to_string(run);
    fs::remove_all(dir);
    harness::write_reports(dir, result);
    std::ifstream a(dir / "report.csv"), b(dir / "report.md");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    csv.push_back(sa.str());
    md.push_back(sb.str());
    if (run == 0) std::cout << md.back() << std::flush;
  }
  c.expect(csv[0] == csv[1], "report.csv differs between reruns");
  c.expect(md[0] == md[1], "report.md differs between reruns");
  c.note("5 rows, reruns byte-identical (" + std::to_string(csv[0].size()) + " CSV bytes)");
  fs::remove_all(root);
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"token-budget accounting", token_budget},
      {"gradient correctness", gradient_check},
      {"adapter identity and merge", adapter_merge},
      {"zero-gate cross-attention identity", zero_gate},
      {"causality and masking", causality},
      {"aspect-ratio patching", aspect_patching},
      {"mixture and packing", mixture_packing},
      {"sequence-length identity", sequence_length},
      {"training convergence", convergence},
      {"grid fidelity", grid_fidelity},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("%s criterion %d: %s (%.1fs) %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
