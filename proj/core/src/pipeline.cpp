#include "vlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "vlm/error.hpp"

namespace vlm::pipeline {

using vision::ImageGrid;

void SplitConfig::validate() const {
  if (!(apply_prob >= 0.0 && apply_prob <= 1.0)) throw Error(ErrorCode::kConfig, "split apply_prob must lie in [0, 1]");
}

std::vector<ImageGrid> split_image(const ImageGrid& img, const SplitConfig& cfg, Rng& rng) {
  cfg.validate();
  vision::validate(img);
  if (img.height < 2 || img.width < 2) throw Error(ErrorCode::kInput, "image splitting needs at least 2x2 pixels");
  if (!cfg.enabled) return {img};
  std::bernoulli_distribution coin(cfg.apply_prob);
  if (!coin(rng)) return {img};
  const std::size_t h = img.height, w = img.width, h2 = h / 2, w2 = w / 2;
  std::vector<ImageGrid> out;
  out.reserve(5);
  out.push_back(vision::resize_bilinear(vision::crop(img, 0, 0, h2, w2), h, w));
  out.push_back(vision::resize_bilinear(vision::crop(img, 0, w2, h2, w - w2), h, w));
  out.push_back(vision::resize_bilinear(vision::crop(img, h2, 0, h - h2, w2), h, w));
  out.push_back(vision::resize_bilinear(vision::crop(img, h2, w2, h - h2, w - w2), h, w));
  out.push_back(img);
  return out;
}

Document split_document_images(const Document& doc, const SplitConfig& cfg, Rng& rng) {
  Document out;
  for (const auto& segment : doc.segments) {
    const auto* image = std::get_if<ImageSegment>(&segment);
    if (!image) {
      out.segments.push_back(segment);
      continue;
    }
    if (image->image_index >= doc.images.size() || !doc.images[image->image_index]) {
      throw Error(ErrorCode::kDanglingRef, "image reference " + std::to_string(image->image_index) + " is unregistered");
    }
    for (auto& part : split_image(*doc.images[image->image_index], cfg, rng)) {
      out.segments.push_back(ImageSegment{out.images.size()});
      out.images.push_back(std::make_shared<const ImageGrid>(std::move(part)));
    }
  }
  return out;
}

ImageGrid random_upscale(const ImageGrid& img, std::size_t min_side, std::size_t max_side, Rng& rng) {
  vision::validate(img);
  if (min_side > max_side) throw Error(ErrorCode::kConfig, "random_upscale needs min_side <= max_side");
  const std::size_t longer = std::max(img.height, img.width);
  const std::size_t lo = std::max(longer, min_side);
  if (lo >= max_side) return img;
  const std::size_t target = std::uniform_int_distribution<std::size_t>(lo, max_side)(rng);
  if (target == longer) return img;
  const double factor = static_cast<double>(target) / static_cast<double>(longer);
  auto side = [&](std::size_t s) {
    if (s == longer) return target;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(s) * factor)));
  };
  return vision::resize_bilinear(img, side(img.height), side(img.width));
}

Tensor neftune(const Tensor& embeddings, double alpha, Rng& rng, std::span<const std::uint8_t> text_rows) {
  if (alpha < 0.0) throw Error(ErrorCode::kConfig, "NEFTune alpha must be non-negative");
  if (embeddings.rank() != 2) throw Error(ErrorCode::kShape, "NEFTune expects [T, d] embeddings");
  const std::size_t t = embeddings.dim(0), d = embeddings.dim(1);
  if (!text_rows.empty() && text_rows.size() != t) {
    throw Error(ErrorCode::kShape, "text row mask of length " + std::to_string(text_rows.size()) + " for " +
                                       std::to_string(t) + " rows");
  }
  if (alpha == 0.0) return embeddings;
  const double bound = alpha / std::sqrt(static_cast<double>(t * d));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> noise(t * d, 0.0);
  for (std::size_t r = 0; r < t; ++r) {
    if (!text_rows.empty() && !text_rows[r]) continue;
    for (std::size_t c = 0; c < d; ++c) noise[r * d + c] = u(rng) * bound;
  }
  return add(embeddings, Tensor::from({t, d}, std::move(noise)));
}

Document shuffle_turns(const Document& doc, Rng& rng) {
  std::size_t first_text = doc.segments.size();
  for (std::size_t i = 0; i < doc.segments.size(); ++i) {
    if (std::holds_alternative<TextSegment>(doc.segments[i])) {
      first_text = i;
      break;
    }
  }
  std::vector<std::vector<Segment>> turns;
  std::vector<Segment> current;
  for (std::size_t i = first_text; i < doc.segments.size(); ++i) {
    current.push_back(doc.segments[i]);
    const auto* special = std::get_if<SpecialSegment>(&doc.segments[i]);
    if (special && special->answer && special->token == lm::tokens::kEndOfUtterance) {
      turns.push_back(std::move(current));
      current.clear();
    }
  }
  std::shuffle(turns.begin(), turns.end(), rng);
  Document out;
  out.images = doc.images;
  out.segments.assign(doc.segments.begin(), doc.segments.begin() + static_cast<std::ptrdiff_t>(first_text));
  for (auto& turn : turns) out.segments.insert(out.segments.end(), turn.begin(), turn.end());
  out.segments.insert(out.segments.end(), current.begin(), current.end());
  return out;
}

void MixtureSpec::validate() const {
  if (sources.empty()) throw Error(ErrorCode::kConfig, "mixture has no sources");
  double total = 0.0;
  std::set<std::string> names;
  for (const auto& s : sources) {
    if (!(s.proportion >= 0.0 && s.proportion <= 1.0)) {
      throw Error(ErrorCode::kConfig, "source '" + s.name + "' proportion outside [0, 1]");
    }
    if (s.max_seq_len == 0) throw Error(ErrorCode::kConfig, "source '" + s.name + "' has zero max_seq_len");
    if (!names.insert(s.name).second) throw Error(ErrorCode::kConfig, "duplicate source '" + s.name + "'");
    total += s.proportion;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw Error(ErrorCode::kConfig, "mixture proportions sum to " + std::to_string(total));
  }
}

MixtureSpec MixtureSpec::stage1() {
  return {{{"interleaved", 0.70, 2048, 378}, {"image_text_pairs", 0.30, 2048, 378}}, 1};
}

MixtureSpec MixtureSpec::stage2() {
  return {{{"interleaved", 0.45, 2048, 980}, {"image_text_pairs", 0.35, 1536, 980}, {"pdf", 0.20, 1024, 980}}, 2};
}

bool truncate_sequence(MultimodalSequence& seq, std::size_t max_len) {
  if (seq.size() <= max_len) return false;
  std::size_t cut = max_len;
  for (const auto& span : seq.visual_spans) {
    if (span.start < cut && span.start + span.length > cut) cut = span.start;
  }
  seq.token_ids.resize(cut);
  seq.attn_mask.resize(cut);
  seq.loss_mask.resize(cut);
  std::erase_if(seq.visual_spans, [cut](const VisualSpan& s) { return s.start + s.length > cut; });
  return true;
}

std::vector<SampledExample> sample_mixture(const MixtureSpec& spec, const Corpora& corpora, Rng& rng, std::size_t n,
                                           Architecture arch, std::size_t tokens_per_image) {
  spec.validate();
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const auto& s : spec.sources) cumulative.push_back(acc += s.proportion);
  std::uniform_real_distribution<double> u(0.0, acc);

  std::vector<SampledExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = u(rng);
    std::size_t src = 0;
    while (src + 1 < cumulative.size() && (x >= cumulative[src] || spec.sources[src].proportion == 0.0)) ++src;
    const auto& source = spec.sources[src];
    const auto it = corpora.find(source.name);
    if (it == corpora.end() || it->second.empty()) {
      throw Error(ErrorCode::kExhaustion, "source '" + source.name + "' has no documents");
    }
    const std::size_t doc = std::uniform_int_distribution<std::size_t>(0, it->second.size() - 1)(rng);
    SampledExample ex{src, doc, build_sequence(it->second[doc], arch, tokens_per_image), false};
    ex.truncated = truncate_sequence(ex.sequence, source.max_seq_len);
    out.push_back(std::move(ex));
  }
  return out;
}

PackedBatch pack(std::span<const Document> documents, std::size_t max_seq_len, std::size_t tokens_per_image,
                 Architecture arch, const std::string& source_tag) {
  if (max_seq_len == 0) throw Error(ErrorCode::kConfig, "max_seq_len must be positive");
  PackedBatch batch;
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    MultimodalSequence seq = build_sequence(documents[i], arch, tokens_per_image);
    if (truncate_sequence(seq, max_seq_len)) ++batch.stats.truncated;
    if (seq.size() == 0) continue;
    ++batch.stats.documents;

    std::size_t bin = 0;
    while (bin < used.size() && used[bin] + seq.size() > max_seq_len) ++bin;
    if (bin == used.size()) {
      used.push_back(0);
      batch.sequences.push_back({});
      batch.sequences.back().source_tag = source_tag;
    }
    auto& packed = batch.sequences[bin];
    const std::size_t offset = used[bin];
    const std::size_t image_offset = batch.images.size();
    batch.images.insert(batch.images.end(), documents[i].images.begin(), documents[i].images.end());
    auto& dst = packed.sequence;
    dst.token_ids.insert(dst.token_ids.end(), seq.token_ids.begin(), seq.token_ids.end());
    dst.attn_mask.insert(dst.attn_mask.end(), seq.attn_mask.begin(), seq.attn_mask.end());
    dst.loss_mask.insert(dst.loss_mask.end(), seq.loss_mask.begin(), seq.loss_mask.end());
    for (auto span : seq.visual_spans) {
      span.start += offset;
      span.image_index += image_offset;
      dst.visual_spans.push_back(span);
    }
    packed.documents.push_back({i, offset, seq.size(), image_offset});
    used[bin] += seq.size();
    batch.stats.content_tokens += seq.size();
  }
  for (auto& packed : batch.sequences) {
    auto& s = packed.sequence;
    const std::size_t pad = max_seq_len - s.size();
    s.token_ids.resize(max_seq_len, lm::tokens::kPad);
    s.attn_mask.resize(max_seq_len, 0);
    s.loss_mask.resize(max_seq_len, 0);
    batch.stats.padding_tokens += pad;
  }
  batch.stats.sequences = batch.sequences.size();
  return batch;
}

MultimodalSequence unpack_document(const PackedSequence& packed, const DocPlacement& placement) {
  const auto& s = packed.sequence;
  if (placement.offset + placement.length > s.size()) throw Error(ErrorCode::kShape, "placement outside the sequence");
  const auto b = static_cast<std::ptrdiff_t>(placement.offset);
  const auto e = static_cast<std::ptrdiff_t>(placement.offset + placement.length);
  MultimodalSequence out;
  out.token_ids.assign(s.token_ids.begin() + b, s.token_ids.begin() + e);
  out.attn_mask.assign(s.attn_mask.begin() + b, s.attn_mask.begin() + e);
  out.loss_mask.assign(s.loss_mask.begin() + b, s.loss_mask.begin() + e);
  for (auto span : s.visual_spans) {
    if (span.start < placement.offset || span.start >= placement.offset + placement.length) continue;
    span.start -= placement.offset;
    span.image_index -= placement.image_offset;
    out.visual_spans.push_back(span);
  }
  return out;
}

std::map<std::string, SourceStats> mixture_stats(const MixtureSpec& spec, std::span<const SampledExample> examples) {
  std::map<std::string, SourceStats> out;
  for (const auto& s : spec.sources) out[s.name];
  for (const auto& ex : examples) {
    auto& st = out[spec.sources.at(ex.source).name];
    ++st.examples;
    st.truncated += ex.truncated;
    st.tokens += ex.sequence.size();
  }
  return out;
}

void write_stats_csv(const std::filesystem::path& path, const std::map<std::string, SourceStats>& per_source,
                     const PackStats& packing) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "source,examples,truncated,tokens,padding_fraction\n";
  for (const auto& [name, st] : per_source) {
    out << name << ',' << st.examples << ',' << st.truncated << ',' << st.tokens << ",\n";
  }
  out << "packed," << packing.documents << ',' << packing.truncated << ',' << packing.content_tokens << ','
      << packing.padding_fraction() << '\n';
}

namespace {

using nlohmann::json;

json entries_of(const CorpusRecord& rec) {
  json entries = json::array();
  for (const auto& segment : rec.document.segments) {
    if (const auto* text = std::get_if<TextSegment>(&segment)) {
      json e{{"text", text->text}};
      if (!text->answer_spans.empty()) {
        json spans = json::array();
        for (const auto& [b, en] : text->answer_spans) spans.push_back({b, en});
        e["answer_spans"] = spans;
      }
      entries.push_back(e);
    } else if (const auto* image = std::get_if<ImageSegment>(&segment)) {
      if (image->image_index >= rec.image_paths.size()) {
        throw Error(ErrorCode::kDanglingRef, "record image " + std::to_string(image->image_index) + " has no path");
      }
      entries.push_back(json{{"image", rec.image_paths[image->image_index]}});
    } else {
      const auto& special = std::get<SpecialSegment>(segment);
      json e{{"special", std::string(lm::special_name(special.token))}};
      if (special.answer) e["answer"] = true;
      entries.push_back(e);
    }
  }
  return entries;
}

}  // namespace

std::vector<CorpusRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<CorpusRecord> records;
  std::map<std::string, std::shared_ptr<const ImageGrid>> cache;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInput, where + ": " + e.what());
    }
    CorpusRecord rec;
    rec.source = j.value("source", "default");
    if (!j.contains("entries") || !j["entries"].is_array()) throw Error(ErrorCode::kInput, where + ": missing entries");
    for (const auto& e : j["entries"]) {
      if (e.contains("text")) {
        TextSegment t{e["text"].get<std::string>(), {}};
        if (e.contains("answer_spans")) {
          for (const auto& s : e["answer_spans"]) t.answer_spans.emplace_back(s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>());
        }
        rec.document.segments.emplace_back(std::move(t));
      } else if (e.contains("image")) {
        const auto rel = e["image"].get<std::string>();
        auto& img = cache[rel];
        if (!img) img = std::make_shared<const ImageGrid>(vision::read_ppm(base / rel));
        rec.document.segments.emplace_back(ImageSegment{rec.document.images.size()});
        rec.document.images.push_back(img);
        rec.image_paths.push_back(rel);
      } else if (e.contains("special")) {
        const auto name = e["special"].get<std::string>();
        const auto id = lm::special_from_name(name);
        if (!id) throw Error(ErrorCode::kInput, where + ": unknown special '" + name + "'");
        rec.document.segments.emplace_back(SpecialSegment{*id, e.value("answer", false)});
      } else {
        throw Error(ErrorCode::kInput, where + ": entry without text, image or special");
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, std::span<const CorpusRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& rec : records) out << json{{"source", rec.source}, {"entries", entries_of(rec)}}.dump() << '\n';
}

namespace {

struct Colour {
  const char* name;
  double r, g, b;
};

constexpr Colour kPalette[] = {
    {"red", 0.9, 0.1, 0.1},    {"green", 0.1, 0.8, 0.2},  {"blue", 0.1, 0.2, 0.9},   {"yellow", 0.95, 0.9, 0.1},
    {"cyan", 0.1, 0.85, 0.9},  {"purple", 0.6, 0.1, 0.8}, {"orange", 1.0, 0.55, 0.0}, {"gray", 0.5, 0.5, 0.5},
};

// 3x5 bitmaps, one row per string, '#' set.
constexpr const char* kDigits[10][5] = {
    {"###", "#.#", "#.#", "#.#", "###"}, {".#.", "##.", ".#.", ".#.", "###"}, {"###", "..#", "###", "#..", "###"},
    {"###", "..#", "###", "..#", "###"}, {"#.#", "#.#", "###", "..#", "..#"}, {"###", "#..", "###", "..#", "###"},
    {"###", "#..", "###", "#.#", "###"}, {"###", "..#", ".#.", ".#.", ".#."}, {"###", "#.#", "###", "#.#", "###"},
    {"###", "#.#", "###", "..#", "###"},
};

void draw_digit(ImageGrid& img, int digit, std::size_t top, std::size_t left, std::size_t cell, double v) {
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      if (kDigits[digit][r][c] != '#') continue;
      for (std::size_t y = 0; y < cell; ++y)
        for (std::size_t x = 0; x < cell; ++x) {
          const std::size_t py = top + r * cell + y, px = left + c * cell + x;
          if (py >= img.height || px >= img.width) continue;
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(py, px, ch) = v;
        }
    }
}

}  // namespace

std::vector<std::string> colour_names() {
  std::vector<std::string> out;
  for (const auto& c : kPalette) out.emplace_back(c.name);
  return out;
}

std::vector<CorpusRecord> generate_synthetic(const SyntheticSpec& spec, Rng& rng) {
  if (spec.image_size < 5) throw Error(ErrorCode::kConfig, "synthetic images need at least 5 pixels per side");
  constexpr std::size_t kColours = std::size(kPalette);
  std::vector<CorpusRecord> out;
  out.reserve(spec.n_documents);
  std::uniform_int_distribution<int> digit_dist(0, 9);
  std::uniform_int_distribution<std::size_t> side_dist(std::max<std::size_t>(5, spec.image_size / 2),
                                                       spec.image_size * 2);
  for (std::size_t i = 0; i < spec.n_documents; ++i) {
    const Colour& colour = kPalette[i % kColours];
    const int digit = digit_dist(rng);
    const std::size_t h = spec.vary_size ? side_dist(rng) : spec.image_size;
    const std::size_t w = spec.vary_size ? side_dist(rng) : spec.image_size;
    ImageGrid img = ImageGrid::filled(h, w, colour.r, colour.g, colour.b);
    const double luminance = 0.3 * colour.r + 0.6 * colour.g + 0.1 * colour.b;
    const std::size_t cell = std::max<std::size_t>(1, std::min(h / 5, w / 3) / 2);
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, h - std::min(h, 5 * cell))(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, w - std::min(w, 3 * cell))(rng);
    draw_digit(img, digit, top, left, cell, luminance > 0.5 ? 0.0 : 1.0);

    CorpusRecord rec;
    rec.source = spec.source;
    rec.document.images.push_back(std::make_shared<const ImageGrid>(std::move(img)));
    rec.image_paths.push_back("images/" + spec.source + "_" + std::to_string(i) + ".ppm");
    const std::string question = "colour? ";
    const std::string answer = colour.name;
    rec.document.segments.emplace_back(ImageSegment{0});
    rec.document.segments.emplace_back(
        TextSegment{question + answer, {{question.size(), question.size() + answer.size()}}});
    rec.document.segments.emplace_back(SpecialSegment{lm::tokens::kEndOfUtterance, true});
    out.push_back(std::move(rec));
  }
  return out;
}

void write_corpus(const std::filesystem::path& dir, std::span<const CorpusRecord> records) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + (dir / "images").string() + ": " + ec.message());
  for (const auto& rec : records) {
    for (std::size_t i = 0; i < rec.document.images.size(); ++i) {
      vision::write_ppm(dir / rec.image_paths.at(i), *rec.document.images[i]);
    }
  }
  write_manifest(dir / "manifest.jsonl", records);
}

}  // namespace vlm::pipeline
