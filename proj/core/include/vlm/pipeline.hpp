#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vlm/fusion.hpp"
#include "vlm/image.hpp"

namespace vlm::pipeline {

struct SplitConfig {
  bool enabled = false;
  double apply_prob = 0.5;

  void validate() const;
};

/// With probability apply_prob (when enabled): [TL, TR, BL, BR, original], the
/// crops cut at floor(H/2), floor(W/2) and resized back to H x W. Otherwise
/// [original].
std::vector<vision::ImageGrid> split_image(const vision::ImageGrid& img, const SplitConfig& cfg, Rng& rng);

/// Replaces each image reference with its split expansion (5 references when
/// split, 1 otherwise). Registered images are rebuilt in reference order.
Document split_document_images(const Document& doc, const SplitConfig& cfg, Rng& rng);

/// Draws the target longer side uniformly from [max(longer, min_side), max_side]
/// and resizes preserving aspect. Never downscales.
vision::ImageGrid random_upscale(const vision::ImageGrid& img, std::size_t min_side, std::size_t max_side, Rng& rng);

/// Adds U[-1, 1] * alpha / sqrt(T * d) noise to rows whose text_rows flag is
/// set (all rows when text_rows is empty). The noise is a constant, so
/// gradients pass through unchanged.
Tensor neftune(const Tensor& embeddings, double alpha, Rng& rng, std::span<const std::uint8_t> text_rows = {});

/// Randomly permutes the question/answer turns of a document. A turn ends at
/// an answer-marked end_of_utterance special; segments before the first text
/// segment stay in front, and trailing segments after the last turn stay last.
Document shuffle_turns(const Document& doc, Rng& rng);

struct SourceSpec {
  std::string name;
  double proportion = 1.0;
  std::size_t max_seq_len = 2048;
  std::size_t max_image_side = 378;
};

struct MixtureSpec {
  std::vector<SourceSpec> sources;
  int stage_id = 1;

  /// Proportions in [0, 1] summing to 1 within 1e-9; names unique.
  void validate() const;
  static MixtureSpec stage1();
  static MixtureSpec stage2();
};

using Corpora = std::map<std::string, std::vector<Document>>;

/// Truncates to at most max_len tokens without cutting a visual span (a span
/// crossing the cut is dropped whole). Returns true when anything was removed.
bool truncate_sequence(MultimodalSequence& seq, std::size_t max_len);

struct SampledExample {
  std::size_t source = 0;        // index into spec.sources
  std::size_t document = 0;      // index into that source's corpus
  MultimodalSequence sequence;   // truncated to the source's max_seq_len
  bool truncated = false;
};

/// i.i.d. categorical source choice per example, then a uniform document pick
/// from that source. Each sequence is built with tokens_per_image placeholders
/// per image and truncated to its source cap. A selected source with an empty
/// or missing corpus is an exhaustion error.
std::vector<SampledExample> sample_mixture(const MixtureSpec& spec, const Corpora& corpora, Rng& rng, std::size_t n,
                                           Architecture arch, std::size_t tokens_per_image);

struct DocPlacement {
  std::size_t document = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t image_offset = 0;  // index of the document's first image in the pool
};

struct PackedSequence {
  MultimodalSequence sequence;  // exactly max_seq_len long, padded with pad tokens
  std::vector<DocPlacement> documents;
  std::string source_tag;
};

struct PackStats {
  std::size_t documents = 0;
  std::size_t sequences = 0;
  std::size_t truncated = 0;
  std::size_t content_tokens = 0;
  std::size_t padding_tokens = 0;

  double padding_fraction() const {
    const std::size_t total = content_tokens + padding_tokens;
    return total ? static_cast<double>(padding_tokens) / static_cast<double>(total) : 0.0;
  }
};

struct PackedBatch {
  std::vector<PackedSequence> sequences;
  std::vector<std::shared_ptr<const vision::ImageGrid>> images;  // pool; span image indices point here
  PackStats stats;
};

/// Greedy first-fit of whole documents into sequences of max_seq_len, with
/// visual-span expansion counted. Documents longer than max_seq_len on their
/// own are truncated and counted in stats.truncated.
PackedBatch pack(std::span<const Document> documents, std::size_t max_seq_len, std::size_t tokens_per_image,
                 Architecture arch = Architecture::kFullyAutoregressive, const std::string& source_tag = "");

/// Recovers the sequence of one packed document, with image indices relative
/// to the document again.
MultimodalSequence unpack_document(const PackedSequence& packed, const DocPlacement& placement);

struct SourceStats {
  std::size_t examples = 0;
  std::size_t truncated = 0;
  std::size_t tokens = 0;
};

/// Per-source counts from a sampled stream.
std::map<std::string, SourceStats> mixture_stats(const MixtureSpec& spec, std::span<const SampledExample> examples);

/// CSV with columns source,examples,truncated,tokens,padding_fraction.
void write_stats_csv(const std::filesystem::path& path, const std::map<std::string, SourceStats>& per_source,
                     const PackStats& packing);

// Corpus manifest: one JSON object per line,
//   {"source": "...", "entries": [{"image": "images/a.ppm"},
//                                 {"text": "...", "answer_spans": [[b, e]]},
//                                 {"special": "end_of_utterance", "answer": true}]}
// Image paths are relative to the manifest's directory.

struct CorpusRecord {
  std::string source;
  Document document;
  std::vector<std::string> image_paths;  // parallel to document.images
};

std::vector<CorpusRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const CorpusRecord> records);

struct SyntheticSpec {
  std::size_t n_documents = 32;
  std::size_t image_size = 28;
  std::string source = "synthetic";
  bool vary_size = false;  // random aspect ratios in [image_size/2, 2*image_size]
};

/// Procedural corpus: each image is a solid background colour with a digit
/// drawn in a contrasting colour; each document asks for the background
/// colour and answers with its name followed by end_of_utterance.
std::vector<CorpusRecord> generate_synthetic(const SyntheticSpec& spec, Rng& rng);

/// Writes records (and their images under dir/images) plus dir/manifest.jsonl.
void write_corpus(const std::filesystem::path& dir, std::span<const CorpusRecord> records);

std::vector<std::string> colour_names();

}  // namespace vlm::pipeline
