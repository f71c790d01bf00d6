#pragma once

// Small end-to-end models and documents shared by fusion and acceptance tests.

#include <memory>
#include <random>

#include "vlm/fusion.hpp"

namespace vlm::testing {

/// d=16, 2 LM layers, 4 latents, 4x4 images cut into 2x2 patches.
inline VLMConfig toy_config(Architecture arch) {
  VLMConfig c;
  c.architecture = arch;
  c.vision.patch_size = 2;
  c.vision.max_side = 4;
  c.vision.base_rows = 2;
  c.vision.base_cols = 2;
  c.vision.d_vision = 8;
  c.vision.n_layers = 1;
  c.vision.n_heads = 2;
  c.connector.kind = connector::ConnectorKind::kPerceiver;
  c.connector.n_latents = 4;
  c.connector.n_layers = 1;
  c.lm.d_model = 16;
  c.lm.n_layers = 2;
  c.lm.n_heads = 2;
  c.lm.max_seq = 16;
  c.lm.cross_attn_every = 1;
  return c;
}

inline std::shared_ptr<const vision::ImageGrid> random_image(std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  vision::ImageGrid img;
  img.height = h;
  img.width = w;
  img.pixels.resize(h * w * vision::ImageGrid::kChannels);
  for (double& p : img.pixels) p = u(rng);
  return std::make_shared<const vision::ImageGrid>(std::move(img));
}

/// [image] "q?" <end_of_utterance> "ab", with "ab" as the answer.
inline Document toy_document(Rng& rng) {
  Document doc;
  doc.images.push_back(random_image(4, 4, rng));
  doc.segments.push_back(ImageSegment{0});
  doc.segments.push_back(TextSegment{"q?", {}});
  doc.segments.push_back(SpecialSegment{lm::tokens::kEndOfUtterance, false});
  doc.segments.push_back(TextSegment{"ab", {{0, 2}}});
  return doc;
}

}  // namespace vlm::testing
