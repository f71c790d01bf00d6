#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vlm/config.hpp"

namespace vlm::harness {

/// One training/evaluation example: a document, its built sequence and images.
struct Example {
  Document document;
  MultimodalSequence sequence;
};

/// The synthetic corpus load_documents would generate for cfg.
std::vector<pipeline::CorpusRecord> synthetic_corpus(const RunConfig& cfg);

/// Loads data.manifest or generates the synthetic corpus (seeded by cfg.seed),
/// applies image splitting when enabled, and builds sequences for model.
std::vector<Document> load_documents(const RunConfig& cfg);
std::vector<Example> build_examples(const VLMModel& model, const std::vector<Document>& docs);

/// Builds the model for cfg and applies its training policy.
std::unique_ptr<VLMModel> build_model(const RunConfig& cfg);

/// Decoupled-weight-decay Adam over trainable parameters.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, const TrainConfig& cfg);
  /// Applies one update with learning rate lr and clears the gradients.
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  TrainConfig cfg_;
  std::size_t t_ = 0;
};

/// Linear warmup over warmup_frac of the steps, then constant.
double learning_rate(const TrainConfig& cfg, std::size_t step);

/// Mean loss over examples, no noise, no graph.
double mean_loss(const VLMModel& model, const std::vector<Example>& examples);

struct RunReport {
  std::string config_id;
  std::string arch;
  std::string policy;
  std::string connector;
  std::size_t n_latents = 0;
  std::size_t depth = 0;
  bool pre_mlp = false;
  std::string patch_mode;
  bool split = false;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  double flops_fwd = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
  std::size_t visual_tokens_per_image = 0;
  double wall_time_s = 0.0;
  std::vector<double> loss_curve;  // mean loss before each update
};

struct TrainResult {
  std::unique_ptr<VLMModel> model;
  RunReport report;
};

/// Full-batch training. A non-finite loss is a divergence error naming the step.
TrainResult train(const RunConfig& cfg, const std::vector<Document>& docs);
TrainResult train(const RunConfig& cfg);

struct EvalExample {
  MultimodalSequence prompt;  // tokens before the first answer token
  std::vector<std::shared_ptr<const vision::ImageGrid>> images;
  std::vector<int> gold;  // answer tokens without the closing stop token
};

/// Splits a document at its first answer token. Documents without answers
/// are an input error.
EvalExample make_eval_example(const VLMModel& model, const Document& doc);

struct EvalMetrics {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::size_t overflow = 0;
  double accuracy = 0.0;
};

/// Produces the continuation for an example given a token budget.
using Generator = std::function<std::vector<int>(const EvalExample&, std::size_t max_new)>;

/// Exact match after whitespace normalization. Generation stops at
/// end_of_utterance or eos. Context overflow counts as a miss. An empty set
/// is an input error.
EvalMetrics evaluate(const std::vector<EvalExample>& examples, std::size_t max_seq, const Generator& generate);
EvalMetrics evaluate(const VLMModel& model, const std::vector<Document>& docs);

std::string normalize_whitespace(std::string_view s);

// Checkpoints: directory with config.json, manifest.txt, params/<name>.vlmf
// and adapters/<name>.vlmf.

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, VLMModel& model);

struct Checkpoint {
  RunConfig config;
  std::unique_ptr<VLMModel> model;
  std::string config_hash;
};

/// Any disagreement between manifest, config and tensor files is an integrity error.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Human-readable summary: parameter breakdown, FLOPs at reference lengths,
/// visual-token budgets and provenance.
std::string inspect(const Checkpoint& ckpt);

// Ablation grids.

struct GridAxis {
  std::string name;  // architecture, policy, connector, n_latents, depth, pre_mlp, patch_mode, split
  std::vector<nlohmann::json> values;
};

struct AblationGrid {
  RunConfig base;
  std::vector<GridAxis> axes;
  /// A combination is skipped when it matches every key of one entry.
  std::vector<std::map<std::string, nlohmann::json>> exclude;
  std::vector<std::uint64_t> seeds{0};
};

AblationGrid load_grid(const std::filesystem::path& path);
AblationGrid grid_from_json(const nlohmann::json& j);
/// Dotted config path an axis name controls.
std::string axis_path(const std::string& axis);

struct GridCell {
  std::map<std::string, nlohmann::json> values;
  RunConfig config;
};

/// Cartesian product in axis order, minus exclusions.
std::vector<GridCell> expand_grid(const AblationGrid& grid);

struct CellFailure {
  std::string config_id;
  std::uint64_t seed = 0;
  std::string error;
};

struct GridResult {
  std::vector<RunReport> reports;  // sorted by (config_id, seed)
  std::vector<CellFailure> failures;
  std::vector<std::map<std::string, nlohmann::json>> excluded;
  std::map<std::string, RunConfig> configs;  // resolved config per config id
};

GridResult run_grid(const AblationGrid& grid);

std::string report_csv(const std::vector<RunReport>& reports);
/// One row per config with mean accuracy / loss, and the range when a cell ran
/// with several seeds.
std::string report_markdown(const GridResult& result);
void write_reports(const std::filesystem::path& dir, const GridResult& result);

}  // namespace vlm::harness
