#include "vlm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "vlm/error.hpp"
#include "vlm/tensor_io.hpp"

namespace vlm::harness {

using nlohmann::json;

namespace {

Rng stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  Rng rng;
  rng.seed(seq);
  return rng;
}

constexpr std::uint32_t kDataStream = 100;
constexpr std::uint32_t kPolicyStream = 200;
constexpr std::uint32_t kTrainStream = 300;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<pipeline::CorpusRecord> synthetic_corpus(const RunConfig& cfg, Rng& rng) {
  pipeline::SyntheticSpec spec;
  spec.n_documents = cfg.data.n_examples;
  spec.image_size = cfg.data.image_size;
  spec.vary_size = cfg.data.vary_size;
  return pipeline::generate_synthetic(spec, rng);
}

std::vector<pipeline::CorpusRecord> synthetic_corpus(const RunConfig& cfg) {
  Rng rng = stream_rng(cfg.seed, kDataStream);
  return synthetic_corpus(cfg, rng);
}

std::vector<Document> load_documents(const RunConfig& cfg) {
  Rng rng = stream_rng(cfg.seed, kDataStream);
  std::vector<Document> docs;
  if (!cfg.data.manifest.empty()) {
    for (auto& rec : pipeline::read_manifest(cfg.data.manifest)) docs.push_back(std::move(rec.document));
  } else {
    for (auto& rec : synthetic_corpus(cfg, rng)) docs.push_back(std::move(rec.document));
  }
  if (docs.empty()) throw Error(ErrorCode::kInput, "corpus is empty");
  if (cfg.data.split.enabled) {
    for (auto& d : docs) d = pipeline::split_document_images(d, cfg.data.split, rng);
  }
  return docs;
}

std::vector<Example> build_examples(const VLMModel& model, const std::vector<Document>& docs) {
  std::vector<Example> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back({d, model.build(d)});
  return out;
}

std::unique_ptr<VLMModel> build_model(const RunConfig& cfg) {
  cfg.validate();
  auto model = std::make_unique<VLMModel>(cfg.model, cfg.seed);
  Rng rng = stream_rng(cfg.seed, kPolicyStream);
  adapters::apply_named_policy(*model, cfg.policy, cfg.adapter, rng);
  return model;
}

AdamW::AdamW(std::vector<Parameter*> params, const TrainConfig& cfg) : cfg_(cfg) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->value.numel(), 0.0);
    v_.emplace_back(p->value.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = params_[i]->value;
    if (!w.has_grad()) continue;
    const auto g = w.grad();
    auto data = w.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      data[k] -= lr * (update + cfg_.weight_decay * data[k]);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->value.zero_grad();
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_frac * static_cast<double>(cfg.steps)));
  if (warmup == 0 || step >= warmup) return cfg.lr;
  return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

double mean_loss(const VLMModel& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw Error(ErrorCode::kInput, "no examples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& ex : examples) total += model.loss(ex.sequence, ex.document.images).item();
  return total / static_cast<double>(examples.size());
}

TrainResult train(const RunConfig& cfg, const std::vector<Document>& docs) {
  const auto started = std::chrono::steady_clock::now();
  if (docs.empty()) throw Error(ErrorCode::kInput, "corpus is empty");
  TrainResult result;
  result.model = build_model(cfg);
  VLMModel& model = *result.model;
  const auto examples = build_examples(model, docs);

  AdamW opt(model.parameters(), cfg.train);
  Rng train_rng = stream_rng(cfg.seed, kTrainStream);
  const ForwardContext ctx{true, &train_rng};
  RunReport& r = result.report;
  r.initial_loss = mean_loss(model, examples);
  if (!std::isfinite(r.initial_loss)) throw Error(ErrorCode::kDivergence, "non-finite loss at step 0");

  const double inv_n = 1.0 / static_cast<double>(examples.size());
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    double total = 0.0;
    for (const auto& ex : examples) {
      Tensor l = model.loss(ex.sequence, ex.document.images, ctx);
      total += l.item();
      backward(scale(l, inv_n));
    }
    const double mean = total * inv_n;
    if (!std::isfinite(mean)) {
      throw Error(ErrorCode::kDivergence, "non-finite loss at step " + std::to_string(step));
    }
    r.loss_curve.push_back(mean);
    opt.step(learning_rate(cfg.train, step));
  }

  r.final_loss = cfg.train.steps == 0 ? r.initial_loss : mean_loss(model, examples);
  if (!std::isfinite(r.final_loss)) throw Error(ErrorCode::kDivergence, "non-finite loss after training");
  r.accuracy = evaluate(model, docs).accuracy;

  const auto& m = cfg.model;
  r.config_id = config_id(cfg);
  r.arch = std::string(to_string(m.architecture));
  r.policy = cfg.policy;
  r.connector = std::string(connector::to_string(m.connector.kind));
  r.n_latents = m.connector.n_latents;
  r.depth = m.connector.n_layers;
  r.pre_mlp = m.connector.use_pre_mlp;
  r.patch_mode = std::string(vision::to_string(m.patch_mode));
  r.split = cfg.data.split.enabled;
  const ParamCounts counts = count_params(model);
  r.trainable_params = counts.trainable;
  r.total_params = counts.total;
  const auto& first = examples.front().sequence;
  std::size_t visual = 0;
  for (const auto& s : first.visual_spans) visual += s.length;
  r.flops_fwd = estimate_flops(model, first.size() - visual, first.visual_spans.size());
  r.seed = cfg.seed;
  r.visual_tokens_per_image = model.reference_tokens_per_image();
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

TrainResult train(const RunConfig& cfg) { return train(cfg, load_documents(cfg)); }

EvalExample make_eval_example(const VLMModel& model, const Document& doc) {
  const MultimodalSequence seq = model.build(doc);
  const auto first = std::find(seq.loss_mask.begin(), seq.loss_mask.end(), 1);
  if (first == seq.loss_mask.end()) throw Error(ErrorCode::kInput, "evaluation document has no answer tokens");
  const auto a = static_cast<std::size_t>(first - seq.loss_mask.begin());
  EvalExample ex;
  ex.images = doc.images;
  ex.prompt = seq;
  pipeline::truncate_sequence(ex.prompt, a);
  for (std::size_t i = a; i < seq.size() && seq.loss_mask[i]; ++i) ex.gold.push_back(seq.token_ids[i]);
  if (!ex.gold.empty() && (ex.gold.back() == lm::tokens::kEndOfUtterance || ex.gold.back() == lm::tokens::kEos)) {
    ex.gold.pop_back();
  }
  return ex;
}

std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

EvalMetrics evaluate(const std::vector<EvalExample>& examples, std::size_t max_seq, const Generator& generate_fn) {
  if (examples.empty()) throw Error(ErrorCode::kInput, "evaluation set is empty");
  EvalMetrics m;
  m.n = examples.size();
  for (const auto& ex : examples) {
    const std::size_t max_new = ex.gold.size() + 1;
    if (ex.prompt.size() + max_new > max_seq) {
      ++m.overflow;
      continue;
    }
    std::vector<int> out;
    try {
      out = generate_fn(ex, max_new);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kCapacity) throw;
      ++m.overflow;
      continue;
    }
    const auto stop = std::find_if(out.begin(), out.end(), [](int t) {
      return t == lm::tokens::kEndOfUtterance || t == lm::tokens::kEos;
    });
    out.erase(stop, out.end());
    if (normalize_whitespace(lm::detokenize(out)) == normalize_whitespace(lm::detokenize(ex.gold))) ++m.correct;
  }
  m.accuracy = static_cast<double>(m.correct) / static_cast<double>(m.n);
  return m;
}

EvalMetrics evaluate(const VLMModel& model, const std::vector<Document>& docs) {
  std::vector<EvalExample> examples;
  examples.reserve(docs.size());
  for (const auto& d : docs) examples.push_back(make_eval_example(model, d));
  const int stop_ids[] = {lm::tokens::kEndOfUtterance, lm::tokens::kEos};
  return evaluate(examples, model.config().lm.max_seq, [&](const EvalExample& ex, std::size_t max_new) {
    return generate(model, ex.prompt, ex.images, max_new, stop_ids);
  });
}

// Checkpoints.

namespace {

constexpr const char* kManifestName = "manifest.txt";

std::filesystem::path tensor_path(const std::filesystem::path& dir, const std::string& name) {
  const bool adapter = name.rfind("adapters.", 0) == 0;
  return dir / (adapter ? "adapters" : "params") / (name + ".vlmf");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, VLMModel& model) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  std::filesystem::create_directories(dir / "adapters", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  save_run_config(dir / "config.json", cfg);
  std::ofstream manifest(dir / kManifestName);
  if (!manifest) throw Error(ErrorCode::kIo, "cannot write " + (dir / kManifestName).string());
  manifest << "vlmckpt 1\n";
  manifest << "config_hash " << config_id(cfg) << '\n';
  manifest << "architecture " << to_string(model.architecture()) << '\n';
  for (Linear* l : model.linears()) {
    if (!l->adapter) continue;
    const Adapter& a = *l->adapter;
    manifest << "adapter " << l->name() << ' ' << adapters::to_string(a.kind) << ' ' << a.rank << ' ' << fmt(a.alpha)
             << ' ' << fmt(a.dropout_p) << '\n';
  }
  for (Parameter* p : model.parameters()) {
    manifest << "param " << p->name << ' ' << (p->trainable ? 1 : 0);
    for (auto d : p->value.shape()) manifest << ' ' << d;
    manifest << '\n';
    save_tensor(tensor_path(dir, p->name), p->value);
  }
  if (!manifest) throw Error(ErrorCode::kIo, "failed writing checkpoint manifest");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.config = load_run_config(dir / "config.json");
  std::ifstream in(dir / kManifestName);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + (dir / kManifestName).string());

  struct ParamEntry {
    bool trainable;
    Shape shape;
  };
  std::map<std::string, ParamEntry> params;
  std::vector<std::string> param_order;
  std::vector<std::pair<std::string, adapters::AdapterSpec>> adapter_specs;
  std::string line, arch;
  bool header = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind.empty()) continue;
    if (kind == "vlmckpt") {
      int version = 0;
      ls >> version;
      if (version != 1) throw Error(ErrorCode::kIntegrity, "unsupported checkpoint version");
      header = true;
    } else if (kind == "config_hash") {
      ls >> ck.config_hash;
    } else if (kind == "architecture") {
      ls >> arch;
    } else if (kind == "adapter") {
      std::string name, adapter_kind;
      adapters::AdapterSpec spec;
      double alpha = 0.0;
      ls >> name >> adapter_kind >> spec.rank >> alpha >> spec.dropout_p;
      if (!ls) throw Error(ErrorCode::kIntegrity, "malformed adapter line: " + line);
      spec.kind = adapters::parse_kind(adapter_kind);
      spec.alpha = alpha;
      adapter_specs.emplace_back(name, spec);
    } else if (kind == "param") {
      std::string name;
      int trainable = 0;
      ls >> name >> trainable;
      Shape shape;
      std::size_t d = 0;
      while (ls >> d) shape.push_back(d);
      if (name.empty() || shape.empty()) throw Error(ErrorCode::kIntegrity, "malformed param line: " + line);
      if (!params.emplace(name, ParamEntry{trainable != 0, shape}).second) {
        throw Error(ErrorCode::kIntegrity, "duplicate parameter " + name);
      }
      param_order.push_back(name);
    } else {
      throw Error(ErrorCode::kIntegrity, "unknown manifest line: " + line);
    }
  }
  if (!header) throw Error(ErrorCode::kIntegrity, "missing checkpoint header");
  if (ck.config_hash != config_id(ck.config)) {
    throw Error(ErrorCode::kIntegrity, "config hash " + ck.config_hash + " does not match config.json (" +
                                           config_id(ck.config) + ")");
  }
  if (arch != to_string(ck.config.model.architecture)) {
    throw Error(ErrorCode::kIntegrity, "manifest architecture '" + arch + "' disagrees with config");
  }

  ck.model = std::make_unique<VLMModel>(ck.config.model, ck.config.seed);
  Rng rng = stream_rng(ck.config.seed, kPolicyStream);
  for (const auto& [name, spec] : adapter_specs) {
    bool found = false;
    for (Linear* l : ck.model->linears()) {
      if (l->name() != name) continue;
      adapters::AdapterSpec s = spec;
      s.target_pattern = l->weight.name;
      adapters::attach(*ck.model, s, rng);
      found = true;
      break;
    }
    if (!found) throw Error(ErrorCode::kIntegrity, "adapter target " + name + " not in model");
  }

  const auto model_params = ck.model->parameters();
  if (model_params.size() != params.size()) {
    throw Error(ErrorCode::kIntegrity, "manifest lists " + std::to_string(params.size()) + " parameters, model has " +
                                           std::to_string(model_params.size()));
  }
  for (Parameter* p : model_params) {
    const auto it = params.find(p->name);
    if (it == params.end()) throw Error(ErrorCode::kIntegrity, "parameter " + p->name + " missing from manifest");
    if (it->second.shape != p->value.shape()) {
      throw Error(ErrorCode::kIntegrity, p->name + ": manifest shape " + shape_str(it->second.shape) + " vs model " +
                                             shape_str(p->value.shape()));
    }
    Tensor t = load_tensor(tensor_path(dir, p->name));
    if (t.shape() != p->value.shape()) {
      throw Error(ErrorCode::kIntegrity, p->name + ": tensor file shape " + shape_str(t.shape()) + " vs manifest " +
                                             shape_str(p->value.shape()));
    }
    p->trainable = it->second.trainable;
    p->value = Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, p->trainable);
  }
  return ck;
}

std::string inspect(const Checkpoint& ck) {
  VLMModel& model = *ck.model;
  const auto& cfg = ck.config.model;
  std::ostringstream os;
  os << "config " << ck.config_hash << "  seed " << ck.config.seed << "  policy " << ck.config.policy << '\n';
  os << "architecture " << to_string(cfg.architecture) << "  connector " << connector::to_string(cfg.connector.kind)
     << "  patch_mode " << vision::to_string(cfg.patch_mode) << '\n';

  const ParamCounts counts = count_params(model);
  os << "\nparameters\n";
  os << std::left << std::setw(12) << "component" << std::right << std::setw(12) << "total" << std::setw(12)
     << "trainable" << '\n';
  for (const auto& [name, c] : counts.by_component) {
    os << std::left << std::setw(12) << name << std::right << std::setw(12) << c.first << std::setw(12) << c.second
       << '\n';
  }
  os << std::left << std::setw(12) << "all" << std::right << std::setw(12) << counts.total << std::setw(12)
     << counts.trainable << '\n';
  os << "adapters " << adapters::count_adapters(model) << '\n';

  os << "\nforward flops (one image at reference resolution)\n";
  for (std::size_t len : {16, 64, 256}) {
    os << "  text " << std::setw(4) << len << "  " << fmt_fixed(estimate_flops(model, len, 1), 0) << '\n';
  }

  os << "\nvisual tokens per image\n";
  const std::pair<std::size_t, std::size_t> sizes[] = {{cfg.vision.max_side, cfg.vision.max_side},
                                                       {cfg.vision.max_side / 2, cfg.vision.max_side},
                                                       {cfg.vision.patch_size, cfg.vision.patch_size}};
  for (const auto& [h, w] : sizes) {
    const auto [rows, cols] = vision::patch_grid(h, w, cfg.vision, cfg.patch_mode);
    const std::size_t single = cfg.architecture == Architecture::kCrossAttention
                                   ? 1
                                   : model.connector.tokens_for(rows * cols);
    os << "  " << h << "x" << w << "  patches " << rows * cols << "  tokens " << single << "  with split "
       << 5 * single << '\n';
  }
  return os.str();
}

// Grids.

std::string axis_path(const std::string& axis) {
  static const std::map<std::string, std::string> paths = {
      {"architecture", "architecture"},    {"policy", "policy"},
      {"connector", "connector.kind"},     {"n_latents", "connector.n_latents"},
      {"depth", "connector.n_layers"},     {"pre_mlp", "connector.use_pre_mlp"},
      {"patch_mode", "patch_mode"},        {"split", "data.split.enabled"},
      {"cross_attn_every", "lm.cross_attn_every"}, {"rank", "adapter.rank"},
  };
  const auto it = paths.find(axis);
  if (it == paths.end()) throw Error(ErrorCode::kConfig, "unknown grid axis '" + axis + "'");
  return it->second;
}

AblationGrid grid_from_json(const json& j) {
  try {
    AblationGrid g;
    g.base = run_config_from_json(j.value("base", json::object()));
    for (const auto& a : j.at("axes")) {
      GridAxis axis{a.at("name").get<std::string>(), {}};
      axis_path(axis.name);
      for (const auto& v : a.at("values")) axis.values.push_back(v);
      if (axis.values.empty()) throw Error(ErrorCode::kConfig, "grid axis '" + axis.name + "' has no values");
      g.axes.push_back(std::move(axis));
    }
    for (const auto& e : j.value("exclude", json::array())) {
      std::map<std::string, json> rule;
      for (const auto& [k, v] : e.items()) {
        axis_path(k);
        rule[k] = v;
      }
      g.exclude.push_back(std::move(rule));
    }
    if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (g.seeds.empty()) throw Error(ErrorCode::kConfig, "grid needs at least one seed");
    return g;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed grid: ") + e.what());
  }
}

AblationGrid load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open grid " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  return grid_from_json(j);
}

std::vector<GridCell> expand_grid(const AblationGrid& grid) {
  std::vector<GridCell> cells;
  std::vector<std::size_t> idx(grid.axes.size(), 0);
  const json base = to_json(grid.base);
  while (true) {
    std::map<std::string, json> values;
    for (std::size_t a = 0; a < grid.axes.size(); ++a) values[grid.axes[a].name] = grid.axes[a].values[idx[a]];
    const bool excluded = std::any_of(grid.exclude.begin(), grid.exclude.end(), [&](const auto& rule) {
      return std::all_of(rule.begin(), rule.end(), [&](const auto& kv) {
        const auto it = values.find(kv.first);
        return it != values.end() && it->second == kv.second;
      });
    });
    if (!excluded) {
      json j = base;
      for (const auto& [k, v] : values) set_path(j, axis_path(k), v);
      cells.push_back({values, run_config_from_json(j)});
    }
    std::size_t a = 0;
    while (a < idx.size() && ++idx[a] == grid.axes[a].values.size()) idx[a++] = 0;
    if (a == idx.size()) break;
  }
  return cells;
}

GridResult run_grid(const AblationGrid& grid) {
  GridResult result;
  for (const auto& rule : grid.exclude) result.excluded.push_back(rule);
  const auto cells = expand_grid(grid);
  if (cells.empty()) throw Error(ErrorCode::kConfig, "grid has no runnable cells");
  for (const auto& cell : cells) {
    for (std::uint64_t seed : grid.seeds) {
      RunConfig cfg = cell.config;
      cfg.seed = seed;
      result.configs.emplace(config_id(cfg), cell.config);
      try {
        result.reports.push_back(train(cfg).report);
      } catch (const Error& e) {
        result.failures.push_back({config_id(cfg), seed, e.what()});
      }
    }
  }
  std::sort(result.reports.begin(), result.reports.end(), [](const RunReport& a, const RunReport& b) {
    return std::tie(a.config_id, a.seed) < std::tie(b.config_id, b.seed);
  });
  std::sort(result.failures.begin(), result.failures.end(), [](const CellFailure& a, const CellFailure& b) {
    return std::tie(a.config_id, a.seed) < std::tie(b.config_id, b.seed);
  });
  return result;
}

std::string report_csv(const std::vector<RunReport>& reports) {
  std::ostringstream os;
  os << "config_id,arch,policy,connector,n_latents,depth,pre_mlp,patch_mode,split,trainable_params,total_params,"
        "flops_fwd,final_loss,accuracy,seed\n";
  for (const auto& r : reports) {
    os << r.config_id << ',' << r.arch << ',' << r.policy << ',' << r.connector << ',' << r.n_latents << ','
       << r.depth << ',' << (r.pre_mlp ? "true" : "false") << ',' << r.patch_mode << ','
       << (r.split ? "true" : "false") << ',' << r.trainable_params << ',' << r.total_params << ','
       << fmt_fixed(r.flops_fwd, 0) << ',' << fmt(r.final_loss) << ',' << fmt(r.accuracy) << ',' << r.seed << '\n';
  }
  return os.str();
}

std::string report_markdown(const GridResult& result) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"config_id", "arch", "policy", "connector", "n_latents", "depth", "pre_mlp", "patch_mode", "split",
                  "trainable", "total", "flops_fwd", "loss", "accuracy", "acc_range", "seeds"});
  for (std::size_t i = 0; i < result.reports.size();) {
    std::size_t j = i;
    double loss = 0.0, acc = 0.0, lo = 1e300, hi = -1e300;
    while (j < result.reports.size() && result.reports[j].config_id == result.reports[i].config_id) {
      const auto& r = result.reports[j++];
      loss += r.final_loss;
      acc += r.accuracy;
      lo = std::min(lo, r.accuracy);
      hi = std::max(hi, r.accuracy);
    }
    const double n = static_cast<double>(j - i);
    const auto& r = result.reports[i];
    rows.push_back({r.config_id, r.arch, r.policy, r.connector, std::to_string(r.n_latents), std::to_string(r.depth),
                    r.pre_mlp ? "yes" : "no", r.patch_mode, r.split ? "yes" : "no",
                    std::to_string(r.trainable_params), std::to_string(r.total_params), fmt_fixed(r.flops_fwd, 0),
                    fmt_fixed(loss / n, 4), fmt_fixed(acc / n, 4),
                    j - i > 1 ? fmt_fixed(lo, 4) + "-" + fmt_fixed(hi, 4) : "-", std::to_string(j - i)});
    i = j;
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    os << '|';
    for (std::size_t c = 0; c < row.size(); ++c) os << ' ' << std::left << std::setw(static_cast<int>(width[c])) << row[c] << " |";
    os << '\n';
  };
  emit(rows.front());
  os << '|';
  for (auto w : width) os << std::string(w + 2, '-') << '|';
  os << '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) emit(rows[i]);
  if (!result.excluded.empty()) {
    os << "\nExcluded combinations:\n";
    for (const auto& rule : result.excluded) {
      os << "-";
      for (const auto& [k, v] : rule) os << ' ' << k << '=' << v.dump();
      os << '\n';
    }
  }
  if (!result.failures.empty()) {
    os << "\nFailed cells:\n";
    for (const auto& f : result.failures) os << "- " << f.config_id << " seed " << f.seed << ": " << f.error << '\n';
  }
  return os.str();
}

void write_reports(const std::filesystem::path& dir, const GridResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  std::ofstream csv(dir / "report.csv");
  csv << report_csv(result.reports);
  std::ofstream md(dir / "report.md");
  md << report_markdown(result);
  if (!csv || !md) throw Error(ErrorCode::kIo, "failed writing reports to " + dir.string());
  std::filesystem::create_directories(dir / "configs", ec);
  for (const auto& [id, cfg] : result.configs) save_run_config(dir / "configs" / (id + ".json"), cfg);
}

}  // namespace vlm::harness
