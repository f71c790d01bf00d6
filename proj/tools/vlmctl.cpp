#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "vlm/error.hpp"
#include "vlm/harness.hpp"

namespace fs = std::filesystem;
using namespace vlm;

namespace {

struct Options {
  std::string config;
  std::string grid;
  std::string checkpoint;
  std::string data;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

harness::RunConfig load_config(const Options& o) {
  harness::RunConfig cfg = o.config.empty() ? harness::RunConfig{} : harness::load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.train.steps = *o.steps;
  cfg.validate();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

void print_report(const harness::RunReport& r) {
  std::printf("config %s  seed %llu\n", r.config_id.c_str(), static_cast<unsigned long long>(r.seed));
  std::printf("loss %.6f -> %.6f  accuracy %.4f\n", r.initial_loss, r.final_loss, r.accuracy);
  std::printf("params %zu trainable / %zu total  flops %.0f  visual tokens/image %zu  %.1fs\n", r.trainable_params,
              r.total_params, r.flops_fwd, r.visual_tokens_per_image, r.wall_time_s);
}

int cmd_gen_corpus(const Options& o) {
  const auto cfg = load_config(o);
  const auto records = harness::synthetic_corpus(cfg);
  ensure_dir(o.out);
  pipeline::write_corpus(o.out, records);
  harness::save_run_config(fs::path(o.out) / "config.resolved.json", cfg);
  std::printf("wrote %zu documents to %s\n", records.size(), o.out.c_str());
  return 0;
}

int cmd_train(const Options& o) {
  auto cfg = load_config(o);
  if (!o.data.empty()) cfg.data.manifest = o.data;
  const fs::path out(o.out);
  ensure_dir(out);
  harness::save_run_config(out / "config.resolved.json", cfg);
  auto result = harness::train(cfg);
  harness::save_checkpoint(out / "checkpoint", cfg, *result.model);
  {
    std::ofstream csv(out / "report.csv");
    csv << harness::report_csv({result.report});
    std::ofstream curve(out / "loss_curve.csv");
    curve << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < result.report.loss_curve.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, result.report.loss_curve[i]);
      curve << buf;
    }
    if (!csv || !curve) throw Error(ErrorCode::kIo, "failed writing reports to " + out.string());
  }
  print_report(result.report);
  return 0;
}

int cmd_ablate(const Options& o) {
  if (o.grid.empty()) throw Error(ErrorCode::kConfig, "ablate needs --grid");
  auto grid = harness::load_grid(o.grid);
  if (o.seed) grid.seeds = {*o.seed};
  if (o.steps) grid.base.train.steps = *o.steps;
  const auto result = harness::run_grid(grid);
  harness::write_reports(o.out, result);
  std::cout << harness::report_markdown(result);
  for (const auto& f : result.failures) {
    std::printf("failed %s seed %llu: %s\n", f.config_id.c_str(), static_cast<unsigned long long>(f.seed),
                f.error.c_str());
  }
  return result.failures.empty() ? 0 : 3;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw Error(ErrorCode::kConfig, "eval needs --checkpoint");
  const auto ck = harness::load_checkpoint(o.checkpoint);
  harness::RunConfig cfg = ck.config;
  if (!o.data.empty()) cfg.data.manifest = o.data;
  if (o.seed) cfg.seed = *o.seed;
  const auto docs = harness::load_documents(cfg);
  const auto m = harness::evaluate(*ck.model, docs);
  std::printf("n %zu  correct %zu  overflow %zu  accuracy %.4f\n", m.n, m.correct, m.overflow, m.accuracy);
  return 0;
}

int cmd_inspect(const Options& o) {
  if (o.checkpoint.empty()) throw Error(ErrorCode::kConfig, "inspect needs --checkpoint");
  std::cout << harness::inspect(harness::load_checkpoint(o.checkpoint));
  return 0;
}

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy vision-language model trainer and ablation runner"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config JSON");
    sub->add_option("--seed", o.seed, "Override the seed");
    sub->add_option("--steps", o.steps, "Override the number of training steps");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic corpus as PPM images plus a manifest");
  add_common(gen);
  auto* tr = app.add_subcommand("train", "Train one config and save a checkpoint");
  add_common(tr);
  tr->add_option("--data", o.data, "Corpus manifest (default: synthetic corpus)");
  auto* ab = app.add_subcommand("ablate", "Run an ablation grid and write CSV and markdown reports");
  add_common(ab);
  ab->add_option("--grid", o.grid, "Grid JSON")->required();
  auto* ev = app.add_subcommand("eval", "Greedy exact-match evaluation of a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  ev->add_option("--data", o.data, "Corpus manifest (default: the checkpoint's training corpus)");
  ev->add_option("--seed", o.seed, "Override the corpus seed");
  auto* in = app.add_subcommand("inspect", "Summarize a checkpoint");
  in->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_corpus(o);
    if (tr->parsed()) return cmd_train(o);
    if (ab->parsed()) return cmd_ablate(o);
    if (ev->parsed()) return cmd_eval(o);
    return cmd_inspect(o);
  } catch (const Error& e) {
    std::string msg = e.what();
    const auto prefix = std::string(to_string(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    std::fprintf(stderr, "error code=%s message=%s\n", std::string(to_string(e.code())).c_str(), quote(msg).c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error code=internal message=%s\n", quote(e.what()).c_str());
    return 2;
  }
}
