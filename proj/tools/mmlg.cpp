// mmlg: command-line driver for the learngene pipeline.
//
// Exit codes: 0 success, 1 invalid input or arguments, 2 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mmlg/accounting.hpp"
#include "mmlg/config.hpp"
#include "mmlg/downstream.hpp"
#include "mmlg/grad_suite.hpp"
#include "mmlg/model_io.hpp"

namespace fs = std::filesystem;
using namespace mmlg;

namespace {

using Real = float;

std::unique_ptr<MetricsSink> open_metrics(const std::string& path) {
  return path.empty() ? std::make_unique<MetricsSink>() : std::make_unique<MetricsSink>(path);
}

void print_records(const MetricsSink& sink, bool to_stdout) {
  if (!to_stdout) return;
  for (const auto& r : sink.records()) std::cout << to_json(r).dump() << "\n";
}

MetaMap stage_meta(const std::string& stage, std::uint64_t seed) {
  return {{"stage", stage}, {"seed", std::to_string(seed)}};
}

SynthCorpus load_data(const std::string& data, const std::string& config_path) {
  if (fs::is_regular_file(data)) return corpus_from_checkpoint(load_checkpoint(data));
  if (config_path.empty()) throw ValidationError("--data " + data + " names a split; --config is required");
  return load_config(config_path).data.build(parse_split(data));
}

std::uint64_t meta_seed(const Checkpoint& ck) {
  auto it = ck.meta.find("seed");
  return it == ck.meta.end() ? 0 : std::stoull(it->second);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal learngene extraction and descendant initialization"};
  app.require_subcommand(1);

  std::string config, out, teacher, bank_path, model_path, data, metrics, task, modality = "dual", mode = "full",
                                                                            depths = "6,8,12", split_arg, scale = "tiny";
  std::size_t layers = 0;
  std::uint64_t seed = 0;
  std::optional<double> fraction;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> run_seed;

  auto* pre = app.add_subcommand("pretrain-ancestor", "Train the unshared ancestor dual encoder");
  pre->add_option("--config", config, "Run config (INI)")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out, "Output checkpoint")->required();
  pre->add_option("--metrics", metrics, "Append per-epoch records to this file");

  auto* ext = app.add_subcommand("extract", "Distil the ancestor into a learngene bank");
  ext->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ext->add_option("--teacher", teacher, "Ancestor checkpoint")->required()->check(CLI::ExistingFile);
  ext->add_option("--out", out)->required();
  ext->add_option("--metrics", metrics);

  auto* ini = app.add_subcommand("init", "Initialize a descendant from a bank");
  ini->add_option("--bank", bank_path, "Learngene bank (optional for --mode scratch)")->check(CLI::ExistingFile);
  ini->add_option("--config", config, "Run config; supplies the shape for scratch mode without a bank")
      ->check(CLI::ExistingFile);
  ini->add_option("--layers", layers, "Descendant depth")->required();
  ini->add_option("--modality", modality)->check(CLI::IsMember({"vision", "language", "dual"}));
  ini->add_option("--mode", mode)->check(CLI::IsMember({"full", "no_mm", "only_mm", "scratch"}));
  ini->add_option("--seed", seed);
  ini->add_option("--out", out)->required();

  auto* act = app.add_subcommand("activate", "Brief CLIP-loss pass on a fraction of the pretraining data");
  act->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  act->add_option("--config", config)->required()->check(CLI::ExistingFile);
  act->add_option("--fraction", fraction, "Fraction of pretraining pairs (default from config, 0.10)");
  act->add_option("--epochs", epochs, "Epochs (default from config, 1)");
  act->add_option("--seed", run_seed, "Subset and batch-order seed (default from config)");
  act->add_option("--out", out)->required();
  act->add_option("--metrics", metrics);

  auto* ft = app.add_subcommand("finetune", "Fine-tune on the downstream training split");
  ft->add_option("--task", task)->required()->check(CLI::IsMember({"retrieval", "classify"}));
  ft->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  ft->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ft->add_option("--seed", run_seed, "Batch-order and head seed (default from config)");
  ft->add_option("--out", out)->required();
  ft->add_option("--metrics", metrics);

  auto* ev = app.add_subcommand("eval", "Evaluate a model on a data split");
  ev->add_option("--task", task)->required()->check(CLI::IsMember({"retrieval", "classify"}));
  ev->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Split name (with --config) or exported corpus file")->required();
  ev->add_option("--config", config)->check(CLI::ExistingFile);
  ev->add_option("--metrics", metrics, "Append the report records here instead of printing them");

  auto* st = app.add_subcommand("storage-report", "Parameter storage of the learngene against descendants");
  st->add_option("--config", config)->required()->check(CLI::ExistingFile);
  st->add_option("--depths", depths, "Comma-separated descendant depths");
  st->add_option("--metrics", metrics);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the training-loss gradients");
  gc->add_option("--scale", scale)->check(CLI::IsMember({"tiny"}));

  auto* exp = app.add_subcommand("export-data", "Write one data split to a corpus file");
  exp->add_option("--config", config)->required()->check(CLI::ExistingFile);
  exp->add_option("--split", split_arg)->required();
  exp->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*pre) {
      const auto cfg = load_config(config);
      const auto data_pre = cfg.data.build(Split::pretrain);
      auto sink = open_metrics(metrics);
      auto run = pretrain_ancestor<Real>(cfg.ancestor, data_pre, cfg.pretrain, sink.get());
      save_model(run.model, out, stage_meta("pretrain", cfg.pretrain.seed));
      std::printf("ancestor: %zu steps, final L_CLIP %.6f -> %s\n", run.log.steps, run.log.final_loss(), out.c_str());
    } else if (*ext) {
      const auto cfg = load_config(config);
      const auto anc = load_model<Real>(teacher);
      const auto data_pre = cfg.data.build(Split::pretrain);
      auto sink = open_metrics(metrics);
      ExtractOptions eo{cfg.tau_from_teacher, cfg.extract.seed};
      auto run = extract<Real>(anc, cfg.learngene, data_pre, cfg.extract, eo, sink.get());
      save_bank(run.bank, out, stage_meta("extract", cfg.extract.seed));
      const auto& first = run.log.epochs.empty() ? EpochStats{} : run.log.epochs.front();
      const auto& last = run.log.epochs.empty() ? EpochStats{} : run.log.epochs.back();
      std::printf("learngene: %zu steps, L_dist %.6f -> %.6f, L_CLIP %.6f -> %.6f -> %s\n", run.log.steps, first.dist,
                  last.dist, first.clip, last.clip, out.c_str());
    } else if (*ini) {
      const auto m = parse_init_mode(mode);
      const auto mod = parse_modality(modality);
      PlainModel<Real> model;
      if (!bank_path.empty()) {
        const auto bank = load_bank<Real>(bank_path);
        model = init_descendant(bank, layers, mod, m, seed);
      } else {
        if (m != InitMode::scratch) throw ValidationError("--bank is required unless --mode scratch");
        if (config.empty()) throw ValidationError("scratch mode without --bank needs --config for the model shape");
        const auto cfg = load_config(config);
        model = init_descendant(LearngeneBank<Real>::create(cfg.learngene, 0), layers, mod, m, seed);
      }
      auto meta = stage_meta("init", seed);
      meta["init_mode"] = mode;
      save_model(model, out, meta);
      std::printf("descendant: %zu layers, %s, mode %s, %zu parameters -> %s\n", layers, modality.c_str(), mode.c_str(),
                  model.params.scalar_count(), out.c_str());
    } else if (*act) {
      auto cfg = load_config(config);
      if (fraction) cfg.activation.fraction = *fraction;
      if (epochs) cfg.activation.epochs = *epochs;
      if (run_seed) cfg.activate.seed = *run_seed;
      auto model = load_model<Real>(model_path);
      const auto data_pre = cfg.data.build(Split::pretrain);
      auto sink = open_metrics(metrics);
      auto log = activate(model, data_pre, cfg.activation, cfg.activate, sink.get());
      save_model(model, out, stage_meta("activate", cfg.activate.seed));
      std::printf("activated: %zu steps on %.0f%% of %zu pairs -> %s\n", log.steps, 100 * cfg.activation.fraction,
                  data_pre.size(), out.c_str());
    } else if (*ft) {
      auto cfg = load_config(config);
      if (run_seed) cfg.retrieval.seed = cfg.classify.seed = *run_seed;
      auto model = load_model<Real>(model_path);
      const auto pool = cfg.data.build(Split::downstream_train);
      auto sink = open_metrics(metrics);
      if (task == "retrieval") {
        auto log = finetune_retrieval(model, cfg.task_train(pool, cfg.retrieval_train), cfg.retrieval, sink.get());
        save_model(model, out, stage_meta("finetune-retrieval", cfg.retrieval.seed));
        std::printf("retrieval fine-tune: %zu steps, final L_CLIP %.6f -> %s\n", log.steps, log.final_loss(),
                    out.c_str());
      } else {
        if (!model.has_head()) model = classifier_from(model, cfg.data.spec.num_classes(), cfg.classify.seed);
        auto log = finetune_classify(model, cfg.task_train(pool, cfg.classify_train), cfg.classify, sink.get());
        save_model(model, out, stage_meta("finetune-classify", cfg.classify.seed));
        std::printf("classification fine-tune: %zu steps, final CE %.6f -> %s\n", log.steps, log.final_loss(),
                    out.c_str());
      }
    } else if (*ev) {
      const auto ck = load_checkpoint(model_path);
      auto model = model_from_checkpoint<Real>(ck);
      const auto corpus = load_data(data, config);
      auto sink = open_metrics(metrics);
      const auto s = meta_seed(ck);
      if (task == "retrieval") {
        const auto r = eval_retrieval(model, corpus);
        std::printf("retrieval on %s (%zu queries)\n  I2T R@1 %6.2f  R@5 %6.2f\n  T2I R@1 %6.2f  R@5 %6.2f\n",
                    std::string(split_name(corpus.split)).c_str(), r.n_queries, r.i2t_r1, r.i2t_r5, r.t2i_r1, r.t2i_r5);
        sink->emit("eval-retrieval", 0, "i2t_r1", r.i2t_r1, s);
        sink->emit("eval-retrieval", 0, "i2t_r5", r.i2t_r5, s);
        sink->emit("eval-retrieval", 0, "t2i_r1", r.t2i_r1, s);
        sink->emit("eval-retrieval", 0, "t2i_r5", r.t2i_r5, s);
      } else {
        const auto r = eval_accuracy(model, corpus);
        std::printf("classification on %s: top-1 %.2f%% over %zu examples, %zu classes\n",
                    std::string(split_name(corpus.split)).c_str(), r.accuracy, r.n_examples, r.classes);
        sink->emit("eval-classify", 0, "top1", r.accuracy, s);
      }
      print_records(*sink, metrics.empty());
    } else if (*st) {
      const auto cfg = load_config(config);
      const auto rep = storage_report(cfg.learngene, config_detail::parse_depths(depths));
      std::fputs(format_report(rep).c_str(), stdout);
      auto sink = open_metrics(metrics);
      emit_report(*sink, rep);
      print_records(*sink, metrics.empty());
    } else if (*gc) {
      bool ok = true;
      for (const auto& c : run_grad_suite()) {
        std::printf("lambda=%g: max relative error %.3e over %zu coordinates (worst %s[%zu]: analytic %.6e, "
                    "numeric %.6e) %s\n",
                    c.lambda, c.result.max_rel_error, c.result.coords_checked, c.result.worst_param.c_str(),
                    c.result.worst_index, c.result.worst_analytic, c.result.worst_numeric, c.passed ? "ok" : "FAILED");
        ok = ok && c.passed;
      }
      if (!ok) {
        std::fprintf(stderr, "gradcheck: relative error above 1e-4\n");
        return 2;
      }
    } else if (*exp) {
      const auto cfg = load_config(config);
      const auto corpus = cfg.data.build(parse_split(split_arg));
      save_checkpoint(to_checkpoint(corpus), out);
      std::printf("%zu samples of %s -> %s\n", corpus.size(), split_arg.c_str(), out.c_str());
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
