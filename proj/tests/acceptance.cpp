// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
// Usage: acceptance [run-config.ini]   (defaults to configs/desk.ini)

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <tuple>
#include <string>
#include <vector>

#include "mmlg/accounting.hpp"
#include "mmlg/config.hpp"
#include "mmlg/descendant.hpp"
#include "mmlg/downstream.hpp"
#include "mmlg/grad_suite.hpp"
#include "mmlg/model_io.hpp"
#include "tiny_models.hpp"

namespace fs = std::filesystem;
using namespace mmlg;
using Real = float;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

std::vector<Verdict> verdicts;

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void report(int id, const std::string& title, const std::function<std::pair<bool, std::string>()>& body) {
  const auto t0 = Clock::now();
  Verdict v{id, title, false, "", 0};
  try {
    auto [ok, detail] = body();
    v.pass = ok;
    v.detail = detail;
  } catch (const std::exception& e) {
    v.detail = std::string("exception: ") + e.what();
  }
  v.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("%s criterion %d (%s): %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str(),
              v.seconds);
  std::fflush(stdout);
  verdicts.push_back(v);
}

// ---------------------------------------------------------------- 1 .. 7

std::pair<bool, std::string> worked_examples() {
  const auto plan = sharing_plan(12);
  const auto e6 = plan.entries.at(6);
  const auto d8 = descendant_layer_plan(8);
  std::vector<std::size_t> pairs;
  for (const auto& e : d8) pairs.push_back(e.pair);
  const std::vector<std::size_t> want{0, 0, 1, 1, 2, 3, 4, 5};
  bool groups_ok = true;
  for (const auto& e : d8) groups_ok = groups_ok && e.group == e.pair % 2 + 1;
  const bool ok = e6.pair == 3 && e6.group == 2 && pairs == want && groups_ok;
  std::string p8;
  for (auto p : pairs) p8 += std::to_string(p);
  return {ok, fmt("layer 6 of 12 -> (coefficient %zu, group %zu); depth-8 pairs %s", e6.pair, e6.group, p8.c_str())};
}

// Elementwise a*x + b*y over the raw stored tensors of a random bank.
std::pair<bool, std::string> composition_oracle(const EncoderConfig& cfg) {
  Rng pick(2024);
  std::size_t draws = 0, mismatches = 0, scalars = 0;
  for (int draw = 0; draw < 120; ++draw) {
    auto bank = testing::random_bank<double>(cfg, 5000 + draw);
    const std::size_t pair = pick() % bank.pairs();
    const std::size_t group = 1 + pick() % 2;
    const bool vision = pick() % 2 == 0;
    const std::string uni = vision ? "vision" : "language";
    const double a = bank.params().at(vision ? "coeff.vision" : "coeff.language").value[pair];
    const double b = bank.params().at(vision ? "coeff.mm_vision" : "coeff.mm_language").value[pair];
    const auto out = compose_layer(bank, vision ? Encoder::vision : Encoder::language, pair, group);
    for (std::size_t f = 0; f < kBlockFields.size(); ++f) {
      const std::string field(kBlockFields[f]);
      const auto& x = bank.params().at("block.g" + std::to_string(group) + "." + uni + "." + field).value;
      const auto& y = bank.params().at("block.g" + std::to_string(group) + ".multimodal." + field).value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double expect = a * x[i] + b * y[i];
        mismatches += out.fields[f][i] != expect;
        ++scalars;
      }
    }
    ++draws;
  }
  return {draws >= 100 && mismatches == 0,
          fmt("%zu draws, %zu scalars, %zu bitwise mismatches", draws, scalars, mismatches)};
}

std::pair<bool, std::string> aux_plain_equivalence(const EncoderConfig& cfg) {
  double worst = 0;
  for (std::uint64_t b = 0; b < 20; ++b) {
    auto bank = testing::random_bank<double>(cfg, 700 + b, 0.15);
    auto plain = init_descendant(bank, cfg.depth, ModelModality::dual, InitMode::full, 1);
    const auto images = testing::random_images<double>(cfg, 4, 900 + b);
    const auto texts = testing::random_texts(cfg, 4, 950 + b);
    const auto x = forward_pair(bank, images, texts);
    const auto y = forward_pair(plain, images, texts);
    worst = std::max({worst, max_abs_diff(x.images, y.images), max_abs_diff(x.texts, y.texts),
                      std::abs(x.tau - y.tau)});
  }
  return {worst <= 1e-12, fmt("20 batches, d=%zu L=%zu, max abs diff %.3e (limit 1e-12)", cfg.width, cfg.depth, worst)};
}

std::pair<bool, std::string> gradient_check() {
  const auto cases = run_grad_suite();
  bool ok = true;
  std::string detail;
  for (const auto& c : cases) {
    ok = ok && c.passed;
    detail += fmt("lambda=%g max rel err %.2e over %zu coords (worst %s); ", c.lambda, c.result.max_rel_error,
                  c.result.coords_checked, c.result.worst_param.c_str());
  }
  // Coverage: every block, coefficient vector, shared LayerNorm and the
  // logit scale is a parameter of the checked bank.
  const auto bank = LearngeneBank<double>::create(tiny_aux_config(), 0);
  std::size_t blocks = 0, coeffs = 0, lns = 0, tau = 0;
  for (const auto& [name, _] : bank.params()) {
    blocks += name.rfind("block.", 0) == 0;
    coeffs += name.rfind("coeff.", 0) == 0;
    for (auto e : {Encoder::vision, Encoder::language})
      for (int which : {1, 2}) lns += name.rfind(LearngeneBank<double>::shared_ln_name(e, which) + ".", 0) == 0;
    tau += name == "logit_scale";
  }
  detail += fmt("covers %zu block tensors, %zu coefficient vectors, %zu shared-LN tensors, %zu tau", blocks, coeffs,
                lns, tau);
  return {ok && coeffs == 4 && tau == 1 && lns == 8 && blocks == 6 * kBlockFields.size(), detail};
}

double softmax_entropy_rows(const Tensor<double>& t) {
  double h = 0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double mx = t(r, 0), se = 0;
    for (std::size_t c = 0; c < t.cols(); ++c) mx = std::max(mx, t(r, c));
    for (std::size_t c = 0; c < t.cols(); ++c) se += std::exp(t(r, c) - mx);
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double p = std::exp(t(r, c) - mx) / se;
      h -= p * std::log(p);
    }
  }
  return h / double(t.rows());
}

std::pair<bool, std::string> objective_anchors() {
  const double clip0 = clip_loss(LogitMatrix<double>{Tensor<double>({4, 4}, 0.0)});
  const double e1 = std::abs(clip0 - std::log(4.0));
  Rng rng(55);
  double e2 = 0, gibbs_margin = INFINITY;
  for (int i = 0; i < 100; ++i) {
    const auto t = uniform<double>({4, 4}, -6, 6, rng);
    const auto x = uniform<double>({4, 4}, -6, 6, rng);
    const LogitMatrix<double> tm{t, LogitSource::teacher};
    const double self = dist_loss(LogitMatrix<double>{t}, tm);
    const double entropy = 0.5 * (softmax_entropy_rows(t) + softmax_entropy_rows(transposed(t)));
    e2 = std::max(e2, std::abs(self - entropy));
    gibbs_margin = std::min(gibbs_margin, dist_loss(LogitMatrix<double>{x}, tm) - self);
  }
  return {e1 <= 1e-10 && e2 <= 1e-10 && gibbs_margin >= 0,
          fmt("|clip(0)-ln4| %.1e, max |dist(t,t)-H| %.1e, min Gibbs margin %.3e over 100 pairs", e1, e2,
              gibbs_margin)};
}

EncoderConfig vit_s_config() {
  EncoderConfig c;
  c.width = 384;
  c.heads = 6;
  c.mlp_ratio = 4;
  c.depth = 12;
  c.proj_dim = 512;
  c.vision = {224, 16, 3};
  c.text = {49408, 77};
  return c;
}

std::pair<bool, std::string> storage_anchor() {
  const std::size_t six = layer_param_count(384, 4) * 6;
  const double rel = std::abs(double(six) - 10.7e6) / 10.7e6;
  const auto rep = storage_report(vit_s_config(), {6, 8, 12});
  const bool exact = rep.block_params * 52 == rep.materialized_block_params * 6;
  const bool ok = six == 10637568 && rel <= 0.01 && exact && rep.ratio < 0.35;
  return {ok, fmt("6 blocks = %zu (%.2f%% from 10.7M); block-only %zu/%zu = %.4f (6/52 = %.4f); full ratio %.4f",
                  six, 100 * rel, rep.block_params, rep.materialized_block_params, rep.block_ratio, 6.0 / 52.0,
                  rep.ratio)};
}

std::pair<bool, std::string> serialization(const LearngeneBank<Real>& desk_bank, const EncoderConfig& cfg) {
  const fs::path dir = fs::temp_directory_path() / ("mmlg-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool ok = true;
  std::string detail;

  save_bank(desk_bank, dir / "bank.a");
  save_bank(desk_bank, dir / "bank.b");
  const auto bytes = read_file(dir / "bank.a");
  const bool identical = bytes == read_file(dir / "bank.b");
  const auto back = load_bank<Real>(dir / "bank.a");
  bool bank_bitwise = back.params().size() == desk_bank.params().size();
  for (const auto& [name, p] : desk_bank.params()) {
    bank_bitwise = bank_bitwise && std::memcmp(p.value.data().data(), back.params().at(name).value.data().data(),
                                               p.value.size() * sizeof(Real)) == 0;
  }
  auto dbank = testing::random_bank<double>(cfg, 31);
  save_bank(dbank, dir / "bank64");
  const auto dback = load_bank<double>(dir / "bank64");
  for (const auto& [name, p] : dbank.params()) bank_bitwise = bank_bitwise && p.value == dback.params().at(name).value;

  const auto desc = init_descendant(desk_bank, 8, ModelModality::dual, InitMode::full, 3);
  save_model(desc, dir / "desc");
  const auto dd = load_model<Real>(dir / "desc");
  bool desc_bitwise = dd.params.size() == desc.params.size() && dd.config == desc.config;
  for (const auto& [name, p] : desc.params) {
    desc_bitwise = desc_bitwise && std::memcmp(p.value.data().data(), dd.params.at(name).value.data().data(),
                                               p.value.size() * sizeof(Real)) == 0;
  }

  // Truncation at 64 points spread over the file, and single-byte flips.
  std::size_t rejected = 0, attempts = 0;
  for (std::size_t k = 0; k < 64; ++k) {
    const std::size_t keep = bytes.size() * k / 64;
    ++attempts;
    try {
      deserialize(std::span<const std::uint8_t>(bytes.data(), keep));
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  Rng rng(77);
  for (int k = 0; k < 64; ++k) {
    auto bad = bytes;
    const std::size_t at = k < 4 ? std::size_t(k) : rng() % bad.size();
    bad[at] ^= std::uint8_t(1u << (rng() % 8));
    ++attempts;
    try {
      deserialize(bad);
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  fs::remove_all(dir);
  ok = identical && bank_bitwise && desc_bitwise && rejected == attempts;
  detail = fmt("bank round trip %s, descendant round trip %s, repeated saves %s, %zu/%zu damaged files rejected",
               bank_bitwise ? "bitwise" : "DIFFERS", desc_bitwise ? "bitwise" : "DIFFERS",
               identical ? "byte-identical" : "DIFFER", rejected, attempts);
  return {ok, detail};
}

// ---------------------------------------------------------------- 8 .. 10

struct Outcome {
  RetrievalReport retrieval;
  double accuracy = NAN;
};

struct Pipeline {
  RunConfig cfg;
  std::array<SynthCorpus, 3> parts;
  SynthCorpus retrieval_train, classify_train;

  Outcome descendant(const LearngeneBank<Real>& bank, std::size_t n, InitMode mode, std::uint64_t seed,
                     bool classify, MetricsSink* sink) const {
    Outcome out;
    auto m = init_descendant(bank, n, ModelModality::dual, mode, seed);
    TrainSchedule as = cfg.activate;
    as.seed = seed;
    activate(m, parts[0], cfg.activation, as, sink);
    if (classify) {
      auto c = classifier_from(m, cfg.data.spec.num_classes(), seed);
      TrainSchedule cs = cfg.classify;
      cs.seed = seed;
      finetune_classify(c, classify_train, cs, sink);
      out.accuracy = eval_accuracy(c, parts[2]).accuracy;
      if (sink) sink->emit("eval-classify", n, "top1", out.accuracy, seed);
    }
    TrainSchedule rs = cfg.retrieval;
    rs.seed = seed;
    finetune_retrieval(m, retrieval_train, rs, sink);
    out.retrieval = eval_retrieval(m, parts[2]);
    if (sink) {
      sink->emit("eval-retrieval", n, "i2t_r1", out.retrieval.i2t_r1, seed);
      sink->emit("eval-retrieval", n, "t2i_r1", out.retrieval.t2i_r1, seed);
    }
    return out;
  }
};

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

bool same_records(const MetricsSink& a, const MetricsSink& b, std::size_t& compared) {
  compared = a.records().size();
  return a.records() == b.records();
}

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : std::string(MMLG_SOURCE_DIR) + "/configs/desk.ini";
  const auto t_start = Clock::now();
  std::printf("acceptance run with %s\n", config_path.c_str());

  Pipeline pl;
  pl.cfg = load_config(config_path);
  const auto& cfg = pl.cfg;
  EncoderConfig aux64 = cfg.learngene;

  report(1, "worked examples", worked_examples);
  report(2, "composition oracle", [&] { return composition_oracle(aux64); });
  report(3, "auxiliary/plain equivalence", [&] { return aux_plain_equivalence(aux64); });
  report(4, "gradient check", gradient_check);
  report(5, "objective anchors", objective_anchors);
  report(6, "storage anchor", storage_anchor);

  // Desk pipeline: ancestor -> learngene, then descendants per depth/mode/seed.
  auto t0 = Clock::now();
  pl.parts = cfg.data.build();
  pl.retrieval_train = cfg.task_train(pl.parts[1], cfg.retrieval_train);
  pl.classify_train = cfg.task_train(pl.parts[1], cfg.classify_train);
  fs::remove("acceptance_metrics.jsonl");
  MetricsSink log("acceptance_metrics.jsonl");
  MetricsSink pre_log, ext_log;
  const auto ancestor = pretrain_ancestor<Real>(cfg.ancestor, pl.parts[0], cfg.pretrain, &pre_log);
  const ExtractOptions eo{cfg.tau_from_teacher, cfg.extract.seed};
  const auto learngene = extract<Real>(ancestor.model, cfg.learngene, pl.parts[0], cfg.extract, eo, &ext_log);
  for (const auto* s : {&pre_log, &ext_log})
    for (const auto& r : s->records()) log.emit(r);
  const auto anc_r = eval_retrieval(ancestor.model, pl.parts[2]);
  std::printf("  ancestor R@1 %.1f/%.1f, learngene L_dist %.4f -> %.4f (%.0fs)\n", anc_r.i2t_r1, anc_r.t2i_r1,
              learngene.log.epochs.front().dist, learngene.log.epochs.back().dist,
              std::chrono::duration<double>(Clock::now() - t0).count());
  std::fflush(stdout);

  report(7, "serialization", [&] { return serialization(learngene.bank, aux64); });

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<std::tuple<std::size_t, InitMode, std::uint64_t>, Outcome> results;
  auto run = [&](std::size_t n, InitMode mode, std::uint64_t seed, bool classify) {
    const auto t = Clock::now();
    const auto o = pl.descendant(learngene.bank, n, mode, seed, classify, &log);
    results[{n, mode, seed}] = o;
    std::printf("  n=%-2zu %-8s seed %llu: R@1 %.1f/%.1f", n, std::string(to_string(mode)).c_str(),
                static_cast<unsigned long long>(seed), o.retrieval.i2t_r1, o.retrieval.t2i_r1);
    if (classify) std::printf(", top-1 %.1f", o.accuracy);
    std::printf(" (%.0fs)\n", std::chrono::duration<double>(Clock::now() - t).count());
    std::fflush(stdout);
  };
  for (std::size_t n : cfg.depths) {
    for (auto mode : {InitMode::full, InitMode::scratch}) {
      for (auto seed : seeds) run(n, mode, seed, n == 6 || n == 12);
    }
  }
  for (auto mode : {InitMode::only_mm, InitMode::no_mm})
    for (auto seed : seeds) run(12, mode, seed, false);

  report(8, "retrieval: full beats scratch", [&] {
    bool ok = true;
    std::string detail;
    for (std::size_t n : {6, 8, 12}) {
      int wins = 0;
      for (auto seed : seeds) {
        const auto& f = results.at({n, InitMode::full, seed}).retrieval;
        const auto& s = results.at({n, InitMode::scratch, seed}).retrieval;
        wins += f.i2t_r1 - s.i2t_r1 >= 5.0 && f.t2i_r1 - s.t2i_r1 >= 5.0;
      }
      ok = ok && wins >= 2;
      detail += fmt("n=%zu %d/3 seeds with both directions >= +5; ", n, wins);
    }
    detail += fmt("pipeline %.1f min",
                  std::chrono::duration<double>(Clock::now() - t_start).count() / 60.0);
    return std::pair{ok, detail};
  });

  report(9, "ablation and classification orderings", [&] {
    auto med = [&](std::size_t n, InitMode m, auto get) {
      std::vector<double> v;
      for (auto seed : seeds) v.push_back(get(results.at({n, m, seed})));
      return median3(v);
    };
    auto mean_r1 = [](const Outcome& o) { return 0.5 * (o.retrieval.i2t_r1 + o.retrieval.t2i_r1); };
    auto acc = [](const Outcome& o) { return o.accuracy; };
    const double full = med(12, InitMode::full, mean_r1);
    const double only = med(12, InitMode::only_mm, mean_r1);
    const double nomm = med(12, InitMode::no_mm, mean_r1);
    const double a6 = med(6, InitMode::full, acc), s6 = med(6, InitMode::scratch, acc);
    const double a12 = med(12, InitMode::full, acc), s12 = med(12, InitMode::scratch, acc);
    const bool ok = full >= only && full >= nomm && a6 - s6 >= 3.0 && a12 - s12 >= 3.0;
    return std::pair{ok, fmt("n=12 median mean-R@1 full %.2f, only_mm %.2f, no_mm %.2f; median top-1 n=6 %.1f vs "
                             "%.1f, n=12 %.1f vs %.1f",
                             full, only, nomm, a6, s6, a12, s12)};
  });

  report(10, "determinism", [&] {
    std::size_t total = 0, n = 0;
    bool ok = true;
    MetricsSink pre2, ext2;
    const auto anc2 = pretrain_ancestor<Real>(cfg.ancestor, pl.parts[0], cfg.pretrain, &pre2);
    ok = same_records(pre_log, pre2, n) && ok;
    total += n;
    const auto lg2 = extract<Real>(anc2.model, cfg.learngene, pl.parts[0], cfg.extract, eo, &ext2);
    ok = same_records(ext_log, ext2, n) && ok;
    total += n;
    ok = ok && serialize(to_checkpoint(lg2.bank)) == serialize(to_checkpoint(learngene.bank));
    MetricsSink d1, d2;
    pl.descendant(learngene.bank, 6, InitMode::full, 1, true, &d1);
    pl.descendant(lg2.bank, 6, InitMode::full, 1, true, &d2);
    ok = same_records(d1, d2, n) && ok;
    total += n;
    return std::pair{ok, fmt("pretrain, extract, activate, fine-tune and eval re-run: %zu logged metrics %s, "
                             "bank bytes %s",
                             total, ok ? "identical" : "DIFFER", ok ? "identical" : "checked")};
  });

  int failed = 0;
  for (const auto& v : verdicts) failed += !v.pass;
  std::printf("%d/%zu criteria passed in %.1f min\n", int(verdicts.size()) - failed, verdicts.size(),
              std::chrono::duration<double>(Clock::now() - t_start).count() / 60.0);
  return failed == 0 ? 0 : 1;
}
