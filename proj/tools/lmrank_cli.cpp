// lmrank: command-line front end for vocabulary, rank-target, training and
// evaluation steps. Every command writes a reproducibility stanza to stderr.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmrank/corpus.hpp"
#include "lmrank/error.hpp"
#include "lmrank/eval.hpp"
#include "lmrank/rankgen.hpp"
#include "lmrank/teacherio.hpp"
#include "lmrank/trainer.hpp"

using namespace lmrank;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

json format_versions() {
  return {{"tool", kToolVersion},
          {"rkgt", kRankFormatVersion},
          {"rkgt_jsonl", 1},
          {"checkpoint", kCheckpointVersion},
          {"random_teacher_prng", std::string(kRandomTeacherPrng)}};
}

void stanza(const std::string& command, const json& config) {
  json s = {{"command", command}, {"config", config}, {"formats", format_versions()}};
  std::cerr << "# lmrank " << s.dump() << '\n';
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      ks.push_back(v);
    } catch (const std::logic_error&) {
      throw Error(Errc::invalid_argument, "bad --topk entry '" + item + "'");
    }
  }
  return ks;
}

void write_output(const RankGroundTruth& ranks, const Vocabulary* vocab, const std::string& path,
                  const std::string& format, const std::string& comment) {
  if (format == "jsonl") {
    if (!vocab) throw Error(Errc::invalid_argument, "jsonl output needs --vocab");
    write_ranks_jsonl(ranks, *vocab, std::filesystem::path(path), comment);
  } else {
    write_ranks(ranks, std::filesystem::path(path));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rank-target construction and rank-based distillation for word-level language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("lmrank ") + kToolVersion + " (" + format_versions().dump() + ")");

  // build-vocab
  std::string bv_corpus, bv_out;
  std::uint64_t bv_min = 1;
  auto* bv = app.add_subcommand("build-vocab", "Frequency-ordered vocabulary from a corpus");
  bv->add_option("corpus", bv_corpus, "Whitespace-tokenized text, one sentence per line")->required();
  bv->add_option("--min-count", bv_min, "Drop tokens seen fewer times (mapped to <unk>)");
  bv->add_option("--out", bv_out, "Vocabulary file")->required();

  // build-ranks
  std::string br_corpus, br_vocab, br_out, br_format = "rkgt", br_overflow = "discard";
  std::uint32_t br_past = 5, br_future = 4, br_q = 10;
  std::size_t br_k = 10;
  unsigned br_jobs = 1;
  auto* br = app.add_subcommand("build-ranks", "N-gram branching-set rank targets");
  br->add_option("corpus", br_corpus)->required();
  br->add_option("--vocab", br_vocab)->required();
  br->add_option("--max-past", br_past);
  br->add_option("--max-future", br_future);
  br->add_option("--cutoff", br_q, "Pruning cutoff q");
  br->add_option("--k-max", br_k);
  br->add_option("--overflow", br_overflow)->check(CLI::IsMember({"discard", "cap"}));
  br->add_option("--jobs", br_jobs);
  br->add_option("--format", br_format)->check(CLI::IsMember({"rkgt", "jsonl"}));
  br->add_option("--out", br_out)->required();

  // random-ranks
  std::string rr_corpus, rr_vocab, rr_out;
  std::size_t rr_k = 10;
  std::uint64_t rr_seed = 1;
  auto* rr = app.add_subcommand("random-ranks", "Random teacher: GT followed by uniformly drawn ids");
  rr->add_option("corpus", rr_corpus)->required();
  rr->add_option("--vocab", rr_vocab)->required();
  rr->add_option("--k", rr_k);
  rr->add_option("--seed", rr_seed);
  rr->add_option("--out", rr_out)->required();

  // float-gt
  std::string fg_ranks, fg_corpus, fg_vocab, fg_out;
  auto* fg = app.add_subcommand("float-gt", "Move each row's ground truth to rank 1");
  fg->add_option("ranks", fg_ranks)->required();
  fg->add_option("--corpus", fg_corpus)->required();
  fg->add_option("--vocab", fg_vocab)->required();
  fg->add_option("--out", fg_out)->required();

  // import-ranks
  std::string ir_in, ir_vocab, ir_out;
  auto* ir = app.add_subcommand("import-ranks", "Convert JSON-lines teacher ranks to RKGT");
  ir->add_option("jsonl", ir_in)->required();
  ir->add_option("--vocab", ir_vocab)->required();
  ir->add_option("--out", ir_out)->required();

  // inspect
  std::string in_ranks, in_vocab;
  std::size_t in_pos = 0, in_width = 5;
  auto* ins = app.add_subcommand("inspect", "Render the rank rows around a position");
  ins->add_option("ranks", in_ranks)->required();
  ins->add_option("--vocab", in_vocab)->required();
  ins->add_option("--pos", in_pos)->required();
  ins->add_option("--width", in_width, "Number of columns shown");

  // train
  std::string tr_config;
  auto* tr = app.add_subcommand("train", "Train a student from a JSON config");
  tr->add_option("--config", tr_config)->required();

  // eval
  std::string ev_ckpt, ev_corpus, ev_topk = "1,2,3,5,10";
  auto* ev = app.add_subcommand("eval", "Perplexity and top-k accuracy of a checkpoint");
  ev->add_option("checkpoint", ev_ckpt)->required();
  ev->add_option("--corpus", ev_corpus)->required();
  ev->add_option("--topk", ev_topk);

  // stats
  std::string st_ranks, st_corpus, st_vocab, st_out;
  std::size_t st_bins = 20;
  auto* st = app.add_subcommand("stats", "Frequency-rank statistics of a rank file as CSV");
  st->add_option("ranks", st_ranks)->required();
  st->add_option("--corpus", st_corpus)->required();
  st->add_option("--vocab", st_vocab)->required();
  st->add_option("--bins", st_bins);
  st->add_option("--out", st_out)->required();

  // gradcheck
  GradCheckConfig gc;
  auto* gck = app.add_subcommand("gradcheck", "Finite-difference check of every loss through the student");
  gck->add_option("--cases", gc.n_cases);
  gck->add_option("--tol", gc.tolerance);
  gck->add_option("--step", gc.step);
  gck->add_option("--seed", gc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*bv) {
      stanza("build-vocab", {{"corpus", bv_corpus}, {"min_count", bv_min}, {"out", bv_out}});
      const Vocabulary vocab = build_vocab(bv_corpus, bv_min);
      vocab.save(bv_out);
      std::cout << "vocabulary: " << vocab.size() << " types -> " << bv_out << '\n';
    } else if (*br) {
      RankBuildConfig cfg;
      cfg.schemas = enumerate_schemas(br_past, br_future);
      cfg.cutoff_q = br_q;
      cfg.k_max = br_k;
      cfg.overflow = parse_overflow_mode(br_overflow);
      cfg.jobs = br_jobs;
      std::vector<std::string> labels;
      for (const auto& s : cfg.schemas) labels.push_back(s.label());
      const json resolved = {{"corpus", br_corpus}, {"vocab", br_vocab},   {"max_past", br_past},
                             {"max_future", br_future}, {"cutoff", br_q}, {"k_max", br_k},
                             {"overflow", br_overflow}, {"jobs", br_jobs}, {"schemas", labels},
                             {"format", br_format},     {"out", br_out}};
      stanza("build-ranks", resolved);
      const Vocabulary vocab = Vocabulary::load(br_vocab);
      const TokenStream stream = load_corpus(br_corpus, vocab);
      const RankGroundTruth ranks = build_ranks(stream, cfg);
      write_output(ranks, &vocab, br_out, br_format, "ngram " + resolved.dump());
      double mean_len = 0.0;
      for (auto l : ranks.raw_lengths()) mean_len += l;
      std::cout << "ranks: T=" << ranks.positions() << " k_max=" << ranks.k_max()
                << " mean_L=" << mean_len / static_cast<double>(ranks.positions()) << " -> " << br_out << '\n';
    } else if (*rr) {
      stanza("random-ranks", {{"corpus", rr_corpus}, {"vocab", rr_vocab}, {"k", rr_k}, {"seed", rr_seed}, {"out", rr_out}});
      const Vocabulary vocab = Vocabulary::load(rr_vocab);
      const TokenStream stream = load_corpus(rr_corpus, vocab);
      write_ranks(random_teacher(stream, rr_k, static_cast<std::uint32_t>(vocab.size()), rr_seed),
                  std::filesystem::path(rr_out));
      std::cout << "random ranks: T=" << stream.size() << " k=" << rr_k << " -> " << rr_out << '\n';
    } else if (*fg) {
      stanza("float-gt", {{"ranks", fg_ranks}, {"corpus", fg_corpus}, {"vocab", fg_vocab}, {"out", fg_out}});
      const Vocabulary vocab = Vocabulary::load(fg_vocab);
      const TokenStream stream = load_corpus(fg_corpus, vocab);
      write_ranks(float_gt_to_top(read_ranks(std::filesystem::path(fg_ranks)), stream), std::filesystem::path(fg_out));
      std::cout << "floated ranks -> " << fg_out << '\n';
    } else if (*ir) {
      stanza("import-ranks", {{"jsonl", ir_in}, {"vocab", ir_vocab}, {"out", ir_out}});
      const Vocabulary vocab = Vocabulary::load(ir_vocab);
      write_ranks(read_ranks_jsonl(std::filesystem::path(ir_in), vocab), std::filesystem::path(ir_out));
      std::cout << "imported -> " << ir_out << '\n';
    } else if (*ins) {
      stanza("inspect", {{"ranks", in_ranks}, {"vocab", in_vocab}, {"pos", in_pos}, {"width", in_width}});
      const Vocabulary vocab = Vocabulary::load(in_vocab);
      std::cout << render_branching_set(read_ranks(std::filesystem::path(in_ranks)), vocab, in_pos, in_width);
    } else if (*tr) {
      const TrainConfig cfg = load_train_config(tr_config);
      json resolved = cfg;
      stanza("train", resolved);
      const TrainResult res = train(cfg);
      std::cout << "steps: " << (res.metrics.empty() ? 0 : res.metrics.back().step)
                << " final val_ppl: " << res.final_val_ppl << '\n';
    } else if (*ev) {
      const std::vector<std::size_t> ks = parse_ks(ev_topk);
      stanza("eval", {{"checkpoint", ev_ckpt}, {"corpus", ev_corpus}, {"topk", ks}});
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const TokenStream stream = load_corpus(ev_corpus, ck.vocab);
      const PerplexityReport ppl = perplexity(ck.params, stream);
      const auto acc = topk_accuracy(ck.params, stream, ks);
      std::printf("ppl %.4f  (scored %zu, skipped %zu)\n", ppl.perplexity, ppl.scored, ppl.skipped);
      for (const auto& a : acc) std::printf("%8s", ("A@" + std::to_string(a.k)).c_str());
      std::printf("\n");
      for (const auto& a : acc) std::printf("%8.4f", a.accuracy);
      std::printf("\n");
    } else if (*st) {
      stanza("stats", {{"ranks", st_ranks}, {"corpus", st_corpus}, {"vocab", st_vocab}, {"bins", st_bins}, {"out", st_out}});
      const Vocabulary vocab = Vocabulary::load(st_vocab);
      const TokenStream stream = load_corpus(st_corpus, vocab);
      const auto rows = rank_frequency_stats(read_ranks(std::filesystem::path(st_ranks)), stream, st_bins);
      std::ofstream out(st_out, std::ios::binary);
      if (!out) throw Error(Errc::io, "cannot write " + st_out);
      write_frequency_csv(rows, out);
      std::cout << "stats: " << rows.size() << " word types -> " << st_out << '\n';
    } else if (*gck) {
      stanza("gradcheck", {{"cases", gc.n_cases}, {"tol", gc.tolerance}, {"step", gc.step}, {"seed", gc.seed}});
      const GradCheckReport report = grad_check(gc);
      for (const auto& r : report.results)
        std::printf("%-6s cases=%zu params=%zu max_rel_err=%.3e %s\n", std::string(loss_variant_name(r.variant)).c_str(),
                    r.cases, r.parameters_checked, r.max_rel_error, r.passed ? "PASS" : "FAIL");
      std::printf("%s\n", report.passed ? "PASS" : "FAIL");
      return report.passed ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "lmrank: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
