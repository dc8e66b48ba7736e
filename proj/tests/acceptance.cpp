// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero if
// any criterion fails. Tolerances and limits are fixed below.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "fsmt/analysis.hpp"
#include "fsmt/cli.hpp"
#include "fsmt/dataset.hpp"
#include "fsmt/evaluation.hpp"
#include "fsmt/fewshot.hpp"
#include "fsmt/generation.hpp"
#include "fsmt/metrics.hpp"
#include "fsmt/templates.hpp"
#include "mock_server.hpp"
#include "test_util.hpp"

using namespace fsmt;
namespace fs = std::filesystem;
namespace ft = fsmt::testing;
using nlohmann::json;

namespace {

constexpr double kMetricTol = 0.01;           // absolute, on the 0-100 scale
constexpr double kTemplateSeconds = 5.0;
constexpr double kMetricSeconds = 5.0;
constexpr double kPipelineSeconds = 60.0;
constexpr double kChi2Crit5 = 20.515;         // chi-square, 5 dof, p = 0.001
constexpr int kRoundTrips = 10'000;
constexpr int kMonotoneCases = 10'000;
constexpr int kMixtureDraws = 60'000;
constexpr int kExclusionCases = 100'000;

/// Thrown by `require` to fail a criterion with a reason.
struct Unmet : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Unmet(what);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 2) { return csv::fmt(v, digits); }

double chi_square(const std::vector<std::size_t>& counts, const std::vector<double>& p) {
  double n = 0, x = 0;
  for (auto c : counts) n += static_cast<double>(c);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * p[i];
    x += (static_cast<double>(counts[i]) - e) * (static_cast<double>(counts[i]) - e) / e;
  }
  return x;
}

ParallelSegment seg(const std::string& id, double b, double f, double r) {
  ParallelSegment s;
  s.id = id;
  s.pair = {"de", "en"};
  s.src_text = "src " + id;
  s.tgt_text = "tgt " + id;
  s.bicleaner = b;
  s.kiwi_fwd = f;
  s.kiwi_rev = r;
  return s;
}

std::vector<ParallelSegment> make_pool(std::size_t n) {
  std::vector<ParallelSegment> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(seg("p" + std::to_string(i), 0.9, 0.9, 0.9));
  return v;
}

std::vector<InstructionRecord> numbered_records(std::size_t n) {
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    PromptSpec spec;
    spec.src_name = "German";
    spec.tgt_name = "English";
    spec.source = "Satz Nummer " + std::to_string(i) + ".";
    InstructionRecord r;
    r.prompt = render(spec);
    r.pair = {"de", "en"};
    r.segment_id = "seg-" + std::to_string(i);
    r.completion = "Sentence number " + std::to_string(i) + ".";
    r.split = Split::Test;
    out.push_back(r);
  }
  return out;
}

std::map<std::string, std::string> numbered_lookup(std::size_t n) {
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < n; ++i) m["Satz Nummer " + std::to_string(i) + "."] = "Sentence number " + std::to_string(i) + ".";
  return m;
}

EndpointConfig fast_endpoint(const std::string& url) {
  EndpointConfig ep;
  ep.url = url;
  ep.max_attempts = 4;
  ep.backoff_initial = std::chrono::milliseconds(1);
  ep.backoff_max = std::chrono::milliseconds(4);
  ep.timeout = std::chrono::seconds(5);
  ep.concurrency = 4;
  return ep;
}

// --- criteria ------------------------------------------------------------------

std::string templates() {
  const auto t0 = std::chrono::steady_clock::now();
  auto spec = [](TemplateId id) {
    PromptSpec s;
    s.tmpl = id;
    s.src_name = "German";
    s.tgt_name = "English";
    s.source = "Hallo Welt";
    if (id != TemplateId::ZeroShot) s.shots = {{"Guten Morgen.", "Good morning."}, {"Wie geht es dir?", "How are you?"}};
    return s;
  };
  for (auto [id, file] : {std::pair{TemplateId::ZeroShot, "zero_shot.txt"}, {TemplateId::FewShot1, "few_shot_1.txt"},
                          {TemplateId::FewShot2, "few_shot_2.txt"}, {TemplateId::FewShot3, "few_shot_3.txt"}}) {
    require(render(spec(id)) == read_file(ft::golden(file)), std::string("render differs from ") + file);
  }
  Rng rng(2024);
  const std::vector<std::string> names{"German", "English", "Portuguese", "Chinese", "Russian"};
  const std::vector<std::string> pieces{"a", "Z", " ", ".", ",", ":", "?", "\"", "\t", "7", "ä", "ß", "中", "ж",
                                        "Source: ", "Target:", "Example 2", "Translate"};
  auto text = [&](std::size_t max_len) {
    std::string s;
    for (auto n = 1 + uniform_below(rng, max_len); n > 0; --n) s += pieces[uniform_below(rng, pieces.size())];
    return s;
  };
  const TemplateId ids[] = {TemplateId::ZeroShot, TemplateId::FewShot1, TemplateId::FewShot2, TemplateId::FewShot3};
  for (int i = 0; i < kRoundTrips; ++i) {
    PromptSpec s;
    s.tmpl = ids[uniform_below(rng, 4)];
    s.src_name = names[uniform_below(rng, names.size())];
    s.tgt_name = names[uniform_below(rng, names.size())];
    s.source = text(40);
    if (s.tmpl != TemplateId::ZeroShot) {
      for (auto k = 1 + uniform_below(rng, kMaxShots); k > 0; --k) s.shots.push_back({text(30), text(30)});
    }
    require(parse(render(s)) == s, "round trip failed at case " + std::to_string(i));
  }
  const double dt = seconds_since(t0);
  require(dt < kTemplateSeconds, "took " + fmt(dt) + " s");
  return "4 goldens byte-exact, " + std::to_string(kRoundTrips) + " round trips, " + fmt(dt) + " s";
}

std::string metrics() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto g = json::parse(read_file(ft::fixture("metric_goldens.json")));
  double worst = 0;
  std::size_t compared = 0;
  auto check = [&](double got, double want, const std::string& what) {
    worst = std::max(worst, std::abs(got - want));
    ++compared;
    require(std::abs(got - want) <= kMetricTol, what + ": " + fmt(got, 4) + " vs " + fmt(want, 4));
  };
  for (const std::string pair : {"en-de", "pt-en", "ru-en"}) {
    const auto [hyps, refs] = ft::read_pairs(ft::fixture("metrics_" + pair + ".tsv"));
    require(hyps.size() == 50, pair + " fixture size");
    const auto& c = g["corpora"][pair];
    check(corpus_bleu(hyps, refs).score, c["corpus_bleu"], pair + " corpus BLEU");
    check(chrf(hyps, refs), c["chrf"], pair + " chrF");
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      check(sentence_bleu(hyps[i], refs[i]), c["sentence_bleu"][i], pair + " sentence BLEU " + std::to_string(i));
      check(sentence_chrf(hyps[i], refs[i]), c["sentence_chrf"][i], pair + " sentence chrF " + std::to_string(i));
    }
  }
  const std::vector<std::string> same{"the cat sat on the mat", "prices rose by 2.7% in March"};
  const std::vector<std::string> h{"xyz qrs"}, r{"abc def"};
  require(corpus_bleu(same, same).score == 100.0, "identity BLEU is not exactly 100");
  require(sentence_bleu(same[0], same[0]) == 100.0, "identity sentence BLEU is not exactly 100");
  require(corpus_bleu(h, r).score == 0.0, "zero-overlap BLEU is not exactly 0");
  require(chrf(same, same) == 100.0, "identity chrF is not exactly 100");
  const double dt = seconds_since(t0);
  require(dt < kMetricSeconds, "took " + fmt(dt) + " s");
  return std::to_string(compared) + " values, max |diff| " + fmt(worst, 4) + " <= " + fmt(kMetricTol) +
         ", forced cases exact, " + fmt(dt) + " s";
}

std::string filtering() {
  const auto segs = read_segments_file(ft::source_dir() / "data" / "sample_corpus.tsv");
  require(segs.size() == 1000, "sample corpus has " + std::to_string(segs.size()) + " segments");
  const FilterConfig cfg;  // 0.85 / 0.80 / 0.80, inclusive
  std::vector<std::string> kept;
  for (const auto& s : segs) {
    if (filter_segment(s, cfg).keep) kept.push_back(s.id);
  }
  std::sort(kept.begin(), kept.end());
  const auto expected = read_lines(ft::source_dir() / "data" / "sample_corpus.survivors.txt");
  require(kept == expected, "survivors differ: " + std::to_string(kept.size()) + " vs " + std::to_string(expected.size()));

  Rng rng(7);
  auto score = [&] { return static_cast<double>(uniform_below(rng, 101)) / 100.0; };
  for (int i = 0; i < kMonotoneCases; ++i) {
    auto s = seg("m" + std::to_string(i), score(), score(), score());
    const bool before = filter_segment(s, cfg).keep;
    const auto which = uniform_below(rng, 3);
    auto& field = which == 0 ? s.bicleaner : which == 1 ? s.kiwi_fwd : s.kiwi_rev;
    *field = std::min(1.0, *field + static_cast<double>(uniform_below(rng, 50)) / 100.0);
    require(!before || filter_segment(s, cfg).keep, "raising a score dropped " + s.id);
  }
  return std::to_string(kept.size()) + " of 1000 survive as planted, monotone over " + std::to_string(kMonotoneCases);
}

std::string mixing() {
  const auto pool = make_pool(50);
  std::string detail;
  for (auto variant : {MixtureVariant::Balanced, MixtureVariant::Unbalanced}) {
    const MixturePolicy policy{variant};
    Rng rng(42);
    std::vector<std::size_t> counts(kMaxShots + 1, 0);
    for (int i = 0; i < kMixtureDraws; ++i) ++counts[draw_training_shots(policy, pool, "p0", rng).n_shots];
    const auto x2 = chi_square(counts, shot_count_distribution(policy));
    require(x2 < kChi2Crit5, std::string(to_string(variant)) + " chi-square " + fmt(x2));
    detail += std::string(to_string(variant)) + " chi2=" + fmt(x2) + ", ";
    if (variant == MixtureVariant::Unbalanced) {
      detail += "P(0)=" + fmt(static_cast<double>(counts[0]) / kMixtureDraws, 4) + ", ";
    }
  }
  Rng rng(8);
  for (int i = 0; i < kExclusionCases; ++i) {
    const auto size = 6 + uniform_below(rng, 20);
    const auto pool_i = make_pool(size);
    const auto target = "p" + std::to_string(uniform_below(rng, size));
    const auto d = draw_training_shots(MixturePolicy{MixtureVariant::Balanced}, pool_i, target, rng);
    require(std::count(d.examples.begin(), d.examples.end(), target) == 0, "target drawn as its own shot");
    require(std::set<std::string>(d.examples.begin(), d.examples.end()).size() == d.examples.size(), "repeated shot");
  }
  return detail + "critical " + fmt(kChi2Crit5, 3) + ", exclusion holds over " + std::to_string(kExclusionCases);
}

std::string hallucination() {
  const auto evals = read_evaluations(ft::fixture("hallucination_evals.csv"));
  const auto paired = pair_bleu(evals);
  require(paired.size() == 100, "expected 100 paired segments");
  const auto rep = hallucination_rate(paired);
  const auto* all = rep.find("all", "ft-7b");
  require(all != nullptr, "no overall group");
  require(format_rate(all->rate()) == "2.00%", "rate " + format_rate(all->rate()));
  std::vector<std::string> ids;
  for (const auto& p : rep.flagged) ids.push_back(p.segment_id);
  require(ids == std::vector<std::string>{"seg-017", "seg-063"}, "unexpected flagged set");
  for (const auto& p : paired) {
    if (p.segment_id == "seg-030") {
      require(p.zero_bleu == 30.0 && p.few_bleu == 3.0, "boundary fixture row changed");
      require(!is_hallucination(p, rep.thresholds), "boundary case (30, 3) flagged");
    }
  }
  const auto table = hallucination_table(rep);
  require(table.header == csv::Row{"Domain", "ft-7b"}, "header is not Domain x systems");
  std::vector<std::string> domains;
  for (const auto& r : table.rows) domains.push_back(r[0]);
  require(domains == std::vector<std::string>{"Flores", "Medical", "Law", "Tico", "Chat", "All"}, "domain rows");
  require(table.rows.back()[1] == "2.00%", "All row reads " + table.rows.back()[1]);
  return "rate 2.00%, flagged seg-017 and seg-063, (30, 3) not flagged, 6x2 table";
}

std::string postprocessing() {
  const auto ex = json::parse(read_file(ft::fixture("overgeneration_example.json")));
  const auto pp = postprocess(ex["pretrained_raw"].get<std::string>(), GenerationMode::Pretrained);
  require(pp.translation == ex["expected_translation"].get<std::string>(), "first-line truncation differs");
  require(pp.finish == Finish::NewlineTruncated, "pretrained output not marked as truncated");

  const auto records = numbered_records(30);
  std::vector<std::pair<std::string, std::vector<GenerationResult>>> systems;
  for (auto style : {mock::Style::Finetuned, mock::Style::Pretrained}) {
    const bool finetuned = style == mock::Style::Finetuned;
    ft::TempDir dir(finetuned ? "acc-ft" : "acc-pt");
    mock::MockOptions opt;
    opt.style = style;
    opt.translations = numbered_lookup(30);
    mock::MockServer server(opt);
    server.start();
    DecodingConfig dec;
    dec.mode = finetuned ? GenerationMode::Finetuned : GenerationMode::Pretrained;
    BatchOptions bo;
    bo.output = dir / "gen.jsonl";
    run_batch(records, fast_endpoint(server.url()), dec, bo);
    systems.emplace_back(finetuned ? "finetuned" : "pretrained", read_generations(bo.output));
  }
  std::vector<std::size_t> ref_lengths;
  for (const auto& r : records) ref_lengths.push_back(count_whitespace_tokens(r.completion));
  const auto a = length_distribution(systems, ref_lengths);
  const auto ft_ratio = a.summary[1].overgeneration_ratio, pt_ratio = a.summary[2].overgeneration_ratio;
  require(ft_ratio && *ft_ratio == 0.0, "finetuned ratio is not 0.0");
  require(pt_ratio && *pt_ratio == 1.0, "pretrained ratio is not 1.0");
  return "example truncated to its first line, overgeneration ratio 0.0 (EOS) and 1.0 (pretrained)";
}

struct CliRun {
  int code;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fsmt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, err.str()};
}

/// Every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& root, const std::vector<fs::path>& files) {
  std::map<std::string, std::string> out;
  for (const auto& f : files) {
    if (fs::is_directory(f)) {
      for (const auto& e : fs::recursive_directory_iterator(f)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
      }
    } else {
      out[fs::relative(f, root).string()] = read_file(f);
    }
  }
  return out;
}

std::string determinism() {
  const auto t0 = std::chrono::steady_clock::now();
  ft::TempDir dir("acc-pipeline");
  const auto d = dir.path();
  const auto src = ft::source_dir() / "data";
  const auto cfg = d / "config.json";
  write_file_atomic(cfg, json{{"seed", 20240601},
                              {"filter", {{"input", (src / "sample_corpus.tsv").string()},
                                          {"output_dir", (d / "pools").string()},
                                          {"example_pool_size", 40}}},
                              {"build_train", {{"pools", (d / "pools").string()},
                                               {"output", (d / "train.jsonl").string()},
                                               {"n_records", 2000}}},
                              {"build_eval", {{"test", (src / "sample_test.tsv").string()},
                                              {"dev", (src / "sample_dev.tsv").string()},
                                              {"output", (d / "eval.jsonl").string()}}}}
                             .dump(2));
  const auto c = cfg.string();

  mock::MockOptions opt;
  opt.style = mock::Style::Pretrained;
  mock::MockServer server(opt);
  server.start();

  const std::vector<std::pair<std::vector<std::string>, std::vector<fs::path>>> stages{
      {{"filter", "-c", c}, {d / "pools"}},
      {{"build-train", "-c", c}, {d / "train.jsonl", d / "train.jsonl.run_record.json"}},
      {{"build-eval", "-c", c}, {d / "eval.jsonl", d / "eval.jsonl.run_record.json"}},
  };
  std::size_t compared = 0;
  auto run_twice = [&](const std::vector<std::string>& args, const std::vector<fs::path>& outputs) {
    auto r = cli(args);
    require(r.code == 0, args[0] + " exited " + std::to_string(r.code) + ": " + r.err);
    const auto first = snapshot(d, outputs);
    r = cli(args);
    require(r.code == 0, args[0] + " rerun exited " + std::to_string(r.code));
    const auto second = snapshot(d, outputs);
    require(first == second, args[0] + " outputs differ between runs");
    compared += first.size();
  };
  for (const auto& [args, outputs] : stages) run_twice(args, outputs);

  const auto train = read_records(d / "train.jsonl");
  require(train.size() == 2000, "training set has " + std::to_string(train.size()) + " records");

  auto r = cli({"generate", "-c", c, "--seed", "20240601", "-i", (d / "eval.jsonl").string(), "-o",
                (d / "gens.jsonl").string(), "--url", server.url(), "--concurrency", "4"});
  require(r.code == 0, "generate exited " + std::to_string(r.code) + ": " + r.err);
  for (int k : {0, 5}) {
    r = cli({"score", "-c", c, "--eval", (d / "eval.jsonl").string(), "--generations", (d / "gens.jsonl").string(),
             "--system", "mock-7b", "--domain", "Sample", "--shots", std::to_string(k), "-o", (d / "scores").string()});
    require(r.code == 0, "score exited " + std::to_string(r.code) + ": " + r.err);
  }
  run_twice({"analyze", "-c", c, "--evals", (d / "scores" / "mock-7b.0shot.segments.csv").string(),
             (d / "scores" / "mock-7b.5shot.segments.csv").string(), "-o", (d / "reports").string(), "--hallucination",
             "--deltas", "--lengths", "--aggregate", "--delta-metric", "chrf", "--generations",
             "mock-7b=" + (d / "gens.jsonl").string(), "--references", (d / "eval.jsonl").string()},
            {d / "reports"});
  for (const auto* f : {"hallucination.csv", "length_summary.csv", "aggregate_pivot.csv", "top_deltas.mock-7b.jsonl"}) {
    require(fs::exists(d / "reports" / f), std::string("missing report ") + f);
  }
  const double dt = seconds_since(t0);
  require(dt < kPipelineSeconds, "pipeline took " + fmt(dt) + " s");
  return std::to_string(compared) + " files byte-identical across reruns, 1000 segments -> " +
         std::to_string(train.size()) + " records -> " + std::to_string(server.requests()) + " requests -> reports in " +
         fmt(dt) + " s";
}

std::string manifests() {
  ft::TempDir dir("acc-manifest");
  require(cli({"manifest", "--seed", "0", "--method", "lora", "-o", (dir / "lora.json").string()}).code == 0, "lora");
  require(cli({"manifest", "--seed", "0", "--method", "full_ft", "-o", (dir / "full.json").string()}).code == 0, "full_ft");
  const auto l = json::parse(read_file(dir / "lora.json"));
  const auto f = json::parse(read_file(dir / "full.json"));
  require(l["lora_r"] == 256 && l["lora_alpha"] == 512, "LoRA rank/alpha");
  require(l["learning_rate"] == 2e-4 && l["warmup_steps"] == 500, "LoRA lr/warmup");
  require(l["dropout"] == 0.05 && l["batch_size"] == 8, "LoRA dropout/batch");
  require(f["learning_rate"] == 1e-6 && f["scheduler"] == "constant" && f["warmup_steps"] == 0, "full fine-tune");
  require(!f.contains("lora_r") || f["lora_r"].is_null(), "full fine-tune carries a LoRA rank");
  return "LoRA r=256 alpha=512 lr=2e-4 warmup=500 dropout=0.05 batch=8; full lr=1e-6 constant, no warmup";
}

std::string generation() {
  ft::TempDir dir("acc-batch");
  const auto records = numbered_records(100);
  mock::MockOptions opt;
  opt.rate_limit_modulus = 5;
  opt.rate_limit_times = 2;
  opt.fail_substring = "Satz Nummer 37.";
  opt.translations = numbered_lookup(100);
  mock::MockServer server(opt);
  server.start();
  DecodingConfig dec;
  dec.mode = GenerationMode::Finetuned;
  BatchOptions bo;
  bo.output = dir / "gen.jsonl";
  const auto s = run_batch(records, fast_endpoint(server.url()), dec, bo);
  require(s.ok == 99 && s.errors == 1 && !s.aborted, "first pass: " + std::to_string(s.ok) + " ok");
  require(server.rate_limited() > 0, "no 429s were injected");
  const auto rows = read_generations(bo.output);
  require(rows.size() == 100, "row count");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].index == i && rows[i].segment_id == records[i].segment_id, "order broken at " + std::to_string(i));
    require(rows[i].ok() == (i != 37), "unexpected status at row " + std::to_string(i));
  }
  server.heal();
  const auto before = server.requests();
  bo.resume = true;
  const auto again = run_batch(records, fast_endpoint(server.url()), dec, bo);
  require(again.ok == 100 && again.reused == 99, "resume: " + std::to_string(again.ok) + " ok");
  require(server.requests() - before == 1, "resume sent " + std::to_string(server.requests() - before) + " requests");
  const auto healed = read_generations(bo.output);
  require(healed[37].ok() && healed[37].translation == records[37].completion, "row 37 not completed");
  return "99 ok + 1 error in order (" + std::to_string(server.rate_limited()) +
         " 429s absorbed), resume sent 1 request and completed row 37";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<std::string()>>> criteria{
      {"template bit-exactness", templates},
      {"metric oracle equivalence", metrics},
      {"filtering recipe", filtering},
      {"mixing policies", mixing},
      {"hallucination analysis", hallucination},
      {"post-processing", postprocessing},
      {"determinism and desk pipeline", determinism},
      {"manifest fidelity", manifests},
      {"generation client", generation},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    std::string line;
    try {
      line = "PASS  " + name + ": " + check();
    } catch (const std::exception& e) {
      ++failed;
      line = "FAIL  " + name + ": " + e.what();
    }
    std::cout << line << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
