#pragma once

// The `fsmt` command line: one subcommand per pipeline stage, a JSON config
// file, and a run record written next to every output.
//
// Settings resolve as flags > config file > defaults. The resolved settings
// for the chosen subcommand are hashed; two runs with the same hash and the
// same inputs produce byte-identical files (generation excepted).

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsmt/analysis.hpp"
#include "fsmt/common.hpp"
#include "fsmt/corpus.hpp"
#include "fsmt/dataset.hpp"
#include "fsmt/evaluation.hpp"
#include "fsmt/fewshot.hpp"
#include "fsmt/generation.hpp"
#include "fsmt/metrics.hpp"

namespace fsmt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kRunRecordSchemaVersion = 1;
inline constexpr int kRecordSchemaVersion = 1;  // instruction / generation JSONL rows

/// A config or flag problem; `pointer` is a JSON pointer into the resolved
/// settings (or a flag name).
class ValidationError : public Error {
 public:
  ValidationError(std::string pointer, const std::string& msg)
      : Error("invalid_config", pointer + ": " + msg), pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

// ---------------------------------------------------------------------------
// Defaults

inline const json& defaults() {
  static const json d = json::parse(R"({
    "filter": {"input": null, "output_dir": null, "bicleaner_min": 0.85, "kiwi_min": 0.80,
               "per_pair_cap": 250000, "example_pool_size": 5000, "strict": false},
    "build_train": {"pools": null, "output": null, "n_records": null, "mixture": "balanced",
                    "max_shots": 5, "template": "few_shot_2"},
    "build_eval": {"test": null, "dev": null, "output": null, "shots": [0, 5], "template": "few_shot_2",
                   "strip_references": false, "split": "test"},
    "generate": {"input": null, "output": null, "resume": false,
                 "endpoint": {"url": "http://127.0.0.1:8000", "path": "/v1/completions", "model": "",
                              "auth_env": "FSMT_API_KEY", "max_attempts": 5, "backoff_initial_ms": 500,
                              "backoff_max_ms": 8000, "timeout_s": 120, "concurrency": 8},
                 "decoding": {"max_tokens": 512, "temperature": 0.0, "mode": "pretrained", "stop": null}},
    "score": {"eval": null, "generations": null, "neural": null, "system": null, "domain": "",
              "shots": null, "output_dir": null},
    "analyze": {"evals": null, "output_dir": null, "hallucination": false, "deltas": false, "lengths": false,
                "aggregate": false, "hallucination_hi": 30.0, "hallucination_lo": 3.0, "delta_metric": "comet",
                "top_k": 20, "bin_width": 1.0, "zero_shots": 0, "few_shots": 5,
                "group_by": ["pair", "system", "shots"], "generations": {}, "references": null},
    "manifest": {"method": "lora", "lora_r": null, "output": null}
  })");
  return d;
}

inline std::string section_key(std::string_view subcommand) {
  std::string s(subcommand);
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

/// Overlays `over` onto `base`. Objects merge key by key; anything else
/// replaces. Keys missing from `base` are rejected so typos surface.
inline void merge_into(json& base, const json& over, const std::string& pointer) {
  if (!over.is_object()) throw ValidationError(pointer, "expected an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const auto child = pointer + "/" + it.key();
    if (!base.contains(it.key())) throw ValidationError(child, "unknown setting");
    auto& slot = base[it.key()];
    // "generations" is a free-form name -> path map.
    if (slot.is_object() && it.key() != "generations") {
      merge_into(slot, it.value(), child);
    } else {
      slot = it.value();
    }
  }
}

// ---------------------------------------------------------------------------
// Typed access with pointer-carrying errors

class Settings {
 public:
  Settings(json root, std::string section) : root_(std::move(root)), section_(std::move(section)) {}

  const json& root() const { return root_; }
  std::string ptr(const std::string& rel) const { return "/" + section_ + "/" + rel; }

  const json& at(const std::string& rel) const {
    const json::json_pointer p(ptr(rel));
    if (!root_.contains(p)) throw ValidationError(ptr(rel), "missing");
    return root_.at(p);
  }

  bool present(const std::string& rel) const { return !at(rel).is_null(); }

  std::string str(const std::string& rel) const {
    const auto& v = at(rel);
    if (v.is_null()) throw ValidationError(ptr(rel), "required");
    if (!v.is_string()) throw ValidationError(ptr(rel), "expected a string");
    return v.get<std::string>();
  }

  std::optional<std::string> opt_str(const std::string& rel) const {
    if (!present(rel)) return std::nullopt;
    return str(rel);
  }

  double number(const std::string& rel, double lo, double hi) const {
    const auto& v = at(rel);
    if (v.is_null()) throw ValidationError(ptr(rel), "required");
    if (!v.is_number()) throw ValidationError(ptr(rel), "expected a number");
    const double d = v.get<double>();
    if (!(d >= lo && d <= hi)) {
      throw ValidationError(ptr(rel), "must lie in [" + csv::fmt(lo, 4) + ", " + csv::fmt(hi, 4) + "]");
    }
    return d;
  }

  std::uint64_t count(const std::string& rel, std::uint64_t lo = 0,
                      std::uint64_t hi = std::numeric_limits<std::uint64_t>::max()) const {
    const auto& v = at(rel);
    if (v.is_null()) throw ValidationError(ptr(rel), "required");
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ValidationError(ptr(rel), "expected a non-negative integer");
    }
    const auto n = v.get<std::uint64_t>();
    if (n < lo || n > hi) throw ValidationError(ptr(rel), "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return n;
  }

  bool flag(const std::string& rel) const {
    const auto& v = at(rel);
    if (!v.is_boolean()) throw ValidationError(ptr(rel), "expected true or false");
    return v.get<bool>();
  }

  std::string choice(const std::string& rel, std::initializer_list<std::string_view> allowed) const {
    const auto s = str(rel);
    for (auto a : allowed) {
      if (s == a) return s;
    }
    std::string list;
    for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
    throw ValidationError(ptr(rel), "must be one of: " + list);
  }

  fs::path input_file(const std::string& rel) const {
    const fs::path p = str(rel);
    if (!fs::is_regular_file(p)) throw ValidationError(ptr(rel), "input file not found: " + p.string());
    return p;
  }

  fs::path input_dir(const std::string& rel) const {
    const fs::path p = str(rel);
    if (!fs::is_directory(p)) throw ValidationError(ptr(rel), "input directory not found: " + p.string());
    return p;
  }

  fs::path output_path(const std::string& rel) const {
    const fs::path p = str(rel);
    if (p.empty()) throw ValidationError(ptr(rel), "empty path");
    if (fs::is_directory(p)) throw ValidationError(ptr(rel), "is a directory: " + p.string());
    return p;
  }

  fs::path output_dir(const std::string& rel) const {
    const fs::path p = str(rel);
    if (p.empty()) throw ValidationError(ptr(rel), "empty path");
    if (fs::exists(p) && !fs::is_directory(p)) throw ValidationError(ptr(rel), "exists and is not a directory");
    return p;
  }

 private:
  json root_;
  std::string section_;
};

// ---------------------------------------------------------------------------
// Run records

inline std::string config_hash(const json& resolved) { return "fnv1a64:" + hex64(fnv1a64(resolved.dump())); }

struct RunResult {
  std::vector<fs::path> record_paths;            // where to write the run record
  std::vector<std::pair<std::string, std::size_t>> outputs;  // file -> rows
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  std::vector<std::string> warnings;
  int exit_code = kExitOk;
};

inline std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

inline void write_run_record(const std::string& subcommand, const json& resolved, const RunResult& r) {
  nlohmann::ordered_json rec;
  rec["schema_version"] = kRunRecordSchemaVersion;
  rec["tool"] = "fsmt";
  rec["version"] = kVersion;
  rec["subcommand"] = subcommand;
  rec["config_hash"] = config_hash(resolved);
  rec["seed"] = resolved.at("seed");
  rec["versions"] = {{"config_schema", kConfigSchemaVersion},
                     {"record_schema", kRecordSchemaVersion},
                     {"manifest_schema", kManifestSchemaVersion},
                     {"bleu", bleu_signature({})},
                     {"chrf", chrf_signature()}};
  rec["config"] = resolved;
  nlohmann::ordered_json outs = nlohmann::ordered_json::array();
  for (const auto& [file, rows] : r.outputs) outs.push_back({{"path", file}, {"rows", rows}});
  rec["outputs"] = outs;
  rec["counts"] = r.counts;
  rec["warnings"] = r.warnings;
  for (const auto& p : r.record_paths) write_file_atomic(p, rec.dump(2) + "\n");
}

/// Records land beside outputs: `<dir>/run_record.json` for directory
/// outputs, `<file>.run_record.json` for single files.
inline fs::path record_for_dir(const fs::path& dir) { return dir / "run_record.json"; }
inline fs::path record_for_file(const fs::path& file) {
  auto p = file;
  p += ".run_record.json";
  return p;
}

inline LanguageNames language_names(const json& resolved) {
  LanguageNames names;
  if (resolved.contains("languages")) {
    const auto& l = resolved.at("languages");
    if (!l.is_object()) throw ValidationError("/languages", "expected an object of code -> name");
    for (auto it = l.begin(); it != l.end(); ++it) {
      if (!is_valid_lang_code(it.key())) throw ValidationError("/languages/" + it.key(), "invalid language code");
      if (!it.value().is_string() || it.value().get<std::string>().empty()) {
        throw ValidationError("/languages/" + it.key(), "expected a nonempty name");
      }
      names.set(it.key(), it.value().get<std::string>());
    }
  }
  return names;
}

// ---------------------------------------------------------------------------
// Subcommands

inline RunResult run_filter(const Settings& s, std::uint64_t seed, std::ostream& log) {
  FilterConfig cfg;
  cfg.bicleaner_min = s.number("bicleaner_min", 0, 1);
  cfg.kiwi_min = s.number("kiwi_min", 0, 1);
  cfg.per_pair_cap = s.count("per_pair_cap", 1);
  cfg.example_pool_size = s.count("example_pool_size");
  cfg.strict = s.flag("strict");
  cfg.seed = seed;
  const auto input = s.input_file("input");
  const auto out_dir = s.output_dir("output_dir");
  try {
    corpus_format_for(input);
  } catch (const Error& e) {
    throw ValidationError(s.ptr("input"), e.what());
  }

  PoolBuilder builder(cfg);
  std::ifstream in(input, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + input.string());
  read_segments(in, corpus_format_for(input), [&](ParallelSegment&& seg) { builder.add(seg); });
  const auto pools = std::move(builder).finish();

  fs::create_directories(out_dir);
  // Stale pool files from an earlier run would be picked up by build-train.
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const auto name = entry.path().filename().string();
    if (name.ends_with(".train.jsonl") || name.ends_with(".examples.jsonl")) fs::remove(entry.path());
  }
  write_pools(out_dir, pools);

  RunResult r;
  std::string warnings;
  for (const auto& w : pools.warnings) {
    warnings += warning_to_jsonl(w) + "\n";
    r.warnings.push_back(w.code + " " + w.pair + ": " + w.detail);
    log << "warning: " << w.code << " " << w.pair << ": " << w.detail << "\n";
  }
  write_file_atomic(out_dir / "warnings.jsonl", warnings);
  nlohmann::ordered_json per_pair = nlohmann::ordered_json::object();
  for (const auto& [pair, p] : pools.pairs) {
    r.outputs.push_back({(out_dir / (pair.key() + ".train.jsonl")).string(), p.training.size()});
    r.outputs.push_back({(out_dir / (pair.key() + ".examples.jsonl")).string(), p.examples.size()});
    per_pair[pair.key()] = {{"seen", p.seen}, {"survived", p.survived}, {"training", p.training.size()},
                            {"examples", p.examples.size()}};
  }
  r.outputs.push_back({(out_dir / "warnings.jsonl").string(), pools.warnings.size()});
  nlohmann::ordered_json dropped = nlohmann::ordered_json::object();
  for (const auto& [reason, n] : pools.stats.dropped) dropped[reason] = n;
  r.counts = {{"seen", pools.stats.seen}, {"kept", pools.stats.kept}, {"dropped", dropped}, {"pairs", per_pair}};
  r.record_paths.push_back(record_for_dir(out_dir));
  log << "filter: " << pools.stats.kept << " of " << pools.stats.seen << " segments kept\n";
  return r;
}

inline RunResult run_build_train(const Settings& s, std::uint64_t seed, const LanguageNames& names,
                                 std::ostream& log) {
  TrainingSetOptions opt;
  opt.seed = seed;
  opt.n_records = s.count("n_records");
  opt.policy.variant = variant_from_string(s.choice("mixture", {"balanced", "unbalanced"}));
  opt.policy.max_shots = s.count("max_shots", 1, kMaxShots);
  const auto tmpl = s.choice("template", {"few_shot_1", "few_shot_2", "few_shot_3"});
  opt.few_shot_template = template_from_string(tmpl);
  const auto pools_dir = s.input_dir("pools");
  const auto output = s.output_path("output");

  const auto pools = read_pools(pools_dir);
  const auto records = build_training_set(pools, opt, names);
  write_records(output, records);

  RunResult r;
  r.outputs.push_back({output.string(), records.size()});
  std::vector<std::size_t> shots(opt.policy.max_shots + 1, 0);
  std::map<std::string, std::size_t> per_pair;
  for (const auto& rec : records) {
    ++shots[rec.n_shots];
    ++per_pair[rec.pair.key()];
  }
  r.counts = {{"records", records.size()}, {"shot_histogram", shots}, {"pairs", per_pair}};
  r.record_paths.push_back(record_for_file(output));
  log << "build-train: " << records.size() << " records\n";
  return r;
}

inline RunResult run_build_eval(const Settings& s, std::uint64_t seed, const LanguageNames& names,
                                std::ostream& log) {
  EvalSetOptions opt;
  opt.seed = seed;
  const auto& shots = s.at("shots");
  if (!shots.is_array() || shots.empty()) throw ValidationError(s.ptr("shots"), "expected a nonempty array");
  opt.shot_settings.clear();
  for (std::size_t i = 0; i < shots.size(); ++i) {
    if (!shots[i].is_number_unsigned() || shots[i].get<std::size_t>() > kMaxShots) {
      throw ValidationError(s.ptr("shots/" + std::to_string(i)), "expected an integer in [0, 5]");
    }
    opt.shot_settings.push_back(shots[i].get<std::size_t>());
  }
  opt.few_shot_template = template_from_string(s.choice("template", {"few_shot_1", "few_shot_2", "few_shot_3"}));
  opt.strip_references = s.flag("strip_references");
  opt.split = split_from_string(s.choice("split", {"train", "dev", "test"}));
  const auto test = s.input_file("test");
  const auto dev = s.input_file("dev");
  const auto output = s.output_path("output");

  const auto test_segs = read_segments_file(test);
  const auto dev_segs = read_segments_file(dev);
  const auto records = build_eval_set(test_segs, dev_segs, opt, names);
  write_records(output, records);

  RunResult r;
  r.outputs.push_back({output.string(), records.size()});
  r.counts = {{"test_segments", test_segs.size()}, {"dev_segments", dev_segs.size()}, {"records", records.size()}};
  r.record_paths.push_back(record_for_file(output));
  log << "build-eval: " << records.size() << " records\n";
  return r;
}

inline RunResult run_generate(const Settings& s, std::ostream& log) {
  EndpointConfig ep;
  ep.url = s.str("endpoint/url");
  if (ep.url.rfind("http://", 0) != 0 && ep.url.rfind("https://", 0) != 0) {
    throw ValidationError(s.ptr("endpoint/url"), "expected an http:// or https:// URL");
  }
  ep.path = s.str("endpoint/path");
  ep.model = s.str("endpoint/model");
  ep.auth_env = s.str("endpoint/auth_env");
  ep.max_attempts = static_cast<int>(s.count("endpoint/max_attempts", 1, 100));
  ep.backoff_initial = std::chrono::milliseconds(s.count("endpoint/backoff_initial_ms", 0, 600'000));
  ep.backoff_max = std::chrono::milliseconds(s.count("endpoint/backoff_max_ms", 0, 600'000));
  ep.timeout = std::chrono::seconds(s.count("endpoint/timeout_s", 1, 3600));
  ep.concurrency = s.count("endpoint/concurrency", 1, 256);
  DecodingConfig dec;
  dec.max_tokens = static_cast<int>(s.count("decoding/max_tokens", 1, 1'000'000));
  dec.temperature = s.number("decoding/temperature", 0, 10);
  dec.mode = mode_from_string(s.choice("decoding/mode", {"pretrained", "finetuned"}));
  if (s.present("decoding/stop")) {
    const auto& st = s.at("decoding/stop");
    if (!st.is_array()) throw ValidationError(s.ptr("decoding/stop"), "expected an array of strings or null");
    std::vector<std::string> stops;
    for (std::size_t i = 0; i < st.size(); ++i) {
      if (!st[i].is_string()) throw ValidationError(s.ptr("decoding/stop/" + std::to_string(i)), "expected a string");
      stops.push_back(st[i].get<std::string>());
    }
    dec.stop = stops;
  }
  const auto input = s.input_file("input");
  const auto output = s.output_path("output");
  BatchOptions bo;
  bo.output = output;
  bo.resume = s.flag("resume");
  bo.log = &log;

  const auto records = read_records(input);
  const auto summary = run_batch(records, ep, dec, bo);

  RunResult r;
  r.outputs.push_back({output.string(), summary.written});
  r.counts = {{"total", summary.total},   {"ok", summary.ok},           {"errors", summary.errors},
              {"reused", summary.reused}, {"retries", summary.retries}, {"aborted", summary.aborted}};
  if (summary.errors > 0) {
    r.warnings.push_back(std::to_string(summary.errors) + " error rows; rerun with --resume to retry them");
  }
  if (summary.aborted) {
    r.warnings.push_back("aborted: " + summary.abort_reason);
    log << "error: generation aborted: " << summary.abort_reason << "\n";
    r.exit_code = kExitRuntime;
  }
  r.record_paths.push_back(record_for_file(output));
  return r;
}

inline RunResult run_score(const Settings& s, std::ostream& log) {
  ScoringInput in;
  in.system = s.str("system");
  if (in.system.empty()) throw ValidationError(s.ptr("system"), "must be nonempty");
  in.domain = s.str("domain");
  in.shots = s.count("shots", 0, kMaxShots);
  const auto eval = s.input_file("eval");
  const auto gens = s.input_file("generations");
  std::optional<fs::path> neural;
  if (s.present("neural")) neural = s.input_file("neural");
  const auto out_dir = s.output_dir("output_dir");

  const auto records = read_records(eval);
  const auto generations = read_generations(gens);
  const auto scores = neural ? ingest_scores(*neural) : std::map<std::string, NeuralScores>{};
  const auto scored = score_condition(records, generations, scores, in);

  fs::create_directories(out_dir);
  const std::string stem = in.system + "." + std::to_string(in.shots) + "shot";
  const auto seg_path = out_dir / (stem + ".segments.csv");
  const auto rep_path = out_dir / (stem + ".metrics.csv");
  csv::write(seg_path, evaluations_to_table(scored.rows));
  const auto report = metric_report(scored, in);
  csv::write(rep_path, report);

  RunResult r;
  r.outputs.push_back({seg_path.string(), scored.rows.size()});
  r.outputs.push_back({rep_path.string(), report.rows.size()});
  r.counts = {{"scored", scored.rows.size()},
              {"skipped_error_rows", scored.skipped_errors},
              {"missing_neural", scored.missing_neural}};
  if (scored.skipped_errors) r.warnings.push_back(std::to_string(scored.skipped_errors) + " generation error rows skipped");
  if (scored.missing_neural) r.warnings.push_back(std::to_string(scored.missing_neural) + " rows without neural scores");
  auto rec = out_dir / (stem + ".run_record.json");
  r.record_paths.push_back(rec);
  log << "score: " << scored.rows.size() << " segments for " << in.system << " at " << in.shots << " shots\n";
  return r;
}

inline std::string safe_name(std::string s) {
  for (auto& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

inline RunResult run_analyze(const Settings& s, std::ostream& log) {
  const auto& evals_json = s.at("evals");
  if (!evals_json.is_array() || evals_json.empty()) throw ValidationError(s.ptr("evals"), "expected a nonempty array of CSV paths");
  std::vector<SegmentEvaluation> evals;
  for (std::size_t i = 0; i < evals_json.size(); ++i) {
    const auto p = s.input_file("evals/" + std::to_string(i));
    auto part = read_evaluations(p);
    evals.insert(evals.end(), part.begin(), part.end());
  }
  const bool do_hall = s.flag("hallucination"), do_deltas = s.flag("deltas"), do_lengths = s.flag("lengths"),
             do_agg = s.flag("aggregate");
  if (!do_hall && !do_deltas && !do_lengths && !do_agg) {
    throw ValidationError(s.ptr("hallucination"), "select at least one of hallucination, deltas, lengths, aggregate");
  }
  const auto out_dir = s.output_dir("output_dir");
  const auto zero_k = s.count("zero_shots", 0, kMaxShots), few_k = s.count("few_shots", 0, kMaxShots);

  std::map<std::string, fs::path> gen_paths;
  {
    const auto& g = s.at("generations");
    if (!g.is_object()) throw ValidationError(s.ptr("generations"), "expected an object of system -> path");
    for (auto it = g.begin(); it != g.end(); ++it) gen_paths[it.key()] = s.input_file("generations/" + it.key());
  }
  std::optional<std::vector<InstructionRecord>> references;
  if (s.present("references")) references = read_records(s.input_file("references"));

  fs::create_directories(out_dir);
  RunResult r;
  auto emit = [&](const std::string& name, const csv::Table& t) {
    csv::write(out_dir / name, t);
    r.outputs.push_back({(out_dir / name).string(), t.rows.size()});
  };

  if (do_hall) {
    HallucinationThresholds th{s.number("hallucination_hi", 0, 100), s.number("hallucination_lo", 0, 100)};
    const auto rep = hallucination_rate(pair_bleu(evals, zero_k, few_k), th);
    emit("hallucination.csv", hallucination_table(rep));
    emit("hallucination_detail.csv", hallucination_detail_table(rep));
    r.counts["hallucination_flagged"] = rep.flagged.size();
  }
  if (do_deltas) {
    const auto metric = metric_from_string(s.choice("delta_metric", {"comet", "kiwi", "bleu", "chrf"}));
    const auto top_k = s.count("top_k", 1);
    const auto bin = s.number("bin_width", 1e-6, 100);
    std::vector<std::string> systems;
    for (const auto& e : evals) detail::push_unique(systems, e.system);
    std::sort(systems.begin(), systems.end());
    for (const auto& sys : systems) {
      std::vector<SegmentEvaluation> zero, few;
      for (const auto& e : evals) {
        if (e.system != sys) continue;
        if (e.shots == zero_k) zero.push_back(e);
        else if (e.shots == few_k) few.push_back(e);
      }
      const auto d = compute_deltas(zero, few, metric, top_k, bin);
      std::map<std::string, InspectionTexts> texts;
      if (references) {
        for (const auto& rec : *references) {
          if (rec.n_shots != zero_k) continue;
          auto& t = texts[rec.segment_id];
          t.source = parse(rec.prompt).source;
          t.reference = rec.completion;
        }
        if (auto it = gen_paths.find(sys); it != gen_paths.end()) {
          const auto gens = read_generations(it->second);
          for (const auto& g : gens) {
            if (!g.ok() || !texts.count(g.segment_id)) continue;
            if (g.n_shots == zero_k) texts[g.segment_id].zero_output = g.translation;
            else if (g.n_shots == few_k) texts[g.segment_id].few_output = g.translation;
          }
        }
      }
      const auto name = safe_name(sys);
      emit("deltas." + name + ".csv", deltas_table(d));
      emit("delta_histogram." + name + ".csv", delta_histogram_table(d));
      const auto top = top_deltas_jsonl(d, texts);
      write_file_atomic(out_dir / ("top_deltas." + name + ".jsonl"), top);
      r.outputs.push_back({(out_dir / ("top_deltas." + name + ".jsonl")).string(), count_lines(top)});
    }
  }
  if (do_lengths) {
    if (gen_paths.empty()) throw ValidationError(s.ptr("generations"), "lengths needs at least one generations file");
    std::vector<std::pair<std::string, std::vector<GenerationResult>>> systems;
    for (const auto& [name, path] : gen_paths) systems.emplace_back(name, read_generations(path));
    std::vector<std::size_t> ref_lengths;
    if (references) {
      for (const auto& rec : *references) {
        if (rec.n_shots == zero_k) ref_lengths.push_back(count_whitespace_tokens(rec.completion));
      }
    }
    const auto a = length_distribution(systems, ref_lengths);
    emit("length_histogram.csv", length_histogram_table(a));
    emit("length_summary.csv", length_summary_table(a));
  }
  if (do_agg) {
    const auto& gb = s.at("group_by");
    if (!gb.is_array() || gb.empty()) throw ValidationError(s.ptr("group_by"), "expected a nonempty array");
    std::vector<GroupKey> keys;
    for (std::size_t i = 0; i < gb.size(); ++i) {
      try {
        keys.push_back(group_key_from_string(gb[i].is_string() ? gb[i].get<std::string>() : ""));
      } catch (const Error&) {
        throw ValidationError(s.ptr("group_by/" + std::to_string(i)), "must be one of: pair, system, shots, domain");
      }
    }
    const auto rep = aggregate_report(evals, keys);
    emit("aggregate_long.csv", rep.long_form);
    emit("aggregate_pivot.csv", rep.pivot);
  }
  r.counts["evaluation_rows"] = evals.size();
  r.record_paths.push_back(record_for_dir(out_dir));
  log << "analyze: wrote " << r.outputs.size() << " files to " << out_dir.string() << "\n";
  return r;
}

inline RunResult run_manifest(const Settings& s, std::ostream& log) {
  const auto method = method_from_string(s.choice("method", {"lora", "full_ft"}));
  std::optional<int> r_override;
  if (s.present("lora_r")) {
    if (method != TrainingMethod::Lora) throw ValidationError(s.ptr("lora_r"), "only valid with method lora");
    r_override = static_cast<int>(s.count("lora_r", 1, 65536));
  }
  const auto output = s.output_path("output");
  const auto m = make_manifest(method, r_override);
  emit_manifest(output, m);
  RunResult r;
  r.outputs.push_back({output.string(), 1});
  r.counts = {{"method", std::string(to_string(method))}};
  r.record_paths.push_back(record_for_file(output));
  log << "manifest: " << to_string(method) << " -> " << output.string() << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// Flag overrides

enum class Kind { String, Number, Count, Bool, StringList, CountList, Map };

struct Override {
  std::string pointer;  // relative to the section
  Kind kind;
  std::vector<std::string> values;
  bool bool_value = false;
};

inline json override_value(const Override& o, const std::string& flag) {
  auto bad = [&](const std::string& what) { return ValidationError(flag, what); };
  auto to_count = [&](const std::string& v) -> json {
    std::size_t used = 0;
    unsigned long long n = 0;
    try {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      n = std::stoull(v, &used);
    } catch (const std::exception&) {
      throw bad("expected a non-negative integer, got '" + v + "'");
    }
    if (used != v.size()) throw bad("expected a non-negative integer, got '" + v + "'");
    return n;
  };
  switch (o.kind) {
    case Kind::String: return o.values.at(0);
    case Kind::Bool: return o.bool_value;
    case Kind::Count: return to_count(o.values.at(0));
    case Kind::Number: {
      std::size_t used = 0;
      double d = 0;
      try {
        d = std::stod(o.values.at(0), &used);
      } catch (const std::exception&) {
        throw bad("expected a number, got '" + o.values.at(0) + "'");
      }
      if (used != o.values.at(0).size()) throw bad("expected a number, got '" + o.values.at(0) + "'");
      return d;
    }
    case Kind::StringList: return o.values;
    case Kind::CountList: {
      json a = json::array();
      for (const auto& v : o.values) a.push_back(to_count(v));
      return a;
    }
    case Kind::Map: {
      json m = json::object();
      for (const auto& v : o.values) {
        const auto eq = v.find('=');
        if (eq == std::string::npos || eq == 0) throw bad("expected name=path, got '" + v + "'");
        m[v.substr(0, eq)] = v.substr(eq + 1);
      }
      return m;
    }
  }
  return nullptr;
}

class Command {
 public:
  Command(CLI::App& app, std::string name, const std::string& help)
      : name_(std::move(name)), sub_(app.add_subcommand(name_, help)) {
    sub_->add_option("-c,--config", config_, "JSON config file");
    sub_->add_option("--seed", seed_, "Random seed (overrides the config)");
  }

  Command& option(const std::string& flags, const std::string& pointer, Kind kind, const std::string& help) {
    auto& o = overrides_.emplace_back(std::make_unique<std::pair<std::string, Override>>());
    o->first = flags;
    o->second.pointer = pointer;
    o->second.kind = kind;
    if (kind == Kind::Bool) {
      sub_->add_flag(flags, o->second.bool_value, help);
    } else if (kind == Kind::StringList || kind == Kind::CountList || kind == Kind::Map) {
      sub_->add_option(flags, o->second.values, help)->expected(1, -1);
    } else {
      sub_->add_option(flags, o->second.values, help)->expected(1);
    }
    return *this;
  }

  bool parsed() const { return sub_->parsed(); }
  const std::string& name() const { return name_; }

  /// Defaults, then the config file, then flags.
  json resolve() const {
    const auto section = section_key(name_);
    json root = {{"seed", nullptr}, {section, defaults().at(section)}};
    if (config_) {
      json file;
      try {
        file = json::parse(read_file(*config_));
      } catch (const json::parse_error& e) {
        throw ValidationError("", "config is not valid JSON: " + std::string(e.what()));
      } catch (const Error& e) {
        throw ValidationError("", e.what());
      }
      if (!file.is_object()) throw ValidationError("", "config must be a JSON object");
      for (auto it = file.begin(); it != file.end(); ++it) {
        const auto& k = it.key();
        if (k == "seed") {
          root["seed"] = it.value();
        } else if (k == "languages") {
          root["languages"] = it.value();
        } else if (k == section) {
          merge_into(root[section], it.value(), "/" + section);
        } else if (k == "$schema" || k == "description" || k == "schema_version" || defaults().contains(k)) {
          // Other subcommands' sections are ignored, so one file can drive the whole pipeline.
        } else {
          throw ValidationError("/" + k, "unknown setting");
        }
      }
    }
    if (seed_) root["seed"] = *seed_;
    for (const auto& o : overrides_) {
      const auto& ov = o->second;
      const bool given = ov.kind == Kind::Bool ? ov.bool_value : !ov.values.empty();
      if (!given) continue;
      root[json::json_pointer("/" + section + "/" + ov.pointer)] = override_value(ov, o->first);
    }
    if (root["seed"].is_null()) throw ValidationError("/seed", "required (set it in the config or pass --seed)");
    if (!root["seed"].is_number_unsigned()) throw ValidationError("/seed", "expected a non-negative integer");
    return root;
  }

 private:
  std::string name_;
  CLI::App* sub_;
  std::optional<std::string> config_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::unique_ptr<std::pair<std::string, Override>>> overrides_;
};

inline std::string version_text() {
  std::ostringstream o;
  BleuOptions bleu_char;
  bleu_char.tokenizer = Tokenizer::Char;
  o << "fsmt " << kVersion << "\n"
    << "BLEU (corpus) " << bleu_signature({}) << "\n"
    << "BLEU (corpus, zh) " << bleu_signature(bleu_char) << "\n"
    << "BLEU (sentence) " << bleu_signature(sentence_bleu_options()) << "\n"
    << "chrF " << chrf_signature() << "\n"
    << "schemas: config " << kConfigSchemaVersion << ", instruction/generation records " << kRecordSchemaVersion
    << ", manifest " << kManifestSchemaVersion << ", run record " << kRunRecordSchemaVersion << "\n";
  return o.str();
}

/// Entry point shared by the binary and in-process tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Few-shot MT data pipeline: filter, build datasets, generate, score, analyze", "fsmt"};
  app.require_subcommand(0, 1);
  bool show_version = false;
  app.add_flag("--version", show_version, "Print version, metric signatures and schema versions");

  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help) -> Command& {
    return *commands.emplace_back(std::make_unique<Command>(app, name, help));
  };
  add("filter", "Filter a scored parallel corpus into per-pair training and example pools")
      .option("-i,--input", "input", Kind::String, "Corpus (.tsv or .jsonl)")
      .option("-o,--output-dir", "output_dir", Kind::String, "Pool directory")
      .option("--bicleaner-min", "bicleaner_min", Kind::Number, "Bicleaner threshold")
      .option("--kiwi-min", "kiwi_min", Kind::Number, "COMETKiwi threshold (both directions)")
      .option("--per-pair-cap", "per_pair_cap", Kind::Count, "Training pool cap per pair")
      .option("--example-pool-size", "example_pool_size", Kind::Count, "Held-out example pool size per pair")
      .option("--strict", "strict", Kind::Bool, "Require scores strictly above the thresholds");
  add("build-train", "Assemble the instruction-tuning set from pools")
      .option("-p,--pools", "pools", Kind::String, "Pool directory from `filter`")
      .option("-o,--output", "output", Kind::String, "Output JSONL")
      .option("-n,--n-records", "n_records", Kind::Count, "Number of records")
      .option("--mixture", "mixture", Kind::String, "balanced | unbalanced")
      .option("--template", "template", Kind::String, "few_shot_1 | few_shot_2 | few_shot_3");
  add("build-eval", "Assemble zero- and few-shot evaluation prompts")
      .option("--test", "test", Kind::String, "Test segments (.tsv or .jsonl)")
      .option("--dev", "dev", Kind::String, "Dev segments used as shots")
      .option("-o,--output", "output", Kind::String, "Output JSONL")
      .option("--shots", "shots", Kind::CountList, "Shot settings, e.g. 0 5")
      .option("--template", "template", Kind::String, "few_shot_1 | few_shot_2 | few_shot_3")
      .option("--strip-references", "strip_references", Kind::Bool, "Leave completions empty");
  add("generate", "Run prompts through an OpenAI-compatible completions endpoint")
      .option("-i,--input", "input", Kind::String, "Instruction JSONL")
      .option("-o,--output", "output", Kind::String, "Generation JSONL")
      .option("--url", "endpoint/url", Kind::String, "Endpoint base URL")
      .option("--model", "endpoint/model", Kind::String, "Model name sent with each request")
      .option("--concurrency", "endpoint/concurrency", Kind::Count, "Parallel requests")
      .option("--max-attempts", "endpoint/max_attempts", Kind::Count, "Attempts per prompt")
      .option("--mode", "decoding/mode", Kind::String, "pretrained | finetuned")
      .option("--max-tokens", "decoding/max_tokens", Kind::Count, "Generation cap")
      .option("--resume", "resume", Kind::Bool, "Reuse ok rows from a previous partial run");
  add("score", "Sentence and corpus metrics for one system at one shot setting")
      .option("--eval", "eval", Kind::String, "Evaluation JSONL (with references)")
      .option("--generations", "generations", Kind::String, "Generation JSONL")
      .option("--neural", "neural", Kind::String, "COMET / COMETKiwi TSV")
      .option("--system", "system", Kind::String, "System label")
      .option("--domain", "domain", Kind::String, "Domain label")
      .option("--shots", "shots", Kind::Count, "Shot setting to score")
      .option("-o,--output-dir", "output_dir", Kind::String, "Report directory");
  add("analyze", "Hallucination, delta, length and aggregate reports")
      .option("--evals", "evals", Kind::StringList, "Per-segment evaluation CSVs")
      .option("-o,--output-dir", "output_dir", Kind::String, "Report directory")
      .option("--hallucination", "hallucination", Kind::Bool, "Hallucination rates")
      .option("--deltas", "deltas", Kind::Bool, "Zero- vs few-shot score deltas")
      .option("--lengths", "lengths", Kind::Bool, "Output length distributions")
      .option("--aggregate", "aggregate", Kind::Bool, "Mean scores per group")
      .option("--delta-metric", "delta_metric", Kind::String, "comet | kiwi | bleu | chrf")
      .option("--generations", "generations", Kind::Map, "system=path generation files")
      .option("--references", "references", Kind::String, "Evaluation JSONL with references")
      .option("--group-by", "group_by", Kind::StringList, "pair system shots domain");
  add("manifest", "Emit a training hyperparameter manifest")
      .option("--method", "method", Kind::String, "lora | full_ft")
      .option("--lora-r", "lora_r", Kind::Count, "LoRA rank (alpha = 2r)")
      .option("-o,--output", "output", Kind::String, "Output JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }
  if (show_version) {
    out << version_text();
    return kExitOk;
  }
  const Command* cmd = nullptr;
  for (const auto& c : commands) {
    if (c->parsed()) cmd = c.get();
  }
  if (!cmd) {
    err << app.help();
    return kExitValidation;
  }

  json resolved;
  try {
    resolved = cmd->resolve();
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  const Settings settings(resolved, section_key(cmd->name()));
  const auto seed = resolved.at("seed").get<std::uint64_t>();
  try {
    const auto names = language_names(resolved);
    RunResult result;
    const auto& n = cmd->name();
    if (n == "filter") result = run_filter(settings, seed, err);
    else if (n == "build-train") result = run_build_train(settings, seed, names, err);
    else if (n == "build-eval") result = run_build_eval(settings, seed, names, err);
    else if (n == "generate") result = run_generate(settings, err);
    else if (n == "score") result = run_score(settings, err);
    else if (n == "analyze") result = run_analyze(settings, err);
    else if (n == "manifest") result = run_manifest(settings, err);
    write_run_record(n, resolved, result);
    return result.exit_code;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace fsmt::cli
