#pragma once

// Per-segment evaluation rows for one (system, shot setting) condition and
// corpus-level metric reports.

#include <algorithm>
#include <map>
#include <set>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsmt/csv.hpp"
#include "fsmt/dataset.hpp"
#include "fsmt/generation.hpp"
#include "fsmt/metrics.hpp"

namespace fsmt {

struct SegmentEvaluation {
  std::string segment_id;
  std::string system;
  std::string pair;
  std::string domain;
  std::size_t shots = 0;
  double bleu_sent = 0.0;
  double chrf_sent = 0.0;
  std::optional<double> comet;  // x100
  std::optional<double> kiwi;   // x100

  bool operator==(const SegmentEvaluation&) const = default;
};

enum class Metric { Comet, Kiwi, Bleu, Chrf };

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::Comet: return "comet";
    case Metric::Kiwi: return "kiwi";
    case Metric::Bleu: return "bleu";
    case Metric::Chrf: return "chrf";
  }
  return "unknown";
}

/// Column titles used in the pivoted tables.
inline std::string_view display_name(Metric m) {
  switch (m) {
    case Metric::Comet: return "COMET";
    case Metric::Kiwi: return "COMETKiwi";
    case Metric::Bleu: return "BLEU";
    case Metric::Chrf: return "chrF";
  }
  return "unknown";
}

inline Metric metric_from_string(std::string_view s) {
  for (auto m : {Metric::Comet, Metric::Kiwi, Metric::Bleu, Metric::Chrf}) {
    if (s == to_string(m)) return m;
  }
  throw Error("invalid_metric", "unknown metric '" + std::string(s) + "'");
}

inline std::optional<double> metric_value(const SegmentEvaluation& e, Metric m) {
  switch (m) {
    case Metric::Comet: return e.comet;
    case Metric::Kiwi: return e.kiwi;
    case Metric::Bleu: return e.bleu_sent;
    case Metric::Chrf: return e.chrf_sent;
  }
  return std::nullopt;
}

inline void validate(const SegmentEvaluation& e) {
  auto in_range = [](double v) { return v >= 0.0 && v <= 100.0; };
  if (!in_range(e.bleu_sent) || !in_range(e.chrf_sent) || (e.comet && !in_range(*e.comet)) ||
      (e.kiwi && !in_range(*e.kiwi))) {
    throw Error("range_violation", "score out of [0,100] for segment " + e.segment_id);
  }
}

inline const csv::Row& evaluation_header() {
  static const csv::Row header{"segment_id", "system", "pair", "domain", "shots",
                               "bleu_sent",  "chrf_sent", "comet", "kiwi"};
  return header;
}

inline csv::Table evaluations_to_table(std::span<const SegmentEvaluation> evals) {
  csv::Table t;
  t.header = evaluation_header();
  auto opt = [](const std::optional<double>& v) { return v ? csv::fmt(*v, 6) : std::string{}; };
  for (const auto& e : evals) {
    t.rows.push_back({e.segment_id, e.system, e.pair, e.domain, std::to_string(e.shots),
                      csv::fmt(e.bleu_sent, 6), csv::fmt(e.chrf_sent, 6), opt(e.comet), opt(e.kiwi)});
  }
  return t;
}

inline std::vector<SegmentEvaluation> evaluations_from_table(const csv::Table& t) {
  const auto c_id = t.column("segment_id"), c_sys = t.column("system"), c_pair = t.column("pair"),
             c_dom = t.column("domain"), c_shots = t.column("shots"), c_bleu = t.column("bleu_sent"),
             c_chrf = t.column("chrf_sent"), c_comet = t.column("comet"), c_kiwi = t.column("kiwi");
  std::vector<SegmentEvaluation> out;
  for (const auto& r : t.rows) {
    SegmentEvaluation e;
    e.segment_id = r[c_id];
    e.system = r[c_sys];
    e.pair = r[c_pair];
    e.domain = r[c_dom];
    e.shots = static_cast<std::size_t>(csv::parse_number(r[c_shots]).value_or(0));
    e.bleu_sent = csv::parse_number(r[c_bleu]).value_or(0.0);
    e.chrf_sent = csv::parse_number(r[c_chrf]).value_or(0.0);
    e.comet = csv::parse_number(r[c_comet]);
    e.kiwi = csv::parse_number(r[c_kiwi]);
    validate(e);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<SegmentEvaluation> read_evaluations(const std::filesystem::path& path) {
  return evaluations_from_table(csv::read(path));
}

struct ScoringInput {
  std::string system;
  std::string domain;
  std::size_t shots = 0;
};

struct ScoredCondition {
  std::vector<SegmentEvaluation> rows;
  std::size_t skipped_errors = 0;   // generation error rows left unscored
  std::size_t missing_neural = 0;   // rows without an external COMET score
  // Per-pair corpus inputs, in row order.
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> corpus;
};

/// Joins evaluation records (which carry references) with generation rows
/// by position, keeps the requested shot setting, and computes sentence
/// BLEU / chrF. External COMET scores are attached by segment id.
inline ScoredCondition score_condition(std::span<const InstructionRecord> records,
                                       std::span<const GenerationResult> generations,
                                       const std::map<std::string, NeuralScores>& neural,
                                       const ScoringInput& in) {
  if (records.size() != generations.size()) {
    throw Error("length_mismatch", std::to_string(records.size()) + " records vs " +
                                       std::to_string(generations.size()) + " generation rows");
  }
  ScoredCondition out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const auto& gen = generations[i];
    if (gen.index != i || gen.segment_id != rec.segment_id) {
      throw Error("misaligned_rows", "generation row " + std::to_string(i) + " does not match record " +
                                         rec.segment_id);
    }
    if (rec.n_shots != in.shots) continue;
    if (!gen.ok()) {
      ++out.skipped_errors;
      continue;
    }
    if (rec.completion.empty()) throw Error("missing_reference", rec.segment_id);
    const auto tok = tokenizer_for_target(rec.pair.tgt);
    SegmentEvaluation e;
    e.segment_id = rec.segment_id;
    e.system = in.system;
    e.pair = rec.pair.key();
    e.domain = in.domain;
    e.shots = in.shots;
    e.bleu_sent = sentence_bleu(gen.translation, rec.completion, tok);
    e.chrf_sent = sentence_chrf(gen.translation, rec.completion);
    if (auto it = neural.find(rec.segment_id); it != neural.end()) {
      e.comet = it->second.comet;
      e.kiwi = it->second.kiwi;
    } else if (!neural.empty()) {
      ++out.missing_neural;
    }
    auto& [hyps, refs] = out.corpus[e.pair];
    hyps.push_back(gen.translation);
    refs.push_back(rec.completion);
    out.rows.push_back(std::move(e));
  }
  return out;
}

/// Corpus-level report: one row per (system, pair, shots, metric). BLEU and
/// chrF are corpus scores; COMET / COMETKiwi are segment means. Metric
/// signatures go into the leading comment lines.
inline csv::Table metric_report(const ScoredCondition& scored, const ScoringInput& in) {
  csv::Table t;
  t.header = {"system", "pair", "shots", "metric", "value"};
  std::set<std::string> signatures;
  for (const auto& [pair, texts] : scored.corpus) {
    const auto tgt = parse_lang_pair(pair).tgt;
    BleuOptions bopt;
    bopt.tokenizer = tokenizer_for_target(tgt);
    signatures.insert("BLEU " + bleu_signature(bopt));
    const auto bleu = corpus_bleu(texts.first, texts.second, bopt).score;
    const auto chrf_score = chrf(texts.first, texts.second);
    std::vector<double> comet, kiwi;
    for (const auto& e : scored.rows) {
      if (e.pair != pair) continue;
      if (e.comet) comet.push_back(*e.comet);
      if (e.kiwi) kiwi.push_back(*e.kiwi);
    }
    auto mean = [](std::vector<double> v) -> std::optional<double> {
      if (v.empty()) return std::nullopt;
      std::sort(v.begin(), v.end());
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    const auto shots = std::to_string(in.shots);
    t.rows.push_back({in.system, pair, shots, "comet", csv::fmt(mean(comet))});
    t.rows.push_back({in.system, pair, shots, "kiwi", csv::fmt(mean(kiwi))});
    t.rows.push_back({in.system, pair, shots, "bleu", csv::fmt(bleu)});
    t.rows.push_back({in.system, pair, shots, "chrf", csv::fmt(chrf_score)});
  }
  signatures.insert("chrF " + chrf_signature());
  t.comments.assign(signatures.begin(), signatures.end());
  return t;
}

}  // namespace fsmt
