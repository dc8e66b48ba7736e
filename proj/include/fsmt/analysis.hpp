#pragma once

// Diagnostics over evaluation sets: zero- vs few-shot score deltas,
// hallucination under prompt perturbation, output-length distributions and
// aggregated score tables.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "fsmt/csv.hpp"
#include "fsmt/evaluation.hpp"
#include "fsmt/generation.hpp"

namespace fsmt {

namespace detail {

/// Order-independent mean: values are summed in sorted order.
inline std::optional<double> stable_mean(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

inline std::string join_ids(const std::vector<std::string>& ids, std::size_t limit = 20) {
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < limit; ++i) {
    if (i) out += ", ";
    out += ids[i];
  }
  if (ids.size() > limit) out += ", ... (" + std::to_string(ids.size()) + " total)";
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Score deltas

struct DeltaRecord {
  std::string segment_id;
  std::string pair;
  std::string domain;
  double score_zero = 0.0;
  double score_few = 0.0;
  double delta = 0.0;  // score_few - score_zero
};

struct HistogramBin {
  std::string group;  // language pair, or "all"
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

struct DeltaAnalysis {
  std::vector<DeltaRecord> records;  // sorted by segment id
  std::vector<HistogramBin> histogram;
  std::vector<DeltaRecord> top;      // largest |delta| first
};

/// Texts shown next to extreme deltas for manual inspection.
struct InspectionTexts {
  std::string source;
  std::string reference;
  std::string zero_output;
  std::string few_output;
};

inline DeltaAnalysis compute_deltas(std::span<const SegmentEvaluation> zero,
                                    std::span<const SegmentEvaluation> few, Metric metric,
                                    std::size_t top_k = 20, double bin_width = 1.0) {
  if (!(bin_width > 0.0)) throw Error("invalid_argument", "bin width must be positive");
  std::map<std::string, const SegmentEvaluation*> z, f;
  for (const auto& e : zero) z[e.segment_id] = &e;
  for (const auto& e : few) f[e.segment_id] = &e;
  std::vector<std::string> missing;
  for (const auto& [id, _] : z) {
    if (!f.count(id)) missing.push_back(id + " (few-shot)");
  }
  for (const auto& [id, _] : f) {
    if (!z.count(id)) missing.push_back(id + " (zero-shot)");
  }
  if (!missing.empty()) throw Error("id_mismatch", "missing: " + detail::join_ids(missing));

  DeltaAnalysis out;
  for (const auto& [id, ze] : z) {
    const auto& fe = *f.at(id);
    const auto sz = metric_value(*ze, metric);
    const auto sf = metric_value(fe, metric);
    if (!sz || !sf) {
      throw Error("missing_score", id + " has no " + std::string(to_string(metric)) + " score");
    }
    out.records.push_back({id, ze->pair, ze->domain, *sz, *sf, *sf - *sz});
  }

  std::map<std::string, std::map<long long, std::size_t>> bins;
  for (const auto& r : out.records) {
    const auto b = static_cast<long long>(std::floor(r.delta / bin_width));
    ++bins[r.pair][b];
    ++bins["all"][b];
  }
  for (const auto& [group, counts] : bins) {
    for (const auto& [b, n] : counts) {
      out.histogram.push_back({group, static_cast<double>(b) * bin_width,
                               static_cast<double>(b + 1) * bin_width, n});
    }
  }

  out.top = out.records;
  std::stable_sort(out.top.begin(), out.top.end(), [](const DeltaRecord& a, const DeltaRecord& b) {
    return std::abs(a.delta) > std::abs(b.delta);
  });
  if (out.top.size() > top_k) out.top.resize(top_k);
  return out;
}

inline csv::Table deltas_table(const DeltaAnalysis& d) {
  csv::Table t;
  t.header = {"segment_id", "pair", "domain", "score_zero", "score_few", "delta"};
  for (const auto& r : d.records) {
    t.rows.push_back({r.segment_id, r.pair, r.domain, csv::fmt(r.score_zero, 4), csv::fmt(r.score_few, 4),
                      csv::fmt(r.delta, 4)});
  }
  return t;
}

inline csv::Table delta_histogram_table(const DeltaAnalysis& d) {
  csv::Table t;
  t.header = {"group", "bin_lo", "bin_hi", "count"};
  for (const auto& b : d.histogram) {
    t.rows.push_back({b.group, csv::fmt(b.lo, 2), csv::fmt(b.hi, 2), std::to_string(b.count)});
  }
  return t;
}

/// JSONL listing of the extreme deltas, with texts when available.
inline std::string top_deltas_jsonl(const DeltaAnalysis& d,
                                    const std::map<std::string, InspectionTexts>& texts = {}) {
  std::string out;
  std::size_t rank = 0;
  for (const auto& r : d.top) {
    nlohmann::ordered_json j{{"rank", ++rank},       {"segment_id", r.segment_id},
                             {"pair", r.pair},       {"domain", r.domain},
                             {"score_zero", r.score_zero}, {"score_few", r.score_few},
                             {"delta", r.delta}};
    if (auto it = texts.find(r.segment_id); it != texts.end()) {
      j["source"] = it->second.source;
      j["reference"] = it->second.reference;
      j["zero_shot_output"] = it->second.zero_output;
      j["few_shot_output"] = it->second.few_output;
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hallucination under perturbation

struct HallucinationThresholds {
  double hi = 30.0;  // zero-shot sentence BLEU must exceed this
  double lo = 3.0;   // few-shot sentence BLEU must fall below this
};

struct PairedBleu {
  std::string segment_id;
  std::string domain;
  std::string system;
  std::string pair;
  double zero_bleu = 0.0;
  double few_bleu = 0.0;
};

inline bool is_hallucination(const PairedBleu& p, const HallucinationThresholds& t) {
  return p.zero_bleu > t.hi && p.few_bleu < t.lo;
}

struct HallucinationGroup {
  std::string domain;  // "all" for totals
  std::string system;
  std::string pair;    // "all" unless broken down by pair
  std::size_t n_segments = 0;
  std::size_t n_flagged = 0;

  std::optional<double> rate() const {
    if (n_segments == 0) return std::nullopt;
    return static_cast<double>(n_flagged) / static_cast<double>(n_segments);
  }
};

struct HallucinationReport {
  HallucinationThresholds thresholds;
  std::vector<std::string> domains;  // display order
  std::vector<std::string> systems;  // first-appearance order
  std::vector<HallucinationGroup> groups;
  std::vector<PairedBleu> flagged;

  const HallucinationGroup* find(std::string_view domain, std::string_view system,
                                 std::string_view pair = "all") const {
    for (const auto& g : groups) {
      if (g.domain == domain && g.system == system && g.pair == pair) return &g;
    }
    return nullptr;
  }
};

/// Rate as a percentage with two decimals ("2.70%"), or "n/a" for an empty
/// group so missing data never reads as a perfect score.
inline std::string format_rate(std::optional<double> rate) {
  if (!rate) return "n/a";
  return csv::fmt(*rate * 100.0, 2) + "%";
}

namespace detail {

inline int domain_rank(const std::string& d) {
  static const std::vector<std::string> order{"Flores", "Medical", "Law", "Tico", "Chat"};
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] == d) return static_cast<int>(i);
  }
  return static_cast<int>(order.size());
}

}  // namespace detail

/// Flags segments with zero-shot BLEU > hi and few-shot BLEU < lo (both
/// strict) and reports rates per (domain, system), per (domain, system,
/// pair) and overall per system.
inline HallucinationReport hallucination_rate(std::span<const PairedBleu> paired,
                                              HallucinationThresholds thresholds = {}) {
  HallucinationReport rep;
  rep.thresholds = thresholds;
  std::map<std::tuple<std::string, std::string, std::string>, HallucinationGroup> groups;
  auto bump = [&](const std::string& domain, const std::string& system, const std::string& pair, bool flag) {
    auto& g = groups[{domain, system, pair}];
    g.domain = domain;
    g.system = system;
    g.pair = pair;
    ++g.n_segments;
    if (flag) ++g.n_flagged;
  };
  for (const auto& p : paired) {
    const bool flag = is_hallucination(p, thresholds);
    if (flag) rep.flagged.push_back(p);
    detail::push_unique(rep.domains, p.domain);
    detail::push_unique(rep.systems, p.system);
    bump(p.domain, p.system, "all", flag);
    bump(p.domain, p.system, p.pair, flag);
    bump("all", p.system, "all", flag);
  }
  std::stable_sort(rep.domains.begin(), rep.domains.end(), [](const auto& a, const auto& b) {
    const auto ra = detail::domain_rank(a), rb = detail::domain_rank(b);
    return ra != rb ? ra < rb : a < b;
  });
  for (auto& [key, g] : groups) rep.groups.push_back(std::move(g));
  return rep;
}

/// Aligns zero- and few-shot evaluations of the same system by segment id.
inline std::vector<PairedBleu> pair_bleu(std::span<const SegmentEvaluation> evals,
                                         std::size_t zero_shots = 0, std::size_t few_shots = 5) {
  std::map<std::pair<std::string, std::string>, const SegmentEvaluation*> zero, few;
  for (const auto& e : evals) {
    if (e.shots == zero_shots) zero[{e.system, e.segment_id}] = &e;
    else if (e.shots == few_shots) few[{e.system, e.segment_id}] = &e;
  }
  std::vector<std::string> missing;
  std::vector<PairedBleu> out;
  for (const auto& [key, z] : zero) {
    auto it = few.find(key);
    if (it == few.end()) {
      missing.push_back(key.first + "/" + key.second);
      continue;
    }
    out.push_back({z->segment_id, z->domain, z->system, z->pair, z->bleu_sent, it->second->bleu_sent});
  }
  for (const auto& [key, f] : few) {
    if (!zero.count(key)) missing.push_back(key.first + "/" + key.second);
  }
  if (!missing.empty()) throw Error("id_mismatch", "unpaired segments: " + detail::join_ids(missing));
  return out;
}

/// Domains x systems table of rates, e.g. "Law,2.70%,0.05%".
inline csv::Table hallucination_table(const HallucinationReport& rep) {
  csv::Table t;
  t.comments.push_back("hallucination: zero-shot sentence BLEU > " + csv::fmt(rep.thresholds.hi, 1) +
                       " and few-shot sentence BLEU < " + csv::fmt(rep.thresholds.lo, 1));
  t.header = {"Domain"};
  for (const auto& s : rep.systems) t.header.push_back(s);
  auto row_for = [&](const std::string& domain, const std::string& label) {
    csv::Row row{label};
    for (const auto& s : rep.systems) {
      const auto* g = rep.find(domain, s);
      row.push_back(format_rate(g ? g->rate() : std::nullopt));
    }
    return row;
  };
  for (const auto& d : rep.domains) t.rows.push_back(row_for(d, d));
  t.rows.push_back(row_for("all", "All"));
  return t;
}

inline csv::Table hallucination_detail_table(const HallucinationReport& rep) {
  csv::Table t;
  t.header = {"domain", "system", "pair", "n_segments", "n_flagged", "rate"};
  for (const auto& g : rep.groups) {
    t.rows.push_back({g.domain, g.system, g.pair, std::to_string(g.n_segments), std::to_string(g.n_flagged),
                      format_rate(g.rate())});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Output lengths

struct LengthSummary {
  std::string system;
  std::size_t n = 0;
  std::optional<double> mean_length;
  std::optional<double> overgeneration_ratio;  // share of newline_truncated outputs
  std::optional<double> total_variation;       // vs reference lengths
};

struct LengthAnalysis {
  std::vector<HistogramBin> histogram;  // group = system name or "reference"
  std::vector<LengthSummary> summary;
};

namespace detail {

inline std::map<long long, double> length_distribution_of(const std::vector<std::size_t>& lengths,
                                                          std::size_t bin_width) {
  std::map<long long, double> p;
  for (auto l : lengths) p[static_cast<long long>(l / bin_width)] += 1.0;
  for (auto& [b, v] : p) v /= static_cast<double>(lengths.size());
  return p;
}

inline double total_variation(const std::map<long long, double>& p, const std::map<long long, double>& q) {
  std::set<long long> keys;
  for (const auto& [k, _] : p) keys.insert(k);
  for (const auto& [k, _] : q) keys.insert(k);
  double tv = 0.0;
  for (auto k : keys) {
    const auto a = p.count(k) ? p.at(k) : 0.0;
    const auto b = q.count(k) ? q.at(k) : 0.0;
    tv += std::abs(a - b);
  }
  return 0.5 * tv;
}

}  // namespace detail

/// Histograms of translation token counts per system next to the reference
/// length distribution. Error rows are ignored.
inline LengthAnalysis length_distribution(
    std::span<const std::pair<std::string, std::vector<GenerationResult>>> systems,
    const std::vector<std::size_t>& reference_lengths, std::size_t bin_width = 1) {
  if (bin_width == 0) throw Error("invalid_argument", "bin width must be positive");
  LengthAnalysis out;
  const auto ref_dist = reference_lengths.empty()
                            ? std::map<long long, double>{}
                            : detail::length_distribution_of(reference_lengths, bin_width);
  auto add_hist = [&](const std::string& group, const std::vector<std::size_t>& lengths) {
    std::map<long long, std::size_t> counts;
    for (auto l : lengths) ++counts[static_cast<long long>(l / bin_width)];
    for (const auto& [b, n] : counts) {
      out.histogram.push_back({group, static_cast<double>(b) * static_cast<double>(bin_width),
                               static_cast<double>(b + 1) * static_cast<double>(bin_width), n});
    }
  };
  add_hist("reference", reference_lengths);
  {
    LengthSummary s;
    s.system = "reference";
    s.n = reference_lengths.size();
    std::vector<double> v(reference_lengths.begin(), reference_lengths.end());
    s.mean_length = detail::stable_mean(v);
    out.summary.push_back(s);
  }
  for (const auto& [name, results] : systems) {
    std::vector<std::size_t> lengths;
    std::size_t truncated = 0;
    for (const auto& r : results) {
      if (!r.ok()) continue;
      lengths.push_back(r.translation_token_count);
      if (r.finish == Finish::NewlineTruncated) ++truncated;
    }
    add_hist(name, lengths);
    LengthSummary s;
    s.system = name;
    s.n = lengths.size();
    std::vector<double> v(lengths.begin(), lengths.end());
    s.mean_length = detail::stable_mean(v);
    if (!lengths.empty()) {
      s.overgeneration_ratio = static_cast<double>(truncated) / static_cast<double>(lengths.size());
      if (!reference_lengths.empty()) {
        s.total_variation =
            detail::total_variation(detail::length_distribution_of(lengths, bin_width), ref_dist);
      }
    }
    out.summary.push_back(s);
  }
  return out;
}

inline csv::Table length_histogram_table(const LengthAnalysis& a) {
  csv::Table t;
  t.header = {"system", "bin_lo", "bin_hi", "count"};
  for (const auto& b : a.histogram) {
    t.rows.push_back({b.group, csv::fmt(b.lo, 0), csv::fmt(b.hi, 0), std::to_string(b.count)});
  }
  return t;
}

inline csv::Table length_summary_table(const LengthAnalysis& a) {
  csv::Table t;
  t.header = {"system", "n", "mean_length", "overgeneration_ratio", "total_variation"};
  for (const auto& s : a.summary) {
    t.rows.push_back({s.system, std::to_string(s.n), csv::fmt(s.mean_length, 2),
                      csv::fmt(s.overgeneration_ratio, 4), csv::fmt(s.total_variation, 4)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Aggregation

enum class GroupKey { Pair, System, Shots, Domain };

inline std::string_view to_string(GroupKey k) {
  switch (k) {
    case GroupKey::Pair: return "pair";
    case GroupKey::System: return "system";
    case GroupKey::Shots: return "shots";
    case GroupKey::Domain: return "domain";
  }
  return "unknown";
}

inline GroupKey group_key_from_string(std::string_view s) {
  for (auto k : {GroupKey::Pair, GroupKey::System, GroupKey::Shots, GroupKey::Domain}) {
    if (s == to_string(k)) return k;
  }
  throw Error("invalid_argument", "unknown group key '" + std::string(s) + "'");
}

inline std::string key_value(const SegmentEvaluation& e, GroupKey k) {
  switch (k) {
    case GroupKey::Pair: return e.pair;
    case GroupKey::System: return e.system;
    case GroupKey::Shots: return std::to_string(e.shots);
    case GroupKey::Domain: return e.domain;
  }
  return {};
}

inline std::string context_label(std::size_t shots) {
  if (shots == 0) return "Zero-Shot";
  if (shots == 5) return "Five-Shot";
  return std::to_string(shots) + "-Shot";
}

inline constexpr Metric kReportMetrics[] = {Metric::Comet, Metric::Kiwi, Metric::Bleu, Metric::Chrf};

struct AggregateReport {
  csv::Table long_form;  // group keys..., metric, value, n
  csv::Table pivot;      // pair, system, context, COMET, COMETKiwi, BLEU, chrF
};

/// Mean of every metric per group, as a long table plus a pivot laid out
/// with one row per (pair, system, context) and one column per metric.
inline AggregateReport aggregate_report(std::span<const SegmentEvaluation> evals,
                                        std::span<const GroupKey> group_by) {
  AggregateReport rep;
  using Key = std::vector<std::string>;
  std::map<Key, std::map<Metric, std::vector<double>>> groups;
  std::map<Key, std::size_t> sizes;
  for (const auto& e : evals) {
    Key key;
    for (auto k : group_by) key.push_back(key_value(e, k));
    ++sizes[key];
    auto& g = groups[key];
    for (auto m : kReportMetrics) {
      g[m];
      if (auto v = metric_value(e, m)) g[m].push_back(*v);
    }
  }
  for (auto k : group_by) rep.long_form.header.emplace_back(to_string(k));
  rep.long_form.header.insert(rep.long_form.header.end(), {"metric", "value", "n"});
  for (const auto& [key, metrics] : groups) {
    for (auto m : kReportMetrics) {
      const auto& vals = metrics.at(m);
      csv::Row row = key;
      row.insert(row.end(), {std::string(to_string(m)), csv::fmt(detail::stable_mean(vals)),
                             std::to_string(vals.size())});
      rep.long_form.rows.push_back(std::move(row));
    }
  }

  // Pivot (always keyed on pair, system, shots).
  std::map<std::tuple<std::string, std::string, std::size_t>, std::map<Metric, std::vector<double>>> cells;
  for (const auto& e : evals) {
    auto& c = cells[{e.pair, e.system, e.shots}];
    for (auto m : kReportMetrics) {
      c[m];
      if (auto v = metric_value(e, m)) c[m].push_back(*v);
    }
  }
  rep.pivot.header = {"pair", "system", "context"};
  for (auto m : kReportMetrics) rep.pivot.header.emplace_back(display_name(m));
  for (const auto& [key, metrics] : cells) {
    const auto& [pair, system, shots] = key;
    csv::Row row{pair, system, context_label(shots)};
    for (auto m : kReportMetrics) row.push_back(csv::fmt(detail::stable_mean(metrics.at(m))));
    rep.pivot.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace fsmt
