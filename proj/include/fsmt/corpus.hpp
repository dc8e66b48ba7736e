#pragma once

// Parallel-corpus ingestion, quality filtering and per-pair pool sampling.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fsmt/common.hpp"

namespace fsmt {

struct LangPair {
  std::string src;
  std::string tgt;

  std::string key() const { return src + "-" + tgt; }
  auto operator<=>(const LangPair&) const = default;
};

inline bool is_valid_lang_code(std::string_view code) {
  if (code.empty()) return false;
  return std::all_of(code.begin(), code.end(), [](char c) { return c >= 'a' && c <= 'z'; });
}

inline void validate(const LangPair& pair) {
  if (!is_valid_lang_code(pair.src) || !is_valid_lang_code(pair.tgt)) {
    throw Error("invalid_lang_pair", "language codes must be nonempty lowercase ASCII: '" +
                                         pair.src + "', '" + pair.tgt + "'");
  }
  if (pair.src == pair.tgt) throw Error("invalid_lang_pair", "src == tgt (" + pair.src + ")");
}

/// Parses "de-en" style keys.
inline LangPair parse_lang_pair(std::string_view key) {
  const auto dash = key.find('-');
  if (dash == std::string_view::npos) throw Error("invalid_lang_pair", std::string(key));
  LangPair pair{std::string(key.substr(0, dash)), std::string(key.substr(dash + 1))};
  validate(pair);
  return pair;
}

struct ParallelSegment {
  std::string id;
  LangPair pair;
  std::string src_text;
  std::string tgt_text;
  std::optional<double> bicleaner;
  std::optional<double> kiwi_fwd;  // src -> tgt
  std::optional<double> kiwi_rev;  // tgt -> src
  std::string domain_tag;

  bool operator==(const ParallelSegment&) const = default;
};

inline void validate(const ParallelSegment& seg) {
  if (seg.id.empty()) throw Error("invalid_segment", "empty id");
  validate(seg.pair);
  if (trim(seg.src_text).empty() || trim(seg.tgt_text).empty()) {
    throw Error("invalid_segment", "empty text in segment " + seg.id);
  }
  for (const auto& score : {seg.bicleaner, seg.kiwi_fwd, seg.kiwi_rev}) {
    if (score && !(*score >= 0.0 && *score <= 1.0)) {
      throw Error("invalid_segment", "score out of [0,1] in segment " + seg.id);
    }
  }
}

// Comparisons are >= on every threshold; set strict = true to require >.
struct FilterConfig {
  double bicleaner_min = 0.85;
  double kiwi_min = 0.80;
  std::size_t per_pair_cap = 250'000;
  std::size_t example_pool_size = 5'000;
  std::uint64_t seed = 0;
  bool strict = false;
};

inline void validate(const FilterConfig& cfg) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(cfg.bicleaner_min) || !in_unit(cfg.kiwi_min)) {
    throw Error("invalid_config", "filter thresholds must lie in [0,1]");
  }
  if (cfg.per_pair_cap < 1) throw Error("invalid_config", "per_pair_cap must be >= 1");
}

enum class DropReason { BicleanerLow, KiwiFwdLow, KiwiRevLow, MissingScore };

inline std::string_view to_string(DropReason r) {
  switch (r) {
    case DropReason::BicleanerLow: return "bicleaner_low";
    case DropReason::KiwiFwdLow: return "kiwi_fwd_low";
    case DropReason::KiwiRevLow: return "kiwi_rev_low";
    case DropReason::MissingScore: return "missing_score";
  }
  return "unknown";
}

struct FilterDecision {
  bool keep = false;
  std::optional<DropReason> reason;
};

/// Conjunctive Bicleaner + bidirectional COMETKiwi rule. A missing score
/// drops the segment.
inline FilterDecision filter_segment(const ParallelSegment& seg, const FilterConfig& cfg) {
  if (!seg.bicleaner || !seg.kiwi_fwd || !seg.kiwi_rev) {
    return {false, DropReason::MissingScore};
  }
  auto passes = [&](double score, double min) { return cfg.strict ? score > min : score >= min; };
  if (!passes(*seg.bicleaner, cfg.bicleaner_min)) return {false, DropReason::BicleanerLow};
  if (!passes(*seg.kiwi_fwd, cfg.kiwi_min)) return {false, DropReason::KiwiFwdLow};
  if (!passes(*seg.kiwi_rev, cfg.kiwi_min)) return {false, DropReason::KiwiRevLow};
  return {true, std::nullopt};
}

// ---------------------------------------------------------------------------
// Serialization

inline void to_json(nlohmann::ordered_json& j, const ParallelSegment& seg) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  j = nlohmann::ordered_json{{"id", seg.id},
                             {"src_lang", seg.pair.src},
                             {"tgt_lang", seg.pair.tgt},
                             {"src_text", seg.src_text},
                             {"tgt_text", seg.tgt_text},
                             {"bicleaner", opt(seg.bicleaner)},
                             {"kiwi_fwd", opt(seg.kiwi_fwd)},
                             {"kiwi_rev", opt(seg.kiwi_rev)},
                             {"domain", seg.domain_tag}};
}

template <typename Json>
ParallelSegment segment_from_json(const Json& j) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    const auto& v = j.at(key);
    if (v.is_string()) {
      const auto s = v.template get<std::string>();
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    }
    return v.template get<double>();
  };
  auto str = [&](const char* key) {
    return j.contains(key) && !j.at(key).is_null() ? j.at(key).template get<std::string>()
                                                   : std::string{};
  };
  ParallelSegment seg;
  seg.id = str("id");
  seg.pair = {str("src_lang"), str("tgt_lang")};
  seg.src_text = str("src_text");
  seg.tgt_text = str("tgt_text");
  seg.bicleaner = opt("bicleaner");
  seg.kiwi_fwd = opt("kiwi_fwd");
  seg.kiwi_rev = opt("kiwi_rev");
  seg.domain_tag = str("domain");
  return seg;
}

inline std::string segment_to_jsonl(const ParallelSegment& seg) {
  nlohmann::ordered_json j = seg;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

inline std::optional<double> parse_score_field(std::string_view field, std::size_t line_no) {
  const auto s = trim(field);
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) {
    throw Error("parse_error", "line " + std::to_string(line_no) + ": bad score '" + s + "'");
  }
  return v;
}

inline constexpr std::string_view kSegmentTsvHeader =
    "id\tsrc_lang\ttgt_lang\tsrc_text\ttgt_text\tbicleaner\tkiwi_fwd\tkiwi_rev\tdomain";

enum class CorpusFormat { Tsv, Jsonl };

inline CorpusFormat corpus_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".tsv" || ext == ".txt") return CorpusFormat::Tsv;
  if (ext == ".jsonl" || ext == ".json") return CorpusFormat::Jsonl;
  throw Error("invalid_config", "cannot infer corpus format from " + path.string());
}

/// Streams segments from TSV (9 columns, optional header line) or JSONL to
/// `sink`. Every segment is validated before it is handed out.
inline std::size_t read_segments(std::istream& in, CorpusFormat format,
                                 const std::function<void(ParallelSegment&&)>& sink) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ParallelSegment seg;
    if (format == CorpusFormat::Tsv) {
      if (line_no == 1 && line.rfind("id\t", 0) == 0) continue;
      const auto f = split(line, '\t');
      if (f.size() != 9) {
        throw Error("parse_error", "line " + std::to_string(line_no) + ": expected 9 fields, got " +
                                       std::to_string(f.size()));
      }
      seg.id = f[0];
      seg.pair = {f[1], f[2]};
      seg.src_text = f[3];
      seg.tgt_text = f[4];
      seg.bicleaner = parse_score_field(f[5], line_no);
      seg.kiwi_fwd = parse_score_field(f[6], line_no);
      seg.kiwi_rev = parse_score_field(f[7], line_no);
      seg.domain_tag = f[8];
    } else {
      try {
        seg = segment_from_json(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw Error("parse_error", "line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    try {
      validate(seg);
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(line_no) + ": " + e.what());
    }
    sink(std::move(seg));
    ++count;
  }
  return count;
}

inline std::vector<ParallelSegment> read_segments_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path.string());
  std::vector<ParallelSegment> out;
  read_segments(in, corpus_format_for(path), [&](ParallelSegment&& s) { out.push_back(std::move(s)); });
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// Fixed-size uniform sample of a stream (Vitter's Algorithm R). Each kept
/// item remembers its stream position.
template <typename T>
class ReservoirSampler {
 public:
  ReservoirSampler(std::size_t capacity, Rng rng) : capacity_(capacity), rng_(std::move(rng)) {}

  void add(T item) {
    const std::uint64_t pos = seen_++;
    if (items_.size() < capacity_) {
      items_.emplace_back(pos, std::move(item));
      return;
    }
    const auto j = uniform_below(rng_, seen_);
    if (j < capacity_) items_[j] = {pos, std::move(item)};
  }

  std::uint64_t seen() const { return seen_; }
  std::vector<std::pair<std::uint64_t, T>>& items() { return items_; }
  Rng& rng() { return rng_; }

 private:
  std::size_t capacity_;
  Rng rng_;
  std::uint64_t seen_ = 0;
  std::vector<std::pair<std::uint64_t, T>> items_;
};

struct PairPools {
  LangPair pair;
  std::vector<ParallelSegment> training;
  std::vector<ParallelSegment> examples;
  std::size_t seen = 0;
  std::size_t survived = 0;
};

struct Warning {
  std::string code;
  std::string pair;
  std::string detail;
};

struct FilterStats {
  std::size_t seen = 0;
  std::size_t kept = 0;
  std::map<std::string, std::size_t> dropped;  // reason -> count
};

struct PoolSet {
  std::map<LangPair, PairPools> pairs;
  std::vector<Warning> warnings;
  FilterStats stats;
};

/// Single-pass builder: filters each incoming segment, keeps one reservoir
/// of (example_pool_size + per_pair_cap) per language pair, and on finish()
/// splits every reservoir into a held-out example pool and a training pool.
class PoolBuilder {
 public:
  explicit PoolBuilder(FilterConfig cfg) : cfg_(cfg) { validate(cfg_); }

  void add(const ParallelSegment& seg) {
    ++stats_.seen;
    auto [it, inserted] = pairs_.try_emplace(
        seg.pair, cfg_.per_pair_cap + cfg_.example_pool_size, make_rng(cfg_.seed, seg.pair.key()));
    auto& state = it->second;
    ++state.seen;
    const auto decision = filter_segment(seg, cfg_);
    if (!decision.keep) {
      ++stats_.dropped[std::string(to_string(*decision.reason))];
      return;
    }
    ++stats_.kept;
    state.reservoir.add(seg);
  }

  PoolSet finish() && {
    PoolSet out;
    for (auto& [pair, state] : pairs_) {
      PairPools pools;
      pools.pair = pair;
      pools.seen = state.seen;
      pools.survived = state.reservoir.seen();
      auto& items = state.reservoir.items();
      if (items.empty()) {
        out.warnings.push_back({"empty_pool", pair.key(),
                                "no segment survived filtering (" + std::to_string(state.seen) +
                                    " seen)"});
      }
      shuffle(items, state.reservoir.rng());
      const auto n_examples = std::min(items.size(), cfg_.example_pool_size);
      auto by_position = [](const auto& a, const auto& b) { return a.first < b.first; };
      std::sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_examples), by_position);
      std::sort(items.begin() + static_cast<std::ptrdiff_t>(n_examples), items.end(), by_position);
      for (std::size_t i = 0; i < items.size(); ++i) {
        (i < n_examples ? pools.examples : pools.training).push_back(std::move(items[i].second));
      }
      if (!items.empty() && n_examples < cfg_.example_pool_size) {
        out.warnings.push_back({"small_example_pool", pair.key(),
                                "example pool has " + std::to_string(n_examples) + " of " +
                                    std::to_string(cfg_.example_pool_size) + " requested"});
      }
      out.pairs.emplace(pair, std::move(pools));
    }
    out.stats = stats_;
    return out;
  }

 private:
  struct PairState {
    PairState(std::size_t capacity, Rng rng) : reservoir(capacity, std::move(rng)) {}
    ReservoirSampler<ParallelSegment> reservoir;
    std::size_t seen = 0;
  };

  FilterConfig cfg_;
  std::map<LangPair, PairState> pairs_;
  FilterStats stats_;
};

inline PoolSet sample_pool(std::span<const ParallelSegment> segments, const FilterConfig& cfg) {
  PoolBuilder builder(cfg);
  for (const auto& s : segments) builder.add(s);
  return std::move(builder).finish();
}

/// Infinite deterministic stream over training pools: a language pair is
/// chosen uniformly among nonempty pools, then a segment uniformly within it.
class MixtureIterator {
 public:
  struct Draw {
    const LangPair& pair;
    const ParallelSegment& segment;
  };

  MixtureIterator(const PoolSet& pools, std::uint64_t seed) : rng_(make_rng(seed, "mixture")) {
    for (const auto& [pair, p] : pools.pairs) {
      if (!p.training.empty()) pools_.push_back(&p);
    }
    if (pools_.empty()) throw Error("empty_mixture", "all training pools are empty");
  }

  Draw next() {
    const auto* p = pools_[uniform_below(rng_, pools_.size())];
    return {p->pair, p->training[uniform_below(rng_, p->training.size())]};
  }

  std::size_t active_pairs() const { return pools_.size(); }

 private:
  Rng rng_;
  std::vector<const PairPools*> pools_;
};

// ---------------------------------------------------------------------------
// Pool files: <dir>/<src>-<tgt>.train.jsonl and <dir>/<src>-<tgt>.examples.jsonl

inline std::string segments_to_jsonl(std::span<const ParallelSegment> segs) {
  std::string out;
  for (const auto& s : segs) {
    out += segment_to_jsonl(s);
    out += '\n';
  }
  return out;
}

inline std::string warning_to_jsonl(const Warning& w) {
  nlohmann::ordered_json j{{"level", "warning"}, {"code", w.code}, {"pair", w.pair}, {"detail", w.detail}};
  return j.dump();
}

inline void write_pools(const std::filesystem::path& dir, const PoolSet& pools) {
  for (const auto& [pair, p] : pools.pairs) {
    write_file_atomic(dir / (pair.key() + ".train.jsonl"), segments_to_jsonl(p.training));
    write_file_atomic(dir / (pair.key() + ".examples.jsonl"), segments_to_jsonl(p.examples));
  }
}

inline PoolSet read_pools(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("io_error", "pool directory missing: " + dir.string());
  PoolSet out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  constexpr std::string_view kTrain = ".train.jsonl";
  constexpr std::string_view kExamples = ".examples.jsonl";
  for (const auto& f : files) {
    const auto name = f.filename().string();
    auto ends_with = [&](std::string_view suffix) {
      return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    const bool is_train = ends_with(kTrain);
    const bool is_examples = ends_with(kExamples);
    if (!is_train && !is_examples) continue;
    const auto key = name.substr(0, name.size() - (is_train ? kTrain.size() : kExamples.size()));
    const auto pair = parse_lang_pair(key);
    auto& p = out.pairs[pair];
    p.pair = pair;
    (is_train ? p.training : p.examples) = read_segments_file(f);
  }
  return out;
}

}  // namespace fsmt
