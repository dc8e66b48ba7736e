#pragma once

// Instruction-dataset assembly (training mixtures and evaluation sets) and
// training-configuration manifests.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "fsmt/common.hpp"
#include "fsmt/corpus.hpp"
#include "fsmt/fewshot.hpp"
#include "fsmt/templates.hpp"

namespace fsmt {

enum class Split { Train, Dev, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "unknown";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw Error("invalid_record", "unknown split '" + std::string(s) + "'");
}

struct InstructionRecord {
  std::string prompt;
  std::string completion;
  LangPair pair;
  std::size_t n_shots = 0;
  TemplateId tmpl = TemplateId::ZeroShot;
  std::vector<std::string> shot_ids;
  std::string segment_id;
  Split split = Split::Train;

  bool operator==(const InstructionRecord&) const = default;
};

inline std::string completion_for(const ParallelSegment& seg) { return completion_for(seg.tgt_text); }

inline nlohmann::ordered_json to_json(const InstructionRecord& r) {
  return nlohmann::ordered_json{{"prompt", r.prompt},
                                {"completion", r.completion},
                                {"pair", r.pair.key()},
                                {"n_shots", r.n_shots},
                                {"template", to_string(r.tmpl)},
                                {"shot_ids", r.shot_ids},
                                {"segment_id", r.segment_id},
                                {"split", to_string(r.split)}};
}

inline std::string to_jsonl(const InstructionRecord& r) { return to_json(r).dump(); }

inline InstructionRecord record_from_json(const nlohmann::json& j) {
  InstructionRecord r;
  r.prompt = j.at("prompt").get<std::string>();
  r.completion = j.at("completion").get<std::string>();
  r.pair = parse_lang_pair(j.at("pair").get<std::string>());
  r.n_shots = j.at("n_shots").get<std::size_t>();
  r.tmpl = template_from_string(j.at("template").get<std::string>());
  r.shot_ids = j.at("shot_ids").get<std::vector<std::string>>();
  r.segment_id = j.at("segment_id").get<std::string>();
  r.split = split_from_string(j.at("split").get<std::string>());
  return r;
}

/// Checks the metadata invariants and that the prompt parses back into a
/// spec consistent with them. Returns the parsed spec.
inline PromptSpec validate(const InstructionRecord& r) {
  if (r.n_shots != r.shot_ids.size()) {
    throw Error("invalid_record", r.segment_id + ": n_shots != |shot_ids|");
  }
  if ((r.n_shots == 0) != (r.tmpl == TemplateId::ZeroShot)) {
    throw Error("invalid_record", r.segment_id + ": template does not match shot count");
  }
  auto spec = parse(r.prompt);
  if (spec.tmpl != r.tmpl || spec.shots.size() != r.n_shots) {
    throw Error("invalid_record", r.segment_id + ": prompt disagrees with metadata");
  }
  return spec;
}

inline std::vector<InstructionRecord> read_records(const std::filesystem::path& path) {
  std::vector<InstructionRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("parse_error", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_records(const std::filesystem::path& path, std::span<const InstructionRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_jsonl(r);
    out += '\n';
  }
  write_file_atomic(path, out);
}

namespace detail {

inline PromptSpec spec_for(const ParallelSegment& target, std::span<const ParallelSegment> pool,
                           const ShotDraw& draw, TemplateId few_shot_template,
                           const LanguageNames& names) {
  PromptSpec spec;
  spec.tmpl = draw.n_shots == 0 ? TemplateId::ZeroShot : few_shot_template;
  spec.src_name = names.at(target.pair.src);
  spec.tgt_name = names.at(target.pair.tgt);
  spec.source = target.src_text;
  for (auto i : draw.indices) spec.shots.push_back({pool[i].src_text, pool[i].tgt_text});
  return spec;
}

}  // namespace detail

struct TrainingSetOptions {
  MixturePolicy policy;
  std::size_t n_records = 0;
  std::uint64_t seed = 0;
  TemplateId few_shot_template = kDefaultFewShotTemplate;
};

/// Training records drawn from the pair mixture. The shots for a record are
/// seeded by (seed, segment id, how often that segment was drawn before),
/// so one segment's shots never depend on another segment's.
inline std::vector<InstructionRecord> build_training_set(const PoolSet& pools,
                                                         const TrainingSetOptions& opt,
                                                         const LanguageNames& names = {}) {
  if (!is_few_shot(opt.few_shot_template)) {
    throw Error("invalid_template", "training few-shot template must be a few-shot format");
  }
  std::vector<InstructionRecord> out;
  if (opt.n_records == 0) return out;
  for (const auto& [pair, p] : pools.pairs) {
    if (p.training.empty()) continue;
    if (p.examples.size() < opt.policy.max_shots) {
      throw Error("insufficient_examples", pair.key() + ": example pool has " +
                                               std::to_string(p.examples.size()) + " entries");
    }
  }
  MixtureIterator mixture(pools, opt.seed);
  std::unordered_map<std::string, std::uint64_t> occurrences;
  out.reserve(opt.n_records);
  for (std::size_t i = 0; i < opt.n_records; ++i) {
    const auto draw = mixture.next();
    const auto& seg = draw.segment;
    const auto& examples = pools.pairs.at(draw.pair).examples;
    auto rng = shot_rng(opt.seed, seg.id, occurrences[seg.id]++);
    const auto shots = draw_training_shots(opt.policy, examples, seg.id, rng);
    const auto spec = detail::spec_for(seg, examples, shots, opt.few_shot_template, names);
    out.push_back({render(spec), completion_for(seg), seg.pair, shots.n_shots, spec.tmpl,
                   shots.examples, seg.id, Split::Train});
  }
  return out;
}

struct EvalSetOptions {
  std::vector<std::size_t> shot_settings{0, 5};
  TemplateId few_shot_template = kDefaultFewShotTemplate;
  std::uint64_t seed = 0;
  bool strip_references = false;
  Split split = Split::Test;
};

/// One record per test segment per shot setting, segment-major. The
/// completion carries the plain reference (for scoring), or "" when
/// references are stripped.
inline std::vector<InstructionRecord> build_eval_set(std::span<const ParallelSegment> test_segments,
                                                     std::span<const ParallelSegment> dev_pool,
                                                     const EvalSetOptions& opt,
                                                     const LanguageNames& names = {}) {
  if (!is_few_shot(opt.few_shot_template)) {
    throw Error("invalid_template", "eval few-shot template must be a few-shot format");
  }
  std::size_t max_k = 0;
  for (auto k : opt.shot_settings) {
    if (k > kMaxShots) throw Error("shot_count_mismatch", "shot setting " + std::to_string(k));
    max_k = std::max(max_k, k);
  }
  std::map<LangPair, std::vector<ParallelSegment>> dev_by_pair;
  for (const auto& s : dev_pool) dev_by_pair[s.pair].push_back(s);

  if (max_k > 0) {
    std::map<LangPair, std::size_t> needed;
    for (const auto& s : test_segments) needed[s.pair] = dev_by_pair[s.pair].size();
    std::string problems;
    for (const auto& [pair, have] : needed) {
      if (have < max_k + 1) {
        if (!problems.empty()) problems += "; ";
        problems += pair.key() + ": dev pool has " + std::to_string(have) + ", needs " +
                    std::to_string(max_k + 1);
      }
    }
    if (!problems.empty()) throw Error("insufficient_dev_pool", problems);
  }

  std::vector<InstructionRecord> out;
  out.reserve(test_segments.size() * opt.shot_settings.size());
  for (const auto& seg : test_segments) {
    const auto& pool = dev_by_pair[seg.pair];
    for (auto k : opt.shot_settings) {
      auto rng = shot_rng(opt.seed, seg.id, k);
      const auto shots = draw_eval_shots(pool, seg.id, k, rng);
      const auto spec = detail::spec_for(seg, pool, shots, opt.few_shot_template, names);
      out.push_back({render(spec), opt.strip_references ? std::string{} : seg.tgt_text, seg.pair,
                     shots.n_shots, spec.tmpl, shots.examples, seg.id, opt.split});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training manifests

enum class TrainingMethod { Lora, FullFinetune };

inline std::string_view to_string(TrainingMethod m) {
  return m == TrainingMethod::Lora ? "lora" : "full_ft";
}

inline TrainingMethod method_from_string(std::string_view s) {
  if (s == "lora") return TrainingMethod::Lora;
  if (s == "full_ft") return TrainingMethod::FullFinetune;
  throw Error("invalid_method", "unknown training method '" + std::string(s) + "'");
}

inline constexpr int kManifestSchemaVersion = 1;

struct TrainingManifest {
  TrainingMethod method = TrainingMethod::Lora;
  std::string optimizer = "AdamW";
  double learning_rate = 2e-4;
  std::string scheduler = "linear";
  int warmup_steps = 500;
  int batch_size = 8;
  double weight_decay = 0.0;
  // LoRA only.
  std::optional<int> lora_r = 256;
  std::optional<int> lora_alpha = 512;
  std::optional<double> dropout = 0.05;
  // The searched grid's best row is 0.01; one prose mention says 0.001.
  std::optional<double> label_smoothing = 0.01;

  bool operator==(const TrainingManifest&) const = default;
};

/// Reference configuration for each method. Overriding the LoRA
/// rank keeps alpha = 2r.
inline TrainingManifest make_manifest(TrainingMethod method, std::optional<int> lora_r = std::nullopt) {
  TrainingManifest m;
  m.method = method;
  if (method == TrainingMethod::FullFinetune) {
    m.learning_rate = 1e-6;
    m.scheduler = "constant";
    m.warmup_steps = 0;
    m.batch_size = 256;
    m.weight_decay = 0.0;
    m.lora_r.reset();
    m.lora_alpha.reset();
    m.dropout.reset();
    m.label_smoothing.reset();
    if (lora_r) throw Error("invalid_manifest", "lora_r only applies to method lora");
    return m;
  }
  if (lora_r) {
    if (*lora_r < 1) throw Error("invalid_manifest", "lora_r must be >= 1");
    m.lora_r = *lora_r;
    m.lora_alpha = 2 * *lora_r;
  }
  return m;
}

inline void validate(const TrainingManifest& m) {
  if (m.method == TrainingMethod::Lora) {
    if (!m.lora_r || !m.lora_alpha || !m.dropout) {
      throw Error("invalid_manifest", "lora manifest needs lora_r, lora_alpha and dropout");
    }
    if (*m.lora_alpha != 2 * *m.lora_r) throw Error("invalid_manifest", "lora_alpha must equal 2 * lora_r");
  } else if (m.lora_r || m.lora_alpha) {
    throw Error("invalid_manifest", "full_ft manifest must not carry LoRA fields");
  }
  if (!(m.learning_rate > 0.0) || m.batch_size < 1 || m.warmup_steps < 0 || m.weight_decay < 0.0) {
    throw Error("invalid_manifest", "optimizer settings out of range");
  }
}

inline nlohmann::ordered_json to_json(const TrainingManifest& m) {
  validate(m);
  nlohmann::ordered_json j{{"schema_version", kManifestSchemaVersion},
                           {"method", to_string(m.method)},
                           {"optimizer", m.optimizer},
                           {"learning_rate", m.learning_rate},
                           {"scheduler", m.scheduler},
                           {"warmup_steps", m.warmup_steps},
                           {"batch_size", m.batch_size},
                           {"weight_decay", m.weight_decay}};
  if (m.lora_r) j["lora_r"] = *m.lora_r;
  if (m.lora_alpha) j["lora_alpha"] = *m.lora_alpha;
  if (m.dropout) j["dropout"] = *m.dropout;
  if (m.label_smoothing) j["label_smoothing"] = *m.label_smoothing;
  return j;
}

inline TrainingManifest manifest_from_json(const nlohmann::json& j) {
  TrainingManifest m;
  m.method = method_from_string(j.at("method").get<std::string>());
  m.optimizer = j.at("optimizer").get<std::string>();
  m.learning_rate = j.at("learning_rate").get<double>();
  m.scheduler = j.at("scheduler").get<std::string>();
  m.warmup_steps = j.at("warmup_steps").get<int>();
  m.batch_size = j.at("batch_size").get<int>();
  m.weight_decay = j.at("weight_decay").get<double>();
  auto opt_int = [&](const char* k) { return j.contains(k) ? std::optional<int>(j.at(k).get<int>()) : std::nullopt; };
  auto opt_dbl = [&](const char* k) { return j.contains(k) ? std::optional<double>(j.at(k).get<double>()) : std::nullopt; };
  m.lora_r = opt_int("lora_r");
  m.lora_alpha = opt_int("lora_alpha");
  m.dropout = opt_dbl("dropout");
  m.label_smoothing = opt_dbl("label_smoothing");
  validate(m);
  return m;
}

inline void emit_manifest(const std::filesystem::path& path, const TrainingManifest& m) {
  write_file_atomic(path, to_json(m).dump(2) + "\n");
}

}  // namespace fsmt
