#pragma once

// Instruction templates for translation prompts: one zero-shot layout and
// three few-shot layouts, with a strict parser for round-tripping.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fsmt/common.hpp"

namespace fsmt {

enum class TemplateId { ZeroShot, FewShot1, FewShot2, FewShot3 };

/// Format used whenever a few-shot prompt is requested without naming one.
inline constexpr TemplateId kDefaultFewShotTemplate = TemplateId::FewShot2;

inline constexpr std::size_t kMaxShots = 5;

inline std::string_view to_string(TemplateId id) {
  switch (id) {
    case TemplateId::ZeroShot: return "zero_shot";
    case TemplateId::FewShot1: return "few_shot_1";
    case TemplateId::FewShot2: return "few_shot_2";
    case TemplateId::FewShot3: return "few_shot_3";
  }
  return "unknown";
}

inline TemplateId template_from_string(std::string_view s) {
  for (auto id : {TemplateId::ZeroShot, TemplateId::FewShot1, TemplateId::FewShot2, TemplateId::FewShot3}) {
    if (s == to_string(id)) return id;
  }
  throw Error("invalid_template", "unknown template '" + std::string(s) + "'");
}

inline bool is_few_shot(TemplateId id) { return id != TemplateId::ZeroShot; }

struct Shot {
  std::string src;
  std::string tgt;
  bool operator==(const Shot&) const = default;
};

struct PromptSpec {
  TemplateId tmpl = TemplateId::ZeroShot;
  std::string src_name;  // display names, e.g. "German"
  std::string tgt_name;
  std::string source;
  std::vector<Shot> shots;
  bool operator==(const PromptSpec&) const = default;
};

/// English display names for the built-in language codes. Other codes need
/// a user-supplied name.
class LanguageNames {
 public:
  LanguageNames()
      : names_{{"nl", "Dutch"},      {"fr", "French"},  {"de", "German"}, {"pt", "Portuguese"},
               {"ru", "Russian"},    {"en", "English"}, {"zh", "Chinese"}} {}

  void set(std::string code, std::string name) { names_[std::move(code)] = std::move(name); }

  std::optional<std::string> find(const std::string& code) const {
    auto it = names_.find(code);
    if (it == names_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& at(const std::string& code) const {
    auto it = names_.find(code);
    if (it == names_.end()) {
      throw Error("unknown_language", "no display name for '" + code + "'; supply one explicitly");
    }
    return it->second;
  }

 private:
  std::map<std::string, std::string> names_;
};

namespace detail {

inline constexpr std::string_view kInstruction = "Translate the source text from ";
inline constexpr std::string_view kConsiderN = "Consider the following ";
inline constexpr std::string_view kTranslationsFrom = " translations from ";
inline constexpr std::string_view kConsiderPlain = "Consider the following translations from ";
inline constexpr std::string_view kExample = "Example ";
inline constexpr std::string_view kSource = "Source: ";
inline constexpr std::string_view kTarget = "Target:";
inline constexpr std::string_view kTo = " to ";
// Separator between the examples section and the final instruction.
inline constexpr std::string_view kSectionBreak = "\n";

inline void check_text(std::string_view what, std::string_view text) {
  if (text.find('\n') != std::string_view::npos) {
    throw Error("invalid_prompt_text", std::string(what) + " contains a newline");
  }
}

inline void check_name(std::string_view name) {
  if (name.empty() || name.find('\n') != std::string_view::npos ||
      name.find(kTo) != std::string_view::npos || name.back() == '.') {
    throw Error("invalid_language_name", "'" + std::string(name) + "'");
  }
}

inline void append_direction(std::string& out, const PromptSpec& s) {
  out += s.src_name;
  out += kTo;
  out += s.tgt_name;
  out += ".\n";
}

inline void append_pair(std::string& out, std::string_view src, std::string_view tgt) {
  out += kSource;
  out += src;
  out += '\n';
  out += kTarget;
  out += ' ';
  out += tgt;
  out += '\n';
}

inline void append_query(std::string& out, const PromptSpec& s) {
  out += kInstruction;
  append_direction(out, s);
  out += kSource;
  out += s.source;
  out += '\n';
  out += kTarget;
}

}  // namespace detail

inline void validate(const PromptSpec& spec) {
  const auto n = spec.shots.size();
  if (spec.tmpl == TemplateId::ZeroShot ? n != 0 : (n < 1 || n > kMaxShots)) {
    throw Error("shot_count_mismatch", std::string(to_string(spec.tmpl)) + " with " +
                                           std::to_string(n) + " shots");
  }
  detail::check_name(spec.src_name);
  detail::check_name(spec.tgt_name);
  detail::check_text("source", spec.source);
  for (const auto& shot : spec.shots) {
    detail::check_text("shot source", shot.src);
    detail::check_text("shot target", shot.tgt);
  }
}

/// Renders a prompt. Lines are LF-separated and the prompt ends in
/// "Target:" with no trailing space or newline.
inline std::string render(const PromptSpec& spec) {
  validate(spec);
  using namespace detail;
  std::string out;
  switch (spec.tmpl) {
    case TemplateId::ZeroShot:
      break;
    case TemplateId::FewShot1:
      for (const auto& shot : spec.shots) {
        out += kInstruction;
        append_direction(out, spec);
        append_pair(out, shot.src, shot.tgt);
      }
      break;
    case TemplateId::FewShot2:
      out += kConsiderN;
      out += std::to_string(spec.shots.size());
      out += kTranslationsFrom;
      append_direction(out, spec);
      for (std::size_t i = 0; i < spec.shots.size(); ++i) {
        out += kExample;
        out += std::to_string(i + 1);
        out += '\n';
        append_pair(out, spec.shots[i].src, spec.shots[i].tgt);
      }
      out += kSectionBreak;
      break;
    case TemplateId::FewShot3:
      out += kConsiderPlain;
      append_direction(out, spec);
      for (const auto& shot : spec.shots) append_pair(out, shot.src, shot.tgt);
      out += kSectionBreak;
      break;
  }
  append_query(out, spec);
  return out;
}

class PromptParseError : public Error {
 public:
  PromptParseError(std::size_t offset, std::string expected)
      : Error("malformed_prompt",
              "at byte " + std::to_string(offset) + ": expected " + expected),
        offset_(offset),
        expected_(std::move(expected)) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::string& expected() const noexcept { return expected_; }

 private:
  std::size_t offset_;
  std::string expected_;
};

namespace detail {

class PromptCursor {
 public:
  explicit PromptCursor(std::string_view text) : text_(text) {}

  bool at_end() const { return pos_ == text_.size(); }
  std::size_t pos() const { return pos_; }

  bool starts_with(std::string_view lit) const { return text_.substr(pos_).starts_with(lit); }

  void expect(std::string_view lit) {
    std::size_t i = 0;
    while (i < lit.size() && pos_ + i < text_.size() && text_[pos_ + i] == lit[i]) ++i;
    if (i < lit.size()) throw PromptParseError(pos_ + i, quote(lit));
    pos_ += lit.size();
  }

  void expect_end() {
    if (!at_end()) throw PromptParseError(pos_, "end of prompt");
  }

  /// Text up to (not including) the next newline; the newline is consumed.
  std::string line() {
    const auto nl = text_.find('\n', pos_);
    if (nl == std::string_view::npos) throw PromptParseError(text_.size(), "newline");
    std::string out(text_.substr(pos_, nl - pos_));
    pos_ = nl + 1;
    return out;
  }

  std::size_t number() {
    std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < text_.size() && text_[pos_] >= '0' && text_[pos_] <= '9' && pos_ - start < 6) {
      value = value * 10 + static_cast<std::size_t>(text_[pos_] - '0');
      ++pos_;
    }
    if (pos_ == start) throw PromptParseError(start, "number");
    return value;
  }

  /// "X to Y.\n" -> (X, Y)
  std::pair<std::string, std::string> direction() {
    const std::size_t start = pos_;
    auto rest = line();
    if (rest.empty() || rest.back() != '.') throw PromptParseError(pos_ - 1, "'.'");
    rest.pop_back();
    const auto to = rest.find(kTo);
    if (to == std::string::npos) throw PromptParseError(start, quote(kTo));
    return {rest.substr(0, to), rest.substr(to + kTo.size())};
  }

 private:
  static std::string quote(std::string_view lit) {
    std::string out = "'";
    for (char c : lit) out += c == '\n' ? std::string("\\n") : std::string(1, c);
    return out + "'";
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline void expect_direction(PromptCursor& cur, PromptSpec& spec, bool first) {
  const auto start = cur.pos();
  auto [src, tgt] = cur.direction();
  if (first) {
    spec.src_name = std::move(src);
    spec.tgt_name = std::move(tgt);
  } else if (src != spec.src_name || tgt != spec.tgt_name) {
    throw PromptParseError(start, "'" + spec.src_name + kTo.data() + spec.tgt_name + ".'");
  }
}

inline Shot expect_pair(PromptCursor& cur) {
  Shot shot;
  cur.expect(kSource);
  shot.src = cur.line();
  cur.expect(kTarget);
  cur.expect(" ");
  shot.tgt = cur.line();
  return shot;
}

inline void expect_query(PromptCursor& cur, PromptSpec& spec, bool first) {
  cur.expect(kInstruction);
  expect_direction(cur, spec, first);
  cur.expect(kSource);
  spec.source = cur.line();
  cur.expect(kTarget);
  cur.expect_end();
}

}  // namespace detail

/// Inverse of render(). Throws PromptParseError with the byte offset of
/// the first token that does not fit the grammar.
inline PromptSpec parse(std::string_view prompt) {
  using namespace detail;
  PromptCursor cur(prompt);
  PromptSpec spec;

  if (cur.starts_with("C")) {
    cur.expect(kConsiderN);
    bool numbered = false;
    std::size_t declared = 0;
    std::size_t declared_at = cur.pos();
    if (!prompt.empty() && cur.pos() < prompt.size() && prompt[cur.pos()] >= '0' &&
        prompt[cur.pos()] <= '9') {
      numbered = true;
      declared = cur.number();
      cur.expect(kTranslationsFrom);
    } else {
      cur.expect(kConsiderPlain.substr(kConsiderN.size()));
    }
    expect_direction(cur, spec, true);
    spec.tmpl = numbered ? TemplateId::FewShot2 : TemplateId::FewShot3;
    while (!cur.starts_with(kSectionBreak)) {
      if (numbered) {
        cur.expect(kExample);
        const auto at = cur.pos();
        if (cur.number() != spec.shots.size() + 1) throw PromptParseError(at, "example index " + std::to_string(spec.shots.size() + 1));
        cur.expect("\n");
      }
      spec.shots.push_back(expect_pair(cur));
      if (spec.shots.size() > kMaxShots) throw PromptParseError(cur.pos(), "at most 5 examples");
    }
    cur.expect(kSectionBreak);
    if (numbered && declared != spec.shots.size()) {
      throw PromptParseError(declared_at, std::to_string(spec.shots.size()) + " (example count)");
    }
    if (spec.shots.empty()) throw PromptParseError(cur.pos(), "at least one example");
    expect_query(cur, spec, false);
    return spec;
  }

  // Zero-shot or repeated-instruction few-shot.
  bool first = true;
  for (;;) {
    cur.expect(kInstruction);
    expect_direction(cur, spec, first);
    first = false;
    cur.expect(kSource);
    const auto src = cur.line();
    cur.expect(kTarget);
    if (cur.at_end()) {
      spec.source = src;
      spec.tmpl = spec.shots.empty() ? TemplateId::ZeroShot : TemplateId::FewShot1;
      return spec;
    }
    cur.expect(" ");
    spec.shots.push_back({src, cur.line()});
    if (spec.shots.size() > kMaxShots) throw PromptParseError(cur.pos(), "at most 5 examples");
  }
}

/// End-of-sequence placeholder appended to training completions; trainers
/// replace it with their tokenizer's EOS token.
inline constexpr std::string_view kEosMarker = "<EOS>";

/// Training target paired with a rendered prompt: a single space (the
/// prompt ends in "Target:"), the reference, then the EOS placeholder.
inline std::string completion_for(std::string_view tgt_text) {
  std::string out;
  out.reserve(tgt_text.size() + 1 + kEosMarker.size());
  out += ' ';
  out += tgt_text;
  out += kEosMarker;
  return out;
}

}  // namespace fsmt
