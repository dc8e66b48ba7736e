#pragma once

// Corpus- and sentence-level BLEU and chrF, numerically equivalent to the
// sacreBLEU reference implementation (13a tokenization, single reference),
// plus ingestion of externally computed COMET / COMETKiwi scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fsmt/common.hpp"

namespace fsmt {

namespace utf8 {

/// Decodes UTF-8; invalid bytes map to U+FFFD one byte at a time.
inline std::u32string decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0xFFFD;
    std::size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      cp = c & 0x07;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (i + len > s.size()) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

/// Python's str.isspace() set, which drives str.split() and str.rstrip().
constexpr bool is_space(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || (c >= 0x1C && c <= 0x20) || c == 0x85 || c == 0xA0 ||
         c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 ||
         c == 0x202F || c == 0x205F || c == 0x3000;
}

}  // namespace utf8

/// Whitespace split with Python str.split() semantics.
inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char32_t cp : utf8::decode(s)) {
    if (utf8::is_space(cp)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      utf8::append(cur, cp);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string rstrip_unicode(std::string_view s) {
  auto cps = utf8::decode(s);
  while (!cps.empty() && utf8::is_space(cps.back())) cps.pop_back();
  std::string out;
  for (auto cp : cps) utf8::append(out, cp);
  return out;
}

enum class Tokenizer { Thirteen_a, Char, None };

inline std::string_view to_string(Tokenizer t) {
  switch (t) {
    case Tokenizer::Thirteen_a: return "13a";
    case Tokenizer::Char: return "char";
    case Tokenizer::None: return "none";
  }
  return "unknown";
}

/// Character-level tokenization is used for Chinese targets.
inline Tokenizer tokenizer_for_target(std::string_view lang) {
  return lang == "zh" ? Tokenizer::Char : Tokenizer::Thirteen_a;
}

namespace detail {

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

inline bool is_13a_symbol(unsigned char c) {
  return (c >= '{' && c <= '~') || (c >= '[' && c <= '`') || (c >= ' ' && c <= '&') ||
         (c >= '(' && c <= '+') || (c >= ':' && c <= '@') || c == '/';
}

inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_period_comma(unsigned char c) { return c == '.' || c == ','; }

}  // namespace detail

/// mteval-v13a tokenization. The four regex passes only inspect ASCII
/// bytes, so scanning bytes is equivalent to scanning code points.
inline std::string tokenize_13a(std::string_view input) {
  using namespace detail;
  std::string line(input);
  replace_all(line, "<skipped>", "");
  replace_all(line, "-\n", "");
  replace_all(line, "\n", " ");
  if (line.find('&') != std::string::npos) {
    replace_all(line, "&quot;", "\"");
    replace_all(line, "&amp;", "&");
    replace_all(line, "&lt;", "<");
    replace_all(line, "&gt;", ">");
  }
  line = " " + line + " ";

  std::string a;
  a.reserve(line.size() * 2);
  for (unsigned char c : line) {
    if (is_13a_symbol(c)) {
      a += ' ';
      a += static_cast<char>(c);
      a += ' ';
    } else {
      a += static_cast<char>(c);
    }
  }
  // ([^0-9])([\.,]) -> "\1 \2 "
  std::string b;
  b.reserve(a.size() * 2);
  for (std::size_t i = 0; i < a.size();) {
    const auto c = static_cast<unsigned char>(a[i]);
    if (i + 1 < a.size() && !is_digit(c) && is_period_comma(static_cast<unsigned char>(a[i + 1]))) {
      b += a[i];
      b += ' ';
      b += a[i + 1];
      b += ' ';
      i += 2;
    } else {
      b += a[i++];
    }
  }
  // ([\.,])([^0-9]) -> " \1 \2"
  std::string c3;
  c3.reserve(b.size() * 2);
  for (std::size_t i = 0; i < b.size();) {
    const auto c = static_cast<unsigned char>(b[i]);
    if (i + 1 < b.size() && is_period_comma(c) && !is_digit(static_cast<unsigned char>(b[i + 1]))) {
      c3 += ' ';
      c3 += b[i];
      c3 += ' ';
      c3 += b[i + 1];
      i += 2;
    } else {
      c3 += b[i++];
    }
  }
  // ([0-9])(-) -> "\1 \2 "
  std::string d;
  d.reserve(c3.size() * 2);
  for (std::size_t i = 0; i < c3.size();) {
    const auto c = static_cast<unsigned char>(c3[i]);
    if (i + 1 < c3.size() && is_digit(c) && c3[i + 1] == '-') {
      d += c3[i];
      d += " - ";
      i += 2;
    } else {
      d += c3[i++];
    }
  }
  std::string out;
  for (const auto& w : split_words(d)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline std::string tokenize_chars(std::string_view s) {
  std::string out;
  bool first = true;
  for (auto cp : utf8::decode(s)) {
    if (!first) out += ' ';
    first = false;
    utf8::append(out, cp);
  }
  return out;
}

inline std::string tokenize(std::string_view s, Tokenizer t) {
  switch (t) {
    case Tokenizer::Thirteen_a: return tokenize_13a(s);
    case Tokenizer::Char: return tokenize_chars(s);
    case Tokenizer::None: return std::string(s);
  }
  return std::string(s);
}

// ---------------------------------------------------------------------------
// BLEU

inline constexpr std::size_t kBleuOrder = 4;

/// Sufficient statistics; corpus BLEU is a sum of per-segment statistics.
struct BleuStats {
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;
  std::array<std::uint64_t, kBleuOrder> correct{};
  std::array<std::uint64_t, kBleuOrder> total{};

  BleuStats& operator+=(const BleuStats& o) {
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      correct[n] += o.correct[n];
      total[n] += o.total[n];
    }
    return *this;
  }
  bool operator==(const BleuStats&) const = default;
};

enum class BleuSmoothing { None, Exp };

struct BleuOptions {
  Tokenizer tokenizer = Tokenizer::Thirteen_a;
  BleuSmoothing smoothing = BleuSmoothing::None;
  bool effective_order = false;
  bool lowercase = false;
};

inline BleuOptions sentence_bleu_options(Tokenizer tok = Tokenizer::Thirteen_a) {
  return {tok, BleuSmoothing::Exp, true, false};
}

struct BleuScore {
  double score = 0.0;
  std::array<double, kBleuOrder> precisions{};
  double brevity_penalty = 1.0;
  BleuStats stats;
};

namespace detail {

using NgramCounts = std::unordered_map<std::string, std::uint64_t>;

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

inline NgramCounts word_ngrams(const std::vector<std::string>& toks) {
  NgramCounts counts;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (std::size_t k = 0; k < n; ++k) {
        if (k) key += '\x1f';
        key += toks[i + k];
      }
      ++counts[key];
    }
  }
  return counts;
}

inline std::size_t ngram_order(const std::string& key) {
  return 1 + static_cast<std::size_t>(std::count(key.begin(), key.end(), '\x1f'));
}

// log() floored like sacreBLEU's my_log, so a zero precision drives the
// geometric mean to zero instead of NaN.
inline double floored_log(double x) { return x == 0.0 ? -9999999999.0 : std::log(x); }

}  // namespace detail

inline BleuStats bleu_stats(std::string_view hyp, std::string_view ref, const BleuOptions& opt = {}) {
  auto prep = [&](std::string_view s) {
    auto t = rstrip_unicode(s);
    if (opt.lowercase) t = detail::ascii_lower(t);
    return split_words(tokenize(t, opt.tokenizer));
  };
  const auto h = prep(hyp);
  const auto r = prep(ref);
  const auto hyp_counts = detail::word_ngrams(h);
  const auto ref_counts = detail::word_ngrams(r);
  BleuStats st;
  st.hyp_len = h.size();
  st.ref_len = r.size();
  for (const auto& [gram, count] : hyp_counts) {
    const auto n = detail::ngram_order(gram) - 1;
    st.total[n] += count;
    if (auto it = ref_counts.find(gram); it != ref_counts.end()) st.correct[n] += std::min(count, it->second);
  }
  return st;
}

inline BleuScore bleu_from_stats(const BleuStats& st, const BleuOptions& opt = {}) {
  BleuScore out;
  out.stats = st;
  if (st.hyp_len < st.ref_len) {
    out.brevity_penalty =
        st.hyp_len > 0 ? std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len))
                       : 0.0;
  }
  const bool any_correct = std::any_of(st.correct.begin(), st.correct.end(), [](auto c) { return c > 0; });
  if (!any_correct) return out;

  double smooth = 1.0;
  std::size_t eff_order = kBleuOrder;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    if (st.total[n - 1] == 0) break;
    if (opt.effective_order) eff_order = n;
    if (st.correct[n - 1] == 0) {
      if (opt.smoothing == BleuSmoothing::Exp) {
        smooth *= 2;
        out.precisions[n - 1] = 100.0 / (smooth * static_cast<double>(st.total[n - 1]));
      }
    } else {
      out.precisions[n - 1] =
          100.0 * static_cast<double>(st.correct[n - 1]) / static_cast<double>(st.total[n - 1]);
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < eff_order; ++n) log_sum += detail::floored_log(out.precisions[n]);
  // exp(log(100)) overshoots by an ulp or two; a perfect match scores exactly 100.
  out.score = std::min(100.0, out.brevity_penalty * std::exp(log_sum / static_cast<double>(eff_order)));
  return out;
}

inline void check_corpus(std::size_t n_hyps, std::size_t n_refs) {
  if (n_hyps != n_refs) {
    throw Error("length_mismatch", std::to_string(n_hyps) + " hypotheses vs " + std::to_string(n_refs) +
                                       " references");
  }
  if (n_hyps == 0) throw Error("empty_corpus", "no segments to score");
}

/// Corpus BLEU. Defaults: 13a tokenization, no smoothing.
inline BleuScore corpus_bleu(std::span<const std::string> hyps, std::span<const std::string> refs,
                             const BleuOptions& opt = {}) {
  check_corpus(hyps.size(), refs.size());
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i], opt);
  return bleu_from_stats(total, opt);
}

/// Sentence BLEU with exponential smoothing and effective order.
inline double sentence_bleu(std::string_view hyp, std::string_view ref,
                            Tokenizer tok = Tokenizer::Thirteen_a) {
  const auto opt = sentence_bleu_options(tok);
  return bleu_from_stats(bleu_stats(hyp, ref, opt), opt).score;
}

inline std::string bleu_signature(const BleuOptions& opt) {
  std::string s = "nrefs:1|case:";
  s += opt.lowercase ? "lc" : "mixed";
  s += "|eff:";
  s += opt.effective_order ? "yes" : "no";
  s += "|tok:";
  s += to_string(opt.tokenizer);
  s += "|smooth:";
  s += opt.smoothing == BleuSmoothing::Exp ? "exp" : "none";
  s += "|version:fsmt-";
  s += kVersion;
  return s;
}

// ---------------------------------------------------------------------------
// chrF (character 6-grams, beta = 2, no word n-grams)

struct ChrfOptions {
  std::size_t char_order = 6;
  double beta = 2.0;
  bool lowercase = false;
};

/// Per-order (hyp, ref, match) counts.
struct ChrfStats {
  std::vector<std::array<std::uint64_t, 3>> orders;

  ChrfStats& operator+=(const ChrfStats& o) {
    if (orders.empty()) orders.resize(o.orders.size());
    for (std::size_t i = 0; i < o.orders.size(); ++i) {
      for (std::size_t k = 0; k < 3; ++k) orders[i][k] += o.orders[i][k];
    }
    return *this;
  }
};

namespace detail {

inline std::vector<std::unordered_map<std::u32string, std::uint64_t>> char_ngrams(std::string_view s,
                                                                                 std::size_t max_order) {
  std::u32string chars;
  for (auto cp : utf8::decode(s)) {
    if (!utf8::is_space(cp)) chars.push_back(cp);
  }
  std::vector<std::unordered_map<std::u32string, std::uint64_t>> out(max_order);
  for (std::size_t n = 1; n <= max_order; ++n) {
    for (std::size_t i = 0; i + n <= chars.size(); ++i) ++out[n - 1][chars.substr(i, n)];
  }
  return out;
}

}  // namespace detail

inline ChrfStats chrf_stats(std::string_view hyp, std::string_view ref, const ChrfOptions& opt = {}) {
  const auto h = detail::char_ngrams(opt.lowercase ? detail::ascii_lower(hyp) : std::string(hyp), opt.char_order);
  const auto r = detail::char_ngrams(opt.lowercase ? detail::ascii_lower(ref) : std::string(ref), opt.char_order);
  ChrfStats st;
  st.orders.resize(opt.char_order);
  for (std::size_t n = 0; n < opt.char_order; ++n) {
    std::uint64_t hyp_count = 0, match = 0, ref_count = 0;
    for (const auto& [gram, c] : h[n]) {
      hyp_count += c;
      if (auto it = r[n].find(gram); it != r[n].end()) match += std::min(c, it->second);
    }
    for (const auto& [gram, c] : r[n]) ref_count += c;
    // Hypothesis n-grams do not count when the reference has none.
    st.orders[n] = {r[n].empty() ? 0 : hyp_count, ref_count, match};
  }
  return st;
}

inline double chrf_from_stats(const ChrfStats& st, const ChrfOptions& opt = {}) {
  const double factor = opt.beta * opt.beta;
  double avg_prec = 0.0, avg_rec = 0.0;
  std::size_t effective = 0;
  for (const auto& [n_hyp, n_ref, n_match] : st.orders) {
    if (n_hyp > 0 && n_ref > 0) {
      avg_prec += static_cast<double>(n_match) / static_cast<double>(n_hyp);
      avg_rec += static_cast<double>(n_match) / static_cast<double>(n_ref);
      ++effective;
    }
  }
  if (effective == 0) return 0.0;
  avg_prec /= static_cast<double>(effective);
  avg_rec /= static_cast<double>(effective);
  if (avg_prec + avg_rec == 0.0) return 0.0;
  return 100.0 * (1 + factor) * avg_prec * avg_rec / (factor * avg_prec + avg_rec);
}

inline double chrf(std::span<const std::string> hyps, std::span<const std::string> refs,
                   const ChrfOptions& opt = {}) {
  check_corpus(hyps.size(), refs.size());
  ChrfStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += chrf_stats(hyps[i], refs[i], opt);
  return chrf_from_stats(total, opt);
}

inline double sentence_chrf(std::string_view hyp, std::string_view ref, const ChrfOptions& opt = {}) {
  return chrf_from_stats(chrf_stats(hyp, ref, opt), opt);
}

inline std::string chrf_signature(const ChrfOptions& opt = {}) {
  std::string s = "nrefs:1|case:";
  s += opt.lowercase ? "lc" : "mixed";
  s += "|eff:yes|nc:" + std::to_string(opt.char_order) + "|nw:0|space:no|version:fsmt-";
  s += kVersion;
  return s;
}

// ---------------------------------------------------------------------------
// External neural-metric scores

struct NeuralScores {
  std::optional<double> comet;  // x100
  std::optional<double> kiwi;   // x100
};

/// Reads a `segment_id\tcomet\tkiwi` TSV. Scores must lie in [0,1] and are
/// returned scaled by 100 to match table conventions.
inline std::map<std::string, NeuralScores> ingest_scores(std::istream& in) {
  std::map<std::string, NeuralScores> out;
  std::string line;
  std::size_t line_no = 0;
  auto parse_error = [&](const std::string& what) {
    return Error("parse_error", "line " + std::to_string(line_no) + ": " + what);
  };
  auto number = [&](const std::string& field) -> std::optional<double> {
    const auto s = trim(field);
    if (s.empty()) return std::nullopt;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw parse_error("bad number '" + s + "'");
    }
    if (used != s.size() || !std::isfinite(v)) throw parse_error("bad number '" + s + "'");
    if (v < 0.0 || v > 1.0) {
      throw Error("range_violation", "line " + std::to_string(line_no) + ": " + s + " outside [0,1]");
    }
    return v * 100.0;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "segment_id\tcomet\tkiwi") throw parse_error("header must be segment_id\\tcomet\\tkiwi");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 3) throw parse_error("expected 3 fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw parse_error("empty segment_id");
    const auto comet = number(f[1]);
    const auto kiwi = number(f[2]);
    NeuralScores s;
    s.comet = comet;
    s.kiwi = kiwi;
    if (!out.emplace(f[0], s).second) throw Error("duplicate_id", f[0]);
  }
  if (line_no == 0) throw Error("parse_error", "line 1: missing header");
  return out;
}

inline std::map<std::string, NeuralScores> ingest_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path.string());
  return ingest_scores(in);
}

}  // namespace fsmt
