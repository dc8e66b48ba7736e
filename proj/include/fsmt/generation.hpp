#pragma once

// Batch generation against an OpenAI-compatible completions endpoint, with
// output post-processing and termination diagnostics.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "fsmt/common.hpp"
#include "fsmt/dataset.hpp"

namespace fsmt {

enum class GenerationMode { Pretrained, Finetuned };

inline std::string_view to_string(GenerationMode m) {
  return m == GenerationMode::Pretrained ? "pretrained" : "finetuned";
}

inline GenerationMode mode_from_string(std::string_view s) {
  if (s == "pretrained") return GenerationMode::Pretrained;
  if (s == "finetuned") return GenerationMode::Finetuned;
  throw Error("invalid_config", "unknown generation mode '" + std::string(s) + "'");
}

enum class Finish { Eos, NewlineTruncated, LengthCapped };

inline std::string_view to_string(Finish f) {
  switch (f) {
    case Finish::Eos: return "eos";
    case Finish::NewlineTruncated: return "newline_truncated";
    case Finish::LengthCapped: return "length_capped";
  }
  return "unknown";
}

inline Finish finish_from_string(std::string_view s) {
  if (s == "eos") return Finish::Eos;
  if (s == "newline_truncated") return Finish::NewlineTruncated;
  if (s == "length_capped") return Finish::LengthCapped;
  throw Error("parse_error", "unknown finish '" + std::string(s) + "'");
}

struct PostProcessed {
  std::string translation;
  Finish finish = Finish::Eos;
  bool operator==(const PostProcessed&) const = default;
};

/// Strips leading whitespace and keeps only the first line. A newline in
/// the output always yields NewlineTruncated, in either mode, so
/// overgeneration by finetuned models stays measurable. A literal EOS
/// marker ahead of any newline ends the translation cleanly. Otherwise the
/// endpoint's own stop reason decides.
inline PostProcessed postprocess(std::string_view raw, GenerationMode /*mode*/,
                                 Finish endpoint_finish = Finish::Eos) {
  const auto start = raw.find_first_not_of(" \t\r\n\f\v");
  auto body = start == std::string_view::npos ? std::string_view{} : raw.substr(start);
  const auto nl = body.find('\n');
  const auto eos = body.find(kEosMarker);
  if (eos != std::string_view::npos && eos < nl) return {std::string(body.substr(0, eos)), Finish::Eos};
  if (nl != std::string_view::npos) return {std::string(body.substr(0, nl)), Finish::NewlineTruncated};
  return {std::string(body), endpoint_finish};
}

using TokenCounter = std::function<std::size_t(std::string_view)>;

inline std::size_t count_whitespace_tokens(std::string_view s) {
  std::size_t n = 0;
  bool in_token = false;
  for (char c : s) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (!ws && !in_token) ++n;
    in_token = !ws;
  }
  return n;
}

struct GenerationResult {
  std::size_t index = 0;  // position in the input batch
  std::string segment_id;
  std::string pair;
  std::size_t n_shots = 0;
  std::string raw_output;
  std::string translation;
  Finish finish = Finish::Eos;
  std::size_t raw_token_count = 0;
  std::size_t translation_token_count = 0;
  std::optional<std::string> error;  // set on error rows
  std::string error_detail;

  bool ok() const { return !error.has_value(); }
  bool operator==(const GenerationResult&) const = default;
};

inline nlohmann::ordered_json to_json(const GenerationResult& r) {
  nlohmann::ordered_json j{{"index", r.index},
                           {"segment_id", r.segment_id},
                           {"pair", r.pair},
                           {"n_shots", r.n_shots},
                           {"status", r.ok() ? "ok" : "error"}};
  if (r.ok()) {
    j["raw_output"] = r.raw_output;
    j["translation"] = r.translation;
    j["finish"] = to_string(r.finish);
    j["raw_token_count"] = r.raw_token_count;
    j["translation_token_count"] = r.translation_token_count;
  } else {
    j["error"] = *r.error;
    j["detail"] = r.error_detail;
  }
  return j;
}

inline GenerationResult generation_from_json(const nlohmann::json& j) {
  GenerationResult r;
  r.index = j.at("index").get<std::size_t>();
  r.segment_id = j.at("segment_id").get<std::string>();
  r.pair = j.value("pair", "");
  r.n_shots = j.value("n_shots", std::size_t{0});
  if (j.at("status").get<std::string>() == "ok") {
    r.raw_output = j.at("raw_output").get<std::string>();
    r.translation = j.at("translation").get<std::string>();
    r.finish = finish_from_string(j.at("finish").get<std::string>());
    r.raw_token_count = j.at("raw_token_count").get<std::size_t>();
    r.translation_token_count = j.at("translation_token_count").get<std::size_t>();
  } else {
    r.error = j.at("error").get<std::string>();
    r.error_detail = j.value("detail", "");
  }
  return r;
}

inline std::vector<GenerationResult> read_generations(const std::filesystem::path& path) {
  std::vector<GenerationResult> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(generation_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("parse_error", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Endpoint client

struct EndpointConfig {
  std::string url = "http://127.0.0.1:8000";  // scheme://host:port
  std::string path = "/v1/completions";
  std::string model;
  std::string auth_env = "FSMT_API_KEY";  // bearer token source, if set
  int max_attempts = 5;
  std::chrono::milliseconds backoff_initial{500};
  std::chrono::milliseconds backoff_max{8000};
  std::chrono::seconds timeout{120};
  std::size_t concurrency = 8;
};

struct DecodingConfig {
  int max_tokens = 512;
  double temperature = 0.0;  // greedy
  GenerationMode mode = GenerationMode::Pretrained;
  std::optional<std::vector<std::string>> stop;  // default: ["\n"] pretrained, none finetuned
};

inline std::vector<std::string> stop_sequences(const DecodingConfig& d) {
  if (d.stop) return *d.stop;
  if (d.mode == GenerationMode::Pretrained) return {"\n"};
  return {};
}

inline std::string completion_request_body(std::string_view prompt, const EndpointConfig& ep,
                                           const DecodingConfig& dec) {
  nlohmann::ordered_json body;
  if (!ep.model.empty()) body["model"] = ep.model;
  body["prompt"] = prompt;
  body["max_tokens"] = dec.max_tokens;
  body["temperature"] = dec.temperature;
  body["stop"] = stop_sequences(dec);
  return body.dump();
}

struct CompletionOutcome {
  bool ok = false;
  bool unreachable = false;  // no HTTP response on any attempt
  std::string text;
  Finish finish = Finish::Eos;
  std::string error;  // error code for failed rows
  std::string detail;
  int attempts = 0;
};

/// One HTTP connection per instance; not shareable across threads.
class CompletionClient {
 public:
  CompletionClient(EndpointConfig ep, DecodingConfig dec)
      : ep_(std::move(ep)), dec_(std::move(dec)), client_(ep_.url) {
    client_.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(ep_.timeout).count(), 0);
    client_.set_read_timeout(ep_.timeout.count(), 0);
    client_.set_write_timeout(ep_.timeout.count(), 0);
    if (const char* token = ep_.auth_env.empty() ? nullptr : std::getenv(ep_.auth_env.c_str())) {
      if (*token) client_.set_bearer_token_auth(token);
    }
  }

  CompletionOutcome complete(std::string_view prompt) {
    CompletionOutcome out;
    const auto body = completion_request_body(prompt, ep_, dec_);
    bool any_response = false;
    std::string last;
    for (int attempt = 1; attempt <= ep_.max_attempts; ++attempt) {
      out.attempts = attempt;
      if (attempt > 1) std::this_thread::sleep_for(backoff(attempt - 1));
      auto res = client_.Post(ep_.path, body, "application/json");
      if (!res) {
        last = "connection failed: " + httplib::to_string(res.error());
        continue;
      }
      any_response = true;
      if (res->status == 200) return parse_response(res->body, out);
      if (res->status == 429 || res->status >= 500) {
        last = res->status == 429 ? "rate_limited" : "http_status{" + std::to_string(res->status) + "}";
        continue;
      }
      out.error = "http_status{" + std::to_string(res->status) + "}";
      out.detail = res->body.substr(0, 200);
      return out;
    }
    out.unreachable = !any_response;
    out.error = any_response ? "max_retries_exceeded" : "endpoint_unreachable";
    out.detail = last;
    return out;
  }

  std::chrono::milliseconds backoff(int retry) const {
    auto d = ep_.backoff_initial;
    for (int i = 1; i < retry && d < ep_.backoff_max; ++i) d *= 2;
    return std::min(d, ep_.backoff_max);
  }

 private:
  CompletionOutcome& parse_response(const std::string& body, CompletionOutcome& out) const {
    try {
      const auto j = nlohmann::json::parse(body);
      const auto& choice = j.at("choices").at(0);
      out.text = choice.at("text").get<std::string>();
      const auto reason = choice.contains("finish_reason") && choice["finish_reason"].is_string()
                              ? choice["finish_reason"].get<std::string>()
                              : std::string("stop");
      // Servers that report which stop string fired (vLLM's stop_reason).
      const bool newline_stop = choice.contains("stop_reason") && choice["stop_reason"].is_string() &&
                                choice["stop_reason"].get<std::string>().find('\n') != std::string::npos;
      out.finish = reason == "length" ? Finish::LengthCapped
                   : newline_stop     ? Finish::NewlineTruncated
                                      : Finish::Eos;
      out.ok = true;
    } catch (const nlohmann::json::exception& e) {
      out.ok = false;
      out.error = "bad_response";
      out.detail = e.what();
    }
    return out;
  }

  EndpointConfig ep_;
  DecodingConfig dec_;
  httplib::Client client_;
};

inline GenerationResult make_result(std::size_t index, const InstructionRecord& rec,
                                    const CompletionOutcome& outcome, GenerationMode mode,
                                    const TokenCounter& counter) {
  GenerationResult r;
  r.index = index;
  r.segment_id = rec.segment_id;
  r.pair = rec.pair.key();
  r.n_shots = rec.n_shots;
  if (!outcome.ok) {
    r.error = outcome.error;
    r.error_detail = outcome.detail;
    return r;
  }
  const auto pp = postprocess(outcome.text, mode, outcome.finish);
  r.raw_output = outcome.text;
  r.translation = pp.translation;
  r.finish = pp.finish;
  r.raw_token_count = counter(r.raw_output);
  r.translation_token_count = counter(r.translation);
  return r;
}

struct BatchOptions {
  std::filesystem::path output;
  bool resume = false;
  TokenCounter token_counter = count_whitespace_tokens;
  std::ostream* log = nullptr;  // retry / progress diagnostics
};

struct BatchSummary {
  std::size_t total = 0;
  std::size_t ok = 0;
  std::size_t errors = 0;
  std::size_t reused = 0;    // rows carried over from a previous partial run
  std::size_t written = 0;   // rows in the output file
  std::size_t retries = 0;
  bool aborted = false;
  std::string abort_reason;
};

inline std::filesystem::path resume_marker_path(const std::filesystem::path& output) {
  auto p = output;
  p += ".resume";
  return p;
}

/// Runs every record through the endpoint and writes one result row per
/// record, in input order. Failed rows become error rows. If the endpoint
/// is unreachable the batch stops, keeps the in-order prefix it has, and
/// leaves a resume marker beside the output. With `resume`, rows already
/// present with status ok are reused and only the rest are requested.
inline BatchSummary run_batch(std::span<const InstructionRecord> records, const EndpointConfig& ep,
                              const DecodingConfig& dec, const BatchOptions& opt) {
  namespace fs = std::filesystem;
  BatchSummary summary;
  summary.total = records.size();
  std::vector<std::optional<GenerationResult>> results(records.size());

  if (opt.resume && fs::exists(opt.output)) {
    for (auto& row : read_generations(opt.output)) {
      if (row.index < records.size() && row.ok() && row.segment_id == records[row.index].segment_id) {
        results[row.index] = std::move(row);
        ++summary.reused;
      }
    }
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!results[i]) todo.push_back(i);
  }

  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::atomic<std::size_t> retries{0};
  std::string abort_reason;
  std::size_t finished_workers = 0;

  const auto n_workers = std::min<std::size_t>(std::max<std::size_t>(ep.concurrency, 1), todo.size());
  auto worker = [&] {
    CompletionClient client(ep, dec);
    for (;;) {
      if (abort.load()) break;
      const auto t = next.fetch_add(1);
      if (t >= todo.size()) break;
      const auto i = todo[t];
      auto outcome = client.complete(records[i].prompt);
      retries += static_cast<std::size_t>(outcome.attempts > 0 ? outcome.attempts - 1 : 0);
      std::lock_guard lock(mu);
      if (outcome.unreachable) {
        if (!abort.exchange(true)) abort_reason = "endpoint_unreachable: " + outcome.detail;
        break;
      }
      if (opt.log && outcome.attempts > 1) {
        *opt.log << "row " << i << " (" << records[i].segment_id << "): " << outcome.attempts - 1
                 << " retries" << (outcome.ok ? "" : ", failed: " + outcome.error) << "\n";
      }
      results[i] = make_result(i, records[i], outcome, dec.mode, opt.token_counter);
      cv.notify_one();
    }
    std::lock_guard lock(mu);
    ++finished_workers;
    cv.notify_one();
  };

  if (opt.output.has_parent_path()) fs::create_directories(opt.output.parent_path());
  std::ofstream out(opt.output, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + opt.output.string());
  std::vector<std::thread> threads;
  threads.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);

  // Emit the contiguous finished prefix as it grows.
  std::size_t emitted = 0;
  {
    std::unique_lock lock(mu);
    for (;;) {
      while (emitted < results.size() && results[emitted]) {
        out << to_json(*results[emitted]).dump() << '\n';
        ++emitted;
      }
      out.flush();
      if (emitted == results.size() || finished_workers == n_workers) break;
      cv.wait(lock);
    }
    while (emitted < results.size() && results[emitted]) {
      out << to_json(*results[emitted]).dump() << '\n';
      ++emitted;
    }
  }
  for (auto& t : threads) t.join();
  out.flush();
  out.close();

  summary.written = emitted;
  summary.retries = retries.load();
  for (std::size_t i = 0; i < emitted; ++i) (results[i]->ok() ? summary.ok : summary.errors)++;

  const auto marker = resume_marker_path(opt.output);
  if (emitted < results.size()) {
    summary.aborted = true;
    summary.abort_reason = abort_reason.empty() ? "incomplete" : abort_reason;
  }
  if (summary.aborted || summary.errors > 0) {
    // Error rows count as missing for a later --resume.
    nlohmann::ordered_json m{{"completed_rows", emitted},
                             {"error_rows", summary.errors},
                             {"total_rows", results.size()},
                             {"reason", summary.aborted ? summary.abort_reason : "error_rows"}};
    write_file_atomic(marker, m.dump(2) + "\n");
  } else {
    fs::remove(marker);
  }
  if (opt.log) {
    *opt.log << "generation: " << summary.ok << " ok, " << summary.errors << " errors, " << summary.reused
             << " reused, " << summary.retries << " retries\n";
  }
  return summary;
}

}  // namespace fsmt
