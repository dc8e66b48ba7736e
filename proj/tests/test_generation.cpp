// Post-processing, the completion client and batch runs against the mock
// endpoint.

#include <gtest/gtest.h>

#include <sstream>

#include "fsmt/analysis.hpp"
#include "fsmt/generation.hpp"
#include "mock_server.hpp"
#include "test_util.hpp"

using namespace fsmt;
namespace ft = fsmt::testing;

namespace {

std::vector<InstructionRecord> make_records(std::size_t n) {
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

std::map<std::string, std::string> lookup(std::size_t n) {
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < n; ++i) {
    m["Satz Nummer " + std::to_string(i) + "."] = "Sentence number " + std::to_string(i) + ".";
  }
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

nlohmann::json example() {
  return nlohmann::json::parse(read_file(ft::fixture("overgeneration_example.json")));
}

}  // namespace

TEST(Postprocess, PretrainedOvergenerationKeepsFirstLine) {
  const auto ex = example();
  const auto pp = postprocess(ex["pretrained_raw"].get<std::string>(), GenerationMode::Pretrained);
  EXPECT_EQ(pp.translation, ex["expected_translation"].get<std::string>());
  EXPECT_EQ(pp.finish, Finish::NewlineTruncated);
}

TEST(Postprocess, FinetunedEosOutput) {
  const auto ex = example();
  const auto pp = postprocess(ex["finetuned_raw"].get<std::string>(), GenerationMode::Finetuned);
  EXPECT_EQ(pp.translation, ex["expected_translation"].get<std::string>());
  EXPECT_EQ(pp.finish, Finish::Eos);
  EXPECT_EQ(postprocess("  plain", GenerationMode::Finetuned, Finish::LengthCapped).finish, Finish::LengthCapped);
  EXPECT_EQ(postprocess("", GenerationMode::Finetuned).translation, "");
}

TEST(Client, RequestBodyAndStops) {
  EndpointConfig ep;
  DecodingConfig dec;
  auto j = nlohmann::json::parse(completion_request_body("P", ep, dec));
  EXPECT_EQ(j["prompt"], "P");
  EXPECT_EQ(j["max_tokens"], 512);
  EXPECT_EQ(j["temperature"], 0.0);
  EXPECT_EQ(j["stop"], nlohmann::json::array({"\n"}));
  EXPECT_FALSE(j.contains("model"));
  dec.mode = GenerationMode::Finetuned;
  ep.model = "m";
  j = nlohmann::json::parse(completion_request_body("P", ep, dec));
  EXPECT_EQ(j["stop"], nlohmann::json::array());
  EXPECT_EQ(j["model"], "m");
}

TEST(Client, BackoffDoublesUpToCap) {
  EndpointConfig ep;
  CompletionClient c(ep, {});
  EXPECT_EQ(c.backoff(1).count(), 500);
  EXPECT_EQ(c.backoff(2).count(), 1000);
  EXPECT_EQ(c.backoff(4).count(), 4000);
  EXPECT_EQ(c.backoff(9).count(), 8000);
}

TEST(Client, ClientErrorIsNotRetried) {
  mock::MockServer server({});
  server.start();
  CompletionClient c(fast_endpoint(server.url()), {});
  const auto out = c.complete("not a prompt in any template");
  EXPECT_FALSE(out.ok);
  EXPECT_EQ(out.error, "http_status{400}");
  EXPECT_EQ(out.attempts, 1);
}

TEST(Client, PretrainedStopReasonMarksTruncation) {
  mock::MockOptions opt;
  opt.style = mock::Style::Pretrained;
  opt.translations = lookup(1);
  mock::MockServer server(opt);
  server.start();
  CompletionClient c(fast_endpoint(server.url()), {});
  const auto out = c.complete(make_records(1)[0].prompt);
  ASSERT_TRUE(out.ok);
  EXPECT_EQ(out.text, " Sentence number 0.");
  EXPECT_EQ(out.finish, Finish::NewlineTruncated);
}

TEST(Client, LengthCap) {
  mock::MockOptions opt;
  opt.translations = lookup(1);
  mock::MockServer server(opt);
  server.start();
  DecodingConfig dec;
  dec.mode = GenerationMode::Finetuned;
  dec.max_tokens = 2;
  CompletionClient c(fast_endpoint(server.url()), dec);
  const auto out = c.complete(make_records(1)[0].prompt);
  ASSERT_TRUE(out.ok);
  EXPECT_EQ(out.finish, Finish::LengthCapped);
  EXPECT_EQ(count_whitespace_tokens(out.text), 2u);
}

TEST(Batch, RetriesPermanentFailureOrderAndResume) {
  ft::TempDir dir("batch");
  const auto records = make_records(100);
  mock::MockOptions opt;
  opt.rate_limit_modulus = 5;
  opt.rate_limit_times = 2;
  opt.fail_substring = "Satz Nummer 37.";
  opt.translations = lookup(100);
  mock::MockServer server(opt);
  server.start();

  DecodingConfig dec;
  dec.mode = GenerationMode::Finetuned;
  BatchOptions bo;
  bo.output = dir / "gen.jsonl";
  const auto summary = run_batch(records, fast_endpoint(server.url()), dec, bo);
  EXPECT_EQ(summary.ok, 99u);
  EXPECT_EQ(summary.errors, 1u);
  EXPECT_FALSE(summary.aborted);
  EXPECT_GT(server.rate_limited(), 0u);
  EXPECT_GT(summary.retries, 0u);

  const auto rows = read_generations(bo.output);
  ASSERT_EQ(rows.size(), 100u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].index, i);
    EXPECT_EQ(rows[i].segment_id, records[i].segment_id);
    if (i == 37) {
      EXPECT_EQ(*rows[i].error, "max_retries_exceeded");
    } else {
      ASSERT_TRUE(rows[i].ok()) << i;
      EXPECT_EQ(rows[i].translation, records[i].completion);
    }
  }
  EXPECT_TRUE(std::filesystem::exists(resume_marker_path(bo.output)));

  server.heal();
  const auto before = server.requests();
  bo.resume = true;
  const auto again = run_batch(records, fast_endpoint(server.url()), dec, bo);
  EXPECT_EQ(again.reused, 99u);
  EXPECT_EQ(again.ok, 100u);
  EXPECT_EQ(again.errors, 0u);
  EXPECT_EQ(server.requests() - before, 1u);
  EXPECT_FALSE(std::filesystem::exists(resume_marker_path(bo.output)));
  const auto healed = read_generations(bo.output);
  ASSERT_EQ(healed.size(), 100u);
  EXPECT_EQ(healed[37].translation, records[37].completion);
  for (std::size_t i = 0; i < 100; ++i) {
    if (i != 37) {
      EXPECT_EQ(healed[i], rows[i]);
    }
  }
}

TEST(Batch, UnreachableEndpointAborts) {
  ft::TempDir dir("unreach");
  // Grab a free port, then close it so nothing listens there.
  std::string url;
  {
    mock::MockServer s({});
    s.start();
    url = s.url();
  }
  auto ep = fast_endpoint(url);
  ep.max_attempts = 2;
  BatchOptions bo;
  bo.output = dir / "gen.jsonl";
  const auto summary = run_batch(make_records(5), ep, {}, bo);
  EXPECT_TRUE(summary.aborted);
  EXPECT_NE(summary.abort_reason.find("endpoint_unreachable"), std::string::npos);
  EXPECT_LT(summary.written, 5u);
  const auto marker = nlohmann::json::parse(read_file(resume_marker_path(bo.output)));
  EXPECT_EQ(marker["total_rows"], 5);
}

TEST(Batch, ResumeAfterPartialOutput) {
  ft::TempDir dir("partial");
  const auto records = make_records(20);
  mock::MockOptions opt;
  opt.translations = lookup(20);
  mock::MockServer server(opt);
  server.start();
  BatchOptions bo;
  bo.output = dir / "gen.jsonl";
  run_batch(records, fast_endpoint(server.url()), {}, bo);
  const auto full = read_file(bo.output);
  // Keep the first 8 rows, as if the run had been killed.
  std::size_t cut = 0;
  for (int i = 0; i < 8; ++i) cut = full.find('\n', cut) + 1;
  write_file_atomic(bo.output, full.substr(0, cut));
  const auto before = server.requests();
  bo.resume = true;
  const auto s = run_batch(records, fast_endpoint(server.url()), {}, bo);
  EXPECT_EQ(s.reused, 8u);
  EXPECT_EQ(server.requests() - before, 12u);
  EXPECT_EQ(read_file(bo.output), full);
}

TEST(Batch, OvergenerationRatioByStyle) {
  const auto records = make_records(30);
  std::vector<std::pair<std::string, std::vector<GenerationResult>>> systems;
  for (auto style : {mock::Style::Finetuned, mock::Style::Pretrained}) {
    ft::TempDir dir(style == mock::Style::Finetuned ? "ft" : "pt");
    mock::MockOptions opt;
    opt.style = style;
    opt.translations = lookup(30);
    mock::MockServer server(opt);
    server.start();
    DecodingConfig dec;
    dec.mode = style == mock::Style::Finetuned ? GenerationMode::Finetuned : GenerationMode::Pretrained;
    BatchOptions bo;
    bo.output = dir / "gen.jsonl";
    run_batch(records, fast_endpoint(server.url()), dec, bo);
    systems.emplace_back(style == mock::Style::Finetuned ? "finetuned" : "pretrained", read_generations(bo.output));
  }
  std::vector<std::size_t> ref_lengths;
  for (const auto& r : records) ref_lengths.push_back(count_whitespace_tokens(r.completion));
  const auto a = length_distribution(systems, ref_lengths);
  EXPECT_EQ(*a.summary[1].overgeneration_ratio, 0.0);
  EXPECT_EQ(*a.summary[2].overgeneration_ratio, 1.0);
  EXPECT_EQ(*a.summary[1].total_variation, 0.0);
}

TEST(Batch, FinetunedModeKeepsNewlineOvergenerationMeasurable) {
  // A pretrained-style model decoded without a newline stop still gets cut
  // at the first line, and the row says so.
  const auto records = make_records(3);
  mock::MockOptions opt;
  opt.style = mock::Style::Pretrained;
  opt.translations = lookup(3);
  mock::MockServer server(opt);
  server.start();
  ft::TempDir dir("nostop");
  DecodingConfig dec;
  dec.mode = GenerationMode::Finetuned;
  BatchOptions bo;
  bo.output = dir / "gen.jsonl";
  run_batch(records, fast_endpoint(server.url()), dec, bo);
  const auto rows = read_generations(bo.output);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].translation, "Sentence number 0.");
  EXPECT_EQ(rows[0].finish, Finish::NewlineTruncated);
  EXPECT_GT(rows[0].raw_token_count, rows[0].translation_token_count);
}

TEST(GenerationResult, JsonRoundTrip) {
  GenerationResult r;
  r.index = 3;
  r.segment_id = "s";
  r.pair = "de-en";
  r.n_shots = 5;
  r.raw_output = " a\nb";
  r.translation = "a";
  r.finish = Finish::NewlineTruncated;
  r.raw_token_count = 2;
  r.translation_token_count = 1;
  EXPECT_EQ(generation_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  GenerationResult err;
  err.index = 4;
  err.segment_id = "t";
  err.pair = "de-en";
  err.error = "http_status{404}";
  err.error_detail = "nope";
  EXPECT_FALSE(err.ok());
  EXPECT_EQ(generation_from_json(nlohmann::json::parse(to_json(err).dump())), err);
}

TEST(GenerationResult, TranslationNeverLongerThanRaw) {
  Rng rng(13);
  const std::vector<std::string> pieces{"a", "bb", " ", "  ", "\n", "\n\n", "<EOS>", "Target:", "中文", "\t"};
  InstructionRecord rec;
  rec.segment_id = "s";
  rec.pair = {"de", "en"};
  for (int i = 0; i < 5'000; ++i) {
    CompletionOutcome out;
    out.ok = true;
    for (auto n = uniform_below(rng, 16); n > 0; --n) out.text += pieces[uniform_below(rng, pieces.size())];
    out.finish = uniform_below(rng, 4) == 0 ? Finish::LengthCapped : Finish::Eos;
    for (auto mode : {GenerationMode::Pretrained, GenerationMode::Finetuned}) {
      const auto r = make_result(0, rec, out, mode, count_whitespace_tokens);
      ASSERT_LE(r.translation_token_count, r.raw_token_count) << nlohmann::json(out.text).dump();
      ASSERT_EQ(r.translation.find('\n'), std::string::npos);
    }
  }
}
