// Stand-alone mock completions endpoint for local pipeline runs.

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "mock_server.hpp"

namespace {
fsmt::mock::MockServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mock OpenAI-style completions server", "fsmt_mock_server"};
  std::string host = "127.0.0.1", style = "finetuned", translations, port_file;
  int port = 8000;
  fsmt::mock::MockOptions opt;
  app.add_option("--host", host, "Bind address");
  app.add_option("--port", port, "Port (0 picks a free one)");
  app.add_option("--style", style, "finetuned | pretrained")->check(CLI::IsMember({"finetuned", "pretrained"}));
  app.add_option("--rate-limit-modulus", opt.rate_limit_modulus, "429 prompts whose hash is divisible by this");
  app.add_option("--rate-limit-times", opt.rate_limit_times, "429s per affected prompt");
  app.add_option("--fail-substring", opt.fail_substring, "Return 500 for prompts containing this until healed");
  app.add_option("--translations", translations, "TSV of source<TAB>output")->check(CLI::ExistingFile);
  app.add_option("--port-file", port_file, "Write the bound port here once listening");
  CLI11_PARSE(app, argc, argv);

  opt.style = style == "pretrained" ? fsmt::mock::Style::Pretrained : fsmt::mock::Style::Finetuned;
  if (!translations.empty()) {
    std::ifstream in(translations);
    for (std::string line; std::getline(in, line);) {
      const auto tab = line.find('\t');
      if (tab != std::string::npos) opt.translations[line.substr(0, tab)] = line.substr(tab + 1);
    }
  }
  try {
    fsmt::mock::MockServer server(opt);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    const int bound = server.start(host, port);
    if (!port_file.empty()) fsmt::write_file_atomic(port_file, std::to_string(bound) + "\n");
    std::cerr << "listening on " << host << ":" << bound << "\n";
    // start() serves on a background thread; park here until a signal stops it.
    while (server.port() > 0 && g_server) {
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
      if (!server.running()) break;
    }
    server.stop();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
