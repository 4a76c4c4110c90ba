// treecoder: tokenizer training, model training, evaluation, inspection and
// sampling from the command line.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <fmt/ranges.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "treecoder/treecoder.hpp"

namespace fs = std::filesystem;
using namespace treecoder;

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_logger_st("treecoder");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("TREECODER_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ConfigError("TREECODER_LOG must be error, info or debug, got '" + level + "'");
  }
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

Vocab load_vocab(const fs::path& path) { return Vocab::from_json(read_json(path)); }

Vocab vocab_from_checkpoint(const nlohmann::json& j) { return j.is_null() ? Vocab{} : Vocab::from_json(j); }

std::string path_string(std::span<const std::size_t> nodes) {
  std::string s;
  for (auto n : nodes) s += (s.empty() ? "" : ">") + std::to_string(n);
  return s;
}

std::string millions(std::uint64_t n) { return fmt::format("{:.1f}", static_cast<double>(n) / 1e6); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------

struct TokenizerArgs {
  std::vector<std::string> corpus;
  std::size_t vocab_size = 0;
  std::string out;
  bool split_digits = false;
};

void cmd_tokenizer_train(const TokenizerArgs& a) {
  std::string text;
  for (const auto& p : a.corpus) {
    text += read_file(p);
    if (!text.empty() && text.back() != '\n') text.push_back('\n');
  }
  auto vocab = train_bpe(text, a.vocab_size, a.split_digits);
  write_text(a.out, vocab.to_json().dump() + "\n");

  std::size_t bytes = 0, tokens = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    auto line = std::string_view(text).substr(start, end - start);
    bytes += line.size();
    tokens += encode(line, vocab, false).size();
    start = end + 1;
  }
  fmt::print("pieces {} (specials 3, bytes 256, merges {})\n", vocab.size(), vocab.merges().size());
  if (vocab.size() < a.vocab_size) {
    fmt::print("stopped early: no pair occurs twice after {} merges\n", vocab.merges().size());
  }
  fmt::print("corpus bytes {} tokens {} bytes/token {:.3f}\n", bytes, tokens,
             tokens ? static_cast<double>(bytes) / static_cast<double>(tokens) : 0.0);
  fmt::print("wrote {}\n", a.out);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string routing;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void write_route_rows(std::string& csv, const std::string& split, const RouteStats& s) {
  for (std::size_t i = 0; i < s.leaf_hist.size(); ++i) csv += fmt::format("{},{},{}\n", split, i, s.leaf_hist[i]);
}

void cmd_train(const TrainArgs& a) {
  auto e = parse_experiment(read_json(a.config));
  if (!a.routing.empty()) e.model.routing = parse_routing(a.routing);
  if (a.seed) e.train_config.seed = *a.seed;
  if (!a.out.empty()) e.out = a.out;
  check_inputs(e);

  const Vocab vocab = e.vocab ? load_vocab(*e.vocab) : Vocab{};
  if (e.vocab_size && *e.vocab_size != vocab.size()) {
    throw ConfigError(fmt::format("vocab_size {} does not match the vocabulary's {} pieces", *e.vocab_size,
                                  vocab.size()));
  }
  e.model.vocab_size = vocab.size();
  e.model.validate();
  const std::size_t L = e.model.context_len;
  auto train = load_and_pack(e.train, vocab, L);
  auto valid = load_and_pack(e.valid, vocab, L);
  std::optional<PackedDataset> test;
  if (!e.test.empty()) test = load_and_pack(e.test, vocab, L);

  fs::create_directories(e.out / "tables");
  write_text(e.out / "config.json", to_json(e).dump(2) + "\n");

  const auto& tc = e.train_config;
  auto model = build<float>(e.model, tc.seed);
  const auto report = param_report(model);
  spdlog::info("{}: k={} h={} dec={} routing={} params={}M active={:.1f}%", e.name, e.model.k, e.model.h,
               e.model.dec, to_string(e.model.routing), millions(report.total), report.active_percent);
  spdlog::info("train {} windows, valid {} windows", train.count, valid.count);

  FitOptions opt;
  opt.out_dir = e.out;
  opt.vocab = vocab.to_json();
  opt.on_log = [](const LogRecord& r) {
    if (r.split == "train") {
      spdlog::debug("step {} loss {:.6f} lr {:.3e} grad_norm {:.4f} leaves {}", r.step, r.loss, r.lr, r.grad_norm,
                    r.leaf_hist);
    } else {
      spdlog::info("epoch {} step {} valid ppl {:.4f} leaves {}", r.epoch + 1, r.step, r.ppl, r.leaf_hist);
    }
  };
  auto result = fit(model, train, valid, tc, opt);

  // report on the last saved parameters
  auto best = load_checkpoint<float>(result.checkpoints.back());
  auto v = evaluate(best.model, valid, tc.eval_batch_size, tc.seed);
  std::string ppl_csv = "split,perplexity\n";
  std::string route_csv = "split,leaf,count\n";
  ppl_csv += fmt::format("initial_valid,{:.1f}\nvalid,{:.1f}\n", result.initial_valid_ppl, v.perplexity);
  write_route_rows(route_csv, "valid", v.routes);
  fmt::print("initial valid perplexity {}\n", result.initial_valid_ppl);
  fmt::print("valid perplexity {}\n", v.perplexity);
  fmt::print("valid leaf_hist {}\n", fmt::join(v.routes.leaf_hist, " "));
  if (test) {
    auto t = evaluate(best.model, *test, tc.eval_batch_size, tc.seed);
    ppl_csv += fmt::format("test,{:.1f}\n", t.perplexity);
    write_route_rows(route_csv, "test", t.routes);
    fmt::print("test perplexity {}\n", t.perplexity);
    fmt::print("test leaf_hist {}\n", fmt::join(t.routes.leaf_hist, " "));
  }
  write_text(e.out / "tables" / "perplexity.csv", ppl_csv);
  write_text(e.out / "tables" / "routes.csv", route_csv);
  write_text(e.out / "tables" / "params.csv",
             fmt::format("component,count,millions\nembedding,{},{}\nnodes,{},{}\nselectors,{},{}\nhead,{},{}\n"
                         "total,{},{}\nactive,{},{}\n",
                         report.embedding, millions(report.embedding), report.nodes_total,
                         millions(report.nodes_total), report.selectors_total, millions(report.selectors_total),
                         report.head, millions(report.head), report.total, millions(report.total), report.active,
                         millions(report.active)));
  fmt::print("steps {} epochs {} checkpoints {}\n", result.steps, result.epochs_run, result.checkpoints.size());
  fmt::print("last checkpoint {}\n", result.checkpoints.back().string());
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> data;
  std::size_t batch_size = 16;
  std::uint64_t seed = 42;
};

void cmd_eval(const EvalArgs& a) {
  auto ck = load_checkpoint<float>(a.checkpoint);
  const Vocab vocab = vocab_from_checkpoint(ck.meta.vocab);
  std::vector<fs::path> files(a.data.begin(), a.data.end());
  auto ds = load_and_pack(files, vocab, ck.model.config.context_len);
  auto r = evaluate(ck.model, ds, a.batch_size, a.seed);
  fmt::print("perplexity {}\n", r.perplexity);
  fmt::print("tokens {}\n", r.tokens);
  fmt::print("leaf_hist {}\n", fmt::join(r.routes.leaf_hist, " "));
  fmt::print("level_entropy_bits {}\n", fmt::join(r.routes.level_entropy_bits, " "));
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::size_t k = 2, h = 1, dec = 1;
  std::size_t d_model = 1024, n_heads = 16, vocab_size = 8000, context_len = 128, selector_mult = 8;
  std::size_t ffn_hidden = 0;
  std::size_t max_h = 5, max_dec = 8;
};

void cmd_inspect(const InspectArgs& a) {
  TreeConfig c;
  c.k = a.k;
  c.h = a.h;
  c.dec = a.dec;
  c.d_model = a.d_model;
  c.n_heads = a.n_heads;
  c.vocab_size = a.vocab_size;
  c.context_len = a.context_len;
  c.selector_hidden_mult = a.selector_mult;
  c.ffn_hidden = a.ffn_hidden;
  c.validate();
  const auto r = param_report(c);
  const auto len = path_length(c.h, c.dec);
  fmt::print("tree k={} h={} dec={}\n", c.k, c.h, c.dec);
  fmt::print("nodes {}\n", c.nodes());
  fmt::print("leaves {}\n", leaf_count(c.k, c.h));
  fmt::print("selectors {}\n", c.selectors());
  fmt::print("active fraction {:.1f}%\n", round1(active_fraction(c.k, c.h)));
  fmt::print("path length {}\n", len);
  fmt::print("params total {}M ({})\n", millions(r.total), r.total);
  fmt::print("params active {}M ({}, {:.1f}%)\n", millions(r.active), r.active, r.active_percent);
  fmt::print("params per node {} nodes {} per selector {} selectors {} ({:.1f}%) embedding {} head {}\n", r.per_node,
             r.nodes_total, r.per_selector, r.selectors_total, r.selector_percent, r.embedding, r.head);
  const auto groups = equivalence_groups(std::max<std::size_t>(a.max_h, 1), std::max<std::size_t>(a.max_dec, 1));
  std::string members;
  auto it = groups.find(len);
  if (it != groups.end()) {
    for (const auto& s : it->second) members += fmt::format(" ({},{})", s.h, s.dec);
  } else {
    members = fmt::format(" (0,{}) ({},{})", len, c.h, c.dec);
  }
  fmt::print("equivalence group {}:{}\n", len, members);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  std::size_t max_tokens = 64;
  double temperature = 0.0;
  std::uint64_t seed = 42;
};

void cmd_generate(const GenerateArgs& a) {
  auto ck = load_checkpoint<float>(a.checkpoint);
  const Vocab vocab = vocab_from_checkpoint(ck.meta.vocab);
  auto prompt = encode(a.prompt, vocab, false);
  prompt.insert(prompt.begin(), kBosId);
  Rng rng(a.seed);
  auto g = generate(ck.model, prompt, a.max_tokens, a.temperature, rng);
  fmt::print("{}\n", decode(g.ids, vocab, true));
  for (std::size_t i = 0; i < g.steps.size(); ++i) {
    fmt::print("step {} token {} route {}\n", i, g.steps[i].id, path_string(g.steps[i].route));
  }
  if (g.stopped_at_eos) fmt::print("stopped at eos\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TreeCoder: tree-structured decoder language models"};
  app.require_subcommand(1);

  TokenizerArgs tok;
  auto* sub_tok = app.add_subcommand("tokenizer-train", "Train a byte-level BPE vocabulary");
  sub_tok->add_option("--corpus", tok.corpus, "Corpus text files")->required()->expected(1, -1);
  sub_tok->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size")->required();
  sub_tok->add_option("--out", tok.out, "Output vocab file")->required();
  sub_tok->add_flag("--split-digits", tok.split_digits, "Never merge across digits");

  TrainArgs tr;
  auto* sub_train = app.add_subcommand("train", "Train a model from a JSON experiment config");
  sub_train->add_option("--config", tr.config, "Experiment config")->required();
  sub_train->add_option("--routing", tr.routing, "learned or random");
  sub_train->add_option("--seed", tr.seed, "Seed for initialization, shuffling and routing");
  sub_train->add_option("--out", tr.out, "Output directory (overrides the config)");

  EvalArgs ev;
  auto* sub_eval = app.add_subcommand("eval", "Evaluate a checkpoint on text files");
  sub_eval->add_option("--checkpoint", ev.checkpoint)->required();
  sub_eval->add_option("--data", ev.data)->required()->expected(1, -1);
  sub_eval->add_option("--batch-size", ev.batch_size);
  sub_eval->add_option("--seed", ev.seed, "Seed for random routing");

  InspectArgs in;
  auto* sub_inspect = app.add_subcommand("inspect", "Tree shape, parameter counts and depth group");
  sub_inspect->set_help_flag("--help", "Print this help message and exit");
  sub_inspect->add_option("--k", in.k, "Branching factor");
  sub_inspect->add_option("--h", in.h, "Height in edges");
  sub_inspect->add_option("--dec", in.dec, "Decoder layers per node");
  sub_inspect->add_option("--d-model", in.d_model);
  sub_inspect->add_option("--n-heads", in.n_heads);
  sub_inspect->add_option("--vocab-size", in.vocab_size);
  sub_inspect->add_option("--context-len", in.context_len);
  sub_inspect->add_option("--selector-mult", in.selector_mult);
  sub_inspect->add_option("--ffn-hidden", in.ffn_hidden, "0 selects the default width");
  sub_inspect->add_option("--max-h", in.max_h, "Height range of the grouping grid");
  sub_inspect->add_option("--max-dec", in.max_dec, "Layers-per-node range of the grouping grid");

  GenerateArgs gen;
  auto* sub_gen = app.add_subcommand("generate", "Sample text from a checkpoint");
  sub_gen->add_option("--checkpoint", gen.checkpoint)->required();
  sub_gen->add_option("--prompt", gen.prompt)->required();
  sub_gen->add_option("--max-tokens", gen.max_tokens);
  sub_gen->add_option("--temperature", gen.temperature, "0 is greedy");
  sub_gen->add_option("--seed", gen.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "treecoder: error: " << e.what() << '\n';
    return 1;
  }

  try {
    setup_logging();
    if (*sub_tok) cmd_tokenizer_train(tok);
    if (*sub_train) cmd_train(tr);
    if (*sub_eval) cmd_eval(ev);
    if (*sub_inspect) cmd_inspect(in);
    if (*sub_gen) cmd_generate(gen);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "treecoder: error: " << msg << '\n';
    return 1;
  }
  return 0;
}
