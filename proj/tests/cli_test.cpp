#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/oracles.hpp"
#include "treecoder/treecoder.hpp"

namespace tc = treecoder;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("treecoder_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name), std::ios::binary) << text;
    return path(name);
  }

  Result run(const std::string& args, const std::string& env = "TREECODER_LOG=error") const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = env + " " + TREECODER_CLI + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  // Corpus, vocab and a small config; returns the config path.
  fs::path experiment(const std::string& extra = "") const {
    write("train.txt", tc::testing::two_language_corpus(120, 30, 1));
    write("valid.txt", tc::testing::two_language_corpus(20, 30, 2));
    write("test.txt", tc::testing::two_language_corpus(20, 30, 3));
    auto r = run("tokenizer-train --corpus " + path("train.txt").string() + " --vocab-size 280 --out " +
                 path("vocab.json").string());
    EXPECT_EQ(r.code, 0) << r.err;
    std::string cfg = R"({"name": "cli", "vocab": ")" + path("vocab.json").string() + R"(", "train": ")" +
                      path("train.txt").string() + R"(", "valid": ")" + path("valid.txt").string() +
                      R"(", "test": ")" + path("test.txt").string() + R"(", "out": ")" + path("run").string() +
                      R"(", "k": 2, "h": 1, "dec": 1, "d_model": 16, "n_heads": 2, "context_len": 16,
                        "selector_hidden_mult": 2, "epochs": 2, "batch_size": 8, "warmup_steps": 5,
                        "base_lr": 0.003)" + extra + "}";
    return write("config.json", cfg);
  }

  fs::path dir_;
};

// Value following `key` at the start of a line.
double value_after(const std::string& text, const std::string& key) {
  const std::string padded = "\n" + text;
  auto at = padded.find("\n" + key + " ");
  if (at == std::string::npos) return std::nan("");
  return std::stod(padded.substr(at + key.size() + 2));
}

}  // namespace

TEST_F(CliTest, TokenizerTrainWritesDeterministicVocab) {
  auto corpus = write("c.txt", "the cat sat on the mat\nthe dog sat on the log\n");
  auto a = run("tokenizer-train --corpus " + corpus.string() + " --vocab-size 300 --out " + path("a.json").string());
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("pieces"), std::string::npos);
  auto b = run("tokenizer-train --corpus " + corpus.string() + " --vocab-size 300 --out " + path("b.json").string());
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  auto v = tc::Vocab::from_json(nlohmann::json::parse(slurp(path("a.json"))));
  EXPECT_GT(v.size(), 259u);
  EXPECT_LE(v.size(), 300u);
  EXPECT_EQ(v.piece(tc::Vocab::byte_id('q')), "q");
}

TEST_F(CliTest, TokenizerErrorsExitOneWithOneLine) {
  auto corpus = write("c.txt", "abc\n");
  auto small = run("tokenizer-train --corpus " + corpus.string() + " --vocab-size 100 --out " + path("v.json").string());
  EXPECT_EQ(small.code, 1);
  EXPECT_EQ(count_lines(small.err), 1u) << small.err;
  EXPECT_FALSE(fs::exists(path("v.json")));
  auto missing = run("tokenizer-train --corpus /nonexistent/corpus.txt --vocab-size 300 --out " +
                     path("v.json").string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_EQ(count_lines(missing.err), 1u);
  auto usage = run("tokenizer-train --vocab-size 300");
  EXPECT_EQ(usage.code, 1);
  EXPECT_EQ(count_lines(usage.err), 1u);
}

TEST_F(CliTest, InspectReportsShapes) {
  auto a = run("inspect --k 2 --h 4");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("nodes 31\n"), std::string::npos);
  EXPECT_NE(a.out.find("active fraction 16.1%"), std::string::npos);
  auto b = run("inspect --k 3 --h 2");
  EXPECT_NE(b.out.find("nodes 13\n"), std::string::npos);
  auto c = run("inspect --h 1 --dec 3");
  EXPECT_NE(c.out.find("path length 6\n"), std::string::npos);
  EXPECT_NE(c.out.find("equivalence group 6: (0,6) (1,3) (2,2) (5,1)\n"), std::string::npos) << c.out;
  auto d = run("inspect --k 2 --h 1 --dec 1");
  EXPECT_NE(d.out.find("params total 71.3M"), std::string::npos) << d.out;
  auto bad = run("inspect --k 2 --h 1 --d-model 10 --n-heads 3");
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(count_lines(bad.err), 1u);
}

TEST_F(CliTest, TrainWritesOutputsAndIsDeterministic) {
  auto cfg = experiment();
  auto a = run("train --config " + cfg.string() + " --seed 42");
  ASSERT_EQ(a.code, 0) << a.err;
  for (const char* f : {"metrics.jsonl", "config.json", "tables/params.csv", "tables/perplexity.csv",
                        "tables/routes.csv"}) {
    EXPECT_TRUE(fs::exists(path("run") / f)) << f;
  }
  EXPECT_FALSE(fs::is_empty(path("run") / "checkpoints"));
  EXPECT_NE(a.out.find("test perplexity"), std::string::npos);
  const std::string first = slurp(path("run") / "metrics.jsonl");
  EXPECT_GT(count_lines(first), 2u);

  auto b = run("train --config " + cfg.string() + " --seed 42");
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(slurp(path("run") / "metrics.jsonl"), first);
  EXPECT_EQ(a.out, b.out);

  auto c = run("train --config " + cfg.string() + " --seed 7");
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(slurp(path("run") / "metrics.jsonl"), first);
}

TEST_F(CliTest, RandomRoutingLeavesSelectorsAtInitialization) {
  auto cfg = experiment();
  auto r = run("train --config " + cfg.string() + " --routing random --seed 5");
  ASSERT_EQ(r.code, 0) << r.err;
  fs::path last;
  for (const auto& e : fs::directory_iterator(path("run") / "checkpoints"))
    if (last.empty() || e.path() > last) last = e.path();
  auto ck = tc::load_checkpoint<float>(last);
  EXPECT_EQ(ck.model.config.routing, tc::RoutingMode::random);
  auto init = tc::build<float>(ck.model.config, 5);
  std::size_t compared = 0, moved = 0;
  for (std::size_t i = 0; i < init.params.size(); ++i) {
    auto a = init.params[i].array.values();
    auto b = ck.model.params[i].array.values();
    const bool same = std::equal(a.begin(), a.end(), b.begin());
    if (init.params[i].spec.kind == tc::ParamKind::selector) {
      EXPECT_TRUE(same) << init.params[i].spec.name;
      ++compared;
    } else {
      moved += !same;
    }
  }
  EXPECT_EQ(compared, 3u);
  EXPECT_GT(moved, 0u);
}

TEST_F(CliTest, BadConfigsFailWithoutOutputs) {
  experiment();
  auto unknown = write("unknown.json", R"({"train": "x", "valid": "y", "colour": 1, "depth": 2, "out": ")" +
                                           path("out1").string() + "\"}");
  auto r = run("train --config " + unknown.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(count_lines(r.err), 1u);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
  EXPECT_NE(r.err.find("depth"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("out1")));

  auto malformed = write("malformed.json", "{\"k\": 2,");
  r = run("train --config " + malformed.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(count_lines(r.err), 1u);

  auto missing = write("missing.json", R"({"train": "/nonexistent/a.txt", "valid": ")" + path("valid.txt").string() +
                                           R"(", "out": ")" + path("out2").string() + "\"}");
  r = run("train --config " + missing.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(path("out2")));

  auto typed = write("typed.json", R"({"train": "a", "valid": "b", "k": "two"})");
  r = run("train --config " + typed.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("'k'"), std::string::npos);

  r = run("train --config " + path("config.json").string(), "TREECODER_LOG=loud");
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(path("run")));
}

TEST_F(CliTest, EvalIsRepeatableAndMatchesTraining) {
  auto cfg = experiment();
  auto t = run("train --config " + cfg.string() + " --seed 42");
  ASSERT_EQ(t.code, 0) << t.err;
  double best = std::numeric_limits<double>::infinity();
  std::ifstream metrics(path("run") / "metrics.jsonl");
  for (std::string line; std::getline(metrics, line);) {
    auto j = nlohmann::json::parse(line);
    if (j["split"] == "valid") best = std::min(best, j["ppl"].get<double>());
  }
  fs::path last;
  for (const auto& e : fs::directory_iterator(path("run") / "checkpoints"))
    if (last.empty() || e.path() > last) last = e.path();

  const std::string args = "eval --checkpoint " + last.string() + " --data " + path("valid.txt").string();
  auto a = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  auto b = run(args);
  EXPECT_EQ(a.out, b.out);
  const double ppl = value_after(a.out, "perplexity");
  EXPECT_NEAR(ppl, best, 1e-5 * best);
  EXPECT_NEAR(ppl, value_after(t.out, "valid perplexity"), 1e-9 * ppl);
  EXPECT_NE(a.out.find("leaf_hist"), std::string::npos);

  auto missing = run("eval --checkpoint " + path("nope.ckpt").string() + " --data " + path("valid.txt").string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_EQ(count_lines(missing.err), 1u);
}

TEST_F(CliTest, GenerateGreedyEchoAndEos) {
  auto cfg = tc::testing::tiny_config(2, 1, 1);
  cfg.vocab_size = tc::Vocab{}.size();
  cfg.context_len = 16;
  auto model = tc::build<float>(cfg, 3);
  tc::save_checkpoint(path("m.ckpt"), model, {});
  const std::string base = "generate --checkpoint " + path("m.ckpt").string();

  auto a = run(base + " --prompt 'abc' --max-tokens 6");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, run(base + " --prompt 'abc' --max-tokens 6").out);
  EXPECT_EQ(a.out.rfind("abc", 0), 0u);
  EXPECT_NE(a.out.find("route 0>"), std::string::npos);

  auto s1 = run(base + " --prompt 'abc' --max-tokens 6 --temperature 1 --seed 9");
  auto s2 = run(base + " --prompt 'abc' --max-tokens 6 --temperature 1 --seed 9");
  EXPECT_EQ(s1.out, s2.out);

  auto echo = run(base + " --prompt 'hello there' --max-tokens 0");
  ASSERT_EQ(echo.code, 0);
  EXPECT_EQ(echo.out, "hello there\n");

  // make EOS the greedy choice: a large positive first feature read only by
  // the EOS column of the head
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) model.embeddings.tokens.mutable_values()[t * cfg.d_model] = 100;
  auto g = model.embeddings.final_norm.mutable_values();
  std::fill(g.begin(), g.end(), 0.0f);
  g[0] = 1;
  auto head = model.embeddings.head.mutable_values();
  std::fill(head.begin(), head.end(), 0.0f);
  head[tc::kEosId] = 5;
  tc::save_checkpoint(path("eos.ckpt"), model, {});
  auto eos = run("generate --checkpoint " + path("eos.ckpt").string() + " --prompt 'abc' --max-tokens 20");
  ASSERT_EQ(eos.code, 0) << eos.err;
  EXPECT_EQ(eos.out, "abc\nstep 0 token 2 route " + eos.out.substr(eos.out.find("route ") + 6, 3) +
                         "\nstopped at eos\n");

  auto missing = run("generate --checkpoint " + path("none.ckpt").string() + " --prompt x");
  EXPECT_EQ(missing.code, 1);
}

TEST(ExperimentConfig, ParsesAndRoundTrips) {
  auto j = nlohmann::json::parse(R"({"train": ["a.txt", "b.txt"], "valid": "c.txt", "k": 3, "h": 2,
                                     "routing": "random", "base_lr": 0.001, "seed": 9})");
  auto e = tc::parse_experiment(j);
  EXPECT_EQ(e.train.size(), 2u);
  EXPECT_EQ(e.model.k, 3u);
  EXPECT_EQ(e.model.routing, tc::RoutingMode::random);
  EXPECT_EQ(e.train_config.base_lr, 0.001);
  EXPECT_EQ(e.train_config.seed, 9u);
  auto again = tc::parse_experiment(tc::to_json(e));
  EXPECT_EQ(tc::to_json(again), tc::to_json(e));
  EXPECT_THROW(tc::parse_experiment(nlohmann::json::parse(R"({"train": "a"})")), tc::ConfigError);
  EXPECT_THROW(tc::parse_experiment(nlohmann::json::parse(R"({"train": "a", "valid": "b", "beta1": 2})")),
               tc::ConfigError);
  EXPECT_THROW(tc::parse_experiment(nlohmann::json::parse("[1]")), tc::ConfigError);
}
