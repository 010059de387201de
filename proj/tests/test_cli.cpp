#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "pdiar/evalkit.hpp"
#include "pdiar/experiment.hpp"
#include "pdiar/model_io.hpp"

using namespace pdiar;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t speaker_count(const std::string& rttm) {
  std::istringstream is(rttm);
  std::set<std::string> names;
  for (const auto& tl : read_rttm(is))
    for (const auto& t : tl.turns) names.insert(tl.recording + "/" + t.speaker);
  return names.size();
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "pdiar_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto r = run({"simulate", "--out", path("corpus.txt"), "--rttm", path("ref.rttm"), "--n-recordings", "30",
                        "--n-speakers", "60", "--plda-speakers", "60", "--segments-per-recording", "12", "--seed",
                        "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto corpus = read_corpus(path("corpus.txt"));
    save_model(path("model.txt"), initial_model(corpus, 1));

    Corpus one = corpus;
    one.recordings.resize(1);
    one.recordings[0].segments.resize(1);
    write_corpus(path("one.txt"), one);
  }
  static std::string path(const std::string& name) { return (dir_ / name).string(); }
  static fs::path dir_;
};

fs::path CliTest::dir_;

}  // namespace

TEST(Cli, VersionAndUsage) {
  auto r = run({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("model format " + std::to_string(kModelFormatVersion)), std::string::npos);

  r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("pdiar-error: usage: ", 0), 0u) << r.err;
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"diarize", "--model"}).code, 1);
  EXPECT_EQ(run({"diarize", "--model", "m", "--corpus", "c", "--mode", "fancy"}).code, 1);
  EXPECT_EQ(run({"score", "--help"}).code, 0);
}

TEST_F(CliTest, OneSegmentRecordingGetsOneSpeaker) {
  const auto r = run({"diarize", "--model", path("model.txt"), "--corpus", path("one.txt"), "--mode", "book",
                      "--sigma", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(speaker_count(r.out), 1u);
  EXPECT_NE(r.out.find("SPEAKER "), std::string::npos);
}

TEST_F(CliTest, DiarizeIsDeterministicAndSorted) {
  const std::vector<std::string> args{"diarize", "--model", path("model.txt"), "--corpus", path("corpus.txt"),
                                      "--mode", "book", "--sigma", "0", "--scale", "1"};
  const auto a = run(args);
  auto threaded = args;
  threaded.insert(threaded.end(), {"--jobs", "3"});
  const auto b = run(threaded);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);

  std::istringstream is(a.out);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) ids.push_back(line.substr(8, line.find(' ', 8) - 8));
  EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
}

TEST_F(CliTest, EmbeddingDumpGivesSameRttm) {
  const auto a = run({"diarize", "--model", path("model.txt"), "--corpus", path("corpus.txt"), "--subset", "eval",
                      "--mode", "baseline", "--write-embeddings", path("emb.txt")});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run({"diarize", "--model", path("model.txt"), "--embeddings", path("emb.txt"), "--mode", "baseline"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(run({"diarize", "--model", path("model.txt"), "--corpus", path("corpus.txt"), "--embeddings",
                 path("emb.txt")})
                .code,
            1);
}

TEST_F(CliTest, ConfigFileAndFlagPrecedence) {
  {
    std::ofstream cfg(path("merge.cfg"));
    cfg << "# everything merges\nsigma = -1e300\nmode = book\n";
  }
  const auto merged = run({"diarize", "--config", path("merge.cfg"), "--model", path("model.txt"), "--corpus",
                           path("one.txt")});
  ASSERT_EQ(merged.code, 0) << merged.err;
  const std::vector<std::string> base{"diarize", "--config", path("merge.cfg"), "--model", path("model.txt"),
                                      "--corpus", path("corpus.txt"), "--subset", "dev"};
  const auto from_file = run(base);
  auto overridden = base;
  overridden.insert(overridden.end(), {"--sigma", "1e300"});
  const auto from_flag = run(overridden);
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  ASSERT_EQ(from_flag.code, 0) << from_flag.err;
  const auto dev_recs = read_corpus(path("corpus.txt")).subset("dev").size();
  EXPECT_EQ(speaker_count(from_file.out), dev_recs);
  EXPECT_EQ(speaker_count(from_flag.out), dev_recs * 12);

  {
    std::ofstream cfg(path("bad.cfg"));
    cfg << "sigma = 0\nlearning_rate = 3\n";
  }
  const auto bad = run({"diarize", "--config", path("bad.cfg"), "--model", path("model.txt"), "--corpus",
                        path("one.txt")});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("learning_rate"), std::string::npos);
}

TEST_F(CliTest, DataErrorsExitWithTwo) {
  auto r = run({"diarize", "--model", path("missing.txt"), "--corpus", path("corpus.txt")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("pdiar-error: data: ", 0), 0u) << r.err;
  {
    std::ofstream bad(path("bad.rttm"));
    bad << "SPEAKER rec 1 0.0 oops <NA> <NA> A <NA> <NA>\n";
  }
  r = run({"score", "--ref", path("bad.rttm"), "--hyp", path("ref.rttm")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":1"), std::string::npos) << r.err;
}

TEST_F(CliTest, ScoreReportsZeroForReference) {
  const auto r = run({"score", "--ref", path("ref.rttm"), "--hyp", path("ref.rttm"), "--tsv", path("report.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("TOTAL"), std::string::npos);
  const auto tsv = slurp(path("report.tsv"));
  EXPECT_EQ(tsv.rfind("recording\tscored\tmissed\tfalse_alarm\tconfusion\tder\n", 0), 0u);
  std::istringstream is(tsv);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) EXPECT_EQ(line.substr(line.rfind('\t') + 1), "0") << line;
}

TEST_F(CliTest, SweepTableHasDevAndEvalColumns) {
  const auto r = run({"sweep", "--corpus", path("corpus.txt"), "--model", path("model.txt"), "--param", "sigma",
                      "--grid", "-3,0,3"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::vector<std::string> cols{std::istream_iterator<std::string>(hs), {}};
  EXPECT_EQ(cols, (std::vector<std::string>{"sigma", "dev", "eval"}));
  int rows = 0;
  std::string line;
  while (std::getline(is, line) && line.rfind("best", 0) != 0) ++rows;
  EXPECT_EQ(rows, 3);
  EXPECT_EQ(line.rfind("best on dev: sigma = ", 0), 0u);
}

TEST_F(CliTest, SimulateAndTrainAreDeterministic) {
  const std::vector<std::string> sim{"simulate", "--out", path("c2.txt"), "--n-recordings", "30", "--n-speakers",
                                     "60", "--plda-speakers", "60", "--segments-per-recording", "12", "--seed", "4"};
  ASSERT_EQ(run(sim).code, 0);
  EXPECT_EQ(slurp(path("c2.txt")), slurp(path("corpus.txt")));

  const std::vector<std::string> tr{"train", "--corpus", path("corpus.txt"), "--out", path("t1.txt"), "--epochs", "1",
                                    "--batch-size", "10", "--seed", "9"};
  auto tr2 = tr;
  tr2[4] = path("t2.txt");
  const auto a = run(tr);
  const auto b = run(tr2);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(slurp(path("t1.txt")), slurp(path("t2.txt")));
  EXPECT_EQ(a.out.rfind("epoch train_ce heldout_ce\n", 0), 0u);
}

TEST(Cli, SelftestPasses) {
  const auto r = run({"selftest"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}
