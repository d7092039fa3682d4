#include <filesystem>
#include <fstream>
#include <sstream>

#include "geomae/cli.hpp"
#include "support.hpp"

namespace {

using namespace testkit;
namespace fs = std::filesystem;

fs::path scratch() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const fs::path p = fs::temp_directory_path() / "geomae_tests" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::size_t columns(const std::string& line) { return std::count(line.begin(), line.end(), ',') + 1; }

// Path plus contents of every file under root, in path order.
std::string snapshot(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string s;
  for (const auto& f : files) s += f.string() + '\n' + slurp(f);
  return s;
}

const std::vector<std::string> kSmall{"--preset", "gradcheck"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

fs::path synth(const fs::path& dir, const std::string& classes, std::size_t per_class, std::uint64_t seed = 0) {
  const auto r = run({"synth", "--classes", classes, "--per-class", std::to_string(per_class), "--points", "64",
                      "--seed", std::to_string(seed), "--out", dir.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  return dir;
}

fs::path pretrained(const fs::path& dir, const fs::path& data, std::size_t epochs = 1) {
  const auto r = run(with({"pretrain", "--dataset", data.string(), "--out", dir.string(), "--epochs", std::to_string(epochs)},
                          kSmall));
  EXPECT_EQ(r.code, 0) << r.err;
  return dir / ("checkpoint_epoch" + std::to_string(epochs) + ".ckpt");
}

TEST(Cli, UnknownCommandIsUsageError) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE((r.out + r.err).find("pretrain"), std::string::npos);  // usage text lists the commands
}

TEST(Cli, MissingCommandIsUsageError) { EXPECT_EQ(run({}).code, 1); }

TEST(Cli, UnknownConfigKeyIsNamed) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  const auto r = run({"pretrain", "--dataset", data.string(), "--out", (dir / "o").string(), "--set", "bogus_key=3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bogus_key"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "o"));  // validation happens before any work
}

TEST(Cli, InvalidValueNamesKey) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  auto r = run({"pretrain", "--dataset", data.string(), "--out", (dir / "o").string(), "--set", "r=1.5"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("'r'"), std::string::npos);
  r = run({"pretrain", "--dataset", data.string(), "--out", (dir / "o").string(), "--set", "heads=7"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("heads"), std::string::npos);
}

TEST(Cli, ConfigFileUnknownKeyAndOverride) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  std::ofstream(dir / "bad.json") << R"({"g": 4, "mystery": 1})";
  auto r = run({"pretrain", "--dataset", data.string(), "--out", (dir / "o").string(), "--config", (dir / "bad.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("mystery"), std::string::npos);

  // File says 2 epochs; the flag wins.
  std::ofstream(dir / "good.json") << R"({"epochs": 2})";
  r = run(with({"pretrain", "--dataset", data.string(), "--out", (dir / "o").string(), "--config", (dir / "good.json").string(),
                "--epochs", "1"},
               kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(slurp(dir / "o" / "loss.csv")).size(), 2u);
}

TEST(Cli, MissingDatasetIsDataError) {
  const auto dir = scratch();
  const auto r = run(with({"pretrain", "--dataset", (dir / "nowhere").string(), "--out", (dir / "o").string()}, kSmall));
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, CorruptCheckpointIsDataError) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  const auto r = run({"extract", "--checkpoint", (dir / "junk.ckpt").string(), "--input", data.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("magic"), std::string::npos);
}

TEST(Cli, PretrainOneEpochOneCloud) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  const auto ck = pretrained(dir / "run", data);
  std::size_t checkpoints = 0;
  for (const auto& e : fs::directory_iterator(dir / "run")) checkpoints += e.path().extension() == ".ckpt";
  EXPECT_EQ(checkpoints, 1u);
  EXPECT_TRUE(fs::exists(ck));
  const auto curve = lines(slurp(dir / "run" / "loss.csv"));
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_EQ(curve[0], "epoch,loss");
  EXPECT_EQ(curve[1].rfind("1,", 0), 0u);
  EXPECT_TRUE(std::isfinite(std::stod(curve[1].substr(2))));
  // Stored model config is the preset.
  EXPECT_TRUE(checkpoint_model_config(load_checkpoint(ck)) == gradcheck_model_config());
}

TEST(Cli, PretrainIsReproducibleAndLeavesDatasetUntouched) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cube,sphere", 2);
  const std::string before = snapshot(data);
  pretrained(dir / "a", data, 2);
  pretrained(dir / "b", data, 2);
  EXPECT_EQ(snapshot(data), before);
  for (const char* f : {"loss.csv", "checkpoint_epoch2.ckpt"}) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(Cli, ExtractWritesOneRowPerCloud) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cube,sphere", 2);
  const auto ck = pretrained(dir / "run", data);
  const auto r = run({"extract", "--checkpoint", ck.string(), "--input", data.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 5u);
  const std::size_t width = gradcheck_model_config().feature_width();
  for (const auto& row : rows) EXPECT_EQ(columns(row), width + 1);
  // A single file gives one row.
  const auto one = run({"extract", "--checkpoint", ck.string(), "--input", (data / "cube" / "cube_0000.xyz").string(),
                        "--out", (dir / "one.csv").string()});
  ASSERT_EQ(one.code, 0) << one.err;
  EXPECT_EQ(lines(slurp(dir / "one.csv")).size(), 2u);
}

TEST(Cli, ExtractModelKeyConflictIsDataError) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "sphere", 1);
  const auto ck = pretrained(dir / "run", data);
  const auto r = run({"extract", "--checkpoint", ck.string(), "--input", data.string(), "--set", "d=48"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("config mismatch"), std::string::npos);
}

TEST(Cli, DescribeEmitsSpfhRowsPerCenter) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "torus", 1);
  const auto r = run(with({"describe", "--input", (data / "torus" / "torus_0000.xyz").string()}, kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  const auto m = gradcheck_model_config();
  ASSERT_EQ(rows.size(), m.g + 1);
  EXPECT_EQ(columns(rows[0]), 4 + 33u);
  EXPECT_EQ(rows[0].substr(0, 20), "center,x,y,z,alpha0,");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<double> v;
    std::stringstream ss(rows[i]);
    for (std::string cell; std::getline(ss, cell, ',');) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 37u);
    for (int h = 0; h < 3; ++h) EXPECT_NEAR(std::accumulate(v.begin() + 4 + 11 * h, v.begin() + 15 + 11 * h, 0.0), 1.0, 1e-6);
  }
}

TEST(Cli, ReconstructWritesThreeFiles) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cone", 1);
  const auto ck = pretrained(dir / "run", data);
  const auto r = run({"reconstruct", "--checkpoint", ck.string(), "--input", (data / "cone" / "cone_0000.xyz").string(),
                      "--out", (dir / "rec").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = gradcheck_model_config();
  EXPECT_EQ(load_xyz(dir / "rec" / "cone_0000_input.xyz").size(), m.n);
  EXPECT_EQ(load_xyz(dir / "rec" / "cone_0000_visible.xyz").size(), m.visible_count() * m.k);
  EXPECT_EQ(load_xyz(dir / "rec" / "cone_0000_predicted.xyz").size(), m.masked_count() * m.k);
}

TEST(Cli, FinetuneThenEval) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cube,sphere", 4, 1);
  const auto test = synth(dir / "test", "cube,sphere", 2, 2);
  const auto ck = pretrained(dir / "run", data);
  auto r = run({"finetune", "--checkpoint", ck.string(), "--dataset", data.string(), "--test", test.string(), "--out",
                (dir / "clf.ckpt").string(), "--epochs", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "split,items,accuracy");
  EXPECT_EQ(rows[1].rfind("train,8,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("test,4,", 0), 0u);

  r = run({"eval", "--checkpoint", (dir / "clf.ckpt").string(), "--dataset", test.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  rows = lines(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1], "4," + rows[1].substr(2));
  // Eval of the same checkpoint on the same data matches the finetune test row.
  EXPECT_EQ(rows[1].substr(2), lines(run({"finetune", "--checkpoint", ck.string(), "--dataset", data.string(), "--test",
                                          test.string(), "--epochs", "5"})
                                         .out)[2]
                                   .substr(7));
}

TEST(Cli, FinetuneRejectsBadScope) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cube,sphere", 1);
  const auto ck = pretrained(dir / "run", data);
  const auto r = run({"finetune", "--checkpoint", ck.string(), "--dataset", data.string(), "--scope", "partial"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("partial"), std::string::npos);
}

TEST(Cli, FewShotShape) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cone,cube,cylinder,sphere,torus", 30, 3);
  const auto ck = pretrained(dir / "run", synth(dir / "pre", "sphere", 1));
  const auto r = run({"fewshot", "--checkpoint", ck.string(), "--dataset", data.string(), "--n", "5", "--m", "10", "--epochs",
                      "2", "--report", (dir / "episodes.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "n_way,m_shot,episodes,train_items,test_items,mean,std");
  EXPECT_EQ(rows[1].rfind("5,10,10,50,100,", 0), 0u);
  const auto eps = lines(slurp(dir / "episodes.csv"));
  ASSERT_EQ(eps.size(), 11u);
  for (std::size_t e = 1; e < eps.size(); ++e) EXPECT_NE(eps[e].find(",50,100,"), std::string::npos);
}

TEST(Cli, FewShotInsufficientClassesIsDataError) {
  const auto dir = scratch();
  const auto data = synth(dir / "data", "cube,sphere", 30);
  const auto ck = pretrained(dir / "run", synth(dir / "pre", "sphere", 1));
  const auto r = run({"fewshot", "--checkpoint", ck.string(), "--dataset", data.string(), "--n", "5", "--m", "10"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, SynthIsDeterministic) {
  const auto dir = scratch();
  synth(dir / "a", "cube,torus", 2, 9);
  synth(dir / "b", "cube,torus", 2, 9);
  EXPECT_EQ(snapshot(dir / "a").size(), snapshot(dir / "b").size());
  EXPECT_EQ(slurp(dir / "a" / "cube" / "cube_0001.xyz"), slurp(dir / "b" / "cube" / "cube_0001.xyz"));
  EXPECT_EQ(run({"synth", "--classes", "blob", "--out", (dir / "c").string()}).code, 1);
}

TEST(Cli, SelfcheckPasses) {
  const auto r = run({"selfcheck"});
  EXPECT_EQ(r.code, 0) << r.out;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0], "suite,status,seconds,detail");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NE(rows[i].find(",pass,"), std::string::npos) << rows[i];
}

}  // namespace
