#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "spcl/dataio.hpp"
#include "spcl/probes.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = spcl::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spcl_cli_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1 with a message") {
  auto r = run({});
  CHECK(r.code == spcl::cli::kUsage);
  CHECK(r.err.find("pretrain") != std::string::npos);
  r = run({"flops", "--depth", "1", "--dim", "8", "--heads", "2", "--patch", "2", "--image", "4", "--ratio", "0.5", "--bogus"});
  CHECK(r.code == spcl::cli::kUsage);
  CHECK(r.err.find("bogus") != std::string::npos);
  r = run({"frobnicate"});
  CHECK(r.code == spcl::cli::kUsage);
  r = run({"--help"});
  CHECK(r.code == spcl::cli::kOk);
  r = run({"flops", "--depth", "12", "--dim", "770", "--heads", "12", "--patch", "16", "--image", "224", "--ratio", "0.6"});
  CHECK(r.code == spcl::cli::kUsage);
  CHECK(r.err.find("770") != std::string::npos);
}

TEST_CASE("partition prints two equal groups") {
  const auto r = run({"partition", "--n", "100", "--ratio", "0.3", "--seed", "7"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("group_a (35):") != std::string::npos);
  CHECK(r.out.find("group_b (35):") != std::string::npos);
  CHECK(r.out.find("group_a grid: (") != std::string::npos);
  CHECK(run({"partition", "--n", "100", "--ratio", "0.3", "--seed", "7"}).out == r.out);
  CHECK(run({"partition", "--n", "100", "--ratio", "1.0", "--seed", "7"}).code == spcl::cli::kUsage);
}

TEST_CASE("flops prints the cost report") {
  const auto r = run({"flops", "--depth", "12", "--dim", "768", "--heads", "12", "--patch", "16", "--image",
                      "224", "--ratio", "0.6", "--tsv"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("total\t6869090304") != std::string::npos);
}

TEST_CASE("gen-data is reproducible") {
  const fs::path a = temp_dir("gen_a"), b = temp_dir("gen_b");
  for (const auto& d : {a, b}) {
    const auto r = run({"gen-data", "--out", d.string(), "--count", "6", "--seed", "3", "--image", "16"});
    REQUIRE(r.code == 0);
  }
  CHECK(spcl::read_file(a / "manifest.tsv") == spcl::read_file(b / "manifest.tsv"));
  CHECK(spcl::read_file(a / "img_000004.pgm") == spcl::read_file(b / "img_000004.pgm"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("pretrain, embed and probe end to end") {
  const fs::path root = temp_dir("e2e");
  const std::string data = (root / "data").string(), run_dir = (root / "run").string();
  REQUIRE(run({"gen-data", "--out", data, "--count", "12", "--image", "16", "--test-fraction", "0.25"}).code == 0);
  const std::vector<std::string> tiny = {"--set", "image=16", "--set", "patch=4", "--set", "dim=16",
                                         "--set", "heads=2", "--set", "depth=1"};
  std::vector<std::string> args = {"pretrain", "--data", data, "--out", run_dir, "--epochs", "2", "--batch-size", "3"};
  args.insert(args.end(), tiny.begin(), tiny.end());
  auto r = run(args);
  REQUIRE(r.code == 0);
  CHECK(r.err.find("lr_peak") != std::string::npos);
  CHECK(fs::exists(root / "run" / "metrics.tsv"));
  const std::string ckpt = (root / "run" / "checkpoint-last.spcl").string();
  REQUIRE(fs::exists(ckpt));

  const std::string tr = (root / "train.tsv").string(), te = (root / "test.tsv").string();
  REQUIRE(run({"embed", "--checkpoint", ckpt, "--data", data, "--out", tr, "--split", "train"}).code == 0);
  REQUIRE(run({"embed", "--checkpoint", ckpt, "--data", data, "--out", te, "--split", "test"}).code == 0);
  CHECK(spcl::import_embeddings(tr).size() == 9);
  CHECK(spcl::import_embeddings(te).size() == 3);

  r = run({"probe", "--train", tr, "--test", te, "--knn", "3"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("knn_accuracy\t", 0) == 0);
  r = run({"probe", "--train", tr, "--test", te, "--linear"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("linear_accuracy\t", 0) == 0);

  // Bad inputs map to the data error code.
  CHECK(run({"embed", "--checkpoint", (root / "missing").string(), "--data", data, "--out", tr}).code ==
        spcl::cli::kData);
  // Unknown config keys are usage errors.
  args.push_back("--set");
  args.push_back("depht=2");
  CHECK(run(args).code == spcl::cli::kUsage);
  fs::remove_all(root);
}
