#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "unibf/channel.hpp"
#include "unibf/cli.hpp"
#include "unibf/model.hpp"

using namespace unibf;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "unibf");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("unibf_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::vector<std::string> tiny_train(const std::string& head, const std::string& out) {
  return {"train", "--head", head, "--m", "2", "--k", "2", "--steps", "20",
          "--batch", "8", "--eval-every", "10", "--val-per-level", "4",
          "--width", "8", "--depth", "2", "--quiet", "--out", out};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  const Result r = run({"train", "--out", "x.bin"});
  CHECK(r.code == 2);
  CHECK(r.err.find("usage error") != std::string::npos);
  CHECK(run({"eval", "--out", "x.csv", "--m", "0", "--baseline", "wmmse"}).code == 2);
  CHECK(run({"eval", "--out", "x.csv"}).code == 2);
  CHECK(run({"eval", "--out", "x.csv", "--baseline", "mmse"}).code == 2);
  CHECK(run({"train", "--head", "cnn", "--out", "x.bin"}).code == 2);
  CHECK(run({"train", "--head", "sfl", "--batch", "1", "--out", "x.bin"}).code == 2);
  CHECK(run({"gen-data", "--count", "3", "--out", "x.txt", "--fixed-p", "10", "--per-level"})
            .code == 2);
  CHECK(run({"train", "--head", "sfl", "--fixed-p", "10", "--train-set", "d.txt",
             "--out", "x.bin"})
            .code == 2);
  CHECK(run({"gen-data", "--count", "3", "--out", "x.txt", "--pgrid", "30:5:0"}).code == 2);
}

TEST_CASE("help exits cleanly") {
  const Result r = run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("train") != std::string::npos);
  CHECK(r.out.find("gen-data") != std::string::npos);
}

TEST_CASE("output path helpers") {
  CHECK(cli::manifest_path("a/b.bin") == fs::path("a/b.manifest.json"));
  CHECK(cli::log_path("run.bin") == fs::path("run.log.csv"));
  ::unsetenv(cli::kOutDirEnv);
  CHECK(cli::resolve_out("x.bin") == fs::path("x.bin"));
  ::setenv(cli::kOutDirEnv, "/tmp/outdir", 1);
  CHECK(cli::resolve_out("x.bin") == fs::path("/tmp/outdir/x.bin"));
  CHECK(cli::resolve_out("/abs/x.bin") == fs::path("/abs/x.bin"));
  ::unsetenv(cli::kOutDirEnv);
  CHECK_FALSE(cli::code_fingerprint().empty());
}

TEST_CASE("gen-data, train and eval round trip") {
  TempDir dir;
  const std::string data = dir / "d.txt";
  REQUIRE(run({"gen-data", "--m", "2", "--k", "2", "--count", "5", "--per-level",
               "--seed", "4", "--out", data})
              .code == 0);
  std::ifstream in(data);
  const auto ds = channel::read_dataset(in);
  CHECK(ds.samples.size() == 35);
  CHECK(ds.num_antennas == 2);

  const std::string params = dir / "m.bin";
  const Result tr = run(tiny_train("sfl", params));
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(params));
  const std::string log = slurp(cli::log_path(params));
  CHECK(log.rfind("step,loss,val_sr_p0,", 0) == 0);
  std::size_t rows = 0;
  for (char c : log) rows += c == '\n';
  CHECK(rows == 3);

  const auto man = nlohmann::json::parse(slurp(cli::manifest_path(params)));
  CHECK(man["command"] == "train");
  CHECK(man["code_fingerprint"] == cli::code_fingerprint());
  CHECK(man["seed"].is_number());
  CHECK(man["argv"].size() > 3);
  CHECK(man.contains("isa"));
  CHECK(man.contains("started_utc"));
  CHECK(man.contains("finished_utc"));
  CHECK(man["outputs"].size() >= 2);

  const auto loaded = model::load_params(params);
  CHECK(loaded.dims.head == model::HeadKind::sfl);
  CHECK(loaded.dims.hidden == std::vector<std::size_t>{8, 8});

  const std::string csv = dir / "e.csv";
  REQUIRE(run({"eval", "--m", "2", "--k", "2", "--model", "net=" + params, "--baseline",
               "wmmse,zf", "--test-set", data, "--out", csv})
              .code == 0);
  const std::string table = slurp(csv);
  CHECK(table.rfind("p_db,net,wmmse,zf,net/wmmse,zf/wmmse\n", 0) == 0);
  rows = 0;
  for (char c : table) rows += c == '\n';
  CHECK(rows == 8);
  CHECK(fs::exists(cli::manifest_path(csv)));

  // Same run twice gives identical bytes.
  const std::string params2 = dir / "m2.bin";
  REQUIRE(run(tiny_train("sfl", params2)).code == 0);
  CHECK(slurp(params) == slurp(params2));
  CHECK(slurp(cli::log_path(params)) == slurp(cli::log_path(params2)));

  CHECK(run({"eval", "--m", "3", "--k", "2", "--model", params, "--out", dir / "bad.csv"})
            .code == 1);
  CHECK(run({"eval", "--model", dir / "missing.bin", "--out", dir / "bad.csv"}).code == 1);
}

TEST_CASE("relative outputs follow the output directory variable") {
  TempDir dir;
  ::setenv(cli::kOutDirEnv, dir.path.c_str(), 1);
  const Result r = run({"gen-data", "--m", "2", "--k", "2", "--count", "3", "--out",
                        "sub/d.txt"});
  ::unsetenv(cli::kOutDirEnv);
  CHECK(r.code == 0);
  CHECK(fs::exists(dir.path / "sub" / "d.txt"));
  CHECK(fs::exists(dir.path / "sub" / "d.manifest.json"));
}

TEST_CASE("malformed datasets report the line") {
  TempDir dir;
  const std::string data = dir / "bad.txt";
  {
    std::ofstream f(data);
    f << R"({"format":"unibf-dataset","version":1,"M":1,"K":1,"grid_db":[0]})" << '\n'
      << "0 1 2\n0 1\n";
  }
  const Result r = run({"eval", "--m", "1", "--k", "1", "--baseline", "wmmse",
                        "--test-set", data, "--out", dir / "e.csv"});
  CHECK(r.code == 1);
  CHECK(r.err.find("(at 3)") != std::string::npos);
}

TEST_CASE("bench and ablate") {
  TempDir dir;
  const std::string uni = dir / "u.bin";
  const std::string fixed = dir / "f.bin";
  REQUIRE(run(tiny_train("fl", uni)).code == 0);
  auto fixed_args = tiny_train("fl", fixed);
  fixed_args.insert(fixed_args.end(), {"--fixed-p", "10"});
  REQUIRE(run(fixed_args).code == 0);

  const std::string timing = dir / "t.csv";
  REQUIRE(run({"bench", "--m", "2", "--k", "2", "--pgrid", "0,20", "--samples", "20",
               "--warmup", "2", "--model", uni, "--baseline", "wmmse", "--out", timing})
              .code == 0);
  const std::string t = slurp(timing);
  CHECK(t.rfind("method,p_db,samples,mean_s,std_s,median_of_means_s\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : t) rows += c == '\n';
  CHECK(rows == 5);

  const std::string ab = dir / "a.csv";
  REQUIRE(run({"ablate", "--m", "2", "--k", "2", "--pgrid", "0,10", "--samples", "10",
               "--universal", uni, "--fixed", fixed, "--out", ab})
              .code == 0);
  const std::string a = slurp(ab);
  const std::string header = a.substr(0, a.find('\n'));
  CHECK(header.find("fixed_p10") != std::string::npos);
  CHECK(header.find("per_p") != std::string::npos);
  CHECK(run({"ablate", "--m", "2", "--k", "2", "--universal", fixed, "--out", ab}).code == 2);
  CHECK(run({"ablate", "--m", "2", "--k", "2", "--universal", uni, "--fixed", uni, "--out",
             ab})
            .code == 2);
}
