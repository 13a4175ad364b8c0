#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("HELIX_CLI");
  REQUIRE_MESSAGE(p != nullptr, "HELIX_CLI must point at the command line binary");
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string out;  // combined stdout + stderr
};

RunResult run(const std::string& args) {
  static int counter = 0;
  fs::path cap = fs::temp_directory_path() /
                 ("helix_cli_out_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::string cmd = cli_path() + " " + args + " > " + cap.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream f(cap);
  std::stringstream ss;
  ss << f.rdbuf();
  r.out = ss.str();
  fs::remove(cap);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("helix_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

// One config shared by the whole pipeline, sized for seconds not minutes.
std::string pipeline_config(const std::string& root) {
  std::ostringstream s;
  s << "data.root = " << root << "/data\n"
    << "data.genera = 5\n"
    << "data.species = 2\n"
    << "data.samples = 6\n"
    << "data.image_size = 16\n"
    << "data.part_size = 6\n"
    << "data.translate_jitter = 1\n"
    << "model.image_size = 16\n"
    << "model.width = 4\n"
    << "model.pool = 1,1,0,0\n"
    << "helix.heads = 2\n"
    << "episode.n_way = 2\n"
    << "episode.k_shot = 1\n"
    << "episode.q_per = 2\n"
    << "stage1.epochs = 1\n"
    << "stage1.batch = 16\n"
    << "stage1.decay = 1\n"
    << "stage2.epochs = 1\n"
    << "stage2.decay = 1\n"
    << "stage2.episodes_per_epoch = 4\n"
    << "stage2.val_every = 1\n"
    << "stage2.val_episodes = 4\n"
    << "eval.episodes = 10\n"
    << "seed = 3\n";
  return s.str();
}

}  // namespace

TEST_CASE("missing config file exits 2 with a config error") {
  RunResult r = run("eval --config /nonexistent/nowhere.cfg");
  CHECK(r.exit_code == 2);
  CHECK(r.out.find("config") != std::string::npos);
}

TEST_CASE("unknown flags and missing subcommands are rejected") {
  RunResult r = run("--bogus-flag");
  CHECK(r.exit_code == 2);
  RunResult r2 = run("");
  CHECK(r2.exit_code == 2);
  RunResult r3 = run("eval --heads notanumber");
  CHECK(r3.exit_code == 2);
}

TEST_CASE("help is available per subcommand") {
  RunResult r = run("--help");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("gen-data") != std::string::npos);
  CHECK(r.out.find("meta-train") != std::string::npos);
  RunResult r2 = run("eval --help");
  CHECK(r2.exit_code == 0);
  CHECK(r2.out.find("--episodes") != std::string::npos);
}

TEST_CASE("full pipeline runs end to end and is reproducible") {
  TempDir dir("pipe");
  fs::path cfg = dir.path / "run.cfg";
  write_file(cfg, pipeline_config(dir.str()));
  std::string base = " --config " + cfg.string() + " --out " + dir.str();

  RunResult g = run("gen-data" + base);
  REQUIRE_MESSAGE(g.exit_code == 0, g.out);
  CHECK(fs::exists(dir.path / "data" / "base"));
  CHECK(fs::exists(dir.path / "data" / "val"));
  CHECK(fs::exists(dir.path / "data" / "novel"));

  RunResult p = run("pretrain" + base);
  REQUIRE_MESSAGE(p.exit_code == 0, p.out);
  CHECK(fs::exists(dir.path / "pretrain.ckpt"));
  CHECK(p.out.find("stage1") != std::string::npos);

  RunResult m = run("meta-train" + base);
  REQUIRE_MESSAGE(m.exit_code == 0, m.out);
  CHECK(fs::exists(dir.path / "meta.ckpt"));
  CHECK(m.out.find("val_acc") != std::string::npos);

  RunResult e = run("eval" + base);
  REQUIRE_MESSAGE(e.exit_code == 0, e.out);
  CHECK(e.out.find("mean ") != std::string::npos);
  CHECK(e.out.find("ci ") != std::string::npos);
  CHECK(e.out.find("episodes 10") != std::string::npos);
  CHECK(fs::exists(dir.path / "eval.csv"));

  // Heatmaps from one support and one query image.
  fs::path sup, qry;
  for (const auto& cls : fs::directory_iterator(dir.path / "data" / "novel")) {
    for (const auto& f : fs::directory_iterator(cls.path())) {
      if (sup.empty())
        sup = f.path();
      else if (qry.empty())
        qry = f.path();
    }
    if (!qry.empty()) break;
  }
  REQUIRE(!qry.empty());
  write_file(cfg, pipeline_config(dir.str()) + "heatmap.support = " + sup.string() +
                      "\nheatmap.query = " + qry.string() + "\n");
  RunResult h = run("heatmap" + base);
  REQUIRE_MESSAGE(h.exit_code == 0, h.out);
  for (const char* name : {"backbone_support.pgm", "backbone_query.pgm", "rmp_support.pgm",
                           "rmp_query.pgm", "rep_support.pgm", "rep_query.pgm"})
    CHECK(fs::exists(dir.path / name));

  // Repeating eval gives byte identical output files and the same stdout line.
  std::string csv1 = slurp(dir.path / "eval.csv");
  RunResult e2 = run("eval" + base);
  REQUIRE(e2.exit_code == 0);
  CHECK(slurp(dir.path / "eval.csv") == csv1);
  // Skip any config echo lines; the result line itself must match.
  auto tail = [](const std::string& s) {
    auto pos = s.find("mean ");
    return pos == std::string::npos ? s : s.substr(pos);
  };
  CHECK(tail(e2.out) == tail(e.out));
}

TEST_CASE("ablate writes a csv with one row per cell and seed") {
  TempDir dir("abl");
  fs::path cfg = dir.path / "run.cfg";
  write_file(cfg, pipeline_config(dir.str()) +
                      "ablate.cells = sym:2:conv:on:1 sym:2:conv:on:0\n"
                      "ablate.seeds = 1\n");
  std::string base = " --config " + cfg.string() + " --out " + dir.str();
  REQUIRE(run("gen-data" + base).exit_code == 0);
  RunResult a = run("ablate" + base);
  REQUIRE_MESSAGE(a.exit_code == 0, a.out);
  std::string csv = slurp(dir.path / "ablation.csv");
  CHECK(csv.rfind("variant,heads,embed,rep,stack,mean,ci,episodes,seed", 0) == 0);
  int rows = 0;
  for (char c : csv)
    if (c == '\n') rows++;
  CHECK(rows == 3);  // header + 2 cells x 1 seed
}

TEST_CASE("flag overrides reach the training configuration") {
  TempDir dir("ovr");
  fs::path cfg = dir.path / "run.cfg";
  write_file(cfg, pipeline_config(dir.str()));
  std::string base = " --config " + cfg.string() + " --out " + dir.str();
  REQUIRE(run("gen-data" + base).exit_code == 0);
  RunResult p = run("pretrain" + base + " --seed 9");
  REQUIRE_MESSAGE(p.exit_code == 0, p.out);
  CHECK(p.out.find("seed = 9") != std::string::npos);
  RunResult m = run("meta-train" + base + " --seed 9 --variant sq --heads 1 --rep off");
  REQUIRE_MESSAGE(m.exit_code == 0, m.out);
  CHECK(m.out.find("helix.variant = sq") != std::string::npos);
  CHECK(m.out.find("helix.heads = 1") != std::string::npos);
  CHECK(m.out.find("helix.rep = off") != std::string::npos);
}

TEST_CASE("eval without a trained checkpoint is a data/config failure, not a crash") {
  TempDir dir("nock");
  fs::path cfg = dir.path / "run.cfg";
  write_file(cfg, pipeline_config(dir.str()));
  std::string base = " --config " + cfg.string() + " --out " + dir.str();
  REQUIRE(run("gen-data" + base).exit_code == 0);
  RunResult e = run("eval" + base);
  CHECK(e.exit_code != 0);
  CHECK(e.out.find("error:") != std::string::npos);
}
