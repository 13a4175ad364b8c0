#include <Eigen/Core>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "helix/data.hpp"
#include "helix/heatmap.hpp"
#include "helix/trainer.hpp"

namespace {

struct Flags {
  std::string config_path;
  std::string out_dir = ".";
  std::int64_t seed = -1;
  std::string variant, embed, rep;
  int heads = -1, stack = -1, episodes = -1;
};

helix::Config effective_config(const Flags& f) {
  helix::Config c;
  if (!f.config_path.empty()) c = helix::Config::from_file(f.config_path);
  if (f.seed >= 0) c.set("seed", std::to_string(f.seed));
  if (!f.variant.empty()) c.set("helix.variant", f.variant);
  if (f.heads >= 0) c.set("helix.heads", std::to_string(f.heads));
  if (f.stack >= 0) c.set("helix.stack", std::to_string(f.stack));
  if (!f.embed.empty()) c.set("helix.embed", f.embed);
  if (!f.rep.empty()) c.set("helix.rep", f.rep);
  if (f.episodes >= 0) c.set("eval.episodes", std::to_string(f.episodes));
  return c;
}

void echo_config(const helix::Config& c) {
  for (const auto& [k, v] : c.entries()) std::cout << "config " << k << " = " << v << "\n";
  std::cout << std::flush;
}

helix::SyntheticSpec synth_spec(const helix::Config& c) {
  helix::SyntheticSpec s;
  s.genera = static_cast<int>(c.get_int("data.genera", s.genera));
  s.species_per_genus = static_cast<int>(c.get_int("data.species", s.species_per_genus));
  s.samples_per_species = static_cast<int>(c.get_int("data.samples", s.samples_per_species));
  s.image_size = static_cast<int>(c.get_int("data.image_size", s.image_size));
  s.part_size = static_cast<int>(c.get_int("data.part_size", s.part_size));
  s.translate_jitter = static_cast<int>(c.get_int("data.translate_jitter", s.translate_jitter));
  s.rotate_jitter = c.get_double("data.rotate_jitter", s.rotate_jitter);
  s.hue_jitter = c.get_double("data.hue_jitter", s.hue_jitter);
  s.base_genera = static_cast<int>(c.get_int("data.base_genera", s.base_genera));
  s.val_genera = static_cast<int>(c.get_int("data.val_genera", s.val_genera));
  s.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  return s;
}

helix::DatasetSplit load_data(const helix::Config& c) {
  std::string root = c.get_str("data.root", "");
  if (root.empty()) throw helix::ConfigError("data.root is required");
  int image_size = static_cast<int>(c.get_int("model.image_size", 84));
  return helix::load_dataset(root, image_size);
}

helix::Tensor load_image(const std::string& path, int size) {
  helix::Tensor img;
  if (path.size() > 4 && path.substr(path.size() - 4) == ".ppm")
    img = helix::read_ppm(path);
  else
    img = helix::read_raw_tensor(path);
  if (img.rank() != 3 || img.dim(0) != 3) throw helix::DataError("not a (3,H,W) image: " + path);
  return helix::resize_bilinear(img, size, size);
}

std::vector<helix::AblationCell> parse_cells(const std::string& text) {
  std::vector<helix::AblationCell> cells;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::vector<std::string> parts;
    std::istringstream ts(tok);
    std::string p;
    while (std::getline(ts, p, ':')) parts.push_back(p);
    if (parts.size() != 5) throw helix::ConfigError("ablate.cells: expected variant:heads:embed:rep:stack");
    helix::AblationCell cell;
    cell.variant = parts[0];
    cell.heads = std::stoi(parts[1]);
    cell.embed = parts[2];
    cell.rep = parts[3] == "on";
    cell.stack = std::stoi(parts[4]);
    cells.push_back(cell);
  }
  if (cells.empty()) throw helix::ConfigError("ablate.cells: empty");
  return cells;
}

int run(const std::string& cmd, const Flags& flags) {
  helix::Config cfg = effective_config(flags);
  echo_config(cfg);

  if (cmd == "gen-data") {
    std::string root = cfg.get_str("data.root", flags.out_dir);
    helix::generate_synthetic(synth_spec(cfg), root);
    std::cout << "wrote dataset to " << root << "\n";
    return 0;
  }

  helix::TrainConfig tc = helix::TrainConfig::from_config(cfg);

  if (cmd == "pretrain") {
    helix::DatasetSplit ds = load_data(cfg);
    helix::Checkpoint ck = helix::pretrain_backbone(tc, ds, &std::cout);
    std::string path = flags.out_dir + "/pretrain.ckpt";
    helix::save_checkpoint(path, ck);
    std::cout << "wrote " << path << "\n";
    return 0;
  }
  if (cmd == "meta-train") {
    helix::DatasetSplit ds = load_data(cfg);
    std::string pre_path = cfg.get_str("pretrained", flags.out_dir + "/pretrain.ckpt");
    helix::Checkpoint pre = helix::load_checkpoint(pre_path);
    helix::Checkpoint ck = helix::meta_train(tc, ds, pre, &std::cout);
    std::string path = flags.out_dir + "/meta.ckpt";
    helix::save_checkpoint(path, ck);
    std::cout << "wrote " << path << "\n";
    return 0;
  }
  if (cmd == "eval") {
    helix::DatasetSplit ds = load_data(cfg);
    std::string ck_path = cfg.get_str("checkpoint", flags.out_dir + "/meta.ckpt");
    helix::Checkpoint ck = helix::load_checkpoint(ck_path);
    std::string split = cfg.get_str("eval.split", "novel");
    helix::Rng rng(tc.seed);
    helix::EvalReport rep =
        helix::evaluate_checkpoint(ck, helix::split_classes(ds, split), tc.eval_episodes, rng);
    char line[96];
    std::snprintf(line, sizeof(line), "mean %.6f ci %.6f episodes %d\n", rep.mean, rep.ci95,
                  rep.episodes);
    std::cout << line;
    helix::AblationResult r;
    helix::TrainConfig ct = ck.train_config();
    r.cell.variant = helix::variant_name(ct.helix.variant);
    r.cell.heads = ct.helix.heads;
    r.cell.embed = ct.helix.embed == helix::EmbedKind::Conv ? "conv" : "fc";
    r.cell.rep = ct.helix.rep;
    r.cell.stack = ct.helix.stack;
    r.seed = tc.seed;
    r.report = rep;
    std::ofstream csv(flags.out_dir + "/eval.csv");
    csv << helix::ablation_csv({r});
    std::cout << "wrote " << flags.out_dir << "/eval.csv\n";
    return 0;
  }
  if (cmd == "ablate") {
    helix::DatasetSplit ds = load_data(cfg);
    std::vector<helix::AblationCell> cells = parse_cells(cfg.get_str("ablate.cells", ""));
    std::vector<std::uint64_t> seeds;
    for (int s : cfg.get_int_list("ablate.seeds", {0}))
      seeds.push_back(static_cast<std::uint64_t>(s));
    auto results = helix::run_ablation(tc, ds, cells, seeds, &std::cout);
    std::string csv = helix::ablation_csv(results);
    std::ofstream out(flags.out_dir + "/ablation.csv");
    out << csv;
    std::cout << csv << "wrote " << flags.out_dir << "/ablation.csv\n";
    return 0;
  }
  if (cmd == "heatmap") {
    std::string ck_path = cfg.get_str("checkpoint", flags.out_dir + "/meta.ckpt");
    std::string sup = cfg.get_str("heatmap.support", "");
    std::string qry = cfg.get_str("heatmap.query", "");
    if (sup.empty() || qry.empty())
      throw helix::ConfigError("heatmap.support and heatmap.query are required");
    helix::Checkpoint ck = helix::load_checkpoint(ck_path);
    int size = ck.train_config().image_size;
    helix::write_heatmaps(ck, load_image(sup, size), load_image(qry, size), flags.out_dir);
    std::cout << "wrote 6 maps to " << flags.out_dir << "\n";
    return 0;
  }
  throw helix::ConfigError("unknown command: " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("HELIX_THREADS")) {
    int n = std::atoi(t);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"few-shot cross-attention trainer"};
  app.require_subcommand(1);
  Flags flags;
  std::vector<CLI::App*> subs;
  for (const char* name : {"gen-data", "pretrain", "meta-train", "eval", "ablate", "heatmap"}) {
    CLI::App* s = app.add_subcommand(name);
    s->add_option("--config", flags.config_path, "config file (key = value lines)");
    s->add_option("--seed", flags.seed, "RNG seed");
    s->add_option("--variant", flags.variant)->check(CLI::IsMember({"qs", "sq", "asym-sq", "asym-qs", "sym"}));
    s->add_option("--heads", flags.heads, "attention heads");
    s->add_option("--stack", flags.stack, "stacked layers (0 disables cross-attention)");
    s->add_option("--embed", flags.embed)->check(CLI::IsMember({"conv", "fc"}));
    s->add_option("--rep", flags.rep)->check(CLI::IsMember({"on", "off"}));
    s->add_option("--episodes", flags.episodes, "evaluation episodes");
    s->add_option("--out", flags.out_dir, "output directory");
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  }

  try {
    return run(app.get_subcommands().front()->get_name(), flags);
  } catch (const helix::Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    if (e.category() == "config") return 2;
    if (e.category() == "data") return 3;
    if (e.category() == "format") return 4;
    if (e.category() == "train") return 5;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: other: " << e.what() << "\n";
    return 1;
  }
}
