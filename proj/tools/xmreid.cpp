// Command-line entry point: dataset generation, training stages, evaluation,
// the ablation table, the alignment-weight sweep, and figure outputs.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmreid/experiments.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace xmreid;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  const char* env = std::getenv("XMREID_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

data::Dataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.jsonl")) throw std::runtime_error("no dataset at " + dir.string() + " (manifest.jsonl missing)");
  return data::Dataset::load(dir);
}

train::TrainState load_state(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  return train::load_checkpoint(path);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

std::vector<Real> parse_values(const std::string& s) {
  std::vector<Real> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw UsageError("empty value list");
  return out;
}

// Defaults, then the config file, then --set key=value, then dedicated flags.
struct ConfigLayers {
  std::string file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> pretrain_epochs, joint_epochs;

  void add_to(CLI::App* app) {
    app->add_option("--config", file, "JSON config file (keys mirror TrainConfig)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one key, e.g. --set lambda_align=0.5 or --set gen_arch.style_dim=4");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--pretrain-epochs", pretrain_epochs, "Generator pretraining epochs");
    app->add_option("--joint-epochs", joint_epochs, "Joint training epochs");
  }

  json overrides() const {
    json j = json::object();
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      const std::string key = s.substr(0, eq), text = s.substr(eq + 1);
      json value;
      try {
        value = json::parse(text);
      } catch (const json::parse_error&) {
        value = text;
      }
      json* node = &j;
      std::stringstream path(key);
      std::string part;
      std::vector<std::string> parts;
      while (std::getline(path, part, '.')) parts.push_back(part);
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
      (*node)[parts.back()] = value;
    }
    if (seed) j["seed"] = *seed;
    if (pretrain_epochs) j["pretrain_epochs"] = *pretrain_epochs;
    if (joint_epochs) j["joint_epochs"] = *joint_epochs;
    return j;
  }

  train::TrainConfig resolve(train::TrainConfig base = {}) const {
    if (!file.empty()) {
      json j;
      try {
        j = json::parse(read_text(file));
      } catch (const json::parse_error& e) {
        throw data::ConfigError(file + ": " + e.what());
      }
      train::apply_json(base, j);
    }
    train::apply_json(base, overrides());
    base.validate();
    return base;
  }
};

struct EvalFlags {
  std::string shot = "single";
  int repeats = 10;
  std::uint64_t seed = 0;
  std::string probe = "IR";

  void add_to(CLI::App* app) {
    app->add_option("--shot", shot, "single or multi")->check(CLI::IsMember({"single", "multi"}));
    app->add_option("--repeats", repeats, "Random gallery draws")->check(CLI::PositiveNumber);
    app->add_option("--eval-seed", seed, "Seed of the gallery draws");
    app->add_option("--probe", probe, "Query modality (IR or RGB)")->check(CLI::IsMember({"IR", "RGB"}));
  }

  eval::EvalOptions options() const {
    eval::EvalOptions o;
    o.shot = eval::shot_from_string(shot);
    o.repeats = repeats;
    o.seed = seed;
    o.probe = data::modality_from_string(probe);
    return o;
  }
};

// Line-delimited training log plus optional progress on stderr.
class RunLog {
 public:
  RunLog(const fs::path& path, bool verbose)
      : out_(path, std::ios::app), verbose_(verbose), start_(std::chrono::steady_clock::now()) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }

  train::TrainHooks hooks(train::TrainState& state, const fs::path& checkpoint) {
    train::TrainHooks h;
    h.on_step = [this](const train::StepRecord& r) {
      json j{{"event", "step"}, {"stage", train::to_string(r.stage)}, {"epoch", r.epoch}, {"step", r.step},
             {"lr", r.lr},      {"skipped", r.skipped},                 {"losses", r.losses}, {"wall", wall()}};
      out_ << j.dump() << '\n';
    };
    h.on_epoch = [this, &state, checkpoint](const train::EpochSummary& e) {
      json j{{"event", "epoch"}, {"stage", train::to_string(e.stage)}, {"epoch", e.epoch},
             {"step", e.step},   {"lr", e.lr},  {"losses", e.mean_losses},  {"epoch_seconds", e.wall_seconds},
             {"wall", wall()}};
      out_ << j.dump() << std::endl;
      if (!checkpoint.empty()) train::save_checkpoint(state, checkpoint);
      if (verbose_) std::cerr << j.dump() << '\n';
    };
    h.dump_path = checkpoint.empty() ? fs::path() : fs::path(checkpoint.string() + ".diverged");
    return h;
  }

  void event(const json& j) {
    json k = j;
    k["wall"] = wall();
    out_ << k.dump() << std::endl;
    if (verbose_) std::cerr << k.dump() << '\n';
  }

 private:
  double wall() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

  std::ofstream out_;
  bool verbose_;
  std::chrono::steady_clock::time_point start_;
};

fs::path prepare_out(const std::string& flag, const std::string& command) {
  fs::path out = flag.empty() ? output_root() / command : fs::path(flag);
  fs::create_directories(out);
  return out;
}

// config.json is a valid --config file on its own; run.json holds the rest.
void freeze_config(const fs::path& out, const train::TrainConfig& c, const json& run) {
  write_text(out / "config.json", train::to_json(c).dump(2) + "\n");
  write_text(out / "run.json", run.dump(2) + "\n");
}

std::vector<int> first_records(const data::Dataset& ds, data::Modality m, int limit) {
  std::vector<int> out;
  for (int id : ds.manifest().test_ids) {
    if (static_cast<int>(out.size()) >= limit) break;
    const auto& recs = ds.records_of(id, m);
    if (!recs.empty()) out.push_back(recs.front());
  }
  return out;
}

void print_summary(const eval::EvalReport& r) {
  json j{{"rank1", r.rank(1)}, {"rank10", r.rank(std::min(10, static_cast<int>(r.cmc.size())))},
         {"rank20", r.rank(std::min(20, static_cast<int>(r.cmc.size())))}, {"map", r.map},
         {"queries", r.num_queries}, {"shot", eval::to_string(r.options.shot)}, {"repeats", r.options.repeats}};
  std::cout << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint set-level and instance-level alignment for RGB-IR re-identification (synthetic desk scale)"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print epoch summaries to stderr");

  // gen-data
  data::GenerateConfig gen_cfg;
  std::string gen_out, gen_size = "64x32";
  auto* gen_cmd = app.add_subcommand("gen-data", "Render the synthetic two-modality dataset");
  gen_cmd->add_option("--ids-train", gen_cfg.ids_train, "Train identities")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--ids-test", gen_cfg.ids_test, "Test identities")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--per-modality", gen_cfg.per_modality, "Images per identity per modality")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen_size, "Image size HxW");
  gen_cmd->add_option("--seed", gen_cfg.seed, "Generation seed");
  gen_cmd->add_option("--out", gen_out, "Dataset directory");
  gen_cmd->add_flag("--overwrite", gen_cfg.overwrite, "Replace a non-empty directory");

  // pretrain / train
  std::string data_dir, out_flag, resume, ckpt_path;
  ConfigLayers layers;
  EvalFlags eval_flags;
  bool eval_after = false;

  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain the generation module");
  pre_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  pre_cmd->add_option("--out", out_flag, "Output directory");
  pre_cmd->add_option("--resume", resume, "Continue from a checkpoint");
  layers.add_to(pre_cmd);

  auto* train_cmd = app.add_subcommand("train", "Pretrain (if needed) and jointly train generation and alignment");
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  train_cmd->add_option("--out", out_flag, "Output directory");
  train_cmd->add_option("--resume", resume, "Continue from a pretraining or joint checkpoint");
  train_cmd->add_flag("--eval", eval_after, "Evaluate the final model on the test split");
  layers.add_to(train_cmd);
  eval_flags.add_to(train_cmd);

  // eval
  bool fidelity = false;
  auto* eval_cmd = app.add_subcommand("eval", "Cross-modality retrieval on the test split");
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ckpt_path, "Trained checkpoint")->required();
  eval_cmd->add_option("--out", out_flag, "Output directory");
  eval_cmd->add_flag("--fidelity", fidelity, "Also report generation fidelity on held-out train images");
  eval_flags.add_to(eval_cmd);

  // sweep / ablate
  std::string seeds_flag = "1,2,3", values_flag = "0,0.1,0.5,1,2";
  auto* sweep_cmd = app.add_subcommand("sweep", "Rank-1 and mAP over lambda_align values (SL+IL model)");
  sweep_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  sweep_cmd->add_option("--out", out_flag, "Output directory");
  sweep_cmd->add_option("--values", values_flag, "Comma-separated lambda_align values");
  sweep_cmd->add_option("--seeds", seeds_flag, "Comma-separated training seeds");
  layers.add_to(sweep_cmd);
  eval_flags.add_to(sweep_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "The five set-level / instance-level ablation rows");
  ablate_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  ablate_cmd->add_option("--out", out_flag, "Output directory");
  ablate_cmd->add_option("--seeds", seeds_flag, "Comma-separated training seeds");
  layers.add_to(ablate_cmd);
  eval_flags.add_to(ablate_cmd);

  // visualize / hist
  int rows = 8, bins = 40;
  auto* vis_cmd = app.add_subcommand("visualize", "PNG grid of (x_rgb, x_ir, x_ir2rgb, x_rgb2ir) rows");
  vis_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  vis_cmd->add_option("--checkpoint", ckpt_path, "Trained checkpoint")->required();
  vis_cmd->add_option("--out", out_flag, "Output directory");
  vis_cmd->add_option("--rows", rows, "Test identities to show")->check(CLI::PositiveNumber);

  auto* hist_cmd = app.add_subcommand("hist", "Intra- and inter-person cross-modality similarity histograms");
  hist_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  hist_cmd->add_option("--checkpoint", ckpt_path, "Trained checkpoint")->required();
  hist_cmd->add_option("--out", out_flag, "Output directory");
  hist_cmd->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen_cmd) {
      const auto x = gen_size.find('x');
      if (x == std::string::npos) throw UsageError("--size expects HxW, got '" + gen_size + "'");
      gen_cfg.height = std::stoi(gen_size.substr(0, x));
      gen_cfg.width = std::stoi(gen_size.substr(x + 1));
      const fs::path out = gen_out.empty() ? output_root() / "data" : fs::path(gen_out);
      const auto m = data::generate_dataset(gen_cfg, out);
      std::cout << json{{"records", m.records.size()}, {"train_ids", m.train_ids.size()},
                        {"test_ids", m.test_ids.size()}, {"out", out.string()}}.dump()
                << '\n';
      return 0;
    }

    if (*pre_cmd || *train_cmd) {
      const bool joint = train_cmd->parsed();
      const auto ds = load_dataset(data_dir);
      const fs::path out = prepare_out(out_flag, joint ? "train" : "pretrain");
      train::TrainState state;
      if (!resume.empty()) {
        state = load_state(resume);
        if (!layers.file.empty()) throw UsageError("--config cannot be combined with --resume; use --set");
        train::TrainConfig c = state.config;
        train::apply_json(c, layers.overrides());
        c.validate();
        state.config = c;
      } else {
        state = train::make_state(layers.resolve(), ds.num_train_ids());
      }
      freeze_config(out, state.config,
                    {{"command", joint ? "train" : "pretrain"}, {"data", fs::absolute(data_dir).string()},
                     {"resume", resume}});
      RunLog log(out / "log.jsonl", verbose);
      const fs::path ckpt = out / (joint ? "model.ckpt" : "pretrain.ckpt");
      auto hooks = log.hooks(state, ckpt);
      train::pretrain_generator(state, ds, hooks);
      if (joint) train::joint_train(state, ds, hooks);
      train::save_checkpoint(state, ckpt);
      json done{{"event", "done"}, {"checkpoint", ckpt.string()}, {"pretrain_step", state.pretrain_step},
                {"joint_step", state.joint_step}};
      if (joint && eval_after) {
        const auto report = eval::evaluate_protocol(*state.align, ds, eval_flags.options());
        write_text(out / "report.json", eval::report_json(report) + "\n");
        done["rank1"] = report.rank(1);
        done["map"] = report.map;
      }
      log.event(done);
      std::cout << done.dump() << '\n';
      return 0;
    }

    if (*eval_cmd) {
      auto state = load_state(ckpt_path);
      if (!state.align) throw std::runtime_error("checkpoint " + ckpt_path + " has no alignment module (pretraining only)");
      const auto ds = load_dataset(data_dir);
      const fs::path out = prepare_out(out_flag, "eval");
      freeze_config(out, state.config,
                    {{"command", "eval"}, {"data", fs::absolute(data_dir).string()}, {"checkpoint", ckpt_path},
                     {"shot", eval_flags.shot}, {"repeats", eval_flags.repeats}, {"eval_seed", eval_flags.seed},
                     {"probe", eval_flags.probe}});
      const auto report = eval::evaluate_protocol(*state.align, ds, eval_flags.options());
      write_text(out / "report.json", eval::report_json(report) + "\n");
      print_summary(report);
      if (fidelity) {
        const int hold = std::max(1, state.config.holdout_per_identity);
        const auto rgb = data::held_out_records(ds, data::Modality::RGB, hold);
        const auto ir = data::held_out_records(ds, data::Modality::IR, hold);
        const auto f = eval::generation_fidelity(*state.gen, ds, rgb, ir);
        json j{{"color_error", f.color_error}, {"gray_error", f.gray_error}, {"ratio", f.ratio()},
               {"recon_l1", f.recon_l1}, {"pairs", f.pairs}};
        write_text(out / "fidelity.json", j.dump(2) + "\n");
        std::cout << j.dump() << '\n';
      }
      return 0;
    }

    if (*sweep_cmd || *ablate_cmd) {
      const bool sweep = sweep_cmd->parsed();
      const auto ds = load_dataset(data_dir);
      const fs::path out = prepare_out(out_flag, sweep ? "sweep" : "ablate");
      const train::TrainConfig base = layers.resolve();
      const auto seeds = parse_seeds(seeds_flag);
      json run{{"command", sweep ? "sweep" : "ablate"}, {"data", fs::absolute(data_dir).string()}, {"seeds", seeds},
               {"shot", eval_flags.shot}, {"repeats", eval_flags.repeats}, {"eval_seed", eval_flags.seed}};
      if (sweep) run["values"] = parse_values(values_flag);
      freeze_config(out, base, run);
      RunLog log(out / "log.jsonl", verbose);
      exp::RunCache cache;
      auto on_run = [&](const std::string& label, const exp::RunResult& r, train::TrainState&) {
        log.event({{"event", "run"}, {"label", label}, {"seed", r.seed}, {"rank1", r.rank1()}, {"map", r.report.map}});
      };
      if (sweep) {
        const auto values = parse_values(values_flag);
        const auto report = exp::sweep_lambda_align(values, exp::ablation_variants()[3].apply(base), ds, seeds,
                                                    eval_flags.options(), cache, on_run);
        write_text(out / "sweep.json", exp::sweep_json(report) + "\n");
        write_text(out / "sweep.csv", exp::sweep_csv(report));
        std::cout << exp::sweep_csv(report);
      } else {
        const auto table = exp::ablation_suite(base, ds, seeds, eval_flags.options(), cache, on_run);
        write_text(out / "ablation.csv", exp::ablation_csv(table));
        std::cout << exp::ablation_csv(table);
      }
      return 0;
    }

    if (*vis_cmd) {
      auto state = load_state(ckpt_path);
      const auto ds = load_dataset(data_dir);
      const fs::path out = prepare_out(out_flag, "visualize");
      freeze_config(out, state.config,
                    {{"command", "visualize"}, {"data", fs::absolute(data_dir).string()}, {"checkpoint", ckpt_path},
                     {"rows", rows}});
      const auto rgb = first_records(ds, data::Modality::RGB, rows), ir = first_records(ds, data::Modality::IR, rows);
      eval::write_quad_grid(*state.gen, ds, rgb, ir, out / "quads.png");
      std::cout << json{{"png", (out / "quads.png").string()}, {"rows", rgb.size()}}.dump() << '\n';
      return 0;
    }

    if (*hist_cmd) {
      auto state = load_state(ckpt_path);
      if (!state.align) throw std::runtime_error("checkpoint " + ckpt_path + " has no alignment module (pretraining only)");
      const auto ds = load_dataset(data_dir);
      const fs::path out = prepare_out(out_flag, "hist");
      freeze_config(out, state.config,
                    {{"command", "hist"}, {"data", fs::absolute(data_dir).string()}, {"checkpoint", ckpt_path},
                     {"bins", bins}});
      const auto h = eval::similarity_histograms(*state.align, ds, bins);
      eval::write_histograms_csv(h, out / "hist.csv");
      eval::write_histograms_png(h, out / "hist.png");
      std::cout << json{{"intra_mean", h.intra_mean}, {"inter_mean", h.inter_mean}, {"gap", h.gap()},
                        {"intra_pairs", h.intra_pairs}, {"inter_pairs", h.inter_pairs}}.dump()
                << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  } catch (const data::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}
