#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stllm/error.hpp"
#include "stllm/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stllm;

namespace {

enum class Kind { Int, Real, Flag, Text };

struct Field {
  std::string flag;
  std::string key;
  Kind kind;
  std::string help;
};

const std::vector<Field>& experiment_fields() {
  static const std::vector<Field> fields = {
      {"--input-steps", "input_steps", Kind::Int, "P"},
      {"--output-steps", "output_steps", Kind::Int, "S"},
      {"--d-model", "d_model", Kind::Int, "embedding width D"},
      {"--heads", "heads", Kind::Int, "attention heads"},
      {"--layers", "layers", Kind::Int, "transformer depth L (0 = mode default)"},
      {"--unfrozen-layers", "unfrozen_layers", Kind::Int, "U"},
      {"--freeze-mode", "freeze_mode", Kind::Text, "pfa|fpt|full_tuning|no_pretrain|full_layer"},
      {"--ffn-width", "ffn_width", Kind::Int, "feed-forward width (0 = 4x)"},
      {"--dropout", "dropout", Kind::Real, "dropout rate"},
      {"--causal", "causal", Kind::Flag, "causal attention mask"},
      {"--max-tokens", "max_tokens", Kind::Int, "positional table size (0 = N)"},
      {"--lambda", "lambda", Kind::Real, "L2 weight"},
      {"--loss", "loss", Kind::Text, "mae|mse"},
      {"--lr", "learning_rate", Kind::Real, "learning rate"},
      {"--weight-decay", "weight_decay", Kind::Real, "decoupled weight decay"},
      {"--warmup", "warmup_fraction", Kind::Real, "warmup fraction of steps"},
      {"--batch-size", "batch_size", Kind::Int, "batch size"},
      {"--epochs", "epochs", Kind::Int, "epoch cap"},
      {"--patience", "patience", Kind::Int, "early-stopping patience"},
      {"--seed", "seed", Kind::Int, "run seed"},
      {"--few-shot-fraction", "few_shot_fraction", Kind::Real, "share of train windows"},
      {"--wo-llm", "wo_llm", Kind::Flag, "replace the transformer with identity"},
      {"--wo-st", "wo_st", Kind::Flag, "drop temporal and spatial embeddings"},
      {"--wo-t", "wo_t", Kind::Flag, "drop temporal embeddings"},
      {"--wo-s", "wo_s", Kind::Flag, "drop spatial embedding"},
      {"--zero-pe", "zero_pe_on_transfer", Kind::Flag, "zero positional encoding on transfer"},
      {"--pretrained", "pretrained_checkpoint", Kind::Text, "pretraining checkpoint"},
      {"--out", "output_dir", Kind::Text, "output directory"},
  };
  return fields;
}

struct Options {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::string data_path;
  std::string data_format = "csv";
  int interval = 30;
  std::string profile;
  std::size_t stations = 0;
  std::size_t timesteps = 0;
  std::uint64_t data_seed = 0;
  std::string checkpoint;
  std::string variants;
};

void add_experiment_options(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_path, "JSON experiment config");
  for (const auto& f : experiment_fields()) {
    if (f.kind == Kind::Flag) {
      app->add_flag(f.flag, o.flags[f.key], f.help);
    } else {
      app->add_option(f.flag, o.values[f.key], f.help);
    }
  }
  app->add_option("--data", o.data_path, "series file (primary channel)");
  app->add_option("--format", o.data_format, "csv|binary")->check(CLI::IsMember({"csv", "binary"}));
  app->add_option("--interval", o.interval, "CSV interval minutes");
  app->add_option("--profile", o.profile, "synthetic profile taxi|bike")->check(CLI::IsMember({"taxi", "bike"}));
  app->add_option("--stations", o.stations, "synthetic station count");
  app->add_option("--timesteps", o.timesteps, "synthetic timesteps");
  app->add_option("--data-seed", o.data_seed, "synthetic seed");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

json generator_json(const Options& o) {
  const std::size_t n = o.stations ? o.stations : (o.profile == "bike" ? 16 : 20);
  const std::size_t t = o.timesteps ? o.timesteps : 2016;
  const std::uint64_t seed = o.data_seed ? o.data_seed : 1;
  const auto g = o.profile == "bike" ? data::GeneratorConfig::bike_like(n, t, seed)
                                     : data::GeneratorConfig::taxi_like(n, t, seed);
  return g.to_json();
}

harness::ExperimentConfig build_config(const Options& o) {
  json j = o.config_path.empty() ? json::object() : read_json_file(o.config_path);
  for (const auto& f : experiment_fields()) {
    if (f.kind == Kind::Flag) {
      if (o.flags.at(f.key)) j[f.key] = true;
      continue;
    }
    const std::string& v = o.values.at(f.key);
    if (v.empty()) continue;
    try {
      switch (f.kind) {
        case Kind::Int:
          j[f.key] = std::stoull(v);
          break;
        case Kind::Real:
          j[f.key] = std::stod(v);
          break;
        default:
          j[f.key] = v;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad value for " + f.flag + ": " + v);
    }
  }
  if (!o.data_path.empty()) {
    j["data"] = {{"path", o.data_path}, {"format", o.data_format}, {"interval_minutes", o.interval}};
  } else if (!o.profile.empty()) {
    j["data"] = {{"generator", generator_json(o)}};
  } else if (!j.contains("data")) {
    j["data"] = {{"generator", data::GeneratorConfig::taxi_like().to_json()}};
  }
  return harness::ExperimentConfig::from_json(j);
}

fs::path require_out(const harness::ExperimentConfig& c) {
  if (c.output_dir.empty()) throw ConfigError("--out (or output_dir) is required");
  fs::create_directories(c.output_dir);
  return c.output_dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void print_metrics(const MetricsReport& m) { std::cout << m.to_json().dump() << '\n'; }

int run_gen_data(const Options& o) {
  if (o.values.at("output_dir").empty()) throw ConfigError("--out is required");
  const fs::path out = o.values.at("output_dir");
  fs::create_directories(out);
  json gj = o.config_path.empty() ? generator_json(o) : read_json_file(o.config_path);
  if (gj.contains("generator")) gj = gj.at("generator");
  const auto g = data::GeneratorConfig::from_json(gj);
  const auto tt = data::synth_generate(g);
  std::vector<std::string> files;
  if (o.data_format == "binary") {
    data::write_binary(out / "series.bin", tt);
    files.push_back((out / "series.bin").string());
  } else {
    for (const auto& p : data::write_csv(out / "series", tt)) files.push_back(p.string());
  }
  double sum = 0.0;
  for (double v : tt.values.data()) sum += v;
  write_json(out / "run.json", {{"generator", g.to_json()}, {"files", files}});
  write_json(out / "metrics.json", {{"T", tt.timesteps()},
                                    {"N", tt.stations()},
                                    {"C", tt.channels()},
                                    {"mean", sum / static_cast<double>(tt.values.size())}});
  std::cout << "wrote " << files.size() << " file(s) to " << out.string() << '\n';
  return 0;
}

int run_pretrain(const Options& o) {
  auto c = build_config(o);
  const fs::path out = require_out(c);
  const auto r = harness::pretrain_source(c);
  write_json(out / "run.json", {{"config", c.to_json()}, {"checkpoint", r.path.string()}});
  write_json(out / "metrics.json", {{"initial_val_mae", r.initial_val_loss}, {"final_val_mae", r.final_val_loss}});
  std::cout << "pretrain val MAE " << r.initial_val_loss << " -> " << r.final_val_loss << " (" << r.path.string()
            << ")\n";
  return 0;
}

int run_train(const Options& o, bool few) {
  auto c = build_config(o);
  require_out(c);
  const auto rec = few ? harness::few_shot(c) : harness::train(c);
  print_metrics(rec.test);
  return 0;
}

int run_eval(const Options& o, bool transfer) {
  auto c = build_config(o);
  const fs::path out = require_out(c);
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const MetricsReport m = transfer ? harness::zero_shot(o.checkpoint, c) : harness::evaluate(o.checkpoint, c);
  const fs::path copy = out / "model.ckpt";
  if (fs::absolute(o.checkpoint) != fs::absolute(copy)) {
    fs::copy_file(o.checkpoint, copy, fs::copy_options::overwrite_existing);
  }
  write_json(out / "run.json", {{"config", c.to_json()}, {"source_checkpoint", o.checkpoint},
                                {"checkpoint", copy.string()}, {"test", m.to_json()}});
  write_json(out / "metrics.json", m.to_json());
  print_metrics(m);
  return 0;
}

std::vector<std::string> split_tags(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int run_ablate(const Options& o, bool sweep) {
  auto c = build_config(o);
  const fs::path out = require_out(c);
  std::vector<std::string> tags = split_tags(o.variants);
  if (tags.empty()) {
    tags = sweep ? harness::u_sweep_variants(c.resolved_layers())
                 : std::vector<std::string>{"full", "wo_llm", "wo_st", "wo_t", "wo_s"};
  }
  const auto rows = harness::ablate(c, tags);
  const std::string csv = harness::ablation_csv(rows);
  json runs = json::array();
  json metrics = json::object();
  for (const auto& r : rows) {
    runs.push_back({{"tag", r.tag}, {"record", r.record.to_json()}});
    metrics[r.tag] = r.record.test.to_json();
  }
  write_json(out / "run.json", {{"config", c.to_json()}, {"variants", runs}});
  write_json(out / "metrics.json", metrics);
  if (sweep) {
    std::ofstream(out / "sweep_u.csv", std::ios::trunc) << csv;
  }
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-temporal traffic forecasting with a partially frozen transformer"};
  app.require_subcommand(1);
  Options o;
  struct Sub {
    const char* name;
    const char* help;
  };
  const std::vector<Sub> subs = {{"gen-data", "write a synthetic series"},
                                 {"pretrain", "pretrain transformer blocks on a synthetic source corpus"},
                                 {"train", "supervised training"},
                                 {"eval", "evaluate a checkpoint on the test split"},
                                 {"few-shot", "train on a chronological prefix of the train split"},
                                 {"zero-shot", "evaluate a checkpoint on another dataset"},
                                 {"ablate", "run variant tags on shared data"},
                                 {"sweep-u", "sweep the number of unfrozen layers"}};
  std::map<std::string, CLI::App*> apps;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_experiment_options(sub, o);
    apps[s.name] = sub;
  }
  for (const char* name : {"eval", "zero-shot"}) {
    apps[name]->add_option("--checkpoint", o.checkpoint, "trained model checkpoint")->required();
  }
  for (const char* name : {"ablate", "sweep-u"}) {
    apps[name]->add_option("--variants", o.variants, "comma-separated variant tags");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (apps["gen-data"]->parsed()) return run_gen_data(o);
    if (apps["pretrain"]->parsed()) return run_pretrain(o);
    if (apps["train"]->parsed()) return run_train(o, false);
    if (apps["few-shot"]->parsed()) return run_train(o, true);
    if (apps["eval"]->parsed()) return run_eval(o, false);
    if (apps["zero-shot"]->parsed()) return run_eval(o, true);
    if (apps["ablate"]->parsed()) return run_ablate(o, false);
    if (apps["sweep-u"]->parsed()) return run_ablate(o, true);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
