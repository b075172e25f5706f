#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "doctest.h"
#include "stllm/error.hpp"
#include "stllm/harness.hpp"

using namespace stllm;
using namespace stllm::harness;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("stllm_unit_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.data.generator = data::GeneratorConfig::taxi_like(6, 48 * 8, 3);
  c.input_steps = 6;
  c.output_steps = 3;
  c.d_model = 4;
  c.heads = 2;
  c.layers = 2;
  c.unfrozen_layers = 1;
  c.freeze_mode = FreezeMode::FullTuning;
  c.epochs = 3;
  c.patience = 10;
  c.batch_size = 32;
  c.dropout = 0.0;
  c.pretrain.source = data::GeneratorConfig::taxi_like(6, 48 * 6, 11);
  c.pretrain.epochs = 4;
  return c;
}

}  // namespace

TEST_CASE("experiment config JSON round trip") {
  ExperimentConfig c = tiny_config();
  c.ablation.wo_t = true;
  c.few_shot_fraction = 0.3;
  c.pretrained_checkpoint = "/tmp/x.ckpt";
  const auto j = c.to_json();
  CHECK(ExperimentConfig::from_json(j).to_json() == j);
  nlohmann::json bad = j;
  bad["d_model"] = "wide";
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
}

TEST_CASE("variant tags") {
  const ExperimentConfig base = tiny_config();
  CHECK(apply_variant(base, "wo_llm").ablation.wo_llm);
  const ExperimentConfig combo = apply_variant(base, "fpt+wo_t");
  CHECK(combo.freeze_mode == FreezeMode::FPT);
  CHECK(combo.ablation.wo_t);
  CHECK(apply_variant(base, "u1").unfrozen_layers == 1);
  CHECK(apply_variant(base, "full").to_json() == base.to_json());
  CHECK_THROWS_AS(apply_variant(base, "nonsense"), ConfigError);
  CHECK_THROWS_AS(apply_variant(base, "full+"), ConfigError);
  const auto sweep = u_sweep_variants(6);
  CHECK(sweep == std::vector<std::string>{"u1", "u2", "u3", "u4", "u5"});
}

TEST_CASE("a pretrained mode without a checkpoint is a config error") {
  ExperimentConfig c = tiny_config();
  c.freeze_mode = FreezeMode::PFA;
  CHECK_THROWS_AS(build_model(c, 6, 1), ConfigError);
  c.ablation.wo_llm = true;
  CHECK_NOTHROW(build_model(c, 6, 1));
}

TEST_CASE("training records and evaluation are consistent") {
  ExperimentConfig c = tiny_config();
  const PreparedData data = prepare_data(c.data.load(), c.input_steps, c.output_steps);
  TrainResult r = fit(c, data, data.splits.train);
  CHECK(r.record.epochs.size() == c.epochs);
  CHECK(r.record.best_epoch >= 1);
  CHECK(r.record.train_windows == data.splits.train.size());
  CHECK(r.record.split_hash == data.split_hash);

  const MetricsReport a = evaluate(*r.model, data, data.splits.test);
  const MetricsReport b = evaluate(*r.model, data, data.splits.test);
  CHECK(a.mae == b.mae);
  CHECK(a.mae == r.record.test.mae);
  // Target statistics come from the target's own train split, so a zero-shot
  // pass over the same series reproduces the in-domain evaluation.
  CHECK(zero_shot(*r.model, *data.raw).mae == doctest::Approx(a.mae).epsilon(1e-12));

  SUBCASE("few-shot with the full fraction uses every training window") {
    CHECK(data::chronological_prefix(data.splits.train, 1.0).size() == data.splits.train.size());
  }
}

TEST_CASE("a zero head predicts the training mean") {
  ExperimentConfig c = tiny_config();
  const PreparedData data = prepare_data(c.data.load(), c.input_steps, c.output_steps);
  auto model = build_model(c, 6, 1);
  model->parameters().at("head.w").mutable_value().fill(0.0);
  model->parameters().at("head.b").mutable_value().fill(0.0);
  const MetricsReport r = evaluate(*model, data, data.splits.test);

  const double mu = data.stats.mean()[0];
  double abs_sum = 0.0, truth_sum = 0.0;
  std::size_t count = 0;
  for (const auto& w : data.splits.test.windows) {
    for (std::size_t s = 0; s < c.output_steps; ++s) {
      for (std::size_t n = 0; n < 6; ++n) {
        const double y = data.raw->values.at({w.start + c.input_steps + s, n, 0});
        abs_sum += std::abs(y - mu);
        truth_sum += std::abs(y);
        ++count;
      }
    }
  }
  CHECK(r.m == count);
  CHECK(r.mae == doctest::Approx(abs_sum / static_cast<double>(count)).epsilon(1e-10));
  CHECK(r.wape_percent == doctest::Approx(100.0 * abs_sum / truth_sum).epsilon(1e-10));
}

TEST_CASE("pretraining, transfer and freezing") {
  ExperimentConfig c = tiny_config();
  c.output_dir = scratch("pretrain");
  const PretrainResult p1 = pretrain_source(c);
  CHECK(p1.final_val_loss <= 0.8 * p1.initial_val_loss);
  CHECK(std::filesystem::exists(p1.path));
  ExperimentConfig again = c;
  again.output_dir = scratch("pretrain_again");
  const PretrainResult p2 = pretrain_source(again);
  CHECK(serialize_checkpoint(p1.checkpoint) == serialize_checkpoint(p2.checkpoint));

  c.freeze_mode = FreezeMode::PFA;
  c.pretrained_checkpoint = p1.path;
  c.output_dir = scratch("pfa");
  const auto built = build_model(c, 6, 1);
  for (const auto& e : p1.checkpoint.entries) {
    if (e.name.starts_with("block.") || e.name.starts_with("final_ln.")) {
      CHECK(built->parameters().at(e.name).value() == e.value);
    }
  }
  const RunRecord rec = train(c);
  CHECK(std::filesystem::exists(c.output_dir / "run.json"));
  CHECK(std::filesystem::exists(c.output_dir / "metrics.json"));
  CHECK(std::filesystem::exists(rec.checkpoint));
  const auto trained = StLlm::load(rec.checkpoint);
  CHECK_FALSE(rec.frozen.empty());
  for (const auto& name : rec.frozen) CHECK(trained->parameters().at(name).value() == built->parameters().at(name).value());

  const ExperimentConfig fpt = apply_variant(c, "fpt");
  const PreparedData d1 = prepare_data(c.data.load(), c.input_steps, c.output_steps);
  const PreparedData d2 = prepare_data(fpt.data.load(), fpt.input_steps, fpt.output_steps);
  CHECK(d1.split_hash == d2.split_hash);
  std::filesystem::remove_all(scratch("").parent_path());
}
