#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "hatesub/pipeline.hpp"

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string mask;
  std::string pooling;
  std::string checkpoints;
};

hatesub::PipelineConfig load_config(const GlobalOptions& o) {
  auto base = hatesub::KeyValueConfig::load(o.config);
  std::map<std::string, std::string> overrides;
  if (o.seed) {
    const auto s = std::to_string(*o.seed);
    overrides["classifier.seeds"] = s;
    overrides["factorization.seed"] = s;
    overrides["data.split_seed"] = s;
    if (!base.with_prefix("synthetic.").empty()) overrides["synthetic.seed"] = s;
  }
  if (!o.out_dir.empty()) overrides["output.dir"] = std::filesystem::absolute(o.out_dir).string();
  if (!o.mask.empty()) overrides["classifier.masks"] = o.mask;
  if (!o.pooling.empty()) overrides["classifier.pooling"] = o.pooling;
  if (!o.checkpoints.empty()) overrides["analysis.checkpoints"] = o.checkpoints;
  return hatesub::PipelineConfig::load(o.config, overrides);
}

void print_build(const hatesub::BuildSummary& b) {
  std::cout << "z=" << b.z << " m=" << b.m << " nnz=" << b.nnz << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Culture-aware hate perception pipeline"};
  app.require_subcommand(1);
  GlobalOptions o;
  app.add_option("--config", o.config, "Experiment config file")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Override every seed (split, factorization, classifier, generator)");
  app.add_option("--out-dir", o.out_dir, "Artifact directory (overrides output.dir)");
  app.add_option("--mask", o.mask, "Classifier variants, e.g. full or hp,q,s (one ablation per block)");
  app.add_option("--pooling", o.pooling, "Hate perception pooling")
      ->check(CLI::IsMember({"weighted", "sum", "mean", "anno"}));
  app.add_option("--checkpoints", o.checkpoints, "Combination counts for the analysis curve, e.g. 1,5,10,50");

  auto* generate = app.add_subcommand("generate", "Write a synthetic dataset with planted effects");
  auto* build = app.add_subcommand("build", "Build the combination universe and interaction matrix");
  auto* factorize = app.add_subcommand("factorize", "Fit the biased matrix factorization");
  auto* train = app.add_subcommand("train", "Train classifier heads for every mask variant and seed");
  auto* eval = app.add_subcommand("eval", "Evaluate trained heads on the test split");
  auto* analyze = app.add_subcommand("analyze", "Leverage ordering, reconstruction and performance curves");
  auto* run = app.add_subcommand("run", "Run every stage in order");

  CLI11_PARSE(app, argc, argv);

  try {
    hatesub::Pipeline pipeline(load_config(o));
    if (generate->parsed()) {
      pipeline.generate();
    } else if (build->parsed()) {
      print_build(pipeline.build());
    } else if (factorize->parsed()) {
      const auto r = pipeline.factorize();
      std::cout << "epochs=" << r.epoch_losses.size() << " loss=" << hatesub::text::format_double(r.epoch_losses.back())
                << "\n";
    } else if (train->parsed()) {
      pipeline.train();
    } else if (eval->parsed()) {
      for (const auto& [name, j] : pipeline.eval()) {
        std::cout << name << " accuracy=" << j["mean"]["accuracy"] << " f1=" << j["mean"]["f1"] << "\n";
      }
    } else if (analyze->parsed()) {
      const auto curve = pipeline.analyze();
      std::cout << "analysis points=" << curve.points.size() << "\n";
    } else if (run->parsed()) {
      const auto& c = pipeline.config();
      if (c.annotations.empty() && c.synthetic) pipeline.generate();
      print_build(pipeline.build());
      pipeline.factorize();
      pipeline.train();
      for (const auto& [name, j] : pipeline.eval()) {
        std::cout << name << " accuracy=" << j["mean"]["accuracy"] << " f1=" << j["mean"]["f1"] << "\n";
      }
      pipeline.analyze();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
