// modprune: train, prune and evaluate modality-conditioned structured pruning
// on the synthetic multimodal task. Every command reads one JSON config (all
// sections optional), applies flag overrides and writes under --out.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "modprune/checkpoint.hpp"
#include "modprune/errors.hpp"
#include "modprune/harness.hpp"

using namespace modprune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> ratio;
  std::optional<std::size_t> missing;
  std::optional<std::string> scorer;
  std::string out = "run";
  std::string checkpoint;
  std::string gates;
  std::string mask;
  std::size_t sample = 0;
};

RunConfig load_config(const Options& o) {
  json j = json::object();
  if (!o.config_path.empty()) {
    const std::string text = read_file(o.config_path);
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw InputError(o.config_path + ": " + e.what());
    }
  }
  RunConfig c = run_config_from_json(j);
  if (o.seed) c.set_seed(*o.seed);
  if (o.ratio) c.sweep.ratios = {*o.ratio};
  if (o.missing) c.sweep.missing = {*o.missing};
  if (o.scorer) c.sweep.scorers = {*o.scorer};
  c.validate();
  return c;
}

fs::path out_path(const Options& o, const std::string& name) {
  fs::create_directories(o.out);
  return fs::path(o.out) / name;
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

void echo_config(const Options& o, const std::string& command, const RunConfig& c, json args = json::object()) {
  json j;
  j["command"] = command;
  j["config"] = to_json(c);
  j["seed"] = c.train.seed;
  j["args"] = std::move(args);
  write_json(out_path(o, command + ".config.json"), j);
}

std::string checkpoint_or(const Options& o, const std::string& name) {
  return o.checkpoint.empty() ? (fs::path(o.out) / name).string() : o.checkpoint;
}

Backbone load_backbone(const std::string& path, const RunConfig& c) {
  Backbone b = deserialize_backbone(read_file(path));
  if (b.config().n_modalities != c.data.n_modalities || b.config().seq_len != c.data.seq_len ||
      b.config().input_dim != c.data.input_dim || b.config().n_classes != c.data.n_classes)
    throw InputError(path + ": checkpoint does not match the configured data");
  return b;
}

GateTable load_gates(const Options& o) {
  return deserialize_gates(read_file(o.gates.empty() ? (fs::path(o.out) / "gates.ckpt").string() : o.gates));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cmd_gen(const Options& o) {
  const RunConfig c = load_config(o);
  const Dataset train = generate(c.data), test = generate_test_split(c.data);
  std::string csv = "split,sample,label,modality,t,feature,value\n";
  char line[160];
  for (const auto& [name, d] : {std::pair{"train", &train}, std::pair{"test", &test}})
    for (std::size_t i = 0; i < d->size(); ++i) {
      const Sample& s = d->samples[i];
      for (std::size_t j = 0; j < s.streams.size(); ++j)
        for (std::size_t t = 0; t < c.data.seq_len; ++t)
          for (std::size_t f = 0; f < c.data.input_dim; ++f) {
            std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%zu,%zu,%.17g\n", name, i, s.label, j, t, f,
                          s.streams[j].at(t, f));
            csv += line;
          }
    }
  write_file(out_path(o, "data.csv"), csv);
  echo_config(o, "gen", c);
  std::printf("train %zu samples, test %zu samples, %zu classes, %zu modalities\n", train.size(), test.size(),
              c.data.n_classes, c.data.n_modalities);
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = load_config(o);
  const Dataset data = generate(c.data), test = generate_test_split(c.data);
  const TrainResult r = train(data, c.model, c.train, &test);
  const json prov = {{"command", "train"}, {"seed", c.train.seed}, {"config", to_json(c)}};
  write_file(out_path(o, "model.ckpt"), serialize_backbone(r.model, prov));
  write_file(out_path(o, "gates.ckpt"), serialize_gates(r.gates));
  write_json(out_path(o, "report.json"), r.report.to_json());
  echo_config(o, "train", c);
  for (const auto& [k, acc] : r.report.accuracy_by_missing) std::printf("missing %zu: accuracy %.6f\n", k, acc);
  std::printf("backbone params %zu, gate params %zu\n", r.report.backbone_params, r.report.gate_params);
  return 0;
}

UnitScores scores_for(const Options& o, const RunConfig& c, const Backbone& model, const std::string& scorer,
                      std::size_t k) {
  const Dataset calib = generate(c.data);
  std::optional<GateTable> gates;
  if (scorer == "sentrygate") gates = load_gates(o);
  if (o.mask.empty()) {
    const Dataset test = generate_test_split(c.data);
    const SweepInputs in{&model, gates ? &*gates : nullptr, &test, &calib};
    return sweep_scores(in, scorer, k, c.sweep.seeds.front(), c.sweep.taylor_samples);
  }
  const ModalityMask m = ModalityMask::parse(o.mask);
  if (scorer == "sentrygate") return score_sentrygate(*gates, m);
  if (scorer == "taylor") return score_taylor(model, calib, std::span(&m, 1), c.sweep.taylor_samples);
  if (scorer == "random") return score_random(model.layout(), derive_seed(c.sweep.seeds.front(), {0x72616e64}));
  if (scorer == "magnitude") return score_magnitude(model);
  if (scorer == "synflow") return score_synflow(model);
  throw InputError("unknown scorer '" + scorer + "'");
}

int cmd_prune(const Options& o) {
  if (!o.ratio) throw InputError("prune needs --ratio");
  const RunConfig c = load_config(o);
  const std::string src = checkpoint_or(o, "model.ckpt");
  const Backbone model = load_backbone(src, c);
  const std::string scorer = o.scorer.value_or("sentrygate");
  const std::size_t k = o.missing.value_or(0);
  const UnitScores scores = scores_for(o, c, model, scorer, k);
  const PrunePlan plan = select_by_budget(scores, model.layout(), *o.ratio);
  const Backbone pruned = materialize(model, plan);

  json args = {{"checkpoint", src}, {"scorer", scorer}, {"ratio", *o.ratio}};
  if (o.mask.empty())
    args["missing"] = k;
  else
    args["mask"] = o.mask;
  json prov = args;
  prov["checkpoint"] = fs::path(src).filename().string();
  prov["command"] = "prune";
  prov["seed"] = c.train.seed;
  prov["source_fnv1a64"] = fnv1a64(read_file(src));
  write_file(out_path(o, "pruned.ckpt"), serialize_backbone(pruned, prov));
  write_json(out_path(o, "plan.json"), plan.to_json());
  write_json(out_path(o, "scores.json"), scores.to_json());
  echo_config(o, "prune", c, args);

  std::printf("retained units %zu of %zu\n", plan.retained_units(), model.layout().total_units());
  std::printf("flops %.0f -> %.0f\n", model_flops(model), model_flops(pruned));
  std::printf("memory_bytes %zu -> %zu\n", model_memory(model), model_memory(pruned));
  for (const auto& e : plan.floor_events) std::printf("floor %s\n", e.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = load_config(o);
  const std::string src = checkpoint_or(o, "model.ckpt");
  const Backbone model = load_backbone(src, c);
  const Dataset test = generate_test_split(c.data);
  json j = {{"checkpoint", src}, {"seeds", c.sweep.seeds}};
  if (!o.mask.empty()) {
    const double acc = evaluate_fixed(model, test, ModalityMask::parse(o.mask));
    j["mask"] = o.mask;
    j["accuracy"] = acc;
    std::printf("accuracy %.6f\n", acc);
  } else {
    const std::size_t k = o.missing.value_or(0);
    const EvalResult r = evaluate(model, test, k, c.sweep.seeds);
    j["missing"] = k;
    j["accuracy"] = r.mean;
    j["stddev"] = r.stddev;
    j["per_seed"] = r.per_seed;
    std::printf("accuracy %.6f +- %.6f\n", r.mean, r.stddev);
  }
  j["flops"] = model_flops(model);
  j["memory_bytes"] = model_memory(model);
  write_json(out_path(o, "eval.json"), j);
  echo_config(o, "eval", c, {{"checkpoint", src}});
  return 0;
}

int cmd_sweep(const Options& o) {
  const RunConfig c = load_config(o);
  const Backbone model = load_backbone(checkpoint_or(o, "model.ckpt"), c);
  std::optional<GateTable> gates;
  for (const auto& s : c.sweep.scorers)
    if (s == "sentrygate") gates = load_gates(o);
  const Dataset test = generate_test_split(c.data), calib = generate(c.data);
  const auto rows = sweep(c.sweep, {&model, gates ? &*gates : nullptr, &test, &calib});
  write_file(out_path(o, "sweep.csv"), sweep_csv(rows));
  const json summary = sweep_summary(rows);
  write_json(out_path(o, "sweep_summary.json"), summary);
  echo_config(o, "sweep", c);
  for (const auto& [name, s] : summary["scorers"].items())
    std::printf("%-10s mean accuracy %.6f, best in %d cells\n", name.c_str(), s["mean_accuracy"].get<double>(),
                s["best_cells"].get<int>());
  return 0;
}

int cmd_flops(const Options& o) {
  const RunConfig c = load_config(o);
  BackboneConfig sparse = c.model, dense = c.model;
  sparse.sparse_attention = true;
  dense.sparse_attention = false;
  auto attn = [](const BackboneConfig& b) {
    AttentionFlops enc = attention_flops(b.encoder_attention()), fus = attention_flops(b.fusion_attention());
    return double(b.n_modalities * b.encoder_depth) * enc.total() + double(b.fusion_depth) * fus.total();
  };
  const double ad = attn(dense), as = attn(sparse), md = model_flops(dense), ms = model_flops(sparse);
  std::printf("encoder U=%zu of T=%zu, fusion U=%zu of T=%zu\n", sparse.encoder_attention().top_u(),
              sparse.encoder_attention().seq_len, sparse.fusion_attention().top_u(),
              sparse.fusion_attention().seq_len);
  std::printf("attention dense  %.0f\nattention sparse %.0f\nattention ratio  %s\n", ad, as,
              fmt("%.6f", as / ad).c_str());
  std::printf("model dense      %.0f\nmodel sparse     %.0f\nmodel ratio      %s\n", md, ms,
              fmt("%.6f", ms / md).c_str());
  return 0;
}

int cmd_export_attn(const Options& o) {
  const RunConfig c = load_config(o);
  const Backbone model = load_backbone(checkpoint_or(o, "model.ckpt"), c);
  const Dataset test = generate_test_split(c.data);
  if (o.sample >= test.size())
    throw InputError("--sample " + std::to_string(o.sample) + " out of range (" + std::to_string(test.size()) + ")");
  const ModalityMask m = o.mask.empty() ? ModalityMask::all_present(c.data.n_modalities) : ModalityMask::parse(o.mask);
  std::vector<AttentionProbe> probes;
  ForwardContext ctx;
  ctx.probes = &probes;
  {
    NoGradGuard ng;
    model.forward(test.samples[o.sample], m, &ctx);
  }
  write_file(out_path(o, "attention.bin"), serialize_attention(probes));
  std::size_t n = 0;
  for (const auto& p : probes) n += p.heads.size();
  echo_config(o, "export-attn", c, {{"sample", o.sample}, {"mask", m.str()}});
  std::printf("%zu head records from %zu layers\n", n, probes.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-conditioned structured pruning on a synthetic multimodal task"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Seed for data, training and evaluation");
    s->add_option("--out", o.out, "Run directory")->capture_default_str();
  };
  auto add_model = [&](CLI::App* s) {
    s->add_option("--checkpoint", o.checkpoint, "Backbone checkpoint (default OUT/model.ckpt)");
  };

  auto* gen = app.add_subcommand("gen", "Write the synthetic dataset as CSV");
  add_common(gen);
  auto* tr = app.add_subcommand("train", "Train backbone and gates");
  add_common(tr);
  auto* pr = app.add_subcommand("prune", "Score, select and slice a trained backbone");
  add_common(pr);
  add_model(pr);
  pr->add_option("--ratio", o.ratio, "Fraction of units to remove")->required();
  pr->add_option("--scorer", o.scorer, "sentrygate, random, magnitude, synflow or taylor");
  pr->add_option("--missing", o.missing, "Score for platforms with K missing modalities");
  pr->add_option("--mask", o.mask, "Score for one platform mask, e.g. 110111");
  pr->add_option("--gates", o.gates, "Gate checkpoint (default OUT/gates.ckpt)");
  auto* ev = app.add_subcommand("eval", "Accuracy under missing modalities");
  add_common(ev);
  add_model(ev);
  ev->add_option("--missing", o.missing, "Modalities dropped per sample");
  ev->add_option("--mask", o.mask, "Fixed mask for every sample");
  auto* sw = app.add_subcommand("sweep", "Scorer x ratio x missing grid");
  add_common(sw);
  add_model(sw);
  sw->add_option("--gates", o.gates, "Gate checkpoint (default OUT/gates.ckpt)");
  sw->add_option("--ratio", o.ratio, "Single ratio instead of the grid");
  sw->add_option("--missing", o.missing, "Single missing count instead of the grid");
  sw->add_option("--scorer", o.scorer, "Single scorer instead of the grid");
  auto* fl = app.add_subcommand("flops", "Dense vs sparse attention FLOPs for the configured model");
  add_common(fl);
  auto* ex = app.add_subcommand("export-attn", "Dump per-head attention weights for one sample");
  add_common(ex);
  add_model(ex);
  ex->add_option("--sample", o.sample, "Test split sample index");
  ex->add_option("--mask", o.mask, "Modality mask");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*tr) return cmd_train(o);
    if (*pr) return cmd_prune(o);
    if (*ev) return cmd_eval(o);
    if (*sw) return cmd_sweep(o);
    if (*fl) return cmd_flops(o);
    if (*ex) return cmd_export_attn(o);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
