// fcdn: inspect, gradcheck, train and eval for FC-DenseNet models.
//
// Exit codes: 0 ok, 1 a check failed, 2 usage or I/O problem.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fcdn/fcdn.hpp"

namespace fs = std::filesystem;
using namespace fcdn;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

// Stream keys for the top-level generators.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kSynthStream = 0xDA7A;

struct Options {
  std::string preset;
  std::string config_path;
  std::string data;
  std::string out = "run";
  std::string checkpoint;
  std::string predictions;
  std::string report;
  std::string split;
  std::string format = "text";
  std::string ops = "all";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs;
  std::optional<std::size_t> n_classes;
  std::size_t seeds = 1;
  bool paper_diff = false;
  bool inject_fault = false;
  bool fresh_init = false;
  bool quiet = false;
};

// Config file first, then flags on top.
RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = RunConfig::load(o.config_path);
  if (!o.preset.empty()) {
    if (!presets::by_name(o.preset)) throw ConfigError(0, "unknown preset '" + o.preset + "'");
    cfg.set("arch.preset", o.preset);
  }
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (!o.data.empty()) cfg.set("data", o.data);
  if (o.max_epochs) cfg.set("train.max_epochs", std::to_string(*o.max_epochs));
  if (o.n_classes) cfg.set("arch.n_classes", std::to_string(*o.n_classes));
  if (!cfg.has("seed")) cfg.set("seed", "0");
  return cfg;
}

DatasetSplit load_data(RunConfig& cfg) {
  const std::string where = cfg.get("data", "synth");
  cfg.set("data", where);
  DatasetSplit d;
  if (where == "synth") {
    Rng rng = Rng::derive(cfg.number<std::uint64_t>("seed", 0), kSynthStream);
    d = synth_dataset(cfg.synth(), rng);
  } else {
    std::vector<std::string> warnings;
    d = load_dataset(where, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  }
  if (!cfg.has("arch.n_classes")) cfg.set("arch.n_classes", std::to_string(d.n_classes));
  return d;
}

// Largest crop no bigger than 224 that fits every training image.
void resolve_crop(RunConfig& cfg, const DatasetSplit& d, const ArchConfig& arch) {
  if (cfg.has("train.crop_size") || d.train.empty()) return;
  std::size_t side = cfg.train().crop_size;
  for (const auto& s : d.train) side = std::min({side, s.height(), s.width()});
  side -= side % arch.size_multiple();
  if (side == 0) throw ConfigError(0, "training images are smaller than one network input unit");
  cfg.set("train.crop_size", std::to_string(side));
}

const std::vector<LabeledSample>& eval_split(const DatasetSplit& d, const std::string& name) {
  if (name.empty()) return d.test.empty() ? d.val : d.test;
  for (std::size_t i = 0; i < split_names().size(); ++i)
    if (name == split_names()[i]) return split_of(d, i);
  throw ConfigError(0, "unknown split '" + name + "' (train, val, test)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

int cmd_inspect(const Options& o) {
  if (o.preset.empty() && o.config_path.empty()) throw ConfigError(0, "inspect needs a preset or --config");
  RunConfig cfg = resolve_config(o);
  if (!cfg.has("arch.preset") && o.config_path.empty()) cfg.set("arch.preset", o.preset);
  const ArchConfig arch = cfg.arch();
  const ArchSummary s = summarize(arch);
  const std::string title = cfg.has("arch.preset") ? cfg.get("arch.preset") : o.config_path;

  if (o.format == "csv") {
    std::cout << format_arch_csv(s);
  } else if (o.format == "json") {
    auto j = arch_json(s);
    j["name"] = title;
    if (o.paper_diff) {
      if (auto d = diff_channel_schedule(arch)) {
        for (const auto& e : d->entries) {
          j["paper_diff"]["schedule"].push_back({{"stage", e.stage}, {"computed", e.computed},
                                                 {"published", e.published}, {"match", e.match},
                                                 {"known_discrepancy", e.known_discrepancy}});
        }
      }
    }
    std::cout << j.dump(2) << "\n";
  } else if (o.format == "text") {
    std::cout << format_arch_report(s, title);
  } else {
    throw ConfigError(0, "unknown format '" + o.format + "' (text, csv, json)");
  }
  if (!o.paper_diff) return kOk;

  bool ok = true;
  const bool text = o.format == "text";
  if (auto d = diff_channel_schedule(arch)) {
    if (text) std::cout << "\nchannel schedule vs published\n" << format_schedule_diff(*d);
    ok = ok && d->unexplained == 0;
  } else if (text) {
    std::cout << "\nno published channel schedule for this configuration\n";
  }
  std::vector<ParamDiff> mine;
  for (const auto& pd : diff_parameter_counts(arch.n_classes)) {
    const auto ref = presets::by_name(pd.preset);
    ArchConfig r = *ref;
    r.n_classes = arch.n_classes;
    r.dropout = arch.dropout;
    if (r == arch) mine.push_back(pd);
  }
  if (!mine.empty()) {
    if (text) std::cout << "\nparameter count vs published\n" << format_param_diff(mine);
    for (const auto& pd : mine) ok = ok && pd.within_tolerance;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_gradcheck(const Options& o) {
  std::vector<std::string> ops;
  if (o.ops == "all") {
    ops = gradcheck_ops();
  } else {
    bool known = false;
    for (const auto& n : gradcheck_ops()) known = known || n == o.ops;
    if (!known) throw ConfigError(0, "unknown op '" + o.ops + "'");
    ops = {o.ops};
  }
  if (o.seeds == 0) throw ConfigError(0, "--seeds must be at least 1");
  const std::uint64_t base = o.seed.value_or(0);
  GradcheckOptions opt;
  opt.inject_fault = o.inject_fault;
  bool all = true;
  std::printf("%-24s %6s %14s %8s  %s\n", "op", "seeds", "max rel.err", "entries", "status");
  for (const auto& op : ops) {
    double worst = 0;
    std::size_t entries = 0;
    bool passed = true;
    for (std::size_t k = 0; k < o.seeds; ++k) {
      opt.seed = base + k;
      const GradcheckResult r = run_gradcheck(op, opt);
      worst = std::max(worst, r.max_rel_error);
      entries += r.entries;
      passed = passed && r.passed;
    }
    all = all && passed;
    std::printf("%-24s %6zu %14.3e %8zu  %s\n", op.c_str(), o.seeds, worst, entries, passed ? "PASS" : "FAIL");
  }
  std::printf("%s (tolerance %.0e)\n", all ? "all ops passed" : "gradient check FAILED", opt.tolerance);
  return all ? kOk : kCheckFailed;
}

int cmd_train(const Options& o) {
  RunConfig cfg = resolve_config(o);
  const DatasetSplit data = load_data(cfg);
  const ArchConfig arch = cfg.arch();
  resolve_crop(cfg, data, arch);
  const TrainConfig tc = cfg.train();
  const std::uint64_t seed = tc.seed;

  Rng init = Rng::derive(seed, kInitStream);
  Network<float> net = build<float>(arch, init);
  if (!o.quiet) {
    std::printf("model: %zu parameters, %zu conv layers; data: %zu train / %zu val, %zu classes\n",
                net.parameter_count(), net.conv_layer_count(), data.train.size(), data.val.size(),
                data.n_classes);
  }
  const fs::path out(o.out);
  fs::create_directories(out);
  write_text(out / "run_config.txt", cfg.to_text());

  const auto result = train(net, data, tc, [&](const EpochRecord& r) {
    if (o.quiet) return;
    std::printf("epoch %4zu %-8s lr %.6g  loss %.5f  val mIoU %.4f  gacc %.4f\n", r.epoch,
                r.phase == Phase::crops ? "crops" : "finetune", r.lr, r.train_loss, r.val_miou, r.val_gacc);
    std::fflush(stdout);
  });
  write_epoch_log(out / "epoch_log.csv", result.log);
  write_checkpoint(out / "checkpoint.bin", cfg, std::as_const(net).parameters());
  std::printf("best %s %.4f at epoch %zu; checkpoint %s\n", to_string(tc.monitor).c_str(), result.best_value,
              result.best_epoch, (out / "checkpoint.bin").string().c_str());
  return kOk;
}

int cmd_eval(const Options& o) {
  RunConfig cfg;
  std::optional<Checkpoint> ck;
  if (o.fresh_init) {
    if (!o.checkpoint.empty()) throw ConfigError(0, "--fresh-init and --checkpoint are exclusive");
    cfg = resolve_config(o);
  } else {
    if (o.checkpoint.empty()) throw ConfigError(0, "eval needs --checkpoint (or --fresh-init)");
    if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
    ck = read_checkpoint(o.checkpoint);
    cfg = ck->config;
    if (!o.data.empty()) cfg.set("data", o.data);
  }
  const DatasetSplit data = load_data(cfg);
  const ArchConfig arch = cfg.arch();
  if (data.n_classes != arch.n_classes) {
    throw ConfigError(0, "dataset has " + std::to_string(data.n_classes) + " classes, model " +
                             std::to_string(arch.n_classes));
  }
  Rng init = Rng::derive(cfg.number<std::uint64_t>("seed", 0), kInitStream);
  Network<float> net = build<float>(arch, init);
  if (ck) load_parameters(*ck, net);

  const auto& samples = eval_split(data, o.split);
  if (samples.empty()) throw ConfigError(0, "evaluation split is empty");
  if (!o.predictions.empty()) fs::create_directories(o.predictions);
  ConfusionAccumulator acc(arch.n_classes);
  for (const auto& s : samples) {
    const auto pred = predict_classes(net, s);
    acc.accumulate(pred, s.labels.data, s.void_label);
    if (!o.predictions.empty()) {
      Image8 img{s.height(), s.width(), 1, {}};
      img.pixels.assign(pred.begin(), pred.end());
      write_netpbm(fs::path(o.predictions) / (s.id + ".pgm"), img);
    }
  }
  std::cout << format_metric_report(acc, data.class_names);

  auto j = metric_report_json(acc, data.class_names);
  j["samples"] = samples.size();
  j["seed"] = cfg.number<std::uint64_t>("seed", 0);
  j["config"] = cfg.to_text();
  j["checkpoint"] = ck ? nlohmann::json(o.checkpoint) : nlohmann::json(nullptr);
  fs::path report = o.report;
  if (report.empty() && ck) report = fs::path(o.checkpoint).parent_path() / "eval_report.json";
  if (!report.empty()) write_text(report, j.dump(2) + "\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activation buffers are freed and reallocated every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"FC-DenseNet semantic segmentation on the CPU"};
  app.require_subcommand(1);
  Options o;

  auto* inspect = app.add_subcommand("inspect", "print the stage table of a preset or config");
  inspect->add_option("preset", o.preset, "preset name")->check(CLI::IsMember(presets::names()));
  inspect->add_option("--config", o.config_path, "key-value config file");
  inspect->add_option("--classes", o.n_classes, "number of classes");
  inspect->add_flag("--paper-diff", o.paper_diff, "compare with published figures");
  inspect->add_option("--format", o.format, "text, csv or json");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op at 64-bit");
  gradcheck->add_option("--ops", o.ops, "all or one op name");
  gradcheck->add_option("--seed", o.seed, "first seed");
  gradcheck->add_option("--seeds", o.seeds, "number of consecutive seeds");
  gradcheck->add_flag("--inject-fault", o.inject_fault, "scale analytic gradients by 1.01");

  auto* trainc = app.add_subcommand("train", "train a model");
  trainc->add_option("--data", o.data, "dataset directory or 'synth'");
  trainc->add_option("--preset", o.preset, "preset name");
  trainc->add_option("--config", o.config_path, "key-value config file");
  trainc->add_option("--out", o.out, "output directory");
  trainc->add_option("--seed", o.seed, "seed");
  trainc->add_option("--max-epochs", o.max_epochs, "crop-phase epoch cap");
  trainc->add_flag("--quiet", o.quiet, "no per-epoch lines");

  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  evalc->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  evalc->add_option("--data", o.data, "dataset directory or 'synth'");
  evalc->add_option("--split", o.split, "train, val or test");
  evalc->add_option("--predictions", o.predictions, "write predicted class maps here");
  evalc->add_option("--report", o.report, "JSON report path (default: beside the checkpoint)");
  evalc->add_flag("--fresh-init", o.fresh_init, "evaluate an untrained model");
  evalc->add_option("--preset", o.preset, "preset name (with --fresh-init)");
  evalc->add_option("--config", o.config_path, "config file (with --fresh-init)");
  evalc->add_option("--seed", o.seed, "seed (with --fresh-init)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (inspect->parsed()) return cmd_inspect(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
    if (trainc->parsed()) return cmd_train(o);
    if (evalc->parsed()) return cmd_eval(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
