// Command-line driver: train, predict, eval, complexity, sample-prior,
// diagnose and synth.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ebsal/complexity.hpp"
#include "ebsal/data/dataset.hpp"
#include "ebsal/data/synth.hpp"
#include "ebsal/generator/generator.hpp"
#include "ebsal/inference.hpp"
#include "ebsal/metrics.hpp"
#include "ebsal/run_config.hpp"
#include "ebsal/trainer.hpp"

namespace fs = std::filesystem;
using namespace ebsal;
using json = nlohmann::ordered_json;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kDiverged = 4 };

template <typename T>
using Net = Model<T, Generator<T>>;

// Options shared by every command that builds a RunConfig.
struct CommonOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads, epochs;
  std::optional<std::string> prior_mode, encoder, precision;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override a config value, e.g. --set train.lr_theta=1e-3 (repeatable)");
    cmd->add_option("--seed", seed, "Root seed");
    cmd->add_option("--threads", threads, "Worker threads; 1 is the deterministic serial path, 0 uses all cores");
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--prior-mode", prior_mode, "ebm or gaussian");
    cmd->add_option("--encoder", encoder, "attention or conv");
    cmd->add_option("--precision", precision, "f32 or f64");
  }

  RunConfig resolve(std::vector<std::string> extra = {}) const {
    std::vector<std::string> all = sets;
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    if (threads) all.push_back("threads=" + std::to_string(*threads));
    if (epochs) all.push_back("train.epochs=" + std::to_string(*epochs));
    if (prior_mode) all.push_back("train.prior_mode=\"" + *prior_mode + "\"");
    if (encoder) all.push_back("generator.encoder=\"" + *encoder + "\"");
    if (precision) all.push_back("precision=\"" + *precision + "\"");
    all.insert(all.end(), extra.begin(), extra.end());
    auto cfg = resolve_config(config_file, all);
    set_num_threads(cfg.threads);
    return cfg;
  }
};

template <typename T>
Net<T> build_model(const RunConfig& cfg) {
  auto rng = make_rng(derive_stream(cfg.seed, "init.generator"));
  return {make_prior<T>(cfg.train), Generator<T>::initialized(cfg.generator, rng)};
}

// The output directory is left out so identical runs written to different
// places give identical files.
std::string checkpoint_meta(const RunConfig& cfg, std::size_t epoch) {
  RunConfig c = cfg;
  c.paths.out_dir.clear();
  json meta{{"epoch", epoch}, {"config", to_document(c)}};
  return meta.dump();
}

RunConfig config_from_checkpoint(const Checkpoint& ck, std::optional<std::size_t> threads) {
  json meta;
  try {
    meta = json::parse(ck.meta);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  if (!meta.contains("config")) throw CheckpointError("checkpoint metadata has no config");
  RunConfig cfg = meta.at("config").get<RunConfig>();
  if (threads) cfg.threads = *threads;
  cfg.sync();
  cfg.validate();
  set_num_threads(cfg.threads);
  return cfg;
}

template <typename T>
Net<T> load_net(const Checkpoint& ck, const RunConfig& cfg) {
  auto net = build_model<T>(cfg);
  load_model(ck, net);
  return net;
}

std::vector<Sample> training_samples(const RunConfig& cfg) {
  if (cfg.paths.synth) return synth_generate(cfg.synth);
  if (cfg.paths.data_dir.empty()) throw ConfigError("give a data directory or --synth");
  return load_dataset(cfg.paths.data_dir, cfg.generator.height, cfg.generator.width);
}

// Image files given as a single PNG or a directory of PNGs, sorted by stem.
std::vector<fs::path> png_inputs(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& [stem, path] : png_files_by_stem(p)) out.push_back(path);
  return out;
}

// ------------------------------------------------------------------- train

template <typename T>
int run_train(const RunConfig& cfg) {
  const fs::path out = cfg.paths.out_dir;
  fs::create_directories(out / "checkpoints");
  write_config(out / "config.json", cfg);
  const auto data = to_examples<T>(training_samples(cfg));
  if (data.empty()) throw DataError("no training samples found");

  auto net = build_model<T>(cfg);
  auto save = [&](std::size_t epoch, const fs::path& path) {
    save_checkpoint(path, model_checkpoint(net, checkpoint_meta(cfg, epoch)));
  };
  auto epoch_file = [&](std::size_t e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04zu.ckpt", e);
    return out / "checkpoints" / buf;
  };
  save(0, epoch_file(0));
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw DataError("cannot write training log in " + out.string());

  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    auto rec = r.to_json();
    rec.erase("wall_time_ms");  // timing goes to stderr so logs stay reproducible
    log << rec.dump() << '\n';
    log.flush();
    const std::size_t done = r.epoch + 1;
    if (cfg.paths.checkpoint_every > 0 && done % cfg.paths.checkpoint_every == 0) save(done, epoch_file(done));
    std::fprintf(stderr, "epoch %zu/%zu  mse %.5f  E+ %.3f  E- %.3f  %.0f ms\n", done, cfg.train.epochs, r.mse,
                 r.mean_energy_posterior, r.mean_energy_prior, r.wall_time_ms);
  };
  if (cfg.train.epochs > 0) train(net, data, cfg.train, cb);
  save(cfg.train.epochs, out / "model.ckpt");
  return kOk;
}

// ----------------------------------------------------------------- predict

template <typename T>
int run_predict(const Checkpoint& ck, const RunConfig& cfg, const fs::path& input, const fs::path& out) {
  const auto net = load_net<T>(ck, cfg);
  fs::create_directories(out);
  write_config(out / "config.json", cfg);
  const std::size_t h = cfg.generator.height, w = cfg.generator.width;
  for (const auto& path : png_inputs(input)) {
    const auto stem = path.stem().string();
    const Image original = to_rgb(read_png(path));
    const Image resized = resize_bilinear(original, h, w);
    auto sampler = cfg.train.prior_sampler();
    sampler.stream = derive_stream(cfg.seed, "predict:" + stem);
    auto bundle = predict_stochastic(net, resized.tensor<T>(), cfg.inference.samples, sampler);
    // Outputs match the input size; statistics are taken after resizing the
    // samples so the mean and variance stay consistent with them.
    if (original.height != h || original.width != w) {
      for (auto& s : bundle.samples) {
        s = resize_bilinear(s, original.height, original.width);
        for (auto& v : s.data) v = std::clamp(v, 0.0, 1.0);
      }
      summarize_samples(bundle.samples, bundle.mean_map, bundle.uncertainty);
    }
    write_png(out / (stem + "_mean.png"), bundle.mean_map);
    write_png(out / (stem + "_uncertainty.png"), bundle.uncertainty, cfg.inference.uncertainty_16bit ? 16 : 8);
    if (cfg.inference.save_samples) {
      for (std::size_t k = 0; k < bundle.samples.size(); ++k) {
        write_png(out / (stem + "_sample_" + std::to_string(k) + ".png"), bundle.samples[k]);
      }
    }
  }
  return kOk;
}

// -------------------------------------------------------------------- eval

std::string prediction_key(const std::string& stem) {
  for (const std::string suffix : {"_mean", "_uncertainty"}) {
    if (stem.size() > suffix.size() && stem.ends_with(suffix)) return stem.substr(0, stem.size() - suffix.size());
  }
  const auto pos = stem.rfind("_sample_");
  if (pos != std::string::npos && pos > 0) return stem.substr(0, pos);
  return stem;
}

int run_eval(const fs::path& pred_dir, const fs::path& gt_dir) {
  const auto gts = png_files_by_stem(gt_dir);
  const auto preds = png_files_by_stem(pred_dir);
  // Exact stems win over <stem>_mean; other derived files are ignored.
  std::map<std::string, fs::path> chosen;
  for (const auto& [stem, path] : preds) {
    const auto key = prediction_key(stem);
    if (!gts.contains(key)) throw DataError("prediction '" + stem + "' has no ground truth in " + gt_dir.string());
    if (key == stem) chosen[key] = path;
    else if (stem == key + "_mean" && !chosen.contains(key)) chosen[key] = path;
  }
  for (const auto& [stem, _] : gts) {
    if (!chosen.contains(stem)) throw DataError("ground truth '" + stem + "' has no prediction in " + pred_dir.string());
  }
  MetricsReport total;
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& [stem, gt_path] : gts) {
    const Image gt = to_gray(read_png(gt_path));
    Image pred = to_gray(read_png(chosen.at(stem)));
    pred = resize_bilinear(pred, gt.height, gt.width);
    const auto r = evaluate(pred, gt);
    rows.emplace_back(stem, r);
    json rec{{"stem", stem}};
    rec.update(to_json(r));
    std::cout << rec.dump() << '\n';
    total.s_measure += r.s_measure;
    total.mean_f += r.mean_f;
    total.mean_e += r.mean_e;
    total.mae += r.mae;
  }
  const double n = static_cast<double>(rows.size());
  if (n > 0) {
    total = {total.s_measure / n, total.mean_f / n, total.mean_e / n, total.mae / n};
  }
  json agg{{"stem", "__mean__"}, {"count", rows.size()}};
  agg.update(to_json(total));
  std::cout << agg.dump() << '\n';

  std::fprintf(stderr, "%-24s %8s %8s %8s %8s\n", "image", "S", "meanF", "meanE", "MAE");
  for (const auto& [stem, r] : rows) {
    std::fprintf(stderr, "%-24s %8.4f %8.4f %8.4f %8.4f\n", stem.c_str(), r.s_measure, r.mean_f, r.mean_e, r.mae);
  }
  std::fprintf(stderr, "%-24s %8.4f %8.4f %8.4f %8.4f\n", "mean", total.s_measure, total.mean_f, total.mean_e,
               total.mae);
  return kOk;
}

// -------------------------------------------------------------- complexity

int run_complexity(const fs::path& input) {
  for (const auto& path : png_inputs(input)) {
    const Image im = to_rgb(read_png(path));
    const auto seg = slic(im);
    json rec{{"stem", path.stem().string()}, {"score", complexity_score(im)}, {"superpixels", seg.count}};
    std::cout << rec.dump() << '\n';
  }
  return kOk;
}

// ------------------------------------------------------------ sample-prior

template <typename T>
int run_sample_prior(const Checkpoint& ck, const RunConfig& cfg, std::size_t count, const fs::path& out) {
  const auto net = load_net<T>(ck, cfg);
  fs::create_directories(out);
  write_config(out / "config.json", cfg);
  auto sampler = cfg.train.prior_sampler();
  sampler.stream = derive_stream(cfg.seed, "sample-prior");
  const auto zs = sample_prior(net.prior, sampler, count);

  std::ofstream lat(out / "latents.csv", std::ios::trunc);
  lat << "index,energy";
  for (std::size_t k = 0; k < net.prior.latent_dim(); ++k) lat << ",z" << k;
  lat << '\n';
  std::vector<double> energies;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const double e = static_cast<double>(net.prior.energy(zs[i]));
    energies.push_back(e);
    lat << i << ',' << e;
    for (T v : zs[i]) lat << ',' << static_cast<double>(v);
    lat << '\n';
  }

  std::ofstream hist(out / "energy_histogram.csv", std::ios::trunc);
  hist << "bin_lo,bin_hi,count\n";
  if (!energies.empty()) {
    const auto [lo_it, hi_it] = std::minmax_element(energies.begin(), energies.end());
    const std::size_t bins = cfg.diagnostics.histogram_bins;
    const double lo = *lo_it, width = std::max(*hi_it - lo, 1e-12) / static_cast<double>(bins);
    std::vector<std::size_t> counts(bins, 0);
    for (double e : energies) counts[std::min(bins - 1, static_cast<std::size_t>((e - lo) / width))]++;
    for (std::size_t b = 0; b < bins; ++b) hist << lo + b * width << ',' << lo + (b + 1) * width << ',' << counts[b] << '\n';
  }
  std::cout << json{{"count", count}, {"latents", (out / "latents.csv").string()},
                    {"histogram", (out / "energy_histogram.csv").string()}}
                   .dump()
            << '\n';
  return kOk;
}

// ---------------------------------------------------------------- diagnose

template <typename T>
int run_diagnose(const Checkpoint& ck, const RunConfig& cfg) {
  auto net = load_net<T>(ck, cfg);
  const auto data = to_examples<T>(training_samples(cfg));
  if (data.empty()) throw DataError("no samples to diagnose on");
  const auto r = estimating_equation_residuals(net, data, cfg.train, cfg.diagnostics.mc_samples,
                                               derive_stream(cfg.seed, "diagnose"));
  json rec{{"samples", data.size()}, {"mc_samples", cfg.diagnostics.mc_samples}};
  if (!net.prior.is_gaussian()) {
    rec["alpha_residual"] = r.alpha_norm;
    rec["alpha_se"] = r.alpha_se;
    rec["alpha_ratio"] = r.alpha_norm / r.alpha_se;
  }
  rec["theta_residual"] = r.theta_norm;
  rec["theta_se"] = r.theta_se;
  rec["theta_ratio"] = r.theta_norm / r.theta_se;
  std::cout << rec.dump() << '\n';
  return kOk;
}

template <typename Fn>
int with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f64") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-based latent prior saliency models: training, prediction and evaluation"};
  app.require_subcommand(1);

  CommonOptions train_opts, predict_opts, sample_opts, diag_opts, synth_opts;
  std::string data_dir, out_dir;
  bool synth_flag = false;
  std::optional<std::size_t> ckpt_every;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_opts.attach(train_cmd);
  train_cmd->add_option("--data", data_dir, "Dataset root with images/ and masks/");
  train_cmd->add_flag("--synth", synth_flag, "Train on a generated synthetic dataset");
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_option("--checkpoint-every", ckpt_every, "Write a checkpoint every k epochs");

  std::string checkpoint, input;
  std::optional<std::size_t> samples;
  bool save_samples = false, uncertainty16 = false;
  auto* predict_cmd = app.add_subcommand("predict", "Stochastic prediction with uncertainty maps");
  predict_cmd->add_option("--threads", predict_opts.threads, "Worker threads");
  predict_cmd->add_option("--seed", predict_opts.seed, "Seed for the latent draws");
  predict_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  predict_cmd->add_option("--input", input, "PNG image or directory of PNGs")->required()->check(CLI::ExistingPath);
  predict_cmd->add_option("--out", out_dir, "Output directory")->required();
  predict_cmd->add_option("--samples", samples, "Latent draws per image (default 10)");
  predict_cmd->add_flag("--save-samples", save_samples, "Also write every sample map");
  predict_cmd->add_flag("--uncertainty-16bit", uncertainty16, "Write uncertainty maps as 16-bit PNG");

  std::string pred_dir, gt_dir;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth masks");
  eval_cmd->add_option("--pred", pred_dir, "Prediction directory")->required();
  eval_cmd->add_option("--gt", gt_dir, "Ground-truth mask directory")->required();

  auto* complexity_cmd = app.add_subcommand("complexity", "Superpixel contrast complexity score");
  complexity_cmd->add_option("input", input, "PNG image or directory")->required()->check(CLI::ExistingPath);

  std::size_t count = 0;
  auto* sample_cmd = app.add_subcommand("sample-prior", "Draw latent codes from the learned prior");
  sample_cmd->add_option("--threads", sample_opts.threads, "Worker threads");
  sample_cmd->add_option("--seed", sample_opts.seed, "Seed for the prior chains");
  sample_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  sample_cmd->add_option("--count", count, "Number of chains")->required();
  sample_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::optional<std::size_t> mc;
  auto* diag_cmd = app.add_subcommand("diagnose", "Estimating-equation residuals of a checkpoint");
  diag_cmd->add_option("--threads", diag_opts.threads, "Worker threads");
  diag_cmd->add_option("--seed", diag_opts.seed, "Seed for the Monte-Carlo draws");
  diag_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  diag_cmd->add_option("--data", data_dir, "Dataset root with images/ and masks/");
  diag_cmd->add_flag("--synth", synth_flag, "Use the synthetic dataset of the checkpoint's config");
  diag_cmd->add_option("--mc", mc, "Posterior draws per datum");

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic image/mask dataset");
  synth_opts.attach(synth_cmd);
  synth_cmd->add_option("--out", out_dir, "Dataset root")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train_cmd) {
      std::vector<std::string> extra{"paths.out_dir=\"" + out_dir + "\""};
      if (!data_dir.empty()) extra.push_back("paths.data_dir=" + json(data_dir).dump());
      if (synth_flag) extra.push_back("paths.synth=true");
      if (ckpt_every) extra.push_back("paths.checkpoint_every=" + std::to_string(*ckpt_every));
      const auto cfg = train_opts.resolve(extra);
      return with_precision(cfg.precision, [&](auto tag) { return run_train<decltype(tag)>(cfg); });
    }
    if (*eval_cmd) return run_eval(pred_dir, gt_dir);
    if (*complexity_cmd) return run_complexity(input);
    if (*synth_cmd) {
      const auto cfg = synth_opts.resolve({"paths.out_dir=" + json(out_dir).dump()});
      fs::create_directories(out_dir);
      save_dataset(out_dir, synth_generate(cfg.synth));
      write_config(fs::path(out_dir) / "config.json", cfg);
      return kOk;
    }

    const auto ck = load_checkpoint(checkpoint);
    if (*predict_cmd) {
      auto cfg = config_from_checkpoint(ck, predict_opts.threads);
      if (predict_opts.seed) cfg.seed = *predict_opts.seed;
      if (samples) cfg.inference.samples = *samples;
      if (save_samples) cfg.inference.save_samples = true;
      if (uncertainty16) cfg.inference.uncertainty_16bit = true;
      cfg.validate();
      return with_precision(cfg.precision, [&](auto tag) { return run_predict<decltype(tag)>(ck, cfg, input, out_dir); });
    }
    if (*sample_cmd) {
      auto cfg = config_from_checkpoint(ck, sample_opts.threads);
      if (sample_opts.seed) cfg.seed = *sample_opts.seed;
      return with_precision(cfg.precision,
                            [&](auto tag) { return run_sample_prior<decltype(tag)>(ck, cfg, count, out_dir); });
    }
    if (*diag_cmd) {
      auto cfg = config_from_checkpoint(ck, diag_opts.threads);
      if (diag_opts.seed) cfg.seed = *diag_opts.seed;
      if (mc) cfg.diagnostics.mc_samples = *mc;
      cfg.paths.synth = synth_flag;
      cfg.paths.data_dir = data_dir;
      cfg.validate();
      return with_precision(cfg.precision, [&](auto tag) { return run_diagnose<decltype(tag)>(ck, cfg); });
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "file error: %s\n", e.what());
    return kData;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const SamplerDivergence& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kConfig;
  }
  return kOk;
}
