#pragma once

// RunConfig: one JSON document holding every setting of a command. Loading
// starts from the defaults, merges a file, then applies `key.path=value`
// overrides; any key that the defaults do not have is rejected.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ebsal/data/synth.hpp"
#include "ebsal/ebm_prior.hpp"
#include "ebsal/generator/config.hpp"
#include "ebsal/trainer.hpp"

namespace ebsal {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename J, typename E, std::size_t N>
void enum_to_json(J& j, E e, const std::pair<E, const char*> (&names)[N]) {
  for (const auto& [v, name] : names)
    if (v == e) j = name;
}

// Unlike the library's enum macro, unknown names are an error.
template <typename J, typename E, std::size_t N>
void enum_from_json(const J& j, E& e, const std::pair<E, const char*> (&names)[N], const char* what) {
  const std::string text = j.is_string() ? j.template get<std::string>() : j.dump();
  for (const auto& [v, name] : names)
    if (text == name) {
      e = v;
      return;
    }
  throw ConfigError(std::string("unknown ") + what + " '" + text + "'");
}

inline constexpr std::pair<PriorMode, const char*> kPriorModes[] = {{PriorMode::ebm, "ebm"},
                                                                     {PriorMode::gaussian, "gaussian"}};
inline constexpr std::pair<EncoderKind, const char*> kEncoders[] = {{EncoderKind::attention, "attention"},
                                                                     {EncoderKind::conv, "conv"}};
inline constexpr std::pair<Background, const char*> kBackgrounds[] = {
    {Background::flat, "flat"}, {Background::noise, "noise"}, {Background::stripes, "stripes"}};

}  // namespace detail

template <typename J>
void to_json(J& j, PriorMode e) { detail::enum_to_json(j, e, detail::kPriorModes); }
template <typename J>
void from_json(const J& j, PriorMode& e) {
  detail::enum_from_json(j, e, detail::kPriorModes, "prior mode");
}
template <typename J>
void to_json(J& j, EncoderKind e) { detail::enum_to_json(j, e, detail::kEncoders); }
template <typename J>
void from_json(const J& j, EncoderKind& e) {
  detail::enum_from_json(j, e, detail::kEncoders, "encoder");
}
template <typename J>
void to_json(J& j, Background e) { detail::enum_to_json(j, e, detail::kBackgrounds); }
template <typename J>
void from_json(const J& j, Background& e) {
  detail::enum_from_json(j, e, detail::kBackgrounds, "background");
}

// Image size and latent width live in one place each (generator / train) and
// are copied into the other sections after loading.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorConfig, height, width, levels, base_channels, encoder, heads,
                                                window, attention_reduction, mlp_ratio, decoder_init_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, lr_alpha, lr_theta, sigma_eps, sigma_z,
                                                latent_dim, prior_hidden, prior_steps, prior_step_size,
                                                posterior_steps, posterior_step_size, prior_mode, chains_per_datum,
                                                prior_init_std, clip_gradients, clip_norm)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, count, min_shapes, max_shapes, backgrounds,
                                                boundary_softness, contrast)

struct InferenceSettings {
  std::size_t samples = 10;
  bool save_samples = false;
  bool uncertainty_16bit = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InferenceSettings, samples, save_samples, uncertainty_16bit)

struct DiagnosticSettings {
  std::size_t mc_samples = 8;
  std::size_t histogram_bins = 50;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiagnosticSettings, mc_samples, histogram_bins)

struct PathSettings {
  std::string data_dir;
  std::string out_dir = "run";
  bool synth = false;
  std::size_t checkpoint_every = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PathSettings, data_dir, out_dir, synth, checkpoint_every)

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string precision = "f32";
  GeneratorConfig generator;
  TrainConfig train;
  SynthConfig synth;
  InferenceSettings inference;
  DiagnosticSettings diagnostics;
  PathSettings paths;

  // Copies shared settings into the sections that also carry them.
  void sync() {
    train.seed = seed;
    generator.latent_dim = train.latent_dim;
    synth.height = generator.height;
    synth.width = generator.width;
    synth.seed = derive_stream(seed, "synth");
  }

  void validate() const {
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
    if (inference.samples < 1) throw ConfigError("inference.samples must be >= 1");
    if (diagnostics.mc_samples < 2) throw ConfigError("diagnostics.mc_samples must be >= 2");
    if (diagnostics.histogram_bins < 1) throw ConfigError("diagnostics.histogram_bins must be >= 1");
    try {
      generator.validate();
      train.validate();
      synth.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, threads, precision, generator, train, synth,
                                                inference, diagnostics, paths)

namespace detail {

inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (known.at(key).is_object()) {
      if (!value.is_object()) throw ConfigError("config key '" + path + "' must be an object");
      reject_unknown(value, known.at(key), path);
    }
  }
}

}  // namespace detail

inline nlohmann::json to_document(const RunConfig& cfg) { return cfg; }

// Parses "a.b.c=value". The value is read as JSON when it parses, otherwise
// as a string, so `train.prior_mode=gaussian` works without quotes.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  std::string walked;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    walked += (walked.empty() ? "" : ".") + part;
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + walked + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  *node = value;
}

// Defaults, then the optional file, then overrides in order.
inline RunConfig resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  const nlohmann::json defaults = RunConfig{};
  nlohmann::json doc = defaults;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    nlohmann::json given;
    try {
      given = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config file " + file.string() + ": " + e.what());
    }
    if (!given.is_object()) throw ConfigError("config file must hold a JSON object");
    detail::reject_unknown(given, defaults, "");
    doc.merge_patch(given);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig cfg;
  try {
    cfg = doc.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  cfg.sync();
  cfg.validate();
  return cfg;
}

inline void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_document(cfg).dump(2) << '\n';
}

}  // namespace ebsal
