#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace ebsal {

enum class EncoderKind { attention, conv };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::attention ? "attention" : "conv"; }
inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "attention") return EncoderKind::attention;
  if (s == "conv") return EncoderKind::conv;
  throw std::invalid_argument("unknown encoder kind '" + s + "' (expected attention or conv)");
}

struct GeneratorConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t levels = 4;
  std::size_t base_channels = 16;
  std::size_t latent_dim = 32;
  EncoderKind encoder = EncoderKind::attention;
  std::size_t heads = 2;
  std::size_t window = 4;
  std::size_t attention_reduction = 4;
  std::size_t mlp_ratio = 2;
  // Standard deviation of decoder and head weights at initialization.
  double decoder_init_std = 0.01;

  // Channels of encoder level l (1-based).
  std::size_t level_channels(std::size_t l) const { return base_channels << (l - 1); }
  // Spatial stride of encoder level l.
  std::size_t level_stride(std::size_t l) const { return std::size_t{1} << (l + 1); }
  std::size_t level_height(std::size_t l) const { return height / level_stride(l); }
  std::size_t level_width(std::size_t l) const { return width / level_stride(l); }

  // Attention window at level l: the configured window, shrunk to the token
  // grid when the grid is smaller.
  std::size_t level_window(std::size_t l) const {
    const std::size_t side = std::min(level_height(l), level_width(l));
    return std::min(window, side);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("generator config: " + m); };
    if (levels < 1 || levels > 8) fail("levels must be in [1, 8]");
    if (base_channels < 4) fail("base_channels must be >= 4");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    const std::size_t unit = std::size_t{1} << (levels + 1);
    if (height == 0 || width == 0 || height % unit != 0 || width % unit != 0) {
      fail("input size " + std::to_string(height) + "x" + std::to_string(width) + " must be divisible by " +
           std::to_string(unit));
    }
    if (attention_reduction < 1) fail("attention_reduction must be >= 1");
    for (std::size_t l = 1; l <= levels; ++l) {
      const std::size_t concat = base_channels * (levels - l + 1);
      if (l < levels && concat % attention_reduction != 0) {
        fail("aggregation width " + std::to_string(concat) + " not divisible by attention_reduction");
      }
    }
    if (encoder == EncoderKind::attention) {
      if (heads < 1) fail("heads must be >= 1");
      if (window < 1) fail("window must be >= 1");
      if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
      for (std::size_t l = 1; l <= levels; ++l) {
        if (level_channels(l) % heads != 0) {
          fail("level " + std::to_string(l) + " channels not divisible by heads");
        }
        const std::size_t win = level_window(l);
        if (level_height(l) % win != 0 || level_width(l) % win != 0) {
          fail("window " + std::to_string(win) + " does not divide the level " + std::to_string(l) + " token grid");
        }
      }
    }
    if (!(decoder_init_std > 0)) fail("decoder_init_std must be positive");
  }
};

}  // namespace ebsal
