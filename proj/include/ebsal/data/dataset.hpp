#pragma once

// On-disk datasets: <root>/images/*.png, <root>/masks/*.png paired by file
// stem, plus <root>/manifest.jsonl with one metadata record per sample.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ebsal/data/example.hpp"
#include "ebsal/data/image.hpp"
#include "ebsal/data/synth.hpp"
#include "ebsal/parallel.hpp"

namespace ebsal {

namespace fs = std::filesystem;

inline std::string sample_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

inline void save_dataset(const fs::path& root, const std::vector<Sample>& samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream manifest(root / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw DataError("cannot write " + (root / "manifest.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto stem = sample_stem(i);
    write_png(root / "images" / (stem + ".png"), samples[i].image);
    write_png(root / "masks" / (stem + ".png"), samples[i].mask);
    nlohmann::ordered_json rec{{"stem", stem}};
    for (const auto& [k, v] : samples[i].meta.items()) rec[k] = v;
    manifest << rec.dump() << '\n';
  }
}

// PNG files in `dir` keyed by stem. A missing directory is a data error.
inline std::map<std::string, fs::path> png_files_by_stem(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

// Loads image/mask pairs sorted by stem, resized to (height, width).
inline std::vector<Sample> load_pairs(const fs::path& image_dir, const fs::path& mask_dir, std::size_t height,
                                      std::size_t width) {
  const auto images = png_files_by_stem(image_dir);
  const auto masks = png_files_by_stem(mask_dir);
  for (const auto& [stem, _] : images) {
    if (!masks.contains(stem)) throw DataError("image '" + stem + "' has no matching mask in " + mask_dir.string());
  }
  for (const auto& [stem, _] : masks) {
    if (!images.contains(stem)) throw DataError("mask '" + stem + "' has no matching image in " + image_dir.string());
  }
  std::vector<std::string> stems;
  for (const auto& [stem, _] : images) stems.push_back(stem);
  std::vector<Sample> out(stems.size());
  parallel_for(stems.size(), [&](std::size_t i) {
    Sample& s = out[i];
    s.image = resize_bilinear(to_rgb(read_png(images.at(stems[i]))), height, width);
    s.mask = resize_bilinear(to_gray(read_png(masks.at(stems[i]))), height, width);
    for (auto& v : s.mask.data) v = std::clamp(v, 0.0, 1.0);
    s.meta = {{"stem", stems[i]}};
  });
  return out;
}

inline std::vector<Sample> load_dataset(const fs::path& root, std::size_t height, std::size_t width) {
  return load_pairs(root / "images", root / "masks", height, width);
}

template <typename T>
Example<T> to_example(const Sample& s) {
  return {s.image.tensor<T>(), s.mask.tensor<T>()};
}

template <typename T>
std::vector<Example<T>> to_examples(const std::vector<Sample>& samples) {
  std::vector<Example<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(to_example<T>(s));
  return out;
}

}  // namespace ebsal
