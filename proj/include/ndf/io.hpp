#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>

#include "ndf/saliency.hpp"
#include "ndf/tensor.hpp"

namespace ndf {

// Binary PGM (P5), maxval 255, byte = round(v * 255) with round-half-up.
// Values must already be normalized to [0,1].
inline void export_pgm(const Tensor& image, const std::string& path) {
  if (image.shape.size() != 2)
    throw std::invalid_argument("pgm: image must be 2-d, got " + shape_str(image.shape));
  for (double v : image.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("pgm: value " + std::to_string(v) +
                                  " outside [0,1]; normalize first");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("pgm: cannot write " + path);
  out << "P5\n" << image.shape[1] << " " << image.shape[0] << "\n255\n";
  for (double v : image.data) {
    const uint8_t b = static_cast<uint8_t>(std::floor(v * 255.0 + 0.5));
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw data_error("pgm: write failed for " + path);
}

// CSV with header "bin_start,bin_end,count" and one row per bin.
inline void export_histogram_csv(const ScoreHistogram& hist, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("csv: cannot write " + path);
  out << "bin_start,bin_end,count\n";
  out << std::setprecision(10);
  for (int i = 0; i < hist.bins; ++i)
    out << hist.bin_start(i) << "," << hist.bin_end(i) << ","
        << hist.counts[static_cast<size_t>(i)] << "\n";
  if (!out) throw data_error("csv: write failed for " + path);
}

}  // namespace ndf
