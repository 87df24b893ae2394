#pragma once

#include <array>
#include <string>
#include <vector>

#include "tnpkr/model.hpp"
#include "tnpkr/tasks.hpp"

namespace tnpkr {

struct Image {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int64_t w, int64_t h, uint8_t r = 255, uint8_t g = 255, uint8_t b = 255);
  void set(int64_t x, int64_t y, uint8_t r, uint8_t g, uint8_t b);
  std::array<uint8_t, 3> get(int64_t x, int64_t y) const;
  int64_t count_color(uint8_t r, uint8_t g, uint8_t b) const;
};

void save_bmp(const std::string& path, const Image& img);

// 1D regression fit panel: shaded mean +/- 2 sigma band, mean line, optional
// noiseless truth, and one 3x3 marker per context point.
struct Gp1dPanel {
  Image image;
  int64_t marker_count = 0;
};

Gp1dPanel render_gp1d_panel(const Tensor<double>& s_t, const Tensor<double>& mu,
                            const Tensor<double>& sigma, const Tensor<double>& s_c,
                            const Tensor<double>& f_c, const Tensor<double>& truth);

// Four side-by-side panels: Task | Uncertainty | Prediction | Truth.
struct SirPanels {
  Image image;
  std::array<std::pair<int64_t, int64_t>, 4> panel_x;  // [begin, end) per panel
  std::array<std::string, 4> titles;
};

SirPanels render_sir_panels(const TaskBatch<double>& episode,
                            const std::vector<double>& class_probs /* [n_t * 3] */);

}  // namespace tnpkr
