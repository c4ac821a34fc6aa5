#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ciseg {

// Minimal RGB canvas with line/text primitives, enough for metric curves.
class Canvas {
 public:
  Canvas(int width, int height, uint8_t r = 255, uint8_t g = 255, uint8_t b = 255);

  int width() const { return w_; }
  int height() const { return h_; }

  void set_pixel(int x, int y, uint8_t r, uint8_t g, uint8_t b);
  void line(double x0, double y0, double x1, double y1, uint8_t r, uint8_t g, uint8_t b);
  void rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
  // 5x7 bitmap font; covers digits, ascii letters and basic punctuation
  void text(int x, int y, const std::string& s, uint8_t r, uint8_t g, uint8_t b);

  void save_png(const std::string& path) const;

 private:
  int w_, h_;
  std::vector<uint8_t> pixels_;  // interleaved rgb
};

void write_png_rgb(const std::string& path, const uint8_t* rgb, int width, int height);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  uint8_t r = 0, g = 0, b = 0;
};

// Line chart with axes, ticks and a legend; y range [auto or fixed].
void render_chart(const std::string& path, const std::string& title,
                  const std::vector<Series>& series, double y_min = 0.0, double y_max = -1.0);

// Reads a training run's metrics.jsonl / losses.jsonl and emits the standard
// charts into out_dir.
void render_run_plots(const std::string& metrics_path, const std::string& losses_path,
                      const std::string& out_dir);

}  // namespace ciseg
