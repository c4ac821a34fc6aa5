#include "ciseg/plot.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ciseg {

namespace {

// 5x7 font, 35 chars per glyph (7 rows of 5), '#' = on. Lowercase maps to
// uppercase in text().
const std::map<char, const char*>& font() {
  static const std::map<char, const char*> f = {
      {'A', ".###." "#...#" "#...#" "#####" "#...#" "#...#" "#...#"},
      {'B', "####." "#...#" "#...#" "####." "#...#" "#...#" "####."},
      {'C', ".###." "#...#" "#...." "#...." "#...." "#...#" ".###."},
      {'D', "####." "#...#" "#...#" "#...#" "#...#" "#...#" "####."},
      {'E', "#####" "#...." "#...." "####." "#...." "#...." "#####"},
      {'F', "#####" "#...." "#...." "####." "#...." "#...." "#...."},
      {'G', ".###." "#...#" "#...." "#.###" "#...#" "#...#" ".###."},
      {'H', "#...#" "#...#" "#...#" "#####" "#...#" "#...#" "#...#"},
      {'I', ".###." "..#.." "..#.." "..#.." "..#.." "..#.." ".###."},
      {'J', "..###" "...#." "...#." "...#." "#..#." "#..#." ".##.."},
      {'K', "#...#" "#..#." "#.#.." "##..." "#.#.." "#..#." "#...#"},
      {'L', "#...." "#...." "#...." "#...." "#...." "#...." "#####"},
      {'M', "#...#" "##.##" "#.#.#" "#.#.#" "#...#" "#...#" "#...#"},
      {'N', "#...#" "##..#" "#.#.#" "#..##" "#...#" "#...#" "#...#"},
      {'O', ".###." "#...#" "#...#" "#...#" "#...#" "#...#" ".###."},
      {'P', "####." "#...#" "#...#" "####." "#...." "#...." "#...."},
      {'Q', ".###." "#...#" "#...#" "#...#" "#.#.#" "#..#." ".##.#"},
      {'R', "####." "#...#" "#...#" "####." "#.#.." "#..#." "#...#"},
      {'S', ".####" "#...." "#...." ".###." "....#" "....#" "####."},
      {'T', "#####" "..#.." "..#.." "..#.." "..#.." "..#.." "..#.."},
      {'U', "#...#" "#...#" "#...#" "#...#" "#...#" "#...#" ".###."},
      {'V', "#...#" "#...#" "#...#" "#...#" ".#.#." ".#.#." "..#.."},
      {'W', "#...#" "#...#" "#...#" "#.#.#" "#.#.#" "##.##" "#...#"},
      {'X', "#...#" ".#.#." "..#.." "..#.." "..#.." ".#.#." "#...#"},
      {'Y', "#...#" ".#.#." "..#.." "..#.." "..#.." "..#.." "..#.."},
      {'Z', "#####" "....#" "...#." "..#.." ".#..." "#...." "#####"},
      {'0', ".###." "#...#" "#..##" "#.#.#" "##..#" "#...#" ".###."},
      {'1', "..#.." ".##.." "..#.." "..#.." "..#.." "..#.." ".###."},
      {'2', ".###." "#...#" "....#" "...#." "..#.." ".#..." "#####"},
      {'3', ".###." "#...#" "....#" "..##." "....#" "#...#" ".###."},
      {'4', "...#." "..##." ".#.#." "#..#." "#####" "...#." "...#."},
      {'5', "#####" "#...." "####." "....#" "....#" "#...#" ".###."},
      {'6', ".###." "#...." "#...." "####." "#...#" "#...#" ".###."},
      {'7', "#####" "....#" "...#." "..#.." ".#..." ".#..." ".#..."},
      {'8', ".###." "#...#" "#...#" ".###." "#...#" "#...#" ".###."},
      {'9', ".###." "#...#" "#...#" ".####" "....#" "....#" ".###."},
      {' ', "....." "....." "....." "....." "....." "....." "....."},
      {'.', "....." "....." "....." "....." "....." ".##.." ".##.."},
      {',', "....." "....." "....." "....." ".##.." ".#..." "#...."},
      {'-', "....." "....." "....." "#####" "....." "....." "....."},
      {'_', "....." "....." "....." "....." "....." "....." "#####"},
      {':', "....." ".##.." ".##.." "....." ".##.." ".##.." "....."},
      {'/', "....#" "...#." "...#." "..#.." ".#..." ".#..." "#...."},
      {'(', "...#." "..#.." ".#..." ".#..." ".#..." "..#.." "...#."},
      {')', ".#..." "..#.." "...#." "...#." "...#." "..#.." ".#..."},
      {'=', "....." "....." "#####" "....." "#####" "....." "....."},
      {'%', "##..#" "##..#" "...#." "..#.." ".#..." "#..##" "#..##"},
      {'+', "....." "..#.." "..#.." "#####" "..#.." "..#.." "....."}};
  return f;
}

}  // namespace

Canvas::Canvas(int width, int height, uint8_t r, uint8_t g, uint8_t b) : w_(width), h_(height) {
  pixels_.resize(size_t(w_) * h_ * 3);
  for (int i = 0; i < w_ * h_; ++i) {
    pixels_[size_t(i) * 3] = r;
    pixels_[size_t(i) * 3 + 1] = g;
    pixels_[size_t(i) * 3 + 2] = b;
  }
}

void Canvas::set_pixel(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
  if (x < 0 || x >= w_ || y < 0 || y >= h_) return;
  size_t i = (size_t(y) * w_ + x) * 3;
  pixels_[i] = r;
  pixels_[i + 1] = g;
  pixels_[i + 2] = b;
}

void Canvas::line(double x0, double y0, double x1, double y1, uint8_t r, uint8_t g, uint8_t b) {
  double dx = x1 - x0, dy = y1 - y0;
  int steps = int(std::max(std::abs(dx), std::abs(dy))) + 1;
  for (int i = 0; i <= steps; ++i) {
    double t = double(i) / steps;
    set_pixel(int(std::lround(x0 + t * dx)), int(std::lround(y0 + t * dy)), r, g, b);
  }
}

void Canvas::rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) set_pixel(x, y, r, g, b);
}

void Canvas::text(int x, int y, const std::string& s, uint8_t r, uint8_t g, uint8_t b) {
  int cx = x;
  for (char raw : s) {
    char c = char(std::toupper(static_cast<unsigned char>(raw)));
    auto it = font().find(c);
    if (it == font().end()) it = font().find(' ');
    const char* glyph = it->second;
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col)
        if (glyph[row * 5 + col] == '#') set_pixel(cx + col, y + row, r, g, b);
    cx += 6;
  }
}

void Canvas::save_png(const std::string& path) const {
  write_png_rgb(path, pixels_.data(), w_, h_);
}

namespace {

std::string format_tick(double v) {
  std::ostringstream os;
  if (std::abs(v) >= 1000 || (std::abs(v) < 0.01 && v != 0))
    os.precision(1), os << std::scientific << v;
  else
    os.precision(3), os << v;
  return os.str();
}

}  // namespace

void render_chart(const std::string& path, const std::string& title,
                  const std::vector<Series>& series, double y_min, double y_max) {
  const int W = 960, H = 540;
  const int ml = 70, mr = 20, mt = 30, mb = 40;
  Canvas cv(W, H);

  double x_lo = 1e300, x_hi = -1e300, y_lo = y_min, y_hi = y_max;
  bool auto_y = y_max < y_min;
  if (auto_y) {
    y_lo = 1e300;
    y_hi = -1e300;
  }
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      if (auto_y) {
        y_lo = std::min(y_lo, s.y[i]);
        y_hi = std::max(y_hi, s.y[i]);
      }
    }
  if (x_lo > x_hi) {
    x_lo = 0;
    x_hi = 1;
  }
  if (y_lo >= y_hi) y_hi = y_lo + 1;
  if (x_lo == x_hi) x_hi = x_lo + 1;

  auto px = [&](double x) { return ml + (x - x_lo) / (x_hi - x_lo) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - y_lo) / (y_hi - y_lo) * (H - mt - mb); };

  // frame + gridlines
  cv.rect(ml, mt, ml, H - mb, 0, 0, 0);
  cv.rect(ml, H - mb, W - mr, H - mb, 0, 0, 0);
  for (int t = 0; t <= 5; ++t) {
    double yv = y_lo + (y_hi - y_lo) * t / 5.0;
    int yy = int(py(yv));
    cv.line(ml, yy, W - mr, yy, 225, 225, 225);
    cv.text(4, yy - 3, format_tick(yv), 60, 60, 60);
    double xv = x_lo + (x_hi - x_lo) * t / 5.0;
    int xx = int(px(xv));
    cv.text(xx - 10, H - mb + 6, format_tick(xv), 60, 60, 60);
  }
  cv.text(ml, 8, title, 0, 0, 0);

  int ly = mt + 6;
  for (const auto& s : series) {
    for (size_t i = 1; i < s.x.size(); ++i)
      cv.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), s.r, s.g, s.b);
    cv.rect(W - mr - 150, ly, W - mr - 140, ly + 6, s.r, s.g, s.b);
    cv.text(W - mr - 134, ly, s.label, 0, 0, 0);
    ly += 12;
  }
  cv.save_png(path);
}

void render_run_plots(const std::string& metrics_path, const std::string& losses_path,
                      const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  struct Palette {
    uint8_t r, g, b;
  };
  static const Palette pal[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                {214, 39, 40},  {148, 103, 189}, {140, 86, 75}};

  std::ifstream mf(metrics_path);
  if (!mf) throw std::runtime_error("render_run_plots: cannot open " + metrics_path);
  Series miou_old{"miou old", {}, {}, pal[0].r, pal[0].g, pal[0].b};
  Series miou_new{"miou new", {}, {}, pal[1].r, pal[1].g, pal[1].b};
  Series miou_all{"miou all", {}, {}, pal[2].r, pal[2].g, pal[2].b};
  int max_iter_per_step = 1;
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    records.push_back(nlohmann::json::parse(line));
    max_iter_per_step = std::max(max_iter_per_step, records.back().at("iteration").get<int>());
  }
  for (const auto& j : records) {
    double gx = j.at("step").get<int>() * double(max_iter_per_step) + j.at("iteration").get<int>();
    miou_old.x.push_back(gx);
    miou_old.y.push_back(j.at("miou_old").get<double>());
    miou_new.x.push_back(gx);
    miou_new.y.push_back(j.at("miou_new").get<double>());
    miou_all.x.push_back(gx);
    miou_all.y.push_back(j.at("miou_all").get<double>());
  }
  render_chart((std::filesystem::path(out_dir) / "miou.png").string(),
               "grouped miou vs global iteration", {miou_old, miou_new, miou_all}, 0.0, 1.0);

  std::ifstream lf(losses_path);
  if (lf) {
    const char* names[] = {"l_new", "l_q", "l_c", "l_m", "l_pod", "total"};
    std::vector<Series> loss_series;
    for (int i = 0; i < 6; ++i)
      loss_series.push_back({names[i], {}, {}, pal[i % 6].r, pal[i % 6].g, pal[i % 6].b});
    int max_it = 1;
    std::vector<nlohmann::json> lrec;
    while (std::getline(lf, line)) {
      if (line.empty()) continue;
      lrec.push_back(nlohmann::json::parse(line));
      max_it = std::max(max_it, lrec.back().at("iteration").get<int>());
    }
    for (const auto& j : lrec) {
      double gx = j.at("step").get<int>() * double(max_it) + j.at("iteration").get<int>();
      for (int i = 0; i < 6; ++i) {
        loss_series[size_t(i)].x.push_back(gx);
        loss_series[size_t(i)].y.push_back(j.at(names[i]).get<double>());
      }
    }
    render_chart((std::filesystem::path(out_dir) / "losses.png").string(),
                 "loss components vs global iteration", loss_series);
  }
}

}  // namespace ciseg
