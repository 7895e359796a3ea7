#include "pmdet/plots.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "pmdet/common.hpp"
#include "pmdet/image_io.hpp"

namespace pmdet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kBg{250, 250, 250};
constexpr Rgb kAxis{40, 40, 40};
constexpr Rgb kSeries[4] = {{60, 100, 190}, {190, 90, 60}, {70, 160, 80},
                            {150, 80, 160}};

// 3x5 glyphs for numeric tick labels.
const std::map<char, std::array<std::uint8_t, 5>>& glyphs() {
  static const std::map<char, std::array<std::uint8_t, 5>> table = {
      {'0', {0b111, 0b101, 0b101, 0b101, 0b111}},
      {'1', {0b010, 0b110, 0b010, 0b010, 0b111}},
      {'2', {0b111, 0b001, 0b111, 0b100, 0b111}},
      {'3', {0b111, 0b001, 0b111, 0b001, 0b111}},
      {'4', {0b101, 0b101, 0b111, 0b001, 0b001}},
      {'5', {0b111, 0b100, 0b111, 0b001, 0b111}},
      {'6', {0b111, 0b100, 0b111, 0b101, 0b111}},
      {'7', {0b111, 0b001, 0b010, 0b010, 0b010}},
      {'8', {0b111, 0b101, 0b111, 0b101, 0b111}},
      {'9', {0b111, 0b101, 0b111, 0b001, 0b111}},
      {'.', {0b000, 0b000, 0b000, 0b000, 0b010}},
      {'-', {0b000, 0b000, 0b111, 0b000, 0b000}},
  };
  return table;
}

class Canvas {
 public:
  Canvas(int h, int w) {
    img_.height = h;
    img_.width = w;
    img_.pixels.assign(static_cast<std::size_t>(3) * h * w, 0);
    fill(kBg);
  }

  void fill(Rgb c) {
    for (int y = 0; y < img_.height; ++y)
      for (int x = 0; x < img_.width; ++x) put(y, x, c);
  }

  void put(int y, int x, Rgb c) {
    if (y < 0 || y >= img_.height || x < 0 || x >= img_.width) return;
    img_.at(y, x, 0) = c.r;
    img_.at(y, x, 1) = c.g;
    img_.at(y, x, 2) = c.b;
  }

  void rect(int y0, int x0, int y1, int x1, Rgb c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) put(y, x, c);
  }

  void line(int y0, int x0, int y1, int x1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      put(y0, x0, c);
      if (y0 == y1 && x0 == x1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void text(int y, int x, const std::string& s, Rgb c) {
    for (char ch : s) {
      const auto it = glyphs().find(ch);
      if (it != glyphs().end())
        for (int row = 0; row < 5; ++row)
          for (int col = 0; col < 3; ++col)
            if (it->second[row] & (1 << (2 - col))) put(y + row, x + col, c);
      x += 4;
    }
  }

  void save(const std::string& path) const { write_ppm(path, img_); }

 private:
  Image8 img_;
};

std::string format_num(double v) {
  char buf[32];
  if (v == std::floor(v) && std::fabs(v) < 1e6)
    std::snprintf(buf, sizeof(buf), "%.0f", v);
  else
    std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

constexpr int kH = 240, kW = 360, kMargin = 34;

void draw_frame(Canvas& canvas, double ymin, double ymax) {
  canvas.line(kH - kMargin, kMargin, kH - kMargin, kW - 10, kAxis);
  canvas.line(10, kMargin, kH - kMargin, kMargin, kAxis);
  canvas.text(10, 2, format_num(ymax), kAxis);
  canvas.text(kH - kMargin - 5, 2, format_num(ymin), kAxis);
}

int plot_y(double v, double ymin, double ymax) {
  const double t = ymax > ymin ? (v - ymin) / (ymax - ymin) : 0.5;
  return kH - kMargin - static_cast<int>(t * (kH - kMargin - 12));
}

void bar_chart(const std::vector<double>& values,
               const std::vector<std::string>& labels, int series,
               const std::string& path) {
  Canvas canvas(kH, kW);
  double ymax = 0.0, ymin = 0.0;
  for (double v : values) {
    ymax = std::max(ymax, v);
    ymin = std::min(ymin, v);
  }
  if (ymax == ymin) ymax = ymin + 1.0;
  draw_frame(canvas, ymin, ymax);
  const int n = static_cast<int>(values.size());
  const int span = (kW - kMargin - 14) / std::max(1, n);
  const int width = std::max(2, span - 4);
  const int y0 = plot_y(0.0, ymin, ymax);
  for (int i = 0; i < n; ++i) {
    const int x = kMargin + 4 + i * span;
    const int y = plot_y(values[i], ymin, ymax);
    canvas.rect(std::min(y, y0), x, std::max(y, y0), x + width,
                kSeries[series % 4]);
    if (i < static_cast<int>(labels.size()))
      canvas.text(kH - kMargin + 4, x, labels[i], kAxis);
  }
  canvas.save(path);
}

void line_chart(const std::vector<double>& xs, const std::vector<double>& ys,
                const std::string& path) {
  Canvas canvas(kH, kW);
  double ymax = ys[0], ymin = ys[0];
  for (double v : ys) {
    ymax = std::max(ymax, v);
    ymin = std::min(ymin, v);
  }
  if (ymax == ymin) ymax = ymin + 1.0;
  draw_frame(canvas, ymin, ymax);
  const double xmin = xs.front(), xmax = xs.back();
  auto px = [&](double x) {
    const double t = xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5;
    return kMargin + 4 + static_cast<int>(t * (kW - kMargin - 22));
  };
  for (std::size_t i = 1; i < xs.size(); ++i)
    canvas.line(plot_y(ys[i - 1], ymin, ymax), px(xs[i - 1]),
                plot_y(ys[i], ymin, ymax), px(xs[i]), kSeries[0]);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    canvas.rect(plot_y(ys[i], ymin, ymax) - 1, px(xs[i]) - 1,
                plot_y(ys[i], ymin, ymax) + 1, px(xs[i]) + 1, kSeries[1]);
    canvas.text(kH - kMargin + 4, px(xs[i]) - 4, format_num(xs[i]), kAxis);
  }
  canvas.save(path);
}

}  // namespace

int emit_plots(const std::string& input_path, const std::string& out_dir) {
  std::ifstream in(input_path);
  if (!in) throw IoError("emit_plots: missing input " + input_path);
  std::vector<json> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError("emit_plots: bad record at line " +
                       std::to_string(lineno) + ": " + e.what());
    }
  }
  if (records.empty()) return 0;
  fs::create_directories(out_dir);

  int written = 0;

  // Memory-size sweep rows -> one line chart.
  {
    std::vector<double> xs, ys;
    for (const auto& rec : records)
      if (rec.contains("memory_size") && rec.contains("target_map")) {
        xs.push_back(rec["memory_size"].get<double>());
        ys.push_back(rec["target_map"].get<double>());
      }
    if (!xs.empty()) {
      line_chart(xs, ys, (fs::path(out_dir) / "memory_sweep.ppm").string());
      ++written;
    }
  }

  // Selection-strategy rows -> one bar chart.
  {
    std::vector<double> values;
    std::vector<std::string> labels;
    for (const auto& rec : records)
      if (rec.contains("strategy") && rec.contains("target_map")) {
        values.push_back(rec["target_map"].get<double>());
        labels.push_back(std::to_string(values.size()));
      }
    if (!values.empty()) {
      bar_chart(values, labels, 2,
                (fs::path(out_dir) / "selection_strategies.ppm").string());
      ++written;
    }
  }

  // Probe rows -> d_h bars per (model, seed).
  {
    std::vector<double> values;
    std::vector<std::string> labels;
    for (const auto& rec : records)
      if (rec.contains("model") && rec.contains("d_h")) {
        values.push_back(rec["d_h"].get<double>());
        labels.push_back(rec.contains("seed")
                             ? std::to_string(rec["seed"].get<int>())
                             : "");
      }
    if (!values.empty()) {
      bar_chart(values, labels, 3,
                (fs::path(out_dir) / "probe_divergence.ppm").string());
      ++written;
    }
  }

  // Training metrics -> loss curve, mAP curve, selection histograms from the
  // last epoch that carries them.
  {
    std::vector<double> epochs, losses, maps, map_epochs;
    const json* last_hist = nullptr;
    for (const auto& rec : records) {
      if (rec.contains("epoch") && rec.contains("loss_total")) {
        epochs.push_back(rec["epoch"].get<double>());
        losses.push_back(rec["loss_total"].get<double>());
        if (rec.contains("map50")) {
          map_epochs.push_back(rec["epoch"].get<double>());
          maps.push_back(rec["map50"].get<double>());
        }
      }
      if (rec.contains("selection_histogram") &&
          !rec["selection_histogram"].empty())
        last_hist = &rec["selection_histogram"];
    }
    if (epochs.size() >= 2) {
      line_chart(epochs, losses, (fs::path(out_dir) / "loss.ppm").string());
      ++written;
    }
    if (map_epochs.size() >= 2) {
      line_chart(map_epochs, maps, (fs::path(out_dir) / "map50.ppm").string());
      ++written;
    }
    if (last_hist != nullptr) {
      int series = 0;
      for (const auto& [key, counts] : last_hist->items()) {
        std::vector<double> values;
        std::vector<std::string> labels;
        for (const auto& c : counts) {
          values.push_back(c.get<double>());
          labels.push_back(std::to_string(values.size() - 1));
        }
        std::string name = "histogram_" + key;
        std::replace(name.begin(), name.end(), '/', '_');
        bar_chart(values, labels, series++,
                  (fs::path(out_dir) / (name + ".ppm")).string());
        ++written;
      }
    }
  }
  return written;
}

}  // namespace pmdet
