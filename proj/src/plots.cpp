#include "cleansheet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace cleansheet {

namespace {

struct Series {
  std::string label;
  std::string colour;
  std::vector<std::pair<double, double>> points;
};

constexpr double kWidth = 480;
constexpr double kHeight = 320;
constexpr double kLeft = 56;
constexpr double kRight = 16;
constexpr double kTop = 32;
constexpr double kBottom = 44;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

class Canvas {
 public:
  Canvas(std::string title, std::string xlabel, std::string ylabel, double x0, double x1, double y0, double y1)
      : x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1) {
    svg_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
         << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         << "<text x=\"" << kWidth / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(title)
         << "</text>\n";
    const double bx = kLeft;
    const double by = kHeight - kBottom;
    svg_ << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << by
         << "\" stroke=\"black\"/>\n"
         << "<line x1=\"" << bx << "\" y1=\"" << kTop << "\" x2=\"" << bx << "\" y2=\"" << by << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0_ + (x1_ - x0_) * i / 4.0;
      const double yv = y0_ + (y1_ - y0_) * i / 4.0;
      svg_ << "<text x=\"" << px(xv) << "\" y=\"" << by + 14 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n"
           << "<text x=\"" << bx - 4 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    }
    svg_ << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 8 << "\" text-anchor=\"middle\">"
         << escape(xlabel) << "</text>\n"
         << "<text transform=\"translate(14," << (kTop + by) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
         << escape(ylabel) << "</text>\n";
  }

  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0_) / (y1_ - y0_) * (kHeight - kTop - kBottom); }

  void line(const Series& s) {
    svg_ << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) svg_ << px(x) << ',' << py(y) << ' ';
    svg_ << "\"/>\n";
    for (const auto& [x, y] : s.points) {
      svg_ << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << s.colour << "\"/>\n";
    }
    legend(s.label, s.colour);
  }

  void bar(double x_lo, double x_hi, double y, const std::string& colour) {
    svg_ << "<rect x=\"" << px(x_lo) << "\" y=\"" << py(y) << "\" width=\"" << std::max(0.0, px(x_hi) - px(x_lo))
         << "\" height=\"" << std::max(0.0, py(y0_) - py(y)) << "\" fill=\"" << colour << "\" fill-opacity=\"0.5\"/>\n";
  }

  void vline(double x, const std::string& colour, const std::string& label) {
    svg_ << "<line x1=\"" << px(x) << "\" y1=\"" << kTop << "\" x2=\"" << px(x) << "\" y2=\"" << kHeight - kBottom
         << "\" stroke=\"" << colour << "\" stroke-dasharray=\"4 3\"/>\n";
    legend(label, colour);
  }

  void legend(const std::string& label, const std::string& colour) {
    const double y = kTop + 4 + 14 * legend_rows_++;
    svg_ << "<rect x=\"" << kWidth - kRight - 130 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << colour
         << "\"/>\n<text x=\"" << kWidth - kRight - 116 << "\" y=\"" << y + 9 << "\">" << escape(label) << "</text>\n";
  }

  std::string finish() {
    svg_ << "</svg>\n";
    return svg_.str();
  }

 private:
  double x0_;
  double x1_;
  double y0_;
  double y1_;
  int legend_rows_ = 0;
  std::ostringstream svg_;
};

std::string slug(std::size_t index, const std::string& model) { return std::to_string(index) + "_" + model; }

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& artifact_dir) {
  const std::vector<std::string> expected{"attack_report.json", "prune_report.json", "strip_report.json",
                                          "trigger.json"};
  std::vector<std::string> present;
  for (const auto& name : expected) {
    if (std::filesystem::exists(artifact_dir / name)) present.push_back(name);
  }
  if (present.empty()) {
    std::string list;
    for (const auto& n : expected) list += (list.empty() ? "" : ", ") + n;
    throw ParseError("no reports in " + artifact_dir.string() + "; expected at least one of: " + list);
  }
  const auto plots = artifact_dir / "plots";
  if (std::filesystem::exists(plots)) throw ConfigError(plots.string() + " already exists; plots are never overwritten");
  std::filesystem::create_directories(plots);
  std::vector<std::filesystem::path> written;
  auto save = [&](const std::string& name, const std::string& svg) {
    write_text_file(plots / name, svg);
    written.push_back(plots / name);
  };

  if (std::filesystem::exists(artifact_dir / "attack_report.json")) {
    const Json report = read_json(artifact_dir / "attack_report.json");
    const auto& rows = report.at("rows");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto model = rows[i].at("model").get<std::string>();
      Series s{"ASR", "#c0392b", {}};
      for (const auto& p : rows[i].at("transparency")) s.points.emplace_back(p.at("t").get<double>(), p.at("asr").get<double>());
      Series base{"clean baseline", "#7f8c8d", {}};
      if (!s.points.empty()) {
        const double b = rows[i].at("baseline").get<double>();
        base.points = {{s.points.front().first, b}, {s.points.back().first, b}};
      }
      Canvas c("Transparency sweep: " + model, "transparency t", "attack success rate", 0.0, 1.0, 0.0, 1.0);
      c.line(s);
      c.line(base);
      save("transparency_" + slug(i, model) + ".svg", c.finish());
    }
  }

  if (std::filesystem::exists(artifact_dir / "prune_report.json")) {
    const Json report = read_json(artifact_dir / "prune_report.json");
    const auto& rows = report.at("rows");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto model = rows[i].at("model").get<std::string>();
      Series ca{"CA", "#2471a3", {}};
      Series asr{"ASR", "#c0392b", {}};
      double xmax = 0.0;
      for (const auto& p : rows[i].at("points")) {
        const double r = p.at("ratio").get<double>();
        xmax = std::max(xmax, r);
        ca.points.emplace_back(r, p.at("CA").get<double>());
        asr.points.emplace_back(r, p.at("ASR").get<double>());
      }
      Canvas c("Pruning (" + report.at("method").get<std::string>() + "): " + model, "prune ratio", "rate", 0.0, xmax,
               0.0, 1.0);
      c.line(ca);
      c.line(asr);
      save("prune_" + slug(i, model) + ".svg", c.finish());
    }
  }

  if (std::filesystem::exists(artifact_dir / "strip_report.json")) {
    const Json report = read_json(artifact_dir / "strip_report.json");
    const auto& rows = report.at("rows");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto model = rows[i].at("model").get<std::string>();
      const auto clean = rows[i].at("clean_entropies").get<std::vector<double>>();
      const auto trig = rows[i].at("input_entropies").get<std::vector<double>>();
      double hi = 1e-9;
      for (double v : clean) hi = std::max(hi, v);
      for (double v : trig) hi = std::max(hi, v);
      constexpr int kBins = 30;
      auto hist = [&](const std::vector<double>& v) {
        std::vector<double> h(kBins, 0.0);
        for (double x : v) h[static_cast<std::size_t>(std::min(kBins - 1, static_cast<int>(x / hi * kBins)))] += 1.0;
        for (auto& c : h) c /= std::max<std::size_t>(1, v.size());
        return h;
      };
      const auto hc = hist(clean);
      const auto ht = hist(trig);
      const double ymax = std::max(*std::max_element(hc.begin(), hc.end()), *std::max_element(ht.begin(), ht.end()));
      Canvas c("Entropy under superposition: " + model, "mean entropy (nats)", "fraction of inputs", 0.0, hi, 0.0, ymax);
      for (int b = 0; b < kBins; ++b) {
        const double lo = hi * b / kBins;
        const double up = hi * (b + 1) / kBins;
        c.bar(lo, up, hc[static_cast<std::size_t>(b)], "#2471a3");
        c.bar(lo, up, ht[static_cast<std::size_t>(b)], "#c0392b");
      }
      c.legend("clean", "#2471a3");
      c.legend("triggered", "#c0392b");
      c.vline(rows[i].at("threshold").get<double>(), "black", "threshold");
      save("strip_" + slug(i, model) + ".svg", c.finish());
    }
  }

  if (std::filesystem::exists(artifact_dir / "trigger.json")) {
    const Json t = read_json(artifact_dir / "trigger.json");
    if (t.contains("lambda_history") && !t.at("lambda_history").empty()) {
      Series lam{"log10 lambda", "#8e44ad", {}};
      double lo = 1e300;
      double hi = -1e300;
      for (const auto& r : t.at("lambda_history")) {
        const double v = std::log10(r.at(1).get<double>());
        lam.points.emplace_back(r.at(0).get<double>(), v);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      Canvas c("Mask-size weight schedule", "iteration", "log10 lambda", 0.0, lam.points.back().first, lo, hi);
      c.line(lam);
      save("lambda.svg", c.finish());
    }
  }
  return written;
}

}  // namespace cleansheet
