#include "skilllab/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skilllab/config.hpp"
#include "skilllab/data.hpp"

namespace skilllab::report {

using json = nlohmann::ordered_json;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b"};

void emit_rows(std::ostringstream& csv, const std::string& suite,
               const std::string& metric, const json& obj) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    csv << suite << "," << it.key() << "," << metric << ","
        << data::format_float(it.value().get<double>()) << "\n";
}

}  // namespace

std::string svg_lines(const std::vector<Series>& series, const std::string& title,
                      int width, int height) {
  double xmin = 1e30, xmax = -1e30, ymin = 0.0, ymax = -1e30;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  const double ml = 46, mr = 12, mt = 28, mb = 30;
  auto px = [&](double x) {
    return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr);
  };
  auto py = [&](double y) {
    return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb);
  };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
  // axes
  svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\""
      << width - mr << "\" y2=\"" << height - mb
      << "\" stroke=\"#333\" stroke-width=\"1\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << height - mb << "\" stroke=\"#333\" stroke-width=\"1\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double y = ymin + (ymax - ymin) * i / 4.0;
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << py(y) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"10\">" << data::format_float(std::round(y * 100) / 100)
        << "</text>\n";
  }
  int ci = 0;
  for (const auto& s : series) {
    const char* color = kPalette[ci % 6];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
    svg << "\"/>\n";
    svg << "<text x=\"" << width - mr - 4 << "\" y=\"" << mt + 14 * ci + 10
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
           "fill=\"" << color << "\">" << s.label << "</text>\n";
    ++ci;
  }
  svg << "</svg>\n";
  return svg.str();
}

void merge_reports(const std::vector<std::string>& inputs,
                   const std::string& out_dir) {
  std::ostringstream csv;
  csv << "suite,item,metric,value\n";
  for (const auto& path : inputs) {
    json j = json::parse(read_text_file(path));
    std::string suite = j.value("suite", "?");
    if (j.contains("matrix_avg"))
      csv << suite << ",all,matrix_avg,"
          << data::format_float(j["matrix_avg"].get<double>()) << "\n";
    if (j.contains("success")) emit_rows(csv, suite, "success", j["success"]);
    if (j.contains("progress")) emit_rows(csv, suite, "progress", j["progress"]);
    if (j.contains("t_norm")) emit_rows(csv, suite, "t_norm", j["t_norm"]);
    if (j.contains("gate_agreement"))
      emit_rows(csv, suite, "gate_agreement", j["gate_agreement"]);
    if (j.contains("gate_variance"))
      emit_rows(csv, suite, "gate_variance", j["gate_variance"]);
    if (j.contains("mi_table")) {
      for (const auto& d : j["mi_table"]) {
        csv << suite << "," << d["context"].get<std::string>() << ",mi,"
            << data::format_float(d["mi"].get<double>()) << "\n";
        csv << suite << "," << d["context"].get<std::string>() << ",bias_floor,"
            << data::format_float(d["bias_floor"].get<double>()) << "\n";
      }
    }
    if (j.contains("curves")) {
      std::vector<Series> series;
      for (auto it = j["curves"].begin(); it != j["curves"].end(); ++it) {
        Series s;
        s.label = it.key();
        for (const auto& pt : it.value()) {
          s.points.emplace_back(pt["K"].get<double>(),
                                pt["success"].get<double>());
          csv << suite << "," << it.key() << ",success_at_K"
              << pt["K"].get<int>() << ","
              << data::format_float(pt["success"].get<double>()) << "\n";
        }
        series.push_back(std::move(s));
      }
      write_text_file(out_dir + "/continual_curves.svg",
                      svg_lines(series, "success vs demonstrations"));
    }
    if (j.contains("sample_trace")) {
      Series yhat, alpha, stage;
      yhat.label = "gate prob";
      alpha.label = "gate";
      stage.label = "stage";
      const auto& tr = j["sample_trace"];
      for (std::size_t t = 0; t < tr["yhat"].size(); ++t) {
        double x = static_cast<double>(t);
        yhat.points.emplace_back(x, tr["yhat"][t].get<double>());
        alpha.points.emplace_back(x, tr["alpha"][t].get<double>());
        stage.points.emplace_back(x, tr["stage"][t].get<double>() * 1.05);
      }
      write_text_file(out_dir + "/gate_trace.svg",
                      svg_lines({yhat, alpha, stage}, "gate trace"));
    }
  }
  write_text_file(out_dir + "/report.csv", csv.str());
}

}  // namespace skilllab::report
