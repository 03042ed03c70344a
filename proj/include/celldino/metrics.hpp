#pragma once

#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "celldino/error.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// (n_samples, n_classes) binary matrix stored as u8.
using LabelMatrix = Tensor<std::uint8_t>;

struct ClassMetrics {
  std::int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0.0;
  std::int64_t n_samples = 0;

  nlohmann::json to_json() const {
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t i = 0; i < per_class.size(); ++i) {
      const auto& c = per_class[i];
      classes.push_back({{"class", i < class_names.size()
                                       ? class_names[i]
                                       : "class" + std::to_string(i)},
                         {"tp", c.tp},
                         {"fp", c.fp},
                         {"fn", c.fn},
                         {"precision", c.precision},
                         {"recall", c.recall},
                         {"f1", c.f1}});
    }
    return {{"n_samples", n_samples},
            {"macro_f1", macro_f1},
            {"per_class", classes}};
  }

  // One row per class.
  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write metrics csv: " + path);
    f << "class,tp,fp,fn,precision,recall,f1\n";
    for (std::size_t i = 0; i < per_class.size(); ++i) {
      const auto& c = per_class[i];
      f << (i < class_names.size() ? class_names[i]
                                   : "class" + std::to_string(i))
        << "," << c.tp << "," << c.fp << "," << c.fn << "," << c.precision
        << "," << c.recall << "," << c.f1 << "\n";
    }
  }
};

// Per-class precision/recall/F1 from binary matrices. Zero-division rule:
// precision, recall and F1 all fall back to 0 when their denominator is 0,
// and such classes still contribute 0 to the macro mean.
inline std::vector<ClassMetrics> prf_per_class(const LabelMatrix& y_true,
                                               const LabelMatrix& y_pred) {
  if (y_true.ndim() != 2 || y_pred.ndim() != 2)
    throw ShapeError("prf_per_class: expected 2-D label matrices");
  require_same_shape(y_true, y_pred, "prf_per_class");
  const std::int64_t n = y_true.dim(0), k = y_true.dim(1);
  for (std::int64_t i = 0; i < y_true.numel(); ++i)
    if (y_true[i] > 1 || y_pred[i] > 1)
      throw DataError("prf_per_class: labels must be binary");
  std::vector<ClassMetrics> out(static_cast<std::size_t>(k));
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t c = 0; c < k; ++c) {
      const bool t = y_true.at2(s, c) != 0;
      const bool p = y_pred.at2(s, c) != 0;
      auto& m = out[static_cast<std::size_t>(c)];
      if (t && p) ++m.tp;
      if (!t && p) ++m.fp;
      if (t && !p) ++m.fn;
    }
  for (auto& m : out) {
    m.precision = (m.tp + m.fp) == 0 ? 0.0 : double(m.tp) / double(m.tp + m.fp);
    m.recall = (m.tp + m.fn) == 0 ? 0.0 : double(m.tp) / double(m.tp + m.fn);
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return out;
}

inline double macro_f1(const std::vector<ClassMetrics>& per_class) {
  if (per_class.empty()) throw DataError("macro_f1: no classes");
  double sum = 0.0;
  for (const auto& m : per_class) sum += m.f1;
  return sum / double(per_class.size());
}

inline MetricsReport evaluate_multilabel(
    const LabelMatrix& y_true, const LabelMatrix& y_pred,
    std::vector<std::string> class_names = {}) {
  MetricsReport r;
  r.per_class = prf_per_class(y_true, y_pred);
  r.macro_f1 = macro_f1(r.per_class);
  r.n_samples = y_true.dim(0);
  r.class_names = std::move(class_names);
  return r;
}

}  // namespace celldino
