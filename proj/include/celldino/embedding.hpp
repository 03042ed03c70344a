#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "celldino/ctf.hpp"
#include "celldino/metrics.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// Matrix of per-sample feature vectors plus identifiers, a binary label
// matrix and optional grades; the interchange object between pretraining
// and evaluation. On disk: `<prefix>.json` sidecar + `<prefix>.ctf` matrix.
template <class T = float>
struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<std::string> class_names;
  Tensor<T> features;            // (n, dim)
  LabelMatrix labels;            // (n, n_classes) in {0,1}
  Tensor<std::uint8_t> grades;   // (n, n_classes) in {0..3}, may be empty

  std::int64_t n() const { return features.ndim() ? features.dim(0) : 0; }
  std::int64_t dim() const { return features.ndim() ? features.dim(1) : 0; }
  std::int64_t n_classes() const {
    return labels.ndim() ? labels.dim(1) : 0;
  }

  void validate() const {
    if (features.ndim() != 2) throw DataError("embedding set: features not 2-D");
    if (static_cast<std::int64_t>(ids.size()) != n())
      throw DataError("embedding set: id count does not match rows");
    if (labels.ndim() != 2 || labels.dim(0) != n())
      throw DataError("embedding set: label rows do not match");
    if (static_cast<std::int64_t>(class_names.size()) != labels.dim(1))
      throw DataError("embedding set: class name count does not match");
    for (std::int64_t i = 0; i < labels.numel(); ++i)
      if (labels[i] > 1) throw DataError("embedding set: non-binary label");
    if (!grades.empty() &&
        (grades.dim(0) != n() || grades.dim(1) != labels.dim(1)))
      throw DataError("embedding set: grade matrix shape mismatch");
  }

  EmbeddingSet select(const std::vector<std::int64_t>& rows) const {
    EmbeddingSet out;
    out.class_names = class_names;
    out.features = Tensor<T>({static_cast<std::int64_t>(rows.size()), dim()});
    out.labels = LabelMatrix({static_cast<std::int64_t>(rows.size()),
                              labels.dim(1)});
    if (!grades.empty())
      out.grades = Tensor<std::uint8_t>(
          {static_cast<std::int64_t>(rows.size()), grades.dim(1)});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::int64_t r = rows[i];
      out.ids.push_back(ids[static_cast<std::size_t>(r)]);
      std::copy(features.data() + r * dim(), features.data() + (r + 1) * dim(),
                out.features.data() + static_cast<std::int64_t>(i) * dim());
      for (std::int64_t c = 0; c < labels.dim(1); ++c) {
        out.labels.at2(static_cast<std::int64_t>(i), c) = labels.at2(r, c);
        if (!grades.empty())
          out.grades.at2(static_cast<std::int64_t>(i), c) = grades.at2(r, c);
      }
    }
    return out;
  }

  void save(const std::filesystem::path& prefix) const {
    validate();
    std::filesystem::create_directories(prefix.parent_path().empty()
                                            ? "."
                                            : prefix.parent_path());
    auto ctf_path = prefix;
    ctf_path += ".ctf";
    ctf::write(ctf_path, features);
    nlohmann::json j;
    j["ids"] = ids;
    j["classes"] = class_names;
    nlohmann::json rows = nlohmann::json::array();
    for (std::int64_t i = 0; i < labels.dim(0); ++i) {
      std::vector<int> row(static_cast<std::size_t>(labels.dim(1)));
      for (std::int64_t c = 0; c < labels.dim(1); ++c)
        row[static_cast<std::size_t>(c)] = labels.at2(i, c);
      rows.push_back(row);
    }
    j["labels"] = rows;
    if (!grades.empty()) {
      nlohmann::json grows = nlohmann::json::array();
      for (std::int64_t i = 0; i < grades.dim(0); ++i) {
        std::vector<int> row(static_cast<std::size_t>(grades.dim(1)));
        for (std::int64_t c = 0; c < grades.dim(1); ++c)
          row[static_cast<std::size_t>(c)] = grades.at2(i, c);
        grows.push_back(row);
      }
      j["grades"] = grows;
    }
    auto json_path = prefix;
    json_path += ".json";
    std::ofstream f(json_path);
    if (!f) throw IoError("cannot write " + json_path.string());
    f << j.dump() << "\n";
  }

  static EmbeddingSet load(const std::filesystem::path& prefix) {
    EmbeddingSet out;
    auto ctf_path = prefix;
    ctf_path += ".ctf";
    out.features = ctf::read<T>(ctf_path);
    auto json_path = prefix;
    json_path += ".json";
    std::ifstream f(json_path);
    if (!f) throw IoError("missing sidecar " + json_path.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt sidecar " + json_path.string() + ": " + e.what());
    }
    out.ids = j.at("ids").get<std::vector<std::string>>();
    out.class_names = j.at("classes").get<std::vector<std::string>>();
    const auto& rows = j.at("labels");
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    const std::int64_t k = n ? static_cast<std::int64_t>(rows[0].size())
                             : static_cast<std::int64_t>(out.class_names.size());
    out.labels = LabelMatrix({n, k});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c < k; ++c)
        out.labels.at2(i, c) =
            static_cast<std::uint8_t>(rows[i][c].get<int>());
    if (j.contains("grades")) {
      const auto& grows = j["grades"];
      out.grades = Tensor<std::uint8_t>({n, k});
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < k; ++c)
          out.grades.at2(i, c) =
              static_cast<std::uint8_t>(grows[i][c].get<int>());
    }
    out.validate();
    return out;
  }
};

}  // namespace celldino
