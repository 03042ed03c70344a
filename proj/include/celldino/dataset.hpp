#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "celldino/channel_adapt.hpp"
#include "celldino/image.hpp"
#include "celldino/metrics.hpp"
#include "celldino/synthetic.hpp"

namespace celldino {

struct SampleRecord {
  std::string id;
  std::string path;       // FOV tensor, relative to the manifest
  std::string mask_path;  // empty when absent
  AnnotationSet labels;   // class -> grade
  std::string split;      // "train", "test" or ""
  int fold = -1;          // 0..folds-1 within the train split
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> channels;
  std::vector<std::string> classes;
  std::vector<SampleRecord> samples;
  std::uint64_t seed = 0;
  std::filesystem::path root;  // directory holding the files; not serialized

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : samples) {
      nlohmann::json row;
      row["id"] = s.id;
      row["path"] = s.path;
      if (!s.mask_path.empty()) row["mask_path"] = s.mask_path;
      row["labels"] = s.labels;
      row["split"] = s.split;
      row["fold"] = s.fold;
      js.push_back(row);
    }
    return {{"name", name},
            {"channels", channels},
            {"classes", classes},
            {"seed", seed},
            {"samples", js}};
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write manifest: " + path.string());
    f << to_json().dump(2) << "\n";
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.name = j.value("name", "");
    m.channels = j.value("channels", std::vector<std::string>{});
    m.classes = j.value("classes", std::vector<std::string>{});
    m.seed = j.value("seed", std::uint64_t(0));
    for (const auto& row : j.at("samples")) {
      SampleRecord s;
      s.id = row.at("id").get<std::string>();
      s.path = row.at("path").get<std::string>();
      s.mask_path = row.value("mask_path", "");
      if (row.contains("labels")) s.labels = row["labels"].get<AnnotationSet>();
      s.split = row.value("split", "");
      s.fold = row.value("fold", -1);
      m.samples.push_back(std::move(s));
    }
    m.root = path.parent_path();
    register_dataset_channels(m.name, m.channels);
    return m;
  }

  MultiChannelImage load_sample(const SampleRecord& rec) const {
    MultiChannelImage img = load_fov(root / rec.path);
    img.id = rec.id;
    img.labels = rec.labels;
    if (img.channels.size() != channels.size())
      throw DataError("sample " + rec.id + " channel count mismatch");
    return img;
  }

  std::vector<const SampleRecord*> split_records(const std::string& split) const {
    std::vector<const SampleRecord*> out;
    for (const auto& s : samples)
      if (s.split == split) out.push_back(&s);
    return out;
  }

  // Binary labels at the given minimum grade, in manifest class order.
  LabelMatrix binarize_labels(const std::vector<const SampleRecord*>& recs,
                              int min_grade = 1) const {
    LabelMatrix m({static_cast<std::int64_t>(recs.size()),
                   static_cast<std::int64_t>(classes.size())});
    for (std::size_t i = 0; i < recs.size(); ++i)
      for (std::size_t c = 0; c < classes.size(); ++c) {
        const auto it = recs[i]->labels.find(classes[c]);
        if (it != recs[i]->labels.end() && it->second >= min_grade)
          m.at2(static_cast<std::int64_t>(i), static_cast<std::int64_t>(c)) = 1;
      }
    return m;
  }
};

// Renders a synthetic dataset to disk: one CTF per FOV (+ mask + sidecar)
// and a manifest. Fully seeded.
inline DatasetManifest gen_synthetic(const SynthConfig& cfg,
                                     std::uint64_t seed,
                                     const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / "fov");
  DatasetManifest m;
  m.name = cfg.name;
  m.channels = cfg.channels;
  m.classes = cfg.classes;
  m.seed = seed;
  m.root = out_dir;
  for (int i = 0; i < cfg.n_samples; ++i) {
    const MultiChannelImage img = render_synthetic_fov(cfg, i, seed);
    save_fov(out_dir / "fov", img);
    SampleRecord rec;
    rec.id = img.id;
    rec.path = "fov/" + img.id + ".ctf";
    if (!img.mask.empty()) rec.mask_path = "fov/" + img.id + ".mask.ctf";
    rec.labels = img.labels;
    m.samples.push_back(std::move(rec));
  }
  register_dataset_channels(m.name, m.channels);
  m.save(out_dir / "manifest.json");
  return m;
}

// Stratified 90/10 split by each sample's rarest positive label, then a
// round-robin assignment of the train samples into disjoint folds. The test
// quota is met exactly via largest-remainder allocation across strata.
inline void split_dataset(DatasetManifest& m, std::uint64_t seed,
                          double train_frac = 0.9, int folds = 5,
                          int min_grade = 1) {
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    bool has = false;
    for (const auto& [cls, grade] : m.samples[i].labels)
      if (grade >= min_grade) has = true;
    if (has)
      labeled.push_back(i);
    else
      m.samples[i].split = "";  // unlabeled samples are left out
  }
  if (labeled.size() < 10)
    throw DataError("split_dataset: need at least 10 labeled samples");

  // class counts for rarest-label stratification
  std::map<std::string, std::int64_t> counts;
  for (const auto idx : labeled)
    for (const auto& [cls, grade] : m.samples[idx].labels)
      if (grade >= min_grade) ++counts[cls];

  std::vector<std::string> weak_classes;
  for (const auto& [cls, n] : counts)
    if (n < 5) weak_classes.push_back(cls);
  if (!weak_classes.empty()) {
    std::cerr << "[celldino] warning: classes with <5 positives fall back to "
                 "unstratified assignment:";
    for (const auto& c : weak_classes) std::cerr << " " << c;
    std::cerr << "\n";
  }

  auto stratum_of = [&](const SampleRecord& s) -> std::string {
    std::string rarest = "";
    std::int64_t best = -1;
    for (const auto& [cls, grade] : s.labels) {
      if (grade < min_grade) continue;
      if (std::find(weak_classes.begin(), weak_classes.end(), cls) !=
          weak_classes.end())
        continue;
      if (best < 0 || counts[cls] < best) {
        best = counts[cls];
        rarest = cls;
      }
    }
    return rarest;  // "" lands in the unstratified pool
  };

  std::map<std::string, std::vector<std::size_t>> strata;
  for (const auto idx : labeled)
    strata[stratum_of(m.samples[idx])].push_back(idx);

  Rng rng(derive_seed(seed, "split"));
  const std::int64_t test_total = static_cast<std::int64_t>(
      std::llround((1.0 - train_frac) * double(labeled.size())));

  // largest-remainder allocation of the test quota across strata
  struct Quota {
    std::string stratum;
    std::int64_t base;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::int64_t base_sum = 0;
  for (auto& [name, members] : strata) {
    // deterministic shuffle per stratum
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[rng.uniform_index(i)]);
    const double exact = (1.0 - train_frac) * double(members.size());
    Quota q{name, static_cast<std::int64_t>(std::floor(exact)),
            exact - std::floor(exact)};
    base_sum += q.base;
    quotas.push_back(q);
  }
  std::stable_sort(quotas.begin(), quotas.end(),
                   [](const Quota& a, const Quota& b) {
                     return a.remainder > b.remainder;
                   });
  std::int64_t leftover = test_total - base_sum;
  for (auto& q : quotas) {
    std::int64_t take = q.base;
    if (leftover > 0 &&
        take < static_cast<std::int64_t>(strata[q.stratum].size())) {
      ++take;
      --leftover;
    }
    const auto& members = strata[q.stratum];
    for (std::size_t i = 0; i < members.size(); ++i)
      m.samples[members[i]].split =
          (static_cast<std::int64_t>(i) < take) ? "test" : "train";
  }

  // round-robin folds over the shuffled strata order keeps them balanced
  int next_fold = 0;
  for (auto& s : m.samples) s.fold = -1;
  for (const auto& [name, members] : strata)
    for (const auto idx : members)
      if (m.samples[idx].split == "train") {
        m.samples[idx].fold = next_fold;
        next_fold = (next_fold + 1) % folds;
      }
}

}  // namespace celldino
