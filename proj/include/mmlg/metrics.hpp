#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmlg/errors.hpp"

namespace mmlg {

struct MetricRecord {
  std::string stage;
  std::uint64_t step = 0;
  std::string name;
  double value = 0;
  std::uint64_t seed = 0;

  bool operator==(const MetricRecord&) const = default;
};

inline nlohmann::ordered_json to_json(const MetricRecord& r) {
  return {{"stage", r.stage}, {"step", r.step}, {"name", r.name}, {"value", r.value}, {"seed", r.seed}};
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
  try {
    return {j.at("stage").get<std::string>(), j.at("step").get<std::uint64_t>(), j.at("name").get<std::string>(),
            j.at("value").get<double>(), j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("metric record", e.what());
  }
}

// Collects records in memory and, when given a path, appends each one as a
// JSON line as it arrives.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::filesystem::path& path) : out_(path, std::ios::app) {
    if (!out_) throw ValidationError("cannot open metrics file " + path.string());
  }

  void emit(MetricRecord r) {
    if (out_.is_open()) {
      out_ << to_json(r).dump() << '\n';
      out_.flush();
    }
    records_.push_back(std::move(r));
  }

  void emit(const std::string& stage, std::uint64_t step, const std::string& name, double value,
            std::uint64_t seed) {
    emit(MetricRecord{stage, step, name, value, seed});
  }

  const std::vector<MetricRecord>& records() const noexcept { return records_; }

 private:
  std::ofstream out_;
  std::vector<MetricRecord> records_;
};

inline std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open metrics file " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(metric_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("metric record", e.what());
    }
  }
  return out;
}

}  // namespace mmlg
