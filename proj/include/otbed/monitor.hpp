#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "otbed/fabric.hpp"

namespace otbed::monitor {

enum class Schema { full10, subset4 };
[[nodiscard]] const char* to_string(Schema s);
[[nodiscard]] std::optional<Schema> schema_from_string(const std::string& s);
[[nodiscard]] std::size_t dimensions(Schema s);

// Full10: frame number, time (s), inter-arrival (s), TCP seq, TCP ack,
// window, src IP, src port, dst IP, dst port. IPs enter as raw 32-bit
// integers.
// Subset4: frame length, src port, dst port, Modbus transaction id (-1 when
// the payload is not a Modbus frame).
struct FeatureVector {
  Schema schema = Schema::subset4;
  std::vector<double> values;
};

// Incremental form of extract_features, for the live mirror tap.
class FeatureExtractor {
 public:
  FeatureExtractor(Schema schema, std::uint32_t tick_us) : schema_(schema), tick_us_(tick_us) {}
  FeatureVector next(const fabric::Packet& p);

 private:
  Schema schema_;
  std::uint32_t tick_us_;
  std::uint64_t frame_ = 0;
  std::optional<double> last_time_;
};

[[nodiscard]] std::vector<FeatureVector> extract_features(std::span<const fabric::Packet> packets, Schema schema,
                                                          std::uint32_t tick_us = 10000);

// Transaction id when the payload is one complete Modbus/TCP frame in
// either direction.
[[nodiscard]] std::optional<std::uint16_t> modbus_transaction(const fabric::Bytes& payload);

struct KMeansModel {
  Schema schema = Schema::subset4;
  std::size_t k = 0;
  std::vector<std::vector<double>> centroids;  // normalized space
  std::vector<double> mins, maxs;
  double inertia = 0.0;
  std::uint64_t seed = 0;
  int iterations = 0;
  std::vector<double> inertia_history;  // after each assignment step
};

struct FitOptions {
  std::size_t k = 5;
  std::uint64_t seed = 1;
  int max_iter = 100;
  double tol = 1e-6;
  int restarts = 1;  // independent k-means++ runs, best inertia kept
};

// Throws std::invalid_argument when there are fewer vectors than k, k is 0,
// or schemas are mixed.
[[nodiscard]] KMeansModel kmeans_fit(std::span<const FeatureVector> vectors, const FitOptions& opt);

[[nodiscard]] std::vector<double> normalize(const KMeansModel& m, const FeatureVector& v);
[[nodiscard]] std::size_t nearest(const KMeansModel& m, const std::vector<double>& normalized);
// Throws std::invalid_argument on schema mismatch.
[[nodiscard]] double outlier_score(const KMeansModel& m, const FeatureVector& v);

struct Alert {
  std::size_t packet = 0;  // index into the scored packet sequence
  std::string detector;
  double score = 0.0;
  double threshold = 0.0;
  bool verdict = false;
};

[[nodiscard]] Alert flag(const KMeansModel& m, const FeatureVector& v, double threshold, std::size_t packet = 0);

// mean + sigmas * stddev of the training distances.
[[nodiscard]] double default_threshold(const KMeansModel& m, std::span<const FeatureVector> training,
                                       double sigmas = 3.0);

struct EwmaOptions {
  double alpha = 0.1;
  double sigmas = 3.0;
  double sigma_floor = 1.0;  // packets per tick
  std::size_t warmup = 10;   // ticks per flow before alerting
};

// Per-(src, dst, dst port) packets-per-tick baseline. One alert per packet
// in an anomalous flow-tick; packet indices refer to `packets`.
[[nodiscard]] std::vector<Alert> ewma_baseline(std::span<const fabric::Packet> packets, const EwmaOptions& opt = {},
                                               std::size_t first_scored = 0);

struct Scores {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::optional<double> precision, recall, f1;  // nullopt when undefined
};

[[nodiscard]] Scores evaluate(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> labels);
// Alerts with verdict set count as positive predictions over [begin, end).
[[nodiscard]] Scores evaluate(std::span<const Alert> alerts, std::span<const std::uint8_t> labels, std::size_t begin,
                              std::size_t end);

// First tick of the scored portion when the first `fraction` of the time span
// is used for training.
[[nodiscard]] fabric::Tick split_tick(fabric::Tick first, fabric::Tick last, double fraction);

struct DetectorConfig {
  Schema schema = Schema::subset4;
  FitOptions fit;
  double train_split = 0.3;
  double sigmas = 3.0;
  EwmaOptions ewma;
};

struct DetectionResult {
  Schema schema = Schema::subset4;
  KMeansModel model;
  double threshold = 0.0;
  fabric::Tick split = 0;
  std::size_t first_scored = 0;  // packet index
  std::vector<Alert> alerts;     // k-means verdicts that fired
  std::vector<Alert> ewma_alerts;
  std::optional<Scores> kmeans_scores;
  std::optional<Scores> ewma_scores;
};

// Offline pipeline: time split, fit on the prefix, score the rest. Labels
// may be empty (no evaluation). `first`/`last` bound the time span; pass
// nullopt to take them from the packets.
[[nodiscard]] DetectionResult detect(std::span<const fabric::Packet> packets, std::span<const std::uint8_t> labels,
                                     const DetectorConfig& cfg, std::uint32_t tick_us = 10000,
                                     std::optional<std::pair<fabric::Tick, fabric::Tick>> span = std::nullopt);

// Live form fed from the mirror tap. Trains once the clock passes the split
// tick, then scores each packet as it arrives.
class Monitor {
 public:
  Monitor(DetectorConfig cfg, fabric::Tick first, fabric::Tick last, std::uint32_t tick_us = 10000);

  void ingest(const fabric::Packet& p, bool malicious);
  // Fits on the training prefix if nothing past the split arrived.
  void finish();

  [[nodiscard]] bool trained() const { return model_.has_value(); }
  [[nodiscard]] const std::vector<Alert>& alerts() const { return alerts_; }
  [[nodiscard]] std::size_t packets() const { return labels_.size(); }
  [[nodiscard]] const std::vector<std::uint8_t>& labels() const { return labels_; }
  [[nodiscard]] std::optional<double> threshold() const { return threshold_; }
  [[nodiscard]] const std::optional<KMeansModel>& model() const { return model_; }
  [[nodiscard]] fabric::Tick split() const { return split_; }
  [[nodiscard]] std::size_t first_scored() const { return first_scored_.value_or(labels_.size()); }
  [[nodiscard]] Scores scores() const;

 private:
  void fit();

  DetectorConfig cfg_;
  fabric::Tick split_;
  FeatureExtractor extractor_;
  std::vector<FeatureVector> training_;
  std::vector<std::uint8_t> labels_;
  std::optional<KMeansModel> model_;
  std::optional<double> threshold_;
  std::optional<std::size_t> first_scored_;
  std::vector<Alert> alerts_;
};

}  // namespace otbed::monitor
