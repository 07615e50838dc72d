#include "otbed/monitor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "otbed/modbus.hpp"

namespace otbed::monitor {

const char* to_string(Schema s) { return s == Schema::full10 ? "full10" : "subset4"; }

std::optional<Schema> schema_from_string(const std::string& s) {
  if (s == "full10") return Schema::full10;
  if (s == "subset4") return Schema::subset4;
  return std::nullopt;
}

std::size_t dimensions(Schema s) { return s == Schema::full10 ? 10 : 4; }

std::optional<std::uint16_t> modbus_transaction(const fabric::Bytes& payload) {
  for (auto dir : {modbus::Direction::request, modbus::Direction::response}) {
    const auto r = modbus::decode_frame(payload, dir);
    if (const auto* d = std::get_if<modbus::Decoded>(&r); d && d->consumed == payload.size())
      return d->frame.header.transaction_id;
  }
  return std::nullopt;
}

FeatureVector FeatureExtractor::next(const fabric::Packet& p) {
  ++frame_;
  const double t = (static_cast<double>(p.ts.tick) * tick_us_ + p.ts.seq) / 1e6;
  const double dt = last_time_ ? t - *last_time_ : 0.0;
  last_time_ = t;
  FeatureVector v;
  v.schema = schema_;
  if (schema_ == Schema::full10) {
    v.values = {static_cast<double>(frame_),
                t,
                dt,
                static_cast<double>(p.tcp.seq),
                static_cast<double>(p.tcp.ack),
                static_cast<double>(p.tcp.window),
                static_cast<double>(p.src_ip),
                static_cast<double>(p.tcp.src_port),
                static_cast<double>(p.dst_ip),
                static_cast<double>(p.tcp.dst_port)};
  } else {
    const auto txn = modbus_transaction(p.payload);
    v.values = {static_cast<double>(p.frame_size()), static_cast<double>(p.tcp.src_port),
                static_cast<double>(p.tcp.dst_port), txn ? static_cast<double>(*txn) : -1.0};
  }
  return v;
}

std::vector<FeatureVector> extract_features(std::span<const fabric::Packet> packets, Schema schema,
                                            std::uint32_t tick_us) {
  FeatureExtractor ex(schema, tick_us);
  std::vector<FeatureVector> out;
  out.reserve(packets.size());
  for (const auto& p : packets) out.push_back(ex.next(p));
  return out;
}

namespace {

using Point = std::vector<double>;

double dist2(const Point& a, const Point& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Portable uniform in [0, 1); the std distributions differ between
// standard libraries.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t pick_weighted(std::mt19937_64& rng, const std::vector<double>& w) {
  double total = 0;
  for (double x : w) total += x;
  if (total <= 0) return static_cast<std::size_t>(rng() % w.size());
  double u = unit(rng) * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0) return i;
  return 0;
}

struct Assignment {
  std::vector<std::size_t> label;
  std::vector<double> d2;
  double inertia = 0;
};

Assignment assign(const std::vector<Point>& pts, const std::vector<Point>& cs) {
  Assignment a;
  a.label.resize(pts.size());
  a.d2.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    for (std::size_t c = 0; c < cs.size(); ++c) {
      const double d = dist2(pts[i], cs[c]);
      if (d < best) {
        best = d;
        bi = c;
      }
    }
    a.label[i] = bi;
    a.d2[i] = best;
    a.inertia += best;
  }
  return a;
}

void check_schema(const KMeansModel& m, const FeatureVector& v) {
  if (v.schema != m.schema || v.values.size() != dimensions(m.schema))
    throw std::invalid_argument(std::string("feature schema mismatch: model is ") + to_string(m.schema) +
                                ", vector is " + to_string(v.schema));
}

}  // namespace

std::vector<double> normalize(const KMeansModel& m, const FeatureVector& v) {
  check_schema(m, v);
  std::vector<double> out(v.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double range = m.maxs[i] - m.mins[i];
    out[i] = (v.values[i] - m.mins[i]) / (range > 0 ? range : 1.0);
  }
  return out;
}

namespace {
KMeansModel lloyd(const std::vector<Point>& pts, KMeansModel m, const FitOptions& opt, std::uint64_t seed);
}

KMeansModel kmeans_fit(std::span<const FeatureVector> vectors, const FitOptions& opt) {
  if (opt.k == 0) throw std::invalid_argument("k must be at least 1");
  if (vectors.size() < opt.k)
    throw std::invalid_argument("need at least k=" + std::to_string(opt.k) + " vectors, got " +
                                std::to_string(vectors.size()));
  KMeansModel m;
  m.schema = vectors.front().schema;
  m.k = opt.k;
  m.seed = opt.seed;
  const std::size_t dim = dimensions(m.schema);
  for (const auto& v : vectors)
    if (v.schema != m.schema || v.values.size() != dim) throw std::invalid_argument("mixed feature schemas");

  m.mins.assign(dim, std::numeric_limits<double>::infinity());
  m.maxs.assign(dim, -std::numeric_limits<double>::infinity());
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < dim; ++i) {
      m.mins[i] = std::min(m.mins[i], v.values[i]);
      m.maxs[i] = std::max(m.maxs[i], v.values[i]);
    }
  std::vector<Point> pts;
  pts.reserve(vectors.size());
  for (const auto& v : vectors) pts.push_back(normalize(m, v));

  // seeds opt.seed, opt.seed + 1, ...; lowest final inertia wins, first on ties
  KMeansModel best;
  for (int r = 0; r < std::max(opt.restarts, 1); ++r) {
    auto run = lloyd(pts, m, opt, opt.seed + static_cast<std::uint64_t>(r));
    if (r == 0 || run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

namespace {

KMeansModel lloyd(const std::vector<Point>& pts, KMeansModel m, const FitOptions& opt, std::uint64_t seed) {
  const std::size_t dim = m.mins.size();
  m.seed = seed;
  // k-means++ seeding
  std::mt19937_64 rng(seed);
  std::vector<Point> cs;
  cs.push_back(pts[static_cast<std::size_t>(rng() % pts.size())]);
  std::vector<double> d2(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = dist2(pts[i], cs[0]);
  while (cs.size() < opt.k) {
    cs.push_back(pts[pick_weighted(rng, d2)]);
    for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = std::min(d2[i], dist2(pts[i], cs.back()));
  }

  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    const auto a = assign(pts, cs);
    m.inertia_history.push_back(a.inertia);
    std::vector<Point> next(opt.k, Point(dim, 0.0));
    std::vector<std::size_t> count(opt.k, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ++count[a.label[i]];
      for (std::size_t j = 0; j < dim; ++j) next[a.label[i]][j] += pts[i][j];
    }
    std::vector<bool> taken(pts.size(), false);
    for (std::size_t c = 0; c < opt.k; ++c) {
      if (count[c] > 0) {
        for (auto& x : next[c]) x /= static_cast<double>(count[c]);
        continue;
      }
      // empty cluster: move it onto the worst-served point
      std::size_t far = 0;
      double fd = -1;
      for (std::size_t i = 0; i < pts.size(); ++i)
        if (!taken[i] && a.d2[i] > fd) {
          fd = a.d2[i];
          far = i;
        }
      taken[far] = true;
      next[c] = pts[far];
    }
    double shift = 0;
    for (std::size_t c = 0; c < opt.k; ++c) shift = std::max(shift, std::sqrt(dist2(cs[c], next[c])));
    cs = std::move(next);
    m.iterations = iter;
    if (shift < opt.tol) break;
  }
  m.centroids = std::move(cs);
  m.inertia = assign(pts, m.centroids).inertia;
  return m;
}

}  // namespace

std::size_t nearest(const KMeansModel& m, const std::vector<double>& x) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < m.centroids.size(); ++c) {
    const double d = dist2(x, m.centroids[c]);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  return best;
}

double outlier_score(const KMeansModel& m, const FeatureVector& v) {
  const auto x = normalize(m, v);
  return std::sqrt(dist2(x, m.centroids[nearest(m, x)]));
}

Alert flag(const KMeansModel& m, const FeatureVector& v, double threshold, std::size_t packet) {
  Alert a;
  a.packet = packet;
  a.detector = std::string("kmeans-") + to_string(m.schema);
  a.score = outlier_score(m, v);
  a.threshold = threshold;
  a.verdict = a.score > threshold;
  return a;
}

double default_threshold(const KMeansModel& m, std::span<const FeatureVector> training, double sigmas) {
  if (training.empty()) throw std::invalid_argument("no training vectors");
  double sum = 0, sq = 0;
  for (const auto& v : training) {
    const double d = outlier_score(m, v);
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(training.size());
  const double mean = sum / n;
  const double var = std::max(0.0, sq / n - mean * mean);
  return mean + sigmas * std::sqrt(var);
}

std::vector<Alert> ewma_baseline(std::span<const fabric::Packet> packets, const EwmaOptions& opt,
                                 std::size_t first_scored) {
  std::vector<Alert> out;
  if (packets.empty()) return out;
  const fabric::Tick origin = packets.front().ts.tick;
  using Key = std::tuple<fabric::Ipv4, fabric::Ipv4, std::uint16_t>;
  std::map<Key, std::vector<std::size_t>> flows;
  for (std::size_t i = 0; i < packets.size(); ++i)
    flows[{packets[i].src_ip, packets[i].dst_ip, packets[i].tcp.dst_port}].push_back(i);

  for (const auto& [key, idx] : flows) {
    // Every flow is silent from the start of the trace until its first
    // packet, so its state there is exactly zero.
    double mean = 0, var = 0;
    fabric::Tick t = packets[idx.front()].ts.tick;
    std::size_t pos = 0;
    while (pos < idx.size()) {
      const fabric::Tick next = packets[idx[pos]].ts.tick;
      for (; t < next; ++t) {  // silent ticks
        const double diff = -mean;
        mean += opt.alpha * diff;
        var = (1 - opt.alpha) * (var + opt.alpha * diff * diff);
      }
      std::size_t end = pos;
      while (end < idx.size() && packets[idx[end]].ts.tick == t) ++end;
      const double rate = static_cast<double>(end - pos);
      const double limit = mean + opt.sigmas * std::max(std::sqrt(var), opt.sigma_floor);
      if (t - origin >= opt.warmup && rate > limit)
        for (std::size_t j = pos; j < end; ++j)
          if (idx[j] >= first_scored) out.push_back({idx[j], "ewma", rate, limit, true});
      const double diff = rate - mean;
      mean += opt.alpha * diff;
      var = (1 - opt.alpha) * (var + opt.alpha * diff * diff);
      pos = end;
      ++t;
    }
  }
  std::sort(out.begin(), out.end(), [](const Alert& a, const Alert& b) { return a.packet < b.packet; });
  return out;
}

Scores evaluate(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> labels) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("prediction and label counts differ");
  Scores s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predicted[i] != 0, l = labels[i] != 0;
    if (p && l) ++s.tp;
    else if (p) ++s.fp;
    else if (l) ++s.fn;
    else ++s.tn;
  }
  if (s.tp + s.fp > 0) s.precision = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
  if (s.tp + s.fn > 0) s.recall = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
  if (s.precision && s.recall && *s.precision + *s.recall > 0)
    s.f1 = 2 * *s.precision * *s.recall / (*s.precision + *s.recall);
  return s;
}

Scores evaluate(std::span<const Alert> alerts, std::span<const std::uint8_t> labels, std::size_t begin,
                std::size_t end) {
  if (begin > end || end > labels.size()) throw std::invalid_argument("evaluation range out of bounds");
  std::vector<std::uint8_t> pred(end - begin, 0);
  for (const auto& a : alerts)
    if (a.verdict && a.packet >= begin && a.packet < end) pred[a.packet - begin] = 1;
  return evaluate(pred, labels.subspan(begin, end - begin));
}

fabric::Tick split_tick(fabric::Tick first, fabric::Tick last, double fraction) {
  if (last < first) return first;
  const double span = static_cast<double>(last - first + 1);
  return first + static_cast<fabric::Tick>(std::floor(fraction * span));
}

DetectionResult detect(std::span<const fabric::Packet> packets, std::span<const std::uint8_t> labels,
                       const DetectorConfig& cfg, std::uint32_t tick_us,
                       std::optional<std::pair<fabric::Tick, fabric::Tick>> span) {
  if (!labels.empty() && labels.size() != packets.size())
    throw std::invalid_argument("label count does not match packet count");
  if (packets.empty()) throw std::invalid_argument("no packets to analyse");
  DetectionResult r;
  r.schema = cfg.schema;
  const auto [first, last] = span.value_or(std::pair{packets.front().ts.tick, packets.back().ts.tick});
  r.split = split_tick(first, last, cfg.train_split);
  const auto features = extract_features(packets, cfg.schema, tick_us);
  r.first_scored = packets.size();
  for (std::size_t i = 0; i < packets.size(); ++i)
    if (packets[i].ts.tick >= r.split) {
      r.first_scored = i;
      break;
    }
  const std::span<const FeatureVector> training(features.data(), r.first_scored);
  r.model = kmeans_fit(training, cfg.fit);
  r.threshold = default_threshold(r.model, training, cfg.sigmas);
  for (std::size_t i = r.first_scored; i < features.size(); ++i) {
    auto a = flag(r.model, features[i], r.threshold, i);
    if (a.verdict) r.alerts.push_back(std::move(a));
  }
  r.ewma_alerts = ewma_baseline(packets, cfg.ewma, r.first_scored);
  if (!labels.empty()) {
    r.kmeans_scores = evaluate(r.alerts, labels, r.first_scored, packets.size());
    r.ewma_scores = evaluate(r.ewma_alerts, labels, r.first_scored, packets.size());
  }
  return r;
}

Monitor::Monitor(DetectorConfig cfg, fabric::Tick first, fabric::Tick last, std::uint32_t tick_us)
    : cfg_(std::move(cfg)), split_(split_tick(first, last, cfg_.train_split)), extractor_(cfg_.schema, tick_us) {}

void Monitor::fit() {
  model_ = kmeans_fit(training_, cfg_.fit);
  threshold_ = default_threshold(*model_, training_, cfg_.sigmas);
}

void Monitor::ingest(const fabric::Packet& p, bool malicious) {
  auto v = extractor_.next(p);
  const std::size_t index = labels_.size();
  labels_.push_back(malicious ? 1 : 0);
  if (p.ts.tick < split_) {
    training_.push_back(std::move(v));
    return;
  }
  if (!first_scored_) first_scored_ = index;
  if (!model_ && training_.size() >= cfg_.fit.k) fit();
  if (!model_) return;
  auto a = flag(*model_, v, *threshold_, index);
  if (a.verdict) alerts_.push_back(std::move(a));
}

void Monitor::finish() {
  if (!model_ && training_.size() >= cfg_.fit.k) fit();
}

Scores Monitor::scores() const {
  return evaluate(alerts_, labels_, first_scored(), labels_.size());
}

}  // namespace otbed::monitor
