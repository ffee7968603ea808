#ifndef FWTRACE_READOUT_HPP_
#define FWTRACE_READOUT_HPP_

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fwtrace/errors.hpp"
#include "fwtrace/model.hpp"
#include "fwtrace/parallel.hpp"
#include "fwtrace/simulator.hpp"

namespace fwtrace {

static_assert(std::endian::native == std::endian::little,
              "the imprint store format is little-endian");

struct AttributionScore {
  double value = 0.0;
  std::uint64_t example_id = 0;
  std::uint64_t query_id = 0;
  std::uint64_t config_hash = 0;
  Variant variant = Variant::kPair;
  int forward_passes_used = 0;
};

namespace detail {

inline void check_imprint_matches(const InfluenceImprint& imprint, const ParameterVector& theta) {
  if (imprint.spec_hash != theta.spec_hash) {
    throw StalenessError("imprint was simulated for a different model spec");
  }
  if (imprint.theta_star_hash != theta.content_hash()) {
    throw StalenessError("imprint was simulated from different reference parameters");
  }
  if (imprint.delta_plus.size() != theta.size()) {
    throw DimensionError("imprint length does not match the parameter vector");
  }
}

inline double readout_scale(const InfluenceImprint& imprint) {
  // 1 / (2 eps / N)
  return static_cast<double>(imprint.n) / (2.0 * imprint.config.epsilon);
}

}  // namespace detail

// [F(q; theta* + D+) - F(q; theta* + D-)] / (2 eps / N). Two forward passes,
// no gradients.
inline AttributionScore score_symmetric(const Model& model, const InfluenceImprint& imprint,
                                        const Query& q, const ParameterVector& theta_star) {
  if (imprint.config.variant != Variant::kPair || !imprint.delta_minus) {
    throw ConfigError("symmetric readout needs a pair-variant imprint");
  }
  detail::check_imprint_matches(imprint, theta_star);
  const double up = model.query_value(theta_star.displaced(imprint.delta_plus), q);
  const double down = model.query_value(theta_star.displaced(*imprint.delta_minus), q);
  const double value = (up - down) * detail::readout_scale(imprint);
  if (!std::isfinite(value)) throw NumericError("attribution score is not finite");
  return {value, imprint.example_id, q.id, imprint.config.hash(), Variant::kPair, 2};
}

// Mirrored single-trajectory readout using +D+ and -D+.
inline AttributionScore score_single(const Model& model, const InfluenceImprint& imprint,
                                     const Query& q, const ParameterVector& theta_star) {
  detail::check_imprint_matches(imprint, theta_star);
  const double up = model.query_value(theta_star.displaced(imprint.delta_plus), q);
  const double down = model.query_value(theta_star.displaced(-imprint.delta_plus), q);
  const double value = (up - down) * detail::readout_scale(imprint);
  if (!std::isfinite(value)) throw NumericError("attribution score is not finite");
  return {value, imprint.example_id, q.id, imprint.config.hash(), Variant::kSingle, 2};
}

struct StoreHeader {
  std::uint64_t spec_hash = 0;
  std::uint64_t theta_star_hash = 0;
  std::uint64_t n = 0;
  std::uint64_t p = 0;
  SimulationConfig config;

  bool operator==(const StoreHeader&) const = default;
};

// Imprints keyed by example id, all from one (model, theta*, config).
class ImprintStore {
 public:
  ImprintStore() = default;
  explicit ImprintStore(StoreHeader header) : header_(header), has_header_(true) {}

  const StoreHeader& header() const { return header_; }
  bool has_header() const { return has_header_; }
  std::size_t size() const { return imprints_.size(); }
  bool empty() const { return imprints_.empty(); }
  const std::map<std::uint64_t, InfluenceImprint>& imprints() const { return imprints_; }

  const InfluenceImprint& at(std::uint64_t id) const {
    auto it = imprints_.find(id);
    if (it == imprints_.end()) throw MembershipError(id);
    return it->second;
  }

  void insert(InfluenceImprint imprint) {
    StoreHeader h{imprint.spec_hash, imprint.theta_star_hash, imprint.n,
                  static_cast<std::uint64_t>(imprint.delta_plus.size()), imprint.config};
    if (!has_header_) {
      header_ = h;
      has_header_ = true;
    } else if (!(h == header_)) {
      throw StalenessError("imprint " + std::to_string(imprint.example_id) +
                           " does not share the store's model, parameters or config");
    }
    if ((imprint.config.variant == Variant::kPair) != imprint.delta_minus.has_value()) {
      throw FormatError("pair imprints need delta_minus and single imprints must not have it");
    }
    const std::uint64_t id = imprint.example_id;
    if (!imprints_.emplace(id, std::move(imprint)).second) {
      throw ConfigError("duplicate imprint for example " + std::to_string(id));
    }
  }

  bool operator==(const ImprintStore& o) const {
    return has_header_ == o.has_header_ && header_ == o.header_ && imprints_ == o.imprints_;
  }

 private:
  StoreHeader header_;
  bool has_header_ = false;
  std::map<std::uint64_t, InfluenceImprint> imprints_;
};

inline constexpr char kStoreMagic[4] = {'F', 'W', 'I', 'M'};
inline constexpr std::uint16_t kStoreVersion = 1;
// magic(4) version(2) spec(8) theta(8) N(8) P(8) eps/eta/lambda(24) steps(8)
// variant(1) flags(1) count(8)
inline constexpr std::uint64_t kStoreHeaderBytes = 4 + 2 + 8 * 4 + 8 * 3 + 8 + 1 + 1 + 8;

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_reals(const RealVector& v) {
    const auto* p = reinterpret_cast<const char*>(v.data());
    bytes_.insert(bytes_.end(), p, p + sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::uint64_t expected_total)
      : bytes_(bytes), expected_(expected_total) {}

  void set_expected(std::uint64_t expected) { expected_ = expected; }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  RealVector get_reals(std::uint64_t n) {
    need(n * sizeof(double));
    RealVector v(static_cast<Eigen::Index>(n));
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::uint64_t n) {
    if (pos_ + n > bytes_.size()) {
      throw TruncatedError(std::max<std::uint64_t>(expected_, pos_ + n), bytes_.size());
    }
  }
  const std::string& bytes_;
  std::uint64_t expected_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string store_serialize(const ImprintStore& store) {
  if (!store.has_header()) throw ConfigError("cannot save a store without imprints or header");
  const StoreHeader& h = store.header();
  detail::ByteWriter w;
  w.raw(kStoreMagic, 4);
  w.put<std::uint16_t>(kStoreVersion);
  w.put<std::uint64_t>(h.spec_hash);
  w.put<std::uint64_t>(h.theta_star_hash);
  w.put<std::uint64_t>(h.n);
  w.put<std::uint64_t>(h.p);
  w.put<double>(h.config.epsilon);
  w.put<double>(h.config.eta);
  w.put<double>(h.config.lambda);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(h.config.steps));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(h.config.variant));
  w.put<std::uint8_t>(h.config.flags());
  w.put<std::uint64_t>(store.size());
  for (const auto& [id, imprint] : store.imprints()) {
    w.put<std::uint64_t>(id);
    w.put_reals(imprint.delta_plus);
    w.put<std::uint8_t>(imprint.delta_minus ? 1 : 0);
    if (imprint.delta_minus) w.put_reals(*imprint.delta_minus);
  }
  return w.bytes();
}

struct ExpectedHashes {
  std::optional<std::uint64_t> spec_hash;
  std::optional<std::uint64_t> theta_star_hash;
};

inline ImprintStore store_deserialize(const std::string& bytes,
                                      const ExpectedHashes& expected = {}) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kStoreMagic, 4) != 0) {
    throw CorruptHeaderError("missing FWIM magic");
  }
  detail::ByteReader r(bytes, kStoreHeaderBytes);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kStoreVersion) {
    throw CorruptHeaderError("unsupported store version " + std::to_string(version));
  }
  StoreHeader h;
  h.spec_hash = r.get<std::uint64_t>();
  h.theta_star_hash = r.get<std::uint64_t>();
  h.n = r.get<std::uint64_t>();
  h.p = r.get<std::uint64_t>();
  h.config.epsilon = r.get<double>();
  h.config.eta = r.get<double>();
  h.config.lambda = r.get<double>();
  h.config.steps = static_cast<std::int64_t>(r.get<std::uint64_t>());
  const auto variant = r.get<std::uint8_t>();
  const auto flags = r.get<std::uint8_t>();
  const auto count = r.get<std::uint64_t>();
  if (variant > 1) throw CorruptHeaderError("unknown variant byte " + std::to_string(variant));
  if (flags > 3) throw CorruptHeaderError("unknown flag bits " + std::to_string(flags));
  if (h.n == 0 || h.p == 0) throw CorruptHeaderError("zero N or P");
  h.config.variant = static_cast<Variant>(variant);
  h.config.drift_correction = (flags & 1) != 0;
  h.config.record_diagnostics = (flags & 2) != 0;

  if (expected.spec_hash && *expected.spec_hash != h.spec_hash) {
    throw StalenessError("store spec hash " + std::to_string(h.spec_hash) +
                         " does not match model spec hash " +
                         std::to_string(*expected.spec_hash));
  }
  if (expected.theta_star_hash && *expected.theta_star_hash != h.theta_star_hash) {
    throw StalenessError("store theta* hash " + std::to_string(h.theta_star_hash) +
                         " does not match checkpoint hash " +
                         std::to_string(*expected.theta_star_hash));
  }

  const std::uint64_t record =
      8 + 8 * h.p + 1 + (h.config.variant == Variant::kPair ? 8 * h.p : 0);
  r.set_expected(kStoreHeaderBytes + count * record);

  ImprintStore store(h);
  for (std::uint64_t i = 0; i < count; ++i) {
    InfluenceImprint imprint;
    imprint.example_id = r.get<std::uint64_t>();
    imprint.delta_plus = r.get_reals(h.p);
    const auto present = r.get<std::uint8_t>();
    if (present > 1) throw CorruptHeaderError("bad presence byte");
    if (present) imprint.delta_minus = r.get_reals(h.p);
    imprint.config = h.config;
    imprint.theta_star_hash = h.theta_star_hash;
    imprint.spec_hash = h.spec_hash;
    imprint.n = h.n;
    store.insert(std::move(imprint));
  }
  if (r.position() != bytes.size()) {
    throw FormatError("trailing bytes after " + std::to_string(count) + " records");
  }
  return store;
}

inline void store_save(const ImprintStore& store, const std::string& path) {
  const std::string bytes = store_serialize(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ImprintStore store_load(const std::string& path, const ExpectedHashes& expected = {}) {
  return store_deserialize(read_file_bytes(path), expected);
}

// |B| x |Q| table; rows follow the store's example order, columns the query order.
struct ScoreTable {
  std::vector<std::uint64_t> example_ids;
  std::vector<std::uint64_t> query_ids;
  DenseMatrix values;
  std::vector<std::vector<bool>> failed;
  std::vector<std::string> failures;
  Variant variant = Variant::kPair;
  std::uint64_t config_hash = 0;
  std::uint64_t forward_passes = 0;
  std::uint64_t n = 0;
  bool per_example = false;

  std::size_t rows() const { return example_ids.size(); }
  std::size_t cols() const { return query_ids.size(); }
  bool any_failed() const { return !failures.empty(); }
};

struct AttributeOptions {
  // Readout to apply; unset follows the store's variant.
  std::optional<Variant> variant;
  // Divide by N so scores follow the -(1/N) g_q^T H^-1 g_b convention.
  bool per_example = false;
  std::size_t workers = 1;
};

inline ScoreTable attribute_matrix(const Model& model, const ImprintStore& store,
                                   const std::vector<Query>& queries,
                                   const ParameterVector& theta_star,
                                   const AttributeOptions& opts = {}) {
  if (store.empty()) throw ConfigError("attribute_matrix needs a non-empty store");
  if (queries.empty()) throw ConfigError("attribute_matrix needs at least one query");
  ScoreTable table;
  table.variant = opts.variant.value_or(store.header().config.variant);
  table.config_hash = store.header().config.hash();
  table.n = store.header().n;
  table.per_example = opts.per_example;
  for (const auto& [id, imprint] : store.imprints()) table.example_ids.push_back(id);
  for (const Query& q : queries) table.query_ids.push_back(q.id);
  const std::size_t rows = table.rows();
  const std::size_t cols = table.cols();
  table.values = DenseMatrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  table.failed.assign(rows, std::vector<bool>(cols, false));
  std::vector<std::string> messages(rows * cols);
  std::vector<int> passes(rows * cols, 0);
  std::vector<const InfluenceImprint*> row_imprints;
  for (const auto& [id, imprint] : store.imprints()) row_imprints.push_back(&imprint);
  const double scale = opts.per_example ? 1.0 / static_cast<double>(table.n) : 1.0;

  parallel_for(rows * cols, opts.workers, [&](std::size_t cell) {
    const std::size_t i = cell / cols;
    const std::size_t j = cell % cols;
    try {
      const AttributionScore s =
          table.variant == Variant::kPair
              ? score_symmetric(model, *row_imprints[i], queries[j], theta_star)
              : score_single(model, *row_imprints[i], queries[j], theta_star);
      table.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.value * scale;
      passes[cell] = s.forward_passes_used;
    } catch (const std::exception& e) {
      messages[cell] = e.what();
    }
  });
  for (std::size_t cell = 0; cell < rows * cols; ++cell) {
    table.forward_passes += static_cast<std::uint64_t>(passes[cell]);
    if (!messages[cell].empty()) {
      table.failed[cell / cols][cell % cols] = true;
      table.values(static_cast<Eigen::Index>(cell / cols),
                   static_cast<Eigen::Index>(cell % cols)) = std::nan("");
      table.failures.push_back("example " + std::to_string(table.example_ids[cell / cols]) +
                               ", query " + std::to_string(table.query_ids[cell % cols]) +
                               ": " + messages[cell]);
    }
  }
  return table;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// CSV: example_id,query_id,score,variant,forward_passes. Failed cells are
// omitted. Lines starting with '#' carry provenance and are skipped by readers.
inline std::string scores_to_csv(const ScoreTable& table, const std::string& provenance = "") {
  std::ostringstream out;
  if (!provenance.empty()) out << "# " << provenance << '\n';
  out << "example_id,query_id,score,variant,forward_passes\n";
  for (std::size_t i = 0; i < table.rows(); ++i) {
    for (std::size_t j = 0; j < table.cols(); ++j) {
      if (table.failed[i][j]) continue;
      out << table.example_ids[i] << ',' << table.query_ids[j] << ','
          << format_real(table.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)))
          << ',' << to_string(table.variant) << ",2\n";
    }
  }
  return out.str();
}

struct ParsedScores {
  ScoreTable table;
  std::vector<std::string> comments;
};

// Inverse of scores_to_csv for complete tables.
inline ParsedScores scores_from_csv(const std::string& text) {
  ParsedScores parsed;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  std::map<std::uint64_t, std::size_t> rows, cols;
  struct Cell {
    std::uint64_t b, q;
    double v;
  };
  std::vector<Cell> cells;
  std::optional<Variant> variant;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      parsed.comments.push_back(line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1));
      continue;
    }
    if (!header) {
      if (line != "example_id,query_id,score,variant,forward_passes") {
        throw FormatError("unexpected score CSV header '" + line + "'");
      }
      header = true;
      continue;
    }
    std::istringstream fields(line);
    std::string b, q, v, var, fp;
    if (!std::getline(fields, b, ',') || !std::getline(fields, q, ',') ||
        !std::getline(fields, v, ',') || !std::getline(fields, var, ',') ||
        !std::getline(fields, fp, ',')) {
      throw FormatError("malformed score row '" + line + "'");
    }
    Cell c{std::stoull(b), std::stoull(q), std::stod(v)};
    const Variant row_variant = parse_variant(var);
    if (variant && *variant != row_variant) throw FormatError("mixed variants in score CSV");
    variant = row_variant;
    rows.emplace(c.b, 0);
    cols.emplace(c.q, 0);
    cells.push_back(c);
  }
  if (!header) throw FormatError("score CSV has no header");
  ScoreTable& t = parsed.table;
  t.variant = variant.value_or(Variant::kPair);
  std::size_t k = 0;
  for (auto& [id, idx] : rows) {
    idx = k++;
    t.example_ids.push_back(id);
  }
  k = 0;
  for (auto& [id, idx] : cols) {
    idx = k++;
    t.query_ids.push_back(id);
  }
  t.values = DenseMatrix::Constant(static_cast<Eigen::Index>(t.rows()),
                                   static_cast<Eigen::Index>(t.cols()), std::nan(""));
  t.failed.assign(t.rows(), std::vector<bool>(t.cols(), true));
  for (const Cell& c : cells) {
    const std::size_t i = rows[c.b];
    const std::size_t j = cols[c.q];
    t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c.v;
    t.failed[i][j] = false;
    t.forward_passes += 2;
  }
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      if (t.failed[i][j]) {
        t.failures.push_back("missing cell example " + std::to_string(t.example_ids[i]) +
                             ", query " + std::to_string(t.query_ids[j]));
      }
    }
  }
  return parsed;
}

}  // namespace fwtrace

#endif  // FWTRACE_READOUT_HPP_
