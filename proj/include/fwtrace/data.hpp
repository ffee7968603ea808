#ifndef FWTRACE_DATA_HPP_
#define FWTRACE_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fwtrace/errors.hpp"
#include "fwtrace/hash.hpp"
#include "fwtrace/model.hpp"

namespace fwtrace {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
  std::size_t count() const {
    const std::size_t per = static_cast<std::size_t>(rows) * cols;
    return per == 0 ? 0 : pixels.size() / per;
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

inline IdxImages parse_idx_images(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4) throw TruncatedError(16, b.size());
  const std::uint32_t magic = detail::be32(b, 0);
  if (magic != kIdxImagesMagic) {
    throw CorruptHeaderError("IDX image magic is " + std::to_string(magic) + ", expected 2051");
  }
  if (b.size() < 16) throw TruncatedError(16, b.size());
  IdxImages img;
  const std::uint64_t count = detail::be32(b, 4);
  img.rows = detail::be32(b, 8);
  img.cols = detail::be32(b, 12);
  const std::uint64_t expected = 16 + count * img.rows * img.cols;
  if (b.size() < expected) throw TruncatedError(expected, b.size());
  if (b.size() > expected) throw FormatError("trailing bytes after IDX image payload");
  img.pixels.assign(b.begin() + 16, b.end());
  return img;
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4) throw TruncatedError(8, b.size());
  const std::uint32_t magic = detail::be32(b, 0);
  if (magic != kIdxLabelsMagic) {
    throw CorruptHeaderError("IDX label magic is " + std::to_string(magic) + ", expected 2049");
  }
  if (b.size() < 8) throw TruncatedError(8, b.size());
  const std::uint64_t expected = 8 + std::uint64_t{detail::be32(b, 4)};
  if (b.size() < expected) throw TruncatedError(expected, b.size());
  if (b.size() > expected) throw FormatError("trailing bytes after IDX label payload");
  return {b.begin() + 8, b.end()};
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxImagesMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(img.count()));
  detail::put_be32(b, img.rows);
  detail::put_be32(b, img.cols);
  b.insert(b.end(), img.pixels.begin(), img.pixels.end());
  return b;
}

inline std::vector<std::uint8_t> encode_idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxLabelsMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

// Seeded choice of `size` distinct indices out of `total`, returned sorted.
inline std::vector<std::size_t> seeded_subset(std::size_t total, std::size_t size,
                                              std::uint64_t seed) {
  if (size > total) {
    throw ConfigError("subset of " + std::to_string(size) + " requested from " +
                      std::to_string(total) + " examples");
  }
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates; std::shuffle's algorithm is implementation-defined.
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Images scaled to [0, 1]; ids are the positions in the IDX file. A subset
// size of 0 keeps every image.
inline std::vector<Example> idx_examples(const IdxImages& images,
                                         const std::vector<std::uint8_t>& labels,
                                         std::size_t subset = 0, std::uint64_t seed = 0) {
  if (images.count() != labels.size()) throw CountMismatchError(images.count(), labels.size());
  const std::size_t dim = static_cast<std::size_t>(images.rows) * images.cols;
  const std::vector<std::size_t> chosen =
      subset == 0 ? seeded_subset(labels.size(), labels.size(), seed)
                  : seeded_subset(labels.size(), subset, seed);
  std::vector<Example> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) {
    Example e;
    e.id = i;
    e.features.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k) {
      e.features[static_cast<Eigen::Index>(k)] = images.pixels[i * dim + k] / 255.0;
    }
    e.label = labels[i];
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<Example> load_idx(const std::string& images_path,
                                     const std::string& labels_path, std::size_t subset = 0,
                                     std::uint64_t seed = 0) {
  return idx_examples(parse_idx_images(detail::read_all(images_path)),
                      parse_idx_labels(detail::read_all(labels_path)), subset, seed);
}

inline void save_idx(const std::string& images_path, const std::string& labels_path,
                     const IdxImages& images, const std::vector<std::uint8_t>& labels) {
  if (images.count() != labels.size()) throw CountMismatchError(images.count(), labels.size());
  detail::write_bytes(images_path, encode_idx_images(images));
  detail::write_bytes(labels_path, encode_idx_labels(labels));
}

// k isotropic Gaussian clusters in d dimensions; centres drawn from N(0, 4 I).
// Labels cycle through the clusters.
inline std::vector<Example> gaussian_blobs(std::size_t n, int k, int d, double sigma,
                                           std::uint64_t seed) {
  if (k < 1 || d < 1 || !(sigma >= 0.0)) throw ConfigError("gaussian-blobs needs k, d >= 1, sigma >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<RealVector> centres(static_cast<std::size_t>(k), RealVector(d));
  for (auto& c : centres) {
    for (int j = 0; j < d; ++j) c[j] = 2.0 * normal(rng);
  }
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.id = i;
    e.label = static_cast<int>(i % static_cast<std::size_t>(k));
    e.features = centres[static_cast<std::size_t>(e.label)];
    for (int j = 0; j < d; ++j) e.features[j] += sigma * normal(rng);
    out.push_back(std::move(e));
  }
  return out;
}

// Two interleaving half circles with Gaussian noise; even ids on the upper moon.
inline std::vector<Example> two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (!(noise >= 0.0)) throw ConfigError("two-moons noise must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 3.14159265358979323846);
  std::normal_distribution<double> normal;
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = angle(rng);
    Example e;
    e.id = i;
    e.label = static_cast<int>(i % 2);
    e.features.resize(2);
    if (e.label == 0) {
      e.features << std::cos(a), std::sin(a);
    } else {
      e.features << 1.0 - std::cos(a), 0.5 - std::sin(a);
    }
    e.features[0] += noise * normal(rng);
    e.features[1] += noise * normal(rng);
    out.push_back(std::move(e));
  }
  return out;
}

// Least-squares instances for the bias-free linear model with squared error.
// p = 1: x = 1 and targets evenly spaced on [0, 2], so n = 2 gives
// l_i = 0.5 (theta - c_i)^2 with c = {0, 2}. p > 1: Gaussian features scaled
// by `scale`, targets from a random linear map plus unit noise.
inline std::vector<Example> quadratic_testbed(std::size_t n, int p, std::uint64_t seed,
                                              double scale = 1.0) {
  if (n == 0 || p < 1) throw ConfigError("quadratic-testbed needs N >= 1, P >= 1");
  std::vector<Example> out;
  if (p == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      Example e;
      e.id = i;
      e.features = RealVector::Ones(1);
      const double c = n == 1 ? 1.0 : 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
      e.target = RealVector::Constant(1, c);
      out.push_back(std::move(e));
    }
    return out;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RealVector w(p);
  for (int j = 0; j < p; ++j) w[j] = normal(rng);
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.id = i;
    e.features.resize(p);
    for (int j = 0; j < p; ++j) e.features[j] = scale * normal(rng);
    e.target = RealVector::Constant(1, w.dot(e.features) / std::max(scale, 1e-12) + normal(rng));
    out.push_back(std::move(e));
  }
  return out;
}

inline ModelSpec quadratic_testbed_spec(int p) {
  ModelSpec spec;
  spec.layer_sizes = {p, 1};
  spec.loss = LossKind::kSquaredError;
  spec.bias = false;
  return spec;
}

inline Query to_query(const Example& e, Functional functional = Functional::kLoss) {
  Query q;
  q.id = e.id;
  q.features = e.features;
  q.label = e.label;
  q.target = e.target;
  q.functional = functional;
  return q;
}

inline std::uint64_t dataset_hash(const Dataset& data) {
  Fnv1a h;
  h.text("fwtrace.dataset.v1");
  h.value<std::uint64_t>(data.size());
  for (const Example& e : data.examples()) {
    h.value(e.id);
    h.reals({e.features.data(), static_cast<std::size_t>(e.features.size())});
    h.value<std::int64_t>(e.label);
    h.reals({e.target.data(), static_cast<std::size_t>(e.target.size())});
  }
  return h.digest();
}

}  // namespace fwtrace

#endif  // FWTRACE_DATA_HPP_
