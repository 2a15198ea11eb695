#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "topkd/matrix.hpp"
#include "topkd/rng.hpp"

namespace topkd {

// Synthetic hierarchy: S superclass centers on a sphere, M class means per
// center at distance sub_spread, Gaussian samples around each mean. Classes
// are numbered superclass-major, so class c belongs to superclass c / M.
struct DatasetSpec {
  std::size_t superclasses = 5;
  std::size_t classes_per_super = 4;
  std::size_t dim = 32;
  double super_spread = 6.0;
  double sub_spread = 1.5;
  double noise_std = 1.0;
  std::size_t n_train = 500;  // per class
  std::size_t n_val = 100;    // per class
  std::uint64_t seed = 7;

  std::size_t num_classes() const { return superclasses * classes_per_super; }

  void validate() const {
    if (superclasses < 1 || classes_per_super < 1 || dim < 1 || n_train < 1 || n_val < 1) {
      throw std::invalid_argument("DatasetSpec: all counts must be >= 1");
    }
    if (!(sub_spread < super_spread)) {
      throw std::invalid_argument("DatasetSpec: sub_spread must be < super_spread");
    }
    if (noise_std < 0.0) throw std::invalid_argument("DatasetSpec: noise_std must be >= 0");
  }
};

struct LabeledDataset {
  Matrix features;  // N x D
  IndexVector labels;
  std::size_t num_classes = 0;
  // superclass index per class; identity (each class its own group) for
  // flat data such as CSV imports.
  IndexVector superclass_of;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  std::size_t num_superclasses() const {
    std::size_t mx = 0;
    for (std::size_t s : superclass_of) mx = std::max(mx, s);
    return superclass_of.empty() ? 0 : mx + 1;
  }
};

namespace detail {

inline std::vector<double> random_unit_vector(RandomStream& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm_sq = 0.0;
  do {
    norm_sq = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm_sq += x * x;
    }
  } while (norm_sq < 1e-24);
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (auto& x : v) x *= inv;
  return v;
}

inline LabeledDataset sample_dataset(const DatasetSpec& spec,
                                     const std::vector<std::vector<double>>& class_means,
                                     std::size_t per_class, RandomStream& rng) {
  const std::size_t c = spec.num_classes();
  const std::size_t n = c * per_class;
  LabeledDataset ds;
  ds.features = Matrix(n, spec.dim);
  ds.labels.reserve(n);
  ds.num_classes = c;
  for (std::size_t cls = 0; cls < c; ++cls) ds.superclass_of.push_back(cls / spec.classes_per_super);

  std::size_t row = 0;
  for (std::size_t cls = 0; cls < c; ++cls) {
    for (std::size_t s = 0; s < per_class; ++s, ++row) {
      auto dst = ds.features.row(row);
      for (std::size_t d = 0; d < spec.dim; ++d) {
        dst[d] = class_means[cls][d] + spec.noise_std * rng.normal();
      }
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

}  // namespace detail

// Draw order is fixed (centers, class perturbations, all train samples, all
// val samples) so a seed pins both splits and keeps them disjoint draws.
inline std::pair<LabeledDataset, LabeledDataset> generate_hierarchical(
    const DatasetSpec& spec) {
  spec.validate();
  RandomStream rng(spec.seed);

  // Random directions scaled so expected pairwise center distance is about
  // super_spread (|a - b| ~ sqrt(2) * radius for random unit vectors).
  const double radius = spec.super_spread / std::sqrt(2.0);
  std::vector<std::vector<double>> centers;
  for (std::size_t s = 0; s < spec.superclasses; ++s) {
    auto c = detail::random_unit_vector(rng, spec.dim);
    for (auto& x : c) x *= radius;
    centers.push_back(std::move(c));
  }

  std::vector<std::vector<double>> class_means;
  for (std::size_t s = 0; s < spec.superclasses; ++s) {
    for (std::size_t m = 0; m < spec.classes_per_super; ++m) {
      auto dir = detail::random_unit_vector(rng, spec.dim);
      std::vector<double> mean(spec.dim);
      for (std::size_t d = 0; d < spec.dim; ++d) {
        mean[d] = centers[s][d] + spec.sub_spread * dir[d];
      }
      class_means.push_back(std::move(mean));
    }
  }

  LabeledDataset train = detail::sample_dataset(spec, class_means, spec.n_train, rng);
  LabeledDataset val = detail::sample_dataset(spec, class_means, spec.n_val, rng);
  return {std::move(train), std::move(val)};
}

namespace detail {

inline std::string expected_csv_header(std::size_t dim) {
  std::string h;
  for (std::size_t d = 0; d < dim; ++d) {
    h += "f" + std::to_string(d) + ",";
  }
  h += "label";
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

inline double parse_double_field(const std::string& s, std::size_t line_no) {
  double value = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                             ": bad numeric field '" + s + "'");
  }
  return value;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

// CSV schema: header "f0,...,f{D-1},label", one sample per row, feature
// values then an integer class label. Errors carry the 1-based line number.
inline LabeledDataset load_csv(const std::string& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_csv: " + path + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::string want_header = detail::expected_csv_header(dim);
  if (line != want_header) {
    throw std::runtime_error("load_csv: line 1: header mismatch, expected '" +
                             want_header + "'");
  }

  std::vector<double> values;
  IndexVector labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != dim + 1) {
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) + ": expected " +
                               std::to_string(dim + 1) + " columns, found " +
                               std::to_string(fields.size()));
    }
    for (std::size_t d = 0; d < dim; ++d) {
      values.push_back(detail::parse_double_field(fields[d], line_no));
    }
    long long label = 0;
    const auto& ls = fields[dim];
    auto [ptr, ec] = std::from_chars(ls.data(), ls.data() + ls.size(), label);
    if (ec != std::errc() || ptr != ls.data() + ls.size() || label < 0) {
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                               ": bad label '" + ls + "'");
    }
    labels.push_back(static_cast<std::size_t>(label));
  }

  LabeledDataset ds;
  ds.features = Matrix(labels.size(), dim, std::move(values));
  ds.labels = std::move(labels);
  for (std::size_t y : ds.labels) ds.num_classes = std::max(ds.num_classes, y + 1);
  for (std::size_t c = 0; c < ds.num_classes; ++c) ds.superclass_of.push_back(c);
  return ds;
}

// Reads the header to discover the feature dimension.
inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("load_csv: " + path + " is empty");
  const std::size_t commas =
      static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
  if (commas == 0) throw std::runtime_error("load_csv: " + path + ": malformed header");
  return load_csv(path, commas);
}

inline void save_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_csv: cannot write " + path);
  out << detail::expected_csv_header(ds.dim()) << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = ds.features.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) {
      out << detail::format_double(row[d]) << ",";
    }
    out << ds.labels[i] << "\n";
  }
}

struct Batch {
  Matrix features;
  IndexVector labels;
  IndexVector indices;  // positions in the source dataset
};

// Seeded shuffle, then contiguous chunks; the final partial batch is kept.
inline std::vector<Batch> batches(const LabeledDataset& ds, std::size_t batch_size,
                                  std::uint64_t epoch_seed) {
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  IndexVector order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RandomStream rng(epoch_seed);
  rng.shuffle(order);

  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    Batch b;
    b.features = Matrix(n, ds.dim());
    b.labels.reserve(n);
    b.indices.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = order[start + i];
      auto dst = b.features.row(i);
      const auto s = ds.features.row(src);
      std::copy(s.begin(), s.end(), dst.begin());
      b.labels.push_back(ds.labels[src]);
      b.indices.push_back(src);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace topkd
