#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "tcrm/errors.hpp"

namespace tcrm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Init { zeros, ones, normal };

/// Named trainable matrices, each with a gradient slot of identical shape.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  /// Registers a parameter. Normal init uses the store's seeded generator, so
  /// registration order fixes the initial values.
  Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, double stddev = 0.02) {
    detail::require(!index_.contains(name), "parameter '" + name + "' already registered");
    detail::require(rows > 0 && cols > 0, "parameter '" + name + "' has empty shape");
    Matrix m(rows, cols);
    switch (init) {
      case Init::zeros:
        m.setZero();
        break;
      case Init::ones:
        m.setOnes();
        break;
      case Init::normal: {
        std::normal_distribution<double> dist(0.0, stddev);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
          m.data()[i] = dist(rng_);
        }
        break;
      }
    }
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(m), Matrix::Zero(rows, cols)});
    return entries_.back().value;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  [[nodiscard]] std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      detail::fail("unknown parameter '" + name + "'");
    }
    return it->second;
  }

  [[nodiscard]] std::size_t count() const { return entries_.size(); }
  [[nodiscard]] const std::string& name(std::size_t i) const { return entries_[i].name; }
  [[nodiscard]] Matrix& value(std::size_t i) { return entries_[i].value; }
  [[nodiscard]] const Matrix& value(std::size_t i) const { return entries_[i].value; }
  [[nodiscard]] Matrix& grad(std::size_t i) { return entries_[i].grad; }
  [[nodiscard]] const Matrix& grad(std::size_t i) const { return entries_[i].grad; }
  [[nodiscard]] Matrix& value(const std::string& n) { return value(index_of(n)); }
  [[nodiscard]] const Matrix& value(const std::string& n) const { return value(index_of(n)); }
  [[nodiscard]] Matrix& grad(const std::string& n) { return grad(index_of(n)); }

  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  /// Total number of scalars across all parameters.
  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      n += static_cast<std::size_t>(e.value.size());
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) {
      e.grad.setZero();
    }
  }

  /// Copies values of every same-named, same-shaped parameter from `other`.
  void copy_values_from(const ParameterStore& other) {
    for (auto& e : entries_) {
      const std::size_t j = other.index_of(e.name);
      detail::require(other.value(j).rows() == e.value.rows() && other.value(j).cols() == e.value.cols(),
                      "copy_values_from: shape mismatch for '" + e.name + "'");
      e.value = other.value(j);
    }
  }

  /// FNV-1a over the raw bytes of every value, in registration order.
  [[nodiscard]] std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& e : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(e.value.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(e.value.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
  };

  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
//   TCRM-CKPT-1
//   seed <u64>
//   meta <key> <value>          (zero or more)
//   param <name> <rows> <cols>
//   <rows*cols hex-float values, row-major, whitespace separated>
//   ...
//   end
//
// Hex floats make the round trip bit-exact.

inline constexpr const char* kCheckpointMagic = "TCRM-CKPT-1";

struct Checkpoint {
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;
  struct Tensor {
    std::string name;
    Matrix value;
  };
  std::vector<Tensor> tensors;
};

inline void save_checkpoint(const std::string& path, const ParameterStore& store,
                            const std::map<std::string, std::string>& meta = {}) {
  std::ofstream out(path);
  if (!out) {
    throw MissingArtifact("cannot open checkpoint for writing: " + path);
  }
  out << kCheckpointMagic << '\n' << "seed " << store.seed() << '\n';
  for (const auto& [k, v] : meta) {
    out << "meta " << k << ' ' << v << '\n';
  }
  char buf[64];
  for (std::size_t i = 0; i < store.count(); ++i) {
    const Matrix& m = store.value(i);
    out << "param " << store.name(i) << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%a", m.data()[k]);
      out << buf << ((k + 1) % m.cols() == 0 ? '\n' : ' ');
    }
  }
  out << "end\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw MissingArtifact("checkpoint not found: " + path);
  }
  std::string word;
  in >> word;
  if (word != kCheckpointMagic) {
    throw InvalidInput("not a checkpoint (bad magic): " + path);
  }
  Checkpoint ck;
  while (in >> word) {
    if (word == "seed") {
      in >> ck.seed;
    } else if (word == "meta") {
      std::string k;
      std::string v;
      in >> k;
      std::getline(in >> std::ws, v);
      ck.meta[k] = v;
    } else if (word == "param") {
      Checkpoint::Tensor t;
      Eigen::Index rows = 0;
      Eigen::Index cols = 0;
      in >> t.name >> rows >> cols;
      if (!in || rows <= 0 || cols <= 0) {
        throw InvalidInput("corrupt checkpoint header in " + path);
      }
      t.value.resize(rows, cols);
      std::string tok;
      for (Eigen::Index k = 0; k < t.value.size(); ++k) {
        if (!(in >> tok)) {
          throw InvalidInput("truncated checkpoint: " + path);
        }
        t.value.data()[k] = std::strtod(tok.c_str(), nullptr);
      }
      ck.tensors.push_back(std::move(t));
    } else if (word == "end") {
      return ck;
    } else {
      throw InvalidInput("unexpected token '" + word + "' in checkpoint " + path);
    }
  }
  throw InvalidInput("checkpoint missing end marker: " + path);
}

/// Overwrites the values of `store` from a loaded checkpoint; every parameter
/// must be present with a matching shape.
inline void restore(ParameterStore& store, const Checkpoint& ck) {
  std::unordered_map<std::string, const Matrix*> by_name;
  for (const auto& t : ck.tensors) {
    by_name[t.name] = &t.value;
  }
  for (std::size_t i = 0; i < store.count(); ++i) {
    auto it = by_name.find(store.name(i));
    if (it == by_name.end()) {
      throw InvalidInput("checkpoint lacks parameter '" + store.name(i) + "'");
    }
    if (it->second->rows() != store.value(i).rows() || it->second->cols() != store.value(i).cols()) {
      throw InvalidInput("checkpoint shape mismatch for '" + store.name(i) + "'");
    }
    store.value(i) = *it->second;
  }
}

}  // namespace tcrm
