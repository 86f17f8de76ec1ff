#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include <Eigen/Dense>

#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline std::span<double> as_span(RowMatrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> as_span(const RowMatrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
std::uint64_t hash_values(const Eigen::DenseBase<Derived>& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto& d = m.derived();
  return fnv1a_bytes(d.data(), static_cast<std::size_t>(d.size()) * sizeof(double), h);
}

// Uniform in [-scale, scale].
inline void fill_uniform(std::span<double> out, double scale, Rng& rng) {
  for (double& x : out) x = rng.uniform(-scale, scale);
}

inline void write_matrix(BinaryWriter& w, const RowMatrix& m) {
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  w.f64s(m.data(), static_cast<std::size_t>(m.size()));
}

inline RowMatrix read_matrix(BinaryReader& r) {
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw DataError("corrupt matrix header");
  RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  r.f64s(m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

inline void write_vector(BinaryWriter& w, const Vector& v) {
  w.u64(static_cast<std::uint64_t>(v.size()));
  w.f64s(v.data(), static_cast<std::size_t>(v.size()));
}

inline Vector read_vector(BinaryReader& r) {
  const std::uint64_t n = r.u64();
  if (n > (1ULL << 32)) throw DataError("corrupt vector header");
  Vector v(static_cast<Eigen::Index>(n));
  r.f64s(v.data(), static_cast<std::size_t>(n));
  return v;
}

}  // namespace pvsent
