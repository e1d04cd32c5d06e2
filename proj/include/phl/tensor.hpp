#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace phl {

using Index = Eigen::Index;

/// Dense float64 matrix; the carrier of all numerics in the lab.
using Tensor = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes or sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, rank deficiency, or other numerical breakdown.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or precondition on user-supplied settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable input files.
class FormatError : public Error {
 public:
  using Error::Error;
};

std::string shape_string(const Tensor& t);

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

// PHT1 format: "PHT1", u32 rows, u32 cols, rows*cols f64, all little-endian,
// values in row-major order.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// FNV-1a over the raw bytes of the values (and the shape).
std::uint64_t checksum(const Tensor& t, std::uint64_t seed = 14695981039346656037ull);

}  // namespace phl
