#include "c2l/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "c2l/error.hpp"

namespace c2l {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config error";
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Integrity: return "integrity error";
    case ErrorKind::MissingArtifact: return "missing artifact";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire-style rejection to avoid modulo bias.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  require(!is.fail(), ErrorKind::Io, "malformed RNG state");
}

}  // namespace c2l
