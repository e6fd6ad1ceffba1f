#include "neudye/integrators.hpp"

namespace neudye {

void TimeGrid::validate() const {
  if (!(h > 0.0)) throw Error(ErrorKind::Config, "time step must be positive");
  if (!(tn > t0)) throw Error(ErrorKind::Config, "time grid end must follow its start");
  const double n = (tn - t0) / h;
  if (std::abs(n - std::round(n)) > 1e-6) throw Error(ErrorKind::Config, "time span is not a multiple of the step");
}

Index TimeGrid::index_of(double t) const {
  const double r = (t - t0) / h;
  const double i = std::round(r);
  if (std::abs(r - i) > 1e-6 || i < 0 || static_cast<Index>(i) > steps())
    throw Error(ErrorKind::Config, "event time " + std::to_string(t) + " is not on the time grid");
  return static_cast<Index>(i);
}

}  // namespace neudye
