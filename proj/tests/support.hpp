#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "ragner/rng.hpp"
#include "ragner/tensor.hpp"
#include "ragner/utf8.hpp"

namespace ragner::testing {

inline std::u32string u32(std::string_view s) { return utf8::decode(s); }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this));
    path_ = std::filesystem::temp_directory_path() / ("ragner-" + tag + "-" + std::to_string(rng.next() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

// Compares an analytic gradient against central differences of `loss`
// for every entry of `param`; the relative error's denominator is floored at
// `scale_floor`. Returns the worst relative error.
inline double max_gradient_error(Matrix& param, const Matrix& analytic, const std::function<double()>& loss,
                                 double step = 1e-5, double scale_floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.rows(); ++i) {
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
      const double saved = param(i, j);
      param(i, j) = saved + step;
      const double up = loss();
      param(i, j) = saved - step;
      const double down = loss();
      param(i, j) = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic(i, j);
      const double scale = std::max({std::abs(a), std::abs(numeric), scale_floor});
      worst = std::max(worst, std::abs(a - numeric) / scale);
    }
  }
  return worst;
}

}  // namespace ragner::testing
