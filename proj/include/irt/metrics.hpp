#pragma once

// Segmentation and reconstruction metrics.

#include <cstdint>
#include <vector>

namespace irt {

// Rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : n_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(int truth, int prediction, std::uint64_t count = 1);
  void add(const std::vector<int>& truth, const std::vector<int>& prediction);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t prediction) const {
    return counts_[truth * n_ + prediction];
  }
  std::uint64_t total() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  double mean = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from truth and prediction
};

// Classes absent from both truth and prediction are excluded from the mean.
// Throws kContract on an empty matrix.
MiouResult miou(const ConfusionMatrix& cm);

inline constexpr double kPsnrCap = 99.0;

// 10 log10(1 / MSE) on [0, 1] intensities; identical inputs give kPsnrCap.
double psnr(const std::vector<double>& pred, const std::vector<double>& target);

}  // namespace irt
