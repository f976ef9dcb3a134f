#include "irt/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "irt/errors.hpp"

namespace irt {

void ConfusionMatrix::add(int truth, int prediction, std::uint64_t count) {
  if (truth < 0 || prediction < 0 || static_cast<std::size_t>(truth) >= n_ ||
      static_cast<std::size_t>(prediction) >= n_) {
    fail(ErrorCode::kDomain, "confusion matrix: class outside [0, " + std::to_string(n_) + ")");
  }
  counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(prediction)] += count;
}

void ConfusionMatrix::add(const std::vector<int>& truth, const std::vector<int>& prediction) {
  if (truth.size() != prediction.size()) fail(ErrorCode::kDimension, "confusion matrix: size mismatch");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], prediction[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) fail(ErrorCode::kDimension, "confusion matrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

MiouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) fail(ErrorCode::kContract, "miou: empty confusion matrix");
  const std::size_t n = cm.num_classes();
  MiouResult r;
  r.per_class.assign(n, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fn += cm.at(c, o);
      fp += cm.at(o, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.per_class[c];
    ++present;
  }
  r.mean = sum / static_cast<double>(present);
  return r;
}

double psnr(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size() || pred.empty()) {
    fail(ErrorCode::kDimension, "psnr: image sizes differ");
  }
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) se += (pred[i] - target[i]) * (pred[i] - target[i]);
  const double mse = se / static_cast<double>(pred.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

}  // namespace irt
