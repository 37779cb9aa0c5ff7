#include "halos/losses.hpp"

#include <stdexcept>
#include <string>

namespace halos {

ClfClassWeights class_ratio_weights(const std::vector<ExistenceVector>& training_labels) {
  if (training_labels.empty()) throw std::invalid_argument("class_ratio_weights: no training labels");
  const auto& organs = training_labels.front().organs();
  ClfClassWeights w;
  for (std::size_t o = 0; o < organs.size(); ++o) {
    std::size_t present = 0, absent = 0;
    for (const auto& e : training_labels) (e.flags()[o] ? present : absent) += 1;
    if (absent == 0 || present == 0) {
      throw std::invalid_argument("classifier class '" + std::string(absent == 0 ? "absent" : "present") +
                                  "' has no training samples for organ '" + organs[o] +
                                  "'; add such image-level records or disable the classifier");
    }
    w.present.push_back(1.0);
    w.absent.push_back(static_cast<double>(present) / static_cast<double>(absent));
  }
  return w;
}

}  // namespace halos
