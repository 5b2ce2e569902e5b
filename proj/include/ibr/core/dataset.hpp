#pragma once

#include <string>
#include <vector>

#include "ibr/core/tensor.hpp"

namespace ibr {

/// Images [N,C,H,W] with pixel values in [0,1] and integer labels.
template <typename S>
struct Dataset {
  std::string name;
  Tensor<S> images;
  std::vector<int> labels;
  int num_classes = 10;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index channels() const { return images.shape[1]; }
  Index height() const { return images.shape[2]; }
  Index width() const { return images.shape[3]; }

  // The first `count` samples in canonical order (all of them when count exceeds the size).
  Dataset head(Index count) const { return slice(0, std::min(count, size())); }

  Dataset slice(Index first, Index count) const {
    Dataset d{name, images.rows(first, count), {}, num_classes};
    d.labels.assign(labels.begin() + first, labels.begin() + first + count);
    return d;
  }

  Dataset gather(const std::vector<Index>& indices) const {
    Dataset d{name, gather_rows(images, indices), {}, num_classes};
    for (Index i : indices) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
    return d;
  }

  template <typename Other>
  Dataset<Other> cast() const {
    return Dataset<Other>{name, images.template cast<Other>(), labels, num_classes};
  }
};

}  // namespace ibr
