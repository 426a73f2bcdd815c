#pragma once

#include <cstdint>
#include <vector>

#include "magic/tensor.hpp"

namespace magic {

// A rectangular mini-batch: `size` instances, each with `objects` candidate
// objects of `views` views, plus `tokens` language tokens. Feature rows are
// stored flat ([size*objects*views, dim] and [size*tokens, dim]); padding and
// augmentation masks are folded into the validity vectors.
template <typename T>
struct Batch {
  std::size_t size = 0;
  std::size_t objects = 0;
  std::size_t views = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  Tensor<T> view_feats;
  std::vector<std::uint8_t> view_valid;
  Tensor<T> lang_feats;
  std::vector<std::uint8_t> lang_valid;
  std::vector<std::uint32_t> targets;
  std::vector<std::uint8_t> kinds;  // 1 = visual, 0 = blind

  bool consistent() const {
    return view_feats.rows() == size * objects * views && view_feats.cols() == dim &&
           lang_feats.rows() == size * tokens && lang_feats.cols() == dim &&
           view_valid.size() == size * objects * views && lang_valid.size() == size * tokens &&
           targets.size() == size;
  }
};

}  // namespace magic
