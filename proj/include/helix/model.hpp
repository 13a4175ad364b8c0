#pragma once

#include <array>
#include <string>
#include <vector>

#include "helix/ops.hpp"
#include "helix/params.hpp"

namespace helix {

struct Conv4Config {
  int in_channels = 3;
  int width = 64;
  // Pooling after each of the four blocks; all four map 84x84 down to 5x5.
  std::array<bool, 4> pool{true, true, true, true};
};

/// Four conv(3x3, no bias) + BN + relu blocks with optional 2x2 max pooling.
class Conv4Backbone {
 public:
  Conv4Backbone() = default;
  /// Binds to params under `prefix`, creating them when absent (rng required
  /// for creation).
  Conv4Backbone(ParamSet& ps, std::string prefix, const Conv4Config& cfg, Rng* rng);

  /// (3,H,W) or (N,3,H,W) -> (C,H',W') or (N,C,H',W').
  Tensor forward(const Tensor& image, bool training) const;

  const Conv4Config& config() const { return cfg_; }

 private:
  ParamSet* ps_ = nullptr;
  std::string prefix_;
  Conv4Config cfg_;
};

/// Relation head H: two conv-BN-relu blocks over the channel-concatenated
/// feature pair, one 2x2 pool, global average pooling, then two
/// fully-connected layers producing one relation score.
class RelationHead {
 public:
  RelationHead() = default;
  RelationHead(ParamSet& ps, std::string prefix, int width, Rng* rng);

  /// Scalar score for one concatenated pair (2C,H,W); batched input (N,2C,H,W)
  /// yields (N) scores.
  Tensor forward(const Tensor& pair, bool training) const;

  /// Score for a (support, query) feature pair; concat order is [f_S, f_Q].
  Tensor relation_score(const Tensor& fs_hat, const Tensor& fq_hat, bool training) const;

 private:
  ParamSet* ps_ = nullptr;
  std::string prefix_;
  int width_ = 0;
};

}  // namespace helix
