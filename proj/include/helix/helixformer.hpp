#pragma once

#include <string>
#include <utility>

#include "helix/ops.hpp"
#include "helix/params.hpp"

namespace helix {

/// Fig.-3 taxonomy of cross-attention flow between the two branches.
enum class Variant { QtoS, StoQ, AsymSQ, AsymQS, Symmetric };

enum class EmbedKind { Conv, Fc };

struct HelixConfig {
  int channels = 64;
  int heads = 2;
  Variant variant = Variant::Symmetric;
  EmbedKind embed = EmbedKind::Conv;
  bool rep = true;  // representation enhancement; off feeds the relation maps straight through
  int stack = 1;    // number of composed layers; 0 is the identity (pure baseline)
};

Variant parse_variant(const std::string& s);
std::string variant_name(Variant v);

/// Raw attention scores between the to-be-enhanced branch's query vectors and
/// the other branch's key vectors: E_self K_other^T. Row i indexes the self
/// branch token i so the resulting relation map aligns spatially with the
/// feature it masks.
Tensor attention_scores(const Tensor& e_self, const Tensor& k_other);

/// Cross-image semantic relation map from scores: softmax over the other
/// branch's tokens with 1/sqrt(d) scaling, then blended value rows.
/// d is the per-head channel width.
Tensor csrm_from_scores(const Tensor& scores, const Tensor& v_other, int d);

/// Multi-head relation map: channels split into `heads` groups, attention run
/// per head with scaling sqrt(C/heads), head outputs re-concatenated.
Tensor multi_head_csrm(const Tensor& e_self, const Tensor& k_other, const Tensor& v_other,
                       int heads);

/// Cross-attention layer pair: token embedding, bidirectional relation mining,
/// and branch-local representation enhancement. Parameters live in a ParamSet
/// under a prefix; only the stacks the configured variant uses are created.
class HelixFormer {
 public:
  HelixFormer() = default;
  HelixFormer(ParamSet& ps, std::string prefix, const HelixConfig& cfg, Rng* rng);

  /// Full forward through the configured stack and variant.
  std::pair<Tensor, Tensor> forward(const Tensor& f_s, const Tensor& f_q, bool training) const;

  /// Every (query, prototype) pair through the stack, with each embedding
  /// stack applied to its branch's inputs as one batch so that batch-norm
  /// statistics pool across the whole episode instead of a single feature
  /// map. Returns the enhanced (support, query) pair at index q * n + c.
  /// In eval mode each pair matches forward() on that pair.
  std::vector<std::pair<Tensor, Tensor>> forward_episode(const std::vector<Tensor>& protos,
                                                         const std::vector<Tensor>& queries,
                                                         bool training) const;

  /// One embedding stack ('S'/'Q' branch, role 'e'/'k'/'v') of layer `layer`,
  /// flattened to an HWxC token matrix.
  Tensor embed_tokens(const Tensor& f, int layer, char branch, char role, bool training) const;

  /// Both relation maps of layer `layer`, each HWxC: (R_QS enhancing the
  /// support branch, R_SQ enhancing the query branch). The two directions are
  /// computed from the same inputs with no sequential dependence.
  std::pair<Tensor, Tensor> rmp_forward(const Tensor& f_s, const Tensor& f_q, int layer,
                                        bool training) const;

  /// f_hat = MLP(Norm(f ⊙ R)) for one branch; with enhancement disabled the
  /// reshaped relation map itself is returned.
  Tensor rep_enhance(const Tensor& f, const Tensor& relation_map, int layer, char branch,
                     bool training) const;

  const HelixConfig& config() const { return cfg_; }

 private:
  std::pair<Tensor, Tensor> forward_layer(const Tensor& f_s, const Tensor& f_q, int layer,
                                          Variant v, bool training) const;

  /// embed_tokens over a list of feature maps as one batched convolution.
  std::vector<Tensor> embed_tokens_batch(const std::vector<Tensor>& fs, int layer, char branch,
                                         char role, bool training) const;

  ParamSet* ps_ = nullptr;
  std::string prefix_;
  HelixConfig cfg_;
};

}  // namespace helix
