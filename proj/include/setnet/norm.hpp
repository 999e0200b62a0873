#pragma once

#include <cstdint>
#include <string>

#include "setnet/setbatch.hpp"
#include "setnet/tape.hpp"

namespace setnet {

// Which of the (batch, element, feature) axes carry separate statistics
// (for standardization) or separate learned parameters (for transformation).
struct NormSetting {
  bool n = false;
  bool m = false;
  bool d = false;

  static constexpr NormSetting none() { return {false, false, false}; }
  static constexpr NormSetting over_n() { return {true, false, false}; }
  static constexpr NormSetting over_m() { return {false, true, false}; }
  static constexpr NormSetting over_d() { return {false, false, true}; }
  static constexpr NormSetting over_nm() { return {true, true, false}; }

  bool operator==(const NormSetting&) const = default;
  std::string str() const {
    std::string s = "{";
    if (n) s += "N";
    if (m) s += s.size() > 1 ? ",M" : "M";
    if (d) s += s.size() > 1 ? ",D" : "D";
    return s + "}";
  }
};

// ---- plain SetBatch operations (no autodiff) ---------------------------

// (a - mu)/(sigma + eps) with population statistics per group; the group
// index runs over the dims in `setting`, statistics are taken over the
// remaining dims restricted to valid elements. Padded positions stay 0.
SetBatch standardize(const SetBatch& a, NormSetting setting, double eps);

// a * gamma + beta with parameters indexed by the dims in `setting` and
// repeated over the rest. gamma/beta shapes: one entry per point of the
// cross-product of the dims in the setting (scalars for the empty setting).
SetBatch transform(const SetBatch& a, NormSetting setting,
                   const Tensor& gamma, const Tensor& beta);

struct TransformCertificate {
  bool equivariant = false;     // commutes with element permutations
  bool batch_agnostic = false;  // commutes with set permutations
};

// Randomized counterexample search over `trials` draws with distinct
// parameter values along each dim of the setting.
TransformCertificate certify_transform_setting(NormSetting setting,
                                               uint64_t seed, int trials = 32);

// ---- differentiable norm layers ----------------------------------------

enum class NormKind { None, Layer, Set, Feature };

const char* norm_kind_name(NormKind k);

// One normalization layer: standardize over a setting, transform with
// per-feature gamma/beta. Layer norm uses S={N,M}, set norm S={N},
// feature norm S={D} with running statistics for eval mode.
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, int64_t features, double eps = 1e-5);

  NormKind kind() const { return kind_; }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  const Tensor& gamma() const { return gamma_; }
  const Tensor& beta() const { return beta_; }
  double eps() const { return eps_; }

  // Applies the norm inside an autodiff graph. gamma/beta enter as the
  // given leaf vars (so the caller controls parameter ids). Feature norm
  // updates running statistics when train is true and requires at least
  // one completed train step before eval.
  ad::Var apply(ad::Var x, ad::Var gamma, ad::Var beta, const Mask* mask,
                bool train);

  // Forward-only convenience on a SetBatch (used by checks).
  SetBatch apply_batch(const SetBatch& a, bool train);

  bool has_running_stats() const { return steps_seen_ > 0; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  void set_running_stats(Tensor mean, Tensor var, int64_t steps);
  int64_t steps_seen() const { return steps_seen_; }
  double momentum() const { return momentum_; }

 private:
  NormKind kind_ = NormKind::None;
  int64_t features_ = 0;
  double eps_ = 1e-5;
  Tensor gamma_, beta_;
  // feature-norm state
  Tensor running_mean_, running_var_;
  double momentum_ = 0.1;
  int64_t steps_seen_ = 0;
};

// Fused standardize+transform autodiff node over setting S with per-feature
// parameters; exposed for the layer implementations and tests.
ad::Var standardize_affine(ad::Var x, ad::Var gamma, ad::Var beta,
                           NormSetting setting, const Mask* mask, double eps,
                           NormLayer* running_update = nullptr);

}  // namespace setnet
