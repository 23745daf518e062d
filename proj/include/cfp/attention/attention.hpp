// Copyright (c) 2026 The cfpformer Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cfp/attention/decay_mask.hpp"
#include "cfp/core/error.hpp"
#include "cfp/core/ops.hpp"
#include "cfp/core/rng.hpp"
#include "cfp/nn/layers.hpp"

namespace cfp {

enum class AttentionVariant { axial_gaussian, full_gaussian, mhsa };

inline const char* to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::axial_gaussian: return "axial_gaussian";
    case AttentionVariant::full_gaussian: return "full_gaussian";
    case AttentionVariant::mhsa: return "mhsa";
  }
  return "?";
}

inline AttentionVariant parse_attention_variant(const std::string& s) {
  if (s == "axial_gaussian") return AttentionVariant::axial_gaussian;
  if (s == "full_gaussian") return AttentionVariant::full_gaussian;
  if (s == "mhsa") return AttentionVariant::mhsa;
  throw ConfigError("unknown attention variant '" + s + "' (expected axial_gaussian|full_gaussian|mhsa)");
}

inline const char* to_string(SoftmaxBase b) { return b == SoftmaxBase::two ? "two" : "natural"; }

inline SoftmaxBase parse_softmax_base(const std::string& s) {
  if (s == "two") return SoftmaxBase::two;
  if (s == "natural") return SoftmaxBase::natural;
  throw ConfigError("unknown softmax base '" + s + "' (expected two|natural)");
}

struct AttentionConfig {
  std::size_t embed_dim = 0;
  std::size_t num_heads = 1;
  AttentionVariant variant = AttentionVariant::axial_gaussian;
  MaskFamily family = MaskFamily::gaussian;
  SoftmaxBase base = SoftmaxBase::two;
  std::size_t lepe_kernel = 3;
  double sigma_init = 0.0;  // gaussian only; 0 selects max(H, W) / 4

  std::size_t head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("attention: embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    if (lepe_kernel % 2 == 0) throw ConfigError("attention: lepe kernel must be odd");
    if (!(sigma_init >= 0.0) || !std::isfinite(sigma_init)) throw ConfigError("attention: sigma_init must be >= 0");
  }
};

/// Number of mask-modulated score entries computed, per image and per head.
struct AttentionStats {
  std::uint64_t score_entries = 0;
};

/// Optional locally-enhanced positional encoding: depthwise conv over v.
template <typename T>
struct Lepe {
  Tensor<T> kernel;  // [D, k, k]
  Tensor<T> bias;    // [D]
  bool enabled() const { return kernel.defined(); }
};

namespace detail {

template <typename T>
void check_scores_finite(const Tensor<T>& scores, const char* pass) {
  for (T v : scores.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite attention score in ") + pass);
  }
}

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, const char* op) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError(std::string(op) + ": q/k/v must share a [B,H,W,D] shape, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (heads == 0 || q.dim(3) % heads != 0) {
    throw DimensionError(std::string(op) + ": width " + std::to_string(q.dim(3)) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> add_lepe(const Tensor<T>& out, const Tensor<T>& v, const Lepe<T>& lepe) {
  if (!lepe.enabled()) return out;
  return add(out, depthwise_conv2d_nhwc(v, lepe.kernel, lepe.bias));
}

// [B,H,W,D] -> [B,H,W,heads,dk], optionally pre-scaled by 1/sqrt(dk)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads, bool scaled) {
  const std::size_t dk = x.dim(3) / heads;
  auto y = reshape(x, {x.dim(0), x.dim(1), x.dim(2), heads, dk});
  return scaled ? scale(y, T(1) / std::sqrt(static_cast<T>(dk))) : y;
}

// q, k, v: [B, N, heads, dk] -> attention over N with an optional [heads, N, N] mask
template <typename T>
Tensor<T> token_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>* mask,
                          SoftmaxBase base, const char* pass) {
  auto qh = permute(q, {0, 2, 1, 3});
  auto kh = permute(k, {0, 2, 1, 3});
  auto vh = permute(v, {0, 2, 1, 3});
  auto scores = bmm(qh, kh, true);  // [B, heads, N, N]
  if (mask) scores = add_suffix(scores, *mask);
  check_scores_finite(scores, pass);
  auto weights = softmax_rows(scores, base);
  return permute(bmm(weights, vh), {0, 2, 1, 3});  // [B, N, heads, dk]
}

}  // namespace detail

/// Axially decomposed decay attention on a token grid.
///
/// q, k, v are [B, H, W, D] split into `heads` heads. A row pass attends
/// along W within each row using `mask_w` [heads, W, W]; a column pass then
/// attends along H within each column using `mask_h` [heads, H, H], with
/// the row-pass output as its values. Masks are log-domain and added to the
/// scaled scores before the softmax. The depthwise LePE over v is added to
/// the result. Output is [B, H, W, D].
template <typename T>
Tensor<T> axial_gaussian_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mask_h,
                                   const Tensor<T>& mask_w, std::size_t heads, SoftmaxBase base, const Lepe<T>& lepe,
                                   AttentionStats* stats = nullptr) {
  detail::check_qkv(q, k, v, heads, "axial_gaussian_attention");
  const std::size_t batch = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3), dk = d / heads;
  const Shape want_h{heads, h, h}, want_w{heads, w, w};
  if (mask_h.shape() != want_h || mask_w.shape() != want_w) {
    throw DimensionError("axial_gaussian_attention: masks " + shape_str(mask_h.shape()) + "/" +
                         shape_str(mask_w.shape()) + " do not match grid " + std::to_string(h) + "x" +
                         std::to_string(w) + " with " + std::to_string(heads) + " heads");
  }
  auto q5 = detail::split_heads(q, heads, true);
  auto k5 = detail::split_heads(k, heads, false);
  auto v5 = detail::split_heads(v, heads, false);

  // row pass: [B, H, heads, W, dk]
  auto qr = permute(q5, {0, 1, 3, 2, 4});
  auto kr = permute(k5, {0, 1, 3, 2, 4});
  auto vr = permute(v5, {0, 1, 3, 2, 4});
  auto row_scores = add_suffix(bmm(qr, kr, true), mask_w);
  detail::check_scores_finite(row_scores, "row pass");
  auto v_rows = bmm(softmax_rows(row_scores, base), vr);  // [B, H, heads, W, dk]

  // column pass: [B, W, heads, H, dk]
  auto qc = permute(q5, {0, 2, 3, 1, 4});
  auto kc = permute(k5, {0, 2, 3, 1, 4});
  auto vc = permute(v_rows, {0, 3, 2, 1, 4});
  auto col_scores = add_suffix(bmm(qc, kc, true), mask_h);
  detail::check_scores_finite(col_scores, "column pass");
  auto cols = bmm(softmax_rows(col_scores, base), vc);  // [B, W, heads, H, dk]

  if (stats) stats->score_entries += h * w * w + w * h * h;
  auto out = reshape(permute(cols, {0, 3, 1, 2, 4}), {batch, h, w, d});
  (void)dk;
  return detail::add_lepe(out, v, lepe);
}

/// Reference (non-axial) decay attention over all H*W tokens with a
/// [heads, HW, HW] log-domain mask; same conventions as the axial op.
template <typename T>
Tensor<T> full_gaussian_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mask2d,
                                  std::size_t heads, SoftmaxBase base, const Lepe<T>& lepe,
                                  AttentionStats* stats = nullptr) {
  detail::check_qkv(q, k, v, heads, "full_gaussian_attention");
  const std::size_t batch = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3), n = h * w;
  if (mask2d.shape() != Shape{heads, n, n}) {
    throw DimensionError("full_gaussian_attention: mask " + shape_str(mask2d.shape()) + " does not match " +
                         std::to_string(n) + " tokens with " + std::to_string(heads) + " heads");
  }
  const std::size_t dk = d / heads;
  auto q4 = reshape(detail::split_heads(q, heads, true), {batch, n, heads, dk});
  auto k4 = reshape(k, {batch, n, heads, dk});
  auto v4 = reshape(v, {batch, n, heads, dk});
  auto out = detail::token_attention(q4, k4, v4, &mask2d, base, "full attention");
  if (stats) stats->score_entries += n * n;
  return detail::add_lepe(reshape(out, {batch, h, w, d}), v, lepe);
}

/// Plain multi-head self-attention over all tokens: natural softmax, no
/// decay, no positional term.
template <typename T>
Tensor<T> mhsa_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                         AttentionStats* stats = nullptr) {
  detail::check_qkv(q, k, v, heads, "mhsa_attention");
  const std::size_t batch = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3), n = h * w, dk = d / heads;
  auto q4 = reshape(detail::split_heads(q, heads, true), {batch, n, heads, dk});
  auto k4 = reshape(k, {batch, n, heads, dk});
  auto v4 = reshape(v, {batch, n, heads, dk});
  auto out = detail::token_attention<T>(q4, k4, v4, nullptr, SoftmaxBase::natural, "mhsa");
  if (stats) stats->score_entries += n * n;
  return reshape(out, {batch, h, w, d});
}

/// Attention unit: q/k/v projections, optional encoder fusion into k and v,
/// the configured attention variant, and an output projection.
template <typename T>
class AttentionUnit {
 public:
  AttentionUnit() = default;

  /// `grid_h`/`grid_w` is the token grid the unit is built for; it seeds the
  /// initial sigma = max(H, W) / 4 unless the config fixes sigma_init.
  AttentionUnit(AttentionConfig cfg, std::size_t grid_h, std::size_t grid_w, Rng rng)
      : cfg_(cfg), cache_(std::make_shared<MaskCache<T>>()) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    q_ = nn::Linear<T>(d, d, rng.split(1));
    k_ = nn::Linear<T>(d, d, rng.split(2));
    v_ = nn::Linear<T>(d, d, rng.split(3));
    proj_ = nn::Linear<T>(d, d, rng.split(4));
    if (cfg_.variant != AttentionVariant::mhsa) {
      lepe_.kernel = nn::zeros_param<T>({d, cfg_.lepe_kernel, cfg_.lepe_kernel});
      lepe_.bias = nn::zeros_param<T>({d});
      if (cfg_.family == MaskFamily::gaussian) {
        const double init = cfg_.sigma_init > 0.0
                                ? cfg_.sigma_init
                                : std::max<double>(1.0, static_cast<double>(std::max(grid_h, grid_w))) / 4.0;
        sigma_ = Tensor<T>::full({cfg_.num_heads}, static_cast<T>(init), true);
      } else {
        gammas_ = default_gammas(cfg_.num_heads);
      }
    }
  }

  const AttentionConfig& config() const { return cfg_; }
  const Tensor<T>& sigma() const { return sigma_; }
  const Lepe<T>& lepe() const { return lepe_; }
  const nn::Linear<T>& q_proj() const { return q_; }
  const nn::Linear<T>& k_proj() const { return k_; }
  const nn::Linear<T>& v_proj() const { return v_; }
  const nn::Linear<T>& out_proj() const { return proj_; }

  /// x: [B, H, W, D]; `encoder_tokens`, when given, is the re-encoded
  /// encoder feature [B, H, W, D] added to k and v (never q).
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* encoder_tokens = nullptr,
                    AttentionStats* stats = nullptr) const {
    if (x.rank() != 4 || x.dim(3) != cfg_.embed_dim) {
      throw DimensionError("attention unit: expected [B,H,W," + std::to_string(cfg_.embed_dim) + "], got " +
                           shape_str(x.shape()));
    }
    auto q = q_(x);
    auto k = k_(x);
    auto v = v_(x);
    if (encoder_tokens) {
      if (encoder_tokens->shape() != x.shape()) {
        throw DimensionError("attention unit: encoder tokens " + shape_str(encoder_tokens->shape()) +
                             " do not match " + shape_str(x.shape()));
      }
      k = add(k, *encoder_tokens);
      v = add(v, *encoder_tokens);
    }
    const std::size_t h = x.dim(1), w = x.dim(2), heads = cfg_.num_heads;
    Tensor<T> out;
    switch (cfg_.variant) {
      case AttentionVariant::axial_gaussian:
        out = axial_gaussian_attention(q, k, v, axis_mask(h), axis_mask(w), heads, cfg_.base, lepe_, stats);
        break;
      case AttentionVariant::full_gaussian:
        out = full_gaussian_attention(q, k, v, grid_mask(h, w), heads, cfg_.base, lepe_, stats);
        break;
      case AttentionVariant::mhsa:
        out = mhsa_attention(q, k, v, heads, stats);
        break;
    }
    return proj_(out);
  }

  /// Keeps sigma inside its valid range after an optimizer step and drops
  /// masks cached for the old value.
  void after_step() {
    if (sigma_.defined()) {
      for (auto& s : sigma_.mutable_data()) s = std::max(s, static_cast<T>(1e-3));
    }
    cache_->invalidate();
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    q_.collect(out, nn::join(prefix, "q"));
    k_.collect(out, nn::join(prefix, "k"));
    v_.collect(out, nn::join(prefix, "v"));
    proj_.collect(out, nn::join(prefix, "proj"));
    if (lepe_.enabled()) {
      out.emplace_back(nn::join(prefix, "lepe.kernel"), lepe_.kernel);
      out.emplace_back(nn::join(prefix, "lepe.bias"), lepe_.bias);
    }
    if (sigma_.defined()) out.emplace_back(nn::join(prefix, "sigma"), sigma_);
  }

  /// Current per-head decay parameters (sigma or gamma).
  std::vector<double> decay_params() const {
    if (sigma_.defined()) return {sigma_.data().begin(), sigma_.data().end()};
    return gammas_;
  }

 private:
  bool tracking_sigma() const { return sigma_.defined() && grad_enabled() && sigma_.requires_grad(); }

  std::vector<T> snapshot() const {
    if (sigma_.defined()) return {sigma_.data().begin(), sigma_.data().end()};
    return {gammas_.begin(), gammas_.end()};
  }

  Tensor<T> axis_mask(std::size_t n) const {
    if (cfg_.family == MaskFamily::gaussian) {
      auto dist = cache_->axis_sq_dist(n);
      if (tracking_sigma()) return gaussian_log_mask(sigma_, dist, {n, n});
      return cache_->cached({0, n, n}, snapshot(), [&] {
        NoGradGuard guard;
        return gaussian_log_mask(sigma_, dist, {n, n});
      });
    }
    return cache_->cached({0, n, n}, snapshot(), [&] { return make_decay_mask<T>(n, n, cfg_.family, gammas_).mask_h; });
  }

  Tensor<T> grid_mask(std::size_t h, std::size_t w) const {
    if (cfg_.family == MaskFamily::gaussian) {
      auto dist = cache_->grid_sq_dist(h, w);
      if (tracking_sigma()) return gaussian_log_mask(sigma_, dist, {h * w, h * w});
      return cache_->cached({1, h, w}, snapshot(), [&] {
        NoGradGuard guard;
        return gaussian_log_mask(sigma_, dist, {h * w, h * w});
      });
    }
    return cache_->cached({1, h, w}, snapshot(), [&] { return make_grid_mask<T>(h, w, cfg_.family, gammas_); });
  }

  AttentionConfig cfg_;
  nn::Linear<T> q_, k_, v_, proj_;
  Lepe<T> lepe_;
  Tensor<T> sigma_;
  std::vector<double> gammas_;
  std::shared_ptr<MaskCache<T>> cache_;
};

}  // namespace cfp
