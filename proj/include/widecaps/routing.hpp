#pragma once

// Capsule nonlinearity, prediction vectors, and factorization-machine routing.
//
// Routing is single pass. For each output capsule j the n prediction vectors are
// L2-normalized, their pairwise element-wise products are summed in linear time via
//   H_j = 1/(2n) * ((sum_i u_i) ⊙ (sum_i u_i) - sum_i u_i ⊙ u_i),
// the agreement b_j is the component sum of H_j and the pose is H_j / ||H_j||.
// The modified variant turns agreements into a distribution with a softmax across
// output capsules; the original variant uses exp(b_j) per capsule.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "widecaps/ops.hpp"

namespace widecaps {

inline constexpr double kNormEpsilon = 1e-12;

enum class RoutingVariant { modified, original };

inline std::string to_string(RoutingVariant v) {
  return v == RoutingVariant::modified ? "modified" : "original";
}

inline RoutingVariant parse_routing_variant(const std::string& s) {
  if (s == "modified") return RoutingVariant::modified;
  if (s == "original") return RoutingVariant::original;
  throw ConfigError("unknown routing variant '" + s + "' (expected modified|original)");
}

/// (||s||² / (1 + ||s||²)) · s / ||s|| over the last axis, written as s·||s|| / (1 + ||s||²)
/// so the zero vector maps to zero without a division.
template <typename T>
Var<T> squash(Var<T> s) {
  const std::size_t k = s.value().last_extent();
  const std::size_t rows = s.value().size() / k;
  Tensor<T> out = s.value();
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq{0};
    for (std::size_t f = 0; f < k; ++f) sq += out[r * k + f] * out[r * k + f];
    const T n = std::sqrt(sq);
    norms[r] = n;
    const T factor = n / (T{1} + sq);
    for (std::size_t f = 0; f < k; ++f) out[r * k + f] *= factor;
  }
  return s.tape->record(
      std::move(out), {s}, [is = s.id, rows, k, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& x = t.value(is);
        auto& gx = t.grad_buffer(is);
        const T eps = static_cast<T>(kNormEpsilon);
        for (std::size_t r = 0; r < rows; ++r) {
          const T n = norms[r];
          const T sq = n * n;
          const T factor = n / (T{1} + sq);
          // d factor / d n
          const T dfactor = (T{1} - sq) / ((T{1} + sq) * (T{1} + sq));
          T dot{0};
          for (std::size_t f = 0; f < k; ++f) dot += g[r * k + f] * x[r * k + f];
          for (std::size_t f = 0; f < k; ++f) {
            gx[r * k + f] += factor * g[r * k + f];
            if (n > eps) gx[r * k + f] += dot * dfactor * x[r * k + f] / n;
          }
        }
      });
}

/// Divides each last-axis row by max(||row||, 1e-12).
template <typename T>
Var<T> l2_normalize(Var<T> x) {
  const std::size_t k = x.value().last_extent();
  const std::size_t rows = x.value().size() / k;
  const T eps = static_cast<T>(kNormEpsilon);
  Tensor<T> out = x.value();
  std::vector<T> denom(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq{0};
    for (std::size_t f = 0; f < k; ++f) sq += out[r * k + f] * out[r * k + f];
    const T n = std::sqrt(sq);
    x.tape->note_branch(n > eps);
    denom[r] = n > eps ? n : eps;
    for (std::size_t f = 0; f < k; ++f) out[r * k + f] /= denom[r];
  }
  return x.tape->record(
      std::move(out), {x}, [ix = x.id, rows, k, eps, denom = std::move(denom)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& y = t.value(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          if (denom[r] <= eps) {
            for (std::size_t f = 0; f < k; ++f) gx[r * k + f] += g[r * k + f] / eps;
            continue;
          }
          T dot{0};
          for (std::size_t f = 0; f < k; ++f) dot += g[r * k + f] * y[r * k + f];
          for (std::size_t f = 0; f < k; ++f)
            gx[r * k + f] += (g[r * k + f] - y[r * k + f] * dot) / denom[r];
        }
      });
}

/// Unit vector along each last-axis row; rows with norm below 1e-12 become exactly zero.
template <typename T>
Var<T> pose(Var<T> h) {
  const std::size_t k = h.value().last_extent();
  const std::size_t rows = h.value().size() / k;
  const T eps = static_cast<T>(kNormEpsilon);
  Tensor<T> out = h.value();
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq{0};
    for (std::size_t f = 0; f < k; ++f) sq += out[r * k + f] * out[r * k + f];
    norms[r] = std::sqrt(sq);
    const bool live = norms[r] >= eps;
    h.tape->note_branch(live);
    for (std::size_t f = 0; f < k; ++f) out[r * k + f] = live ? out[r * k + f] / norms[r] : T{0};
  }
  return h.tape->record(
      std::move(out), {h}, [ih = h.id, rows, k, eps, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& y = t.value(self);
        auto& gh = t.grad_buffer(ih);
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] < eps) continue;
          T dot{0};
          for (std::size_t f = 0; f < k; ++f) dot += g[r * k + f] * y[r * k + f];
          for (std::size_t f = 0; f < k; ++f)
            gh[r * k + f] += (g[r * k + f] - y[r * k + f] * dot) / norms[r];
        }
      });
}

/// Prediction vectors û_{j|i} = u_i · W_{j,i}.
/// u: [n, k_in] or [N, n, k_in]; w: [J, n, k_in, k_out] -> [J, n, k_out] or [N, J, n, k_out].
template <typename T>
Var<T> predict(Var<T> u, Var<T> w) {
  const auto& us = u.shape();
  const auto& ws = w.shape();
  const bool batched = us.size() == 3;
  if ((us.size() != 2 && us.size() != 3) || ws.size() != 4) {
    throw DimensionError("predict: expected capsules [n,k_in] or [N,n,k_in] and weights "
                         "[J,n,k_in,k_out], got " + shape_string(us) + " and " + shape_string(ws));
  }
  const std::size_t batch = batched ? us[0] : 1;
  const std::size_t n = us[batched ? 1 : 0];
  const std::size_t kin = us.back();
  const std::size_t j = ws[0], kout = ws[3];
  if (ws[1] != n || ws[2] != kin) {
    throw DimensionError("predict: capsules " + shape_string(us) + " incompatible with weights " +
                         shape_string(ws));
  }
  Tensor<T> out(batched ? Shape{batch, j, n, kout} : Shape{j, n, kout});
  const T* uv = u.value().raw();
  const T* wv = w.value().raw();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < j; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        T* dst = out.raw() + ((b * j + c) * n + i) * kout;
        const T* src = uv + (b * n + i) * kin;
        const T* mat = wv + (c * n + i) * kin * kout;
        for (std::size_t p = 0; p < kin; ++p) {
          const T s = src[p];
          for (std::size_t o = 0; o < kout; ++o) dst[o] += s * mat[p * kout + o];
        }
      }
  return u.tape->record(
      std::move(out), {u, w}, [iu = u.id, iw = w.id, batch, j, n, kin, kout](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const T* uv = t.value(iu).raw();
        const T* wv = t.value(iw).raw();
        T* gu = t.requires_grad(iu) ? t.grad_buffer(iu).raw() : nullptr;
        T* gw = t.requires_grad(iw) ? t.grad_buffer(iw).raw() : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < j; ++c)
            for (std::size_t i = 0; i < n; ++i) {
              const T* go = g.raw() + ((b * j + c) * n + i) * kout;
              const T* src = uv + (b * n + i) * kin;
              const std::size_t moff = (c * n + i) * kin * kout;
              for (std::size_t p = 0; p < kin; ++p) {
                T acc{0};
                for (std::size_t o = 0; o < kout; ++o) {
                  acc += go[o] * wv[moff + p * kout + o];
                  if (gw) gw[moff + p * kout + o] += src[p] * go[o];
                }
                if (gu) gu[(b * n + i) * kin + p] += acc;
              }
            }
      });
}

/// Factorized pairwise interaction over axis -2: [..., n, k] -> [..., k].
/// Equals (1/n) · sum_{i1 < i2} u_{i1} ⊙ u_{i2}.
template <typename T>
Var<T> fm_interaction(Var<T> preds) {
  const auto& ps = preds.shape();
  if (ps.size() < 2) {
    throw DimensionError("fm_interaction: expected [..., n, k], got " + shape_string(ps));
  }
  const std::size_t k = ps.back();
  const std::size_t n = ps[ps.size() - 2];
  const std::size_t groups = preds.value().size() / (n * k);
  Shape out_shape(ps.begin(), ps.end() - 2);
  out_shape.push_back(k);
  Tensor<T> out(out_shape);
  auto sums = std::make_shared<std::vector<T>>(groups * k, T{0});
  const T* u = preds.value().raw();
  const T scale = T{1} / (T{2} * static_cast<T>(n));
  for (std::size_t g = 0; g < groups; ++g) {
    T* s = sums->data() + g * k;
    std::vector<T> sq(k, T{0});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < k; ++f) {
        const T v = u[(g * n + i) * k + f];
        s[f] += v;
        sq[f] += v * v;
      }
    for (std::size_t f = 0; f < k; ++f) out[g * k + f] = scale * (s[f] * s[f] - sq[f]);
  }
  return preds.tape->record(
      std::move(out), {preds}, [ip = preds.id, groups, n, k, sums](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const T* u = t.value(ip).raw();
        auto& gu = t.grad_buffer(ip);
        const T inv_n = T{1} / static_cast<T>(n);
        for (std::size_t grp = 0; grp < groups; ++grp)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t f = 0; f < k; ++f) {
              const std::size_t idx = (grp * n + i) * k + f;
              gu[idx] += inv_n * ((*sums)[grp * k + f] - u[idx]) * g[grp * k + f];
            }
      });
}

/// Agreement b_j: component sum of H_j over the last axis.
template <typename T>
Var<T> agreement(Var<T> h) {
  return sum_last(h);
}

template <typename T>
struct RoutingResult {
  Var<T> poses;           // [..., J, k]
  Var<T> activations;     // [..., J]
  Var<T> raw_agreements;  // [..., J]
};

/// Routes prediction vectors [J, n, k] (or [N, J, n, k]) to J output capsules.
template <typename T>
RoutingResult<T> fm_routing(Var<T> preds, RoutingVariant variant) {
  const auto& ps = preds.shape();
  if (ps.size() != 3 && ps.size() != 4) {
    throw DimensionError("fm_routing: expected [J,n,k] or [N,J,n,k], got " + shape_string(ps));
  }
  const std::size_t classes = ps[ps.size() - 3];
  if (variant == RoutingVariant::modified && classes < 2) {
    throw ConfigError("modified FM routing needs at least 2 output capsules, got " +
                      std::to_string(classes));
  }
  Var<T> unit = l2_normalize(preds);
  Var<T> h = fm_interaction(unit);
  Var<T> b = agreement(h);
  Var<T> act = variant == RoutingVariant::modified ? softmax(b) : exp(b);
  return {pose(h), act, b};
}

template <typename T>
RoutingResult<T> modified_fm_routing(Var<T> preds) {
  return fm_routing(preds, RoutingVariant::modified);
}

template <typename T>
RoutingResult<T> original_fm_routing(Var<T> preds) {
  return fm_routing(preds, RoutingVariant::original);
}

// ---------------------------------------------------------------- value-level API

/// Plain-tensor routing result.
template <typename T>
struct RoutingOutput {
  Tensor<T> poses;
  Tensor<T> activations;
  Tensor<T> raw_agreements;
};

template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  Tape<T> tape;
  return squash(tape.constant(s)).value();
}

template <typename T>
Tensor<T> l2_normalize_capsules(const Tensor<T>& bank) {
  Tape<T> tape;
  return l2_normalize(tape.constant(bank)).value();
}

template <typename T>
Tensor<T> pose(const Tensor<T>& h) {
  Tape<T> tape;
  return pose(tape.constant(h)).value();
}

template <typename T>
Tensor<T> predict(const Tensor<T>& bank, const Tensor<T>& w) {
  Tape<T> tape;
  return predict(tape.constant(bank), tape.constant(w)).value();
}

template <typename T>
Tensor<T> fm_interaction(const Tensor<T>& preds) {
  Tape<T> tape;
  return fm_interaction(tape.constant(preds)).value();
}

template <typename T>
T agreement(const Tensor<T>& h) {
  T total{0};
  for (auto v : h.data()) total += v;
  return total;
}

template <typename T>
RoutingOutput<T> fm_routing(const Tensor<T>& preds, RoutingVariant variant) {
  Tape<T> tape;
  auto r = fm_routing(tape.constant(preds), variant);
  return {r.poses.value(), r.activations.value(), r.raw_agreements.value()};
}

template <typename T>
RoutingOutput<T> modified_fm_routing(const Tensor<T>& preds) {
  return fm_routing(preds, RoutingVariant::modified);
}

template <typename T>
RoutingOutput<T> original_fm_routing(const Tensor<T>& preds) {
  return fm_routing(preds, RoutingVariant::original);
}

/// Explicit O(n²) sum over all pairs divided by n, for cross-checking fm_interaction.
template <typename T>
Tensor<T> pairwise_interaction_reference(const Tensor<T>& preds) {
  if (preds.rank() != 2) {
    throw DimensionError("pairwise_interaction_reference: expected [n,k], got " +
                         shape_string(preds.shape()));
  }
  const std::size_t n = preds.extent(0), k = preds.extent(1);
  Tensor<T> out({k});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      for (std::size_t f = 0; f < k; ++f) out[f] += preds.at(a, f) * preds.at(b, f);
  for (auto& v : out.data()) v /= static_cast<T>(n);
  return out;
}

}  // namespace widecaps
