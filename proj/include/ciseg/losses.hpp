#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciseg/graph.hpp"
#include "ciseg/matching.hpp"
#include "ciseg/model.hpp"

namespace ciseg {

struct LossWeights {
  double lambda1 = 1.0;    // query distillation
  double lambda2 = 5.0;    // class distillation
  double lambda3 = 300.0;  // mask distillation
  double lambda4 = 100.0;  // pooled-feature distillation
  double lambda_c = 5.0;   // bce inside mask terms
  double lambda_d = 5.0;   // dice inside mask terms
};

struct LossBreakdown {
  double l_new = 0.0;
  double l_q = 0.0;
  double l_c = 0.0;
  double l_m = 0.0;
  double l_pod = 0.0;
  double total = 0.0;
};

inline LossBreakdown total_loss(LossBreakdown in, const LossWeights& w) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("total_loss: non-finite ") + name);
  };
  check(in.l_new, "l_new");
  check(in.l_q, "l_q");
  check(in.l_c, "l_c");
  check(in.l_m, "l_m");
  check(in.l_pod, "l_pod");
  in.total = in.l_new + w.lambda1 * in.l_q + w.lambda2 * in.l_c + w.lambda3 * in.l_m +
             w.lambda4 * in.l_pod;
  return in;
}

namespace detail {

constexpr double kMaskProbClamp = 1e-6;
constexpr double kClassProbClamp = 1e-8;
constexpr double kDiceEps = 1.0;
constexpr double kNoObjectWeight = 0.1;

// rowwise mean binary cross-entropy of probabilities p against constant
// targets t (both [m, n]); p must already be clamped away from {0,1}
template <typename T>
Var bce_rows(Graph<T>& g, Var p, const Tensor<T>& t) {
  const auto& vp = g.value(p);
  if (!vp.same_shape(t))
    throw std::invalid_argument("bce: shape mismatch " + vp.shape_str() + " vs " + t.shape_str());
  int n = vp.dim(1);
  Tensor<T> one_minus_t(t.dims());
  for (int64_t i = 0; i < t.numel(); ++i) one_minus_t[i] = T(1) - t[i];
  Var tc = g.constant(t);
  Var omt = g.constant(std::move(one_minus_t));
  Var ll = g.add(g.mul(tc, g.log(p)), g.mul(omt, g.log(g.rsub_scalar(T(1), p))));
  return g.scale(g.sum_rows(ll), T(-1.0 / double(n)));
}

// rowwise dice loss with eps smoothing
template <typename T>
Var dice_rows(Graph<T>& g, Var p, const Tensor<T>& t) {
  const auto& vp = g.value(p);
  if (!vp.same_shape(t))
    throw std::invalid_argument("dice: shape mismatch " + vp.shape_str() + " vs " + t.shape_str());
  int m = vp.dim(0);
  Var tc = g.constant(t);
  Var inter = g.sum_rows(g.mul(p, tc));
  Var denom = g.add_scalar(g.add(g.sum_rows(p), g.sum_rows(tc)), T(kDiceEps));
  Var numer = g.add_scalar(g.scale(inter, T(2)), T(kDiceEps));
  Var ones = g.constant(Tensor<T>::full({m}, T(1)));
  return g.sub(ones, g.div(numer, denom));
}

}  // namespace detail

// Dice loss on one mask; dice_loss(p, t) = 1 - (2*sum(p*t)+eps)/(sum p + sum t + eps).
template <typename T>
T dice_loss(const Tensor<T>& pred_probs, const Tensor<T>& target) {
  if (!pred_probs.same_shape(target)) throw std::invalid_argument("dice_loss: shape mismatch");
  double inter = 0, sp = 0, st = 0;
  for (int64_t i = 0; i < pred_probs.numel(); ++i) {
    inter += double(pred_probs[i]) * double(target[i]);
    sp += double(pred_probs[i]);
    st += double(target[i]);
  }
  return T(1.0 - (2.0 * inter + detail::kDiceEps) / (sp + st + detail::kDiceEps));
}

// Supervision for the current step: cross-entropy over the new group's
// queries (matched -> their class, unmatched -> no-object, down-weighted) plus
// bce+dice on the matched masks, averaged over matches. Queries outside
// [new_begin, new_end) are never touched.
template <typename T>
Var supervised_loss(Graph<T>& g, const PredictionSet<T>& preds, const Assignment& assignment,
                    const std::vector<int>& target_cols,
                    const std::vector<const uint8_t*>& target_masks, int new_begin, int new_end,
                    const LossWeights& w) {
  const int k = preds.num_classes;
  const int n_new = new_end - new_begin;
  if (n_new <= 0) throw std::invalid_argument("supervised_loss: empty new group");
  std::vector<int> cols(size_t(n_new), k);  // default: no-object
  std::vector<T> ce_w(size_t(n_new), T(detail::kNoObjectWeight));
  std::vector<int> matched_q;
  for (const auto& [q, gt] : assignment.pairs) {
    if (q < new_begin || q >= new_end)
      throw std::invalid_argument("supervised_loss: assignment references a frozen query (" +
                                  std::to_string(q) + ")");
    cols[size_t(q - new_begin)] = target_cols.at(size_t(gt));
    ce_w[size_t(q - new_begin)] = T(1);
    matched_q.push_back(q);
  }

  Var logp = g.log_softmax_rows(g.slice_rows(preds.class_logits, new_begin, new_end));
  Var picked = g.pick_per_row(logp, cols);
  T wsum = T(0);
  for (T v : ce_w) wsum += v;
  Var wconst = g.constant(Tensor<T>({n_new}, std::move(ce_w)));
  Var ce = g.scale(g.sum_all(g.mul(picked, wconst)), T(-1) / wsum);

  if (matched_q.empty()) return ce;

  const auto& md = g.value(preds.mask_logits);
  const int hw = md.dim(1) * md.dim(2);
  Var mask_flat = g.reshape(preds.mask_logits, {preds.total_queries, hw});
  Var pm = g.clamp(g.sigmoid(g.gather_rows(mask_flat, matched_q)), T(detail::kMaskProbClamp),
                   T(1 - detail::kMaskProbClamp));
  Tensor<T> tmasks({int(matched_q.size()), hw});
  for (size_t i = 0; i < assignment.pairs.size(); ++i) {
    const uint8_t* src = target_masks.at(size_t(assignment.pairs[i].second));
    for (int j = 0; j < hw; ++j) tmasks.at(int(i), j) = T(src[j]);
  }
  Var bce = g.mean_all(detail::bce_rows(g, pm, tmasks));
  Var dice = g.mean_all(detail::dice_rows(g, pm, tmasks));
  Var mask_term = g.add(g.scale(bce, T(w.lambda_c)), g.scale(dice, T(w.lambda_d)));
  return g.add(ce, mask_term);
}

// Mean squared distance between student and teacher decoder states of the
// frozen queries, averaged over layers and queries.
template <typename T>
Var query_kd(Graph<T>& g, const std::vector<Var>& student_states,
             const std::vector<Tensor<T>>& teacher_states, int m_old) {
  if (student_states.size() != teacher_states.size())
    throw std::invalid_argument("query_kd: layer count mismatch");
  if (student_states.empty() || m_old <= 0)
    throw std::invalid_argument("query_kd: nothing to distill");
  const int layers = int(student_states.size());
  Var acc;
  for (int l = 0; l < layers; ++l) {
    const auto& ts = teacher_states[size_t(l)];
    if (ts.dim(0) != m_old || ts.dim(1) != g.value(student_states[size_t(l)]).dim(1))
      throw std::invalid_argument("query_kd: state shape mismatch at layer " + std::to_string(l));
    Var s_old = g.slice_rows(student_states[size_t(l)], 0, m_old);
    Var diff = g.sub(s_old, g.constant(ts));
    Var sq = g.sum_all(g.mul(diff, diff));
    acc = l == 0 ? sq : g.add(acc, sq);
  }
  return g.scale(acc, T(1.0 / (double(m_old) * double(layers))));
}

// KL(teacher || student) over the old classes plus the no-object column,
// summed over the frozen queries. Probabilities are clamped before logs.
template <typename T>
Var class_kd(Graph<T>& g, Var student_logits, const Tensor<T>& teacher_logits, int k_old,
             int m_old) {
  if (k_old < 1) throw std::invalid_argument("class_kd: need at least one old class");
  if (teacher_logits.dim(0) < m_old || teacher_logits.dim(1) != k_old + 1)
    throw std::invalid_argument("class_kd: teacher logits shape mismatch");
  const int k_now = g.value(student_logits).dim(1) - 1;
  Var s_old = g.slice_rows(student_logits, 0, m_old);
  Var s_sel = k_now == k_old
                  ? s_old
                  : g.concat_cols({g.slice_cols(s_old, 0, k_old), g.slice_cols(s_old, k_now, k_now + 1)});
  Var ps = g.clamp(g.softmax_rows(s_sel), T(detail::kClassProbClamp), T(1));

  // teacher distribution and its entropy term are constants
  Tensor<T> pt({m_old, k_old + 1});
  double entropy_term = 0.0;
  for (int r = 0; r < m_old; ++r) {
    double mx = -1e300;
    for (int c = 0; c <= k_old; ++c) mx = std::max(mx, double(teacher_logits.at(r, c)));
    double z = 0.0;
    for (int c = 0; c <= k_old; ++c) z += std::exp(double(teacher_logits.at(r, c)) - mx);
    for (int c = 0; c <= k_old; ++c) {
      double p = std::exp(double(teacher_logits.at(r, c)) - mx) / z;
      p = std::max(p, detail::kClassProbClamp);
      pt.at(r, c) = T(p);
      entropy_term += p * std::log(p);
    }
  }
  Var cross = g.sum_all(g.mul(g.constant(std::move(pt)), g.log(ps)));
  return g.add_scalar(g.scale(cross, T(-1)), T(entropy_term));
}

// Mask distillation against the teacher's soft sigmoid outputs.
template <typename T>
Var mask_kd(Graph<T>& g, Var student_mask_logits, const Tensor<T>& teacher_mask_logits,
            const LossWeights& w, int m_old) {
  const auto& sv = g.value(student_mask_logits);
  if (teacher_mask_logits.ndim() != sv.ndim())
    throw std::invalid_argument("mask_kd: rank mismatch");
  for (int i = 1; i < sv.ndim(); ++i)
    if (teacher_mask_logits.dim(i) != sv.dim(i))
      throw std::invalid_argument("mask_kd: shape mismatch on axis " + std::to_string(i));
  if (teacher_mask_logits.dim(0) != m_old)
    throw std::invalid_argument("mask_kd: teacher row count != frozen query count");
  const int hw = int(sv.numel() / sv.dim(0));
  Var s_flat = g.slice_rows(g.reshape(student_mask_logits, {sv.dim(0), hw}), 0, m_old);
  Var ps = g.clamp(g.sigmoid(s_flat), T(detail::kMaskProbClamp), T(1 - detail::kMaskProbClamp));
  Tensor<T> pt({m_old, hw});
  const T* tl = teacher_mask_logits.data();
  for (int64_t i = 0; i < pt.numel(); ++i) {
    double x = double(tl[i]);
    pt[i] = T(x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)));
  }
  Var bce = g.mean_all(detail::bce_rows(g, ps, pt));
  Var dice = g.mean_all(detail::dice_rows(g, ps, pt));
  return g.add(g.scale(bce, T(w.lambda_c)), g.scale(dice, T(w.lambda_d)));
}

// The value mask_kd takes when the student equals the teacher: the bce term
// is the teacher's per-pixel binary self-entropy and the dice term is the
// soft-mask self-dice. Used as the identity-check oracle.
template <typename T>
double mask_kd_identity_floor(const Tensor<T>& teacher_mask_logits, const LossWeights& w) {
  const int m = teacher_mask_logits.dim(0);
  const int64_t hw = teacher_mask_logits.numel() / m;
  double bce_acc = 0.0, dice_acc = 0.0;
  for (int j = 0; j < m; ++j) {
    const T* row = teacher_mask_logits.data() + int64_t(j) * hw;
    double h = 0.0, inter = 0.0, sp = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      double x = double(row[i]);
      double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      p = std::min(1.0 - detail::kMaskProbClamp, std::max(detail::kMaskProbClamp, p));
      h += -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
      inter += p * p;
      sp += p;
    }
    bce_acc += h / double(hw);
    dice_acc += 1.0 - (2.0 * inter + detail::kDiceEps) / (2.0 * sp + detail::kDiceEps);
  }
  return w.lambda_c * bce_acc / m + w.lambda_d * dice_acc / m;
}

// ------------------------------------------------------------------ local POD

// Pooled marginal profiles: for each scale s the map splits into an s x s
// grid; each region contributes its width-pooled (per-row mean) and
// height-pooled (per-column mean) profiles per channel. The layout is
// scale-major, then channel, then region row-major, width profile before
// height profile.
template <typename T>
Tensor<T> pod_profile(const Tensor<T>& x, const std::vector<int>& scales, int level_for_errors) {
  if (x.ndim() != 3) throw std::invalid_argument("pod_profile: expects [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int64_t len = 0;
  for (int s : scales) {
    if (s <= 0 || h % s != 0 || w % s != 0)
      throw std::invalid_argument("pod_profile: level " + std::to_string(level_for_errors) +
                                  " spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                                  " not divisible by scale " + std::to_string(s));
    len += int64_t(c) * s * s * (h / s + w / s);
  }
  Tensor<T> out({int(len)});
  int64_t o = 0;
  for (int s : scales) {
    const int rh = h / s, rw = w / s;
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + int64_t(ch) * h * w;
      for (int ry = 0; ry < s; ++ry)
        for (int rx = 0; rx < s; ++rx) {
          const int y0 = ry * rh, x0 = rx * rw;
          for (int y = 0; y < rh; ++y) {
            T acc = T(0);
            for (int xx = 0; xx < rw; ++xx) acc += plane[int64_t(y0 + y) * w + x0 + xx];
            out[o++] = acc / T(rw);
          }
          for (int xx = 0; xx < rw; ++xx) {
            T acc = T(0);
            for (int y = 0; y < rh; ++y) acc += plane[int64_t(y0 + y) * w + x0 + xx];
            out[o++] = acc / T(rh);
          }
        }
    }
  }
  return out;
}

template <typename T>
Var pod_profile_var(Graph<T>& g, Var x, const std::vector<int>& scales, int level) {
  // forward runs through the same kernel as the plain version so teacher and
  // student profiles are bit-comparable
  const Tensor<T>& vx = g.value(x);
  Tensor<T> out = pod_profile(vx, scales, level);
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  // backward scatters each profile element's gradient back over its strip
  auto scales_copy = scales;
  return g.custom(std::move(out), {x}, [x, scales_copy, c, h, w](Graph<T>& gg, int self) {
    const auto& go = gg.out_grad(self);
    T* dx = gg.grad_buffer(x);
    int64_t o = 0;
    for (int s : scales_copy) {
      const int rh = h / s, rw = w / s;
      for (int ch = 0; ch < c; ++ch) {
        T* plane = dx + int64_t(ch) * h * w;
        for (int ry = 0; ry < s; ++ry)
          for (int rx = 0; rx < s; ++rx) {
            const int y0 = ry * rh, x0 = rx * rw;
            for (int y = 0; y < rh; ++y) {
              T gv = go[o++] / T(rw);
              for (int xx = 0; xx < rw; ++xx) plane[int64_t(y0 + y) * w + x0 + xx] += gv;
            }
            for (int xx = 0; xx < rw; ++xx) {
              T gv = go[o++] / T(rh);
              for (int y = 0; y < rh; ++y) plane[int64_t(y0 + y) * w + x0 + xx] += gv;
            }
          }
      }
    }
  });
}

// normalize to unit euclidean length; an all-zero profile stays zero
template <typename T>
Var pod_normalize(Graph<T>& g, Var phi) {
  Var ss = g.sum_all(g.mul(phi, phi));
  Var norm = g.sqrt_scalar(g.add_scalar(ss, T(1e-24)));
  return g.scale_by(phi, norm, /*divide=*/true);
}

template <typename T>
Tensor<T> pod_normalize_plain(Tensor<T> phi) {
  double ss = 0.0;
  for (int64_t i = 0; i < phi.numel(); ++i) ss += double(phi[i]) * double(phi[i]);
  T norm = T(std::sqrt(ss + 1e-24));
  for (int64_t i = 0; i < phi.numel(); ++i) phi[i] /= norm;
  return phi;
}

template <typename T>
Var pod_kd(Graph<T>& g, const std::vector<Var>& student_features,
           const std::vector<Tensor<T>>& teacher_features, const std::vector<int>& scales) {
  if (student_features.size() != teacher_features.size())
    throw std::invalid_argument("pod_kd: feature list length mismatch");
  if (student_features.empty()) throw std::invalid_argument("pod_kd: empty feature list");
  Var acc;
  for (size_t l = 0; l < student_features.size(); ++l) {
    const auto& sv = g.value(student_features[l]);
    const auto& tv = teacher_features[l];
    if (!sv.same_shape(tv))
      throw std::invalid_argument("pod_kd: level " + std::to_string(l) + " shape mismatch " +
                                  sv.shape_str() + " vs " + tv.shape_str());
    Var phi_s = pod_normalize(g, pod_profile_var(g, student_features[l], scales, int(l)));
    Tensor<T> phi_t = pod_normalize_plain(pod_profile(tv, scales, int(l)));
    Var diff = g.sub(phi_s, g.constant(std::move(phi_t)));
    Var sq = g.sum_all(g.mul(diff, diff));
    acc = l == 0 ? sq : g.add(acc, sq);
  }
  return g.scale(acc, T(1.0 / double(student_features.size())));
}

// Tape-side composition of the full objective.
template <typename T>
struct LossVars {
  Var l_new, l_q, l_c, l_m, l_pod;  // invalid Vars mean "not active this step"
  Var total;
};

template <typename T>
LossVars<T> compose_total(Graph<T>& g, Var l_new, Var l_q, Var l_c, Var l_m, Var l_pod,
                          const LossWeights& w) {
  LossVars<T> out{l_new, l_q, l_c, l_m, l_pod, l_new};
  Var total = l_new;
  if (l_q.valid()) total = g.add(total, l_q, T(w.lambda1));
  if (l_c.valid()) total = g.add(total, l_c, T(w.lambda2));
  if (l_m.valid()) total = g.add(total, l_m, T(w.lambda3));
  if (l_pod.valid()) total = g.add(total, l_pod, T(w.lambda4));
  out.total = total;
  return out;
}

}  // namespace ciseg
