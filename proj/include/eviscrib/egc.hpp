#pragma once

#include "eviscrib/autograd.hpp"
#include "eviscrib/labels.hpp"

namespace eviscrib::egc {

/// Dynamic confidence threshold, owned by the training loop.
struct ThresholdState {
  double lambda = 0.5;
  int iter = 0;
  int iter_max = 1;
  int num_classes = 2;

  /// lambda = 1/C at iter 0. Throws ConfigError for iter_max <= 0 or C < 2.
  static ThresholdState initial(int num_classes, int iter_max);
};

/// Per-branch EMA of the batch-mean of per-image max(1 - U), weighted by
/// eta = iter / iter_max; the smaller branch value becomes the new lambda.
/// Uses and updates state.lambda at state.iter (the caller advances iter).
/// u_cnn, u_mamba: (N, H, W) uncertainty maps.
double update_threshold(const Tensor& u_cnn, const Tensor& u_mamba, ThresholdState& state);

/// Pixel masks with entries 0 or 1, shape (N, H, W). The high-evidence masks
/// apply to every channel of a pixel.
struct PartitionMasks {
  Tensor consistent;
  Tensor inconsistent;
  Tensor high_cnn;
  Tensor high_mamba;
};

/// consistent = [(1 - U_cnn) > lambda] and [(1 - U_mamba) > lambda]; inconsistent is its complement.
PartitionMasks partition(const Tensor& u_cnn, const Tensor& u_mamba, double lambda);

struct Regions {
  Var logits_cnn_c, logits_mamba_c;  // logits times the consistent mask
  Var prob_cnn_ic, prob_mamba_ic;    // expected probabilities times the inconsistent mask
};

Regions split_regions(const Var& logits_cnn, const Var& logits_mamba, const Var& prob_cnn, const Var& prob_mamba,
                      const PartitionMasks& masks);

/// Per-pixel confidence: max over channels of an (N, C, H, W) probability grid.
Tensor confidence(const Tensor& probs);

/// p^(1/epsilon), renormalized over channels. Pixels whose powers all vanish stay zero.
Tensor sharpen(const Tensor& probs, double epsilon);

struct Guidance {
  Var loss_a;         // state-space branch pulled toward the sharpened CNN guide
  Var loss_b;         // CNN branch pulled toward the sharpened state-space guide
  Tensor high_cnn;    // pixels where the CNN is strictly more confident
  Tensor high_mamba;
};

/// Evidence-guided consistency on the inconsistent region. Guides are
/// detached; each loss is a mean squared error over guided pixels, or zero.
Guidance evidence_guidance(const Var& prob_cnn_ic, const Var& prob_mamba_ic, double epsilon);

/// Channel argmax per pixel; ties go to the lowest class index.
LabelBatch argmax_labels(const Tensor& scores);

/// CE(cnn, argmax mamba) + CE(mamba, argmax cnn) averaged over consistent pixels.
Var cross_pseudo_loss(const Var& logits_cnn_c, const Var& logits_mamba_c, const Tensor& consistent);

}  // namespace eviscrib::egc
