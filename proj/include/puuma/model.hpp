#pragma once
// The three architectures compared in the study: the dual-branch PUUMA,
// the global-only U-Mamba, and the plain U-Net (same layout, no scan path).
//
// Global branch: encoder stages (conv -> instance norm -> leaky relu ->
// mamba block -> stride-2 conv), a bottleneck conv whose flattened output is
// the latent vector, a fully connected prediction head (1 regression scalar
// + 4 class logits), and a symmetric decoder with skip connections emitting
// per-voxel segmentation logits. Local branch: encoder only, on the
// high-resolution placental patch. PUUMA fuses both branch outputs plus the
// gestational age at scan through one fully connected layer.

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "puuma/ssm.hpp"
#include "puuma/tensor.hpp"

namespace puuma {

enum class Variant { puuma, umamba_global, unet };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::puuma;
  int local_depth = 0;   // 0 when there is no local branch
  int global_depth = 6;
  int local_latent_dim = 0;
  int global_latent_dim = 5120;
  int fcl_hidden = 16;   // fcl_dim = (global_latent_dim, fcl_hidden)
  int base_channels = 16;
  std::array<int, 3> volume_shape{128, 128, 64};
  std::array<int, 3> patch_shape{16, 16, 16};
  int num_classes = 4;
  int ssm_state_dim = 4;

  std::pair<int, int> fcl_dim() const { return {global_latent_dim, fcl_hidden}; }
  bool has_local_branch() const { return variant == Variant::puuma; }
  bool has_mamba() const { return variant != Variant::unet; }

  // encoder channel schedule: base * 2^(stage-1), capped at 8*base
  int stage_channels(int stage) const;
  std::array<int, 3> bottleneck_spatial(std::array<int, 3> input, int depth) const;
  int global_bottleneck_channels() const;
  int local_bottleneck_channels() const;

  void validate() const;  // throws std::invalid_argument on inconsistency

  static ModelConfig paper_preset(Variant v);
  static ModelConfig desk_preset(Variant v);

  // canonical key-sorted JSON text, used in checkpoint headers
  std::string canonical_text() const;
  static ModelConfig from_canonical_text(const std::string& text);
};

struct ModelOutput {
  Tensor seg_logits;            // [1,D,H,W]
  Tensor ga_global;             // [1]
  Tensor class_logits_global;   // [4]
  std::optional<Tensor> ga_local;
  std::optional<Tensor> class_logits_local;
  Tensor ga_final;              // [1]; fusion output for puuma, else ga_global
};

struct ConvStage {
  Tensor w, b;                    // 3x3x3 conv, stride 1, pad 1
  std::optional<MambaBlock> mamba;
  Tensor wd, bd;                  // 3x3x3 conv, stride 2, pad 1
};

struct PredictionHead {
  Tensor w_hidden, b_hidden;  // latent -> fcl_hidden
  Tensor w_reg, b_reg;        // fcl_hidden -> 1
  Tensor w_cls, b_cls;        // fcl_hidden -> 4

  // returns (regression scalar [1], class logits [4])
  std::pair<Tensor, Tensor> forward(const Tensor& latent_row) const;
};

struct DecoderStage {
  Tensor wu, bu;  // conv after nearest upsample
  Tensor wm, bm;  // conv after skip concatenation
};

struct GlobalBranch {
  std::vector<ConvStage> stages;
  Tensor w_bottleneck, b_bottleneck;
  PredictionHead head;
  std::vector<DecoderStage> decoder;  // deepest first
  Tensor w_seg, b_seg;                // 1x1x1 conv to one channel

  struct Out {
    Tensor seg_logits;
    Tensor ga;
    Tensor class_logits;
  };
  Out forward(const Tensor& volume, const ModelConfig& cfg) const;
};

struct LocalBranch {
  std::vector<ConvStage> stages;
  Tensor w_bottleneck, b_bottleneck;
  PredictionHead head;

  std::pair<Tensor, Tensor> forward(const Tensor& patch, const ModelConfig& cfg) const;
};

struct FusionHead {
  Tensor w, b;  // [1,11],[1]
};

// ga_final = w . [ga_global, probs_global(4), ga_local, probs_local(4), ga_scan] + b
Tensor fuse(const FusionHead& head, const Tensor& ga_global,
            const Tensor& class_probs_global, const Tensor& ga_local,
            const Tensor& class_probs_local, float ga_scan_weeks);

struct Model {
  ModelConfig config;
  GlobalBranch global;
  std::optional<LocalBranch> local;
  std::optional<FusionHead> fusion;

  // patch may be null for variants without a local branch
  ModelOutput forward(const Tensor& volume, const Tensor* patch,
                      float ga_scan_weeks) const;

  // named parameters in declaration order (checkpoint order)
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  int64_t parameter_count() const;
  void set_requires_grad(bool on);
};

// Deterministic He fan-in initialization; same seed gives bit-identical
// parameters.
Model build_model(const ModelConfig& config, uint64_t seed);

// Checkpoint: "PUMC" magic, u32 config-text length + canonical config text,
// u64 param-blob length, then tensors in declaration order.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace puuma
