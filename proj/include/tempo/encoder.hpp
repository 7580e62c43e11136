#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tempo/nn.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

/// Per-frame encoder outputs used downstream: patch tokens from four equally
/// spaced depths plus the CLS and register tokens from the final layer.
struct FeatureStack {
  std::array<Tensor, 4> per_depth;  // each N x D
  Tensor cls;                       // 1 x D
  Tensor registers;                 // R x D
  Index frame_index = 0;
};

struct EncoderConfig {
  Index image = 32;      // square input size
  Index patch = 8;       // patch side, divides image
  Index depth = 8;       // transformer blocks, divisible by 4
  Index width = 64;      // channels
  Index heads = 4;
  Index registers = 4;
  Index mlp_hidden() const { return width * 4; }
  Index tokens() const { return (image / patch) * (image / patch); }
};

/// Stand-in image foundation model: a small ViT with weights drawn once from
/// a fixed seed and never trained. Taps expose the block outputs at relative
/// depths 1/4, 1/2, 3/4 and 1.
class ViTEncoder {
 public:
  static ViTEncoder init(const EncoderConfig& cfg,
                         std::uint64_t seed = kDefaultSeed);

  /// Patch projection of an image shaped {H, W, 3} with values in [0, 1].
  /// Returns N x D tokens in row-major patch order, before position
  /// embeddings.
  Tensor patchify(const Tensor& image) const;

  FeatureStack encode_multitap(const Tensor& frame, Index frame_index = 0) const;

  /// Final-layer patch tokens; equals per_depth[3] of encode_multitap.
  Tensor forward_final(const Tensor& frame) const;

  const EncoderConfig& config() const { return cfg_; }

  /// Raw little-endian bytes of every parameter; the frozen-encoder checks
  /// compare these before and after training.
  std::string parameter_bytes() const;

  static constexpr std::uint64_t kDefaultSeed = 0x46524f5a454eull;  // fixed

 private:
  EncoderConfig cfg_;
  Tensor patch_w_;  // (p*p*3) x D
  Tensor patch_b_;  // D
  Tensor cls_;      // 1 x D
  Tensor reg_;      // R x D
  Tensor pos_;      // (1 + R + N) x D
  std::vector<TransformerBlock> blocks_;
};

// Feature file, binary little-endian. Layout: magic "VFMF", version u32 = 1,
// then T, N, D, R as u32, then per frame: 4 depth blocks of N*D f32, CLS D
// f32, registers R*D f32. Values are stored as f32; the round trip over the
// file is bit-exact.
void write_feature_file(const std::string& path,
                        const std::vector<FeatureStack>& stacks);
std::vector<FeatureStack> load_feature_file(const std::string& path);

}  // namespace tempo
