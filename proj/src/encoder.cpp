#include "tempo/encoder.hpp"

#include <fstream>

#include "tempo/binio.hpp"

namespace tempo {

ViTEncoder ViTEncoder::init(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.depth % 4 != 0 || cfg.depth <= 0) {
    throw ConfigError("encoder depth " + std::to_string(cfg.depth) +
                      " must be a positive multiple of 4");
  }
  if (cfg.image % cfg.patch != 0) {
    throw ConfigError("image size " + std::to_string(cfg.image) +
                      " not divisible by patch " + std::to_string(cfg.patch));
  }
  Rng rng(seed);
  ViTEncoder e;
  e.cfg_ = cfg;
  const Index pdim = cfg.patch * cfg.patch * 3;
  e.patch_w_ = Tensor::randn({pdim, cfg.width}, rng, 0.02);
  e.patch_b_ = Tensor::zeros({cfg.width});
  e.cls_ = Tensor::randn({1, cfg.width}, rng, 0.02);
  e.reg_ = Tensor::randn({cfg.registers, cfg.width}, rng, 0.02);
  e.pos_ = Tensor::randn({1 + cfg.registers + cfg.tokens(), cfg.width}, rng,
                         0.02);
  for (Index i = 0; i < cfg.depth; ++i) {
    e.blocks_.push_back(
        TransformerBlock::init(cfg.width, cfg.heads, cfg.mlp_hidden(), rng));
  }
  return e;
}

Tensor ViTEncoder::patchify(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(2) != 3) {
    throw ShapeError("patchify: expected {H, W, 3}, got " +
                     shape_string(image.shape()));
  }
  const Index h = image.dim(0), w = image.dim(1), p = cfg_.patch;
  if (h % p != 0 || w % p != 0) {
    throw ShapeError("patchify: image " + shape_string(image.shape()) +
                     " not divisible by patch " + std::to_string(p));
  }
  const Index gh = h / p, gw = w / p;
  Tensor patches({gh * gw, p * p * 3});
  for (Index gy = 0; gy < gh; ++gy) {
    for (Index gx = 0; gx < gw; ++gx) {
      const Index row = gy * gw + gx;
      Index at = 0;
      for (Index py = 0; py < p; ++py) {
        for (Index px = 0; px < p; ++px) {
          for (Index c = 0; c < 3; ++c) {
            patches.values()[row * p * p * 3 + at++] =
                image.values()[((gy * p + py) * w + (gx * p + px)) * 3 + c];
          }
        }
      }
    }
  }
  return add(matmul(patches, patch_w_), patch_b_);
}

FeatureStack ViTEncoder::encode_multitap(const Tensor& frame,
                                         Index frame_index) const {
  const Index n = cfg_.tokens(), r = cfg_.registers;
  Tensor tokens = patchify(frame);
  Tensor x = add(concat_rows({cls_, reg_, tokens}), pos_);
  FeatureStack out;
  out.frame_index = frame_index;
  const Index tap_stride = cfg_.depth / 4;
  for (Index i = 0; i < cfg_.depth; ++i) {
    x = blocks_[static_cast<std::size_t>(i)].forward(x);
    if ((i + 1) % tap_stride == 0) {
      out.per_depth[static_cast<std::size_t>((i + 1) / tap_stride - 1)] =
          rows(x, 1 + r, n);
    }
  }
  out.cls = rows(x, 0, 1);
  out.registers = rows(x, 1, r);
  return out;
}

Tensor ViTEncoder::forward_final(const Tensor& frame) const {
  Tensor tokens = patchify(frame);
  Tensor x = add(concat_rows({cls_, reg_, tokens}), pos_);
  for (const TransformerBlock& b : blocks_) x = b.forward(x);
  return rows(x, 1 + cfg_.registers, cfg_.tokens());
}

std::string ViTEncoder::parameter_bytes() const {
  std::string out;
  auto dump = [&out](const Tensor& t) {
    out.append(reinterpret_cast<const char*>(t.values().data()),
               static_cast<std::size_t>(t.size()) * sizeof(Scalar));
  };
  dump(patch_w_);
  dump(patch_b_);
  dump(cls_);
  dump(reg_);
  dump(pos_);
  for (const TransformerBlock& b : blocks_) {
    dump(b.ln1.gamma);
    dump(b.ln1.beta);
    dump(b.attn.wq);
    dump(b.attn.bq);
    dump(b.attn.wk);
    dump(b.attn.bk);
    dump(b.attn.wv);
    dump(b.attn.bv);
    dump(b.attn.wo);
    dump(b.attn.bo);
    dump(b.ln2.gamma);
    dump(b.ln2.beta);
    dump(b.mlp.w1);
    dump(b.mlp.b1);
    dump(b.mlp.w2);
    dump(b.mlp.b2);
  }
  return out;
}

// --- feature file ---------------------------------------------------------

namespace {
constexpr char kFeatureMagic[4] = {'V', 'F', 'M', 'F'};

void write_tensor_f32(std::ostream& os, const Tensor& t) {
  for (Index i = 0; i < t.size(); ++i) {
    write_f32(os, static_cast<float>(t.at(i)));
  }
}

Tensor read_tensor_f32(BinReader& r, Shape shape, const char* what) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) {
    t.at(i) = static_cast<double>(r.read_f32(what));
  }
  return t;
}
}  // namespace

void write_feature_file(const std::string& path,
                        const std::vector<FeatureStack>& stacks) {
  if (stacks.empty()) {
    throw ContractError("write_feature_file: no frames");
  }
  const Index n = stacks.front().per_depth[0].dim(0);
  const Index d = stacks.front().per_depth[0].dim(1);
  const Index r = stacks.front().registers.dim(0);
  for (const FeatureStack& s : stacks) {
    for (const Tensor& f : s.per_depth) {
      if (f.ndim() != 2 || f.dim(0) != n || f.dim(1) != d) {
        throw ShapeError("write_feature_file: inconsistent depth tensor " +
                         shape_string(f.shape()));
      }
    }
    if (s.cls.size() != d || s.registers.size() != r * d) {
      throw ShapeError("write_feature_file: inconsistent cls/register shapes");
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write(kFeatureMagic, 4);
  write_u32(os, 1);
  write_u32(os, static_cast<std::uint32_t>(stacks.size()));
  write_u32(os, static_cast<std::uint32_t>(n));
  write_u32(os, static_cast<std::uint32_t>(d));
  write_u32(os, static_cast<std::uint32_t>(r));
  for (const FeatureStack& s : stacks) {
    for (const Tensor& f : s.per_depth) write_tensor_f32(os, f);
    write_tensor_f32(os, s.cls);
    write_tensor_f32(os, s.registers);
  }
}

std::vector<FeatureStack> load_feature_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader r(is);
  r.expect_magic(kFeatureMagic);
  const std::uint32_t version = r.read_u32("version");
  if (version != 1) {
    throw FormatError("unsupported feature file version " +
                      std::to_string(version) + " at byte offset 4");
  }
  const Index t = r.read_u32("frame count");
  const Index n = r.read_u32("token count");
  const Index d = r.read_u32("width");
  const Index reg = r.read_u32("register count");
  if (t == 0 || n == 0 || d == 0) {
    throw FormatError("degenerate header (T=" + std::to_string(t) +
                      ", N=" + std::to_string(n) + ", D=" + std::to_string(d) +
                      ") at byte offset 8");
  }
  std::vector<FeatureStack> stacks;
  stacks.reserve(static_cast<std::size_t>(t));
  for (Index f = 0; f < t; ++f) {
    FeatureStack s;
    s.frame_index = f;
    for (auto& depth : s.per_depth) {
      depth = read_tensor_f32(r, {n, d}, "depth block");
    }
    s.cls = read_tensor_f32(r, {1, d}, "cls token");
    s.registers = read_tensor_f32(r, {reg, d}, "register tokens");
    stacks.push_back(std::move(s));
  }
  char extra = 0;
  is.read(&extra, 1);
  if (is.gcount() != 0) {
    throw FormatError("trailing data at byte offset " +
                      std::to_string(r.offset()));
  }
  return stacks;
}

}  // namespace tempo
