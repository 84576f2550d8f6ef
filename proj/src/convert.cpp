#include "dssm/convert.hpp"

#include <cstring>

#include <json.hpp>

namespace dssm {

using nlohmann::json;

CheckpointData convert_mamba_to_diff(const CheckpointData& source, int64_t layer_begin, int64_t layer_end) {
  std::vector<BlockSpec> specs;
  int64_t d_model = 0, vocab = 0;
  specs_from_meta(source.meta_json, specs, d_model, vocab);
  int64_t depth = static_cast<int64_t>(specs.size());
  if (layer_begin < 0 || layer_end > depth || layer_begin > layer_end)
    throw DataError("convert: layer range [" + std::to_string(layer_begin) + "," + std::to_string(layer_end) +
                    ") out of bounds for depth " + std::to_string(depth));
  if (layer_begin == layer_end) return source;  // nothing to rewrite

  std::vector<BlockSpec> new_specs = specs;
  for (int64_t i = layer_begin; i < layer_end; ++i) {
    const BlockSpec& s = specs[static_cast<size_t>(i)];
    if (s.kind != BlockKind::Mamba)
      throw DataError("convert: layer " + std::to_string(i) + " is " + block_kind_name(s.kind) +
                      ", only plain mamba layers convert");
    if (s.expand != 2)
      throw DataError("convert: layer " + std::to_string(i) + " has expand " + std::to_string(s.expand) +
                      "; the channel split needs an even doubled width (expand = 2)");
    if (d_model % s.heads != 0)
      throw DataError("convert: layer " + std::to_string(i) + " head count " + std::to_string(s.heads) +
                      " does not divide the per-path width " + std::to_string(d_model));
    BlockSpec ns = s;
    ns.kind = BlockKind::DiffMamba;
    ns.expand = 1;
    ns.lambda_init = lambda_init_schedule(i);
    new_specs[static_cast<size_t>(i)] = ns;
  }

  ModelF src_model = model_from_checkpoint(source);
  ModelF dst_model = build_model<float>(new_specs, d_model, vocab, /*seed=*/0xC04F);

  auto copy_tensor = [](const Tensor<float>& from, Tensor<float>& to) {
    if (from.shape() != to.shape())
      throw IntegrityError("convert: internal shape mismatch " + shape_str(from.shape()) + " vs " +
                           shape_str(to.shape()));
    std::memcpy(to.data(), from.data(), sizeof(float) * static_cast<size_t>(from.size()));
  };

  copy_tensor(src_model.embed, dst_model.embed);
  copy_tensor(src_model.unembed, dst_model.unembed);
  copy_tensor(src_model.final_norm_gain, dst_model.final_norm_gain);

  int64_t w = d_model;
  for (int64_t i = 0; i < depth; ++i) {
    Block<float>& sb = src_model.blocks[static_cast<size_t>(i)];
    Block<float>& db = dst_model.blocks[static_cast<size_t>(i)];
    copy_tensor(sb.pre_norm_gain, db.pre_norm_gain);
    if (i < layer_begin || i >= layer_end) {
      if (sb.mamba) {
        copy_tensor(sb.mamba->w_in_x, db.mamba->w_in_x);
        copy_tensor(sb.mamba->w_in_z, db.mamba->w_in_z);
        copy_tensor(sb.mamba->conv_w, db.mamba->conv_w);
        copy_tensor(sb.mamba->conv_b, db.mamba->conv_b);
        copy_tensor(sb.mamba->s6.A, db.mamba->s6.A);
        copy_tensor(sb.mamba->s6.sb, db.mamba->s6.sb);
        copy_tensor(sb.mamba->s6.sc, db.mamba->s6.sc);
        copy_tensor(sb.mamba->s6.sdelta, db.mamba->s6.sdelta);
        copy_tensor(sb.mamba->s6.delta_bias, db.mamba->s6.delta_bias);
        copy_tensor(sb.mamba->w_out, db.mamba->w_out);
      } else if (sb.ds6) {
        // untouched non-mamba layers copy field by field
        auto& a = *sb.ds6;
        auto& b = *db.ds6;
        copy_tensor(a.w_in_x, b.w_in_x);
        copy_tensor(a.w_in_z, b.w_in_z);
        copy_tensor(a.conv_w, b.conv_w);
        copy_tensor(a.conv_b, b.conv_b);
        for (auto [src_s6, dst_s6] : {std::pair{&a.s6_min, &b.s6_min}, std::pair{&a.s6_sub, &b.s6_sub}}) {
          copy_tensor(src_s6->A, dst_s6->A);
          copy_tensor(src_s6->sb, dst_s6->sb);
          copy_tensor(src_s6->sc, dst_s6->sc);
          copy_tensor(src_s6->sdelta, dst_s6->sdelta);
          copy_tensor(src_s6->delta_bias, dst_s6->delta_bias);
        }
        if (a.lambda.mode == LambdaMode::Simple) {
          copy_tensor(a.lambda.bar, b.lambda.bar);
        } else {
          copy_tensor(a.lambda.q1, b.lambda.q1);
          copy_tensor(a.lambda.k1, b.lambda.k1);
          copy_tensor(a.lambda.q2, b.lambda.q2);
          copy_tensor(a.lambda.k2, b.lambda.k2);
        }
        copy_tensor(a.norm_gain, b.norm_gain);
        copy_tensor(a.w_out, b.w_out);
      } else if (sb.dmamba) {
        auto& a = *sb.dmamba;
        auto& b = *db.dmamba;
        for (auto [from, to] :
             {std::pair{&a.w_in_x, &b.w_in_x}, std::pair{&a.w_in_z, &b.w_in_z}, std::pair{&a.conv_w, &b.conv_w},
              std::pair{&a.conv_b, &b.conv_b}, std::pair{&a.a, &b.a}, std::pair{&a.sb_lo, &b.sb_lo},
              std::pair{&a.sb_hi, &b.sb_hi}, std::pair{&a.sc_lo, &b.sc_lo}, std::pair{&a.sc_hi, &b.sc_hi},
              std::pair{&a.sdelta_lo, &b.sdelta_lo}, std::pair{&a.sdelta_hi, &b.sdelta_hi},
              std::pair{&a.dbias_lo, &b.dbias_lo}, std::pair{&a.dbias_hi, &b.dbias_hi},
              std::pair{&a.w_out, &b.w_out}, std::pair{&a.post_mamba_gain, &b.post_mamba_gain},
              std::pair{&a.post_sub_gain, &b.post_sub_gain}})
          copy_tensor(*from, *to);
        if (a.lambda.mode == LambdaMode::Simple) {
          copy_tensor(a.lambda.bar, b.lambda.bar);
        } else {
          copy_tensor(a.lambda.q1, b.lambda.q1);
          copy_tensor(a.lambda.k1, b.lambda.k1);
          copy_tensor(a.lambda.q2, b.lambda.q2);
          copy_tensor(a.lambda.k2, b.lambda.k2);
        }
      }
      continue;
    }

    // converted layer: split the doubled inner channels across the two paths
    MambaBlockParams<float>& src = *sb.mamba;
    DiffMambaBlockParams<float>& dst = *db.dmamba;
    copy_tensor(src.w_in_x, dst.w_in_x);
    copy_tensor(src.w_in_z, dst.w_in_z);
    copy_tensor(src.conv_w, dst.conv_w);
    copy_tensor(src.conv_b, dst.conv_b);
    copy_tensor(src.s6.A, dst.a);
    int64_t n = src.s6.d_state;
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < w; ++c) {
        dst.sb_lo.data()[r * w + c] = src.s6.sb.data()[r * 2 * w + c];
        dst.sb_hi.data()[r * w + c] = src.s6.sb.data()[r * 2 * w + w + c];
        dst.sc_lo.data()[r * w + c] = src.s6.sc.data()[r * 2 * w + c];
        dst.sc_hi.data()[r * w + c] = src.s6.sc.data()[r * 2 * w + w + c];
      }
    int64_t h = src.s6.heads;
    for (int64_t r = 0; r < h; ++r)
      for (int64_t c = 0; c < w; ++c) {
        dst.sdelta_lo.data()[r * w + c] = src.s6.sdelta.data()[r * 2 * w + c];
        dst.sdelta_hi.data()[r * w + c] = src.s6.sdelta.data()[r * 2 * w + w + c];
      }
    copy_tensor(src.s6.delta_bias, dst.dbias_lo);
    copy_tensor(src.s6.delta_bias, dst.dbias_hi);
    for (int64_t r = 0; r < w; ++r)
      for (int64_t c = 0; c < w; ++c) {
        dst.w_out.data()[r * w + c] = src.w_out.data()[r * 2 * w + c];
        dst.w_out.data()[(r + w) * w + c] = src.w_out.data()[r * 2 * w + w + c];
      }
    // gentle insertion into the pretrained stack: the post-subtraction gain
    // starts near-silent and lambda starts near the bottom of its interval
    // (the freshly split paths are unaligned, so heavy subtraction at step
    // zero only injects noise); fine-tuning grows both
    for (int64_t c = 0; c < w; ++c) dst.post_sub_gain.data()[c] = 0.05f;
    if (dst.lambda.mode == LambdaMode::Simple) {
      float per = -3.0f / static_cast<float>(dst.lambda.bar.size());
      for (int64_t c = 0; c < dst.lambda.bar.size(); ++c) dst.lambda.bar.data()[c] = per;
    }
  }

  CheckpointData out = checkpoint_from_model(dst_model, source.step(), source.rng_state());
  // optimizer moments survive only for parameters that kept their names
  for (const auto& [key, tensor] : source.opt_state) {
    if (key == "adam.t") {
      out.opt_state.emplace(key, tensor.clone());
      continue;
    }
    std::string pname = key.size() > 7 ? key.substr(7) : "";
    if (out.params.count(pname) && out.params.at(pname).size() == tensor.size())
      out.opt_state.emplace(key, tensor.clone());
  }
  return out;
}

}  // namespace dssm
