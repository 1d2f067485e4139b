#include "sv4d/backbone.hpp"

#include <algorithm>

#include "sv4d/checkpoint.hpp"

namespace sv4d {

using ad::Mat;
using ad::Tape;
using ad::Var;

void BackboneConfig::validate() const {
  if (views < 1 || f_model < 1 || latent_channels < 1 || base_width < 1 || depth < 1 ||
      attn_heads < 1 || embed_dim < 1 || cam_freqs < 1)
    throw ConfigError("BackboneConfig: dimensions must be positive");
  for (int l = 0; l < depth; ++l)
    if ((base_width * (l + 1)) % attn_heads != 0)
      throw ConfigError("BackboneConfig: attn_heads must divide every level width");
  if (sigma_data <= 0.0) throw ConfigError("BackboneConfig: sigma_data must be > 0");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"views", views},
          {"f_model", f_model},
          {"latent_channels", latent_channels},
          {"base_width", base_width},
          {"depth", depth},
          {"attn_heads", attn_heads},
          {"embed_dim", embed_dim},
          {"cam_freqs", cam_freqs},
          {"sigma_data", sigma_data},
          {"enable_view_attn", enable_view_attn},
          {"enable_frame_attn", enable_frame_attn},
          {"enable_temporal_conv", enable_temporal_conv}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.views = j.at("views").get<int>();
  c.f_model = j.at("f_model").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.attn_heads = j.at("attn_heads").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.cam_freqs = j.at("cam_freqs").get<int>();
  c.sigma_data = j.at("sigma_data").get<double>();
  c.enable_view_attn = j.at("enable_view_attn").get<bool>();
  c.enable_frame_attn = j.at("enable_frame_attn").get<bool>();
  c.enable_temporal_conv = j.at("enable_temporal_conv").get<bool>();
  c.validate();
  return c;
}

BackboneConfig BackboneConfig::paper_scale() {
  BackboneConfig c;
  c.views = 8;
  c.f_model = 5;
  return c;
}

std::vector<std::vector<double>> camera_embedding(const CameraTrajectory& trajectory,
                                                  int cam_freqs) {
  trajectory.validate();
  if (cam_freqs < 1) throw ConfigError("camera_embedding: cam_freqs must be >= 1");
  std::vector<std::vector<double>> out;
  out.reserve(trajectory.view_count());
  for (const auto& view : trajectory.views) {
    const double az = deg2rad(view.azimuth_deg);
    const double coords[3] = {deg2rad(view.elevation_deg), std::sin(az), std::cos(az)};
    std::vector<double> feat;
    feat.reserve(6 * cam_freqs);
    for (double x : coords)
      for (int k = 0; k < cam_freqs; ++k) {
        const double s = std::ldexp(x, k);  // 2^k * x
        feat.push_back(std::sin(s));
        feat.push_back(std::cos(s));
      }
    out.push_back(std::move(feat));
  }
  return out;
}

EdmCoeffs edm_coeffs(double sigma, double sigma_data) {
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  EdmCoeffs c;
  c.c_skip = d2 / (s2 + d2);
  c.c_out = sigma * sigma_data / std::sqrt(s2 + d2);
  c.c_in = 1.0 / std::sqrt(s2 + d2);
  c.c_noise = 0.25 * std::log(sigma);
  return c;
}

double edm_loss_weight(double sigma, double sigma_data) {
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  return (s2 + d2) / (s2 * d2);
}

DenoiserConditioning DenoiserConditioning::unconditional() const {
  DenoiserConditioning u = *this;
  for (auto& l : u.input_video_latents) std::fill(l.begin(), l.end(), 0.0);
  for (auto& e : u.input_frame_embeddings) std::fill(e.begin(), e.end(), 0.0);
  for (auto& e : u.reference_view_embeddings) std::fill(e.begin(), e.end(), 0.0);
  return u;
}

namespace {

// Site-major layout shared by every UNet stage: row ((v*F + f)*h + y)*w + x.
Mat grid_to_sites(const LatentGrid& g) {
  const long rows = static_cast<long>(g.views) * g.frames * g.height * g.width;
  Mat m(rows, g.channels);
  for (int v = 0; v < g.views; ++v)
    for (int f = 0; f < g.frames; ++f) {
      const double* cell = g.cell(v, f);
      for (int c = 0; c < g.channels; ++c)
        for (int y = 0; y < g.height; ++y)
          for (int x = 0; x < g.width; ++x) {
            const long row =
                ((static_cast<long>(v) * g.frames + f) * g.height + y) * g.width + x;
            m(row, c) = cell[(static_cast<size_t>(c) * g.height + y) * g.width + x];
          }
    }
  return m;
}

LatentGrid sites_to_grid(const Mat& m, int views, int frames, int channels, int h, int w,
                         const std::string& codec_id) {
  LatentGrid g(views, frames, channels, h, w);
  g.codec_id = codec_id;
  for (int v = 0; v < views; ++v)
    for (int f = 0; f < frames; ++f) {
      double* cell = g.cell(v, f);
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const long row = ((static_cast<long>(v) * frames + f) * h + y) * w + x;
            cell[(static_cast<size_t>(c) * h + y) * w + x] = m(row, c);
          }
    }
  return g;
}

LatentGrid flip_frames(const LatentGrid& g) {
  LatentGrid out = g;
  for (int v = 0; v < g.views; ++v)
    for (int f = 0; f < g.frames; ++f) out.set_cell(v, f, g.cell_copy(v, g.frames - 1 - f));
  return out;
}

std::vector<int> view_major_to(const int views, int frames, int h, int w) {
  // destination order (f, y, x, v)
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(views) * frames * h * w);
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int v = 0; v < views; ++v)
          idx.push_back(((v * frames + f) * h + y) * w + x);
  return idx;
}

std::vector<int> frame_major_to(const int views, int frames, int h, int w) {
  // destination order (v, y, x, f)
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(views) * frames * h * w);
  for (int v = 0; v < views; ++v)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int f = 0; f < frames; ++f)
          idx.push_back(((v * frames + f) * h + y) * w + x);
  return idx;
}

std::vector<int> invert_permutation(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<int>(i);
  return inv;
}

constexpr int kNoiseFreqs = 8;

Mat noise_encoding(double c_noise) {
  Mat enc(1, 2 * kNoiseFreqs);
  for (int k = 0; k < kNoiseFreqs; ++k) {
    const double s = std::ldexp(c_noise, k);
    enc(0, 2 * k) = std::sin(s);
    enc(0, 2 * k + 1) = std::cos(s);
  }
  return enc;
}

}  // namespace

// ---- layer wiring ----------------------------------------------------------

namespace {

struct ResBlock {
  nn::LayerNorm norm1, norm2;
  int conv1_w = -1, conv1_b = -1, conv2_w = -1, conv2_b = -1;
  nn::Linear emb_proj;  // emb -> (scale, shift)
  int width = 0;

  ResBlock() = default;
  ResBlock(nn::ParamStore& s, const std::string& name, int width_, int kvol, int emb_width,
           Rng& rng)
      : norm1(s, name + ".norm1", width_), norm2(s, name + ".norm2", width_), width(width_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(width_) * kvol);
    Mat w1(width_ * kvol, width_);
    for (long i = 0; i < w1.size(); ++i) w1.data()[i] = rng.uniform(-bound, bound);
    conv1_w = s.add(name + ".conv1.w", std::move(w1));
    conv1_b = s.add(name + ".conv1.b", Mat::Zero(1, width_));
    conv2_w = s.add(name + ".conv2.w", Mat::Zero(width_ * kvol, width_));
    conv2_b = s.add(name + ".conv2.b", Mat::Zero(1, width_));
    emb_proj = nn::Linear(s, name + ".emb_proj", emb_width, 2 * width_, rng);
  }
};

struct AttnBlock {
  nn::LayerNorm norm;
  nn::Linear qkv, out;
  nn::Linear cross_v, cross_out;

  AttnBlock() = default;
  AttnBlock(nn::ParamStore& s, const std::string& name, int width, int embed_dim, Rng& rng)
      : norm(s, name + ".norm", width),
        qkv(s, name + ".qkv", width, 3 * width, rng),
        out(s, name + ".out", width, width, rng, 1.0, /*zero_init=*/true),
        cross_v(s, name + ".cross_v", embed_dim, width, rng),
        cross_out(s, name + ".cross_out", width, width, rng, 1.0, /*zero_init=*/true) {}
};

struct AttnStack {
  AttnBlock spatial, view, frame;
  nn::LayerNorm ffn_norm;
  nn::Mlp ffn;

  AttnStack() = default;
  AttnStack(nn::ParamStore& s, const std::string& name, int width, int embed_dim, Rng& rng)
      : spatial(s, name + ".spatial", width, embed_dim, rng),
        view(s, name + ".view", width, embed_dim, rng),
        frame(s, name + ".frame", width, embed_dim, rng),
        ffn_norm(s, name + ".ffn_norm", width),
        ffn(s, name + ".ffn", width, 2 * width, width, rng, /*zero_init_out=*/true) {}
};

}  // namespace

struct Backbone::Net {
  nn::Linear cam_proj;
  nn::Mlp noise_mlp;
  int conv_in_w = -1, conv_in_b = -1;
  std::vector<ResBlock> down_res;
  std::vector<AttnStack> down_attn;
  std::vector<nn::Linear> down_proj;  // width_l -> width_{l+1}
  ResBlock mid_res;
  AttnStack mid_attn;
  std::vector<nn::Linear> up_fuse;  // (width_l + width_{l+1}) -> width_l
  std::vector<ResBlock> up_res;
  std::vector<AttnStack> up_attn;
  nn::LayerNorm out_norm;
  int conv_out_w = -1, conv_out_b = -1;
  int emb_width = 0;

  int level_width(const BackboneConfig& c, int l) const { return c.base_width * (l + 1); }

  Net(nn::ParamStore& s, const BackboneConfig& c, Rng& rng) {
    emb_width = c.base_width;
    const int kvol = (c.enable_temporal_conv ? 3 : 1) * 9;
    cam_proj = nn::Linear(s, "cam_proj", 6 * c.cam_freqs, emb_width, rng);
    noise_mlp = nn::Mlp(s, "noise_mlp", 2 * kNoiseFreqs, emb_width, emb_width, rng);

    const int w0 = level_width(c, 0);
    {
      const int in_ch = 2 * c.latent_channels;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * kvol);
      Mat w(in_ch * kvol, w0);
      for (long i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
      conv_in_w = s.add("conv_in.w", std::move(w));
      conv_in_b = s.add("conv_in.b", Mat::Zero(1, w0));
    }
    for (int l = 0; l < c.depth; ++l) {
      const int wl = level_width(c, l);
      down_res.emplace_back(s, "down" + std::to_string(l) + ".res", wl, kvol, emb_width, rng);
      down_attn.emplace_back(s, "down" + std::to_string(l) + ".attn", wl, c.embed_dim, rng);
      if (l + 1 < c.depth)
        down_proj.emplace_back(s, "down" + std::to_string(l) + ".proj", wl,
                               level_width(c, l + 1), rng);
    }
    const int wt = level_width(c, c.depth - 1);
    mid_res = ResBlock(s, "mid.res", wt, kvol, emb_width, rng);
    mid_attn = AttnStack(s, "mid.attn", wt, c.embed_dim, rng);
    for (int l = c.depth - 2; l >= 0; --l) {
      const int wl = level_width(c, l);
      up_fuse.emplace_back(s, "up" + std::to_string(l) + ".fuse", wl + level_width(c, l + 1),
                           wl, rng);
      up_res.emplace_back(s, "up" + std::to_string(l) + ".res", wl, kvol, emb_width, rng);
      up_attn.emplace_back(s, "up" + std::to_string(l) + ".attn", wl, c.embed_dim, rng);
    }
    out_norm = nn::LayerNorm(s, "out_norm", w0);
    conv_out_w = s.add("conv_out.w", Mat::Zero(w0 * kvol, c.latent_channels));
    conv_out_b = s.add("conv_out.b", Mat::Zero(1, c.latent_channels));
  }
};

Backbone::Backbone(const BackboneConfig& config, uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(seed ^ 0xBACB0Eull);
  net_ = std::make_shared<Net>(params_, config_, rng);
}

namespace {

// Applies one attention stack at the current level geometry.
struct StackContext {
  int views, frames, h, w, heads;
  std::vector<int> row_frame;  // frame index per site row
  std::vector<int> row_view;   // view index per site row
};

StackContext make_context(int views, int frames, int h, int w, int heads) {
  StackContext ctx{views, frames, h, w, heads, {}, {}};
  ctx.row_frame.reserve(static_cast<size_t>(views) * frames * h * w);
  ctx.row_view.reserve(ctx.row_frame.capacity());
  for (int v = 0; v < views; ++v)
    for (int f = 0; f < frames; ++f)
      for (int i = 0; i < h * w; ++i) {
        ctx.row_frame.push_back(f);
        ctx.row_view.push_back(v);
      }
  return ctx;
}

Var self_attention(const std::vector<Var>& p, const AttnBlock& blk, Var x, int groups,
                   int tokens, int heads) {
  Var n = blk.norm(p, x);
  Var qkv = blk.qkv(p, n);
  const int width = static_cast<int>(x.val().cols());
  Var q = ad::slice_cols(qkv, 0, width);
  Var k = ad::slice_cols(qkv, width, width);
  Var v = ad::slice_cols(qkv, 2 * width, width);
  Var attn = ad::grouped_attention(q, k, v, groups, tokens, tokens, heads);
  return ad::add(x, blk.out(p, attn));
}

// Single-token cross attention degenerates to a broadcast value projection:
// softmax over one key is 1, so the output is independent of the queries.
Var cross_inject(const std::vector<Var>& p, const AttnBlock& blk, Var x, Var tokens,
                 const std::vector<int>& row_to_token) {
  Var val = blk.cross_out(p, ad::silu(blk.cross_v(p, tokens)));
  return ad::add(x, ad::gather_rows(val, row_to_token));
}

}  // namespace

Var Backbone::unet(Tape& tape, const std::vector<Var>& p, Var x, double sigma,
                   const DenoiserConditioning& cond, int frames, int h, int w) const {
  const auto& net = *net_;
  const BackboneConfig& c = config_;
  const int kf = c.enable_temporal_conv ? 3 : 1;

  // Conditioning embeddings: camera features per view plus the noise level.
  const auto cam_feats = camera_embedding(cond.camera, c.cam_freqs);
  Mat cam(c.views, 6 * c.cam_freqs);
  for (int v = 0; v < c.views; ++v)
    for (int i = 0; i < 6 * c.cam_freqs; ++i) cam(v, i) = cam_feats[v][i];
  const EdmCoeffs coeffs = edm_coeffs(sigma, c.sigma_data);
  Var emb = net.cam_proj(p, tape.constant(cam));
  Var noise = net.noise_mlp(p, tape.constant(noise_encoding(coeffs.c_noise)));
  emb = ad::silu(ad::add_bias(emb, noise));  // [V, emb_width]

  Mat frame_emb(frames, c.embed_dim);
  for (int f = 0; f < frames; ++f)
    for (int i = 0; i < c.embed_dim; ++i) frame_emb(f, i) = cond.input_frame_embeddings[f][i];
  Mat view_emb(c.views, c.embed_dim);
  for (int v = 0; v < c.views; ++v)
    for (int i = 0; i < c.embed_dim; ++i) view_emb(v, i) = cond.reference_view_embeddings[v][i];
  Var frame_tokens = tape.constant(std::move(frame_emb));
  Var view_tokens = tape.constant(std::move(view_emb));

  auto res_block = [&](const ResBlock& rb, Var in, int hh, int ww) {
    ad::Conv3dShape shape{c.views, frames, hh, ww, rb.width, rb.width, kf, 3, 3};
    Var hvar = ad::conv3d(ad::silu(rb.norm1(p, in)), p[rb.conv1_w], p[rb.conv1_b], shape);
    Var ss = rb.emb_proj(p, emb);  // [V, 2*width]
    Var sc = ad::slice_cols(ss, 0, rb.width);
    Var sh = ad::slice_cols(ss, rb.width, rb.width);
    std::vector<int> row_view;
    row_view.reserve(static_cast<size_t>(c.views) * frames * hh * ww);
    for (int v = 0; v < c.views; ++v)
      for (int i = 0; i < frames * hh * ww; ++i) row_view.push_back(v);
    hvar = ad::group_affine(rb.norm2(p, hvar), sc, sh, std::move(row_view));
    hvar = ad::conv3d(ad::silu(hvar), p[rb.conv2_w], p[rb.conv2_b], shape);
    return ad::add(in, hvar);
  };

  auto attn_stack = [&](const AttnStack& st, Var in, int hh, int ww) {
    const StackContext ctx = make_context(c.views, frames, hh, ww, c.attn_heads);
    // spatial: attends over hh*ww per (v, f); input-video conditioning token
    Var out = self_attention(p, st.spatial, in, c.views * frames, hh * ww, c.attn_heads);
    out = cross_inject(p, st.spatial, out, frame_tokens, ctx.row_frame);
    if (c.enable_view_attn) {
      const auto perm = view_major_to(c.views, frames, hh, ww);
      const auto inv = invert_permutation(perm);
      Var vx = ad::gather_rows(out, perm);
      vx = self_attention(p, st.view, vx, frames * hh * ww, c.views, c.attn_heads);
      out = ad::gather_rows(vx, inv);
      out = cross_inject(p, st.view, out, frame_tokens, ctx.row_frame);
    }
    if (c.enable_frame_attn) {
      const auto perm = frame_major_to(c.views, frames, hh, ww);
      const auto inv = invert_permutation(perm);
      Var fx = ad::gather_rows(out, perm);
      fx = self_attention(p, st.frame, fx, c.views * hh * ww, frames, c.attn_heads);
      out = ad::gather_rows(fx, inv);
      out = cross_inject(p, st.frame, out, view_tokens, ctx.row_view);
    }
    return ad::add(out, st.ffn(p, st.ffn_norm(p, out)));
  };

  // conv_in
  {
    ad::Conv3dShape shape{c.views, frames, h, w, 2 * c.latent_channels, net.level_width(c, 0),
                          kf, 3, 3};
    x = ad::conv3d(x, p[net.conv_in_w], p[net.conv_in_b], shape);
  }

  std::vector<Var> skips;
  std::vector<std::pair<int, int>> dims;
  int hh = h, ww = w;
  for (int l = 0; l < c.depth; ++l) {
    x = res_block(net.down_res[l], x, hh, ww);
    x = attn_stack(net.down_attn[l], x, hh, ww);
    if (l + 1 < c.depth) {
      skips.push_back(x);
      dims.emplace_back(hh, ww);
      // spatial 2x average pooling, then channel projection
      std::vector<int> pool_idx;
      pool_idx.reserve(static_cast<size_t>(c.views) * frames * hh * ww);
      for (int v = 0; v < c.views; ++v)
        for (int f = 0; f < frames; ++f)
          for (int y = 0; y < hh / 2; ++y)
            for (int xx = 0; xx < ww / 2; ++xx)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                  pool_idx.push_back(
                      ((v * frames + f) * hh + 2 * y + dy) * ww + 2 * xx + dx);
      x = ad::scale(ad::segment_sum(ad::gather_rows(x, std::move(pool_idx)), 4), 0.25);
      x = net.down_proj[l](p, x);
      hh /= 2;
      ww /= 2;
    }
  }

  x = res_block(net.mid_res, x, hh, ww);
  x = attn_stack(net.mid_attn, x, hh, ww);

  for (size_t u = 0; u < net.up_res.size(); ++u) {
    const int l = c.depth - 2 - static_cast<int>(u);
    const auto [sh_, sw_] = dims.back();
    dims.pop_back();
    Var skip = skips.back();
    skips.pop_back();
    // nearest upsample to the skip geometry
    std::vector<int> up_idx;
    up_idx.reserve(static_cast<size_t>(c.views) * frames * sh_ * sw_);
    for (int v = 0; v < c.views; ++v)
      for (int f = 0; f < frames; ++f)
        for (int y = 0; y < sh_; ++y)
          for (int xx = 0; xx < sw_; ++xx)
            up_idx.push_back(((v * frames + f) * hh + y / 2) * ww + xx / 2);
    Var upsampled = ad::gather_rows(x, std::move(up_idx));
    x = net.up_fuse[u](p, ad::concat_cols({skip, upsampled}));
    hh = sh_;
    ww = sw_;
    x = res_block(net.up_res[u], x, hh, ww);
    x = attn_stack(net.up_attn[u], x, hh, ww);
    (void)l;
  }

  {
    ad::Conv3dShape shape{c.views, frames, hh, ww, net.level_width(c, 0), c.latent_channels,
                          kf, 3, 3};
    x = ad::conv3d(ad::silu(net.out_norm(p, x)), p[net.conv_out_w], p[net.conv_out_b], shape);
  }
  return x;
}

Var Backbone::denoise_on_tape(Tape& tape, const std::vector<Var>& p, const Mat& z_sites,
                              double sigma, const DenoiserConditioning& cond, int frames, int h,
                              int w) const {
  const BackboneConfig& c = config_;
  const EdmCoeffs coeffs = edm_coeffs(sigma, c.sigma_data);

  // Input-video latent of frame f, broadcast to every view at that frame.
  Mat inp(z_sites.rows(), c.latent_channels);
  for (int v = 0; v < c.views; ++v)
    for (int f = 0; f < frames; ++f) {
      const std::vector<double>& lat = cond.input_video_latents[f];
      for (int ch = 0; ch < c.latent_channels; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            inp(((static_cast<long>(v) * frames + f) * h + y) * w + x, ch) =
                lat[(static_cast<size_t>(ch) * h + y) * w + x];
    }

  Var z = tape.constant(z_sites);
  Var u_in = ad::concat_cols({ad::scale(z, coeffs.c_in), tape.constant(std::move(inp))});
  Var u_out = unet(tape, p, u_in, sigma, cond, frames, h, w);
  return ad::add(ad::scale(z, coeffs.c_skip), ad::scale(u_out, coeffs.c_out));
}

namespace {

void check_cond(const BackboneConfig& c, const LatentGrid& z, const DenoiserConditioning& cond) {
  if (z.views != c.views)
    throw std::invalid_argument("denoise: grid views do not match config");
  if (z.frames < 1 || z.frames > c.f_model)
    throw std::invalid_argument("denoise: frame count must be in [1, f_model]");
  if (z.channels != c.latent_channels)
    throw std::invalid_argument("denoise: latent channel mismatch");
  if (cond.input_video_latents.size() != static_cast<size_t>(z.frames) ||
      cond.input_frame_embeddings.size() != static_cast<size_t>(z.frames))
    throw std::invalid_argument("denoise: per-frame conditioning count mismatch");
  if (cond.reference_view_embeddings.size() != static_cast<size_t>(c.views))
    throw std::invalid_argument("denoise: reference view embedding count mismatch");
  if (cond.camera.view_count() != c.views)
    throw std::invalid_argument("denoise: camera view count mismatch");
  for (const auto& l : cond.input_video_latents)
    if (l.size() != z.cell_size())
      throw std::invalid_argument("denoise: input video latent size mismatch");
}

DenoiserConditioning flip_cond(const DenoiserConditioning& cond) {
  DenoiserConditioning out = cond;
  std::reverse(out.input_video_latents.begin(), out.input_video_latents.end());
  std::reverse(out.input_frame_embeddings.begin(), out.input_frame_embeddings.end());
  return out;
}

}  // namespace

LatentGrid Backbone::denoise(const LatentGrid& z, double sigma,
                             const DenoiserConditioning& cond) const {
  check_cond(config_, z, cond);
  if (sigma <= 0.0) throw std::invalid_argument("denoise: sigma must be > 0");

  const bool backward = cond.direction == SampleDirection::kBackward;
  const LatentGrid zz = backward ? flip_frames(z) : z;
  const DenoiserConditioning cc = backward ? flip_cond(cond) : cond;

  Tape tape;
  const std::vector<Var> p = params_.constants(tape);
  Var d = denoise_on_tape(tape, p, grid_to_sites(zz), sigma, cc, zz.frames, zz.height, zz.width);
  LatentGrid out =
      sites_to_grid(d.val(), z.views, z.frames, z.channels, z.height, z.width, z.codec_id);
  return backward ? flip_frames(out) : out;
}

TrainStepResult Backbone::training_step(const LatentGrid& clean,
                                        const DenoiserConditioning& cond, Rng& rng,
                                        const nn::AdamConfig& adam,
                                        std::optional<double> forced_sigma,
                                        const DenoiseFn* denoiser_override) {
  check_cond(config_, clean, cond);
  double sigma;
  if (forced_sigma) {
    sigma = *forced_sigma;
  } else {
    // log-normal over the ladder range
    sigma = std::exp(-1.2 + 1.2 * rng.normal());
    sigma = std::clamp(sigma, 0.002, 80.0);
  }

  LatentGrid noisy = clean;
  for (auto& v : noisy.data) v += sigma * rng.normal();

  const double weight = edm_loss_weight(sigma, config_.sigma_data);
  TrainStepResult result;
  result.sigma = sigma;

  if (denoiser_override) {
    const LatentGrid d = (*denoiser_override)(noisy, sigma, cond);
    double acc = 0.0;
    for (size_t i = 0; i < d.data.size(); ++i) {
      const double e = d.data[i] - clean.data[i];
      acc += e * e;
    }
    result.loss = weight * acc / static_cast<double>(d.data.size());
    if (!std::isfinite(result.loss))
      throw TrainingError("training_step: non-finite loss at sigma=" + std::to_string(sigma));
    return result;  // nothing to update: the override bypasses the parameters
  }

  const bool backward_dir = cond.direction == SampleDirection::kBackward;
  const LatentGrid clean_d = backward_dir ? flip_frames(clean) : clean;
  const LatentGrid noisy_d = backward_dir ? flip_frames(noisy) : noisy;
  const DenoiserConditioning cond_d = backward_dir ? flip_cond(cond) : cond;

  Tape tape;
  const std::vector<Var> p = params_.leaves(tape);
  Var d = denoise_on_tape(tape, p, grid_to_sites(noisy_d), sigma, cond_d, clean.frames,
                          clean.height, clean.width);
  Var target = tape.constant(grid_to_sites(clean_d));
  Var loss = ad::scale(ad::mean_all(ad::square(ad::sub(d, target))), weight);
  result.loss = loss.val()(0, 0);
  if (!std::isfinite(result.loss))
    throw TrainingError("training_step: non-finite loss at sigma=" + std::to_string(sigma));
  tape.backward(loss);
  nn::adam_step(params_, tape, p, adam, ++step_count_);
  return result;
}

double Backbone::loss_and_gradients(const LatentGrid& clean, const DenoiserConditioning& cond,
                                    double sigma, const std::vector<double>& epsilon,
                                    std::vector<Mat>* grads) const {
  check_cond(config_, clean, cond);
  if (epsilon.size() != clean.data.size())
    throw std::invalid_argument("loss_and_gradients: epsilon size mismatch");
  LatentGrid noisy = clean;
  for (size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += sigma * epsilon[i];

  Tape tape;
  const std::vector<Var> p = params_.leaves(tape);
  Var d = denoise_on_tape(tape, p, grid_to_sites(noisy), sigma, cond, clean.frames, clean.height,
                          clean.width);
  Var target = tape.constant(grid_to_sites(clean));
  Var loss = ad::scale(ad::mean_all(ad::square(ad::sub(d, target))),
                       edm_loss_weight(sigma, config_.sigma_data));
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (size_t i = 0; i < p.size(); ++i) {
      if (tape.has_grad(p[i].id))
        grads->push_back(tape.grad(p[i].id));
      else
        grads->push_back(Mat::Zero(params_.entry(static_cast<int>(i)).value.rows(),
                                   params_.entry(static_cast<int>(i)).value.cols()));
    }
  }
  return loss.val()(0, 0);
}

void Backbone::save_checkpoint(const std::filesystem::path& path) const {
  save_blob(path, "backbone", config_.to_json(), params_,
            {{"step_count", step_count_}, {"seed", seed_}});
}

Backbone Backbone::load_checkpoint(const std::filesystem::path& path) {
  const BlobHeader header = read_blob_header(path);
  if (header.kind != "backbone")
    throw CheckpointError("load_checkpoint: wrong blob kind '" + header.kind + "'");
  Backbone model(BackboneConfig::from_json(header.config),
                 header.extra.value("seed", uint64_t{0}));
  load_blob_tensors(path, model.params_);
  model.step_count_ = header.extra.value("step_count", 0);
  return model;
}

void Backbone::load_weights(const std::filesystem::path& path,
                            const std::vector<std::string>& partial_manifest) {
  const BlobHeader header = read_blob_header(path);
  if (header.kind != "backbone")
    throw CheckpointError("load_weights: wrong blob kind '" + header.kind + "'");
  if (partial_manifest.empty() && BackboneConfig::from_json(header.config) != config_)
    throw CheckpointError("load_weights: config mismatch for " + path.string());
  load_blob_tensors(path, params_, partial_manifest);
}

}  // namespace sv4d
