#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "groundling/rng.hpp"
#include "groundling/tensor.hpp"
#include "groundling/world.hpp"

namespace groundling::nn {

using ad::Tensor;

// Dual encoder + cross-modal fusion at toy scale. Image cells and text tokens
// are embedded into a shared width d, run through small pre-LN transformer
// stacks, then N_f rounds of bidirectional cross-attention. Region-word
// similarity logits replace a fixed classifier head; an anchor-free box head
// with a centerness channel does localization.

struct ModelConfig {
    int64_t d = 32;
    int n_v = 2;       // image self-attention blocks
    int n_t = 2;       // text self-attention blocks
    int n_f = 2;       // fusion cross-attention blocks
    int heads = 4;
    int64_t d_ff = 64;
    int64_t max_tokens = 256;
    int grid_h = 5, grid_w = 5;
    bool text_posenc = true;
    bool image_posenc = true;
    double init_std = 0.02;
    int64_t vocab = world::vocab_size();
    int64_t d_img = world::render_dim();

    // fixed similarity temperature; shared by the matching head and the
    // batch contrastive loss
    double tau() const { return 1.0 / std::sqrt(static_cast<double>(d)); }

    void validate() const {
        if (d <= 0 || d % 4 != 0) throw ConfigError("model: d must be a positive multiple of 4");
        if (heads <= 0 || d % heads != 0) throw ConfigError("model: heads must divide d");
        if (n_v < 0 || n_t < 0 || n_f < 0) throw ConfigError("model: negative block count");
        if (d_ff <= 0) throw ConfigError("model: d_ff must be positive");
        if (max_tokens <= 0 || max_tokens > 256)
            throw ConfigError("model: max_tokens must lie in (0, 256]");
        if (grid_h <= 0 || grid_w <= 0) throw ConfigError("model: bad grid");
        if (init_std <= 0) throw ConfigError("model: init_std must be positive");
    }
};

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv;
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    AttnParams attn;
    Tensor wo, bo;  // attention output projection
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// one fusion round: image queries text and text queries image, both reading
// the round's input features, each with its own residual output projection
struct FusionParams {
    Tensor ln_v_g, ln_v_b, ln_l_g, ln_l_b;
    AttnParams v_from_l;  // queries = image rows
    Tensor v_wo, v_bo;
    AttnParams l_from_v;  // queries = text rows
    Tensor l_wo, l_bo;
};

struct ModelParams {
    ModelConfig cfg;
    Tensor tok_emb;   // [vocab, d]
    Tensor txt_pos;   // [max_tokens, d], learned
    Tensor img_w, img_b;  // [d_img, d], [d]
    std::vector<BlockParams> img_blocks, txt_blocks;
    std::vector<FusionParams> fusion;
    Tensor box_w, box_b;  // [d, 5]: l, t, r, b offsets + centerness logit
    Tensor mlm_w1, mlm_b1, mlm_w2, mlm_b2;  // d -> d_ff -> vocab

    template <class F>
    void for_each_param(F&& fn) {
        fn("tok_emb", tok_emb);
        fn("txt_pos", txt_pos);
        fn("img_proj.w", img_w);
        fn("img_proj.b", img_b);
        auto visit_block = [&](const std::string& prefix, BlockParams& b) {
            fn(prefix + ".ln1.g", b.ln1_g);
            fn(prefix + ".ln1.b", b.ln1_b);
            fn(prefix + ".attn.wq", b.attn.wq);
            fn(prefix + ".attn.bq", b.attn.bq);
            fn(prefix + ".attn.wk", b.attn.wk);
            fn(prefix + ".attn.bk", b.attn.bk);
            fn(prefix + ".attn.wv", b.attn.wv);
            fn(prefix + ".attn.bv", b.attn.bv);
            fn(prefix + ".attn.wo", b.wo);
            fn(prefix + ".attn.bo", b.bo);
            fn(prefix + ".ln2.g", b.ln2_g);
            fn(prefix + ".ln2.b", b.ln2_b);
            fn(prefix + ".mlp.w1", b.mlp_w1);
            fn(prefix + ".mlp.b1", b.mlp_b1);
            fn(prefix + ".mlp.w2", b.mlp_w2);
            fn(prefix + ".mlp.b2", b.mlp_b2);
        };
        for (size_t i = 0; i < img_blocks.size(); ++i)
            visit_block("img_blk" + std::to_string(i), img_blocks[i]);
        for (size_t i = 0; i < txt_blocks.size(); ++i)
            visit_block("txt_blk" + std::to_string(i), txt_blocks[i]);
        for (size_t i = 0; i < fusion.size(); ++i) {
            const std::string p = "fus" + std::to_string(i);
            FusionParams& f = fusion[i];
            fn(p + ".ln_v.g", f.ln_v_g);
            fn(p + ".ln_v.b", f.ln_v_b);
            fn(p + ".ln_l.g", f.ln_l_g);
            fn(p + ".ln_l.b", f.ln_l_b);
            fn(p + ".v_from_l.wq", f.v_from_l.wq);
            fn(p + ".v_from_l.bq", f.v_from_l.bq);
            fn(p + ".v_from_l.wk", f.v_from_l.wk);
            fn(p + ".v_from_l.bk", f.v_from_l.bk);
            fn(p + ".v_from_l.wv", f.v_from_l.wv);
            fn(p + ".v_from_l.bv", f.v_from_l.bv);
            fn(p + ".v_from_l.wo", f.v_wo);
            fn(p + ".v_from_l.bo", f.v_bo);
            fn(p + ".l_from_v.wq", f.l_from_v.wq);
            fn(p + ".l_from_v.bq", f.l_from_v.bq);
            fn(p + ".l_from_v.wk", f.l_from_v.wk);
            fn(p + ".l_from_v.bk", f.l_from_v.bk);
            fn(p + ".l_from_v.wv", f.l_from_v.wv);
            fn(p + ".l_from_v.bv", f.l_from_v.bv);
            fn(p + ".l_from_v.wo", f.l_wo);
            fn(p + ".l_from_v.bo", f.l_bo);
        }
        fn("box.w", box_w);
        fn("box.b", box_b);
        fn("mlm.w1", mlm_w1);
        fn("mlm.b1", mlm_b1);
        fn("mlm.w2", mlm_w2);
        fn("mlm.b2", mlm_b2);
    }
};

namespace detail {

inline Tensor init_normal(std::vector<int64_t> shape, Rng& rng, double std_dev) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = rng.normal(0.0, std_dev);
    return Tensor::from(std::move(shape), std::move(data), true);
}

inline Tensor init_zeros(std::vector<int64_t> shape) {
    return Tensor::zeros(std::move(shape), true);
}

inline Tensor init_ones(std::vector<int64_t> shape) {
    return Tensor::full(std::move(shape), 1.0, true);
}

inline AttnParams init_attn(int64_t d, Rng& rng, double std_dev) {
    return AttnParams{init_normal({d, d}, rng, std_dev), init_zeros({d}),
                      init_normal({d, d}, rng, std_dev), init_zeros({d}),
                      init_normal({d, d}, rng, std_dev), init_zeros({d})};
}

inline BlockParams init_block(const ModelConfig& cfg, Rng& rng) {
    BlockParams b;
    b.ln1_g = init_ones({cfg.d});
    b.ln1_b = init_zeros({cfg.d});
    b.attn = init_attn(cfg.d, rng, cfg.init_std);
    b.wo = init_normal({cfg.d, cfg.d}, rng, cfg.init_std);
    b.bo = init_zeros({cfg.d});
    b.ln2_g = init_ones({cfg.d});
    b.ln2_b = init_zeros({cfg.d});
    b.mlp_w1 = init_normal({cfg.d, cfg.d_ff}, rng, cfg.init_std);
    b.mlp_b1 = init_zeros({cfg.d_ff});
    b.mlp_w2 = init_normal({cfg.d_ff, cfg.d}, rng, cfg.init_std);
    b.mlp_b2 = init_zeros({cfg.d});
    return b;
}

}  // namespace detail

// Fusion output projections start at zero so training begins from the exact
// no-fusion identity; everything else draws from N(0, init_std^2).
inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init"));
    ModelParams p;
    p.cfg = cfg;
    p.tok_emb = detail::init_normal({cfg.vocab, cfg.d}, rng, cfg.init_std);
    p.txt_pos = detail::init_normal({cfg.max_tokens, cfg.d}, rng, cfg.init_std);
    p.img_w = detail::init_normal({cfg.d_img, cfg.d}, rng, cfg.init_std);
    p.img_b = detail::init_zeros({cfg.d});
    for (int i = 0; i < cfg.n_v; ++i) p.img_blocks.push_back(detail::init_block(cfg, rng));
    for (int i = 0; i < cfg.n_t; ++i) p.txt_blocks.push_back(detail::init_block(cfg, rng));
    for (int i = 0; i < cfg.n_f; ++i) {
        FusionParams f;
        f.ln_v_g = detail::init_ones({cfg.d});
        f.ln_v_b = detail::init_zeros({cfg.d});
        f.ln_l_g = detail::init_ones({cfg.d});
        f.ln_l_b = detail::init_zeros({cfg.d});
        f.v_from_l = detail::init_attn(cfg.d, rng, cfg.init_std);
        f.v_wo = detail::init_zeros({cfg.d, cfg.d});
        f.v_bo = detail::init_zeros({cfg.d});
        f.l_from_v = detail::init_attn(cfg.d, rng, cfg.init_std);
        f.l_wo = detail::init_zeros({cfg.d, cfg.d});
        f.l_bo = detail::init_zeros({cfg.d});
        p.fusion.push_back(std::move(f));
    }
    p.box_w = detail::init_normal({cfg.d, 5}, rng, cfg.init_std);
    p.box_b = detail::init_zeros({5});
    p.mlm_w1 = detail::init_normal({cfg.d, cfg.d_ff}, rng, cfg.init_std);
    p.mlm_b1 = detail::init_zeros({cfg.d_ff});
    p.mlm_w2 = detail::init_normal({cfg.d_ff, cfg.vocab}, rng, cfg.init_std);
    p.mlm_b2 = detail::init_zeros({cfg.vocab});
    return p;
}

inline int64_t param_count(ModelParams& p) {
    int64_t n = 0;
    p.for_each_param([&](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
}

// ----------------------------- forward pieces -----------------------------

// multi-head attention core; queries from q_in rows, keys/values from kv_in
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                                   const AttnParams& p, int heads) {
    const int64_t d = q_in.cols();
    const int64_t dh = d / heads;
    Tensor q = ad::add_bias(ad::matmul(q_in, p.wq), p.bq);
    Tensor k = ad::add_bias(ad::matmul(kv_in, p.wk), p.bk);
    Tensor v = ad::add_bias(ad::matmul(kv_in, p.wv), p.bv);
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
        outs.push_back(ad::matmul(ad::row_softmax(scores), vh));
    }
    return ad::concat_cols(outs);
}

// pre-LN transformer block; with zero output projections it is the identity
inline Tensor encoder_block(const Tensor& x, const BlockParams& b, int heads) {
    Tensor h = ad::layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor a = multi_head_attention(h, h, b.attn, heads);
    Tensor x1 = ad::add(x, ad::add_bias(ad::matmul(a, b.wo), b.bo));
    Tensor h2 = ad::layer_norm(x1, b.ln2_g, b.ln2_b);
    Tensor m = ad::gelu(ad::add_bias(ad::matmul(h2, b.mlp_w1), b.mlp_b1));
    return ad::add(x1, ad::add_bias(ad::matmul(m, b.mlp_w2), b.mlp_b2));
}

// 2-D sinusoidal positional code per grid cell, constant
inline Tensor image_posenc(int grid_h, int grid_w, int64_t d) {
    const int64_t half = d / 2;
    std::vector<double> data(static_cast<size_t>(grid_h * grid_w * d));
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            double* row = data.data() + (r * grid_w + c) * d;
            for (int64_t k = 0; k < half; k += 2) {
                const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
                row[k] = std::sin(c * freq);
                row[k + 1] = std::cos(c * freq);
                row[half + k] = std::sin(r * freq);
                row[half + k + 1] = std::cos(r * freq);
            }
        }
    }
    return Tensor::from({static_cast<int64_t>(grid_h) * grid_w, d}, std::move(data));
}

// When a prompt is being tuned, its embedding matrix replaces the table
// lookup; positional encodings still apply.
struct PromptOverride {
    Tensor matrix;               // [tokens, d], requires_grad while tuning
    std::vector<int> token_ids;  // the fixed prompt this matrix stands in for
};

inline Tensor encode_text(const std::vector<int>& token_ids, const ModelParams& p,
                          const PromptOverride* prompt = nullptr) {
    const auto& cfg = p.cfg;
    const int64_t n = static_cast<int64_t>(token_ids.size());
    if (n == 0) throw InputError("encode_text: empty token sequence");
    if (n > cfg.max_tokens)
        throw InputError("encode_text: " + std::to_string(n) + " tokens exceed the cap of " +
                         std::to_string(cfg.max_tokens));
    Tensor x;
    if (prompt) {
        if (prompt->token_ids != token_ids)
            throw PreconditionError("prompt override does not match the sample text");
        x = prompt->matrix;
    } else {
        x = ad::embedding(p.tok_emb, token_ids);
    }
    if (cfg.text_posenc) x = ad::add(x, ad::slice_rows(p.txt_pos, 0, n));
    for (const auto& blk : p.txt_blocks) x = encoder_block(x, blk, cfg.heads);
    return x;
}

inline Tensor encode_image(const std::vector<double>& image_tokens, const ModelParams& p) {
    const auto& cfg = p.cfg;
    const int64_t cells = static_cast<int64_t>(cfg.grid_h) * cfg.grid_w;
    if (static_cast<int64_t>(image_tokens.size()) != cells * cfg.d_img)
        throw InputError("encode_image: expected " + std::to_string(cells) + " x " +
                         std::to_string(cfg.d_img) + " image tokens");
    Tensor x = Tensor::from({cells, cfg.d_img}, image_tokens);
    x = ad::add_bias(ad::matmul(x, p.img_w), p.img_b);
    if (cfg.image_posenc) x = ad::add(x, image_posenc(cfg.grid_h, cfg.grid_w, cfg.d));
    for (const auto& blk : p.img_blocks) x = encoder_block(x, blk, cfg.heads);
    return x;
}

// pre-fusion features (O̊, P̊)
inline std::pair<Tensor, Tensor> dual_encode(const world::GroundingSample& sample,
                                             const ModelParams& p,
                                             const PromptOverride* prompt = nullptr) {
    return {encode_image(sample.image_tokens, p), encode_text(sample.text.token_ids, p, prompt)};
}

// N_f rounds of bidirectional cross-attention; zero output projections (the
// initial state) make this the identity
inline std::pair<Tensor, Tensor> fuse(const Tensor& o_pre, const Tensor& p_pre,
                                      const ModelParams& p) {
    if (o_pre.cols() != p_pre.cols())
        throw ShapeError("fuse: feature widths disagree, " + shape_str(o_pre.shape()) + " vs " +
                         shape_str(p_pre.shape()));
    Tensor o = o_pre, t = p_pre;
    for (const auto& f : p.fusion) {
        Tensor on = ad::layer_norm(o, f.ln_v_g, f.ln_v_b);
        Tensor tn = ad::layer_norm(t, f.ln_l_g, f.ln_l_b);
        Tensor o2t = multi_head_attention(on, tn, f.v_from_l, p.cfg.heads);
        Tensor t2o = multi_head_attention(tn, on, f.l_from_v, p.cfg.heads);
        o = ad::add(o, ad::add_bias(ad::matmul(o2t, f.v_wo), f.v_bo));
        t = ad::add(t, ad::add_bias(ad::matmul(t2o, f.l_wo), f.l_bo));
    }
    return {o, t};
}

// region-word similarity logits S = (O P^T) / tau
inline Tensor matching_logits(const Tensor& o, const Tensor& p, double tau) {
    if (tau <= 0) throw ConfigError("matching_logits: tau must be positive");
    return ad::scale(ad::matmul(o, ad::transpose(p)), 1.0 / tau);
}

struct BoxPred {
    Tensor offsets;     // [R, 4] nonnegative (l, t, r, b) via softplus
    Tensor centerness;  // [R, 1] unconstrained logit
};

inline BoxPred predict_boxes(const Tensor& o, const ModelParams& p) {
    Tensor raw = ad::add_bias(ad::matmul(o, p.box_w), p.box_b);
    return BoxPred{ad::softplus(ad::slice_cols(raw, 0, 4)), ad::slice_cols(raw, 4, 5)};
}

// value-level decode around anchor centers; extents clamped to 1e-3
inline world::Box decode_box(double cx, double cy, const double* ltrb) {
    world::Box b{cx - ltrb[0], cy - ltrb[1], cx + ltrb[2], cy + ltrb[3]};
    if (b.x2 - b.x1 < 1e-3) b.x2 = b.x1 + 1e-3;
    if (b.y2 - b.y1 < 1e-3) b.y2 = b.y1 + 1e-3;
    return b;
}

struct Detection {
    world::Box box;
    double score = 0.0;
    int span = -1;  // index into the prompt's phrase spans
};

inline double sigmoid_value(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// score(region, span) = sigmoid(max logit over span tokens) * sigmoid(centerness);
// greedy per-span NMS keeps the highest-scored box of any overlapping cluster
inline std::vector<Detection> decode_detections(const Tensor& s, const BoxPred& pred,
                                                const world::AnchorGrid& anchors,
                                                const std::vector<world::Span>& spans,
                                                double score_thr, double nms_iou) {
    std::vector<Detection> candidates;
    const int regions = static_cast<int>(s.rows());
    for (int r = 0; r < regions; ++r) {
        const double cness = sigmoid_value(pred.centerness.at(r, 0));
        const double ltrb[4] = {pred.offsets.at(r, 0), pred.offsets.at(r, 1),
                                pred.offsets.at(r, 2), pred.offsets.at(r, 3)};
        const world::Box box = decode_box(anchors.cx(r), anchors.cy(r), ltrb);
        for (size_t sp = 0; sp < spans.size(); ++sp) {
            double best = -1e300;
            for (int c = spans[sp].start; c < spans[sp].end; ++c)
                best = std::max(best, s.at(r, c));
            const double score = sigmoid_value(best) * cness;
            if (score >= score_thr)
                candidates.push_back({box, score, static_cast<int>(sp)});
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& c : candidates) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.span == c.span && world::box_iou(k.box, c.box) >= nms_iou) suppressed = true;
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

// ----------------------------- checkpoints -----------------------------
// Binary layout (little-endian): magic "GRDL", u32 version, u64 config hash,
// the model config fields, u32 tensor count, then per tensor: u32 name length,
// name bytes, u32 rank, u64 extents, f64 data. Round-trips bit-exactly.

inline constexpr char kCheckpointMagic[4] = {'G', 'R', 'D', 'L'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CorruptArtifactError("checkpoint: truncated file");
    return v;
}

inline void write_config(std::ostream& out, const ModelConfig& c) {
    write_pod<int64_t>(out, c.d);
    write_pod<int32_t>(out, c.n_v);
    write_pod<int32_t>(out, c.n_t);
    write_pod<int32_t>(out, c.n_f);
    write_pod<int32_t>(out, c.heads);
    write_pod<int64_t>(out, c.d_ff);
    write_pod<int64_t>(out, c.max_tokens);
    write_pod<int32_t>(out, c.grid_h);
    write_pod<int32_t>(out, c.grid_w);
    write_pod<uint8_t>(out, c.text_posenc ? 1 : 0);
    write_pod<uint8_t>(out, c.image_posenc ? 1 : 0);
    write_pod<double>(out, c.init_std);
    write_pod<int64_t>(out, c.vocab);
    write_pod<int64_t>(out, c.d_img);
}

inline ModelConfig read_config(std::istream& in) {
    ModelConfig c;
    c.d = read_pod<int64_t>(in);
    c.n_v = read_pod<int32_t>(in);
    c.n_t = read_pod<int32_t>(in);
    c.n_f = read_pod<int32_t>(in);
    c.heads = read_pod<int32_t>(in);
    c.d_ff = read_pod<int64_t>(in);
    c.max_tokens = read_pod<int64_t>(in);
    c.grid_h = read_pod<int32_t>(in);
    c.grid_w = read_pod<int32_t>(in);
    c.text_posenc = read_pod<uint8_t>(in) != 0;
    c.image_posenc = read_pod<uint8_t>(in) != 0;
    c.init_std = read_pod<double>(in);
    c.vocab = read_pod<int64_t>(in);
    c.d_img = read_pod<int64_t>(in);
    return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelParams& params, uint64_t config_hash) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open checkpoint for writing: " + tmp);
        out.write(kCheckpointMagic, 4);
        detail::write_pod<uint32_t>(out, kCheckpointVersion);
        detail::write_pod<uint64_t>(out, config_hash);
        detail::write_config(out, params.cfg);
        uint32_t count = 0;
        params.for_each_param([&](const std::string&, Tensor&) { ++count; });
        detail::write_pod<uint32_t>(out, count);
        params.for_each_param([&](const std::string& name, Tensor& t) {
            detail::write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()));
            for (int64_t e : t.shape()) detail::write_pod<uint64_t>(out, static_cast<uint64_t>(e));
            out.write(reinterpret_cast<const char*>(t.values().data()),
                      static_cast<std::streamsize>(t.values().size() * sizeof(double)));
        });
        if (!out) throw IoError("checkpoint write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot move checkpoint into place: " + path);
}

struct Checkpoint {
    ModelParams params;
    uint64_t config_hash = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CorruptArtifactError("checkpoint: bad magic in " + path);
    const uint32_t version = detail::read_pod<uint32_t>(in);
    if (version != kCheckpointVersion)
        throw CorruptArtifactError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.config_hash = detail::read_pod<uint64_t>(in);
    ModelConfig cfg = detail::read_config(in);
    // rebuild the parameter structure, then overwrite every tensor
    ck.params = init_params(cfg, 0);
    const uint32_t count = detail::read_pod<uint32_t>(in);
    std::map<std::string, Tensor*> by_name;
    uint32_t expected = 0;
    ck.params.for_each_param([&](const std::string& name, Tensor& t) {
        by_name[name] = &t;
        ++expected;
    });
    if (count != expected)
        throw CorruptArtifactError("checkpoint: tensor count mismatch in " + path);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::read_pod<uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = detail::read_pod<uint32_t>(in);
        std::vector<int64_t> shape(rank);
        for (auto& e : shape) e = static_cast<int64_t>(detail::read_pod<uint64_t>(in));
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CorruptArtifactError("checkpoint: unknown tensor '" + name + "'");
        if (it->second->shape() != shape)
            throw CorruptArtifactError("checkpoint: shape mismatch for '" + name + "'");
        in.read(reinterpret_cast<char*>(it->second->values().data()),
                static_cast<std::streamsize>(it->second->values().size() * sizeof(double)));
        if (!in) throw CorruptArtifactError("checkpoint: truncated tensor '" + name + "'");
    }
    return ck;
}

}  // namespace groundling::nn
