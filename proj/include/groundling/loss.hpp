#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "groundling/nn.hpp"
#include "groundling/rng.hpp"
#include "groundling/tensor.hpp"
#include "groundling/world.hpp"

namespace groundling::loss {

using ad::Tensor;

// The four training losses and the batch target construction. The alignment
// and localization terms read post-fusion features; the batch contrastive
// term reads the pre-fusion features only, so fused text/image features can
// never leak paired information across the batch.

struct LossWeights {
    double loc = 1.0, intra = 1.0, inter = 1.0, mlm = 1.0;

    void validate() const {
        if (loc < 0 || intra < 0 || inter < 0 || mlm < 0)
            throw ConfigError("loss weights must be nonnegative");
    }
};

inline constexpr double kFocalAlpha = 0.25;  // standard one-stage defaults
inline constexpr int kFocalGamma = 2;

// ----------------------------- localization -----------------------------

// FCOS-style centerness from the region center's distances to the box sides
inline double centerness_target(double l, double t, double r, double b) {
    const double lr = std::min(l, r) / std::max(l, r);
    const double tb = std::min(t, b) / std::max(t, b);
    return std::sqrt(lr * tb);
}

inline double giou_value(const world::Box& a, const world::Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enclose = ew * eh;
    return inter / uni - (enclose - uni) / enclose;
}

struct LocResult {
    Tensor value;
    int positives = 0;
};

// mean over positive regions of [1 - GIoU(pred, gt)] plus centerness BCE
inline LocResult loc_loss(const nn::BoxPred& pred, const world::GroundingSample& sample,
                          const world::AnchorGrid& anchors) {
    std::vector<int> pos;
    for (int r = 0; r < sample.regions(); ++r)
        if (sample.region_match[static_cast<size_t>(r)] >= 0) pos.push_back(r);
    if (pos.empty()) return {Tensor::scalar(0.0), 0};

    const int n = static_cast<int>(pos.size());
    std::vector<double> cx(n), cy(n), gx1(n), gy1(n), gx2(n), gy2(n), cness(n);
    for (int i = 0; i < n; ++i) {
        const int r = pos[static_cast<size_t>(i)];
        const auto& box =
            sample.scene.objects[static_cast<size_t>(sample.region_match[static_cast<size_t>(r)])]
                .box;
        cx[i] = anchors.cx(r);
        cy[i] = anchors.cy(r);
        gx1[i] = box.x1;
        gy1[i] = box.y1;
        gx2[i] = box.x2;
        gy2[i] = box.y2;
        cness[i] = centerness_target(cx[i] - box.x1, cy[i] - box.y1, box.x2 - cx[i],
                                     box.y2 - cy[i]);
    }
    auto cvec = [](std::vector<double> v) {
        const int64_t rows = static_cast<int64_t>(v.size());
        return Tensor::from({rows, 1}, std::move(v));
    };
    Tensor tcx = cvec(cx), tcy = cvec(cy);
    Tensor tgx1 = cvec(gx1), tgy1 = cvec(gy1), tgx2 = cvec(gx2), tgy2 = cvec(gy2);

    using namespace ad;
    Tensor off = take_rows(pred.offsets, pos);
    Tensor px1 = sub(tcx, slice_cols(off, 0, 1));
    Tensor py1 = sub(tcy, slice_cols(off, 1, 2));
    Tensor px2 = add(tcx, slice_cols(off, 2, 3));
    Tensor py2 = add(tcy, slice_cols(off, 3, 4));

    Tensor iw = relu(sub(minimum(px2, tgx2), maximum(px1, tgx1)));
    Tensor ih = relu(sub(minimum(py2, tgy2), maximum(py1, tgy1)));
    Tensor inter = mul(iw, ih);
    Tensor area_p = mul(sub(px2, px1), sub(py2, py1));
    Tensor area_g = mul(sub(tgx2, tgx1), sub(tgy2, tgy1));
    Tensor uni = sub(add(area_p, area_g), inter);
    Tensor iou = div(inter, uni);
    Tensor enclose = mul(sub(maximum(px2, tgx2), minimum(px1, tgx1)),
                         sub(maximum(py2, tgy2), minimum(py1, tgy1)));
    Tensor giou = sub(iou, div(sub(enclose, uni), enclose));
    Tensor giou_term = mean_all(add_const(neg(giou), 1.0));

    Tensor cness_term = mean_all(bce_with_logits(take_rows(pred.centerness, pos), cness));
    return {add(giou_term, cness_term), n};
}

// ----------------------------- intra-image alignment -----------------------------

struct IntraResult {
    Tensor value;
    bool all_masked = false;
    int cells = 0;
};

// Elementwise binary focal loss over (region, token) cells whose token lies
// inside a phrase span; sentinel and filler columns are masked out. Mean over
// unmasked cells.
inline IntraResult intra_alignment_loss(const Tensor& s, const world::TargetAffinity& targets,
                                        const world::TextSpec& text) {
    const int64_t rows = s.rows(), cols = s.cols();
    if (rows != targets.rows || cols != targets.cols)
        throw ShapeError("intra_alignment_loss: logits " + shape_str(s.shape()) +
                         " vs targets [" + std::to_string(targets.rows) + "x" +
                         std::to_string(targets.cols) + "]");
    std::vector<double> col_in_span(static_cast<size_t>(cols), 0.0);
    for (const auto& span : text.spans)
        for (int c = span.start; c < span.end; ++c) col_in_span[static_cast<size_t>(c)] = 1.0;

    std::vector<double> wpos(static_cast<size_t>(rows * cols), 0.0);
    std::vector<double> wneg(static_cast<size_t>(rows * cols), 0.0);
    int cells = 0;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            if (col_in_span[static_cast<size_t>(c)] == 0.0) continue;
            ++cells;
            if (targets.at(static_cast<int>(r), static_cast<int>(c)))
                wpos[static_cast<size_t>(r * cols + c)] = 1.0;
            else
                wneg[static_cast<size_t>(r * cols + c)] = 1.0;
        }
    if (cells == 0) return {Tensor::scalar(0.0), true, 0};

    using namespace ad;
    // focal terms written against stable primitives:
    //   -log p  = softplus(-x),  1-p = sigmoid(-x)   (positives)
    //   -log(1-p) = softplus(x),   p = sigmoid(x)    (negatives)
    Tensor neg_s = neg(s);
    Tensor focal_pos = scale(mul(square(sigmoid(neg_s)), softplus(neg_s)), kFocalAlpha);
    Tensor focal_neg = scale(mul(square(sigmoid(s)), softplus(s)), 1.0 - kFocalAlpha);
    Tensor pos_w = Tensor::from({rows, cols}, std::move(wpos));
    Tensor neg_w = Tensor::from({rows, cols}, std::move(wneg));
    Tensor total = add(sum_all(mul(focal_pos, pos_w)), sum_all(mul(focal_neg, neg_w)));
    return {scale(total, 1.0 / cells), false, cells};
}

// ----------------------------- batch targets -----------------------------

// Per-sample targets plus the label-propagated batch-wise matrix. Off-diagonal
// positives exist only where the column lives in a detection-type text span
// whose label string equals the region's ground-truth label. Grounding-type
// columns never receive propagated positives: their phrases carry context
// unique to their own image.
struct BatchTargets {
    int samples = 0;
    int total_regions = 0, total_tokens = 0;
    std::vector<int64_t> row_off, col_off;       // size samples + 1
    std::vector<world::TextType> text_type;      // per sample
    std::vector<std::string> row_label;          // per batch region, "" unmatched
    std::vector<std::string> col_label;          // per batch column, "" outside spans
    std::vector<uint8_t> t;                      // dense [total_regions x total_tokens]

    uint8_t at(int r, int c) const { return t[static_cast<size_t>(r) * total_tokens + c]; }
    uint8_t block_at(int i, int j, int r, int c) const {
        return at(static_cast<int>(row_off[static_cast<size_t>(i)]) + r,
                  static_cast<int>(col_off[static_cast<size_t>(j)]) + c);
    }
};

inline BatchTargets propagate_labels(const std::vector<world::GroundingSample>& batch) {
    if (batch.empty()) throw PreconditionError("propagate_labels: empty batch");
    BatchTargets bt;
    bt.samples = static_cast<int>(batch.size());
    bt.row_off.push_back(0);
    bt.col_off.push_back(0);
    for (const auto& s : batch) {
        bt.row_off.push_back(bt.row_off.back() + s.regions());
        bt.col_off.push_back(bt.col_off.back() + s.text.tokens());
        bt.text_type.push_back(s.text.type);
        for (int r = 0; r < s.regions(); ++r) bt.row_label.push_back(s.region_label(r));
        std::vector<std::string> cols(static_cast<size_t>(s.text.tokens()));
        for (const auto& span : s.text.spans)
            for (int c = span.start; c < span.end; ++c) cols[static_cast<size_t>(c)] = span.label;
        for (auto& c : cols) bt.col_label.push_back(std::move(c));
    }
    bt.total_regions = static_cast<int>(bt.row_off.back());
    bt.total_tokens = static_cast<int>(bt.col_off.back());
    bt.t.assign(static_cast<size_t>(bt.total_regions) * bt.total_tokens, 0);

    for (int i = 0; i < bt.samples; ++i) {
        const auto& sample = batch[static_cast<size_t>(i)];
        const int r0 = static_cast<int>(bt.row_off[static_cast<size_t>(i)]);
        // diagonal block: the per-sample target affinity, copied verbatim
        for (int r = 0; r < sample.targets.rows; ++r) {
            const int c0 = static_cast<int>(bt.col_off[static_cast<size_t>(i)]);
            for (int c = 0; c < sample.targets.cols; ++c)
                bt.t[static_cast<size_t>(r0 + r) * bt.total_tokens + c0 + c] =
                    sample.targets.at(r, c);
        }
        // off-diagonal blocks by label propagation
        for (int r = 0; r < sample.regions(); ++r) {
            const std::string& label = bt.row_label[static_cast<size_t>(r0 + r)];
            if (label.empty()) continue;
            for (int j = 0; j < bt.samples; ++j) {
                if (j == i) continue;
                if (bt.text_type[static_cast<size_t>(j)] != world::TextType::Detection) continue;
                const int c0 = static_cast<int>(bt.col_off[static_cast<size_t>(j)]);
                const int cn = batch[static_cast<size_t>(j)].text.tokens();
                for (int c = 0; c < cn; ++c) {
                    if (bt.col_label[static_cast<size_t>(c0 + c)] == label)
                        bt.t[static_cast<size_t>(r0 + r) * bt.total_tokens + c0 + c] = 1;
                }
            }
        }
    }
    return bt;
}

// ----------------------------- inter-image contrastive -----------------------------

struct InterResult {
    Tensor value;
    bool no_positives = false;
    int positive_rows = 0, positive_cols = 0;
};

// Bidirectional contrastive loss over the batch similarity matrix
// S[r,c] = o_pre[r] . p_pre[c] / tau. Rows (regions) with at least one
// positive take a soft cross-entropy against the uniform distribution over
// their positives; columns symmetrically. Mean over positive rows plus mean
// over positive columns.
inline InterResult inter_contrastive_loss(const std::vector<Tensor>& o_pre,
                                          const std::vector<Tensor>& p_pre,
                                          const BatchTargets& targets, double tau) {
    if (tau <= 0) throw ConfigError("inter_contrastive_loss: tau must be positive");
    if (o_pre.empty() || o_pre.size() != p_pre.size())
        throw PreconditionError("inter_contrastive_loss: feature lists disagree");

    using namespace ad;
    Tensor o_all = o_pre.size() == 1 ? o_pre[0] : concat_rows(o_pre);
    Tensor p_all = p_pre.size() == 1 ? p_pre[0] : concat_rows(p_pre);
    const int64_t rows = o_all.rows(), cols = p_all.rows();
    if (rows != targets.total_regions || cols != targets.total_tokens)
        throw ShapeError("inter_contrastive_loss: features do not match batch targets");

    std::vector<int> row_pos(static_cast<size_t>(rows), 0), col_pos(static_cast<size_t>(cols), 0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            if (targets.at(static_cast<int>(r), static_cast<int>(c))) {
                ++row_pos[static_cast<size_t>(r)];
                ++col_pos[static_cast<size_t>(c)];
            }
    int n_rows = 0, n_cols = 0;
    for (int v : row_pos) n_rows += v > 0;
    for (int v : col_pos) n_cols += v > 0;
    if (n_rows == 0 && n_cols == 0) return {Tensor::scalar(0.0), true, 0, 0};

    Tensor s = scale(matmul(o_all, transpose(p_all)), 1.0 / tau);

    Tensor value = Tensor::scalar(0.0);
    if (n_rows > 0) {
        std::vector<double> sel(static_cast<size_t>(rows), 0.0);
        std::vector<double> w(static_cast<size_t>(rows * cols), 0.0);
        for (int64_t r = 0; r < rows; ++r) {
            if (row_pos[static_cast<size_t>(r)] == 0) continue;
            sel[static_cast<size_t>(r)] = 1.0 / n_rows;
            const double wv = 1.0 / (row_pos[static_cast<size_t>(r)] * static_cast<double>(n_rows));
            for (int64_t c = 0; c < cols; ++c)
                if (targets.at(static_cast<int>(r), static_cast<int>(c)))
                    w[static_cast<size_t>(r * cols + c)] = wv;
        }
        Tensor lse = logsumexp_rows(s);
        Tensor term = sub(sum_all(mul(lse, Tensor::from({rows, 1}, std::move(sel)))),
                          sum_all(mul(s, Tensor::from({rows, cols}, std::move(w)))));
        value = add(value, term);
    }
    if (n_cols > 0) {
        std::vector<double> sel(static_cast<size_t>(cols), 0.0);
        std::vector<double> w(static_cast<size_t>(rows * cols), 0.0);
        for (int64_t c = 0; c < cols; ++c) {
            if (col_pos[static_cast<size_t>(c)] == 0) continue;
            sel[static_cast<size_t>(c)] = 1.0 / n_cols;
            const double wv = 1.0 / (col_pos[static_cast<size_t>(c)] * static_cast<double>(n_cols));
            for (int64_t r = 0; r < rows; ++r)
                if (targets.at(static_cast<int>(r), static_cast<int>(c)))
                    w[static_cast<size_t>(r * cols + c)] = wv;
        }
        Tensor lse_cols = logsumexp_rows(transpose(s));
        Tensor term = sub(sum_all(mul(lse_cols, Tensor::from({cols, 1}, std::move(sel)))),
                          sum_all(mul(s, Tensor::from({rows, cols}, std::move(w)))));
        value = add(value, term);
    }
    return {value, false, n_rows, n_cols};
}

// ----------------------------- masked language modeling -----------------------------

struct MlmMask {
    std::vector<int> corrupted;                 // token ids after corruption
    std::vector<std::pair<int, int>> labels;    // (position, original id)
};

// BERT-style corruption: each non-sentinel token is selected independently
// with probability mask_rate; selected tokens go 80% [MASK], 10% random
// vocabulary word, 10% unchanged.
inline MlmMask mlm_mask(const std::vector<int>& token_ids, Rng& rng, double mask_rate) {
    if (!(mask_rate >= 0.0 && mask_rate < 1.0))
        throw PreconditionError("mlm_mask: mask_rate must lie in [0, 1)");
    MlmMask out;
    out.corrupted = token_ids;
    if (mask_rate == 0.0) return out;
    const int n_words = world::vocab_size() - world::kPeriod;  // non-sentinel tail of the vocab
    for (size_t i = 0; i < token_ids.size(); ++i) {
        if (world::is_sentinel(token_ids[i])) continue;
        if (rng.uniform() >= mask_rate) continue;
        out.labels.emplace_back(static_cast<int>(i), token_ids[i]);
        const double u = rng.uniform();
        if (u < 0.8)
            out.corrupted[i] = world::kMask;
        else if (u < 0.9)
            out.corrupted[i] = world::kPeriod + static_cast<int>(rng.uniform_int(n_words));
        // else: keep the original token
    }
    return out;
}

struct MlmResult {
    Tensor value;
    bool empty = false;
};

// two-layer MLP head over the fused token features at the labeled positions
inline MlmResult mlm_loss(const Tensor& p_fused, const std::vector<std::pair<int, int>>& labels,
                          const nn::ModelParams& params) {
    if (labels.empty()) return {Tensor::scalar(0.0), true};
    std::vector<int> positions;
    std::vector<int> truth;
    for (auto& [pos, id] : labels) {
        positions.push_back(pos);
        truth.push_back(id);
    }
    using namespace ad;
    Tensor x = take_rows(p_fused, positions);
    Tensor h = gelu(add_bias(matmul(x, params.mlm_w1), params.mlm_b1));
    Tensor logits = add_bias(matmul(h, params.mlm_w2), params.mlm_b2);
    return {softmax_xent_rows(logits, truth), false};
}

// ----------------------------- total objective -----------------------------

struct TotalLoss {
    Tensor total;
    double loc = 0, intra = 0, inter = 0, mlm = 0;
    bool intra_all_masked = false, inter_no_positives = false, mlm_empty = false;
};

// One batch forward: dual encode (keeping the pre-fusion features), fuse,
// then the weighted objective. Per-sample terms are averaged over the batch;
// the contrastive term spans the whole batch. When the MLM weight is active
// the text side runs on the corrupted tokens, as in BERT-style pre-training.
inline TotalLoss total_loss(const std::vector<world::GroundingSample>& batch,
                            const nn::ModelParams& params, const LossWeights& weights,
                            uint64_t mlm_seed, double mlm_rate = 0.15,
                            const nn::PromptOverride* prompt = nullptr) {
    weights.validate();
    if (batch.empty()) throw PreconditionError("total_loss: empty batch");
    if (prompt && weights.mlm > 0)
        throw PreconditionError("total_loss: MLM cannot run under a prompt override");

    using namespace ad;
    const world::AnchorGrid anchors(params.cfg.grid_h, params.cfg.grid_w);
    const double tau = params.cfg.tau();
    const int b = static_cast<int>(batch.size());

    std::vector<Tensor> o_pres, p_pres;
    Tensor loc_sum = Tensor::scalar(0.0), intra_sum = Tensor::scalar(0.0),
           mlm_sum = Tensor::scalar(0.0);
    int mlm_samples = 0, intra_live = 0;

    for (int i = 0; i < b; ++i) {
        const auto& sample = batch[static_cast<size_t>(i)];
        std::vector<int> ids = sample.text.token_ids;
        std::vector<std::pair<int, int>> mlm_labels;
        if (weights.mlm > 0) {
            Rng rng(derive_seed(mlm_seed, "mlm", static_cast<uint64_t>(i)));
            MlmMask mask = mlm_mask(ids, rng, mlm_rate);
            ids = std::move(mask.corrupted);
            mlm_labels = std::move(mask.labels);
        }
        Tensor o_pre = nn::encode_image(sample.image_tokens, params);
        Tensor p_pre = nn::encode_text(ids, params, prompt);
        auto [o, p] = nn::fuse(o_pre, p_pre, params);
        o_pres.push_back(o_pre);
        p_pres.push_back(p_pre);

        if (weights.intra > 0) {
            Tensor s = nn::matching_logits(o, p, tau);
            IntraResult ir = intra_alignment_loss(s, sample.targets, sample.text);
            if (!ir.all_masked) ++intra_live;
            intra_sum = add(intra_sum, ir.value);
        }
        if (weights.loc > 0) {
            nn::BoxPred bp = nn::predict_boxes(o, params);
            loc_sum = add(loc_sum, loc_loss(bp, sample, anchors).value);
        }
        if (weights.mlm > 0) {
            MlmResult mr = mlm_loss(p, mlm_labels, params);
            if (!mr.empty) {
                mlm_sum = add(mlm_sum, mr.value);
                ++mlm_samples;
            }
        }
    }

    TotalLoss out;
    Tensor total = Tensor::scalar(0.0);
    if (weights.loc > 0) {
        Tensor loc = scale(loc_sum, 1.0 / b);
        out.loc = loc.item();
        total = add(total, scale(loc, weights.loc));
    }
    if (weights.intra > 0) {
        Tensor intra = scale(intra_sum, 1.0 / b);
        out.intra = intra.item();
        out.intra_all_masked = intra_live == 0;
        total = add(total, scale(intra, weights.intra));
    }
    if (weights.inter > 0) {
        BatchTargets bt = propagate_labels(batch);
        InterResult ir = inter_contrastive_loss(o_pres, p_pres, bt, tau);
        out.inter = ir.value.item();
        out.inter_no_positives = ir.no_positives;
        total = add(total, scale(ir.value, weights.inter));
    }
    if (weights.mlm > 0) {
        out.mlm_empty = mlm_samples == 0;
        Tensor mlm = mlm_samples > 0 ? scale(mlm_sum, 1.0 / mlm_samples) : mlm_sum;
        out.mlm = mlm.item();
        total = add(total, scale(mlm, weights.mlm));
    }
    out.total = total;
    return out;
}

}  // namespace groundling::loss
