#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "groundling/common.hpp"
#include "groundling/rng.hpp"

namespace groundling::world {

// Procedural grounding data: colored shapes on a grid, rendered into per-cell
// feature rows, paired with detection-style ("red circle . blue star .") or
// grounding-style ("a red circle beside a blue star") texts and the binary
// region x token target affinity matrix.

// ----------------------------- vocabulary -----------------------------
// Fixed closed vocabulary of 40 words. Ids are stable: they index the token
// embedding table and the one-hot blocks of rendered cells.

inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kPeriod = 4;
inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 6;
inline constexpr int kColorBase = 5;                    // ids 5..10
inline constexpr int kShapeBase = kColorBase + kNumColors;  // ids 11..16

inline const std::vector<std::string>& vocab_words() {
    static const std::vector<std::string> words = {
        "[PAD]", "[CLS]", "[SEP]", "[MASK]", ".",
        // colors
        "red", "green", "blue", "yellow", "purple", "orange",
        // shapes
        "circle", "square", "triangle", "star", "diamond", "cross",
        // filler words for grounding sentences
        "a", "the", "there", "is", "and", "beside", "above", "below", "near",
        "next", "to", "left", "right", "of", "touching", "between", "far",
        "from", "lone", "behind", "front", "in", "on"};
    return words;
}

inline int vocab_size() { return static_cast<int>(vocab_words().size()); }

inline int word_to_id(const std::string& w) {
    const auto& words = vocab_words();
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == w) return static_cast<int>(i);
    throw VocabError("unknown word: '" + w + "'");
}

inline const std::string& id_to_word(int id) {
    if (id < 0 || id >= vocab_size())
        throw VocabError("token id out of range: " + std::to_string(id));
    return vocab_words()[static_cast<size_t>(id)];
}

inline bool is_sentinel(int id) { return id == kPad || id == kCls || id == kSep || id == kMask; }

inline const std::string& color_name(int c) { return vocab_words()[kColorBase + c]; }
inline const std::string& shape_name(int s) { return vocab_words()[kShapeBase + s]; }

// [CLS] words... [SEP]
inline std::vector<int> tokenize(const std::vector<std::string>& words) {
    std::vector<int> ids;
    ids.reserve(words.size() + 2);
    ids.push_back(kCls);
    for (const auto& w : words) ids.push_back(word_to_id(w));
    ids.push_back(kSep);
    return ids;
}

inline std::vector<std::string> detokenize(const std::vector<int>& ids) {
    std::vector<std::string> words;
    for (int id : ids)
        if (!is_sentinel(id)) words.push_back(id_to_word(id));
    return words;
}

// ----------------------------- scenes -----------------------------

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool contains(double px, double py) const {
        return px >= x1 && px <= x2 && py >= y1 && py <= y2;
    }
};

inline double box_iou(const Box& a, const Box& b) {
    if (a.area() <= 0.0 || b.area() <= 0.0) return 0.0;
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct SceneObject {
    int color = 0;
    int shape = 0;
    Box box;
    std::string label() const { return color_name(color) + " " + shape_name(shape); }
};

struct Scene {
    int grid_h = 0, grid_w = 0;
    std::vector<SceneObject> objects;
    uint64_t seed = 0;
};

struct WorldConfig {
    int grid_h = 5, grid_w = 5;
    std::vector<int> color_pool = {0, 1, 2, 3, 4, 5};
    std::vector<int> shape_pool = {0, 1, 2, 3, 4, 5};
    std::vector<std::pair<int, int>> heldout;  // (color, shape) combos excluded from training
    int min_objects = 1, max_objects = 3;
    int distractor_min = 0, distractor_max = 2;
    double noise_sigma = 0.05;
    double overlap_iou_max = 0.3;
    int max_place_retries = 100;
    int max_tokens = 256;

    bool is_heldout(int c, int s) const {
        for (auto& [hc, hs] : heldout)
            if (hc == c && hs == s) return true;
        return false;
    }

    std::vector<std::pair<int, int>> combos(bool include_heldout) const {
        std::vector<std::pair<int, int>> out;
        for (int c : color_pool)
            for (int s : shape_pool)
                if (include_heldout || !is_heldout(c, s)) out.emplace_back(c, s);
        return out;
    }

    void validate() const {
        if (grid_h <= 0 || grid_w <= 0) throw ConfigError("world: grid extents must be positive");
        if (color_pool.empty() || shape_pool.empty())
            throw ConfigError("world: attribute pools must be non-empty");
        for (int c : color_pool)
            if (c < 0 || c >= kNumColors) throw ConfigError("world: color index out of range");
        for (int s : shape_pool)
            if (s < 0 || s >= kNumShapes) throw ConfigError("world: shape index out of range");
        for (auto& [c, s] : heldout) {
            if (std::find(color_pool.begin(), color_pool.end(), c) == color_pool.end() ||
                std::find(shape_pool.begin(), shape_pool.end(), s) == shape_pool.end())
                throw ConfigError("world: heldout combo outside the color x shape product");
        }
        if (min_objects < 0 || max_objects < min_objects)
            throw ConfigError("world: bad object count range");
        if (distractor_min < 0 || distractor_max < distractor_min)
            throw ConfigError("world: bad distractor range");
        if (noise_sigma < 0) throw ConfigError("world: noise_sigma must be >= 0");
        if (max_tokens <= 0 || max_tokens > 256)
            throw ConfigError("world: max_tokens must lie in (0, 256]");
        if (combos(false).empty())
            throw ConfigError("world: heldout combos exclude every training label");
    }
};

// Which combos a generated scene may contain. Training scenes never contain
// heldout combos; heldout-eval scenes are forced to contain at least one.
enum class ScenePolicy { TrainExcludeHeldout, AnyCombo, RequireHeldout };

inline Scene sample_scene(uint64_t seed, const WorldConfig& cfg,
                          ScenePolicy policy = ScenePolicy::TrainExcludeHeldout) {
    cfg.validate();
    auto pool = cfg.combos(policy != ScenePolicy::TrainExcludeHeldout);
    if (policy == ScenePolicy::RequireHeldout && cfg.heldout.empty())
        throw PreconditionError("sample_scene: RequireHeldout with no heldout combos");

    Rng rng(derive_seed(seed, "scene"));
    Scene scene;
    scene.grid_h = cfg.grid_h;
    scene.grid_w = cfg.grid_w;
    scene.seed = seed;

    int count = cfg.min_objects +
                static_cast<int>(rng.uniform_int(cfg.max_objects - cfg.min_objects + 1));
    if (policy == ScenePolicy::RequireHeldout) count = std::max(count, 1);
    for (int i = 0; i < count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_place_retries && !placed; ++attempt) {
            std::pair<int, int> combo;
            if (policy == ScenePolicy::RequireHeldout && i == 0) {
                combo = cfg.heldout[static_cast<size_t>(
                    rng.uniform_int(static_cast<int64_t>(cfg.heldout.size())))];
            } else {
                combo = pool[static_cast<size_t>(
                    rng.uniform_int(static_cast<int64_t>(pool.size())))];
            }
            const double hw = rng.uniform(0.55, 1.2);
            const double hh = rng.uniform(0.55, 1.2);
            const double cx = rng.uniform(hw, cfg.grid_w - hw);
            const double cy = rng.uniform(hh, cfg.grid_h - hh);
            Box box{cx - hw, cy - hh, cx + hw, cy + hh};
            bool ok = true;
            for (const auto& other : scene.objects)
                if (box_iou(box, other.box) >= cfg.overlap_iou_max) ok = false;
            if (ok) {
                scene.objects.push_back({combo.first, combo.second, box});
                placed = true;
            }
        }
        if (!placed && i < cfg.min_objects)
            throw GenerationError("sample_scene: could not place " +
                                  std::to_string(cfg.min_objects) + " objects within " +
                                  std::to_string(cfg.max_place_retries) + " retries");
        if (!placed) break;  // optional objects beyond the minimum may be dropped
    }
    return scene;
}

// ----------------------------- rendering -----------------------------
// Per-cell feature row: [occupied, color one-hot (6), shape one-hot (6),
// distance of the cell center to the covering box center]. Cells covered by
// several boxes get the sum of their blocks; background rows are all-zero.

inline int render_dim() { return 1 + kNumColors + kNumShapes + 1; }

inline std::vector<double> background_code() {
    return std::vector<double>(static_cast<size_t>(render_dim()), 0.0);
}

inline std::vector<double> render_scene(const Scene& scene, double noise_sigma) {
    if (noise_sigma < 0) throw PreconditionError("render_scene: noise_sigma must be >= 0");
    const int d = render_dim();
    const int cells = scene.grid_h * scene.grid_w;
    std::vector<double> rows(static_cast<size_t>(cells * d), 0.0);
    for (int r = 0; r < scene.grid_h; ++r) {
        for (int c = 0; c < scene.grid_w; ++c) {
            const double px = c + 0.5, py = r + 0.5;
            double* row = rows.data() + (r * scene.grid_w + c) * d;
            for (const auto& obj : scene.objects) {
                if (!obj.box.contains(px, py)) continue;
                row[0] += 1.0;
                row[1 + obj.color] += 1.0;
                row[1 + kNumColors + obj.shape] += 1.0;
                const double dx = px - obj.box.cx(), dy = py - obj.box.cy();
                row[d - 1] += std::sqrt(dx * dx + dy * dy);
            }
        }
    }
    if (noise_sigma > 0) {
        Rng rng(derive_seed(scene.seed, "render"));
        for (auto& v : rows) v += rng.normal(0.0, noise_sigma);
    }
    return rows;
}

// ----------------------------- texts -----------------------------

enum class TextType { Detection, Grounding };

struct Span {
    int start = 0, end = 0;   // token range [start, end)
    std::string label;        // phrase string, e.g. "red circle"
    int object_index = -1;    // referenced object, or -1 (distractor / by-label span)
};

struct TextSpec {
    TextType type = TextType::Detection;
    std::vector<int> token_ids;
    std::vector<Span> spans;

    int tokens() const { return static_cast<int>(token_ids.size()); }
};

// Order-preserving detection prompt over explicit label phrases: each label's
// words followed by ".", wrapped in [CLS]/[SEP]. Used verbatim by evaluation;
// training shuffles and appends distractors before calling this.
inline TextSpec make_detection_prompt(const std::vector<std::string>& labels,
                                      int max_tokens = 256) {
    TextSpec text;
    text.type = TextType::Detection;
    text.token_ids.push_back(kCls);
    for (const auto& label : labels) {
        Span span;
        span.start = text.tokens();
        for (const auto& w : split_str(label, ' '))
            if (!w.empty()) text.token_ids.push_back(word_to_id(w));
        span.end = text.tokens();
        if (span.end == span.start) throw InputError("empty label phrase");
        span.label = label;
        text.spans.push_back(span);
        text.token_ids.push_back(kPeriod);
    }
    text.token_ids.push_back(kSep);
    if (text.tokens() > max_tokens)
        throw InputError("detection prompt exceeds token budget: " +
                         std::to_string(text.tokens()) + " > " + std::to_string(max_tokens));
    return text;
}

namespace detail {

struct Template {
    int arity;
    // words, with "{0}", "{1}" as phrase slots
    std::vector<std::string> words;
};

inline const std::vector<Template>& grounding_templates() {
    static const std::vector<Template> t = {
        {1, {"there", "is", "a", "{0}"}},
        {1, {"a", "lone", "{0}"}},
        {1, {"the", "{0}", "in", "front"}},
        {2, {"a", "{0}", "beside", "a", "{1}"}},
        {2, {"the", "{0}", "above", "the", "{1}"}},
        {2, {"a", "{0}", "near", "a", "{1}"}},
        {2, {"the", "{0}", "left", "of", "the", "{1}"}},
        {2, {"the", "{0}", "right", "of", "the", "{1}"}},
        {2, {"a", "{0}", "and", "a", "{1}"}},
        {2, {"the", "{0}", "next", "to", "the", "{1}"}},
        {2, {"a", "{0}", "far", "from", "the", "{1}"}},
        {2, {"a", "{0}", "behind", "the", "{1}"}},
    };
    return t;
}

}  // namespace detail

inline TextSpec synthesize_text(const Scene& scene, TextType mode, uint64_t seed,
                                const WorldConfig& cfg,
                                ScenePolicy policy = ScenePolicy::TrainExcludeHeldout) {
    Rng rng(derive_seed(seed, "text"));

    if (mode == TextType::Detection) {
        // present labels in first-appearance order, then sampled absent combos
        std::vector<std::string> labels;
        std::set<std::string> present;
        for (const auto& obj : scene.objects) {
            if (present.insert(obj.label()).second) labels.push_back(obj.label());
        }
        std::vector<std::string> absent;
        for (auto& [c, s] : cfg.combos(policy != ScenePolicy::TrainExcludeHeldout)) {
            std::string label = color_name(c) + " " + shape_name(s);
            if (!present.count(label)) absent.push_back(label);
        }
        int want = cfg.distractor_min +
                   static_cast<int>(rng.uniform_int(cfg.distractor_max - cfg.distractor_min + 1));
        want = std::min(want, static_cast<int>(absent.size()));
        rng.shuffle(absent);
        for (int i = 0; i < want; ++i) labels.push_back(absent[static_cast<size_t>(i)]);
        rng.shuffle(labels);

        TextSpec text = make_detection_prompt(labels, cfg.max_tokens);
        // bind spans: first object carrying the label, -1 for distractors
        for (auto& span : text.spans) {
            for (size_t i = 0; i < scene.objects.size(); ++i) {
                if (scene.objects[i].label() == span.label) {
                    span.object_index = static_cast<int>(i);
                    break;
                }
            }
        }
        return text;
    }

    // grounding sentence
    if (scene.objects.empty())
        throw PreconditionError("synthesize_text: grounding mode requires at least one object");
    const auto& templates = detail::grounding_templates();
    std::vector<int> eligible;
    for (size_t i = 0; i < templates.size(); ++i)
        if (templates[i].arity <= static_cast<int>(scene.objects.size()))
            eligible.push_back(static_cast<int>(i));
    const auto& tpl = templates[static_cast<size_t>(
        eligible[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(eligible.size())))])];

    std::vector<int> object_order(scene.objects.size());
    for (size_t i = 0; i < object_order.size(); ++i) object_order[i] = static_cast<int>(i);
    rng.shuffle(object_order);

    TextSpec text;
    text.type = TextType::Grounding;
    text.token_ids.push_back(kCls);
    for (const auto& w : tpl.words) {
        if (w.size() == 3 && w[0] == '{' && w[2] == '}') {
            const int obj = object_order[static_cast<size_t>(w[1] - '0')];
            const auto& o = scene.objects[static_cast<size_t>(obj)];
            Span span;
            span.start = text.tokens();
            text.token_ids.push_back(kColorBase + o.color);
            text.token_ids.push_back(kShapeBase + o.shape);
            span.end = text.tokens();
            span.label = o.label();
            span.object_index = obj;
            text.spans.push_back(span);
        } else {
            text.token_ids.push_back(word_to_id(w));
        }
    }
    text.token_ids.push_back(kSep);
    if (text.tokens() > cfg.max_tokens)
        throw InputError("grounding sentence exceeds token budget");
    return text;
}

// ----------------------------- anchors & targets -----------------------------

// One anchor per grid cell: the unit box of the cell, center at (c+.5, r+.5).
struct AnchorGrid {
    int h = 0, w = 0;
    explicit AnchorGrid(int grid_h, int grid_w) : h(grid_h), w(grid_w) {}
    int count() const { return h * w; }
    double cx(int r) const { return (r % w) + 0.5; }
    double cy(int r) const { return (r / w) + 0.5; }
    Box box(int r) const {
        const double x = static_cast<double>(r % w), y = static_cast<double>(r / w);
        return Box{x, y, x + 1.0, y + 1.0};
    }
};

struct TargetAffinity {
    int rows = 0, cols = 0;
    std::vector<uint8_t> m;  // row-major, entries in {0,1}

    uint8_t at(int r, int c) const { return m[static_cast<size_t>(r) * cols + c]; }
    void set(int r, int c, uint8_t v) { m[static_cast<size_t>(r) * cols + c] = v; }
};

// span index for each object, -1 when the text never references it
inline std::vector<int> object_to_span(const Scene& scene, const TextSpec& text) {
    std::vector<int> map(scene.objects.size(), -1);
    for (size_t s = 0; s < text.spans.size(); ++s) {
        const Span& span = text.spans[s];
        if (span.object_index >= static_cast<int>(scene.objects.size()))
            throw ConsistencyError("span references missing object " +
                                   std::to_string(span.object_index));
        if (text.type == TextType::Detection) {
            for (size_t o = 0; o < scene.objects.size(); ++o)
                if (scene.objects[o].label() == span.label) map[o] = static_cast<int>(s);
        } else if (span.object_index >= 0) {
            map[static_cast<size_t>(span.object_index)] = static_cast<int>(s);
        }
    }
    return map;
}

// Anchor-free assignment: an anchor matches the smallest spanned box whose
// interior contains the anchor center. Returns object index per anchor, -1
// for unmatched.
inline std::vector<int> match_anchors(const Scene& scene, const std::vector<int>& obj_span,
                                      const AnchorGrid& anchors) {
    std::vector<int> match(static_cast<size_t>(anchors.count()), -1);
    for (int r = 0; r < anchors.count(); ++r) {
        const double px = anchors.cx(r), py = anchors.cy(r);
        double best_area = 0.0;
        for (size_t o = 0; o < scene.objects.size(); ++o) {
            if (obj_span[o] < 0) continue;
            const Box& b = scene.objects[o].box;
            if (!b.contains(px, py)) continue;
            if (match[static_cast<size_t>(r)] < 0 || b.area() < best_area) {
                match[static_cast<size_t>(r)] = static_cast<int>(o);
                best_area = b.area();
            }
        }
    }
    return match;
}

inline TargetAffinity build_target_matrix(const Scene& scene, const TextSpec& text,
                                          const AnchorGrid& anchors, double iou_match_thr,
                                          std::vector<int>* region_match_out = nullptr) {
    if (!(iou_match_thr > 0.0 && iou_match_thr <= 1.0))
        throw PreconditionError("build_target_matrix: iou_match_thr must lie in (0,1]");
    const auto obj_span = object_to_span(scene, text);
    const auto match = match_anchors(scene, obj_span, anchors);

    TargetAffinity t;
    t.rows = anchors.count();
    t.cols = text.tokens();
    t.m.assign(static_cast<size_t>(t.rows) * t.cols, 0);
    for (int r = 0; r < t.rows; ++r) {
        const int o = match[static_cast<size_t>(r)];
        if (o < 0) continue;
        const Span& span = text.spans[static_cast<size_t>(obj_span[static_cast<size_t>(o)])];
        for (int c = span.start; c < span.end; ++c) t.set(r, c, 1);
    }
    if (region_match_out) *region_match_out = match;
    return t;
}

// ----------------------------- samples -----------------------------

struct GroundingSample {
    Scene scene;
    std::vector<double> image_tokens;  // (grid_h * grid_w) x render_dim()
    TextSpec text;
    TargetAffinity targets;
    std::vector<int> region_match;  // anchor -> object index, -1 unmatched
    std::vector<int> object_span;   // object -> span index, -1 unreferenced

    int regions() const { return scene.grid_h * scene.grid_w; }
    // ground-truth label of the object matched to a region ("" when unmatched)
    std::string region_label(int r) const {
        const int o = region_match[static_cast<size_t>(r)];
        return o < 0 ? std::string() : scene.objects[static_cast<size_t>(o)].label();
    }
};

inline GroundingSample make_sample(uint64_t seed, const WorldConfig& cfg, TextType mode,
                                   ScenePolicy policy = ScenePolicy::TrainExcludeHeldout) {
    GroundingSample s;
    s.scene = sample_scene(seed, cfg, policy);
    for (uint64_t retry = 0; mode == TextType::Grounding && s.scene.objects.empty(); ++retry) {
        if (retry >= 64) throw GenerationError("make_sample: cannot draw a non-empty scene");
        s.scene = sample_scene(derive_seed(seed, "retry-nonempty", retry), cfg, policy);
    }
    s.image_tokens = render_scene(s.scene, cfg.noise_sigma);
    s.text = synthesize_text(s.scene, mode, seed, cfg, policy);
    s.object_span = object_to_span(s.scene, s.text);
    AnchorGrid anchors(cfg.grid_h, cfg.grid_w);
    s.targets = build_target_matrix(s.scene, s.text, anchors, 0.5, &s.region_match);
    return s;
}

// ----------------------------- manifests -----------------------------
// Line-delimited records; each line holds seed, config hash, split and text
// mode. Regeneration through make_sample is bit-exact for a fixed config.

struct ManifestEntry {
    uint64_t seed = 0;
    std::string config_hash;
    std::string split;  // "train", "eval", or a task name
    TextType mode = TextType::Detection;
};

inline std::string manifest_line(const ManifestEntry& e) {
    return std::to_string(e.seed) + "\t" + e.config_hash + "\t" + e.split + "\t" +
           (e.mode == TextType::Detection ? "detection" : "grounding");
}

inline ManifestEntry parse_manifest_line(const std::string& line) {
    auto parts = split_str(line, '\t');
    if (parts.size() != 4) throw IoError("manifest: malformed line: " + line);
    ManifestEntry e;
    e.seed = std::stoull(parts[0]);
    e.config_hash = parts[1];
    e.split = parts[2];
    if (parts[3] == "detection")
        e.mode = TextType::Detection;
    else if (parts[3] == "grounding")
        e.mode = TextType::Grounding;
    else
        throw IoError("manifest: unknown mode: " + parts[3]);
    return e;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open manifest for writing: " + path);
    for (const auto& e : entries) out << manifest_line(e) << "\n";
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (!trim_str(line).empty()) entries.push_back(parse_manifest_line(line));
    }
    return entries;
}

}  // namespace groundling::world
