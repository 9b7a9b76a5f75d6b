#include "dpo/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "dpo/parallel.hpp"

namespace dpo {

Params::Params(int channels, int hidden)
    : channels_(channels), hidden_(hidden), values_(size_for(channels, hidden), 0.0) {
    if (channels <= 0 || hidden <= 0) throw std::invalid_argument("Params: dims must be positive");
}

Params::Params(int channels, int hidden, std::vector<double> values)
    : channels_(channels), hidden_(hidden), values_(std::move(values)) {
    if (channels <= 0 || hidden <= 0) throw std::invalid_argument("Params: dims must be positive");
    if (values_.size() != size_for(channels, hidden)) {
        throw std::invalid_argument("Params: value count does not match dims");
    }
}

bool Params::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

const char* tier_name(Tier t) {
    switch (t) {
        case Tier::High: return "high";
        case Tier::Medium: return "medium";
        case Tier::Low: return "low";
    }
    return "?";
}

std::size_t TargetMap::positives() const {
    return static_cast<std::size_t>(std::count(cls.begin(), cls.end(), CellClass::Positive));
}

std::size_t TargetMap::negatives() const {
    return static_cast<std::size_t>(std::count(cls.begin(), cls.end(), CellClass::Negative));
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

RegTarget encode_box(const Box3D& b, double x, double y, double cell_size) {
    return {(b.cx - x) / cell_size, (b.cy - y) / cell_size, b.cz / cell_size, std::log(b.dx),
            std::log(b.dy), std::log(b.dz), b.yaw};
}

Box3D decode_box(std::span<const double, kRegOutputs> reg, double x, double y, double cell_size) {
    auto dim = [](double v) { return std::exp(std::clamp(v, -8.0, 8.0)); };
    return Box3D(x + reg[0] * cell_size, y + reg[1] * cell_size, reg[2] * cell_size, dim(reg[3]),
                 dim(reg[4]), dim(reg[5]), reg[6]);
}

namespace {

void check_shapes(const Params& params, const BevFeature& bev) {
    if (bev.meta().channels != params.channels()) {
        throw std::invalid_argument("detector: feature channels do not match parameter shape");
    }
}

// Hidden pre-activations and outputs of one cell.
void cell_forward(const Params& p, std::span<const double> z, double* act, double* out) {
    const int hh = p.hidden();
    const auto w1 = p.w1();
    const auto b1 = p.b1();
    const auto w2 = p.w2();
    const auto b2 = p.b2();
    for (int h = 0; h < hh; ++h) act[h] = b1[h];
    for (std::size_t c = 0; c < z.size(); ++c) {
        const double zc = z[c];
        const double* row = w1.data() + c * hh;
        for (int h = 0; h < hh; ++h) act[h] += zc * row[h];
    }
    for (int h = 0; h < hh; ++h) act[h] = std::tanh(act[h]);
    for (int o = 0; o < kOutputs; ++o) out[o] = b2[o];
    for (int h = 0; h < hh; ++h) {
        const double a = act[h];
        const double* row = w2.data() + static_cast<std::size_t>(h) * kOutputs;
        for (int o = 0; o < kOutputs; ++o) out[o] += a * row[o];
    }
}

double bce_with_logit(double x, double y) {
    return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

double smooth_l1(double d, double beta) {
    const double a = std::abs(d);
    return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double d, double beta) {
    if (std::abs(d) < beta) return d / beta;
    return d > 0 ? 1.0 : -1.0;
}

struct SceneSums {
    double bce = 0.0;
    double reg = 0.0;
};

struct Counts {
    std::size_t supervised = 0;
    std::size_t positive = 0;
};

Counts count_cells(std::span<const TargetMap> targets) {
    Counts c;
    for (const auto& t : targets) {
        for (CellClass k : t.cls) {
            if (k == CellClass::Positive) ++c.positive;
            if (k != CellClass::Ignore) ++c.supervised;
        }
    }
    return c;
}

void check_target(const BevFeature& bev, const TargetMap& t) {
    if (t.cls.size() != bev.meta().cells() || t.reg.size() != bev.meta().cells()) {
        throw std::invalid_argument("detector: target map does not match the feature grid");
    }
}

SceneSums scene_sums(const Params& p, const BevFeature& bev, const TargetMap& t, const LossConfig& cfg) {
    const GridMeta& g = bev.meta();
    const int hh = p.hidden();
    std::vector<double> act(hh);
    std::array<double, kOutputs> out{};
    SceneSums s;
    for (std::size_t i = 0; i < g.cells(); ++i) {
        const CellClass k = t.cls[i];
        if (k == CellClass::Ignore) continue;
        cell_forward(p, bev.cell(i), act.data(), out.data());
        const double y = k == CellClass::Positive ? 1.0 : 0.0;
        s.bce += bce_with_logit(out[kOutLogit], y);
        if (k == CellClass::Positive) {
            for (int r = 0; r < kRegOutputs; ++r) s.reg += smooth_l1(out[1 + r] - t.reg[i][r], cfg.smooth_l1_beta);
        }
    }
    return s;
}

// Accumulates d(bce_coef * sum_bce + reg_coef * sum_reg) into gparams and,
// when non-null, ginput. Returns the raw sums.
SceneSums scene_backward(const Params& p, const BevFeature& bev, const TargetMap& t, const LossConfig& cfg,
                         double bce_coef, double reg_coef, std::span<double> gparams, double* ginput) {
    const GridMeta& g = bev.meta();
    const int hh = p.hidden();
    const int cc = g.channels;
    const auto w1 = p.w1();
    const auto w2 = p.w2();
    const std::size_t off_b1 = static_cast<std::size_t>(cc) * hh;
    const std::size_t off_w2 = off_b1 + hh;
    const std::size_t off_b2 = off_w2 + static_cast<std::size_t>(hh) * kOutputs;

    std::vector<double> act(hh), dact(hh);
    std::array<double, kOutputs> out{}, dout{};
    SceneSums s;
    for (std::size_t i = 0; i < g.cells(); ++i) {
        const CellClass k = t.cls[i];
        if (k == CellClass::Ignore) continue;
        const auto z = bev.cell(i);
        cell_forward(p, z, act.data(), out.data());

        const double y = k == CellClass::Positive ? 1.0 : 0.0;
        s.bce += bce_with_logit(out[kOutLogit], y);
        dout.fill(0.0);
        dout[kOutLogit] = bce_coef * (sigmoid(out[kOutLogit]) - y);
        if (k == CellClass::Positive) {
            for (int r = 0; r < kRegOutputs; ++r) {
                const double d = out[1 + r] - t.reg[i][r];
                s.reg += smooth_l1(d, cfg.smooth_l1_beta);
                dout[1 + r] = reg_coef * smooth_l1_grad(d, cfg.smooth_l1_beta);
            }
        }

        for (int o = 0; o < kOutputs; ++o) gparams[off_b2 + o] += dout[o];
        for (int h = 0; h < hh; ++h) {
            const double* w2row = w2.data() + static_cast<std::size_t>(h) * kOutputs;
            double* g2row = gparams.data() + off_w2 + static_cast<std::size_t>(h) * kOutputs;
            double acc = 0.0;
            for (int o = 0; o < kOutputs; ++o) {
                g2row[o] += act[h] * dout[o];
                acc += w2row[o] * dout[o];
            }
            dact[h] = acc * (1.0 - act[h] * act[h]);
            gparams[off_b1 + h] += dact[h];
        }
        for (int c = 0; c < cc; ++c) {
            const double* w1row = w1.data() + static_cast<std::size_t>(c) * hh;
            double* g1row = gparams.data() + static_cast<std::size_t>(c) * hh;
            double acc = 0.0;
            for (int h = 0; h < hh; ++h) {
                g1row[h] += z[c] * dact[h];
                acc += w1row[h] * dact[h];
            }
            if (ginput) ginput[i * cc + c] += acc;
        }
    }
    return s;
}

double combine(const SceneSums& s, const Counts& n, const LossConfig& cfg) {
    double loss = s.bce / static_cast<double>(n.supervised);
    if (n.positive > 0) loss += cfg.lambda_reg * s.reg / (kRegOutputs * static_cast<double>(n.positive));
    return loss;
}

}  // namespace

RawPrediction forward(const Params& params, const BevFeature& bev) {
    check_shapes(params, bev);
    const GridMeta& g = bev.meta();
    RawPrediction raw;
    raw.meta = g;
    raw.hidden = params.hidden();
    raw.out.resize(g.cells() * kOutputs);
    raw.activation.resize(g.cells() * params.hidden());
    for (std::size_t i = 0; i < g.cells(); ++i) {
        cell_forward(params, bev.cell(i), raw.activation.data() + i * params.hidden(),
                     raw.out.data() + i * kOutputs);
    }
    return raw;
}

std::vector<ScoredBox> decode(const RawPrediction& raw, const DecodeConfig& cfg) {
    const GridMeta& g = raw.meta;
    struct Candidate {
        std::size_t cell;
        double score;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < g.cells(); ++i) {
        const double s = sigmoid(raw.out[i * kOutputs + kOutLogit]);
        if (s >= cfg.score_thresh) cands.push_back({i, s});
    }
    if (cands.size() > cfg.pre_nms_top_k) {
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        cands.resize(cfg.pre_nms_top_k);
    }
    std::vector<ScoredBox> boxes;
    boxes.reserve(cands.size());
    for (const auto& c : cands) {
        const int row = static_cast<int>(c.cell / g.width);
        const int col = static_cast<int>(c.cell % g.width);
        const auto reg = raw.cell(c.cell).subspan<1, kRegOutputs>();
        boxes.emplace_back(decode_box(reg, g.cell_center_x(col), g.cell_center_y(row), g.cell_size), c.score);
    }
    return nms(std::move(boxes), cfg.nms_thresh);
}

TargetMap assign_targets(std::span<const TieredBox> boxes, const GridMeta& meta) {
    TargetMap t;
    t.meta = meta;
    t.cls.assign(meta.cells(), CellClass::Negative);
    t.reg.assign(meta.cells(), RegTarget{});

    constexpr int kNone = -1;
    std::vector<int> owner(meta.cells(), kNone);
    std::vector<double> owner_dist(meta.cells(), 0.0);
    for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
        const Box3D& b = boxes[bi].box;
        const double reach = 0.5 * std::hypot(b.dx, b.dy);
        const int col_lo = std::max(0, static_cast<int>(std::floor((b.cx - reach) / meta.cell_size)));
        const int col_hi = std::min(meta.width - 1, static_cast<int>(std::ceil((b.cx + reach) / meta.cell_size)));
        const int row_lo = std::max(0, static_cast<int>(std::floor((b.cy - reach) / meta.cell_size)));
        const int row_hi = std::min(meta.height - 1, static_cast<int>(std::ceil((b.cy + reach) / meta.cell_size)));
        for (int r = row_lo; r <= row_hi; ++r) {
            for (int c = col_lo; c <= col_hi; ++c) {
                const double x = meta.cell_center_x(c), y = meta.cell_center_y(r);
                if (!footprint_contains(b, x, y)) continue;
                const std::size_t i = static_cast<std::size_t>(r) * meta.width + c;
                const double d = std::hypot(b.cx - x, b.cy - y);
                bool take = owner[i] == kNone;
                if (!take) {
                    const Tier cur = boxes[owner[i]].tier;
                    const Tier cand = boxes[bi].tier;
                    take = cand < cur || (cand == cur && d < owner_dist[i]);
                }
                if (take) {
                    owner[i] = static_cast<int>(bi);
                    owner_dist[i] = d;
                }
            }
        }
    }
    for (std::size_t i = 0; i < meta.cells(); ++i) {
        if (owner[i] == kNone) continue;
        const TieredBox& tb = boxes[owner[i]];
        switch (tb.tier) {
            case Tier::High: {
                t.cls[i] = CellClass::Positive;
                const int r = static_cast<int>(i / meta.width), c = static_cast<int>(i % meta.width);
                t.reg[i] = encode_box(tb.box, meta.cell_center_x(c), meta.cell_center_y(r), meta.cell_size);
                break;
            }
            case Tier::Medium: t.cls[i] = CellClass::Ignore; break;
            case Tier::Low: break;
        }
    }
    return t;
}

TargetMap assign_targets_all_high(std::span<const Box3D> boxes, const GridMeta& meta) {
    std::vector<TieredBox> tiered;
    tiered.reserve(boxes.size());
    for (const auto& b : boxes) tiered.push_back({b, Tier::High});
    return assign_targets(tiered, meta);
}

std::optional<double> detection_loss(const RawPrediction& raw, const TargetMap& targets, const LossConfig& cfg) {
    const GridMeta& g = raw.meta;
    if (targets.cls.size() != g.cells() || targets.reg.size() != g.cells()) {
        throw std::invalid_argument("detection_loss: target map does not match the prediction grid");
    }
    const Counts n = count_cells(std::span<const TargetMap>(&targets, 1));
    if (n.supervised == 0) return std::nullopt;
    SceneSums s;
    for (std::size_t i = 0; i < g.cells(); ++i) {
        const CellClass k = targets.cls[i];
        if (k == CellClass::Ignore) continue;
        const auto out = raw.cell(i);
        s.bce += bce_with_logit(out[kOutLogit], k == CellClass::Positive ? 1.0 : 0.0);
        if (k == CellClass::Positive) {
            for (int r = 0; r < kRegOutputs; ++r) {
                s.reg += smooth_l1(out[1 + r] - targets.reg[i][r], cfg.smooth_l1_beta);
            }
        }
    }
    return combine(s, n, cfg);
}

std::optional<LossGrad> backward(const Params& params, const BevFeature& bev, const TargetMap& targets,
                                 const LossConfig& cfg) {
    auto batch = backward_batch(params, std::span<const BevFeature>(&bev, 1),
                                std::span<const TargetMap>(&targets, 1), cfg, true);
    if (!batch) return std::nullopt;
    return LossGrad{batch->loss, GradPair{std::move(batch->grad_params), std::move(batch->grad_inputs.front())}};
}

std::optional<double> batch_loss(const Params& params, std::span<const BevFeature> inputs,
                                 std::span<const TargetMap> targets, const LossConfig& cfg) {
    if (inputs.size() != targets.size()) throw std::invalid_argument("batch_loss: batch size mismatch");
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        check_shapes(params, inputs[k]);
        check_target(inputs[k], targets[k]);
    }
    const Counts n = count_cells(targets);
    if (n.supervised == 0) return std::nullopt;
    std::vector<SceneSums> parts(inputs.size());
    parallel_for(inputs.size(), [&](std::size_t k) { parts[k] = scene_sums(params, inputs[k], targets[k], cfg); });
    SceneSums total;
    for (const auto& s : parts) {
        total.bce += s.bce;
        total.reg += s.reg;
    }
    return combine(total, n, cfg);
}

std::optional<BatchLossGrad> backward_batch(const Params& params, std::span<const BevFeature> inputs,
                                            std::span<const TargetMap> targets, const LossConfig& cfg,
                                            bool want_input_grads) {
    if (inputs.size() != targets.size()) throw std::invalid_argument("backward_batch: batch size mismatch");
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        check_shapes(params, inputs[k]);
        check_target(inputs[k], targets[k]);
    }
    const Counts n = count_cells(targets);
    if (n.supervised == 0) return std::nullopt;
    const double bce_coef = 1.0 / static_cast<double>(n.supervised);
    const double reg_coef = n.positive > 0 ? cfg.lambda_reg / (kRegOutputs * static_cast<double>(n.positive)) : 0.0;

    std::vector<std::vector<double>> gparts(inputs.size());
    std::vector<SceneSums> parts(inputs.size());
    BatchLossGrad res;
    if (want_input_grads) {
        res.grad_inputs.reserve(inputs.size());
        for (const auto& in : inputs) res.grad_inputs.emplace_back(in.meta());
    }
    parallel_for(inputs.size(), [&](std::size_t k) {
        gparts[k].assign(params.size(), 0.0);
        double* gin = want_input_grads ? res.grad_inputs[k].values().data() : nullptr;
        parts[k] = scene_backward(params, inputs[k], targets[k], cfg, bce_coef, reg_coef, gparts[k], gin);
    });

    res.grad_params.assign(params.size(), 0.0);
    SceneSums total;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        total.bce += parts[k].bce;
        total.reg += parts[k].reg;
        for (std::size_t j = 0; j < params.size(); ++j) res.grad_params[j] += gparts[k][j];
    }
    res.loss = combine(total, n, cfg);
    return res;
}

Params init_params(int channels, const TrainConfig& cfg) {
    Params p(channels, cfg.hidden);
    std::mt19937_64 rng(derive_seed(cfg.seed, 11, 0));
    std::normal_distribution<double> w(0.0, cfg.init_scale);
    for (double& v : p.w1()) v = w(rng);
    for (double& v : p.w2()) v = w(rng);
    p.b2()[kOutLogit] = std::log(cfg.prior_prob / (1.0 - cfg.prior_prob));
    return p;
}

Params pretrain(std::span<const Scene> dataset, const TrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("pretrain: empty dataset");
    Params init = init_params(dataset.front().bev.meta().channels, cfg);
    // Regression biases start at the mean ground-truth target.
    RegTarget mean{};
    std::size_t n = 0;
    for (const auto& s : dataset) {
        const TargetMap t = assign_targets_all_high(s.gt_boxes, s.bev.meta());
        for (std::size_t i = 0; i < t.cls.size(); ++i) {
            if (t.cls[i] != CellClass::Positive) continue;
            for (int r = 0; r < kRegOutputs; ++r) mean[r] += t.reg[i][r];
            ++n;
        }
    }
    if (n > 0) {
        for (int r = 0; r < kRegOutputs; ++r) init.b2()[1 + r] = mean[r] / static_cast<double>(n);
    }
    return pretrain_from(std::move(init), dataset, cfg);
}

Params pretrain_from(Params params, std::span<const Scene> dataset, const TrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (cfg.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
    std::vector<TargetMap> targets;
    targets.reserve(dataset.size());
    for (const auto& s : dataset) targets.push_back(assign_targets_all_high(s.gt_boxes, s.bev.meta()));

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, 12, 0));
    const std::size_t steps_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = static_cast<double>(steps_per_epoch) * std::max(cfg.epochs, 1);
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const double frac = static_cast<double>(step) / total_steps;
            const double lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<BevFeature> in;
            std::vector<TargetMap> tg;
            for (std::size_t j = start; j < end; ++j) {
                in.push_back(dataset[order[j]].bev);
                tg.push_back(targets[order[j]]);
            }
            auto g = backward_batch(params, in, tg, cfg.loss, false);
            if (!g) continue;
            auto flat = params.flat();
            for (std::size_t j = 0; j < flat.size(); ++j) flat[j] -= lr * g->grad_params[j];
        }
    }
    return params;
}

}  // namespace dpo
