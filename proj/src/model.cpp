#include "parenting/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <utility>

#include "parenting/checksum.hpp"
#include "parenting/errors.hpp"

namespace parenting {

namespace {

constexpr double kLayerNormEps = 1e-5;

constexpr std::array<std::string_view, 9> kKindNames = {
    "Wq", "Wk", "Wv", "Wo", "W1_gate", "V_up", "W2_down", "AdapterA", "AdapterB"};

constexpr std::array<UnitKind, 4> kAdaptedKinds = {UnitKind::Wq, UnitKind::Wk, UnitKind::Wv,
                                                   UnitKind::Wo};

int kind_index(UnitKind kind) { return static_cast<int>(kind); }

bool is_attention(UnitKind kind) { return kind_index(kind) <= kind_index(UnitKind::Wo); }

std::pair<int, int> block_shape(const ModelConfig& cfg, UnitKind kind) {
    const int d = cfg.model_dim;
    const int f = cfg.hidden_dim();
    switch (kind) {
        case UnitKind::W1Gate:
        case UnitKind::VUp: return {d, f};
        case UnitKind::W2Down: return {f, d};
        default: return {d, d};
    }
}

void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

double swish(double z) { return z / (1.0 + std::exp(-z)); }

double swish_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s + z * s * (1.0 - s);
}

void layer_norm(const Matrix& x, Matrix& y, Eigen::VectorXd& rstd) {
    const Eigen::Index n = x.rows();
    const double d = static_cast<double>(x.cols());
    y.resize(x.rows(), x.cols());
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).sum() / d;
        const auto centered = x.row(r).array() - mean;
        const double var = centered.square().sum() / d;
        rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        y.row(r) = centered * rstd(r);
    }
}

// dy -> dx for the non-affine layer norm y = (x - mean) * rstd.
void layer_norm_backward(const Matrix& y, const Eigen::VectorXd& rstd, const Matrix& dy,
                         Matrix& dx_accum) {
    const double d = static_cast<double>(y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double mean_dy = dy.row(r).sum() / d;
        const double mean_dyy = dy.row(r).dot(y.row(r)) / d;
        dx_accum.row(r).array() +=
            rstd(r) * (dy.row(r).array() - mean_dy - y.row(r).array() * mean_dyy);
    }
}

struct Span {
    int start = 0;
    int length = 0;
};

struct BatchInput {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<Span> spans;
};

BatchInput pack(const ModelConfig& cfg, std::span<const TokenSequence> seqs) {
    BatchInput in;
    for (const auto& s : seqs) {
        if (s.tokens.empty()) throw InputError("forward: empty token sequence");
        if (s.offset < 0 || s.end_position() > cfg.max_seq_len)
            throw InputError("forward: sequence exceeds max_seq_len (" +
                             std::to_string(s.end_position()) + " > " +
                             std::to_string(cfg.max_seq_len) + ")");
        in.spans.push_back({static_cast<int>(in.tokens.size()), static_cast<int>(s.tokens.size())});
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            const int t = s.tokens[i];
            if (t < 0 || t >= cfg.vocab_size)
                throw InputError("forward: token id " + std::to_string(t) + " out of range");
            in.tokens.push_back(t);
            in.positions.push_back(s.offset + static_cast<int>(i));
        }
    }
    return in;
}

struct LayerCache {
    Matrix x;
    Matrix a;
    Eigen::VectorXd rstd1;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // [span * heads + head]
    Matrix ctx;
    Matrix h;
    Matrix b;
    Eigen::VectorXd rstd2;
    Matrix z1, zv, sw;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Matrix final_in;
    Matrix final_norm;
    Eigen::VectorXd final_rstd;
};

// Effective block weights; low-rank mode materialises base + A*B.
class BlockWeights {
public:
    explicit BlockWeights(const MicroTransformer& model) {
        const auto& cfg = model.config();
        refs_.resize(static_cast<std::size_t>(cfg.num_layers));
        if (cfg.adapter_mode == AdapterMode::low_rank)
            owned_.resize(static_cast<std::size_t>(cfg.num_layers * kBlockMatrices));
        for (int l = 0; l < cfg.num_layers; ++l) {
            for (int k = 0; k < kBlockMatrices; ++k) {
                const auto kind = static_cast<UnitKind>(k);
                if (cfg.adapter_mode == AdapterMode::full) {
                    refs_[l][k] = &model.unit({l + 1, kind}).values;
                } else {
                    auto& slot = owned_[static_cast<std::size_t>(l * kBlockMatrices + k)];
                    slot = model.block_weight(l + 1, kind);
                    refs_[l][k] = &slot;
                }
            }
        }
    }
    const Matrix& operator()(int layer0, UnitKind kind) const { return *refs_[layer0][kind_index(kind)]; }

private:
    std::vector<std::array<const Matrix*, kBlockMatrices>> refs_;
    std::vector<Matrix> owned_;
};

// Runs the decoder stack; returns the final normalised hidden states.
void run_stack(const MicroTransformer& model, const BlockWeights& w, const BatchInput& in,
               ForwardCache& cache, ActivationRecord* record) {
    const auto& cfg = model.config();
    const int n = static_cast<int>(in.tokens.size());
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x(n, d);
    const Matrix& emb = model.token_embedding();
    const Matrix& pos = model.position_embedding();
    for (int r = 0; r < n; ++r) x.row(r) = emb.row(in.tokens[r]) + pos.row(in.positions[r]);

    cache.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
        c.x = std::move(x);
        layer_norm(c.x, c.a, c.rstd1);
        c.q.noalias() = c.a * w(l, UnitKind::Wq);
        c.k.noalias() = c.a * w(l, UnitKind::Wk);
        c.v.noalias() = c.a * w(l, UnitKind::Wv);
        c.ctx.setZero(n, d);
        c.probs.assign(in.spans.size() * static_cast<std::size_t>(heads), Matrix());
        for (std::size_t s = 0; s < in.spans.size(); ++s) {
            const auto [st, len] = in.spans[s];
            for (int hd = 0; hd < heads; ++hd) {
                Matrix& p = c.probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(hd)];
                p.noalias() = c.q.block(st, hd * dh, len, dh) * c.k.block(st, hd * dh, len, dh).transpose();
                for (int i = 0; i < len; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int j = 0; j <= i; ++j) mx = std::max(mx, p(i, j) * scale);
                    double sum = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(p(i, j) * scale - mx);
                        sum += p(i, j);
                    }
                    for (int j = 0; j <= i; ++j) p(i, j) /= sum;
                    for (int j = i + 1; j < len; ++j) p(i, j) = 0.0;
                }
                c.ctx.block(st, hd * dh, len, dh).noalias() = p * c.v.block(st, hd * dh, len, dh);
            }
        }
        c.h = c.x;
        c.h.noalias() += c.ctx * w(l, UnitKind::Wo);
        layer_norm(c.h, c.b, c.rstd2);
        c.z1.noalias() = c.b * w(l, UnitKind::W1Gate);
        c.zv.noalias() = c.b * w(l, UnitKind::VUp);
        c.sw = c.z1.unaryExpr([](double z) { return swish(z); });
        if (record != nullptr) tally_positive(c.z1, record->layers[static_cast<std::size_t>(l)]);
        x = c.h;
        x.noalias() += (c.sw.array() * c.zv.array()).matrix() * w(l, UnitKind::W2Down);
    }
    cache.final_in = std::move(x);
    layer_norm(cache.final_in, cache.final_norm, cache.final_rstd);
}

struct BlockGrads {
    std::vector<std::array<Matrix, kBlockMatrices>> layer;
    Matrix embedding, position, head;
};

// Backpropagates d(final_norm) through the stack.
void backward_stack(const MicroTransformer& model, const BlockWeights& w, const BatchInput& in,
                    const ForwardCache& cache, const Matrix& d_final_norm, bool want_embeddings,
                    BlockGrads& g) {
    const auto& cfg = model.config();
    const int n = static_cast<int>(in.tokens.size());
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dx = Matrix::Zero(n, d);
    layer_norm_backward(cache.final_norm, cache.final_rstd, d_final_norm, dx);

    g.layer.resize(static_cast<std::size_t>(cfg.num_layers));
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
        auto& gl = g.layer[static_cast<std::size_t>(l)];

        // feed-forward
        const Matrix gate = (c.sw.array() * c.zv.array()).matrix();
        gl[kind_index(UnitKind::W2Down)].noalias() = gate.transpose() * dx;
        Matrix dgate;
        dgate.noalias() = dx * w(l, UnitKind::W2Down).transpose();
        const Matrix dzv = (dgate.array() * c.sw.array()).matrix();
        const Matrix dz1 =
            (dgate.array() * c.zv.array() * c.z1.unaryExpr([](double z) { return swish_grad(z); }).array())
                .matrix();
        gl[kind_index(UnitKind::W1Gate)].noalias() = c.b.transpose() * dz1;
        gl[kind_index(UnitKind::VUp)].noalias() = c.b.transpose() * dzv;
        Matrix db;
        db.noalias() = dz1 * w(l, UnitKind::W1Gate).transpose();
        db.noalias() += dzv * w(l, UnitKind::VUp).transpose();
        Matrix dh_total = dx;
        layer_norm_backward(c.b, c.rstd2, db, dh_total);

        // attention
        gl[kind_index(UnitKind::Wo)].noalias() = c.ctx.transpose() * dh_total;
        Matrix dctx;
        dctx.noalias() = dh_total * w(l, UnitKind::Wo).transpose();
        Matrix dq = Matrix::Zero(n, d);
        Matrix dk = Matrix::Zero(n, d);
        Matrix dv = Matrix::Zero(n, d);
        for (std::size_t s = 0; s < in.spans.size(); ++s) {
            const auto [st, len] = in.spans[s];
            for (int hd = 0; hd < heads; ++hd) {
                const Matrix& p = c.probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(hd)];
                const auto dctx_b = dctx.block(st, hd * dh, len, dh);
                Matrix dp;
                dp.noalias() = dctx_b * c.v.block(st, hd * dh, len, dh).transpose();
                dv.block(st, hd * dh, len, dh).noalias() = p.transpose() * dctx_b;
                Matrix ds = p;
                for (int i = 0; i < len; ++i) {
                    const double dot = dp.row(i).dot(p.row(i));
                    ds.row(i).array() = p.row(i).array() * (dp.row(i).array() - dot) * scale;
                }
                dq.block(st, hd * dh, len, dh).noalias() = ds * c.k.block(st, hd * dh, len, dh);
                dk.block(st, hd * dh, len, dh).noalias() = ds.transpose() * c.q.block(st, hd * dh, len, dh);
            }
        }
        gl[kind_index(UnitKind::Wq)].noalias() = c.a.transpose() * dq;
        gl[kind_index(UnitKind::Wk)].noalias() = c.a.transpose() * dk;
        gl[kind_index(UnitKind::Wv)].noalias() = c.a.transpose() * dv;
        Matrix da;
        da.noalias() = dq * w(l, UnitKind::Wq).transpose();
        da.noalias() += dk * w(l, UnitKind::Wk).transpose();
        da.noalias() += dv * w(l, UnitKind::Wv).transpose();
        dx = std::move(dh_total);
        layer_norm_backward(c.a, c.rstd1, da, dx);
    }

    if (want_embeddings) {
        g.embedding = Matrix::Zero(model.token_embedding().rows(), d);
        g.position = Matrix::Zero(model.position_embedding().rows(), d);
        for (int r = 0; r < n; ++r) {
            g.embedding.row(in.tokens[r]) += dx.row(r);
            g.position.row(in.positions[r]) += dx.row(r);
        }
    }
}

struct PreparedBatch {
    BatchInput input;
    std::vector<int> loss_rows;
    std::vector<int> loss_targets;
};

PreparedBatch prepare(const ModelConfig& cfg, std::span<const SupervisedSequence> batch) {
    if (batch.empty()) throw InputError("loss: empty batch");
    std::vector<TokenSequence> seqs;
    seqs.reserve(batch.size());
    PreparedBatch out;
    int base = 0;
    for (const auto& ex : batch) {
        if (ex.target.empty()) throw InputError("loss: example without target tokens");
        if (ex.prompt.tokens.empty()) throw InputError("loss: example without prompt tokens");
        TokenSequence s = ex.prompt;
        s.tokens.insert(s.tokens.end(), ex.target.begin(), ex.target.end() - 1);
        const int p = static_cast<int>(ex.prompt.tokens.size());
        for (std::size_t i = 0; i < ex.target.size(); ++i) {
            const int t = ex.target[i];
            if (t < 0 || t >= cfg.vocab_size)
                throw InputError("loss: target token " + std::to_string(t) + " out of range");
            out.loss_rows.push_back(base + p - 1 + static_cast<int>(i));
            out.loss_targets.push_back(t);
        }
        base += static_cast<int>(s.tokens.size());
        seqs.push_back(std::move(s));
    }
    out.input = pack(cfg, seqs);
    return out;
}

// Cross-entropy over selected rows; fills d(final_norm) and d(head) when asked.
double head_loss(const MicroTransformer& model, const ForwardCache& cache, const PreparedBatch& pb,
                 Matrix* d_final_norm, Matrix* d_head) {
    const Matrix& head = model.output_head();
    const auto rows = static_cast<Eigen::Index>(pb.loss_rows.size());
    Matrix feats(rows, head.rows());
    for (Eigen::Index i = 0; i < rows; ++i) feats.row(i) = cache.final_norm.row(pb.loss_rows[static_cast<std::size_t>(i)]);
    Matrix logits;
    logits.noalias() = feats * head;
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mx = logits.row(i).maxCoeff();
        logits.row(i).array() = (logits.row(i).array() - mx).exp();
        const double sum = logits.row(i).sum();
        const int t = pb.loss_targets[static_cast<std::size_t>(i)];
        loss -= std::log(logits(i, t) / sum);
        logits.row(i) /= sum;
        logits(i, t) -= 1.0;
    }
    loss *= inv;
    if (d_final_norm != nullptr) {
        logits *= inv;
        Matrix dfeat;
        dfeat.noalias() = logits * head.transpose();
        d_final_norm->setZero(cache.final_norm.rows(), cache.final_norm.cols());
        for (Eigen::Index i = 0; i < rows; ++i)
            d_final_norm->row(pb.loss_rows[static_cast<std::size_t>(i)]) += dfeat.row(i);
        if (d_head != nullptr) d_head->noalias() = feats.transpose() * logits;
    }
    return loss;
}

double compute(const MicroTransformer& model, std::span<const SupervisedSequence> batch,
               bool want_all, BlockGrads& g) {
    const PreparedBatch pb = prepare(model.config(), batch);
    const BlockWeights w(model);
    ForwardCache cache;
    run_stack(model, w, pb.input, cache, nullptr);
    Matrix d_final;
    const double loss = head_loss(model, cache, pb, &d_final, want_all ? &g.head : nullptr);
    backward_stack(model, w, pb.input, cache, d_final, want_all, g);
    return loss;
}

// Projects block-matrix gradients onto the model's parameter units.
GradientMap unit_grads(const MicroTransformer& model, BlockGrads& g) {
    const auto& cfg = model.config();
    std::vector<ParameterUnitId> ids;
    std::vector<Matrix> values;
    for (const auto& u : model.units()) {
        ids.push_back(u.id);
        auto& dw = g.layer[static_cast<std::size_t>(u.id.layer - 1)];
        if (cfg.adapter_mode == AdapterMode::full) {
            values.push_back(std::move(dw[kind_index(u.id.kind)]));
            continue;
        }
        const Matrix& d_eff = dw[kind_index(u.id.target)];
        if (u.id.kind == UnitKind::AdapterA) {
            const Matrix& b = model.unit({u.id.layer, UnitKind::AdapterB, u.id.target}).values;
            values.emplace_back(d_eff * b.transpose());
        } else {
            const Matrix& a = model.unit({u.id.layer, UnitKind::AdapterA, u.id.target}).values;
            values.emplace_back(a.transpose() * d_eff);
        }
    }
    return GradientMap(std::move(ids), std::move(values));
}

}  // namespace

// ---------------------------------------------------------------------------
// names and config

std::string_view to_string(AdapterMode mode) {
    return mode == AdapterMode::full ? "full" : "low-rank";
}

AdapterMode parse_adapter_mode(std::string_view text) {
    if (text == "full") return AdapterMode::full;
    if (text == "low-rank" || text == "low_rank" || text == "lowrank") return AdapterMode::low_rank;
    throw ConfigError("adapter_mode: unknown value '" + std::string(text) + "'");
}

std::string_view to_string(UnitKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

UnitKind parse_unit_kind(std::string_view text) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i)
        if (kKindNames[i] == text) return static_cast<UnitKind>(i);
    throw InputError("unknown parameter unit kind '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + ": must be positive (got " + std::to_string(v) + ")");
    };
    positive(num_layers, "num_layers");
    positive(model_dim, "model_dim");
    positive(num_heads, "num_heads");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (ffn_dim < 0) throw ConfigError("ffn_dim: must be positive");
    if (model_dim % num_heads != 0)
        throw ConfigError("num_heads: " + std::to_string(num_heads) + " does not divide model_dim " +
                          std::to_string(model_dim));
    if (adapter_mode == AdapterMode::low_rank) positive(adapter_rank, "adapter_rank");
}

std::string ParameterUnitId::kind_label() const {
    if (kind == UnitKind::AdapterA) return "A(" + std::string(parenting::to_string(target)) + ")";
    if (kind == UnitKind::AdapterB) return "B(" + std::string(parenting::to_string(target)) + ")";
    return std::string(parenting::to_string(kind));
}

std::string ParameterUnitId::to_string() const {
    return "L" + std::to_string(layer) + "." + kind_label();
}

ParameterUnitId ParameterUnitId::from_label(int layer, std::string_view label) {
    ParameterUnitId id;
    id.layer = layer;
    if (label.size() > 3 && (label[0] == 'A' || label[0] == 'B') && label[1] == '(' && label.back() == ')') {
        id.kind = label[0] == 'A' ? UnitKind::AdapterA : UnitKind::AdapterB;
        id.target = parse_unit_kind(label.substr(2, label.size() - 3));
        return id;
    }
    id.kind = parse_unit_kind(label);
    return id;
}

ParameterUnitId ParameterUnitId::parse(std::string_view text) {
    const auto dot = text.find('.');
    if (text.size() < 4 || text[0] != 'L' || dot == std::string_view::npos)
        throw InputError("malformed parameter unit id '" + std::string(text) + "'");
    int layer = 0;
    for (char ch : text.substr(1, dot - 1)) {
        if (ch < '0' || ch > '9') throw InputError("malformed parameter unit id '" + std::string(text) + "'");
        layer = layer * 10 + (ch - '0');
    }
    return from_label(layer, text.substr(dot + 1));
}

// ---------------------------------------------------------------------------
// activation records

ActivationRecord ActivationRecord::zeros(int num_layers, int hidden_dim) {
    ActivationRecord r;
    r.layers.resize(static_cast<std::size_t>(num_layers));
    for (auto& l : r.layers) l.positive_counts.assign(static_cast<std::size_t>(hidden_dim), 0);
    return r;
}

void ActivationRecord::merge(const ActivationRecord& other) {
    if (other.layers.size() != layers.size()) throw InternalError("activation record: layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& mine = layers[l];
        const auto& theirs = other.layers[l];
        if (mine.positive_counts.size() != theirs.positive_counts.size())
            throw InternalError("activation record: width mismatch");
        for (std::size_t k = 0; k < mine.positive_counts.size(); ++k)
            mine.positive_counts[k] += theirs.positive_counts[k];
        mine.token_count += theirs.token_count;
    }
}

bool operator==(const LayerActivation& a, const LayerActivation& b) {
    return a.token_count == b.token_count && a.positive_counts == b.positive_counts;
}

void tally_positive(const Matrix& preactivations, LayerActivation& layer) {
    if (layer.positive_counts.empty()) layer.positive_counts.assign(static_cast<std::size_t>(preactivations.cols()), 0);
    if (static_cast<Eigen::Index>(layer.positive_counts.size()) != preactivations.cols())
        throw InternalError("tally_positive: width mismatch");
    for (Eigen::Index r = 0; r < preactivations.rows(); ++r)
        for (Eigen::Index k = 0; k < preactivations.cols(); ++k)
            if (preactivations(r, k) > 0.0) ++layer.positive_counts[static_cast<std::size_t>(k)];
    layer.token_count += preactivations.rows();
}

// ---------------------------------------------------------------------------
// gradient maps

GradientMap::GradientMap(std::vector<ParameterUnitId> ids, std::vector<Matrix> values)
    : ids_(std::move(ids)), values_(std::move(values)) {
    if (ids_.size() != values_.size()) throw InternalError("GradientMap: ids/values size mismatch");
}

GradientMap GradientMap::zeros_like(const MicroTransformer& model) {
    std::vector<ParameterUnitId> ids;
    std::vector<Matrix> values;
    for (const auto& u : model.units()) {
        ids.push_back(u.id);
        values.push_back(Matrix::Zero(u.rows(), u.cols()));
    }
    return GradientMap(std::move(ids), std::move(values));
}

Matrix& GradientMap::at(const ParameterUnitId& id) {
    return const_cast<Matrix&>(std::as_const(*this).at(id));
}

const Matrix& GradientMap::at(const ParameterUnitId& id) const {
    const auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    if (it == ids_.end() || *it != id) throw InternalError("GradientMap: no entry for " + id.to_string());
    return values_[static_cast<std::size_t>(it - ids_.begin())];
}

void GradientMap::check_aligned(const GradientMap& other) const {
    if (ids_ != other.ids_) throw InternalError("GradientMap: unit sets differ");
    for (std::size_t i = 0; i < values_.size(); ++i)
        if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols())
            throw InternalError("GradientMap: shape mismatch at " + ids_[i].to_string());
}

void GradientMap::add_scaled(const GradientMap& other, double scale) {
    check_aligned(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

void GradientMap::scale(double factor) {
    for (auto& v : values_) v *= factor;
}

bool GradientMap::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](const Matrix& m) { return m.allFinite(); });
}

// ---------------------------------------------------------------------------
// model

MicroTransformer MicroTransformer::init(const ModelConfig& cfg) {
    cfg.validate();
    MicroTransformer m;
    m.cfg_ = cfg;
    std::mt19937_64 rng(cfg.seed);
    const int d = cfg.model_dim;
    const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.num_layers);

    auto make = [&](int rows, int cols, double stddev) {
        Matrix x(rows, cols);
        fill_normal(x, rng, stddev);
        return x;
    };
    m.others_.push_back({"token_embedding", make(cfg.vocab_size, d, 1.0)});
    m.others_.push_back({"position_embedding", make(cfg.max_seq_len, d, 0.5)});
    m.others_.push_back({"output_head", make(d, cfg.vocab_size, 1.0 / std::sqrt(static_cast<double>(d)))});

    for (int l = 1; l <= cfg.num_layers; ++l) {
        for (int k = 0; k < kBlockMatrices; ++k) {
            const auto kind = static_cast<UnitKind>(k);
            const auto [rows, cols] = block_shape(cfg, kind);
            double stddev = 1.0 / std::sqrt(static_cast<double>(rows));
            if (kind == UnitKind::Wo || kind == UnitKind::W2Down) stddev *= residual_scale;
            Matrix w = make(rows, cols, stddev);
            if (cfg.adapter_mode == AdapterMode::full)
                m.units_.push_back({{l, kind, UnitKind::Wq}, std::move(w)});
            else
                m.others_.push_back({ParameterUnitId{l, kind, UnitKind::Wq}.to_string(), std::move(w)});
        }
        if (cfg.adapter_mode == AdapterMode::low_rank) {
            // ids sort A(*) before B(*); units_ stays sorted for lookup
            for (UnitKind target : kAdaptedKinds)
                m.units_.push_back({{l, UnitKind::AdapterA, target}, make(d, cfg.adapter_rank, 0.01)});
            for (UnitKind target : kAdaptedKinds)
                m.units_.push_back({{l, UnitKind::AdapterB, target}, Matrix::Zero(cfg.adapter_rank, d)});
        }
    }
    return m;
}

std::vector<ParameterUnitId> MicroTransformer::unit_ids() const {
    std::vector<ParameterUnitId> ids;
    ids.reserve(units_.size());
    for (const auto& u : units_) ids.push_back(u.id);
    return ids;
}

UnitSet MicroTransformer::all_units() const {
    UnitSet s;
    for (const auto& u : units_) s.insert(u.id);
    return s;
}

std::size_t MicroTransformer::unit_index(const ParameterUnitId& id) const {
    const auto it = std::lower_bound(units_.begin(), units_.end(), id,
                                     [](const ParameterUnit& u, const ParameterUnitId& key) { return u.id < key; });
    if (it == units_.end() || it->id != id) throw InputError("model has no parameter unit " + id.to_string());
    return static_cast<std::size_t>(it - units_.begin());
}

Matrix MicroTransformer::block_weight(int layer, UnitKind kind) const {
    if (layer < 1 || layer > cfg_.num_layers || kind_index(kind) >= kBlockMatrices)
        throw InputError("block_weight: no such block matrix");
    if (cfg_.adapter_mode == AdapterMode::full) return unit({layer, kind}).values;
    const std::size_t base_index = 3 + static_cast<std::size_t>((layer - 1) * kBlockMatrices + kind_index(kind));
    Matrix w = others_[base_index].values;
    if (is_attention(kind)) {
        w.noalias() += unit({layer, UnitKind::AdapterA, kind}).values *
                       unit({layer, UnitKind::AdapterB, kind}).values;
    }
    return w;
}

namespace {
void hash_matrix(Sha256& h, const Matrix& m) {
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    h.update(shape, sizeof(shape));
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}
}  // namespace

std::string MicroTransformer::checksum() const {
    Sha256 h;
    h.update_pod(cfg_.num_layers);
    h.update_pod(cfg_.model_dim);
    h.update_pod(cfg_.num_heads);
    h.update_pod(cfg_.ffn_dim);
    h.update_pod(cfg_.vocab_size);
    h.update_pod(cfg_.max_seq_len);
    h.update_pod(cfg_.adapter_mode);
    h.update_pod(cfg_.adapter_rank);
    h.update_pod(cfg_.seed);
    for (const auto& t : others_) hash_matrix(h, t.values);
    for (const auto& u : units_) hash_matrix(h, u.values);
    return h.hex_digest();
}

std::string MicroTransformer::checksum(const UnitSet& subset) const {
    Sha256 h;
    for (const auto& id : subset) {
        h.update(id.to_string());
        hash_matrix(h, unit(id).values);
    }
    return h.hex_digest();
}

std::string MicroTransformer::checksum_others() const {
    Sha256 h;
    for (const auto& t : others_) {
        h.update(t.name);
        hash_matrix(h, t.values);
    }
    return h.hex_digest();
}

bool MicroTransformer::all_finite() const {
    for (const auto& t : others_)
        if (!t.values.allFinite()) return false;
    for (const auto& u : units_)
        if (!u.values.allFinite()) return false;
    return true;
}

bool MicroTransformer::bit_identical(const MicroTransformer& other) const {
    auto same = [](const Matrix& a, const Matrix& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() &&
               std::equal(a.data(), a.data() + a.size(), b.data(), [](double x, double y) {
                   return std::memcmp(&x, &y, sizeof(double)) == 0;
               });
    };
    if (!(cfg_ == other.cfg_) || units_.size() != other.units_.size() || others_.size() != other.others_.size())
        return false;
    for (std::size_t i = 0; i < units_.size(); ++i)
        if (units_[i].id != other.units_[i].id || !same(units_[i].values, other.units_[i].values)) return false;
    for (std::size_t i = 0; i < others_.size(); ++i)
        if (!same(others_[i].values, other.others_[i].values)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// operations

ForwardResult forward(const MicroTransformer& model, const TokenSequence& tokens, bool record) {
    const TokenSequence seqs[1] = {tokens};
    const BatchInput in = pack(model.config(), seqs);
    const BlockWeights w(model);
    ForwardCache cache;
    ForwardResult out;
    if (record) out.record = ActivationRecord::zeros(model.config().num_layers, model.config().hidden_dim());
    run_stack(model, w, in, cache, record ? &*out.record : nullptr);
    out.logits.noalias() = cache.final_norm * model.output_head();
    return out;
}

ActivationRecord record_activations(const MicroTransformer& model, std::span<const TokenSequence> inputs) {
    auto rec = ActivationRecord::zeros(model.config().num_layers, model.config().hidden_dim());
    if (inputs.empty()) return rec;
    const BlockWeights w(model);
    constexpr std::size_t kChunk = 64;
    for (std::size_t begin = 0; begin < inputs.size(); begin += kChunk) {
        const auto chunk = inputs.subspan(begin, std::min(kChunk, inputs.size() - begin));
        const BatchInput in = pack(model.config(), chunk);
        ForwardCache cache;
        run_stack(model, w, in, cache, &rec);
    }
    return rec;
}

LossAndGrads loss_and_grads(const MicroTransformer& model, std::span<const SupervisedSequence> batch) {
    BlockGrads g;
    LossAndGrads out;
    out.loss = compute(model, batch, false, g);
    for (const auto& ex : batch) out.scored_tokens += ex.target.size();
    out.grads = unit_grads(model, g);
    return out;
}

double loss_and_full_grads(const MicroTransformer& model, std::span<const SupervisedSequence> batch,
                           FullGradient& out) {
    BlockGrads g;
    const double loss = compute(model, batch, true, g);
    const auto& cfg = model.config();
    out.others.clear();
    out.others.push_back(std::move(g.embedding));
    out.others.push_back(std::move(g.position));
    out.others.push_back(std::move(g.head));
    if (cfg.adapter_mode == AdapterMode::low_rank) {
        for (int l = 0; l < cfg.num_layers; ++l)
            for (int k = 0; k < kBlockMatrices; ++k) out.others.push_back(g.layer[static_cast<std::size_t>(l)][k]);
    }
    out.units = unit_grads(model, g);
    return loss;
}

double loss_only(const MicroTransformer& model, std::span<const SupervisedSequence> batch) {
    const PreparedBatch pb = prepare(model.config(), batch);
    const BlockWeights w(model);
    ForwardCache cache;
    run_stack(model, w, pb.input, cache, nullptr);
    return head_loss(model, cache, pb, nullptr, nullptr);
}

void masked_update(MicroTransformer& model, const GradientMap& combined_grad, const UnitSet& mask, double lr) {
    if (lr < 0.0) throw InputError("masked_update: negative learning rate");
    for (const auto& id : mask) {
        auto& unit = model.unit(id);
        const Matrix& g = combined_grad.at(id);
        if (g.rows() != unit.rows() || g.cols() != unit.cols())
            throw InternalError("masked_update: shape mismatch at " + id.to_string());
        if (lr == 0.0) continue;
        unit.values.noalias() -= lr * g;
    }
}

std::vector<std::vector<int>> decode_greedy_batch(const MicroTransformer& model,
                                                  std::span<const TokenSequence> prompts, int max_new,
                                                  int stop_token) {
    if (max_new < 0) throw InputError("decode: max_new must be non-negative");
    for (const auto& p : prompts) {
        if (p.end_position() + max_new > model.config().max_seq_len)
            throw InputError("decode: prompt plus max_new exceeds max_seq_len");
    }
    std::vector<std::vector<int>> outputs(prompts.size());
    std::vector<TokenSequence> active(prompts.begin(), prompts.end());
    std::vector<std::size_t> owner(prompts.size());
    for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i;

    const BlockWeights w(model);
    for (int step = 0; step < max_new && !active.empty(); ++step) {
        const BatchInput in = pack(model.config(), active);
        ForwardCache cache;
        run_stack(model, w, in, cache, nullptr);
        std::vector<TokenSequence> next_active;
        std::vector<std::size_t> next_owner;
        for (std::size_t s = 0; s < active.size(); ++s) {
            const int last = in.spans[s].start + in.spans[s].length - 1;
            RowVector logits = cache.final_norm.row(last) * model.output_head();
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            const int tok = static_cast<int>(best);
            outputs[owner[s]].push_back(tok);
            const bool room = active[s].end_position() < model.config().max_seq_len;
            if (tok != stop_token && step + 1 < max_new && room) {
                TokenSequence grown = std::move(active[s]);
                grown.tokens.push_back(tok);
                next_active.push_back(std::move(grown));
                next_owner.push_back(owner[s]);
            }
        }
        active = std::move(next_active);
        owner = std::move(next_owner);
    }
    return outputs;
}

std::vector<int> decode_greedy(const MicroTransformer& model, const TokenSequence& prompt, int max_new,
                               int stop_token) {
    const TokenSequence one[1] = {prompt};
    return decode_greedy_batch(model, one, max_new, stop_token).front();
}

int predict_among(const MicroTransformer& model, const TokenSequence& prompt, std::span<const int> candidates) {
    if (candidates.empty()) throw InputError("predict_among: no candidates");
    const ForwardResult r = forward(model, prompt, false);
    const auto last = r.logits.rows() - 1;
    int best = candidates.front();
    for (int c : candidates) {
        if (c < 0 || c >= model.config().vocab_size) throw InputError("predict_among: candidate out of range");
        if (r.logits(last, c) > r.logits(last, best)) best = c;
    }
    return best;
}

}  // namespace parenting
