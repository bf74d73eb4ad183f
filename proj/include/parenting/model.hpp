#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace parenting {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class AdapterMode : std::uint8_t { full = 0, low_rank = 1 };

std::string_view to_string(AdapterMode mode);
AdapterMode parse_adapter_mode(std::string_view text);

struct ModelConfig {
    int num_layers = 4;
    int model_dim = 64;
    int num_heads = 4;
    int ffn_dim = 0;  // 0 selects the 4*d default
    int vocab_size = 128;
    int max_seq_len = 40;
    AdapterMode adapter_mode = AdapterMode::full;
    int adapter_rank = 8;
    std::uint64_t seed = 1;

    int hidden_dim() const noexcept { return ffn_dim > 0 ? ffn_dim : 4 * model_dim; }
    int head_dim() const noexcept { return model_dim / num_heads; }

    /// Throws ConfigError naming the first offending field.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// The seven matrices of a decoder block, followed by the two low-rank factors.
enum class UnitKind : std::uint8_t { Wq = 0, Wk, Wv, Wo, W1Gate, VUp, W2Down, AdapterA, AdapterB };

inline constexpr int kBlockMatrices = 7;

std::string_view to_string(UnitKind kind);
UnitKind parse_unit_kind(std::string_view text);

struct ParameterUnitId {
    int layer = 1;  // 1-based
    UnitKind kind = UnitKind::Wq;
    UnitKind target = UnitKind::Wq;  // host matrix; only meaningful for adapter factors

    bool is_adapter() const noexcept {
        return kind == UnitKind::AdapterA || kind == UnitKind::AdapterB;
    }
    /// Column label used in heatmaps: "Wq", "A(Wq)", ...
    std::string kind_label() const;
    /// "L<layer>.<kind_label>"
    std::string to_string() const;
    static ParameterUnitId parse(std::string_view text);
    static ParameterUnitId from_label(int layer, std::string_view kind_label);

    std::strong_ordering operator<=>(const ParameterUnitId& other) const {
        if (auto c = layer <=> other.layer; c != 0) return c;
        if (auto c = kind <=> other.kind; c != 0) return c;
        return is_adapter() ? target <=> other.target : std::strong_ordering::equal;
    }
    bool operator==(const ParameterUnitId& other) const { return (*this <=> other) == 0; }
};

using UnitSet = std::set<ParameterUnitId>;

struct ParameterUnit {
    ParameterUnitId id;
    Matrix values;

    Eigen::Index rows() const noexcept { return values.rows(); }
    Eigen::Index cols() const noexcept { return values.cols(); }
};

/// A tensor that is not a parameter unit: embeddings, output head, and in
/// low-rank mode the frozen base matrices.
struct NamedTensor {
    std::string name;
    Matrix values;
};

struct LayerActivation {
    std::vector<std::int64_t> positive_counts;
    std::int64_t token_count = 0;
};

struct ActivationRecord {
    std::vector<LayerActivation> layers;

    static ActivationRecord zeros(int num_layers, int hidden_dim);
    void merge(const ActivationRecord& other);
    bool operator==(const ActivationRecord&) const = default;
};

bool operator==(const LayerActivation& a, const LayerActivation& b);

/// Adds one token per row of `preactivations` and counts entries strictly > 0.
void tally_positive(const Matrix& preactivations, LayerActivation& layer);

/// Gradients (or any other per-unit matrices) aligned with a model's units.
class GradientMap {
public:
    GradientMap() = default;
    GradientMap(std::vector<ParameterUnitId> ids, std::vector<Matrix> values);

    static GradientMap zeros_like(const class MicroTransformer& model);

    std::span<const ParameterUnitId> ids() const noexcept { return ids_; }
    std::size_t size() const noexcept { return ids_.size(); }

    Matrix& operator[](std::size_t index) { return values_[index]; }
    const Matrix& operator[](std::size_t index) const { return values_[index]; }
    Matrix& at(const ParameterUnitId& id);
    const Matrix& at(const ParameterUnitId& id) const;

    void add_scaled(const GradientMap& other, double scale);
    void scale(double factor);
    bool all_finite() const;
    /// Throws InternalError unless ids and shapes agree with `other`.
    void check_aligned(const GradientMap& other) const;

private:
    std::vector<ParameterUnitId> ids_;
    std::vector<Matrix> values_;
};

struct TokenSequence {
    std::vector<int> tokens;
    int offset = 0;  // absolute position of tokens[0]; leading positions act as padding

    int end_position() const noexcept { return offset + static_cast<int>(tokens.size()); }
};

/// A prompt followed by the tokens the loss is computed on.
struct SupervisedSequence {
    TokenSequence prompt;
    std::vector<int> target;
};

struct ForwardResult {
    Matrix logits;  // seq_len x vocab_size
    std::optional<ActivationRecord> record;
};

struct LossAndGrads {
    double loss = 0.0;
    std::size_t scored_tokens = 0;
    GradientMap grads;
};

/// Gradients for every trainable tensor, units and non-units alike.
struct FullGradient {
    GradientMap units;
    std::vector<Matrix> others;  // aligned with MicroTransformer::others()
};

class MicroTransformer {
public:
    /// Deterministic initialisation from cfg.seed.
    static MicroTransformer init(const ModelConfig& cfg);

    const ModelConfig& config() const noexcept { return cfg_; }

    std::span<const ParameterUnit> units() const noexcept { return units_; }
    std::span<ParameterUnit> units() noexcept { return units_; }
    std::vector<ParameterUnitId> unit_ids() const;
    std::size_t unit_index(const ParameterUnitId& id) const;
    const ParameterUnit& unit(const ParameterUnitId& id) const { return units_[unit_index(id)]; }
    ParameterUnit& unit(const ParameterUnitId& id) { return units_[unit_index(id)]; }

    std::span<const NamedTensor> others() const noexcept { return others_; }
    std::span<NamedTensor> others() noexcept { return others_; }

    const Matrix& token_embedding() const { return others_[0].values; }
    const Matrix& position_embedding() const { return others_[1].values; }
    const Matrix& output_head() const { return others_[2].values; }

    /// Effective weight of a block matrix (base plus adapter product in low-rank mode).
    Matrix block_weight(int layer, UnitKind kind) const;

    UnitSet all_units() const;

    /// SHA-256 over config and every tensor, hex encoded.
    std::string checksum() const;
    /// SHA-256 over the given units only.
    std::string checksum(const UnitSet& subset) const;
    /// SHA-256 over embeddings, head and frozen bases.
    std::string checksum_others() const;

    bool all_finite() const;
    bool bit_identical(const MicroTransformer& other) const;

private:
    MicroTransformer() = default;

    ModelConfig cfg_;
    std::vector<ParameterUnit> units_;
    std::vector<NamedTensor> others_;
};

/// Logits for one sequence; optionally tallies Swish pre-activation signs.
ForwardResult forward(const MicroTransformer& model, const TokenSequence& tokens, bool record);

/// Tallies activation signs over every token of every sequence.
ActivationRecord record_activations(const MicroTransformer& model,
                                    std::span<const TokenSequence> inputs);

/// Mean cross-entropy over target tokens and its exact gradient with respect
/// to every parameter unit.
LossAndGrads loss_and_grads(const MicroTransformer& model,
                            std::span<const SupervisedSequence> batch);

/// Same loss, gradient for all trainable tensors (used for pretraining).
double loss_and_full_grads(const MicroTransformer& model,
                           std::span<const SupervisedSequence> batch, FullGradient& out);

/// Mean cross-entropy only.
double loss_only(const MicroTransformer& model, std::span<const SupervisedSequence> batch);

/// values -= lr * grad for units in `mask`; everything else untouched.
void masked_update(MicroTransformer& model, const GradientMap& combined_grad,
                   const UnitSet& mask, double lr);

/// Argmax continuation; stops after emitting `stop_token` (kept in the
/// output) or after max_new tokens.
std::vector<int> decode_greedy(const MicroTransformer& model, const TokenSequence& prompt,
                               int max_new, int stop_token);

/// Batched variant of decode_greedy. Results are identical to per-prompt calls.
std::vector<std::vector<int>> decode_greedy_batch(const MicroTransformer& model,
                                                  std::span<const TokenSequence> prompts,
                                                  int max_new, int stop_token);

/// Argmax over a restricted set of candidate tokens for the next position.
int predict_among(const MicroTransformer& model, const TokenSequence& prompt,
                  std::span<const int> candidates);

}  // namespace parenting
