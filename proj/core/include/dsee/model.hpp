#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dsee/adapter.hpp"
#include "dsee/matrix.hpp"

namespace dsee {

struct ToyTransformerConfig {
    int vocab_size = 0;
    int seq_len = 0;
    int d_model = 0;
    int n_heads = 0;
    int d_ff = 0;
    int n_layers = 0;
    int n_classes = 0;

    /// Throws ParameterError unless all fields are positive and
    /// d_model % n_heads == 0.
    void validate() const;

    bool operator==(const ToyTransformerConfig&) const = default;
};

/// Weight matrix with an optional unstructured mask and an optional
/// sparsity-embedded low-rank update; evaluates (w (.) mask) x + u(vx) + s2 x.
struct AdaptedLinear {
    DenseMatrix weight;
    std::optional<UnstructuredMask> mask;
    std::optional<SparseLowRankUpdate> adapter;

    bool operator==(const AdaptedLinear&) const = default;
};

struct EncoderLayer {
    std::vector<float> ln1_gamma, ln1_beta;
    AdaptedLinear wq, wk, wv; // attn_dim x d_model
    AdaptedLinear wo;         // d_model x attn_dim
    std::vector<float> gates; // one multiplicative coefficient per head
    std::vector<float> ln2_gamma, ln2_beta;
    DenseMatrix ffn_w1; // d_ff x d_model
    DenseMatrix ffn_w2; // d_model x d_ff

    bool operator==(const EncoderLayer&) const = default;
};

/// Minimal pre-norm encoder: token + learned position embeddings, per-layer
/// multi-head self-attention with per-head gate coefficients applied before
/// the output projection, GELU feed-forward, mean pooling, linear classifier.
/// Head gates start at 1.0 so a fresh model computes the plain dense pass.
struct ToyTransformer {
    ToyTransformerConfig cfg; // cfg.n_heads tracks the current head count
    int head_dim = 0;         // fixed at construction: d_model / initial n_heads
    DenseMatrix tok_emb;      // vocab x d_model
    DenseMatrix pos_emb;      // seq_len x d_model
    std::vector<EncoderLayer> layers;
    DenseMatrix cls_weight; // n_classes x d_model
    std::vector<float> cls_bias;

    int attn_dim() const { return cfg.n_heads * head_dim; }

    /// Fresh dense model, weights ~ N(0, 0.02), layer-norm at identity,
    /// gates at 1.0, biases zero. No adapters, no masks.
    static ToyTransformer init(const ToyTransformerConfig& cfg, Rng& rng);

    bool operator==(const ToyTransformer&) const = default;
};

/// Token id batch, row per sequence.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids; // row-major batch x seq

    std::int32_t operator()(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
    static TokenBatch from_rows(const std::vector<std::vector<std::int32_t>>& rows);
};

// ---- parameter registry ----------------------------------------------------

enum class ParamKind { Pretrained, AdapterU, AdapterV, AdapterS2, Gate, Classifier };

/// Mutable view into one named parameter group of a model.
struct ParamView {
    std::string name;
    ParamKind kind;
    float* data;
    std::size_t size;
    std::vector<std::size_t> shape;
};

/// Deterministically ordered list of every parameter group (embeddings,
/// layer-norms, projections, adapters, gates, feed-forward, classifier).
std::vector<ParamView> named_parameters(ToyTransformer& model);

struct GradBuffer {
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

/// One gradient buffer per parameter group, keyed by the registry names.
struct GradientSet {
    std::map<std::string, GradBuffer> buffers;

    const GradBuffer& at(const std::string& name) const;
    GradBuffer& at(const std::string& name);

    /// Throws TrainingError naming the offending group if any entry is
    /// non-finite.
    void check_finite() const;
};

// ---- forward / loss / backward ---------------------------------------------

/// Deterministic forward pass to classifier logits (batch x n_classes).
/// Internally computed in f64, rounded to f32 at the output.
/// Throws InputError on out-of-range token ids.
DenseMatrix forward_logits(const ToyTransformer& model, const TokenBatch& tokens);

/// Mean cross-entropy over the batch plus lambda_l1 * sum of |gate| over all
/// layers' head gates.
double loss(const DenseMatrix& logits, const std::vector<int>& labels,
            const std::vector<std::vector<float>>& gates_per_layer, double lambda_l1);

/// Full-precision loss of the model on a batch (the f64 path; used by
/// training and by finite-difference checks).
double eval_loss(const ToyTransformer& model, const TokenBatch& tokens,
                 const std::vector<int>& labels, double lambda_l1);

struct BackwardResult {
    double loss = 0.0;
    GradientSet grads;
};

/// Exact gradients for every parameter group. The |gate| penalty uses
/// subgradient 0 at zero. s2 gradients exist only for supported entries.
BackwardResult backward(const ToyTransformer& model, const TokenBatch& tokens,
                        const std::vector<int>& labels, double lambda_l1);

/// Fraction of argmax(logits) matching labels.
double eval_accuracy(const ToyTransformer& model, const TokenBatch& tokens,
                     const std::vector<int>& labels);

} // namespace dsee
