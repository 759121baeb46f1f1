#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lmlab/embed.hpp"
#include "lmlab/graph.hpp"
#include "lmlab/tokens.hpp"

namespace lmlab {

enum class InnerProductKind { euclidean, roformer };
enum class MaskKind { none, causal, banded, adjacency };

struct AttentionParams {
    Tensor q;  // (c, d_e)
    Tensor k;  // (c, d_e)
    Tensor v;  // (d_e, d_e)
    InnerProductKind inner = InnerProductKind::euclidean;
    double gamma = 10000.0;  // roformer frequency base, psi_j = gamma^(-2j/c)
    MaskKind mask = MaskKind::none;
    int band_r = 1;
    std::vector<std::uint8_t> adjacency;  // row-major, query row x key col
    bool scale_logits = false;            // optional 1/sqrt(c), off by default
};

enum class NormKind { none, layer, rms, batch };

struct NormParams {
    NormKind kind = NormKind::layer;
    Tensor diag;  // (d_e), layer/batch
    Tensor bias;  // (d_e), layer/batch
    double eps = 1e-5;
};

enum class Activation { relu, identity };

struct FFNParams {
    Tensor w1;  // (c', d_e)
    Tensor b1;  // (c')
    Tensor w2;  // (d_e, c')
    Tensor b2;  // (d_e)
    Activation act = Activation::relu;
};

struct BlockParams {
    AttentionParams att;
    NormParams norm1;
    FFNParams ffn;
    NormParams norm2;
};

struct SsmParams {
    Tensor a;   // (s, s)
    Tensor b;   // (s, d_e)
    Tensor c;   // (d_e, s)
    Tensor d;   // (d_e, d_e)
    Tensor v0;  // (s)
    double dt = 0.1;
};

enum class PoolKind { mean, max };
enum class ArchKind { transformer, ssm };

struct ModelConfig {
    int d_e = 4;
    int c = 4;
    int c_prime = 8;
    int n_blocks = 1;
    int context_length = 16;  // L
    double tau = 1.0;
    PoolKind pool = PoolKind::mean;
    NormKind norm = NormKind::layer;
    MaskKind mask = MaskKind::causal;
    int band_r = 1;
    InnerProductKind inner = InnerProductKind::euclidean;
    double gamma = 10000.0;
    bool scale_logits = false;
    PositionalKind positional = PositionalKind::trigonometric;
    ArchKind arch = ArchKind::transformer;
    int ssm_state = 4;  // s
    double ssm_dt = 0.1;
    Activation act = Activation::relu;
};

// Full learnable parameter set: embedding, per-block attention/norm/FFN
// parameters, output matrix, and the shared SSM parameters when the
// architecture uses them.
struct ParamSet {
    TokenSpace space;
    ModelConfig cfg;
    Tensor embedding;  // (|V|, d_e), row v-1 is the embedding of token v
    std::vector<BlockParams> blocks;
    Tensor output;  // (|V|, d_e)
    SsmParams ssm;

    std::vector<Tensor*> leaves();
    std::vector<const Tensor*> leaves() const;
    std::vector<std::string> leaf_names() const;
};

ParamSet init_params(const TokenSpace& space, const ModelConfig& cfg, std::uint64_t seed);

// Query-row x key-col allowance matrix for an m-element sequence.
std::vector<std::uint8_t> build_mask(MaskKind kind, std::size_t m, int band_r,
                                     const std::vector<std::uint8_t>& adjacency);

// ---- plain (inference) operations ----------------------------------------

// Sequence-to-sequence attention; index_offset shifts the absolute
// positions seen by the roformer inner product.
Tensor attention(const AttentionParams& p, const Tensor& h, std::size_t index_offset = 0);

// Post-softmax weight matrix w_{kl}, for inspecting positional structure.
Tensor attention_weights(const AttentionParams& p, const Tensor& h, std::size_t index_offset = 0);

struct EmpiricalMeasure {
    Tensor atoms;                 // (n, d_e)
    std::vector<double> weights;  // empty = uniform
};

// First stage of the measure-form attention map: s + V E_{u~pi(.;s)}[u].
Tensor measure_attention(const AttentionParams& p, const Tensor& s, const EmpiricalMeasure& m);

// Pointwise normalization; batch kind requires a context with >= 2 atoms.
Tensor normalize(const NormParams& p, const Tensor& v,
                 const std::optional<EmpiricalMeasure>& batch_context = std::nullopt);

Tensor ffn(const FFNParams& p, const Tensor& x);

Tensor attention_block(const BlockParams& p, const Tensor& h, std::size_t index_offset = 0);

Tensor pool(PoolKind kind, const Tensor& h);

// Probability simplex map with max subtraction; see also softmax_vec.
Tensor softmax(const Tensor& z);

// sigma(B T(phi o f) / tau) over the full vocabulary. The prefix must be
// nonempty and no longer than the context length.
Tensor next_token_distribution(const ParamSet& params, const TokenSeq& prefix);

// Linear state-space recursion with zero-order hold input and h_0 = 0;
// output k depends only on inputs up to k.
Tensor ssm_map(const SsmParams& p, const Tensor& h);

// ---- differentiable graph builders ----------------------------------------

// Node ids of every parameter leaf registered in a graph, in declared order.
struct ParamNodes {
    std::vector<int> ids;
    int embedding = -1;
    int output = -1;
    struct Block {
        int q = -1, k = -1, v = -1;
        int n1_diag = -1, n1_bias = -1;
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
        int n2_diag = -1, n2_bias = -1;
    };
    std::vector<Block> blocks;
    int ssm_a = -1, ssm_b = -1, ssm_c = -1, ssm_d = -1, ssm_v0 = -1;
};

ParamNodes register_params(Graph& g, const ParamSet& params);

// Runs the block stack (attention or SSM variant) on an embedded sequence
// node of shape (m, d_e); returns a node of the same shape.
int build_blocks(Graph& g, const ParamSet& params, const ParamNodes& nodes, int h, std::size_t m,
                 std::size_t index_offset = 0);

// Embeds a prefix, applies positional encoding and the block stack, pools,
// and returns the (|V|) node of temperature-scaled logits.
int build_next_token_logits(Graph& g, const ParamSet& params, const ParamNodes& nodes,
                            const TokenSeq& prefix);

// Matrix exponential exp(A*dt) and the zero-order-hold input matrix
// integral_0^dt exp(A (dt - z)) B dz, built on tape (Taylor series with
// scaling and squaring) so gradients flow to A and B.
std::pair<int, int> build_ssm_discretization(Graph& g, int a, int b, double dt);

}  // namespace lmlab
