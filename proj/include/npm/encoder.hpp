#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npm/types.hpp"

namespace npm {

struct EncoderConfig {
    std::uint32_t h = 64;             // embedding dimension
    std::uint32_t n_layers = 2;
    std::uint32_t window = 4;         // context half-width per mixing layer
    std::uint32_t max_positions = 257;
    std::uint32_t vocab_size = 0;
    std::uint32_t seed = 0;
};

struct LayerParams {
    // One h-by-h matrix per relative offset in [-window, window];
    // mix[window + d] applies to the token at offset d.
    std::vector<Matrix> mix;
    Vector mix_bias;
    Matrix ff;
    Vector ff_bias;
};

// Also used as the gradient structure (same shapes).
struct EncoderParams {
    EncoderConfig config;
    Matrix token_embeddings;     // vocab_size x h
    Matrix position_embeddings;  // max_positions x h
    std::vector<LayerParams> layers;
};

// Seeded init: embeddings and weights zero-mean uniform, scaled by 1/sqrt(fan_in).
EncoderParams init_params(const EncoderConfig& config);

EncoderParams zeros_like(const EncoderParams& p);

// Flat views for optimizers and finite-difference checks. Tensor order is
// fixed: token embeddings, position embeddings, then per layer
// {mix[-w..w], mix_bias, ff, ff_bias}.
std::size_t param_count(const EncoderParams& p);
Vector flatten(const EncoderParams& p);
void unflatten(const Vector& flat, EncoderParams& p);

// Windowed-mixer forward pass: token+position embedding, then n_layers of
// {window mixing + tanh + residual, pointwise feed-forward + tanh + residual}.
// Returns one h-vector per input position (rows).
Matrix encode_sequence(const EncoderParams& params, const TokenSeq& tokens);

struct QueryEncoding {
    Vector q_start;
    Vector q_end;
};

// Replaces the single MASK with MASK_S, MASK_E (length grows by one) and
// returns the output vectors at those two positions.
QueryEncoding encode_query(const EncoderParams& params, const TokenSeq& tokens);

// NPM-single variant: no duplication, returns the output at the MASK position.
Vector encode_query_single(const EncoderParams& params, const TokenSeq& tokens);

// Forward pass with cached intermediates for reverse mode.
struct ForwardTrace {
    TokenSeq tokens;
    Matrix input;                     // embedded input, L x h
    std::vector<Matrix> mix_out;      // tanh(mix) per layer
    std::vector<Matrix> mix_res;      // after mixing residual
    std::vector<Matrix> ff_out;       // tanh(ff) per layer
    std::vector<Matrix> output_per_layer;
    const Matrix& output() const { return output_per_layer.back(); }
};

ForwardTrace forward_trace(const EncoderParams& params, const TokenSeq& tokens);

// Accumulates exact reverse-mode gradients of the forward map into `grads`
// (shapes of EncoderParams) given d(loss)/d(output) rows.
void backward(const EncoderParams& params, const ForwardTrace& trace,
              const Matrix& upstream, EncoderParams& grads);

// Convenience wrapper matching the forward/backward pair.
EncoderParams forward_with_grad(const EncoderParams& params, const TokenSeq& tokens,
                                const Matrix& upstream);

// Binary persistence: magic "NPME", version u32, config as u32 sequence,
// tensors as little-endian f32 in declaration order.
void save_params(const EncoderParams& p, const std::string& path);
EncoderParams load_params(const std::string& path);

}  // namespace npm
