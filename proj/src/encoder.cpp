#include "npm/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace npm {

namespace {

template <class Params, class Fn>
void for_each_tensor(Params& p, Fn fn) {
    fn(p.token_embeddings);
    fn(p.position_embeddings);
    for (auto& l : p.layers) {
        for (auto& m : l.mix) fn(m);
        fn(l.mix_bias);
        fn(l.ff);
        fn(l.ff_bias);
    }
}

void check_config(const EncoderConfig& c) {
    if (c.h < 2) throw std::invalid_argument("config: h must be >= 2");
    if (c.n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (c.vocab_size < kNumReserved + 1)
        throw std::invalid_argument("config: vocab_size too small");
}

}  // namespace

EncoderParams init_params(const EncoderConfig& config) {
    check_config(config);
    EncoderParams p;
    p.config = config;
    const int h = static_cast<int>(config.h);
    const int taps = 2 * static_cast<int>(config.window) + 1;

    std::mt19937_64 rng(config.seed);
    auto fill = [&rng](auto& m, Scalar scale) {
        std::uniform_real_distribution<Scalar> dist(-scale, scale);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    };

    p.token_embeddings.resize(config.vocab_size, h);
    fill(p.token_embeddings, 1.0 / std::sqrt(static_cast<Scalar>(h)));
    p.position_embeddings.resize(config.max_positions, h);
    fill(p.position_embeddings, 1.0 / std::sqrt(static_cast<Scalar>(h)));

    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.mix.resize(taps);
        for (auto& m : l.mix) {
            m.resize(h, h);
            fill(m, 1.0 / std::sqrt(static_cast<Scalar>(h * taps)));
        }
        l.mix_bias = Vector::Zero(h);
        l.ff.resize(h, h);
        fill(l.ff, 1.0 / std::sqrt(static_cast<Scalar>(h)));
        l.ff_bias = Vector::Zero(h);
    }
    return p;
}

EncoderParams zeros_like(const EncoderParams& p) {
    EncoderParams z;
    z.config = p.config;
    z.token_embeddings = Matrix::Zero(p.token_embeddings.rows(), p.token_embeddings.cols());
    z.position_embeddings =
        Matrix::Zero(p.position_embeddings.rows(), p.position_embeddings.cols());
    z.layers.resize(p.layers.size());
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const auto& l = p.layers[i];
        auto& zl = z.layers[i];
        zl.mix.resize(l.mix.size());
        for (std::size_t d = 0; d < l.mix.size(); ++d)
            zl.mix[d] = Matrix::Zero(l.mix[d].rows(), l.mix[d].cols());
        zl.mix_bias = Vector::Zero(l.mix_bias.size());
        zl.ff = Matrix::Zero(l.ff.rows(), l.ff.cols());
        zl.ff_bias = Vector::Zero(l.ff_bias.size());
    }
    return z;
}

std::size_t param_count(const EncoderParams& p) {
    std::size_t n = 0;
    for_each_tensor(const_cast<EncoderParams&>(p), [&n](auto& t) { n += t.size(); });
    return n;
}

Vector flatten(const EncoderParams& p) {
    Vector flat(param_count(p));
    Eigen::Index off = 0;
    for_each_tensor(const_cast<EncoderParams&>(p), [&](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) flat[off++] = t.data()[i];
    });
    return flat;
}

void unflatten(const Vector& flat, EncoderParams& p) {
    if (static_cast<std::size_t>(flat.size()) != param_count(p))
        throw std::invalid_argument("unflatten: size mismatch");
    Eigen::Index off = 0;
    for_each_tensor(p, [&](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = flat[off++];
    });
}

ForwardTrace forward_trace(const EncoderParams& params, const TokenSeq& tokens) {
    const auto& c = params.config;
    const Eigen::Index L = static_cast<Eigen::Index>(tokens.size());
    if (tokens.size() > c.max_positions)
        throw std::runtime_error("sequence exceeds max positions");
    const int w = static_cast<int>(c.window);

    ForwardTrace tr;
    tr.tokens = tokens;
    tr.input.resize(L, c.h);
    for (Eigen::Index t = 0; t < L; ++t) {
        TokenId id = tokens[t];
        if (id < 0 || static_cast<std::uint32_t>(id) >= c.vocab_size)
            throw std::runtime_error("token id out of range");
        tr.input.row(t) =
            params.token_embeddings.row(id) + params.position_embeddings.row(t);
    }

    Matrix x = tr.input;
    for (const auto& layer : params.layers) {
        Matrix z = layer.mix_bias.transpose().replicate(L, 1);
        for (int d = -w; d <= w; ++d) {
            Eigen::Index n = L - std::abs(d);
            if (n <= 0) continue;
            Eigen::Index ts = std::max(0, -d);
            Eigen::Index ss = std::max(0, d);
            z.middleRows(ts, n).noalias() +=
                x.middleRows(ss, n) * layer.mix[w + d].transpose();
        }
        Matrix t = z.array().tanh().matrix();
        Matrix x1 = x + t;
        Matrix u = (x1 * layer.ff.transpose()).rowwise() + layer.ff_bias.transpose();
        u = u.array().tanh().matrix();
        Matrix x2 = x1 + u;

        tr.mix_out.push_back(std::move(t));
        tr.mix_res.push_back(std::move(x1));
        tr.ff_out.push_back(std::move(u));
        tr.output_per_layer.push_back(x2);
        x = std::move(x2);
    }
    if (params.layers.empty()) tr.output_per_layer.push_back(x);
    return tr;
}

Matrix encode_sequence(const EncoderParams& params, const TokenSeq& tokens) {
    return forward_trace(params, tokens).output();
}

namespace {
Eigen::Index single_mask_position(const TokenSeq& tokens) {
    Eigen::Index pos = -1;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] == kMask) {
            if (pos >= 0) throw std::runtime_error("query must contain exactly one mask");
            pos = static_cast<Eigen::Index>(t);
        }
    }
    if (pos < 0) throw std::runtime_error("query must contain exactly one mask");
    return pos;
}
}  // namespace

QueryEncoding encode_query(const EncoderParams& params, const TokenSeq& tokens) {
    Eigen::Index pos = single_mask_position(tokens);
    TokenSeq dual;
    dual.reserve(tokens.size() + 1);
    dual.assign(tokens.begin(), tokens.begin() + pos);
    dual.push_back(kMaskStart);
    dual.push_back(kMaskEnd);
    dual.insert(dual.end(), tokens.begin() + pos + 1, tokens.end());

    Matrix out = encode_sequence(params, dual);
    QueryEncoding q;
    q.q_start = out.row(pos).transpose();
    q.q_end = out.row(pos + 1).transpose();
    return q;
}

Vector encode_query_single(const EncoderParams& params, const TokenSeq& tokens) {
    Eigen::Index pos = single_mask_position(tokens);
    Matrix out = encode_sequence(params, tokens);
    return out.row(pos).transpose();
}

void backward(const EncoderParams& params, const ForwardTrace& trace,
              const Matrix& upstream, EncoderParams& grads) {
    const auto& c = params.config;
    const Eigen::Index L = static_cast<Eigen::Index>(trace.tokens.size());
    if (upstream.rows() != L || upstream.cols() != static_cast<Eigen::Index>(c.h))
        throw std::invalid_argument("backward: upstream shape mismatch");
    const int w = static_cast<int>(c.window);

    Matrix g = upstream;
    for (int li = static_cast<int>(params.layers.size()) - 1; li >= 0; --li) {
        const auto& layer = params.layers[li];
        auto& gl = grads.layers[li];
        const Matrix& x = li == 0 ? trace.input : trace.output_per_layer[li - 1];
        const Matrix& t = trace.mix_out[li];
        const Matrix& x1 = trace.mix_res[li];
        const Matrix& u = trace.ff_out[li];

        // x2 = x1 + tanh(x1 * ff^T + b)
        Matrix du = (g.array() * (1.0 - u.array().square())).matrix();
        gl.ff.noalias() += du.transpose() * x1;
        gl.ff_bias += du.colwise().sum().transpose();
        Matrix gx1 = g;
        gx1.noalias() += du * layer.ff;

        // x1 = x + tanh(mix(x) + b)
        Matrix dt = (gx1.array() * (1.0 - t.array().square())).matrix();
        Matrix gx = gx1;
        for (int d = -w; d <= w; ++d) {
            Eigen::Index n = L - std::abs(d);
            if (n <= 0) continue;
            Eigen::Index ts = std::max(0, -d);
            Eigen::Index ss = std::max(0, d);
            gl.mix[w + d].noalias() +=
                dt.middleRows(ts, n).transpose() * x.middleRows(ss, n);
            gx.middleRows(ss, n).noalias() += dt.middleRows(ts, n) * layer.mix[w + d];
        }
        gl.mix_bias += dt.colwise().sum().transpose();
        g = std::move(gx);
    }

    for (Eigen::Index t = 0; t < L; ++t) {
        grads.token_embeddings.row(trace.tokens[t]) += g.row(t);
        grads.position_embeddings.row(t) += g.row(t);
    }
}

EncoderParams forward_with_grad(const EncoderParams& params, const TokenSeq& tokens,
                                const Matrix& upstream) {
    EncoderParams grads = zeros_like(params);
    ForwardTrace tr = forward_trace(params, tokens);
    backward(params, tr, upstream, grads);
    return grads;
}

namespace {
constexpr char kMagic[4] = {'N', 'P', 'M', 'E'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("truncated parameter file");
    return b[0] | (b[1] << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}
}  // namespace

void save_params(const EncoderParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    write_u32(f, p.config.h);
    write_u32(f, p.config.n_layers);
    write_u32(f, p.config.window);
    write_u32(f, p.config.max_positions);
    write_u32(f, p.config.vocab_size);
    write_u32(f, p.config.seed);
    for_each_tensor(const_cast<EncoderParams&>(p), [&f](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            float v = static_cast<float>(t.data()[i]);
            f.write(reinterpret_cast<const char*>(&v), sizeof(float));
        }
    });
}

EncoderParams load_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("unrecognized parameter file");
    std::uint32_t version = read_u32(f);
    if (version != kVersion)
        throw std::runtime_error("parameter file version mismatch: expected " +
                                 std::to_string(kVersion) + ", found " +
                                 std::to_string(version));
    EncoderConfig c;
    c.h = read_u32(f);
    c.n_layers = read_u32(f);
    c.window = read_u32(f);
    c.max_positions = read_u32(f);
    c.vocab_size = read_u32(f);
    c.seed = read_u32(f);

    EncoderParams p = init_params(c);
    for_each_tensor(p, [&f](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            float v;
            f.read(reinterpret_cast<char*>(&v), sizeof(float));
            if (!f) throw std::runtime_error("truncated parameter file");
            t.data()[i] = static_cast<Scalar>(v);
        }
    });
    return p;
}

}  // namespace npm
