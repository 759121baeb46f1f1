#include "lmlab/model.hpp"

#include <cmath>

namespace lmlab {

namespace {

Tensor eye(std::size_t n) {
    Tensor t = Tensor::zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

bool norm_has_params(NormKind k) { return k == NormKind::layer || k == NormKind::batch; }

NormParams init_norm(NormKind kind, int d_e) {
    NormParams n;
    n.kind = kind;
    if (norm_has_params(kind)) {
        n.diag = Tensor::full(static_cast<std::size_t>(d_e), 1.0);
        n.bias = Tensor::zeros(static_cast<std::size_t>(d_e));
    }
    return n;
}

// cos/sin feature tables for the roformer inner product, absolute
// positions offset+1 .. offset+m, psi_j = gamma^(-2j/c).
void roformer_tables(std::size_t m, std::size_t c, double gamma, std::size_t offset, Tensor& cos_t,
                     Tensor& sin_t) {
    cos_t = Tensor::zeros(m, c);
    sin_t = Tensor::zeros(m, c);
    for (std::size_t r = 0; r < m; ++r) {
        const double pos = static_cast<double>(offset + r + 1);
        for (std::size_t j = 0; j < c; ++j) {
            const double psi = std::pow(gamma, -2.0 * static_cast<double>(j + 1) / static_cast<double>(c));
            cos_t.at(r, j) = std::cos(pos * psi);
            sin_t.at(r, j) = std::sin(pos * psi);
        }
    }
}

struct AttNodes {
    int q = -1, k = -1, v = -1;
};

int attention_t(Graph& g, const AttentionParams& p, const AttNodes& w, int h, std::size_t m,
                std::size_t index_offset) {
    const int g1 = g.matmul_nt(h, w.q);  // (m, c)
    const int g2 = g.matmul_nt(h, w.k);
    int z;
    if (p.inner == InnerProductKind::roformer) {
        Tensor ct, st;
        roformer_tables(m, g.value(g1).cols(), p.gamma, index_offset, ct, st);
        const int zc = g.matmul_nt(g.mul_const(g1, ct), g.mul_const(g2, ct));
        const int zs = g.matmul_nt(g.mul_const(g1, st), g.mul_const(g2, st));
        z = g.add(zc, zs);
    } else {
        z = g.matmul_nt(g1, g2);
    }
    if (p.scale_logits) {
        z = g.scale(z, 1.0 / std::sqrt(static_cast<double>(g.value(g1).cols())));
    }
    const int wn = g.softmax_rows_masked(z, build_mask(p.mask, m, p.band_r, p.adjacency));
    const int hv = g.matmul_nt(h, w.v);  // row l = V h_l
    return g.add(h, g.matmul(wn, hv));
}

int norm_t(Graph& g, const NormParams& p, int h, int diag, int bias) {
    switch (p.kind) {
        case NormKind::none:
            return h;
        case NormKind::layer:
            return g.layer_norm_rows(h, diag, bias, p.eps);
        case NormKind::rms:
            return g.rms_norm_rows(h);
        case NormKind::batch:
            throw ContractViolation("batch normalization is not defined inside the sequence path");
    }
    return h;
}

struct FfnNodes {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};

int ffn_t(Graph& g, const FFNParams& p, const FfnNodes& w, int h) {
    int r = g.add_row_bcast(g.matmul_nt(h, w.w1), w.b1);
    if (p.act == Activation::relu) {
        r = g.relu(r);
    }
    return g.add_row_bcast(g.matmul_nt(r, w.w2), w.b2);
}

int block_t(Graph& g, const BlockParams& p, const ParamNodes::Block& w, int h, std::size_t m,
            std::size_t index_offset) {
    const int a = attention_t(g, p.att, {w.q, w.k, w.v}, h, m, index_offset);
    const int n1 = norm_t(g, p.norm1, a, w.n1_diag, w.n1_bias);
    const int f = g.add(n1, ffn_t(g, p.ffn, {w.w1, w.b1, w.w2, w.b2}, n1));
    return norm_t(g, p.norm2, f, w.n2_diag, w.n2_bias);
}

int ssm_t(Graph& g, const ParamSet& params, const ParamNodes& nodes, int h, std::size_t m) {
    auto [e, phi] = build_ssm_discretization(g, nodes.ssm_a, nodes.ssm_b, params.ssm.dt);
    const std::size_t d_e = g.value(h).cols();
    int v = nodes.ssm_v0;
    std::vector<int> rows;
    rows.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const int hin = i == 0 ? g.constant(Tensor::zeros(d_e)) : g.select_row(h, i - 1);
        v = g.add(g.matvec(e, v), g.matvec(phi, hin));
        rows.push_back(g.add(g.matvec(nodes.ssm_c, v), g.matvec(nodes.ssm_d, g.select_row(h, i))));
    }
    return g.stack_rows(rows);
}

}  // namespace

std::vector<std::uint8_t> build_mask(MaskKind kind, std::size_t m, int band_r,
                                     const std::vector<std::uint8_t>& adjacency) {
    std::vector<std::uint8_t> mask(m * m, 1);
    switch (kind) {
        case MaskKind::none:
            break;
        case MaskKind::causal:
            for (std::size_t k = 0; k < m; ++k)
                for (std::size_t l = 0; l < m; ++l) mask[k * m + l] = l <= k ? 1 : 0;
            break;
        case MaskKind::banded:
            require(band_r >= 1, "banded mask requires bandwidth r >= 1");
            for (std::size_t k = 0; k < m; ++k)
                for (std::size_t l = 0; l < m; ++l) {
                    const long d = static_cast<long>(k) - static_cast<long>(l);
                    mask[k * m + l] = (d <= band_r && d >= -band_r) ? 1 : 0;
                }
            break;
        case MaskKind::adjacency:
            require(adjacency.size() == m * m, "adjacency mask must be m x m at call time");
            mask = adjacency;
            break;
    }
    return mask;
}

ParamSet init_params(const TokenSpace& space, const ModelConfig& cfg, std::uint64_t seed) {
    require(space.size >= 2, "init_params: vocabulary too small");
    require(cfg.d_e >= 1 && cfg.c >= 1 && cfg.c_prime >= 1, "init_params: bad channel dims");
    require(cfg.n_blocks >= 0, "init_params: negative block count");
    require(cfg.tau > 0.0, "init_params: temperature must be positive");
    require(cfg.context_length >= 2, "init_params: context length too small");
    make_positional(cfg.positional, cfg.d_e);  // validates even d_e
    if (cfg.arch == ArchKind::ssm) {
        require(cfg.ssm_state >= 1, "init_params: ssm state dimension s >= 1");
        require(cfg.ssm_dt > 0.0, "init_params: ssm step must be positive");
    }

    SeededRng rng(seed);
    const auto V = static_cast<std::size_t>(space.size);
    const auto de = static_cast<std::size_t>(cfg.d_e);
    const auto c = static_cast<std::size_t>(cfg.c);
    const auto cp = static_cast<std::size_t>(cfg.c_prime);

    ParamSet p;
    p.space = space;
    p.cfg = cfg;
    SeededRng er = rng.split(1);
    p.embedding = randn(V, de, er, 0.02);
    for (int bi = 0; bi < cfg.n_blocks; ++bi) {
        SeededRng br = rng.split(100 + static_cast<std::uint64_t>(bi));
        BlockParams blk;
        blk.att.q = randn(c, de, br, 0.02);
        blk.att.k = randn(c, de, br, 0.02);
        blk.att.v = randn(de, de, br, 0.02);
        blk.att.inner = cfg.inner;
        blk.att.gamma = cfg.gamma;
        blk.att.mask = cfg.mask;
        blk.att.band_r = cfg.band_r;
        blk.att.scale_logits = cfg.scale_logits;
        blk.norm1 = init_norm(cfg.norm, cfg.d_e);
        blk.ffn.w1 = randn(cp, de, br, 0.02);
        blk.ffn.b1 = Tensor::zeros(cp);
        blk.ffn.w2 = randn(de, cp, br, 0.02);
        blk.ffn.b2 = Tensor::zeros(de);
        blk.ffn.act = cfg.act;
        blk.norm2 = init_norm(cfg.norm, cfg.d_e);
        p.blocks.push_back(std::move(blk));
    }
    SeededRng orr = rng.split(2);
    p.output = randn(V, de, orr, 0.02);
    if (cfg.arch == ArchKind::ssm) {
        SeededRng sr = rng.split(3);
        const auto s = static_cast<std::size_t>(cfg.ssm_state);
        p.ssm.a = randn(s, s, sr, 0.02);
        p.ssm.b = randn(s, de, sr, 0.02);
        p.ssm.c = randn(de, s, sr, 0.02);
        p.ssm.d = randn(de, de, sr, 0.02);
        p.ssm.v0 = Tensor::zeros(s);
        p.ssm.dt = cfg.ssm_dt;
    }
    return p;
}

std::vector<Tensor*> ParamSet::leaves() {
    std::vector<Tensor*> out;
    out.push_back(&embedding);
    for (auto& b : blocks) {
        out.push_back(&b.att.q);
        out.push_back(&b.att.k);
        out.push_back(&b.att.v);
        if (norm_has_params(b.norm1.kind)) {
            out.push_back(&b.norm1.diag);
            out.push_back(&b.norm1.bias);
        }
        out.push_back(&b.ffn.w1);
        out.push_back(&b.ffn.b1);
        out.push_back(&b.ffn.w2);
        out.push_back(&b.ffn.b2);
        if (norm_has_params(b.norm2.kind)) {
            out.push_back(&b.norm2.diag);
            out.push_back(&b.norm2.bias);
        }
    }
    out.push_back(&output);
    if (cfg.arch == ArchKind::ssm) {
        out.push_back(&ssm.a);
        out.push_back(&ssm.b);
        out.push_back(&ssm.c);
        out.push_back(&ssm.d);
        out.push_back(&ssm.v0);
    }
    return out;
}

std::vector<const Tensor*> ParamSet::leaves() const {
    auto mut = const_cast<ParamSet*>(this)->leaves();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> ParamSet::leaf_names() const {
    std::vector<std::string> out;
    out.push_back("embedding");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        out.push_back(p + "att.q");
        out.push_back(p + "att.k");
        out.push_back(p + "att.v");
        if (norm_has_params(blocks[i].norm1.kind)) {
            out.push_back(p + "norm1.diag");
            out.push_back(p + "norm1.bias");
        }
        out.push_back(p + "ffn.w1");
        out.push_back(p + "ffn.b1");
        out.push_back(p + "ffn.w2");
        out.push_back(p + "ffn.b2");
        if (norm_has_params(blocks[i].norm2.kind)) {
            out.push_back(p + "norm2.diag");
            out.push_back(p + "norm2.bias");
        }
    }
    out.push_back("output");
    if (cfg.arch == ArchKind::ssm) {
        out.push_back("ssm.a");
        out.push_back("ssm.b");
        out.push_back("ssm.c");
        out.push_back("ssm.d");
        out.push_back("ssm.v0");
    }
    return out;
}

ParamNodes register_params(Graph& g, const ParamSet& params) {
    ParamNodes n;
    auto reg = [&](const Tensor& t) {
        const int id = g.leaf(t);
        n.ids.push_back(id);
        return id;
    };
    n.embedding = reg(params.embedding);
    for (const auto& b : params.blocks) {
        ParamNodes::Block bn;
        bn.q = reg(b.att.q);
        bn.k = reg(b.att.k);
        bn.v = reg(b.att.v);
        if (norm_has_params(b.norm1.kind)) {
            bn.n1_diag = reg(b.norm1.diag);
            bn.n1_bias = reg(b.norm1.bias);
        }
        bn.w1 = reg(b.ffn.w1);
        bn.b1 = reg(b.ffn.b1);
        bn.w2 = reg(b.ffn.w2);
        bn.b2 = reg(b.ffn.b2);
        if (norm_has_params(b.norm2.kind)) {
            bn.n2_diag = reg(b.norm2.diag);
            bn.n2_bias = reg(b.norm2.bias);
        }
        n.blocks.push_back(bn);
    }
    n.output = reg(params.output);
    if (params.cfg.arch == ArchKind::ssm) {
        n.ssm_a = reg(params.ssm.a);
        n.ssm_b = reg(params.ssm.b);
        n.ssm_c = reg(params.ssm.c);
        n.ssm_d = reg(params.ssm.d);
        n.ssm_v0 = reg(params.ssm.v0);
    }
    return n;
}

int build_blocks(Graph& g, const ParamSet& params, const ParamNodes& nodes, int h, std::size_t m,
                 std::size_t index_offset) {
    int cur = h;
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const auto& blk = params.blocks[i];
        const auto& bn = nodes.blocks[i];
        int a;
        if (params.cfg.arch == ArchKind::ssm) {
            a = ssm_t(g, params, nodes, cur, m);
        } else {
            a = attention_t(g, blk.att, {bn.q, bn.k, bn.v}, cur, m, index_offset);
        }
        const int n1 = norm_t(g, blk.norm1, a, bn.n1_diag, bn.n1_bias);
        const int f = g.add(n1, ffn_t(g, blk.ffn, {bn.w1, bn.b1, bn.w2, bn.b2}, n1));
        cur = norm_t(g, blk.norm2, f, bn.n2_diag, bn.n2_bias);
    }
    return cur;
}

int build_next_token_logits(Graph& g, const ParamSet& params, const ParamNodes& nodes,
                            const TokenSeq& prefix) {
    require(!prefix.empty(), "next-token conditional on an empty prefix");
    require(prefix.size() <= static_cast<std::size_t>(params.cfg.context_length),
            "prefix longer than the context length");
    std::vector<std::size_t> rows;
    rows.reserve(prefix.size());
    for (int id : prefix) {
        require(id >= 1 && id <= params.space.size, "token id out of range");
        rows.push_back(static_cast<std::size_t>(id - 1));
    }
    int h = g.gather_rows(nodes.embedding, rows);
    if (params.cfg.positional == PositionalKind::trigonometric) {
        const PositionalEncoder enc = make_positional(params.cfg.positional, params.cfg.d_e);
        h = g.add_const(h, positional_matrix(enc, prefix.size()));
    }
    const int t = build_blocks(g, params, nodes, h, prefix.size());
    const int pooled =
        params.cfg.pool == PoolKind::mean ? g.mean_rows(t) : g.max_rows(t);
    return g.scale(g.matvec(nodes.output, pooled), 1.0 / params.cfg.tau);
}

std::pair<int, int> build_ssm_discretization(Graph& g, int a, int b, double dt) {
    require(dt > 0.0, "ssm step must be positive");
    const Tensor& av = g.value(a);
    require(av.rank() == 2 && av.rows() == av.cols(), "ssm: A must be square");
    const std::size_t s = av.rows();

    double nrm = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < s; ++j) row += std::abs(av.at(i, j)) * dt;
        nrm = std::max(nrm, row);
    }
    int squarings = 0;
    while (nrm > 0.5 && squarings < 40) {
        nrm *= 0.5;
        squarings += 1;
    }
    const double h = dt / std::pow(2.0, squarings);
    const int x = g.scale(a, h);

    const Tensor id = eye(s);
    // P_k = X^k / k!; E = sum P_k; Tser = sum P_k / (k+1).
    int e = g.add_const(x, id);
    int tser = g.add_const(g.scale(x, 0.5), id);
    int p = x;
    for (int k = 2; k <= 13; ++k) {
        p = g.scale(g.matmul(p, x), 1.0 / k);
        e = g.add(e, p);
        tser = g.add(tser, g.scale(p, 1.0 / (k + 1)));
    }
    int t = g.scale(tser, h);
    for (int i = 0; i < squarings; ++i) {
        t = g.matmul(g.add_const(e, id), t);  // T(2h) = (I + E(h)) T(h)
        e = g.matmul(e, e);
    }
    return {e, g.matmul(t, b)};
}

// ---- plain operations ------------------------------------------------------

Tensor attention(const AttentionParams& p, const Tensor& h, std::size_t index_offset) {
    require(h.rank() == 2 && h.rows() > 0, "attention: nonempty rank-2 sequence required");
    Graph g;
    const AttNodes w{g.leaf(p.q), g.leaf(p.k), g.leaf(p.v)};
    return g.value(attention_t(g, p, w, g.leaf(h), h.rows(), index_offset));
}

Tensor attention_weights(const AttentionParams& p, const Tensor& h, std::size_t index_offset) {
    require(h.rank() == 2 && h.rows() > 0, "attention: nonempty rank-2 sequence required");
    Graph g;
    const int hn = g.leaf(h);
    const int g1 = g.matmul_nt(hn, g.leaf(p.q));
    const int g2 = g.matmul_nt(hn, g.leaf(p.k));
    int z;
    if (p.inner == InnerProductKind::roformer) {
        Tensor ct, st;
        roformer_tables(h.rows(), g.value(g1).cols(), p.gamma, index_offset, ct, st);
        z = g.add(g.matmul_nt(g.mul_const(g1, ct), g.mul_const(g2, ct)),
                  g.matmul_nt(g.mul_const(g1, st), g.mul_const(g2, st)));
    } else {
        z = g.matmul_nt(g1, g2);
    }
    if (p.scale_logits) {
        z = g.scale(z, 1.0 / std::sqrt(static_cast<double>(p.q.rows())));
    }
    return g.value(g.softmax_rows_masked(z, build_mask(p.mask, h.rows(), p.band_r, p.adjacency)));
}

Tensor measure_attention(const AttentionParams& p, const Tensor& s, const EmpiricalMeasure& m) {
    require(p.inner == InnerProductKind::euclidean,
            "measure_attention is defined for the euclidean inner product");
    require(m.atoms.rank() == 2 && m.atoms.rows() > 0, "measure_attention: empty measure");
    require(s.rank() == 1 && s.numel() == m.atoms.cols(), "measure_attention: dimension mismatch");
    const std::size_t n = m.atoms.rows();
    std::vector<double> w(n, 1.0);
    if (!m.weights.empty()) {
        require(m.weights.size() == n, "measure_attention: weight count mismatch");
        w = m.weights;
    }
    const Tensor qs = matvec(p.q, s);
    Tensor logits = Tensor::zeros(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor u = Tensor::zeros(m.atoms.cols());
        for (std::size_t j = 0; j < u.numel(); ++j) u.at(j) = m.atoms.at(i, j);
        logits.at(i) = dot(qs, matvec(p.k, u));
    }
    double mx = logits.at(0);
    for (double v : logits.data) mx = std::max(mx, v);
    double z = 0.0;
    std::vector<double> pw(n);
    for (std::size_t i = 0; i < n; ++i) {
        require(w[i] >= 0.0, "measure_attention: negative weight");
        pw[i] = w[i] * std::exp(logits.at(i) - mx);
        z += pw[i];
    }
    require(z > 0.0, "measure_attention: measure has zero mass");
    Tensor mean = Tensor::zeros(m.atoms.cols());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < mean.numel(); ++j) mean.at(j) += (pw[i] / z) * m.atoms.at(i, j);
    }
    Tensor out = s;
    const Tensor vm = matvec(p.v, mean);
    for (std::size_t j = 0; j < out.numel(); ++j) out.at(j) += vm.at(j);
    return out;
}

Tensor normalize(const NormParams& p, const Tensor& v,
                 const std::optional<EmpiricalMeasure>& batch_context) {
    require(v.rank() == 1 && v.numel() > 0, "normalize: rank-1 input required");
    const std::size_t d = v.numel();
    switch (p.kind) {
        case NormKind::none:
            return v;
        case NormKind::rms: {
            const double n = norm2(v);
            if (n == 0.0) {
                throw ContractViolation("rms normalization of a zero vector");
            }
            Tensor out = v;
            for (double& x : out.data) x /= n;
            return out;
        }
        case NormKind::layer: {
            require(p.diag.numel() == d && p.bias.numel() == d, "normalize: parameter shape mismatch");
            double mu = 0.0;
            for (double x : v.data) mu += x;
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (double x : v.data) var += (x - mu) * (x - mu);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + p.eps);
            Tensor out = v;
            for (std::size_t j = 0; j < d; ++j) out.at(j) = p.diag.at(j) * (v.at(j) - mu) * inv + p.bias.at(j);
            return out;
        }
        case NormKind::batch: {
            require(batch_context.has_value() && batch_context->atoms.rows() >= 2,
                    "batch normalization requires a context of at least two points");
            const Tensor& atoms = batch_context->atoms;
            require(atoms.cols() == d, "normalize: batch context dimension mismatch");
            require(p.diag.numel() == d && p.bias.numel() == d, "normalize: parameter shape mismatch");
            const std::size_t n = atoms.rows();
            std::vector<double> wts(n, 1.0 / static_cast<double>(n));
            if (!batch_context->weights.empty()) {
                require(batch_context->weights.size() == n, "normalize: weight count mismatch");
                wts = batch_context->weights;
            }
            Tensor mu = Tensor::zeros(d);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) mu.at(j) += wts[i] * atoms.at(i, j);
            Tensor var = Tensor::zeros(d);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    const double c = atoms.at(i, j) - mu.at(j);
                    var.at(j) += wts[i] * c * c;
                }
            Tensor out = v;
            for (std::size_t j = 0; j < d; ++j)
                out.at(j) = p.diag.at(j) * (v.at(j) - mu.at(j)) / std::sqrt(var.at(j) + p.eps) + p.bias.at(j);
            return out;
        }
    }
    return v;
}

Tensor ffn(const FFNParams& p, const Tensor& x) {
    require(x.rank() == 1, "ffn: rank-1 input required");
    Tensor h = matvec(p.w1, x);
    for (std::size_t i = 0; i < h.numel(); ++i) {
        h.at(i) += p.b1.at(i);
        if (p.act == Activation::relu && h.at(i) < 0.0) h.at(i) = 0.0;
    }
    Tensor out = matvec(p.w2, h);
    for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) += p.b2.at(i);
    return out;
}

Tensor attention_block(const BlockParams& p, const Tensor& h, std::size_t index_offset) {
    Graph g;
    ParamNodes::Block bn;
    bn.q = g.leaf(p.att.q);
    bn.k = g.leaf(p.att.k);
    bn.v = g.leaf(p.att.v);
    if (norm_has_params(p.norm1.kind)) {
        bn.n1_diag = g.leaf(p.norm1.diag);
        bn.n1_bias = g.leaf(p.norm1.bias);
    }
    bn.w1 = g.leaf(p.ffn.w1);
    bn.b1 = g.leaf(p.ffn.b1);
    bn.w2 = g.leaf(p.ffn.w2);
    bn.b2 = g.leaf(p.ffn.b2);
    if (norm_has_params(p.norm2.kind)) {
        bn.n2_diag = g.leaf(p.norm2.diag);
        bn.n2_bias = g.leaf(p.norm2.bias);
    }
    return g.value(block_t(g, p, bn, g.leaf(h), h.rows(), index_offset));
}

Tensor pool(PoolKind kind, const Tensor& h) {
    require(h.rank() == 2 && h.rows() > 0, "pool: nonempty rank-2 sequence required");
    Tensor out = Tensor::zeros(h.cols());
    if (kind == PoolKind::mean) {
        for (std::size_t r = 0; r < h.rows(); ++r)
            for (std::size_t j = 0; j < h.cols(); ++j) out.at(j) += h.at(r, j);
        for (double& v : out.data) v /= static_cast<double>(h.rows());
    } else {
        for (std::size_t j = 0; j < h.cols(); ++j) {
            double best = h.at(0, j);
            for (std::size_t r = 1; r < h.rows(); ++r) best = std::max(best, h.at(r, j));
            out.at(j) = best;
        }
    }
    return out;
}

Tensor softmax(const Tensor& z) {
    require(z.all_finite(), "softmax: non-finite input");
    return softmax_vec(z);
}

Tensor next_token_distribution(const ParamSet& params, const TokenSeq& prefix) {
    Graph g;
    const ParamNodes nodes = register_params(g, params);
    const int logits = build_next_token_logits(g, params, nodes, prefix);
    return softmax_vec(g.value(logits));
}

Tensor ssm_map(const SsmParams& p, const Tensor& h) {
    require(h.rank() == 2 && h.rows() > 0, "ssm_map: nonempty rank-2 sequence required");
    Graph g;
    ParamNodes nodes;
    nodes.ssm_a = g.leaf(p.a);
    nodes.ssm_b = g.leaf(p.b);
    nodes.ssm_c = g.leaf(p.c);
    nodes.ssm_d = g.leaf(p.d);
    nodes.ssm_v0 = g.leaf(p.v0);
    ParamSet ps;
    ps.ssm = p;
    ps.cfg.arch = ArchKind::ssm;
    return g.value(ssm_t(g, ps, nodes, g.leaf(h), h.rows()));
}

}  // namespace lmlab
