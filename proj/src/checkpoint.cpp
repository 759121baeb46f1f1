#include "lmlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lmlab {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw ConfigError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("write failed for '" + path + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return bytes;
}

void put_blocks(std::string& out, const std::vector<const Tensor*>& leaves) {
    for (const Tensor* t : leaves) {
        for (double v : t->data) put_f64(out, v);
    }
}

constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const ParamSet& params, std::uint64_t source_hash, const std::string& path) {
    std::string out = "LMF1";
    put_u32(out, kVersion);
    const ModelConfig& c = params.cfg;
    put_u32(out, static_cast<std::uint32_t>(c.d_e));
    put_u32(out, static_cast<std::uint32_t>(c.c));
    put_u32(out, static_cast<std::uint32_t>(c.c_prime));
    put_u32(out, static_cast<std::uint32_t>(c.n_blocks));
    put_u32(out, static_cast<std::uint32_t>(params.space.size));
    put_u32(out, static_cast<std::uint32_t>(c.context_length));
    put_u32(out, static_cast<std::uint32_t>(c.ssm_state));
    put_u64(out, source_hash);
    put_u32(out, static_cast<std::uint32_t>(params.space.bos));
    put_u32(out, static_cast<std::uint32_t>(params.space.eos));
    put_u32(out, static_cast<std::uint32_t>(params.space.pad));
    put_u32(out, static_cast<std::uint32_t>(c.arch));
    put_u32(out, static_cast<std::uint32_t>(c.pool));
    put_u32(out, static_cast<std::uint32_t>(c.norm));
    put_u32(out, static_cast<std::uint32_t>(c.mask));
    put_u32(out, static_cast<std::uint32_t>(c.inner));
    put_u32(out, static_cast<std::uint32_t>(c.positional));
    put_u32(out, static_cast<std::uint32_t>(c.act));
    put_u32(out, static_cast<std::uint32_t>(c.band_r));
    put_u32(out, c.scale_logits ? 1 : 0);
    put_f64(out, c.tau);
    put_f64(out, c.gamma);
    put_f64(out, c.ssm_dt);
    put_blocks(out, static_cast<const ParamSet&>(params).leaves());
    write_file(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || bytes.compare(0, 4, "LMF1") != 0) {
        throw ConfigError("'" + path + "' is not a model checkpoint (bad magic)");
    }
    Reader r{bytes, 4};
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw ConfigError("checkpoint version " + std::to_string(version) + " unsupported; " +
                          "this build reads version " + std::to_string(kVersion) +
                          " (re-train or convert the checkpoint)");
    }
    ModelConfig c;
    c.d_e = static_cast<int>(r.u32());
    c.c = static_cast<int>(r.u32());
    c.c_prime = static_cast<int>(r.u32());
    c.n_blocks = static_cast<int>(r.u32());
    const int vocab = static_cast<int>(r.u32());
    c.context_length = static_cast<int>(r.u32());
    c.ssm_state = static_cast<int>(r.u32());
    LoadedCheckpoint out;
    out.source_hash = r.u64();
    TokenSpace space;
    space.size = vocab;
    space.bos = static_cast<int>(r.u32());
    space.eos = static_cast<int>(r.u32());
    space.pad = static_cast<int>(r.u32());
    c.arch = static_cast<ArchKind>(r.u32());
    c.pool = static_cast<PoolKind>(r.u32());
    c.norm = static_cast<NormKind>(r.u32());
    c.mask = static_cast<MaskKind>(r.u32());
    c.inner = static_cast<InnerProductKind>(r.u32());
    c.positional = static_cast<PositionalKind>(r.u32());
    c.act = static_cast<Activation>(r.u32());
    c.band_r = static_cast<int>(r.u32());
    c.scale_logits = r.u32() != 0;
    c.tau = r.f64();
    c.gamma = r.f64();
    c.ssm_dt = r.f64();

    out.params = init_params(space, c, 0);
    for (Tensor* t : out.params.leaves()) {
        for (double& v : t->data) v = r.f64();
    }
    if (r.pos != bytes.size()) {
        throw ConfigError("checkpoint has trailing bytes; file is corrupt");
    }
    return out;
}

void require_source_hash(const LoadedCheckpoint& ckpt, std::uint64_t expected) {
    if (ckpt.source_hash != expected) {
        throw ConfigError("checkpoint was written against a different vocabulary (hash " +
                          std::to_string(ckpt.source_hash) + ", expected " +
                          std::to_string(expected) + ")");
    }
}

void require_matching_config(const ParamSet& loaded, const TokenSpace& space,
                             const ModelConfig& cfg) {
    auto check = [](const char* name, int got, int want) {
        if (got != want) {
            throw ConfigError(std::string("checkpoint ") + name + "=" + std::to_string(got) +
                              " but the configuration expects " + std::to_string(want));
        }
    };
    check("d_e", loaded.cfg.d_e, cfg.d_e);
    check("c", loaded.cfg.c, cfg.c);
    check("c_prime", loaded.cfg.c_prime, cfg.c_prime);
    check("blocks", loaded.cfg.n_blocks, cfg.n_blocks);
    check("|V|", loaded.space.size, space.size);
    check("L", loaded.cfg.context_length, cfg.context_length);
    check("s", loaded.cfg.ssm_state, cfg.ssm_state);
}

void save_score_checkpoint(const TabularScore& model, const SequenceGenerator& gen,
                           const TimeGrid& grid, const std::string& path) {
    std::string out = "LMS1";
    put_u32(out, kVersion);
    put_u32(out, 1);  // tabular kind
    put_u32(out, static_cast<std::uint32_t>(gen.token.n_tokens));
    put_u32(out, static_cast<std::uint32_t>(gen.length));
    put_u32(out, static_cast<std::uint32_t>(grid.cells));
    put_u32(out, 0);
    for (double v : model.log_s_.data) put_f64(out, v);
    write_file(path, out);
}

void save_score_checkpoint(const NetScore& model, const SequenceGenerator& gen, double horizon,
                           const std::string& path) {
    std::string out = "LMS1";
    put_u32(out, kVersion);
    put_u32(out, 2);  // network kind
    put_u32(out, static_cast<std::uint32_t>(gen.token.n_tokens));
    put_u32(out, static_cast<std::uint32_t>(gen.length));
    auto leaves = const_cast<NetScore&>(model).leaf_tensors();
    put_u32(out, static_cast<std::uint32_t>(leaves[0]->rows()));  // hidden width
    put_u32(out, 0);
    put_f64(out, horizon);
    for (Tensor* t : leaves) {
        for (double v : t->data) put_f64(out, v);
    }
    write_file(path, out);
}

LoadedScore load_score_checkpoint(const std::string& path, const SequenceGenerator& gen,
                                  const NoiseSchedule& sched, const TimeGrid& grid) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || bytes.compare(0, 4, "LMS1") != 0) {
        throw ConfigError("'" + path + "' is not a score checkpoint (bad magic)");
    }
    Reader r{bytes, 4};
    if (r.u32() != kVersion) throw ConfigError("score checkpoint version unsupported");
    LoadedScore out;
    out.kind = static_cast<int>(r.u32());
    const int n = static_cast<int>(r.u32());
    const int length = static_cast<int>(r.u32());
    if (n != gen.token.n_tokens || length != gen.length) {
        throw ConfigError("score checkpoint dimensions do not match the configured chain");
    }
    if (out.kind == 1) {
        const int cells = static_cast<int>(r.u32());
        r.u32();
        if (cells != grid.cells) throw ConfigError("score checkpoint grid mismatch");
        auto model = std::make_unique<TabularScore>(gen, grid);
        for (double& v : model->log_s_.data) v = r.f64();
        if (r.pos != bytes.size()) throw ConfigError("score checkpoint has trailing bytes");
        out.model = std::move(model);
    } else if (out.kind == 2) {
        const int hidden = static_cast<int>(r.u32());
        r.u32();
        const double horizon = r.f64();
        (void)sched;
        auto model = std::make_unique<NetScore>(gen, horizon, hidden, 0);
        for (Tensor* t : model->leaf_tensors()) {
            for (double& v : t->data) v = r.f64();
        }
        if (r.pos != bytes.size()) throw ConfigError("score checkpoint has trailing bytes");
        out.model = std::move(model);
    } else {
        throw ConfigError("unknown score model kind in checkpoint");
    }
    return out;
}

}  // namespace lmlab
