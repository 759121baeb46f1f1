// Python bindings for the core operations: tokenizer training and coding,
// model construction, training, decoding, evaluation, diffusion sampling,
// and the selfcheck table.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lmlab/checkpoint.hpp"
#include "lmlab/eval.hpp"
#include "lmlab/selfcheck.hpp"
#include "lmlab/tokenizer.hpp"

namespace py = pybind11;
using namespace lmlab;

namespace {

Tensor tensor_from(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), "matrix must be nonempty");
    Tensor t = Tensor::zeros(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].size() == rows[0].size(), "ragged matrix");
        for (std::size_t j = 0; j < rows[i].size(); ++j) t.at(i, j) = rows[i][j];
    }
    return t;
}

std::vector<double> to_list(const Tensor& t) { return t.data; }

Dataset dataset_from(const TokenSpace& space, int length,
                     const std::vector<TokenSeq>& sequences) {
    Dataset d;
    d.space = space;
    d.length = length;
    d.sequences = sequences;
    d.validate();
    return d;
}

py::dict generation_dict(const Generation& g) {
    py::dict out;
    out["tokens"] = g.sequence;
    out["log_probability"] = g.log_probability;
    out["l_stop"] = g.l_stop;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "token-sequence modeling laboratory: BPE, set-transformer language models, "
              "decoding, discrete diffusion, and exact evaluation on synthetic languages";

    py::register_exception<ContractViolation>(m, "ContractViolation");
    py::register_exception<NumericalFailure>(m, "NumericalFailureError");
    py::register_exception<GuardRefusal>(m, "GuardRefusalError");
    py::register_exception<ConfigError>(m, "ConfigurationError");

    // ---- tokenizer ----
    py::class_<Vocabulary>(m, "Vocabulary")
        .def_property_readonly("size", &Vocabulary::size)
        .def_property_readonly("bos_id", &Vocabulary::bos_id)
        .def_property_readonly("eos_id", &Vocabulary::eos_id)
        .def_property_readonly("pad_id", &Vocabulary::pad_id)
        .def_property_readonly("merge_count",
                               [](const Vocabulary& v) { return v.merges.size(); })
        .def("encode", [](const Vocabulary& v, const std::string& text) { return encode(v, text); })
        .def("decode",
             [](const Vocabulary& v, const TokenSeq& ids) { return decode(v, ids); })
        .def("save", [](const Vocabulary& v) { return save_vocabulary(v); })
        .def_static("load", [](const std::string& text) { return load_vocabulary(text); });

    m.def("train_bpe", &train_bpe, py::arg("corpus"), py::arg("max_merges"),
          py::arg("base") = std::vector<std::string>{},
          "learn merge rules from a corpus of UTF-8 documents");

    // ---- token space & model ----
    py::class_<TokenSpace>(m, "TokenSpace")
        .def(py::init([](int size, int bos, int eos, int pad) {
                 return TokenSpace{size, bos, eos, pad};
             }),
             py::arg("size"), py::arg("bos") = 0, py::arg("eos") = 0, py::arg("pad") = 0)
        .def_readonly("size", &TokenSpace::size)
        .def_readonly("bos", &TokenSpace::bos)
        .def_readonly("eos", &TokenSpace::eos)
        .def_readonly("pad", &TokenSpace::pad);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("d_e", &ModelConfig::d_e)
        .def_readwrite("c", &ModelConfig::c)
        .def_readwrite("c_prime", &ModelConfig::c_prime)
        .def_readwrite("blocks", &ModelConfig::n_blocks)
        .def_readwrite("context_length", &ModelConfig::context_length)
        .def_readwrite("tau", &ModelConfig::tau)
        .def_property(
            "mask",
            [](const ModelConfig& c) {
                switch (c.mask) {
                    case MaskKind::none: return "none";
                    case MaskKind::causal: return "causal";
                    case MaskKind::banded: return "banded";
                    case MaskKind::adjacency: return "adjacency";
                }
                return "none";
            },
            [](ModelConfig& c, const std::string& v) {
                if (v == "none") c.mask = MaskKind::none;
                else if (v == "causal") c.mask = MaskKind::causal;
                else if (v == "banded") c.mask = MaskKind::banded;
                else throw ConfigError("unknown mask kind: " + v);
            })
        .def_property(
            "pooling",
            [](const ModelConfig& c) { return c.pool == PoolKind::mean ? "mean" : "max"; },
            [](ModelConfig& c, const std::string& v) {
                if (v == "mean") c.pool = PoolKind::mean;
                else if (v == "max") c.pool = PoolKind::max;
                else throw ConfigError("unknown pooling kind: " + v);
            });

    py::class_<ParamSet>(m, "ParamSet")
        .def_property_readonly("vocab_size", [](const ParamSet& p) { return p.space.size; })
        .def_property_readonly("context_length",
                               [](const ParamSet& p) { return p.cfg.context_length; })
        .def("leaf_names", &ParamSet::leaf_names)
        .def("save",
             [](const ParamSet& p, const std::string& path, std::uint64_t hash) {
                 save_checkpoint(p, hash, path);
             },
             py::arg("path"), py::arg("source_hash") = 0)
        .def_static("load", [](const std::string& path) {
            return load_checkpoint(path).params;
        });

    m.def("init_params", &init_params, py::arg("space"), py::arg("config"), py::arg("seed"));

    m.def("next_token_distribution",
          [](const ParamSet& p, const TokenSeq& prefix) {
              return to_list(next_token_distribution(p, prefix));
          },
          py::arg("params"), py::arg("prefix"));

    m.def("softmax",
          [](const std::vector<double>& z) { return to_list(softmax(Tensor::vec(z))); });

    // ---- synthetic languages & evaluation ----
    py::class_<SyntheticLanguage>(m, "SyntheticLanguage")
        .def_property_readonly("space", [](const SyntheticLanguage& l) { return l.space; })
        .def_property_readonly("length", [](const SyntheticLanguage& l) { return l.length; })
        .def("entropy_total", [](const SyntheticLanguage& l) { return entropy_total(l); });

    m.def("make_language",
          [](const std::vector<double>& initial, const std::vector<std::vector<double>>& transition,
             double hazard, int length) {
              return make_language(Tensor::vec(initial), tensor_from(transition), hazard, length);
          },
          py::arg("initial"), py::arg("transition"), py::arg("eos_hazard"), py::arg("length"));

    m.def("generate_synthetic",
          [](const SyntheticLanguage& lang, int n, std::uint64_t seed) {
              return generate_synthetic(lang, n, seed).sequences;
          },
          py::arg("language"), py::arg("n"), py::arg("seed"));

    m.def("train_lm",
          [](ParamSet& params, const std::vector<TokenSeq>& sequences, double learning_rate,
             int batch_size, int steps, double weight_decay, std::uint64_t seed,
             const std::string& method) {
              Dataset data = dataset_from(params.space, params.cfg.context_length, sequences);
              OptimizerConfig oc;
              oc.learning_rate = learning_rate;
              oc.batch_size = batch_size;
              oc.steps = steps;
              oc.weight_decay = weight_decay;
              oc.seed = seed;
              if (method == "sgd") oc.method = OptMethod::sgd;
              else if (method == "momentum") oc.method = OptMethod::momentum;
              else if (method == "adam") oc.method = OptMethod::adam;
              else throw ConfigError("unknown optimizer method: " + method);
              const TrainReport rep = train(params, data, oc);
              std::vector<std::tuple<int, double, double>> out;
              for (const auto& s : rep.steps) out.emplace_back(s.step, s.loss, s.grad_norm);
              return out;
          },
          py::arg("params"), py::arg("sequences"), py::arg("learning_rate") = 0.1,
          py::arg("batch_size") = 32, py::arg("steps") = 100, py::arg("weight_decay") = 0.0,
          py::arg("seed") = 0, py::arg("method") = "sgd");

    m.def("perplexity",
          [](const ParamSet& params, const std::vector<TokenSeq>& sequences) {
              Dataset data = dataset_from(params.space, params.cfg.context_length, sequences);
              TransformerLM lm(params);
              return perplexity(lm, data);
          },
          py::arg("params"), py::arg("sequences"));

    m.def("effectiveness",
          [](const SyntheticLanguage& lang, const ParamSet& params, const TokenSeq& prompt) {
              TransformerLM lm(params);
              return effectiveness(lang, lm, Prompt{prompt});
          },
          py::arg("language"), py::arg("params"), py::arg("prompt"));

    m.def("energy_distance",
          [](const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b,
             const std::string& projection, int token_id) {
              Projection proj;
              proj.kind = projection == "ids" ? ProjectionKind::id_vector
                                              : ProjectionKind::token_presence;
              proj.token_id = token_id;
              return energy_distance(a, b, proj);
          },
          py::arg("samples_a"), py::arg("samples_b"), py::arg("projection") = "presence",
          py::arg("token_id") = 1);

    // ---- decoding ----
    m.def("greedy",
          [](const ParamSet& p, const TokenSeq& prompt) {
              TransformerLM lm(p);
              return generation_dict(greedy(lm, Prompt{prompt}));
          });
    m.def("map_enumerate",
          [](const ParamSet& p, const TokenSeq& prompt) {
              TransformerLM lm(p);
              return generation_dict(map_enumerate(lm, Prompt{prompt}));
          });
    m.def("beam",
          [](const ParamSet& p, const TokenSeq& prompt, int k) {
              TransformerLM lm(p);
              return generation_dict(beam(lm, Prompt{prompt}, k));
          },
          py::arg("params"), py::arg("prompt"), py::arg("k") = 2);
    m.def("sample",
          [](const ParamSet& p, const TokenSeq& prompt, double tau, std::uint64_t seed) {
              TransformerLM lm(p);
              return generation_dict(sample(lm, Prompt{prompt}, tau, seed));
          },
          py::arg("params"), py::arg("prompt"), py::arg("tau") = 1.0, py::arg("seed") = 0);
    m.def("mixed",
          [](const ParamSet& p, const TokenSeq& prompt, int l_prime, double tau,
             std::uint64_t seed) {
              TransformerLM lm(p);
              return generation_dict(mixed(lm, Prompt{prompt}, l_prime, tau, seed));
          },
          py::arg("params"), py::arg("prompt"), py::arg("l_prime") = 1, py::arg("tau") = 1.0,
          py::arg("seed") = 0);

    // ---- discrete diffusion ----
    m.def("diffusion_forward_marginals",
          [](const std::string& kind, int n_tokens, double beta, int mask_id, int length,
             const std::vector<double>& p0, double sigma, double horizon, double t) {
              const GeneratorKind gk =
                  kind == "absorbing" ? GeneratorKind::absorbing : GeneratorKind::uniform;
              Generator tok = build_generator(gk, n_tokens, beta, mask_id);
              SequenceGenerator gen{tok, length};
              return to_list(forward_marginals(gen, constant_schedule(sigma, horizon),
                                               Tensor::vec(p0), t));
          },
          py::arg("kind"), py::arg("n_tokens"), py::arg("beta"), py::arg("mask_id"),
          py::arg("length"), py::arg("p0"), py::arg("sigma"), py::arg("horizon"), py::arg("t"));

    m.def("diffusion_reverse_samples",
          [](const std::string& kind, int n_tokens, double beta, int mask_id, int length,
             const std::vector<TokenSeq>& data, double sigma, double horizon, int n_samples,
             std::uint64_t seed, int steps) {
              const GeneratorKind gk =
                  kind == "absorbing" ? GeneratorKind::absorbing : GeneratorKind::uniform;
              Generator tok = build_generator(gk, n_tokens, beta, mask_id);
              SequenceGenerator gen{tok, length};
              Tensor p0 = Tensor::zeros(gen.n_states());
              for (const auto& s : data)
                  p0.at(state_index(gen, s)) += 1.0 / static_cast<double>(data.size());
              ExactRatios truth(gen, constant_schedule(sigma, horizon), std::move(p0));
              std::vector<TokenSeq> out;
              for (int i = 0; i < n_samples; ++i) {
                  out.push_back(reverse_sample(truth, gen, constant_schedule(sigma, horizon),
                                               seed + static_cast<std::uint64_t>(i), steps));
              }
              return out;
          },
          py::arg("kind"), py::arg("n_tokens"), py::arg("beta"), py::arg("mask_id"),
          py::arg("length"), py::arg("data"), py::arg("sigma"), py::arg("horizon"),
          py::arg("n_samples"), py::arg("seed") = 0, py::arg("steps") = 200);

    // ---- selfcheck ----
    m.def("selfcheck", []() {
        std::vector<std::tuple<std::string, bool, std::string>> out;
        for (const auto& r : run_selfchecks()) out.emplace_back(r.name, r.pass, r.detail);
        return out;
    });
}
