#include "saelab/datagen.hpp"
#include "saelab/featurestats.hpp"
#include "saelab/intervene.hpp"
#include "saelab/nanomodel.hpp"
#include "saelab/pipeline.hpp"
#include "saelab/readouts.hpp"
#include "saelab/sae.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace saelab;

namespace {

RowMatrixF to_float_rows(const Eigen::Ref<const RowMatrixD>& x) { return x.cast<float>(); }

Cohort make_cohort(int n_patients, std::uint64_t seed, bool end_markers, bool planted, double effect_size,
                   double mortality_rate) {
  CohortConfig cc;
  cc.n_patients = n_patients;
  cc.mortality_rate = mortality_rate;
  cc.end_of_stay_markers = end_markers;
  cc.vocab = desk_vocab_config(end_markers);
  if (planted) cc.planted = PlantedAssociationSpec{"MED:WARFARIN", "LAB:INR:Q5", effect_size};
  return generate_cohort(cc, seed);
}

TrainResult train_on_rows(const Eigen::Ref<const RowMatrixD>& rows, int expansion, int k, int steps, double lr,
                          int batch_rows, std::uint64_t seed) {
  SaeConfig c;
  c.width = static_cast<int>(rows.cols());
  c.expansion = expansion;
  c.k = k;
  c.steps = steps;
  c.lr = lr;
  c.seed = seed;
  MatrixRowStream stream(to_float_rows(rows), batch_rows, seed);
  py::gil_scoped_release release;
  return train_sae(stream, c);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse autoencoder analysis of clinical sequence models";
  m.attr("__version__") = kToolVersion;

  auto& base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<MissingPrerequisite>(m, "MissingPrerequisite", base);
  py::register_exception<NumericalError>(m, "NumericalError", base);
  py::register_exception<FormatError>(m, "FormatError", base);

  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<std::vector<std::string>>())
      .def("__len__", &Vocabulary::size)
      .def("token", &Vocabulary::token)
      .def("id_of", &Vocabulary::id_of)
      .def("category_of", &Vocabulary::category_of)
      .def_property_readonly("tokens", &Vocabulary::tokens)
      .def_property_readonly("death_id", &Vocabulary::death_id);

  py::class_<PatientRecord>(m, "PatientRecord")
      .def_readonly("token_ids", &PatientRecord::token_ids)
      .def_readonly("time_deltas", &PatientRecord::time_deltas)
      .def_readonly("died", &PatientRecord::died)
      .def_readonly("los_hours", &PatientRecord::los_hours)
      .def_readonly("demographics", &PatientRecord::demographics);

  py::class_<PlantedAssociation>(m, "PlantedAssociation")
      .def_readonly("treatment_token", &PlantedAssociation::treatment_token)
      .def_readonly("outcome_token_high", &PlantedAssociation::outcome_token_high)
      .def_readonly("effect_size", &PlantedAssociation::effect_size);

  py::class_<Cohort>(m, "Cohort")
      .def_readonly("patients", &Cohort::patients)
      .def_readonly("vocabulary", &Cohort::vocabulary)
      .def_readonly("planted", &Cohort::planted)
      .def_readonly("latent_severity", &Cohort::latent_severity)
      .def("__len__", [](const Cohort& c) { return c.patients.size(); });

  m.def("generate_cohort", &make_cohort, py::arg("n_patients"), py::arg("seed") = 0, py::arg("end_markers") = false,
        py::arg("planted") = true, py::arg("effect_size") = 1.0, py::arg("mortality_rate") = 0.053);
  m.def("input_tokens", &input_tokens);
  m.def(
      "planted_dictionary",
      [](int width, int f_true, int k_true, int n, double noise, std::uint64_t seed) {
        auto d = planted_dictionary_dataset(width, f_true, k_true, n, noise, seed);
        return py::make_tuple(d.atoms, d.codes, d.samples);
      },
      py::arg("width"), py::arg("f_true"), py::arg("k_true"), py::arg("n"), py::arg("noise_sigma") = 0.01,
      py::arg("seed") = 0);

  py::class_<ModelWeights>(m, "ModelWeights")
      .def_property_readonly("width", [](const ModelWeights& w) { return w.config.width; })
      .def_property_readonly("extraction_points", [](const ModelWeights& w) { return w.config.extraction_points(); });
  m.def(
      "init_toy_model",
      [](int vocab_size, std::uint64_t seed, int width, int n_layers, int n_heads) {
        ModelConfig mc;
        mc.vocab_size = vocab_size;
        mc.seed = seed;
        mc.width = width;
        mc.n_layers = n_layers;
        mc.n_heads = n_heads;
        return init_toy_model(mc);
      },
      py::arg("vocab_size"), py::arg("seed") = 0, py::arg("width") = 32, py::arg("n_layers") = 4,
      py::arg("n_heads") = 4);
  m.def("load_model", &load_model);
  m.def(
      "hidden_states",
      [](const ModelWeights& w, const std::vector<int>& tokens, int layer) {
        return forward_collect(w, tokens, {layer}).batches.front().states;
      },
      py::arg("model"), py::arg("tokens"), py::arg("layer"));
  m.def(
      "logits", [](const ModelWeights& w, const std::vector<int>& tokens) { return forward_collect(w, tokens, {}).logits; },
      py::arg("model"), py::arg("tokens"));

  py::class_<SaeModel>(m, "SaeModel")
      .def_property_readonly("width", &SaeModel::width)
      .def_property_readonly("features", &SaeModel::features)
      .def_property_readonly("k", &SaeModel::k)
      .def_readonly("w_dec", &SaeModel::w_dec)
      .def_readonly("w_enc", &SaeModel::w_enc)
      .def_readonly("b_dec", &SaeModel::b_dec)
      .def("encode", [](const SaeModel& s, const Eigen::Ref<const RowMatrixD>& h) {
        return encode(s, to_float_rows(h)).to_dense();
      })
      .def("reconstruct", [](const SaeModel& s, const Eigen::Ref<const RowMatrixD>& h) {
        return reconstruct(s, to_float_rows(h));
      })
      .def("explained_variance", [](const SaeModel& s, const Eigen::Ref<const RowMatrixD>& h) {
        return explained_variance(s, to_float_rows(h));
      })
      .def("save", [](const SaeModel& s, const std::filesystem::path& p) { save_sae(p, s); });

  m.def(
      "init_sae",
      [](int width, int expansion, int k, std::uint64_t seed) {
        SaeConfig c;
        c.width = width;
        c.expansion = expansion;
        c.k = k;
        c.seed = seed;
        return init_sae(c);
      },
      py::arg("width"), py::arg("expansion") = 8, py::arg("k") = 16, py::arg("seed") = 0);
  m.def(
      "train_sae",
      [](const Eigen::Ref<const RowMatrixD>& rows, int expansion, int k, int steps, double lr, int batch_rows,
         std::uint64_t seed) {
        auto r = train_on_rows(rows, expansion, k, steps, lr, batch_rows, seed);
        py::list log;
        for (const auto& row : r.log.rows) log.append(py::make_tuple(row.step, row.loss, row.dead_count, row.resampled));
        return py::make_tuple(r.model, log);
      },
      py::arg("rows"), py::arg("expansion") = 8, py::arg("k") = 16, py::arg("steps") = 1000, py::arg("lr") = 1e-3,
      py::arg("batch_rows") = 256, py::arg("seed") = 0);
  m.def("load_sae", [](const std::filesystem::path& p) { return load_sae(p); });

  m.def(
      "apply_delta",
      [](const SaeModel& s, const Eigen::Ref<const RowMatrixD>& h, const VectorF& mask) {
        RowMatrixF out = to_float_rows(h);
        apply_delta_rows(out, s, mask);
        return out;
      },
      py::arg("sae"), py::arg("h"), py::arg("mask"));
  m.def(
      "apply_reconstruct",
      [](const SaeModel& s, const Eigen::Ref<const RowMatrixD>& h, const VectorF& mask) {
        RowMatrixF out = to_float_rows(h);
        apply_reconstruct_rows(out, s, mask);
        return out;
      },
      py::arg("sae"), py::arg("h"), py::arg("mask"));
  m.def(
      "attenuation_mask",
      [](int n_features, const std::set<int>& targets, double alpha) {
        return attenuation_mask(n_features, targets, alpha);
      },
      py::arg("n_features"), py::arg("targets"), py::arg("alpha"));

  m.def("auc_roc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc_roc(s, y); });
  m.def("harrell_c", [](const std::vector<double>& s, const std::vector<double>& t, const std::vector<int>& e) {
    return harrell_c(s, t, e);
  });
  m.def(
      "cox_univariate",
      [](const std::vector<double>& x, const std::vector<double>& t, const std::vector<int>& e) {
        const auto r = cox_univariate(x, t, e);
        return py::dict(py::arg("beta") = r.beta, py::arg("hazard_ratio") = r.hazard_ratio, py::arg("se") = r.se,
                        py::arg("p_value") = r.p_value, py::arg("converged") = r.converged);
      },
      py::arg("x"), py::arg("times"), py::arg("events"));
  m.def("hungarian_maximize", &hungarian_maximize, py::arg("score"));
  m.def(
      "match_features",
      [](const MatrixF& a, const MatrixF& b, double threshold) {
        const auto r = match_features(a, b, threshold);
        return py::make_tuple(r.assignment, r.matched_fraction, r.mean_matched_cosine);
      },
      py::arg("dec_a"), py::arg("dec_b"), py::arg("threshold") = 0.7);
  m.def(
      "complexity",
      [](const Vocabulary& vocab, const std::vector<std::map<int, double>>& masses, double mass_floor) {
        std::vector<FeatureProfile> ps;
        for (std::size_t j = 0; j < masses.size(); ++j)
          ps.push_back(profile_from_masses(static_cast<int>(j), masses[j], vocab, mass_floor));
        const auto r = complexity_summary(ps);
        return py::dict(py::arg("singleton_pct") = r.singleton_pct,
                        py::arg("mean_tokens_per_feature") = r.mean_tokens_per_feature,
                        py::arg("single_category_pct") = r.single_category_pct,
                        py::arg("mean_category_entropy") = r.mean_category_entropy,
                        py::arg("coherent_pct") = r.coherent_pct, py::arg("concentrated_pct") = r.concentrated_pct);
      },
      py::arg("vocab"), py::arg("masses"), py::arg("mass_floor") = kDefaultMassFloor);
  m.def(
      "logistic_probe",
      [](const Eigen::Ref<const RowMatrixD>& x, const std::vector<int>& y, std::uint64_t seed, int bootstrap) {
        PatientFeatureMatrix pm;
        pm.rows = x;
        pm.died = y;
        pm.los_hours.assign(y.size(), 1.0);
        pm.time_to_event.assign(y.size(), 1.0);
        for (std::size_t i = 0; i < y.size(); ++i) pm.patient_ids.push_back(static_cast<int>(i));
        ProbeConfig cfg;
        cfg.bootstrap = bootstrap;
        py::gil_scoped_release release;
        const auto r = logistic_probe(pm, seed, cfg);
        py::gil_scoped_acquire acquire;
        return py::dict(py::arg("auc") = r.auc, py::arg("ci_low") = r.ci_low, py::arg("ci_high") = r.ci_high,
                        py::arg("chosen_c") = r.chosen_c, py::arg("n_test") = r.n_test,
                        py::arg("underpowered") = r.underpowered);
      },
      py::arg("x"), py::arg("labels"), py::arg("seed") = 0, py::arg("bootstrap") = 500);

  m.def("default_config", &default_config_map);
  m.def(
      "run_stage",
      [](const std::string& stage, const ConfigMap& overrides) {
        auto map = default_config_map();
        for (const auto& [k, v] : overrides) overlay_assignment(map, k + "=" + v);
        const auto cfg = resolve_config(map);
        py::gil_scoped_release release;
        if (stage == "all") {
          run_all(cfg);
        } else {
          run_stage(stage, cfg);
        }
      },
      py::arg("stage"), py::arg("config") = ConfigMap{});
  m.def("verify_manifest", &verify_manifest, py::arg("run_dir"));
}
