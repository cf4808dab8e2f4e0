#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cover/baseline.hpp"
#include "cover/cover.hpp"
#include "cover/error.hpp"
#include "cover/harness.hpp"
#include "cover/pac.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace cover;

namespace {

// Documents cross the boundary as JSON text; the Python side does the dict conversion.

std::vector<ScoreTrace> traces_from(const std::string& text) {
  const auto doc = json::parse(text);
  if (!doc.is_array()) throw ValidationError("traces must be a JSON array");
  std::vector<ScoreTrace> out;
  out.reserve(doc.size());
  for (const auto& t : doc) out.push_back(trace_from_json(t));
  return out;
}

std::string traces_to(const std::vector<ScoreTrace>& traces) {
  json doc = json::array();
  for (const auto& t : traces) doc.push_back(to_json(t));
  return doc.dump();
}

StepThresholds rule_from(const json& doc) {
  const std::string kind = doc.value("kind", std::string());
  if (kind == "cover") return CalibratedModel::from_json(doc).thresholds;
  if (kind == "dcbs") return DcbsCalibration::from_json(doc).rule();
  throw ValidationError("unknown calibration kind '" + kind + "'");
}

std::string simulate(const std::string& config, std::size_t n, std::uint64_t seed, int threads) {
  const auto doc = json::parse(config);
  const auto model = make_longtail_model(LongTailConfig::from_json(doc.contains("model") ? doc["model"] : doc));
  std::vector<ScoreTrace> traces;
  {
    py::gil_scoped_release nogil;
    traces = sample_dataset(model, n, seed, threads);
  }
  return traces_to(traces);
}

std::string longtail_model(const std::string& config) {
  return make_longtail_model(LongTailConfig::from_json(json::parse(config))).to_json().dump();
}

std::string calibrate_cover(const std::string& traces, double alpha, double lambda, int clusters,
                            std::size_t min_count, int bucket_width, std::vector<double> tau_grid, double gamma,
                            std::size_t budget, double epsilon, const std::string& score_scale,
                            const std::string& tradeoff, int max_len, std::uint64_t seed) {
  const auto data = traces_from(traces);
  CoverConfig c;
  c.alpha = alpha;
  c.lambda.uniform = lambda;
  c.clusters = clusters;
  c.min_count = min_count;
  c.bucket_width = bucket_width;
  if (!tau_grid.empty()) c.tau_grid = std::move(tau_grid);
  c.gamma = gamma;
  c.budget = budget;
  c.epsilon = epsilon;
  c.scale = parse_score_scale(score_scale);
  c.tradeoff = parse_tradeoff_rule(tradeoff);
  c.max_len = max_len;
  c.seed = seed;
  py::gil_scoped_release nogil;
  return calibrate(data, c).model.to_json().dump();
}

std::string calibrate_dcbs(const std::string& traces, double alpha, int max_len) {
  const auto data = traces_from(traces);
  const int L = max_len > 0 ? max_len : static_cast<int>(max_length(data));
  return dcbs_calibrate(data, alpha, L).to_json().dump();
}

std::string evaluate_doc(const std::string& calibration, const std::string& traces, const std::set<Token>& tail,
                         const std::string& ar_model) {
  const auto rule = rule_from(json::parse(calibration));
  const auto eval = traces_from(traces);
  EvalOptions opts;
  opts.tail_tokens = tail;
  std::optional<TabularARModel> model;
  if (!ar_model.empty()) {
    model = TabularARModel::from_json(json::parse(ar_model));
    opts.scorer = &*model;
  }
  py::gil_scoped_release nogil;
  return evaluate(rule, eval, opts).to_json().dump();
}

std::string run_experiment_doc(const std::string& config) {
  const auto c = ExperimentConfig::from_json(json::parse(config));
  py::gil_scoped_release nogil;
  return run_experiment(c).report.to_json().dump();
}

std::string bounds_doc(const std::string& calibration, const std::string& traces, double delta, double zeta,
                       const std::string& variant, const std::string& zeta_denominator) {
  const auto doc = json::parse(calibration);
  const auto rule = rule_from(doc);
  const auto data = traces_from(traces);
  std::vector<PathEvalRecord> recs;
  recs.reserve(data.size());
  for (const auto& t : data) recs.push_back(evaluate_path(t, rule));
  const auto v = parse_bound_variant(variant);
  const double miss = empirical_noncoverage(recs);
  const double base = v == BoundVariant::Main ? doc.at("alpha").get<double>() : miss;
  const auto stats = pair_stats(recs, delta, zeta);
  auto out = full_path_bound(stats, base, v, recs.size(), parse_zeta_denominator(zeta_denominator)).to_json();
  out["empirical_noncoverage"] = miss;
  return out.dump();
}

double quantile_list(double tau, const std::vector<double>& values) { return quantile(tau, values); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cluster-conditional conformal decoding";

  auto base = py::register_exception<Error>(m, "CoverError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<InfeasibleError>(m, "InfeasibleError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const json::exception& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.def("quantile", &quantile_list, py::arg("tau"), py::arg("values"));
  m.def("beta_quantile", &beta_quantile, py::arg("delta"), py::arg("a"), py::arg("b"));
  m.def("empirical_bernstein", &empirical_bernstein, py::arg("mean"), py::arg("var"), py::arg("n"),
        py::arg("delta"));
  m.def("hoeffding_upper", &hoeffding_upper, py::arg("p_hat"), py::arg("n"), py::arg("zeta"));
  m.def("split_cp_threshold", [](const std::vector<double>& scores, double alpha) {
    return split_cp_calibrate(scores, alpha);
  }, py::arg("scores"), py::arg("alpha"));

  m.def("simulate", &simulate, py::arg("config"), py::arg("n"), py::arg("seed") = 0, py::arg("threads") = 1);
  m.def("longtail_model", &longtail_model, py::arg("config"));
  m.def("calibrate", &calibrate_cover, py::arg("traces"), py::arg("alpha") = 0.1, py::arg("lambda_") = 1.0,
        py::arg("clusters") = 4, py::arg("min_count") = 20, py::arg("bucket_width") = 1,
        py::arg("tau_grid") = std::vector<double>{}, py::arg("gamma") = 0.5, py::arg("budget") = 2000,
        py::arg("epsilon") = 0.0, py::arg("score_scale") = "log", py::arg("tradeoff") = "exchange",
        py::arg("max_len") = 0, py::arg("seed") = 0);
  m.def("dcbs_calibrate", &calibrate_dcbs, py::arg("traces"), py::arg("alpha") = 0.1, py::arg("max_len") = 0);
  m.def("evaluate", &evaluate_doc, py::arg("calibration"), py::arg("traces"),
        py::arg("tail_tokens") = std::set<Token>{}, py::arg("ar_model") = "");
  m.def("run_experiment", &run_experiment_doc, py::arg("config"));
  m.def("bounds", &bounds_doc, py::arg("calibration"), py::arg("traces"), py::arg("delta") = 0.05,
        py::arg("zeta") = 0.05, py::arg("variant") = "main", py::arg("zeta_denominator") = "pair");
}
