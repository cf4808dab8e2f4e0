// cover-decode: simulate, calibrate, decode, evaluate and bound conformal
// decoders from the command line.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cover/baseline.hpp"
#include "cover/cover.hpp"
#include "cover/error.hpp"
#include "cover/harness.hpp"
#include "cover/pac.hpp"
#include "cover/scorer.hpp"
#include "cover/trace.hpp"

using namespace cover;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    json doc;
    in >> doc;
    return doc;
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path);
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ValidationError("bad tau grid entry '" + item + "'");
    }
  }
  return out;
}

// A decoding rule from either calibration document kind.
struct LoadedRule {
  std::string kind;
  StepThresholds rule;
  double alpha = 0.0;
  int max_len = 0;
};

LoadedRule load_rule(const std::string& path) {
  const json doc = read_json(path);
  const std::string kind = doc.value("kind", std::string());
  LoadedRule out;
  out.kind = kind;
  if (kind == "cover") {
    auto m = CalibratedModel::from_json(doc);
    out.rule = m.thresholds;
    out.alpha = m.alpha;
    out.max_len = m.max_len;
  } else if (kind == "dcbs") {
    auto d = DcbsCalibration::from_json(doc);
    out.rule = d.rule();
    out.alpha = d.alpha;
    out.max_len = d.max_len;
  } else {
    throw ValidationError(path + ": unknown calibration kind '" + kind + "'");
  }
  return out;
}

LongTailConfig model_config(const json& doc) {
  return LongTailConfig::from_json(doc.contains("model") ? doc["model"] : doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal decoding with cluster-step thresholds"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Base random seed");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output path (stdout when omitted)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Sample traces from a long-tail toy model");
  std::string sim_config, sim_model_out;
  std::size_t sim_n = 1000;
  sim->add_option("--config", sim_config, "Long-tail model config (JSON)")->required();
  sim->add_option("--n", sim_n, "Number of traces")->required();
  sim->add_option("--model-out", sim_model_out, "Also write the generated model");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Calibrate cluster-step thresholds");
  std::string cal_traces, cal_tau = "0.5,0.6,0.7,0.8,0.9", cal_tradeoff = "exchange", cal_scale = "log",
                          cal_audit;
  CoverConfig cc;
  double cal_lambda = 1.0;
  cal->add_option("--traces", cal_traces, "Calibration traces (JSONL)")->required();
  cal->add_option("--alpha", cc.alpha, "Miscoverage level")->default_val(0.1);
  cal->add_option("--lambda", cal_lambda, "Uniform error penalty")->default_val(1.0);
  cal->add_option("--clusters", cc.clusters, "Clusters per bucket (M)")->default_val(4);
  cal->add_option("--min-count", cc.min_count, "Minimum samples for a non-null cluster")->default_val(20);
  cal->add_option("--bucket-width", cc.bucket_width, "Steps per bucket")->default_val(1);
  cal->add_option("--tau-grid", cal_tau, "Comma-separated quantile grid");
  cal->add_option("--gamma", cc.gamma, "Clustering split fraction")->default_val(0.5);
  cal->add_option("--budget", cc.budget, "Trade-off iterations")->default_val(2000);
  cal->add_option("--epsilon", cc.epsilon, "Raise step (0 = 1/n)")->default_val(0.0);
  cal->add_option("--tradeoff", cal_tradeoff, "raise-only | exchange");
  cal->add_option("--score-scale", cal_scale, "log | raw");
  cal->add_option("--max-len", cc.max_len, "Maximum length (0 = longest trace)")->default_val(0);
  cal->add_option("--audit-out", cal_audit, "Write the optimizer audit log");

  // dcbs
  auto* dc = app.add_subcommand("dcbs", "Calibrate dynamic conformal beam search");
  std::string dc_traces;
  double dc_alpha = 0.1;
  int dc_len = 0;
  dc->add_option("--traces", dc_traces, "Calibration traces (JSONL)")->required();
  dc->add_option("--alpha", dc_alpha, "Per-step miscoverage")->default_val(0.1);
  dc->add_option("--max-len", dc_len, "Maximum length (0 = longest trace)")->default_val(0);

  // decode
  auto* dec = app.add_subcommand("decode", "Expand the conformal set on a tabular model");
  std::string dec_model, dec_ar;
  int dec_len = 0;
  std::size_t dec_nodes = DecodeLimits{}.max_nodes;
  dec->add_option("--model", dec_model, "Calibration document (cover or dcbs)")->required();
  dec->add_option("--ar-model", dec_ar, "Tabular model document")->required();
  dec->add_option("--max-len", dec_len, "Maximum length (0 = model's)")->default_val(0);
  dec->add_option("--max-nodes", dec_nodes, "Expansion node limit");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Coverage, set size and tail retention");
  std::string ev_model, ev_traces, ev_ar, ev_cal, ev_config, ev_format = "json", ev_method;
  std::vector<Token> ev_tail;
  ev->add_option("--config", ev_config, "Experiment config: simulate, calibrate and evaluate in one run");
  ev->add_option("--method", ev_method, "Override the config's method");
  ev->add_option("--model", ev_model, "Calibration document (cover or dcbs)");
  ev->add_option("--traces", ev_traces, "Evaluation traces (JSONL)");
  ev->add_option("--ar-model", ev_ar, "Tabular model for set-size expansion");
  ev->add_option("--calibration-traces", ev_cal, "Checked for overlap with the evaluation traces");
  ev->add_option("--tail-tokens", ev_tail, "Tail token ids")->delimiter(',');
  ev->add_option("--format", ev_format, "json | csv");

  // compare
  auto* cmp = app.add_subcommand("compare", "Side-by-side reports on a shared evaluation set");
  std::vector<std::string> cmp_reports, cmp_methods;
  std::string cmp_config;
  cmp->add_option("--reports", cmp_reports, "Report documents from evaluate");
  cmp->add_option("--config", cmp_config, "Experiment config to run for each method");
  cmp->add_option("--methods", cmp_methods, "Methods to run with --config")->delimiter(',');

  // bounds
  auto* bd = app.add_subcommand("bounds", "PAC full-path failure bound");
  std::string bd_model, bd_traces, bd_variant = "main", bd_zden = "pair";
  double bd_delta = 0.05, bd_zeta = 0.05;
  bd->add_option("--model", bd_model, "Calibration document (cover or dcbs)")->required();
  bd->add_option("--traces", bd_traces, "Traces the statistics are computed on")->required();
  bd->add_option("--delta", bd_delta, "Total Bernstein confidence")->default_val(0.05);
  bd->add_option("--zeta", bd_zeta, "Total Hoeffding confidence")->default_val(0.05);
  bd->add_option("--variant", bd_variant, "main | appendix");
  bd->add_option("--zeta-denominator", bd_zden, "pair | total");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*sim) {
      const auto mc = model_config(read_json(sim_config));
      const auto model = make_longtail_model(mc);
      const auto traces = sample_dataset(model, sim_n, g.seed, g.threads);
      std::ostringstream buf;
      write_traces(buf, traces);
      write_text(g.out, buf.str());
      if (!sim_model_out.empty()) model.save(sim_model_out);
    } else if (*cal) {
      const auto traces = load_traces(cal_traces);
      cc.lambda.uniform = cal_lambda;
      cc.tau_grid = parse_grid(cal_tau);
      cc.tradeoff = parse_tradeoff_rule(cal_tradeoff);
      cc.scale = parse_score_scale(cal_scale);
      cc.seed = g.seed;
      const auto res = calibrate(traces, cc);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      write_text(g.out, res.model.to_json().dump(2) + "\n");
      if (!cal_audit.empty()) {
        json log = json::array();
        for (const auto& a : res.optimization.audit) {
          log.push_back({{"iteration", a.iteration},
                         {"bucket", a.bucket},
                         {"cluster", cluster_name(a.cluster)},
                         {"candidate", a.candidate.to_json()},
                         {"covered_before", a.covered_before},
                         {"covered_after", a.covered_after},
                         {"objective_before", a.objective_before},
                         {"objective_after", a.objective_after},
                         {"accepted", a.accepted}});
        }
        write_text(cal_audit, log.dump(2) + "\n");
      }
      std::cerr << "phase-1 anchor " << cluster_name(res.optimization.anchor.first) << " bucket "
                << res.optimization.anchor.second + 1 << ", accepted " << res.optimization.accepted << " of "
                << res.optimization.audit.size() << ", D2 coverage " << res.optimization.final_value.coverage()
                << "\n";
    } else if (*dc) {
      const auto traces = load_traces(dc_traces);
      const int L = dc_len > 0 ? dc_len : static_cast<int>(max_length(traces));
      const auto calib = dcbs_calibrate(traces, dc_alpha, L);
      for (const auto& w : calib.warnings) std::cerr << "warning: " << w << "\n";
      write_text(g.out, calib.to_json().dump(2) + "\n");
    } else if (*dec) {
      const auto loaded = load_rule(dec_model);
      const auto model = TabularARModel::load(dec_ar);
      const int L = dec_len > 0 ? dec_len : model.max_len();
      DecodeLimits limits;
      limits.max_nodes = dec_nodes;
      const auto res = conformal_expand(model, loaded.rule, L, limits);
      std::ostringstream buf;
      for (std::size_t i = 0; i < res.sequences.size(); ++i) {
        buf << json{{"tokens", res.sequences[i]}, {"score", res.scores[i]}}.dump() << "\n";
      }
      write_text(g.out, buf.str());
      std::cerr << res.sequences.size() << " sequences, " << res.expanded_nodes << " expanded nodes\n";
    } else if (*ev) {
      const auto format = parse_report_format(ev_format);
      EvalReport report;
      if (!ev_config.empty()) {
        auto cfg = ExperimentConfig::from_json(read_json(ev_config));
        if (!ev_method.empty()) cfg.method = parse_method(ev_method);
        if (app.get_option("--seed")->count()) cfg.seed = g.seed;
        cfg.threads = g.threads;
        report = run_experiment(cfg).report;
      } else {
        if (ev_model.empty() || ev_traces.empty()) {
          throw ValidationError("evaluate needs --config, or --model and --traces");
        }
        const auto loaded = load_rule(ev_model);
        const auto eval = load_traces(ev_traces);
        if (!ev_cal.empty()) check_disjoint(load_traces(ev_cal), eval);
        std::optional<TabularARModel> ar;
        if (!ev_ar.empty()) ar = TabularARModel::load(ev_ar);
        EvalOptions opts;
        opts.tail_tokens = std::set<Token>(ev_tail.begin(), ev_tail.end());
        opts.scorer = ar ? &*ar : nullptr;
        opts.max_len = loaded.max_len;
        opts.threads = g.threads;
        report = evaluate(loaded.rule, eval, opts);
        report.method = loaded.kind;
      }
      write_text(g.out, render_report(report, format));
    } else if (*cmp) {
      std::vector<EvalReport> reports;
      for (const auto& p : cmp_reports) reports.push_back(load_report(p));
      if (!cmp_config.empty()) {
        auto cfg = ExperimentConfig::from_json(read_json(cmp_config));
        if (app.get_option("--seed")->count()) cfg.seed = g.seed;
        cfg.threads = g.threads;
        const auto data = make_experiment_data(cfg);
        if (cmp_methods.empty()) cmp_methods = {"dcbs", "cover"};
        for (const auto& name : cmp_methods) {
          cfg.method = parse_method(name);
          reports.push_back(run_method(cfg, data.model, data.calibration, data.eval).report);
        }
      }
      write_text(g.out, compare(reports).to_json().dump(2) + "\n");
    } else if (*bd) {
      const auto loaded = load_rule(bd_model);
      const auto traces = load_traces(bd_traces);
      std::vector<PathEvalRecord> records;
      records.reserve(traces.size());
      for (const auto& t : traces) records.push_back(evaluate_path(t, loaded.rule));
      const auto variant = parse_bound_variant(bd_variant);
      const auto stats = pair_stats(records, bd_delta, bd_zeta);
      const double noncov = empirical_noncoverage(records);
      const double base = variant == BoundVariant::Main ? loaded.alpha : noncov;
      const auto report = full_path_bound(stats, base, variant, records.size(), parse_zeta_denominator(bd_zden));
      auto doc = report.to_json();
      doc["empirical_noncoverage"] = noncov;
      write_text(g.out, doc.dump(2) + "\n");
    }
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
