#include "cover/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "cover/error.hpp"
#include "cover/parallel.hpp"
#include "cover/rng.hpp"

namespace cover {

std::string to_string(Method m) {
  switch (m) {
    case Method::Split: return "split";
    case Method::BeamSubgroup: return "beam-subgroup";
    case Method::Dcbs: return "dcbs";
    case Method::Cover: return "cover";
  }
  return "cover";
}

Method parse_method(const std::string& name) {
  if (name == "split") return Method::Split;
  if (name == "beam-subgroup") return Method::BeamSubgroup;
  if (name == "dcbs") return Method::Dcbs;
  if (name == "cover") return Method::Cover;
  throw ValidationError("unknown method '" + name + "'");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"method", to_string(method)},
          {"model", model.to_json()},
          {"n_cal", n_cal},
          {"n_eval", n_eval},
          {"alpha", cover.alpha},
          {"gamma", cover.gamma},
          {"lambda", cover.lambda.to_json()},
          {"M", cover.clusters},
          {"min_count", cover.min_count},
          {"bucket_width", cover.bucket_width},
          {"tau_grid", cover.tau_grid},
          {"budget", cover.budget},
          {"epsilon", cover.epsilon},
          {"score_scale", to_string(cover.scale)},
          {"tradeoff", to_string(cover.tradeoff)},
          {"cover_seed", cover.seed},
          {"beam_width", beam_width},
          {"seed", seed},
          {"max_nodes", limits.max_nodes}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  try {
    ExperimentConfig c;
    c.method = parse_method(doc.value("method", std::string("cover")));
    if (doc.contains("model")) c.model = LongTailConfig::from_json(doc["model"]);
    c.n_cal = doc.value("n_cal", c.n_cal);
    c.n_eval = doc.value("n_eval", c.n_eval);
    c.cover.alpha = doc.value("alpha", c.cover.alpha);
    c.cover.gamma = doc.value("gamma", c.cover.gamma);
    if (doc.contains("lambda")) c.cover.lambda = LambdaTable::from_json(doc["lambda"]);
    c.cover.clusters = doc.value("M", c.cover.clusters);
    c.cover.min_count = doc.value("min_count", c.cover.min_count);
    c.cover.bucket_width = doc.value("bucket_width", c.cover.bucket_width);
    c.cover.tau_grid = doc.value("tau_grid", c.cover.tau_grid);
    c.cover.budget = doc.value("budget", c.cover.budget);
    c.cover.epsilon = doc.value("epsilon", c.cover.epsilon);
    c.cover.scale = parse_score_scale(doc.value("score_scale", std::string("log")));
    c.cover.tradeoff = parse_tradeoff_rule(doc.value("tradeoff", std::string("exchange")));
    c.cover.seed = doc.value("cover_seed", c.cover.seed);
    c.beam_width = doc.value("beam_width", c.beam_width);
    c.seed = doc.value("seed", c.seed);
    c.limits.max_nodes = doc.value("max_nodes", c.limits.max_nodes);
    if (c.n_cal == 0 || c.n_eval == 0) throw ValidationError("experiment: n_cal and n_eval must be positive");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json(bool include_runtime) const {
  nlohmann::json cells_doc = nlohmann::json::array();
  for (const auto& c : cells) {
    cells_doc.push_back({{"step", c.step},
                         {"cluster", cluster_name(c.cluster)},
                         {"reached", c.reached},
                         {"failures", c.failures},
                         {"coverage", c.coverage}});
  }
  nlohmann::json doc = {{"method", method},
                        {"n_eval", n_eval},
                        {"covered", covered},
                        {"coverage", coverage},
                        {"mean_set_size", mean_set_size},
                        {"median_set_size", median_set_size},
                        {"expanded_nodes", expanded_nodes},
                        {"cells", cells_doc},
                        {"uncovered_from_cells", uncovered_from_cells},
                        {"tail_steps", tail_steps},
                        {"tail_passed", tail_passed},
                        {"tail_step_coverage", tail_step_coverage},
                        {"eval_fingerprint", eval_fingerprint},
                        {"config", config}};
  if (include_runtime) doc["runtime_seconds"] = runtime_seconds;
  return doc;
}

EvalReport EvalReport::from_json(const nlohmann::json& doc) {
  try {
    EvalReport r;
    r.method = doc.at("method").get<std::string>();
    r.n_eval = doc.at("n_eval").get<std::size_t>();
    r.covered = doc.at("covered").get<std::size_t>();
    r.coverage = doc.at("coverage").get<double>();
    r.mean_set_size = doc.at("mean_set_size").get<double>();
    r.median_set_size = doc.at("median_set_size").get<double>();
    r.expanded_nodes = doc.at("expanded_nodes").get<std::size_t>();
    for (const auto& c : doc.at("cells")) {
      CellStats s;
      s.step = c.at("step").get<int>();
      s.cluster = parse_cluster_name(c.at("cluster").get<std::string>());
      s.reached = c.at("reached").get<std::size_t>();
      s.failures = c.at("failures").get<std::size_t>();
      s.coverage = c.at("coverage").get<double>();
      r.cells.push_back(s);
    }
    r.uncovered_from_cells = doc.at("uncovered_from_cells").get<std::size_t>();
    r.tail_steps = doc.at("tail_steps").get<std::size_t>();
    r.tail_passed = doc.at("tail_passed").get<std::size_t>();
    r.tail_step_coverage = doc.at("tail_step_coverage").get<double>();
    r.runtime_seconds = doc.value("runtime_seconds", 0.0);
    r.eval_fingerprint = doc.at("eval_fingerprint").get<std::string>();
    r.config = doc.value("config", nlohmann::json::object());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report document: ") + e.what());
  }
}

std::string fingerprint(std::span<const ScoreTrace> traces) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& t : traces) {
    mix(t.id.data(), t.id.size());
    const std::uint64_t len = t.tokens.size();
    mix(&len, sizeof len);
    mix(t.tokens.data(), t.tokens.size() * sizeof(Token));
    mix(t.prefix_scores.data(), t.prefix_scores.size() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void check_disjoint(std::span<const ScoreTrace> calibration, std::span<const ScoreTrace> evaluation) {
  std::set<std::string> ids;
  for (const auto& t : calibration) ids.insert(t.id);
  for (const auto& t : evaluation) {
    if (ids.count(t.id)) throw ValidationError("trace " + t.id + " appears in both calibration and evaluation sets");
  }
}

namespace {

void finish_cells(EvalReport& report, const std::map<std::pair<int, ClusterId>, CellStats>& cells) {
  for (const auto& [key, c] : cells) {
    CellStats s = c;
    s.coverage = s.reached == 0 ? 1.0 : 1.0 - static_cast<double>(s.failures) / static_cast<double>(s.reached);
    report.uncovered_from_cells += s.failures;
    report.cells.push_back(s);
  }
  report.coverage = report.n_eval == 0 ? 0.0 : static_cast<double>(report.covered) / static_cast<double>(report.n_eval);
  report.tail_step_coverage =
      report.tail_steps == 0 ? 0.0 : static_cast<double>(report.tail_passed) / static_cast<double>(report.tail_steps);
}

// Tallies reached / first-failure cells and tail-token steps up to and
// including the first failure.
void tally(EvalReport& report, std::map<std::pair<int, ClusterId>, CellStats>& cells, const ScoreTrace& trace,
           const PathEvalRecord& rec, const std::set<Token>& tail) {
  if (rec.covered) ++report.covered;
  for (std::size_t i = 0; i < rec.steps.size(); ++i) {
    const auto& s = rec.steps[i];
    auto& cell = cells[{s.step, s.cluster}];
    cell.step = s.step;
    cell.cluster = s.cluster;
    ++cell.reached;
    if (tail.count(trace.tokens[i])) {
      ++report.tail_steps;
      if (s.passed) ++report.tail_passed;
    }
    if (!s.passed) {
      ++cell.failures;
      break;
    }
  }
}

}  // namespace

EvalReport evaluate(const StepThresholds& rule, std::span<const ScoreTrace> eval, const EvalOptions& options,
                    std::vector<PathEvalRecord>* records) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  report.n_eval = eval.size();
  std::vector<PathEvalRecord> recs(eval.size());
  parallel_for(eval.size(), options.threads, [&](std::size_t i) { recs[i] = evaluate_path(eval[i], rule); });
  std::map<std::pair<int, ClusterId>, CellStats> cells;
  for (std::size_t i = 0; i < eval.size(); ++i) tally(report, cells, eval[i], recs[i], options.tail_tokens);
  finish_cells(report, cells);
  if (options.scorer) {
    const int L = options.max_len > 0 ? options.max_len : rule.max_len();
    const auto decoded = conformal_expand(*options.scorer, rule, L, options.limits);
    report.mean_set_size = static_cast<double>(decoded.sequences.size());
    report.median_set_size = report.mean_set_size;
    report.expanded_nodes = decoded.expanded_nodes;
  }
  report.eval_fingerprint = fingerprint(eval);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (records) *records = std::move(recs);
  return report;
}

EvalReport evaluate_set(std::span<const std::vector<Token>> members, std::span<const ScoreTrace> eval,
                        const EvalOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  report.n_eval = eval.size();
  const std::set<std::vector<Token>> full(members.begin(), members.end());
  std::set<std::vector<Token>> prefixes;
  for (const auto& m : members) {
    for (std::size_t l = 1; l <= m.size(); ++l) prefixes.emplace(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(l));
  }
  std::map<std::pair<int, ClusterId>, CellStats> cells;
  for (const auto& t : eval) {
    PathEvalRecord rec;
    rec.trace_id = t.id;
    std::vector<Token> prefix;
    for (std::size_t i = 0; i < t.length(); ++i) {
      prefix.push_back(t.tokens[i]);
      StepCheck s;
      s.step = static_cast<int>(i) + 1;
      s.cluster = kNullCluster;
      s.score = t.prefix_scores[i];
      const bool last = i + 1 == t.length();
      s.passed = rec.covered && prefixes.count(prefix) && (!last || full.count(prefix));
      if (rec.covered && !s.passed) {
        rec.covered = false;
        rec.first_failure = std::make_pair(s.step, s.cluster);
      }
      rec.steps.push_back(s);
    }
    tally(report, cells, t, rec, options.tail_tokens);
  }
  finish_cells(report, cells);
  report.mean_set_size = static_cast<double>(full.size());
  report.median_set_size = report.mean_set_size;
  report.expanded_nodes = prefixes.size();
  report.eval_fingerprint = fingerprint(eval);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

StepThresholds split_rule(double threshold, int max_len) {
  StepThresholds rule;
  rule.scale = ScoreScale::Raw;
  rule.assignment = ClusterAssignment::all_null(max_len);
  rule.table.assign(static_cast<std::size_t>(max_len), std::vector<double>{threshold});
  return rule;
}

ExperimentResult run_method(const ExperimentConfig& config, const TabularARModel& model,
                            std::span<const ScoreTrace> calibration, std::span<const ScoreTrace> eval) {
  check_disjoint(calibration, eval);
  const auto start = std::chrono::steady_clock::now();
  const int L = model.max_len();
  EvalOptions opts;
  opts.tail_tokens = config.model.tail_tokens;
  opts.scorer = &model;
  opts.max_len = L;
  opts.limits = config.limits;
  opts.threads = config.threads;

  ExperimentResult out;
  switch (config.method) {
    case Method::Split: {
      std::vector<double> scores;
      for (const auto& t : calibration) {
        if (t.length() == 0) throw ValidationError("split: empty calibration trace " + t.id);
        scores.push_back(t.prefix_scores.back());
      }
      out.split_threshold = split_cp_calibrate(scores, config.cover.alpha);
      out.report = evaluate(split_rule(*out.split_threshold, L), eval, opts);
      break;
    }
    case Method::BeamSubgroup: {
      out.beam = beam_subgroup_calibrate(calibration, model, config.beam_width, config.cover.alpha);
      const auto members = beam_subgroup_decode(*out.beam);
      out.report = evaluate_set(members, eval, opts);
      break;
    }
    case Method::Dcbs: {
      out.dcbs = dcbs_calibrate(calibration, config.cover.alpha, L);
      out.report = evaluate(out.dcbs->rule(), eval, opts);
      break;
    }
    case Method::Cover: {
      CoverConfig cc = config.cover;
      cc.max_len = L;
      out.cover = calibrate(calibration, cc).model;
      out.report = evaluate(out.cover->thresholds, eval, opts);
      break;
    }
  }
  out.report.method = to_string(config.method);
  out.report.config = config.to_json();
  out.report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

ExperimentData make_experiment_data(const ExperimentConfig& config) {
  auto model = make_longtail_model(config.model);
  auto cal = sample_dataset(model, config.n_cal, derive_seed(config.seed, 11), config.threads);
  auto eval = sample_dataset(model, config.n_eval, derive_seed(config.seed, 12), config.threads);
  return ExperimentData{std::move(model), std::move(cal), std::move(eval)};
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  const auto data = make_experiment_data(config);
  return run_method(config, data.model, data.calibration, data.eval);
}

nlohmann::json Comparison::to_json(bool include_runtime) const {
  nlohmann::json reps = nlohmann::json::array();
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& r : reports) {
    reps.push_back(r.to_json(include_runtime));
    const auto& base = reports.front();
    deltas.push_back({{"method", r.method},
                      {"coverage_delta", r.coverage - base.coverage},
                      {"tail_step_coverage_delta", r.tail_step_coverage - base.tail_step_coverage},
                      {"mean_set_size_delta", r.mean_set_size - base.mean_set_size},
                      {"expanded_nodes_ratio", base.expanded_nodes == 0
                                                   ? nlohmann::json(nullptr)
                                                   : nlohmann::json(static_cast<double>(r.expanded_nodes) /
                                                                    static_cast<double>(base.expanded_nodes))}});
  }
  return {{"eval_fingerprint", reports.empty() ? std::string() : reports.front().eval_fingerprint},
          {"reports", reps},
          {"deltas", deltas}};
}

Comparison compare(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ValidationError("compare: no reports");
  for (const auto& r : reports) {
    if (r.eval_fingerprint != reports.front().eval_fingerprint || r.n_eval != reports.front().n_eval) {
      throw ValidationError("compare: reports were computed on different evaluation sets");
    }
  }
  return Comparison{std::vector<EvalReport>(reports.begin(), reports.end())};
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "json") return ReportFormat::Json;
  if (name == "csv") return ReportFormat::Csv;
  throw ValidationError("unknown report format '" + name + "'");
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string render_report(const EvalReport& report, ReportFormat format) {
  if (format == ReportFormat::Json) return report.to_json().dump(2) + "\n";
  std::ostringstream out;
  out << "kind,step,cluster,reached,failures,coverage,mean_set_size,expanded_nodes,tail_step_coverage\n";
  for (const auto& c : report.cells) {
    out << "cell," << c.step << ',' << cluster_name(c.cluster) << ',' << c.reached << ',' << c.failures << ','
        << num(c.coverage) << ",,,\n";
  }
  out << "summary,,," << report.n_eval << ',' << (report.n_eval - report.covered) << ',' << num(report.coverage)
      << ',' << num(report.mean_set_size) << ',' << report.expanded_nodes << ',' << num(report.tail_step_coverage)
      << '\n';
  return out.str();
}

void emit_report(const EvalReport& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << render_report(report, format);
  if (!out) throw Error("failed writing " + path.string());
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return EvalReport::from_json(doc);
}

}  // namespace cover
