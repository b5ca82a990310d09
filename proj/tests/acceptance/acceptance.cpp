#include "tpv/covariance.hpp"
#include "tpv/datagen.hpp"
#include "tpv/empirical.hpp"
#include "tpv/experiments.hpp"
#include "tpv/linalg.hpp"
#include "tpv/pruning.hpp"
#include "tpv/rng.hpp"
#include "tpv/sgd_stationary.hpp"
#include "tpv/theory.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

using namespace tpv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = budget_s <= 0.0 || secs < budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s  %2d %s: %s; %.1fs", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  if (budget_s > 0.0) std::printf(" (budget %.0fs)", budget_s);
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Matrix gaussian(Index r, Index c, std::uint64_t seed) {
  CounterRng rng(seed);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

Network linear_model(Index d, std::uint64_t seed) {
  MLPConfig c;
  c.input_dim = d;
  c.seed = seed;
  return init_network(c);
}

double rel(double a, double b) { return std::abs(a / b - 1.0); }

// ---- 1
Outcome gradients() {
  const auto rows = run_gradcheck(default_gradcheck_config());
  double worst_g = 0.0, worst_j = 0.0;
  Index max_p = 0;
  for (const auto& r : rows) {
    worst_g = std::max(worst_g, r.grad_rel_err);
    worst_j = std::max(worst_j, r.jac_rel_err);
    max_p = std::max(max_p, r.params);
  }
  std::ostringstream s;
  s << rows.size() << " instances, max p " << max_p << ", worst grad " << worst_g << ", worst jac " << worst_j;
  return {rows.size() == 50 && max_p <= 10000 && max_p > 5000 && worst_g < 1e-6 && worst_j < 1e-6, s.str()};
}

// ---- 2
Outcome trace_form() {
  const Index d = 8, n = 200, p = d + 1;
  const Network ref = linear_model(d, 1);
  const Matrix xs = gaussian(n, d, 2);
  const HEff h = estimate_heff(output_jacobian(ref, xs), n);
  Vector diag(p);
  for (Index i = 0; i < p; ++i) diag[i] = 0.01 * (1.0 + i);
  const std::vector<std::pair<std::string, PerturbationCovariance>> cases = {
      {"isotropic", PerturbationCovariance::isotropic(p, 0.01)},
      {"diagonal", PerturbationCovariance::diagonal(diag)},
      {"low_rank", PerturbationCovariance::low_rank(0.1 * gaussian(p, 3, 3))}};
  bool ok = true;
  std::ostringstream s;
  for (const auto& [name, c] : cases) {
    GaussianPerturbationSampler sampler(c);
    CounterRng rng(derive_seed(4, {purpose_tag(name)}));
    std::vector<ParamVector> ws;
    for (int r = 0; r < 10000; ++r) ws.push_back(ref.params + sampler.sample(rng));
    const double e = rel(empirical_tpv(ref, ws, xs), tpv_trace(h, c));
    ok = ok && e < 0.03;
    s << name << " " << fmt("%.4f", e) << " ";
  }
  return {ok, "relative errors " + s.str()};
}

// ---- 3
Outcome linear_label() {
  // Exact expectation of the min-norm retraining oracle: sum over the label basis.
  const Index n = 12, d = 40;
  const double s2 = 0.04;
  const Matrix x = gaussian(n, d, 5);
  const CompactSVD svd = compact_svd(x);
  double oracle = 0.0;
  for (Index i = 0; i < n; ++i) oracle += s2 * min_norm_solve(svd, Vector::Unit(n, i)).squaredNorm();
  const double closed = tpv_label_linear(x, s2);
  const double e_exact = rel(closed, oracle);

  double acc = 0.0;
  for (int r = 0; r < 50; ++r) acc += tpv_label_linear(gaussian(20, 400, 100 + r), 1.0);
  const double e_wishart = rel(acc / 50.0, 20.0 / 400.0);
  std::ostringstream s;
  s << "oracle rel err " << e_exact << ", Wishart mean/(n/d) - 1 = " << fmt("%.4f", e_wishart);
  return {e_exact < 1e-8 && e_wishart < 0.25, s.str()};
}

// ---- 4
Outcome label_curve() {
  const auto cfg = default_label_noise_curve_config();
  const CurveResult r = run_label_noise_curve(cfg);
  std::vector<double> theory, emp;
  std::vector<bool> ok;
  std::ostringstream s;
  for (const auto& row : r.rows) {
    ok.push_back(row.status == "ok");
    theory.push_back(row.theoretical_tpv);
    emp.push_back(row.tpv_test);
    s << "w" << row.width << " theory " << fmt("%.3g", row.theoretical_tpv) << " emp "
      << fmt("%.3g", row.tpv_test) << " (" << row.status << "); ";
  }
  if (r.rows.size() != 3) return {false, s.str() + "expected 3 widths"};
  const bool all_ok = std::all_of(ok.begin(), ok.end(), [](bool b) { return b; });
  // Pairs (128,256), (256,512), (128,512); a failed row never counts as decreasing.
  auto decreasing = [&](const std::vector<double>& v, bool need_ok) {
    int k = 0;
    for (std::size_t a = 0; a < v.size(); ++a)
      for (std::size_t b = a + 1; b < v.size(); ++b)
        k += (!need_ok || (ok[a] && ok[b])) && v[b] <= v[a] ? 1 : 0;
    return k;
  };
  const int dt = decreasing(theory, false), de = decreasing(emp, true);
  const double ratio = ok.back() ? emp.back() / theory.back() : 0.0;
  const double rho = r.spearman_test_tpv_vs_loss.empty() ? std::nan("") : r.spearman_test_tpv_vs_loss.front();
  s << "largest-width ratio " << fmt("%.3f", ratio) << ", non-increasing pairs theory " << dt << "/3 empirical "
    << de << "/3, spearman " << fmt("%.3f", rho);
  return {all_ok && ratio >= 0.5 && ratio <= 2.0 && dt >= 2 && de >= 2 && rho > 0.0, s.str()};
}

// ---- 5
Outcome grid() {
  const auto cfg = default_stability_grid_config();
  const GridResult r = run_stability_grid(cfg);
  const BandStats big = band_stats(r.rows, 1000);
  const BandStats small = band_stats(r.rows, 10);
  const std::size_t cells_per_n = cfg.grid.teachers.size() * cfg.grid.input_dims.size() * cfg.grid.widths.size() *
                                  cfg.grid.depths.size();
  std::ostringstream s;
  s << cells_per_n << " cells per n_train; n=1000 inside " << big.inside << "/" << big.kept_points << " ("
    << fmt("%.3f", big.inside_fraction()) << "); n=10 outside " << small.kept_points - small.inside << "/"
    << small.kept_points << " (" << fmt("%.3f", 1.0 - small.inside_fraction()) << ")";
  return {cells_per_n >= 24 && big.kept_points > 0 && small.kept_points > 0 && big.inside_fraction() >= 0.9 &&
              1.0 - small.inside_fraction() >= 0.25,
          s.str()};
}

// ---- 6
Outcome covariance() {
  const Index n = 20, p = 6, b = 4;
  const Matrix j = gaussian(n, p, 6);
  const Vector eps = gaussian(n, 1, 7).col(0);
  Vector mean = Vector::Zero(p);
  for (Index i = 0; i < n; ++i) mean += eps[i] * j.row(i).transpose() / static_cast<double>(n);
  Matrix direct = Matrix::Zero(p, p);
  for (Index i = 0; i < n; ++i) {
    const Vector g = eps[i] * j.row(i).transpose() - mean;
    direct += g * g.transpose() / static_cast<double>(n);
  }
  const Matrix exact = exact_sample_covariance(j, eps);
  const double e_exact = (exact - direct).norm() / direct.norm();

  CounterRng rng(8);
  Matrix mc = Matrix::Zero(p, p);
  const int batches = 100000;
  for (int r = 0; r < batches; ++r) {
    Vector g = Vector::Zero(p);
    for (Index k = 0; k < b; ++k) {
      const auto i = static_cast<Index>(rng.index(n));
      g += eps[i] * j.row(i).transpose() / static_cast<double>(b);
    }
    mc += (g - mean) * (g - mean).transpose();
  }
  mc /= batches;
  const double e_mc = relative_frobenius(mc, minibatch_noise_covariance(exact, b));
  std::ostringstream s;
  s << "enumeration rel err " << e_exact << ", Monte Carlo Frobenius rel err " << fmt("%.4f", e_mc);
  return {e_exact < 1e-10 && e_mc < 0.03, s.str()};
}

// ---- 7
Outcome lyapunov() {
  const LyapunovResult r = run_sgd_lyapunov(default_sgd_lyapunov_config());
  double worst_pair = 0.0, worst_scale = 0.0;
  for (const auto& row : r.rows) {
    worst_pair = std::max({worst_pair, rel(row.empirical, row.lyapunov), rel(row.empirical, row.boxed),
                           rel(row.lyapunov, row.boxed)});
  }
  for (const auto* v : {&r.eta_scaling_empirical, &r.eta_scaling_lyapunov, &r.batch_scaling_empirical,
                        &r.batch_scaling_lyapunov}) {
    for (double x : *v) worst_scale = std::max(worst_scale, std::abs(x - 1.0));
  }
  double max_eta_l = 0.0;
  for (const auto& row : r.rows) max_eta_l = std::max(max_eta_l, row.eta_lambda_max);
  std::ostringstream s;
  s << r.rows.size() << " settings, eta*lambda_max <= " << max_eta_l << ", worst pairwise "
    << fmt("%.4f", worst_pair) << ", worst scaling " << fmt("%.4f", worst_scale);
  return {!r.rows.empty() && max_eta_l <= 0.01 && worst_pair < 0.3 && worst_scale < 0.1, s.str()};
}

// ---- 8
Outcome quantization() {
  const QuantResult r = run_quant_tpv(default_quant_tpv_config());
  double worst_lin = 0.0, worst_mlp = 0.0;
  bool ok = !r.rows.empty();
  bool saw_lin = false, saw_mlp = false;
  for (const auto& row : r.rows) {
    if (row.status != "ok") {
      ok = false;
      continue;
    }
    const double e = std::max(rel(row.tpv_train, row.theory_train), rel(row.tpv_test, row.theory_test));
    if (row.model.rfind("linear", 0) == 0) worst_lin = std::max(worst_lin, e), saw_lin = true;
    else worst_mlp = std::max(worst_mlp, e), saw_mlp = true;
  }
  std::ostringstream s;
  s << "linear worst " << fmt("%.4f", worst_lin) << ", mlp worst " << fmt("%.4f", worst_mlp);
  return {ok && saw_lin && saw_mlp && worst_lin < 0.03 && worst_mlp < 0.1, s.str()};
}

// ---- 9
// Exact train-side expectation (sigma^2/n) ||J M||_F^2 of the linearized
// retraining map M, built without the SVD.
double retraining_oracle(const Matrix& j, double lambda, double s2) {
  const Index n = j.rows();
  Matrix m;
  if (lambda == 0.0) m = j.completeOrthogonalDecomposition().pseudoInverse();
  else m = j.transpose() * (j * j.transpose() + lambda * Matrix::Identity(n, n)).llt().solve(Matrix::Identity(n, n));
  return s2 * (j * m).squaredNorm() / static_cast<double>(n);
}

Outcome regimes() {
  const double s2 = 0.09;
  const Index n = 10, p = 30, r = 6;
  const Matrix full = gaussian(n, p, 9);
  const Matrix low = gaussian(n, r, 10) * gaussian(r, p, 11);
  const CompactSVD sf = compact_svd(full), sl = compact_svd(low);

  const double a = tpv_train_ridge_closed_form(sf.s, 0.0, s2, n);
  const double b = tpv_train_ridge_closed_form(sl.s, 0.0, s2, n);
  const double lambda = 3.0;
  const double c = tpv_train_ridge_closed_form(sf.s, lambda, s2, n);
  const double shrink = s2 * (sf.s.array().square() / (sf.s.array().square() + lambda)).square().sum() / n;

  const double ea = std::max(rel(a, s2), rel(a, retraining_oracle(full, 0.0, s2)));
  const double eb = std::max(rel(b, s2 * r / n), rel(b, retraining_oracle(low, 0.0, s2)));
  const double ec = std::max(rel(c, shrink), rel(c, retraining_oracle(full, lambda, s2)));
  std::ostringstream s;
  s << "rank " << sl.rank << "; rel errs (lambda=0,r=n) " << ea << ", (lambda=0,r<n) " << eb << ", (lambda>0) "
    << ec;
  return {sl.rank == r && ea < 1e-8 && eb < 1e-8 && ec < 1e-8, s.str()};
}

// ---- 10
Outcome jbr_jc() {
  Index mismatches = 0, compared = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MLPConfig c;
    c.input_dim = 6;
    c.hidden_widths = {12, 8};
    c.output_dim = 4;
    c.seed = seed;
    Network net = init_network(c);
    net.params *= 2.0;
    const Matrix xs = gaussian(64, 6, 1000 + seed);
    const auto groups = neuron_groups(c);
    const Matrix labels = one_hot(argmax_rows(forward_batch(net, xs)), 4);
    const auto a = jbr_score(net, xs, groups);
    const auto b = jc_score(net, xs, labels, groups);
    for (std::size_t g = 0; g < a.size(); ++g) {
      ++compared;
      mismatches += a[g].score == b[g].score ? 0 : 1;
    }
  }
  std::ostringstream s;
  s << compared << " group scores over 20 classifiers, " << mismatches << " not bitwise equal";
  return {compared > 0 && mismatches == 0, s.str()};
}

// ---- 11
Outcome pruning() {
  PruneBenchConfig cfg = default_prune_bench_config();
  cfg.trials = 20;
  const PruneBenchResult r = run_prune_bench(cfg);
  const auto& w = r.paired_wins;
  if (!w.contains("random") || !w.contains("l1")) return {false, "missing random or l1 comparison"};
  const double vr = w.at("random").at("fraction").get<double>();
  const double vl = w.at("l1").at("fraction").get<double>();
  const Index tr = w.at("random").at("trials").get<Index>();
  const Index tl = w.at("l1").at("trials").get<Index>();
  std::ostringstream s;
  s << "jbr >= random " << fmt("%.2f", vr) << " of " << tr << ", jbr >= l1 " << fmt("%.2f", vl) << " of " << tl;
  return {tr == 20 && tl == 20 && vr >= 0.8 && vl >= 0.6, s.str()};
}

// ---- 12
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "tpv_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"gradcheck", R"({"instances": 10, "max_params": 2000})"},
      {"quant-tpv", R"({"draws": 200})"},
      {"sgd-lyapunov", R"({"total_steps": 6000, "burn_in": 1000, "eta_lambda_max": [0.01], "batches": [32]})"},
      {"label-noise-curve", R"({"widths": [16, 32], "runs": 3, "n_train": 100, "test_size": 200,
                               "reference": {"epochs": 100}, "retrain": {"epochs": 50}})"},
      {"stability-grid", R"({"grid": {"teachers": ["linear"], "input_dims": [5], "train_sizes": [50, 10],
                             "widths": [4], "depths": [2], "test_size": 100}, "reference": {"epochs": 50},
                             "protocols": [{"kind": "label", "sigma": 0.01, "runs": 3, "retrain": {"epochs": 20}},
                                           {"kind": "sgd", "lr": 0.001, "batch": 8, "burn_in": 20,
                                            "total_steps": 100, "with_theory": false}]})"},
      {"prune-bench", R"({"trials": 2, "n_train": 200, "n_test": 200, "score_samples": 128,
                          "prune": {"iterations": 4}})"}};
  Index files = 0;
  std::ostringstream bad;
  for (const auto& [cmd, config] : cmds) {
    const fs::path cfg_path = root / (cmd + ".json");
    std::ofstream(cfg_path) << config;
    std::vector<fs::path> outs;
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = root / (cmd + "_" + std::to_string(rep));
      // The second run uses two jobs: results must not depend on scheduling.
      const std::string line = std::string(TPVLAB_BINARY) + " " + cmd + " --config " + cfg_path.string() +
                               " --out " + out.string() + " --jobs " + std::to_string(rep + 1) + " > " +
                               (root / (cmd + ".log")).string() + " 2>&1";
      const int rc = std::system(line.c_str());
      if (rc == -1 || WEXITSTATUS(rc) == 2) bad << cmd << " exit " << rc << "; ";
      outs.push_back(out);
    }
    for (const auto& entry : fs::directory_iterator(outs[0])) {
      const auto name = entry.path().filename();
      if (name == "resolved_config.json") continue;  // records --jobs
      ++files;
      if (!fs::exists(outs[1] / name) || slurp(entry.path()) != slurp(outs[1] / name)) {
        bad << cmd << "/" << name.string() << " differs; ";
      }
    }
  }
  std::ostringstream s;
  s << files << " output files compared across 6 commands";
  if (!bad.str().empty()) s << ": " << bad.str();
  return {bad.str().empty() && files >= 12, s.str()};
}

}  // namespace

int main() {
  report(1, "gradient/jacobian finite differences", 60, gradients);
  report(2, "trace-form oracle", 60, trace_form);
  report(3, "linear label-noise closed form", 120, linear_label);
  report(4, "label-noise width curve", 1800, label_curve);
  report(5, "stability band statistics", 2700, grid);
  report(6, "gradient covariance exactness", 120, covariance);
  report(7, "SGD three-way agreement", 300, lyapunov);
  report(8, "quantization TPV", 120, quantization);
  report(9, "ridge regime table", 0, regimes);
  report(10, "JBR-JC equivalence", 0, jbr_jc);
  report(11, "pruning paired comparison", 0, pruning);
  report(12, "CLI determinism", 0, determinism);
  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
