// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Criteria 6 and 7 run the full seeded benchmark twice.
//
//   acceptance [--config PATH] [--work DIR] [--only 1,2,...]

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "xmoda/pipeline.hpp"

using namespace xmoda;

namespace {

// Runtime limits, seconds.
constexpr double kLimitLossUnits = 1.0;
constexpr double kLimitGradients = 30.0;
constexpr double kLimitQsAttn = 10.0;
constexpr double kLimitMetrics = 30.0;
constexpr double kLimitPreprocessing = 30.0;
constexpr double kLimitPipeline = 45.0 * 60.0;

// Benchmark thresholds.
constexpr double kMinArmDice = 0.60;
constexpr double kMultiviewSlack = 0.03;
constexpr double kSelfTrainingSlack = 0.03;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

bool report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << "  " << name << "  " << detail << std::endl;
  return pass;
}

bool run_suite(int id, const std::string& name, double limit, const std::function<oracle::SuiteResult()>& suite) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = suite();
  const double dt = seconds_since(t0);
  std::string detail = std::to_string(r.checks) + " checks, " + fmt(dt, 3) + " s (limit " + fmt(limit, 0) + " s)";
  if (!r.pass) detail += "; " + r.detail;
  return report(id, name, r.pass && dt < limit, detail);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double final_dice(const ArmResult& a) { return a.rounds.back().agg("dice_mean").mean; }

const ArmResult* find_arm(const ExperimentResult& r, const std::string& name) {
  for (const auto& a : r.arms)
    if (a.arm == name) return &a;
  return nullptr;
}

ExperimentResult fresh_run(const ExperimentConfig& cfg, const fs::path& root) {
  fs::remove_all(root);
  RunOptions opt;
  opt.root = root;
  opt.log = [](const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; };
  return run_pipeline(cfg, opt);
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config = fs::path(XMODA_SOURCE_DIR) / "configs" / "acceptance.json";
  fs::path work = fs::temp_directory_path() / "xmoda_acceptance";
  std::set<int> only;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i], v = argv[i + 1];
    if (k == "--config") config = v;
    else if (k == "--work") work = v;
    else if (k == "--only") {
      std::stringstream ss(v);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    } else {
      std::cerr << "unknown option " << k << "\n";
      return 2;
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };

  bool all = true;
  if (want(1)) all &= run_suite(1, "loss unit suite", kLimitLossUnits, [] { return oracle::loss_unit_suite(); });
  if (want(2)) all &= run_suite(2, "gradient suite", kLimitGradients, [] { return oracle::gradient_suite(50, 1e-5, 1e-4); });
  if (want(3)) all &= run_suite(3, "qs-attn oracle suite", kLimitQsAttn, [] { return oracle::qsattn_suite(); });
  if (want(4)) all &= run_suite(4, "metric oracle suite", kLimitMetrics, [] { return oracle::metric_suite(); });
  if (want(5))
    all &= run_suite(5, "preprocessing round trip", kLimitPreprocessing, [] { return oracle::preprocessing_suite(); });

  if (want(6) || want(7)) {
    const ExperimentConfig cfg = load_experiment_config(config);
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<ExperimentResult> first;
    std::string error;
    try {
      first = fresh_run(cfg, work / "run1");
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double dt = seconds_since(t0);

    if (want(6)) {
      if (!first) {
        all &= report(6, "seeded benchmark", false, "pipeline failed: " + error);
      } else {
        const auto* cg = find_arm(*first, "cyclegan");
        const auto* qs = find_arm(*first, "qsattn");
        const auto* mv = find_arm(*first, "multiview");
        std::string detail;
        bool a = dt < kLimitPipeline;
        detail += "(a) " + fmt(dt / 60.0, 1) + " min " + (a ? "ok" : "over limit") + ";";

        bool b = cg && qs && mv;
        for (const auto& arm : first->arms) {
          const double d = final_dice(arm);
          b &= d >= kMinArmDice;
          detail += " " + arm.arm + "=" + fmt(d);
        }
        detail += std::string(" (b) ") + (b ? "ok" : "fail") + ";";

        bool c = false;
        if (cg && qs && mv) {
          const double best = std::max(final_dice(*cg), final_dice(*qs));
          c = final_dice(*mv) >= best - kMultiviewSlack;
          detail += " (c) multiview-best=" + fmt(final_dice(*mv) - best) + (c ? " ok" : " fail") +
                    (final_dice(*mv) > best ? " strict" : " not-strict") + ";";
        }

        bool d = !first->arms.empty();
        detail += " (d)";
        for (const auto& arm : first->arms) {
          if (arm.rounds.size() < 2) {
            d = false;
            detail += " " + arm.arm + ":no-round";
            continue;
          }
          const double delta = arm.rounds.back().agg("dice_mean").mean - arm.rounds.front().agg("dice_mean").mean;
          d &= delta >= -kSelfTrainingSlack;
          detail += " " + arm.arm + "=" + (delta >= 0 ? "+" : "") + fmt(delta);
        }
        detail += d ? " ok" : " fail";
        all &= report(6, "seeded benchmark", a && b && c && d, detail);
      }
    }

    if (want(7)) {
      bool same = false;
      std::string detail;
      if (!first) {
        detail = "first run failed: " + error;
      } else {
        try {
          fresh_run(cfg, work / "run2");
          const auto m1 = slurp(work / "run1" / "report" / "metrics.csv");
          const auto m2 = slurp(work / "run2" / "report" / "metrics.csv");
          same = !m1.empty() && m1 == m2;
          detail = "metrics.csv " + std::to_string(m1.size()) + " bytes, " + (same ? "identical" : "differs");
        } catch (const std::exception& e) {
          detail = std::string("second run failed: ") + e.what();
        }
      }
      all &= report(7, "determinism", same, detail);
    }
  }
  return all ? 0 : 1;
}
