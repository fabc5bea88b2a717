// dreg: dataset generation, training, registration, evaluation and latent
// analysis from the command line.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dreg/config.hpp"
#include "dreg/evaluation.hpp"
#include "dreg/io.hpp"
#include "dreg/latent.hpp"
#include "dreg/parallel.hpp"
#include "dreg/phantom.hpp"
#include "dreg/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dreg;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run depends on. Written back as resolved_config.json.
struct RunConfig {
  NetworkConfig network;
  LossConfig loss;
  TrainConfig train;
  std::string manifest;
  std::string out;
  std::uint64_t seed = 1;
};

json to_json(const RunConfig& c) {
  return {{"network", dreg::to_json(c.network)},
          {"loss", dreg::to_json(c.loss)},
          {"train", dreg::to_json(c.train)},
          {"data", {{"manifest", c.manifest}}},
          {"out", c.out},
          {"seed", c.seed}};
}

void from_json(const json& j, RunConfig& c) {
  StrictReader r(j, "config");
  r.object("network", [&](const json& v, const std::string& ctx) { dreg::from_json(v, c.network, ctx); });
  r.object("loss", [&](const json& v, const std::string& ctx) { dreg::from_json(v, c.loss, ctx); });
  r.object("train", [&](const json& v, const std::string& ctx) { dreg::from_json(v, c.train, ctx); });
  r.object("data", [&](const json& v, const std::string& ctx) {
    StrictReader d(v, ctx);
    d.get("manifest", c.manifest);
    d.finish();
  });
  r.get("out", c.out);
  r.get("seed", c.seed);
  r.finish();
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string model;
};

RunConfig resolve(const Globals& g) {
  RunConfig rc;
  if (!g.config_path.empty()) {
    json j;
    try {
      j = json::parse(read_text(g.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError(g.config_path + ": " + e.what());
    }
    from_json(j, rc);
  }
  if (g.seed) rc.seed = *g.seed;
  if (!g.out.empty()) rc.out = g.out;
  rc.train.seed = rc.seed;
  // The loss exponentiates with the network's step count.
  rc.loss.squaring_steps = rc.network.squaring_steps;
  if (rc.out.empty()) throw UsageError("--out is required");
  return rc;
}

void write_resolved(const RunConfig& rc, const std::string& command, const json& args) {
  json j = to_json(rc);
  j["command"] = command;
  j["args"] = args;
  ensure_directory(rc.out);
  write_text(fs::path(rc.out) / "resolved_config.json", j.dump(2) + "\n");
}

ScalarImage<double> read_image(const std::string& path) { return ScalarImage<double>(load_drt<double>(path)); }

BinaryMask read_mask(const std::string& path) { return mask_from_tensor(load_drt<double>(path)); }

std::string code_row(const Tensor<double>& z) {
  std::string s;
  for (std::size_t i = 0; i < z.size(); ++i) s += (i ? "," : "") + fmt_double(z.data[i]);
  return s;
}

std::string code_header(std::size_t d) {
  std::string s;
  for (std::size_t i = 1; i <= d; ++i) s += (i > 1 ? ",z" : "z") + std::to_string(i);
  return s;
}

double min_value(const Tensor<double>& t) { return *std::min_element(t.data.begin(), t.data.end()); }

/// Writes per-scale fields and images of a registration result into dir.
json write_result(const RegistrationResult<double>& r, const fs::path& dir) {
  ensure_directory(dir);
  write_text(dir / "z.csv", code_header(r.z.size()) + "\n" + code_row(r.z) + "\n");
  json scales = json::array();
  for (const auto& s : r.scales) {
    const std::string tag = "s" + std::to_string(s.scale);
    save_drt(dir / ("velocity_" + tag + ".drt"), s.velocity.components);
    save_drt(dir / ("displacement_" + tag + ".drt"), s.deformation.displacement);
    save_drt(dir / ("warped_" + tag + ".drt"), s.warped.pixels);
    write_pgm(dir / ("warped_" + tag + ".pgm"), s.warped.pixels, 0.0, 1.0);
    const auto J = jacobian_determinant(s.deformation);
    save_drt(dir / ("detj_" + tag + ".drt"), J.pixels);
    write_pgm(dir / ("detj_" + tag + ".pgm"), J.pixels, 0.0, 2.0);
    scales.push_back({{"scale", s.scale},
                      {"min_det_j", min_value(J.pixels)},
                      {"grad_det_jac", grad_det_jac(s.deformation)}});
  }
  return scales;
}

RegistrationModel<double> open_model(const Globals& g) {
  if (g.model.empty()) throw UsageError("--model is required");
  return load_checkpoint<double>(g.model).model;
}

std::string manifest_path(const RunConfig& rc, const std::string& flag) {
  const std::string m = flag.empty() ? rc.manifest : flag;
  if (m.empty()) throw UsageError("a dataset manifest is required (--data or data.manifest in --config)");
  const fs::path p(m);
  return fs::is_directory(p) ? (p / "manifest.json").string() : m;
}

std::vector<const PhantomCase*> select_split(const PhantomDataset& ds, const std::string& split) {
  if (split == "train") return ds.split(true);
  if (split == "test") return ds.split(false);
  std::vector<const PhantomCase*> all;
  for (const auto& c : ds.cases) all.push_back(&c);
  return all;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::size_t n_per_class = 40, extent = 64, train_per_class = 0;
  bool pgm = false;
};

void run_generate(const Globals& g, const GenerateArgs& a) {
  auto rc = resolve(g);
  const auto ds = generate_dataset(a.n_per_class, a.extent, rc.seed, a.train_per_class);
  write_dataset(ds, rc.out, a.pgm);
  write_resolved(rc, "generate-data",
                 {{"n_per_class", a.n_per_class}, {"extent", a.extent}, {"train_per_class", a.train_per_class},
                  {"pgm", a.pgm}});
  std::cout << ds.cases.size() << " cases (" << ds.split(true).size() << " train, " << ds.split(false).size()
            << " test) -> " << (fs::path(rc.out) / "manifest.json").string() << "\n";
}

struct TrainArgs {
  std::string data, resume;
  std::uint64_t stop_step = 0;
};

void run_train(const Globals& g, const TrainArgs& a) {
  auto rc = resolve(g);
  const auto ds = load_dataset(manifest_path(rc, a.data));
  rc.manifest = manifest_path(rc, a.data);
  std::vector<TrainPair<double>> data;
  for (const auto* c : ds.split(true)) data.push_back({c->pair.es, c->pair.ed});
  if (data.empty()) throw std::runtime_error("dataset has no training cases");
  rc.network.height = data[0].fixed.height();
  rc.network.width = data[0].fixed.width();

  std::optional<Checkpoint<double>> ck;
  std::uint64_t start = 0;
  if (!a.resume.empty()) {
    ck = load_checkpoint<double>(a.resume);
    rc.network = ck->model.config();
    rc.loss.squaring_steps = rc.network.squaring_steps;
    start = ck->step;
  } else {
    ck = Checkpoint<double>{RegistrationModel<double>(rc.network, rc.seed), {}, 0, rc.seed, {}};
    ck->optimizer = AdamState<double>::zeros(ck->model.params());
  }
  write_resolved(rc, "train", {{"data", rc.manifest}, {"resume", a.resume}, {"stop_step", a.stop_step}});

  const fs::path out(rc.out);
  const fs::path metrics = out / "metrics.csv";
  const bool append = start > 0 && fs::exists(metrics);
  std::ofstream log(metrics, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open for writing: " + metrics.string());
  if (!append) log << metrics_header(rc.loss.scales.size()) << "\n";

  TrainOptions opt;
  opt.out_dir = out;
  opt.stop_step = a.stop_step;
  opt.extra = {{"loss", dreg::to_json(rc.loss)}, {"train", dreg::to_json(rc.train)}};
  opt.on_step = [&](const StepRecord& r) { log << metrics_row(r) << "\n"; };
  const auto records = train(ck->model, ck->optimizer, data, rc.loss, rc.train, start, opt);
  log.flush();
  if (!records.empty())
    std::cout << "trained steps " << records.front().step << ".." << records.back().step << ", final loss "
              << records.back().total << "\n";
  std::cout << "checkpoint -> " << (out / "checkpoint").string() << "\n";
}

struct RegisterArgs {
  std::string moving, fixed;
};

void run_register(const Globals& g, const RegisterArgs& a) {
  auto rc = resolve(g);
  auto model = open_model(g);
  const auto F = read_image(a.fixed), M = read_image(a.moving);
  const auto q = model.encode(F, M);
  const auto r = model.decode(q.mu, M);
  const fs::path out(rc.out);
  const auto scales = write_result(r, out);
  save_drt(out / "mu.drt", q.mu);
  save_drt(out / "logvar.drt", q.logvar);
  write_text(out / "report.json", json{{"scales", scales}}.dump(2) + "\n");
  write_resolved(rc, "register", {{"model", g.model}, {"moving", a.moving}, {"fixed", a.fixed}});
  std::cout << "min det J " << scales[0]["min_det_j"].get<double>() << "\n";
}

struct EvaluateArgs {
  std::string data, split = "test";
};

json summary(const std::vector<CaseReport>& rows) {
  auto stat = [&](auto field) {
    double m = 0, s = 0;
    for (const auto& r : rows) m += r.*field;
    m /= double(rows.size());
    for (const auto& r : rows) s += (r.*field - m) * (r.*field - m);
    const double sd = rows.size() > 1 ? std::sqrt(s / double(rows.size() - 1)) : 0.0;
    return json{{"mean", m}, {"sd", sd}};
  };
  return {{"rmse", stat(&CaseReport::rmse)},
          {"dice_bloodpool", stat(&CaseReport::dice_bloodpool)},
          {"dice_wall", stat(&CaseReport::dice_wall)},
          {"dice_mean", stat(&CaseReport::dice_mean)},
          {"hd95_bloodpool", stat(&CaseReport::hd95_bloodpool)},
          {"hd95_wall", stat(&CaseReport::hd95_wall)},
          {"hd95_mean", stat(&CaseReport::hd95_mean)},
          {"grad_det_jac", stat(&CaseReport::grad_det_jac)},
          {"ef", stat(&CaseReport::ef)}};
}

void run_evaluate(const Globals& g, const EvaluateArgs& a) {
  auto rc = resolve(g);
  auto model = open_model(g);
  rc.manifest = manifest_path(rc, a.data);
  const auto ds = load_dataset(rc.manifest);
  const auto cases = select_split(ds, a.split);
  if (cases.empty()) throw std::runtime_error("no cases in split " + a.split);
  std::vector<CaseEvaluation> evals(cases.size());
  std::vector<double> min_det(cases.size());
  parallel_for(cases.size(), worker_count(), [&](std::size_t i) {
    auto local = model;
    const auto& p = cases[i]->pair;
    const auto r = local.register_pair(p.es, p.ed);
    const auto& phi = r.scales[0].deformation;
    evals[i] = evaluate_case(cases[i]->id, p.es, p.ed, {p.ed_bloodpool, p.ed_wall}, {p.es_bloodpool, p.es_wall}, phi,
                             p.ed.spacing);
    min_det[i] = min_value(jacobian_determinant(phi).pixels);
  });

  std::string csv =
      "id,class,method,rmse,dice_bloodpool,dice_wall,dice_mean,hd95_bloodpool,hd95_wall,hd95_mean,grad_det_jac,ef,"
      "ef_truth,min_det_j\n";
  std::vector<CaseReport> reg, base;
  std::vector<double> dr, db, hr, hb;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& e = evals[i];
    auto row = [&](const char* method, const CaseReport& r, double md) {
      csv += r.id + "," + class_name(cases[i]->label) + "," + method + "," + fmt_double(r.rmse) + "," +
             fmt_double(r.dice_bloodpool) + "," + fmt_double(r.dice_wall) + "," + fmt_double(r.dice_mean) + "," +
             fmt_double(r.hd95_bloodpool) + "," + fmt_double(r.hd95_wall) + "," + fmt_double(r.hd95_mean) + "," +
             fmt_double(r.grad_det_jac) + "," + fmt_double(r.ef) + "," + fmt_double(e.ef_truth) + "," +
             fmt_double(md) + "\n";
    };
    row("registered", e.registered, min_det[i]);
    row("undeformed", e.baseline, 1.0);
    reg.push_back(e.registered);
    base.push_back(e.baseline);
    dr.push_back(e.registered.dice_mean);
    db.push_back(e.baseline.dice_mean);
    hr.push_back(e.registered.hd95_mean);
    hb.push_back(e.baseline.hd95_mean);
  }
  const auto wd = wilcoxon_signed_rank(dr, db), wh = wilcoxon_signed_rank(hr, hb);
  auto wj = [](const WilcoxonResult& w) {
    return json{{"n", w.n}, {"w_plus", w.w_plus}, {"z", w.z}, {"p_value", w.p_value}};
  };
  const json agg = {{"split", a.split},
                    {"cases", cases.size()},
                    {"registered", summary(reg)},
                    {"undeformed", summary(base)},
                    {"min_det_j", *std::min_element(min_det.begin(), min_det.end())},
                    {"wilcoxon", {{"dice_mean", wj(wd)}, {"hd95_mean", wj(wh)}}}};
  const fs::path out(rc.out);
  ensure_directory(out);
  write_text(out / "cases.csv", csv);
  write_text(out / "aggregate.json", agg.dump(2) + "\n");
  write_resolved(rc, "evaluate", {{"model", g.model}, {"data", rc.manifest}, {"split", a.split}});
  std::cout << "DICE " << agg["registered"]["dice_mean"]["mean"].get<double>() << " (undeformed "
            << agg["undeformed"]["dice_mean"]["mean"].get<double>() << "), HD95 "
            << agg["registered"]["hd95_mean"]["mean"].get<double>() << " (undeformed "
            << agg["undeformed"]["hd95_mean"]["mean"].get<double>() << ")\n";
}

struct SampleArgs {
  std::string moving;
  std::size_t count = 16;
};

void run_sample(const Globals& g, const SampleArgs& a) {
  auto rc = resolve(g);
  auto model = open_model(g);
  const auto M = read_image(a.moving);
  const std::size_t d = model.config().latent_dim;
  std::seed_seq seq{std::uint32_t(rc.seed), std::uint32_t(rc.seed >> 32), 0x5a3eu};
  std::mt19937_64 rng(seq);
  const fs::path out(rc.out);
  ensure_directory(out / "samples");
  std::string csv = "sample,min_det_j," + code_header(d) + "\n";
  std::vector<Tensor<double>> tiles;
  for (std::size_t k = 0; k < a.count; ++k) {
    const auto z = standard_normal<double>(d, rng);
    const auto r = model.sample_deformation(M, z);
    const auto& s = r.scales[0];
    const std::string tag = std::to_string(10000 + k).substr(1);
    save_drt(out / "samples" / ("displacement_" + tag + ".drt"), s.deformation.displacement);
    save_drt(out / "samples" / ("warped_" + tag + ".drt"), s.warped.pixels);
    csv += std::to_string(k) + "," + fmt_double(min_value(jacobian_determinant(s.deformation).pixels)) + "," +
           code_row(z) + "\n";
    tiles.push_back(s.warped.pixels);
  }
  write_text(out / "samples.csv", csv);
  if (!tiles.empty()) {
    const auto cols = std::size_t(std::ceil(std::sqrt(double(tiles.size()))));
    write_pgm_grid(out / "samples.pgm", tiles, cols, 0.0, 1.0);
  }
  write_resolved(rc, "sample", {{"model", g.model}, {"moving", a.moving}, {"count", a.count}});
}

struct TransportArgs {
  std::string donor_fixed, donor_moving, recipient, donor_mask, recipient_mask;
};

void run_transport(const Globals& g, const TransportArgs& a) {
  auto rc = resolve(g);
  auto model = open_model(g);
  const auto Fa = read_image(a.donor_fixed), Ma = read_image(a.donor_moving), Mb = read_image(a.recipient);
  const fs::path out(rc.out);
  const auto donor = model.register_pair(Fa, Ma);
  const auto moved = transport(model, Fa, Ma, Mb);
  const auto scales = write_result(moved, out);
  json report = {{"scales", scales}};
  // EF of a deformation: bloodpool area lost when the ED mask is warped.
  if (!a.donor_mask.empty()) {
    const auto m = read_mask(a.donor_mask);
    report["ef_donor"] = ejection_fraction(m, warp_nearest(m, donor.scales[0].deformation));
  }
  if (!a.recipient_mask.empty()) {
    const auto m = read_mask(a.recipient_mask);
    report["ef_transported"] = ejection_fraction(m, warp_nearest(m, moved.scales[0].deformation));
  }
  if (report.contains("ef_donor") && report.contains("ef_transported"))
    report["ef_abs_difference"] =
        std::abs(report["ef_donor"].get<double>() - report["ef_transported"].get<double>());
  write_text(out / "ef_report.json", report.dump(2) + "\n");
  write_resolved(rc, "transport",
                 {{"model", g.model},
                  {"donor_fixed", a.donor_fixed},
                  {"donor_moving", a.donor_moving},
                  {"recipient", a.recipient},
                  {"donor_mask", a.donor_mask},
                  {"recipient_mask", a.recipient_mask}});
}

struct CodesArgs {
  std::string data;
};

void run_codes(const Globals& g, const CodesArgs& a) {
  auto rc = resolve(g);
  auto model = open_model(g);
  rc.manifest = manifest_path(rc, a.data);
  const auto ds = load_dataset(rc.manifest);
  const std::size_t d = model.config().latent_dim;
  const fs::path out(rc.out);
  ensure_directory(out);
  json report;
  for (const bool is_train : {true, false}) {
    const auto cases = ds.split(is_train);
    std::vector<LatentRecord> recs(cases.size());
    parallel_for(cases.size(), worker_count(), [&](std::size_t i) {
      auto local = model;
      const auto& p = cases[i]->pair;
      recs[i] = {cases[i]->id, class_name(cases[i]->label), ejection_fraction(p.ed_bloodpool, p.es_bloodpool),
                 to_code(local.encode(p.es, p.ed).mu)};
    });
    const std::string name = is_train ? "train" : "test";
    write_text(out / ("codes_" + name + ".csv"), codes_csv(recs, d));
    try {
      report["probe_cv_accuracy_" + name] = probe_cv_accuracy(recs);
    } catch (const std::invalid_argument& e) {
      report["probe_cv_accuracy_" + name] = nullptr;
    }
  }
  write_text(out / "probe.json", report.dump(2) + "\n");
  write_resolved(rc, "codes", {{"model", g.model}, {"data", rc.manifest}});
}

struct PcaArgs {
  std::string codes, moving;
  std::size_t grid = 9;
  double range = 2.5;
};

void run_pca(const Globals& g, const PcaArgs& a) {
  auto rc = resolve(g);
  if (a.grid < 1) throw UsageError("--grid must be >= 1");
  auto model = open_model(g);
  const auto recs = parse_codes_csv(read_text(a.codes));
  std::vector<std::vector<double>> codes;
  for (const auto& r : recs) codes.push_back(r.z);
  const auto basis = fit_pca(codes);
  if (basis.dim() != model.config().latent_dim) throw std::runtime_error("code dimension does not match the model");
  if (basis.dim() < 2) throw std::runtime_error("pca sweep needs at least 2 latent dimensions");
  const fs::path out(rc.out);
  save_basis(basis, out / "basis");
  const auto M = read_image(a.moving);
  ensure_directory(out / "sweep");
  std::string csv = "row,col,pc1_sd,pc2_sd,min_det_j," + code_header(basis.dim()) + "\n";
  std::vector<Tensor<double>> tiles;
  for (std::size_t i = 0; i < a.grid; ++i)
    for (std::size_t j = 0; j < a.grid; ++j) {
      auto at = [&](std::size_t k) { return a.grid == 1 ? 0.0 : -a.range + 2 * a.range * double(k) / double(a.grid - 1); };
      // Rows sweep the second component top to bottom, columns the first.
      const double c0 = at(j), c1 = -at(i);
      const auto z = code_at(basis, {{0, c0}, {1, c1}});
      const auto r = model.sample_deformation(M, from_code<double>(z));
      const auto& s = r.scales[0];
      const std::string tag = std::to_string(i) + "_" + std::to_string(j);
      save_drt(out / "sweep" / ("warped_" + tag + ".drt"), s.warped.pixels);
      save_drt(out / "sweep" / ("displacement_" + tag + ".drt"), s.deformation.displacement);
      csv += std::to_string(i) + "," + std::to_string(j) + "," + fmt_double(c0) + "," + fmt_double(c1) + "," +
             fmt_double(min_value(jacobian_determinant(s.deformation).pixels)) + "," +
             code_row(from_code<double>(z)) + "\n";
      tiles.push_back(s.warped.pixels);
    }
  write_text(out / "sweep.csv", csv);
  // The figure is built from the stored tiles only.
  std::vector<Tensor<double>> stored;
  for (std::size_t i = 0; i < a.grid; ++i)
    for (std::size_t j = 0; j < a.grid; ++j)
      stored.push_back(load_drt<double>(out / "sweep" / ("warped_" + std::to_string(i) + "_" + std::to_string(j) + ".drt")));
  write_pgm_grid(out / "sweep.pgm", stored, a.grid, 0.0, 1.0);
  write_resolved(rc, "pca",
                 {{"model", g.model}, {"codes", a.codes}, {"moving", a.moving}, {"grid", a.grid}, {"range", a.range}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffeomorphic registration with a conditional variational autoencoder"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for every random draw");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--model", g.model, "checkpoint directory");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate-data", "generate the synthetic phantom dataset");
  gen->add_option("--n-per-class", ga.n_per_class)->check(CLI::PositiveNumber);
  gen->add_option("--extent", ga.extent)->check(CLI::PositiveNumber);
  gen->add_option("--train-per-class", ga.train_per_class, "training cases per class (default: 70/30 split)");
  gen->add_flag("--pgm", ga.pgm, "also write PGM previews");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model on the training split");
  tr->add_option("--data", ta.data, "dataset manifest or directory");
  tr->add_option("--resume", ta.resume, "continue from this checkpoint directory");
  tr->add_option("--stop-step", ta.stop_step, "stop before this global step (default: end of the epoch budget)");

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "register a moving image onto a fixed image");
  reg->add_option("--moving", ra.moving)->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed", ra.fixed)->required()->check(CLI::ExistingFile);

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "score registrations on a dataset split");
  ev->add_option("--data", ea.data, "dataset manifest or directory");
  ev->add_option("--split", ea.split)->check(CLI::IsMember({"train", "test", "all"}));

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "decode prior samples against a moving image");
  smp->add_option("--moving", sa.moving)->required()->check(CLI::ExistingFile);
  smp->add_option("--count", sa.count);

  TransportArgs pa;
  auto* tp = app.add_subcommand("transport", "apply a donor pair's code to a recipient moving image");
  tp->add_option("--donor-fixed", pa.donor_fixed)->required()->check(CLI::ExistingFile);
  tp->add_option("--donor-moving", pa.donor_moving)->required()->check(CLI::ExistingFile);
  tp->add_option("--recipient", pa.recipient)->required()->check(CLI::ExistingFile);
  tp->add_option("--donor-mask", pa.donor_mask, "donor ED bloodpool mask, for the EF report")->check(CLI::ExistingFile);
  tp->add_option("--recipient-mask", pa.recipient_mask, "recipient ED bloodpool mask")->check(CLI::ExistingFile);

  CodesArgs ca;
  auto* cd = app.add_subcommand("codes", "export latent codes of every case");
  cd->add_option("--data", ca.data, "dataset manifest or directory");

  PcaArgs xa;
  auto* pc = app.add_subcommand("pca", "fit PCA on codes and decode a sweep over the first two components");
  pc->add_option("--codes", xa.codes, "codes CSV (training split)")->required()->check(CLI::ExistingFile);
  pc->add_option("--moving", xa.moving, "image the sweep is decoded against")->required()->check(CLI::ExistingFile);
  pc->add_option("--grid", xa.grid);
  pc->add_option("--range", xa.range, "sweep half-width in standard deviations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) run_generate(g, ga);
    else if (*tr) run_train(g, ta);
    else if (*reg) run_register(g, ra);
    else if (*ev) run_evaluate(g, ea);
    else if (*smp) run_sample(g, sa);
    else if (*tp) run_transport(g, pa);
    else if (*cd) run_codes(g, ca);
    else if (*pc) run_pca(g, xa);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
