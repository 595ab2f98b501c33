#include <CLI11.hpp>
#include <iostream>

#include "midas/harness.hpp"

using namespace midas;
using namespace midas::harness;

namespace {

struct CommonOptions {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::optional<double> subset_fraction;
  std::string grouping, selection;
  std::optional<int> patch_size;
  bool quiet = false;
};

KeyValues overrides_of(const CommonOptions& o) {
  KeyValues kv;
  if (o.seed) kv.emplace_back("seed", std::to_string(*o.seed));
  if (o.subset_fraction) kv.emplace_back("decode.subset_fraction", harness::detail::fmt_double(*o.subset_fraction));
  if (!o.grouping.empty()) kv.emplace_back("decode.grouping", o.grouping);
  if (!o.selection.empty()) kv.emplace_back("decode.selection", o.selection);
  if (o.patch_size) kv.emplace_back("supernet.patch_size", std::to_string(*o.patch_size));
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw HarnessError(ErrorKind::usage, "--set expects key=value, got '" + s + "'");
    kv.emplace_back(harness::detail::trim(s.substr(0, eq)), harness::detail::trim(s.substr(eq + 1)));
  }
  return kv;
}

ExperimentConfig fresh_config(const CommonOptions& o) {
  KeyValues file;
  if (!o.config.empty()) file = parse_key_values(read_text(o.config), o.config);
  std::optional<Profile> p;
  if (!o.profile.empty()) p = parse_profile(o.profile);
  auto c = build_config(p, file, overrides_of(o));
  validate(c);
  return c;
}

// Downstream commands start from the configuration recorded by the search run.
ExperimentConfig run_config(const LoadedRun& run, const CommonOptions& o) {
  if (!o.config.empty() || !o.profile.empty())
    throw HarnessError(ErrorKind::usage, "--config/--profile apply to new runs; downstream commands reuse the run's config");
  if (o.seed && *o.seed != run.manifest.config.seed)
    throw HarnessError(ErrorKind::usage, "--seed differs from the seed recorded in " + run.dir.string());
  auto c = run.manifest.config;
  for (const auto& [k, v] : overrides_of(o)) {
    if (k.rfind("supernet.", 0) == 0 || k.rfind("search.", 0) == 0 || k.rfind("data.", 0) == 0)
      throw HarnessError(ErrorKind::usage, k + " is fixed by the search run and cannot be overridden");
    set_value(c, k, v);
  }
  validate(c);
  return c;
}

Logger logger(const CommonOptions& o) {
  if (o.quiet) return {};
  return [](const std::string& s) { std::cerr << s << std::endl; };
}

fs::path out_or(const CommonOptions& o, const fs::path& fallback) { return o.out.empty() ? fallback : fs::path(o.out); }

void add_config_flags(CLI::App* c, CommonOptions& o) {
  c->add_option("--config", o.config, "key = value configuration file");
  c->add_option("--profile", o.profile, "paper or desk defaults")->check(CLI::IsMember({"paper", "desk"}));
  c->add_option("--seed", o.seed, "run seed");
}

void add_decode_flags(CLI::App* c, CommonOptions& o) {
  c->add_option("--subset-fraction", o.subset_fraction, "fraction of the subset split used for decoding");
  c->add_option("--grouping", o.grouping, "shared or per-level")->check(CLI::IsMember({"shared", "per-level"}));
  c->add_option("--selection", o.selection, "top2 or top-pair")->check(CLI::IsMember({"top2", "top-pair"}));
}

void add_common(CLI::App* c, CommonOptions& o) {
  c->add_option("--out", o.out, "output directory");
  c->add_option("--set", o.sets, "override one configuration key (key=value), repeatable");
  c->add_flag("--quiet", o.quiet, "no progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input-specific attention NAS: search, decode, analyze, retrain, ablate-patch, report"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kCodeVersion));
  CommonOptions o;
  std::string in, genotype, checkpoint = "final.ckpt";
  std::vector<std::string> runs;
  bool print_config = false;

  auto* search = app.add_subcommand("search", "bilevel supernet search");
  add_config_flags(search, o);
  add_decode_flags(search, o);
  search->add_option("--patch-size", o.patch_size, "attention patch size");
  search->add_flag("--print-config", print_config, "print the resolved configuration and exit");
  add_common(search, o);

  auto* decode = app.add_subcommand("decode", "decode a genotype from a search run");
  decode->add_option("--in", in, "search run directory")->required();
  decode->add_option("--seed", o.seed, "must match the run seed");
  decode->add_option("--checkpoint", checkpoint, "checkpoint file inside the run directory");
  add_decode_flags(decode, o);
  add_common(decode, o);

  auto* analyze = app.add_subcommand("analyze", "dip tests, class similarity and variance curve");
  analyze->add_option("--in", in, "search run directory")->required();
  analyze->add_option("--seed", o.seed, "must match the run seed");
  add_decode_flags(analyze, o);
  add_common(analyze, o);

  auto* retrain = app.add_subcommand("retrain", "train the derived network");
  retrain->add_option("--in", in, "search run directory (uses its decode/genotype.json)");
  retrain->add_option("--genotype", genotype, "genotype JSON file");
  add_config_flags(retrain, o);
  add_common(retrain, o);

  auto* ablate = app.add_subcommand("ablate-patch", "search per patch size and compare op importance");
  add_config_flags(ablate, o);
  add_common(ablate, o);

  auto* report = app.add_subcommand("report", "aggregate seeds of one configuration");
  report->add_option("--in", runs, "search run directories")->required();
  report->add_option("--out", o.out, "output directory for summary files");

  std::string command = "midas";
  try {
    app.parse(argc, argv);
    for (auto* s : app.get_subcommands()) command = s->get_name();
    const auto log = logger(o);

    if (search->parsed()) {
      const auto c = fresh_config(o);
      if (print_config) {
        std::cout << canonical_text(c) << "# config_hash " << config_hash(c) << "\n";
        return 0;
      }
      if (o.out.empty()) throw HarnessError(ErrorKind::usage, "search needs --out");
      run_search_command(c, o.out, log);
      std::cout << (fs::path(o.out) / "manifest.json").string() << "\n";
    } else if (decode->parsed()) {
      const auto run = load_run(in);
      const auto c = run_config(run, o);
      const auto s = run_decode_command(run, c, out_or(o, run.dir / "decode"), checkpoint);
      std::cout << genotype_to_string(s.genotype) << "\n";
    } else if (analyze->parsed()) {
      const auto run = load_run(in);
      const auto c = run_config(run, o);
      const auto s = run_analyze_command(run, c, out_or(o, run.dir / "analysis"));
      std::cout << "fraction_unimodal " << s.fraction_unimodal << " parameters " << s.dips.size() << "\n";
    } else if (retrain->parsed()) {
      ExperimentConfig c;
      Genotype g;
      fs::path out;
      if (!in.empty()) {
        const auto run = load_run(in);
        c = run_config(run, o);
        g = read_genotype(genotype.empty() ? run.dir / "decode" / "genotype.json" : fs::path(genotype));
        out = out_or(o, run.dir / "retrain");
      } else {
        if (genotype.empty()) throw HarnessError(ErrorKind::usage, "retrain needs --in or --genotype");
        c = fresh_config(o);
        g = read_genotype(genotype);
        if (o.out.empty()) throw HarnessError(ErrorKind::usage, "retrain with --genotype needs --out");
        out = o.out;
      }
      const auto s = run_retrain_command(g, c, out, log);
      std::cout << "test_acc " << s.test_acc << " parameters " << s.parameters << "\n";
    } else if (ablate->parsed()) {
      const auto c = fresh_config(o);
      if (o.out.empty()) throw HarnessError(ErrorKind::usage, "ablate-patch needs --out");
      const auto s = run_ablation_command(c, o.out, log);
      for (const auto& r : s.rows) std::cout << r.variant << " learnable_spread " << r.learnable_spread << "\n";
    } else if (report->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      const auto t = build_report(dirs);
      if (!o.out.empty()) write_report(t, o.out);
      std::cout << report_text(t);
    }
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_json(ErrorKind::usage, e.what(), command).dump() << std::endl;
    return exit_code(ErrorKind::usage);
  } catch (const HarnessError& e) {
    std::cerr << error_json(e.kind(), e.what(), command).dump() << std::endl;
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << error_json(ErrorKind::runtime, e.what(), command).dump() << std::endl;
    return exit_code(ErrorKind::runtime);
  }
}
