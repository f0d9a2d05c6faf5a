// SPDX-License-Identifier: Apache-2.0
// nilmformer: generate data, train, disaggregate, evaluate, ablate.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nilmformer/error.hpp"
#include "nilmformer/evaluation.hpp"
#include "nilmformer/gradsuite.hpp"
#include "nilmformer/runtime.hpp"
#include "nilmformer/synthgen.hpp"
#include "nilmformer/timeutil.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// JSON config: top-level keys are subcommand names, each holding that
// command's long option names.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> out;
    flatten(j, "", {}, out);
    return out;
  }

 private:
  static std::string scalar(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static void flatten(const json& j, const std::string& name, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& out) {
    if (j.is_object()) {
      if (!name.empty()) parents.push_back(name);
      for (auto it = j.begin(); it != j.end(); ++it) flatten(*it, it.key(), parents, out);
      return;
    }
    CLI::ConfigItem item;
    item.name = name;
    item.parents = parents;
    if (j.is_array()) {
      for (const auto& e : j) item.inputs.push_back(scalar(e));
    } else if (j.is_null()) {
      throw CLI::ConversionError("config key '" + name + "' is null");
    } else {
      item.inputs = {scalar(j)};
    }
    out.push_back(std::move(item));
  }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void add_model_flags(CLI::App* c, nilm::NILMFormerConfig& m, std::string& variant) {
  c->add_option("--variant", variant, "Ablation variant, '+'-joined (full, none, revin, token-only, proj-only, nope, "
                                      "pe-fixed, pe-learnable, pe-add, embed-linear, embed-resblock, pe-ratio-1/8|1/4|1/2)")
      ->capture_default_str();
  c->add_option("--d-model", m.d_model, "Model width")->capture_default_str();
  c->add_option("--layers", m.n_layers, "Transformer layers")->capture_default_str();
  c->add_option("--heads", m.n_heads, "Attention heads")->capture_default_str();
  c->add_option("--pffn-ratio", m.pffn_ratio, "Feed-forward expansion")->capture_default_str();
  c->add_option("--dropout", m.dropout, "Dropout inside transformer layers")->capture_default_str();
  c->add_option("--resunits", m.n_resunits, "Residual units in the embedding block")->capture_default_str();
  c->add_option("--dilations", m.dilations, "Dilation per residual unit")->delimiter(',')->capture_default_str();
  c->add_option("--pe-ratio", m.pe_ratio, "Share of channels given to the positional encoding")->capture_default_str();
  c->add_option("--head-filters", m.head_filters, "0: single conv head; >0: two-stage head")->capture_default_str();
}

void add_train_flags(CLI::App* c, nilm::TrainConfig& t) {
  c->add_option("--lr", t.lr, "Initial learning rate")->capture_default_str();
  c->add_option("--batch-size", t.batch_size)->capture_default_str();
  c->add_option("--epochs", t.max_epochs, "Maximum epochs")->capture_default_str();
  c->add_option("--patience", t.patience, "Plateau epochs before the learning rate is halved")->capture_default_str();
  c->add_option("--factor", t.factor, "Learning-rate reduction factor")->capture_default_str();
  c->add_option("--early-stop", t.early_stop, "Epochs without improvement before stopping")->capture_default_str();
}

void add_split_flags(CLI::App* c, nilm::SplitOptions& s) {
  c->add_option("--appliance", s.appliance, "Target appliance channel")->required();
  c->add_option("--window", s.window, "Window length in samples")->capture_default_str();
  c->add_option("--split-seed", s.seed, "Seed of the house split")->capture_default_str();
  c->add_option("--val-fraction", s.validation_fraction)->capture_default_str();
  c->add_option("--test-fraction", s.test_fraction)->capture_default_str();
}

std::vector<nilm::House> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw nilm::ConfigError("dataset directory " + dir.string() + " does not exist");
  const auto manifests = nilm::find_manifests(dir);
  if (manifests.empty()) throw nilm::ConfigError("no house manifests in " + dir.string());
  std::vector<nilm::House> out;
  for (const auto& m : manifests) out.push_back(nilm::preprocess(nilm::load_house(m), nilm::read_manifest(m).max_gap));
  return out;
}

void write_json(const std::string& path, const json& j) {
  if (path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream os(path);
  if (!os) throw nilm::ConfigError("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
}

void print_epoch(const nilm::EpochRecord& e) {
  std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " lr " << e.lr << " ("
            << e.seconds << " s)\n";
}

}  // namespace

int main(int argc, char** argv) {
  nilm::configure_allocator();
  CLI::App app{"Appliance-level energy disaggregation"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark (readings + manifests)");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  bool dump_spec = false;
  synth->add_option("--spec", synth_spec, "Benchmark spec JSON (default: the standard benchmark)");
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_flag("--dump-spec", dump_spec, "Print the resolved spec and exit");

  // train
  auto* trn = app.add_subcommand("train", "Train one model for one appliance");
  std::string train_data, train_out, train_report;
  nilm::NILMFormerConfig train_model;
  std::string train_variant = "full";
  nilm::TrainConfig train_cfg;
  nilm::SplitOptions train_split;
  bool quiet = false;
  trn->add_option("--data", train_data, "Directory of house manifests")->required();
  trn->add_option("--out", train_out, "Checkpoint path")->required();
  trn->add_option("--report", train_report, "TrainReport JSON path (default: <out>.report.json)");
  trn->add_option("--seed", train_cfg.seed, "Seed for init, shuffling and dropout")->capture_default_str();
  trn->add_flag("--quiet", quiet, "No per-epoch progress on stderr");
  add_split_flags(trn, train_split);
  add_model_flags(trn, train_model, train_variant);
  add_train_flags(trn, train_cfg);

  // disaggregate
  auto* dis = app.add_subcommand("disaggregate", "Predict an appliance series from an aggregate");
  std::string dis_ckpt, dis_input, dis_out, dis_period, dis_period_out = "-";
  long dis_max_gap = 0;
  bool dis_clamp = false;
  dis->add_option("--checkpoint", dis_ckpt)->required();
  dis->add_option("--input", dis_input, "House manifest (.json) or timestamp,watts aggregate CSV")->required();
  dis->add_option("--out", dis_out, "Prediction CSV (timestamp,watts)")->required();
  dis->add_option("--max-gap", dis_max_gap, "Forward-fill limit in seconds for CSV input")->capture_default_str();
  dis->add_flag("--clamp", dis_clamp, "Bound predictions to [0, tau_max]");
  dis->add_option("--period", dis_period, "Also emit period totals: day, week or month");
  dis->add_option("--period-out", dis_period_out, "Period totals CSV ('-' for stdout)")->capture_default_str();

  // eval
  auto* evl = app.add_subcommand("eval", "Score a prediction against ground truth");
  std::string eval_pred, eval_truth, eval_appliance, eval_out = "-", eval_format = "json";
  evl->add_option("--pred", eval_pred, "Prediction CSV (timestamp,watts)")->required();
  evl->add_option("--truth", eval_truth, "Truth CSV (timestamp,watts) or house manifest")->required();
  evl->add_option("--appliance", eval_appliance, "Appliance channel (required for a manifest truth)");
  evl->add_option("--out", eval_out, "Report path ('-' for stdout)")->capture_default_str();
  evl->add_option("--format", eval_format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train variants over seeds and rank them");
  std::string abl_data, abl_out;
  std::uint64_t abl_data_seed = 0;
  std::vector<std::string> abl_variants{"full", "nope", "revin"};
  std::vector<std::uint64_t> abl_seeds{0, 1, 2};
  nilm::NILMFormerConfig abl_model;
  std::string abl_base_variant = "full";
  nilm::TrainConfig abl_cfg;
  nilm::SplitOptions abl_split;
  abl->add_option("--data", abl_data, "Directory of house manifests (default: generate the standard benchmark)");
  abl->add_option("--data-seed", abl_data_seed, "Seed of the generated benchmark")->capture_default_str();
  abl->add_option("--variants", abl_variants)->delimiter(',')->capture_default_str();
  abl->add_option("--seeds", abl_seeds)->delimiter(',')->capture_default_str();
  abl->add_option("--out", abl_out, "Full result JSON");
  abl->add_flag("--quiet", quiet, "No progress on stderr");
  add_split_flags(abl, abl_split);
  add_model_flags(abl, abl_model, abl_base_variant);
  add_train_flags(abl, abl_cfg);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable block");
  std::uint64_t gc_seed = 7;
  gc->add_option("--seed", gc_seed)->capture_default_str();

  // paramcount
  auto* pc = app.add_subcommand("paramcount", "Count learnable parameters");
  nilm::NILMFormerConfig pc_model;
  std::string pc_variant = "full";
  std::vector<std::size_t> pc_windows{128, 256, 512};
  pc->add_option("--windows", pc_windows, "Window lengths to instantiate")->delimiter(',')->capture_default_str();
  add_model_flags(pc, pc_model, pc_variant);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = one_line(e.what());
    // CLI11 reports stray config keys in INI terms.
    if (const auto at = msg.find("INI was not able to parse "); at != std::string::npos)
      msg = "unknown config key " + msg.substr(at + 26);
    std::cerr << "error: " << msg << '\n';
    return 2;
  }

  try {
    if (*synth) {
      nilm::BenchmarkSpec spec = nilm::standard_benchmark_spec();
      if (!synth_spec.empty()) {
        std::ifstream is(synth_spec);
        if (!is) throw nilm::ConfigError("cannot open spec " + synth_spec);
        try {
          spec = json::parse(is).get<nilm::BenchmarkSpec>();
        } catch (const json::exception& e) {
          throw nilm::ConfigError(synth_spec + ": " + e.what());
        }
      }
      spec.validate();
      if (dump_spec) {
        std::cout << json(spec).dump(2) << '\n';
        return 0;
      }
      if (synth_out.empty()) throw nilm::ConfigError("synth needs --out");
      fs::create_directories(synth_out);
      for (const auto& h : nilm::generate_benchmark(spec, synth_seed)) {
        nilm::HouseManifest m;
        m.house_id = h.id;
        m.readings = h.id + ".csv";
        m.delta_t = spec.delta_t;
        m.max_gap = spec.max_gap;
        m.tau_max = spec.tau_max;
        m.channels["aggregate"] = nilm::ChannelRole::aggregate;
        for (const auto& [name, _] : h.appliances) m.channels[name] = nilm::ChannelRole::appliance;
        nilm::write_readings(fs::path(synth_out) / m.readings, h);
        nilm::write_manifest(fs::path(synth_out) / (h.id + ".json"), m);
      }
      return 0;
    }

    if (*trn) {
      const auto houses = load_dataset(train_data);
      const auto data = nilm::split_windows(houses, train_split);
      if (data.train.empty()) throw nilm::ConfigError("training set is empty");
      const auto cfg = nilm::apply_variant(train_model, train_variant);
      nilm::NILMFormer model(cfg, nilm::set_seed(train_cfg.seed).init);
      nilm::EpochCallback cb;
      if (!quiet) cb = print_epoch;
      const auto report = nilm::train(model, data.train, data.validation, train_cfg, cb);
      nilm::save_checkpoint(train_out, model,
                            {train_split.appliance, data.tau_max, houses.front().aggregate.delta_t, train_split.window});
      write_json(train_report.empty() ? train_out + ".report.json" : train_report, report);
      return 0;
    }

    if (*dis) {
      const auto ck = nilm::load_checkpoint(dis_ckpt);
      nilm::MeterSeries agg;
      if (fs::path(dis_input).extension() == ".json") {
        const auto house = nilm::load_house(dis_input);
        agg = nilm::forward_fill(house.aggregate, nilm::read_manifest(dis_input).max_gap);
      } else {
        agg = nilm::forward_fill(nilm::read_series_csv(dis_input, ck.info.delta_t), nilm::Seconds{dis_max_gap});
      }
      if (agg.delta_t != ck.info.delta_t)
        throw nilm::ConfigError("input sampling interval " + std::to_string(agg.delta_t.count()) +
                                " s differs from the model's " + std::to_string(ck.info.delta_t.count()) + " s");
      const auto pred = nilm::disaggregate_series(
          *ck.model, agg, {.window = ck.info.window, .tau_max = ck.info.tau_max, .clamp = dis_clamp});
      nilm::write_series_csv(dis_out, pred);
      if (!dis_period.empty()) {
        const auto periods = nilm::aggregate_period(pred, nilm::parse_granularity(dis_period));
        if (dis_period_out == "-") {
          nilm::write_periods_csv(std::cout, periods);
        } else {
          std::ofstream os(dis_period_out);
          if (!os) throw nilm::ConfigError("cannot open " + dis_period_out + " for writing");
          nilm::write_periods_csv(os, periods);
        }
      }
      return 0;
    }

    if (*evl) {
      const auto pred = nilm::read_series_csv(eval_pred);
      nilm::MeterSeries truth;
      if (fs::path(eval_truth).extension() == ".json") {
        if (eval_appliance.empty()) throw nilm::ConfigError("--appliance is required with a manifest truth");
        const auto house = nilm::load_house(eval_truth);
        const auto it = house.appliances.find(eval_appliance);
        if (it == house.appliances.end())
          throw nilm::ConfigError("house " + house.id + " has no appliance '" + eval_appliance + "'");
        truth = it->second;
      } else {
        truth = nilm::read_series_csv(eval_truth, pred.delta_t);
      }
      const auto r = nilm::evaluate_series(eval_appliance, pred, truth);
      if (eval_format == "json") {
        write_json(eval_out, r);
      } else {
        std::ostringstream os;
        os.precision(17);
        auto opt = [&](const std::optional<nilm::PeriodMetric>& m) {
          if (m) os << m->mae;
        };
        os << "appliance,mae,mr,samples,day_mae,week_mae,month_mae\n"
           << r.appliance << ',' << r.mae << ',' << r.mr << ',' << r.samples << ',';
        opt(r.day);
        os << ',';
        opt(r.week);
        os << ',';
        opt(r.month);
        os << '\n';
        if (eval_out == "-") {
          std::cout << os.str();
        } else {
          std::ofstream f(eval_out);
          if (!f) throw nilm::ConfigError("cannot open " + eval_out + " for writing");
          f << os.str();
        }
      }
      return 0;
    }

    if (*abl) {
      std::vector<nilm::House> houses;
      if (abl_data.empty()) {
        const auto spec = nilm::standard_benchmark_spec();
        for (const auto& h : nilm::generate_benchmark(spec, abl_data_seed))
          houses.push_back(nilm::preprocess(h, spec.max_gap));
      } else {
        houses = load_dataset(abl_data);
      }
      const auto data = nilm::split_windows(houses, abl_split);
      nilm::AblationProgress on_run;
      nilm::AblationEpochProgress on_epoch;
      if (!quiet) {
        on_run = [](const nilm::AblationRun& r) {
          std::cerr << r.variant << " seed " << r.seed << ": mae " << r.mae << " mr " << r.mr << '\n';
        };
        on_epoch = [](const std::string& v, std::uint64_t s, const nilm::EpochRecord& e) {
          std::cerr << v << " seed " << s << " ";
          print_epoch(e);
        };
      }
      const auto table = nilm::run_ablation(data, nilm::apply_variant(abl_model, abl_base_variant), abl_cfg,
                                            abl_variants, abl_seeds, on_run, on_epoch);
      std::cout << nilm::ablation_csv(table);
      if (!abl_out.empty()) write_json(abl_out, table);
      return 0;
    }

    if (*gc) {
      bool ok = true;
      std::cout << "tier,check,max_rel_error,tolerance,checked,status\n";
      for (const auto& e : nilm::run_gradient_suite(gc_seed)) {
        std::cout << e.tier << ',' << e.name << ',' << e.max_rel_error << ',' << e.tolerance << ',' << e.checked << ','
                  << (e.passed() ? "pass" : "FAIL") << '\n';
        ok = ok && e.passed();
      }
      if (!ok) {
        std::cerr << "error: gradient check failed\n";
        return 1;
      }
      return 0;
    }

    if (*pc) {
      const auto cfg = nilm::apply_variant(pc_model, pc_variant);
      nilm::NILMFormer model(cfg, 0);
      json out = {{"variant", pc_variant}, {"parameters", model.parameter_count()}, {"windows", json::object()}};
      for (const auto w : pc_windows) {
        const std::vector<nilm::CovariateWindow> cov{
            nilm::covariates_for_grid(nilm::parse_utc("2024-01-01T00:00:00Z"), nilm::Seconds{900}, w)};
        nilm::Tape tape;
        model.forward(tape, nilm::Tensor({1, 1, w}, 0.5), cov);
        out["windows"][std::to_string(w)] = model.parameter_count();
      }
      std::cout << out.dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
