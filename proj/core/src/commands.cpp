#include "flowreg/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <json.hpp>

#include "flowreg/fvol.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/volume_ops.hpp"

namespace flowreg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void apply_threads(const RunConfig& cfg) {
#ifdef _OPENMP
    const int threads = int(cfg.get_int("threads"));
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)cfg;
#endif
}

std::filesystem::path require_out_dir(const RunConfig& cfg) {
    const std::string out = cfg.get_string("out");
    if (out.empty()) throw ConfigError("config key 'out' (output directory) is required");
    std::filesystem::create_directories(out);
    return out;
}

void echo_config(const RunConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.write_echo(out_dir / "effective.cfg");
    std::cout << "seed=" << cfg.seed() << "\n";
}

std::string hexdouble(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

TaskDirection direction_of(const RunConfig& cfg) {
    return parse_direction(cfg.get_string("direction"));
}

struct CaseRefs {
    const LabelMap* fixed_labels;
    const LabelMap* moving_labels;
    double ref_lvef;
    double ref_rvef;
};

CaseRefs case_refs(const PhantomCase& c, TaskDirection dir) {
    if (dir == TaskDirection::kESToED) {
        return {&c.ed_labels, &c.es_labels, c.analytic_lvef, c.analytic_rvef};
    }
    return {&c.es_labels, &c.ed_labels, c.analytic_lvef, c.analytic_rvef};
}

struct MeanSd {
    double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= double(xs.size());
    for (double x : xs) r.sd += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(r.sd / double(xs.size()));
    return r;
}

nlohmann::json report_json(const EvalReport& r) {
    return nlohmann::json::parse(r.to_json());
}

nlohmann::json aggregate_json(const std::vector<EvalReport>& reports) {
    const char* fields[] = {"dice_rv", "dice_myo", "dice_lv",  "dice_mean", "dice_fg", "pct_negjac",
                            "std_jac", "lvef_mae", "rvef_mae", "mt_mae",    "seconds"};
    nlohmann::json mean, sd;
    for (const char* f : fields) {
        std::vector<double> xs;
        xs.reserve(reports.size());
        for (const auto& r : reports) xs.push_back(double(report_json(r)[f]));
        const MeanSd ms = mean_sd(xs);
        mean[f] = ms.mean;
        sd[f] = ms.sd;
    }
    return nlohmann::json{{"mean", mean}, {"sd", sd}};
}

int run_command(const char* name, const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << name << ": " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << name << ": " << e.what() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << name << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << name << ": " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

std::vector<PhantomCase> load_dataset(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) {
        throw std::runtime_error("dataset path '" + root.string() + "' is not a directory");
    }
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (e.is_directory() && e.path().filename().string().starts_with("case_")) {
            dirs.push_back(e.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) {
        throw std::runtime_error("dataset path '" + root.string() + "' contains no case_* dirs");
    }
    std::vector<PhantomCase> cases(dirs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < std::int64_t(dirs.size()); ++i) {
        cases[std::size_t(i)] = load_case(dirs[std::size_t(i)]);
    }
    return cases;
}

std::vector<TrainSample> to_samples(const std::vector<PhantomCase>& cases, TaskDirection dir,
                                    int begin, int end) {
    std::vector<TrainSample> out;
    out.reserve(std::size_t(std::max(0, end - begin)));
    for (int i = begin; i < end; ++i) {
        const PhantomCase& c = cases[std::size_t(i)];
        TrainSample s;
        if (dir == TaskDirection::kESToED) {
            s.fixed = c.ed_image;
            s.moving = c.es_image;
            s.fixed_labels = c.ed_labels;
            s.moving_labels = c.es_labels;
        } else {
            s.fixed = c.es_image;
            s.moving = c.ed_image;
            s.fixed_labels = c.es_labels;
            s.moving_labels = c.ed_labels;
        }
        out.push_back(std::move(s));
    }
    return out;
}

int cmd_synth(const RunConfig& cfg) {
    return run_command("synth", [&] {
        apply_threads(cfg);
        const auto out_dir = require_out_dir(cfg);
        echo_config(cfg, out_dir);

        const PhantomConfig pcfg = cfg.phantom_config();
        const int n = int(cfg.get_int("phantom.cases"));
        const auto t0 = Clock::now();
        Rng rng(pcfg.seed);
        const std::vector<PhantomCase> cases = generate_dataset(pcfg, n, rng);
        for (int i = 0; i < n; ++i) save_case(case_dir_name(out_dir, i), cases[std::size_t(i)]);

        const double secs = seconds_since(t0);
        {
            std::ofstream f(out_dir / "dataset.txt");
            f << "cases=" << n << "\nseed=" << cfg.seed() << "\nseconds=" << secs << "\n";
        }
        std::cout << "generated " << n << " cases in " << secs << " s\n";
        return 0;
    });
}

int cmd_train(const RunConfig& cfg) {
    return run_command("train", [&] {
        apply_threads(cfg);
        const auto out_dir = require_out_dir(cfg);
        echo_config(cfg, out_dir);

        const std::string data_dir = cfg.get_string("data.dir");
        if (data_dir.empty()) throw ConfigError("config key 'data.dir' is required");
        const std::vector<PhantomCase> cases = load_dataset(data_dir);
        const SplitRanges split = split_ranges(int(cases.size()), cfg.get_double("data.train_frac"),
                                               cfg.get_double("data.val_frac"));
        const TaskDirection dir = direction_of(cfg);
        const std::vector<TrainSample> train_set =
            to_samples(cases, dir, split.train_begin, split.train_end);
        const std::vector<TrainSample> val_set = to_samples(cases, dir, split.val_begin, split.val_end);

        const NetworkConfig net_cfg = cfg.network_config();
        const TrainConfig train_cfg = cfg.train_config();

        const ParamSet<float>* resume = nullptr;
        ParamSet<float> resume_params;
        const std::string resume_path = cfg.get_string("train.resume");
        if (!resume_path.empty()) {
            auto [ckpt_cfg, params] = load_checkpoint(resume_path);
            NetworkConfig want = net_cfg;
            want.seed = ckpt_cfg.seed;
            if (!(ckpt_cfg == want)) {
                throw ConfigError("train.resume: checkpoint topology does not match net.* config");
            }
            resume_params = std::move(params);
            resume = &resume_params;
            const Network<float> net(net_cfg);
            const double val = validation_loss(
                net, resume_params, val_set,
                make_validation_noise(val_set, train_cfg.seed), train_cfg.loss);
            std::cout << "resume_val_loss=" << hexdouble(val) << "\n";
        }

        std::ofstream log(out_dir / "loss_log.csv");
        log << "epoch,train_loss,val_loss,seconds\n";

        std::vector<EpochLog> live;
        const auto t0 = Clock::now();
        FitResult<float> result = fit<float>(train_set, val_set, net_cfg, train_cfg, &live,
                                             resume);
        for (const auto& e : result.history) {
            log << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.seconds << "\n";
        }
        log.flush();

        save_checkpoint(out_dir / "model_student.frwt", net_cfg, result.student);
        save_checkpoint(out_dir / "model_teacher.frwt", net_cfg, result.teacher);
        {
            std::ofstream f(out_dir / "manifest.txt");
            f << "best_epoch=" << result.best_epoch << "\n"
              << "epochs_run=" << result.epochs_run << "\n"
              << "best_val_loss=" << hexdouble(result.best_val_loss) << "\n"
              << "seed=" << cfg.seed() << "\n"
              << "seconds=" << seconds_since(t0) << "\n"
              << "# effective configuration\n"
              << cfg.echo();
        }
        std::cout << "best_epoch=" << result.best_epoch
                  << " best_val_loss=" << result.best_val_loss
                  << " epochs_run=" << result.epochs_run << "\n";
        return 0;
    });
}

int cmd_register(const RunConfig& cfg) {
    return run_command("register", [&] {
        apply_threads(cfg);
        const auto out_dir = require_out_dir(cfg);
        echo_config(cfg, out_dir);

        const std::string ckpt_path = cfg.get_string("register.checkpoint");
        if (ckpt_path.empty()) throw ConfigError("config key 'register.checkpoint' is required");
        const std::string fixed_path = cfg.get_string("register.fixed");
        const std::string moving_path = cfg.get_string("register.moving");
        if (fixed_path.empty() || moving_path.empty()) {
            throw ConfigError("config keys 'register.fixed' and 'register.moving' are required");
        }

        auto [net_cfg, params] = load_checkpoint(ckpt_path);
        const Network<float> net(net_cfg);
        const Volume fixed = read_fvol_volume(fixed_path);
        const Volume moving = read_fvol_volume(moving_path);
        const SamplerConfig sampler_cfg = cfg.sampler_config();
        const LossConfig loss_cfg = cfg.loss_config();

        const auto t0 = Clock::now();
        DisplacementField field = sample(net, params, fixed, moving, sampler_cfg, loss_cfg);
        const int io_steps = int(cfg.get_int("register.instance_opt_steps"));
        if (io_steps > 0) {
            field = instance_optimise(fixed, moving, field, io_steps,
                                      cfg.get_double("register.instance_opt_lr"), loss_cfg);
        }
        const double secs = seconds_since(t0);

        write_fvol(out_dir / "field.fvol", field);
        write_fvol(out_dir / "warped.fvol", warp_image(moving, field));
        std::cout << "seconds=" << secs << "\n";
        return 0;
    });
}

int cmd_evaluate(const RunConfig& cfg) {
    return run_command("evaluate", [&] {
        apply_threads(cfg);
        const auto out_dir = require_out_dir(cfg);
        echo_config(cfg, out_dir);

        const std::string data_dir = cfg.get_string("data.dir");
        if (data_dir.empty()) throw ConfigError("config key 'data.dir' is required");
        const std::vector<PhantomCase> cases = load_dataset(data_dir);
        const SplitRanges split = split_ranges(int(cases.size()), cfg.get_double("data.train_frac"),
                                               cfg.get_double("data.val_frac"));
        const TaskDirection dir = direction_of(cfg);

        int begin = 0, end = int(cases.size());
        const std::string which = cfg.get_string("evaluate.split");
        if (which == "test") {
            begin = split.test_begin;
            end = split.test_end;
        } else if (which == "val") {
            begin = split.val_begin;
            end = split.val_end;
        } else if (which == "train") {
            begin = split.train_begin;
            end = split.train_end;
        } else if (which != "all") {
            throw ConfigError("evaluate.split must be one of train/val/test/all");
        }
        if (begin >= end) throw ConfigError("evaluate: selected split is empty");

        const std::string pred_dir = cfg.get_string("evaluate.pred_dir");
        const std::string ckpt_path = cfg.get_string("evaluate.checkpoint");
        if (pred_dir.empty() == ckpt_path.empty()) {
            throw ConfigError(
                "evaluate: exactly one of evaluate.pred_dir or evaluate.checkpoint is required");
        }

        std::ofstream csv(out_dir / "eval.csv");
        csv << "case,steps," << EvalReport::csv_header() << "\n";
        nlohmann::json out_json;
        out_json["direction"] = direction_name(dir);
        out_json["split"] = which;
        out_json["sweeps"] = nlohmann::json::array();

        std::vector<std::string> failures;

        auto eval_block = [&](int steps_tag,
                              const std::function<DisplacementField(const PhantomCase&, int)>& pred
                              ) {
            std::vector<EvalReport> reports;
            nlohmann::json case_rows = nlohmann::json::array();
            for (int i = begin; i < end; ++i) {
                const PhantomCase& c = cases[std::size_t(i)];
                const std::string id = case_dir_name("", i).filename().string();
                try {
                    const auto t0 = Clock::now();
                    const DisplacementField field = pred(c, i);
                    const double secs = seconds_since(t0);
                    const CaseRefs refs = case_refs(c, dir);
                    EvalReport r = evaluate_case(*refs.fixed_labels, *refs.moving_labels, field,
                                                 dir, refs.ref_lvef, refs.ref_rvef, secs);
                    reports.push_back(r);
                    csv << id << ',' << steps_tag << ',' << r.csv_row() << "\n";
                    nlohmann::json row = report_json(r);
                    row["case"] = id;
                    case_rows.push_back(row);
                } catch (const std::exception& e) {
                    failures.push_back(id + ": " + e.what());
                }
            }
            nlohmann::json sweep;
            sweep["steps"] = steps_tag;
            sweep["n_cases"] = reports.size();
            sweep["aggregate"] = reports.empty() ? nlohmann::json() : aggregate_json(reports);
            sweep["cases"] = case_rows;
            out_json["sweeps"].push_back(sweep);
            if (!reports.empty()) {
                const auto agg = aggregate_json(reports);
                std::cout << "steps=" << steps_tag << " n=" << reports.size()
                          << " dice_mean=" << double(agg["mean"]["dice_mean"])
                          << " dice_fg=" << double(agg["mean"]["dice_fg"])
                          << " pct_negjac=" << double(agg["mean"]["pct_negjac"])
                          << " lvef_mae=" << double(agg["mean"]["lvef_mae"]) << "\n";
            }
        };

        if (!pred_dir.empty()) {
            eval_block(0, [&](const PhantomCase&, int i) {
                const auto path = std::filesystem::path(pred_dir) /
                                  (case_dir_name("", i).filename().string() + ".fvol");
                if (!std::filesystem::exists(path)) {
                    throw std::runtime_error("missing prediction file " + path.string());
                }
                return read_fvol_field(path);
            });
        } else {
            auto [net_cfg, params] = load_checkpoint(ckpt_path);
            const Network<float> net(net_cfg);
            const LossConfig loss_cfg = cfg.loss_config();
            std::vector<int> sweep_steps = cfg.get_int_list("evaluate.sweep_steps");
            if (sweep_steps.empty()) sweep_steps = {int(cfg.get_int("sampler.steps"))};
            for (int n_steps : sweep_steps) {
                SamplerConfig scfg = cfg.sampler_config();
                scfg.steps = n_steps;
                if (cfg.get_bool("sampler.eta_auto")) {
                    scfg.eta = SamplerConfig::saturating_eta(n_steps);
                }
                scfg.validate();
                eval_block(n_steps, [&](const PhantomCase& c, int) {
                    const Volume& fixed = dir == TaskDirection::kESToED ? c.ed_image : c.es_image;
                    const Volume& moving = dir == TaskDirection::kESToED ? c.es_image : c.ed_image;
                    return sample(net, params, fixed, moving, scfg, loss_cfg);
                });
            }
        }

        {
            std::ofstream jf(out_dir / "eval.json");
            jf << out_json.dump(2) << "\n";
        }
        if (!failures.empty()) {
            for (const auto& f : failures) std::cerr << "evaluate: " << f << "\n";
            return 1;
        }
        return 0;
    });
}

}  // namespace flowreg
