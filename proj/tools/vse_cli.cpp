// Command-line front end: dataset generation, training, inference, the
// particle-filter baseline, evaluation and the NMSE-versus-SMNR sweep.
//
// Exit codes: 0 success, 2 usage error, 3 data/file error, 4 numerical
// failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vse/checkpoint.hpp"
#include "vse/datasets.hpp"
#include "vse/evalkit.hpp"
#include "vse/particle_filter.hpp"
#include "vse/vse.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Tracks option values so a resolved-config JSON can be written next to the
// outputs and --config files can be merged back in (explicit flags win).
class ConfigBinder {
public:
    explicit ConfigBinder(CLI::App* app) : app_(app) {}

    template <class T>
    CLI::Option* bind(const std::string& flag, T& value, const std::string& desc) {
        CLI::Option* opt = app_->add_option(flag, value, desc);
        const std::string key = opt->get_single_name();
        to_json_.emplace_back([key, &value](json& j) { j[key] = value; });
        from_json_.emplace_back([key, &value, opt](const json& j) {
            if (opt->count() == 0 && j.contains(key)) value = j.at(key).get<T>();
        });
        return opt;
    }

    CLI::Option* bind_flag(const std::string& flag, bool& value, const std::string& desc) {
        CLI::Option* opt = app_->add_flag(flag, value, desc);
        const std::string key = opt->get_single_name();
        to_json_.emplace_back([key, &value](json& j) { j[key] = value; });
        from_json_.emplace_back([key, &value, opt](const json& j) {
            if (opt->count() == 0 && j.contains(key)) value = j.at(key).get<bool>();
        });
        return opt;
    }

    void merge_config_file(const std::string& path) {
        if (path.empty()) return;
        std::ifstream in(path);
        if (!in) throw vse::FileFormatError("cannot read config file: " + path);
        json j;
        in >> j;
        for (auto& f : from_json_) f(j);
    }

    json resolved(const std::string& subcommand) const {
        json j{{"subcommand", subcommand}};
        for (auto& f : to_json_) f(j);
        return j;
    }

private:
    CLI::App* app_;
    std::vector<std::function<void(json&)>> to_json_;
    std::vector<std::function<void(const json&)>> from_json_;
};

void write_resolved_config(const json& resolved, const std::string& out_path) {
    if (out_path.empty()) return;
    std::ofstream out(out_path + ".config.json");
    if (out) out << resolved.dump(2) << "\n";
}

vse::lorenz::Config lorenz_from_meta(const json& meta) {
    return vse::data::lorenz_config_from_json(meta.at("lorenz"));
}
vse::camera::Config camera_from_meta(const json& meta) {
    return vse::data::camera_config_from_json(meta.at("camera"));
}

// Estimates are stored in the dataset container with the method recorded in
// meta; the state payload carries the estimates.
void save_estimates(const std::vector<Eigen::MatrixXd>& estimates, const json& source_meta,
                    const std::string& method, const std::string& path) {
    std::vector<Eigen::MatrixXd> empty_meas(estimates.size());
    for (std::size_t i = 0; i < estimates.size(); ++i)
        empty_meas[i] = Eigen::MatrixXd::Zero(estimates[i].rows(), 1);
    json meta{{"method", method}, {"estimates_of", source_meta}};
    vse::data::SequenceDataset out(std::move(empty_meas), estimates, meta);
    vse::data::save(out, path);
}

int cmd_generate(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto n = std::make_shared<int>(1000);
    auto t = std::make_shared<int>(200);
    auto smnr = std::make_shared<double>(10.0);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto out = std::make_shared<std::string>();
    auto config_path = std::make_shared<std::string>();
    auto sigma_e2 = std::make_shared<double>(0.1);
    auto burn_in = std::make_shared<int>(0);

    binder->bind("--n", *n, "number of sequences");
    binder->bind("--t", *t, "sequence length");
    binder->bind("--smnr", *smnr, "target SMNR in dB");
    binder->bind("--seed", *seed, "generation seed");
    binder->bind("--sigma-e2", *sigma_e2, "process noise variance");
    binder->bind("--burn-in", *burn_in, "discarded leading steps");
    binder->bind("--out", *out, "output dataset path")->required();
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        vse::lorenz::Config lz;
        lz.sigma_e2 = *sigma_e2;
        lz.burn_in = *burn_in;
        vse::camera::Config cam;
        auto ds = vse::data::generate(*n, *t, *smnr, lz, cam, *seed);
        vse::data::save(ds, *out);
        write_resolved_config(binder->resolved("generate"), *out);

        std::vector<Eigen::MatrixXd> clean(ds.num_sequences());
        const auto grid = vse::camera::pixel_grid(cam);
        for (int i = 0; i < ds.num_sequences(); ++i) {
            const auto& st = ds.states(i);
            clean[i].resize(st.rows(), cam.pixels());
            for (Eigen::Index tt = 0; tt < st.rows(); ++tt)
                clean[i].row(tt) =
                    vse::camera::measure_clean(st.row(tt).transpose(), cam, grid).transpose();
        }
        const double measured =
            vse::eval::measured_smnr_db(clean, ds.meta().at("sigma_w2").get<double>());
        std::printf("wrote %s: %d sequences of length %d, measured SMNR %.9f dB\n", out->c_str(),
                    ds.num_sequences(), ds.seq_len(), measured);
    });
    return 0;
}

int cmd_train(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto data_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto resume = std::make_shared<std::string>();
    auto config_path = std::make_shared<std::string>();
    auto epochs = std::make_shared<int>(500);
    auto batch = std::make_shared<int>(128);
    auto lr = std::make_shared<double>(1e-3);
    auto samples = std::make_shared<int>(10);
    auto hidden = std::make_shared<int>(80);
    auto layers = std::make_shared<int>(2);
    auto head = std::make_shared<int>(128);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto n_limit = std::make_shared<int>(0);
    auto threads = std::make_shared<int>(1);
    auto kl_warmup = std::make_shared<int>(30);
    auto init_std = std::make_shared<double>(10.0);

    binder->bind("--data", *data_path, "training dataset")->required();
    binder->bind("--out", *out, "checkpoint output path")->required();
    binder->bind("--resume", *resume, "checkpoint to resume from");
    binder->bind("--epochs", *epochs, "training epochs");
    binder->bind("--batch", *batch, "mini-batch size");
    binder->bind("--lr", *lr, "initial learning rate");
    binder->bind("--samples", *samples, "reconstruction samples L");
    binder->bind("--hidden", *hidden, "GRU hidden units");
    binder->bind("--layers", *layers, "GRU layers");
    binder->bind("--head", *head, "head hidden units");
    binder->bind("--seed", *seed, "training seed");
    binder->bind("--n-limit", *n_limit, "use only the first N sequences (0 = all)");
    binder->bind("--threads", *threads, "worker threads (1 = bit-reproducible)");
    binder->bind("--kl-warmup", *kl_warmup, "KL warm-up epochs (0 disables)");
    binder->bind("--init-belief-std", *init_std, "initial belief standard deviation");
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        auto ds = vse::data::load(*data_path);
        std::vector<Eigen::MatrixXd> sequences = ds.measurements();
        if (*n_limit > 0 && *n_limit < static_cast<int>(sequences.size()))
            sequences.resize(*n_limit);

        const double sigma_w2 = ds.meta().at("sigma_w2");
        const vse::camera::Config cam = camera_from_meta(ds.meta());

        vse::VseModel<vse::CameraMeasurement> model{{}, {}, vse::CameraMeasurement(cam), 0, 0};
        int first_epoch = 0;
        if (!resume->empty()) {
            auto loaded = vse::ckpt::load(*resume);
            model = std::move(loaded.model);
            first_epoch = loaded.epochs_completed;
        } else {
            vse::ModelConfig mc;
            mc.hidden = *hidden;
            mc.layers = *layers;
            mc.head_hidden = *head;
            mc.sample_count = *samples;
            mc.init_belief_std = *init_std;
            model = vse::make_model(vse::CameraMeasurement(cam), sigma_w2, mc, *seed);
        }
        model.sigma_w2 = sigma_w2;
        model.sample_count = *samples;

        vse::TrainConfig tc;
        tc.epochs = *epochs;
        tc.batch_size = *batch;
        tc.lr = *lr;
        tc.seed = *seed;
        tc.threads = *threads;
        tc.kl_warmup_epochs = *kl_warmup;
        tc.first_epoch = first_epoch;

        const std::string log_path = *out + ".log.csv";
        std::ofstream log(log_path, first_epoch > 0 ? std::ios::app : std::ios::out);
        if (first_epoch == 0)
            log << "epoch,train_elbo,val_elbo,lr,grad_norm,wall_time_s\n";
        auto result = vse::train(model, sequences, tc, [&](const vse::EpochLog& e) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f", e.epoch,
                          e.train_elbo, e.val_elbo, e.lr, e.grad_norm, e.wall_s);
            log << buf << "\n";
            log.flush();
            std::printf("epoch %d train %.4f val %.4f lr %.2e\n", e.epoch, e.train_elbo,
                        e.val_elbo, e.lr);
        });

        const json resolved = binder->resolved("train");
        vse::ckpt::save(*out, model, resolved, first_epoch + result.epochs_run);
        write_resolved_config(resolved, *out);
        if (result.diverged) {
            std::fprintf(stderr, "training diverged (%s); checkpoint holds the last good state\n",
                         result.divergence_reason.c_str());
            throw vse::TrainingDiverged(first_epoch + result.epochs_run);
        }
        std::printf("wrote %s after %d epochs\n", out->c_str(), first_epoch + result.epochs_run);
    });
    return 0;
}

int cmd_infer(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto ckpt_path = std::make_shared<std::string>();
    auto data_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto config_path = std::make_shared<std::string>();

    binder->bind("--checkpoint", *ckpt_path, "trained checkpoint")->required();
    binder->bind("--data", *data_path, "measurement dataset")->required();
    binder->bind("--out", *out, "estimates output path")->required();
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        auto loaded = vse::ckpt::load(*ckpt_path);
        auto ds = vse::data::load(*data_path);
        std::vector<Eigen::MatrixXd> estimates;
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < ds.num_sequences(); ++i)
            estimates.push_back(vse::infer(loaded.model, ds.measurements(i)).estimates);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        save_estimates(estimates, ds.meta(), "vse", *out);
        write_resolved_config(binder->resolved("infer"), *out);
        std::printf("wrote %s (%d sequences, inference %.3f s)\n", out->c_str(),
                    ds.num_sequences(), secs);
    });
    return 0;
}

int cmd_pf(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto data_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto particles = std::make_shared<int>(500);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto threads = std::make_shared<int>(1);
    auto config_path = std::make_shared<std::string>();

    binder->bind("--data", *data_path, "measurement dataset (meta supplies the true model)")
        ->required();
    binder->bind("--out", *out, "estimates output path")->required();
    binder->bind("--particles", *particles, "particle count");
    binder->bind("--seed", *seed, "filter seed");
    binder->bind("--threads", *threads, "worker threads");
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        auto ds = vse::data::load(*data_path);
        if (!ds.meta().contains("lorenz") || !ds.meta().contains("sigma_w2"))
            throw vse::FileFormatError("dataset meta lacks the generative model description");
        const auto lz = lorenz_from_meta(ds.meta());
        const auto cam = camera_from_meta(ds.meta());
        const double sigma_w2 = ds.meta().at("sigma_w2");

        std::vector<Eigen::MatrixXd> estimates(ds.num_sequences());
        const auto t0 = std::chrono::steady_clock::now();
        auto work = [&](int i) {
            estimates[i] = vse::pf::run(ds.measurements(i), lz, cam, sigma_w2, *particles,
                                        vse::RngStream(*seed, static_cast<std::uint64_t>(i)));
        };
        if (*threads <= 1) {
            for (int i = 0; i < ds.num_sequences(); ++i) work(i);
        } else {
            std::atomic<int> next{0};
            std::vector<std::thread> pool;
            for (int k = 0; k < *threads; ++k)
                pool.emplace_back([&] {
                    for (;;) {
                        const int i = next.fetch_add(1);
                        if (i >= ds.num_sequences()) return;
                        work(i);
                    }
                });
            for (auto& th : pool) th.join();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        save_estimates(estimates, ds.meta(), "pf", *out);
        write_resolved_config(binder->resolved("pf"), *out);
        std::printf("wrote %s (%d sequences, filtering %.3f s)\n", out->c_str(),
                    ds.num_sequences(), secs);
    });
    return 0;
}

int cmd_evaluate(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto truth_path = std::make_shared<std::string>();
    auto est_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto smnr_only = std::make_shared<bool>(false);
    auto config_path = std::make_shared<std::string>();

    binder->bind("--truth", *truth_path, "dataset with ground-truth states")->required();
    binder->bind("--estimates", *est_path, "estimates file (from infer/pf)");
    binder->bind("--out", *out, "optional CSV output");
    binder->bind_flag("--smnr-only", *smnr_only, "report the measured SMNR of --truth and exit");
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        auto truth_ds = vse::data::load(*truth_path);
        if (*smnr_only) {
            const auto cam = camera_from_meta(truth_ds.meta());
            const auto grid = vse::camera::pixel_grid(cam);
            std::vector<Eigen::MatrixXd> clean(truth_ds.num_sequences());
            for (int i = 0; i < truth_ds.num_sequences(); ++i) {
                const auto& st = truth_ds.states(i);
                clean[i].resize(st.rows(), cam.pixels());
                for (Eigen::Index t = 0; t < st.rows(); ++t)
                    clean[i].row(t) =
                        vse::camera::measure_clean(st.row(t).transpose(), cam, grid).transpose();
            }
            const double smnr = vse::eval::measured_smnr_db(
                clean, truth_ds.meta().at("sigma_w2").get<double>());
            std::printf("measured_smnr_db %.9f\n", smnr);
            return;
        }
        if (est_path->empty())
            throw CLI::ValidationError("--estimates is required unless --smnr-only is given");
        auto est_ds = vse::data::load(*est_path);
        auto result = vse::eval::nmse_db(truth_ds.all_states(), est_ds.all_states());
        std::printf("nmse_db %s\n", result.nmse.to_string().c_str());
        if (!out->empty()) {
            std::ofstream csv(*out);
            csv << "sequence,nmse_db\n";
            for (std::size_t i = 0; i < result.per_sequence.size(); ++i)
                csv << i << "," << result.per_sequence[i].to_string() << "\n";
            csv << "mean," << result.nmse.to_string() << "\n";
            write_resolved_config(binder->resolved("evaluate"), *out);
        }
    });
    return 0;
}

int cmd_sweep(CLI::App& app) {
    auto binder = std::make_shared<ConfigBinder>(&app);
    auto smnrs = std::make_shared<std::vector<double>>();
    auto ckpts = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>();
    auto particles = std::make_shared<int>(500);
    auto n_test = std::make_shared<int>(20);
    auto t_test = std::make_shared<int>(200);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto config_path = std::make_shared<std::string>();

    binder->bind("--smnr", *smnrs, "SMNR list in dB")->required();
    binder->bind("--vse-checkpoint", *ckpts, "SMNR=PATH pairs, one per SMNR")->required();
    binder->bind("--out", *out, "output CSV path")->required();
    binder->bind("--particles", *particles, "PF particle count");
    binder->bind("--n-test", *n_test, "test sequences per SMNR");
    binder->bind("--t-test", *t_test, "test sequence length");
    binder->bind("--seed", *seed, "test-set seed");
    app.add_option("--config", *config_path, "JSON config file (flags win)");

    app.callback([=]() {
        binder->merge_config_file(*config_path);
        vse::eval::SweepConfig sc;
        sc.smnr_list = *smnrs;
        sc.pf_particles = *particles;
        sc.n_test = *n_test;
        sc.t_test = *t_test;
        sc.seed = *seed;
        for (const auto& spec : *ckpts) {
            const auto eq = spec.find('=');
            if (eq == std::string::npos)
                throw CLI::ValidationError("--vse-checkpoint expects SMNR=PATH, got " + spec);
            sc.vse_checkpoints[std::stod(spec.substr(0, eq))] = spec.substr(eq + 1);
        }
        auto rows = vse::eval::sweep(sc);
        vse::eval::write_sweep_csv(rows, *out);
        write_resolved_config(binder->resolved("sweep"), *out);
        std::printf("wrote %s (%zu rows)\n", out->c_str(), rows.size());
    });
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variational state estimation for a camera-observed stochastic Lorenz system"};
    app.require_subcommand(1);

    cmd_generate(*app.add_subcommand("generate", "generate a dataset at a target SMNR"));
    cmd_train(*app.add_subcommand("train", "train the estimator on a dataset"));
    cmd_infer(*app.add_subcommand("infer", "run sampling-free inference with a checkpoint"));
    cmd_pf(*app.add_subcommand("pf", "run the model-aware particle-filter baseline"));
    cmd_evaluate(*app.add_subcommand("evaluate", "phase-invariant NMSE / measured SMNR"));
    cmd_sweep(*app.add_subcommand("sweep", "NMSE-versus-SMNR table for VSE and PF"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    } catch (const vse::FileFormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const vse::Error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return 0;
}
