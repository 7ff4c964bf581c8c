// emonext: train/eval/gradcheck/predict entry point.
//
// Exit codes: 0 success, 1 failed gradient check, 2 data/configuration error,
// 3 numeric abort during training.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emonext/checkpoint.hpp"
#include "emonext/data.hpp"
#include "emonext/gradcheck_suite.hpp"
#include "emonext/model.hpp"
#include "emonext/rng.hpp"
#include "emonext/train.hpp"

namespace {

using namespace emonext;

constexpr int kExitOk = 0;
constexpr int kExitGradFail = 1;
constexpr int kExitDataError = 2;
constexpr int kExitNumericError = 3;

struct Options {
    std::string data;
    std::string preset = "micro";
    std::string config_file;
    int64_t epochs = 100;
    int64_t batch_size = 64;
    double lr = 1e-4;
    double lambda = 0.01;
    bool lambda_set = false;
    uint64_t seed = 0;
    std::string out = "out";
    std::string checkpoint;
    std::string split = "test";
    std::string image;
    std::string op;
    double corrupt = 0.0;  // test-only: biases every analytic gradient
};

ModelConfig resolve_config(const Options& o) {
    ModelConfig cfg;
    if (!o.config_file.empty()) {
        std::ifstream in(o.config_file);
        if (!in) throw ConfigError("cannot open config file: " + o.config_file);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(o.config_file + ": bad JSON: " + e.what());
        }
        cfg = config_from_json(j);
    } else {
        cfg = preset_config(o.preset);
    }
    if (o.lambda_set) cfg.lambda = o.lambda;
    return cfg;
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Validation;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "' (valid: train, val, test)");
}

int cmd_train(const Options& o) {
    auto cfg = resolve_config(o);
    auto ds = parse_csv(o.data);
    Rng rng(o.seed);
    auto model = build<float>(cfg, rng);

    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch_size;
    tc.lr = o.lr;
    tc.seed = o.seed;
    tc.out_dir = o.out;
    auto result = train(model, ds, tc);

    const auto& last = result.epochs.back();
    std::printf("final train accuracy %.6f\n", last.train_acc);
    std::printf("final val accuracy %.6f\n", last.val_acc);
    std::printf("best accuracy %.6f at epoch %lld\n", result.best_acc,
                static_cast<long long>(result.best_epoch));
    return kExitOk;
}

int cmd_eval(const Options& o) {
    Split split = parse_split(o.split);
    // validation/test evaluation uses the EMA shadow weights, matching the
    // selection protocol during training; the train split uses raw weights,
    // matching the logged train accuracy
    auto state = load_train_state<float>(o.checkpoint, /*use_ema=*/split != Split::Train);
    auto ds = parse_csv(o.data);
    auto samples = ds.split(split);
    if (samples.empty())
        throw DataError(std::string("split '") + split_name(split) + "' has no rows in " + o.data);
    auto mt = evaluate(state.model, samples);

    std::filesystem::create_directories(o.out);
    std::ofstream csv(o.out + "/confusion.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot write confusion matrix to " + o.out);
    const auto& names = class_names();
    for (size_t c = 0; c < names.size(); ++c) csv << (c ? "," : "") << names[c];
    csv << "\n";
    for (const auto& row : mt.confusion) {
        for (size_t p = 0; p < row.size(); ++p) csv << (p ? "," : "") << row[p];
        csv << "\n";
    }

    std::printf("accuracy %.6f on %lld %s rows\n", mt.accuracy,
                static_cast<long long>(mt.confusion_total()), split_name(split));
    return kExitOk;
}

int cmd_gradcheck(const Options& o) {
    auto cases = gradcheck_suite();
    bool found = false, all_pass = true;
    std::printf("%-28s %14s %12s  %s\n", "op", "max_rel_err", "threshold", "status");
    for (const auto& c : cases) {
        if (!o.op.empty() && c.name != o.op) continue;
        found = true;
        double err = c.run(o.seed == 0 ? 1 : o.seed, o.corrupt);
        bool pass = err < c.threshold;
        all_pass = all_pass && pass;
        std::printf("%-28s %14.3e %12.0e  %s\n", c.name.c_str(), err, c.threshold,
                    pass ? "pass" : "FAIL");
    }
    if (!found) throw ConfigError("unknown op '" + o.op + "'");
    return all_pass ? kExitOk : kExitGradFail;
}

int cmd_predict(const Options& o) {
    auto state = load_train_state<float>(o.checkpoint, /*use_ema=*/true);
    auto img = read_pgm_48(o.image);
    int64_t target = state.model.config.input_size;
    auto scaled = resize(img, kImageSize, static_cast<int>(target));
    normalize(scaled);
    Tensor<float> x({1, 1, target, target}, std::move(scaled));

    auto pred = predict(state.model, x);
    std::printf("%s\n", class_names()[static_cast<size_t>(pred.class_index)].c_str());
    for (size_t c = 0; c < class_names().size(); ++c)
        std::printf("%s %.4f\n", class_names()[c].c_str(),
                    static_cast<double>(pred.probabilities[c]));
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EmoNeXt facial-expression recognition"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--seed", o.seed, "random seed");
        cmd->add_option("--out", o.out, "output directory");
    };

    auto* tr = app.add_subcommand("train", "train a model and write checkpoints");
    tr->add_option("--data", o.data, "FER2013-format CSV path")->required();
    tr->add_option("--preset", o.preset, "model preset (micro, tiny, small, base, large, xlarge)");
    tr->add_option("--config-file", o.config_file, "JSON model config (overrides --preset)");
    tr->add_option("--epochs", o.epochs, "training epochs");
    tr->add_option("--batch-size", o.batch_size, "minibatch size");
    tr->add_option("--lr", o.lr, "peak learning rate");
    tr->add_option("--lambda", o.lambda, "attention regularizer weight")
        ->each([&](const std::string&) { o.lambda_set = true; });
    add_common(tr);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    ev->add_option("--data", o.data, "FER2013-format CSV path")->required();
    ev->add_option("--checkpoint", o.checkpoint, "EMNX checkpoint path")->required();
    ev->add_option("--split", o.split, "dataset split: train, val or test");
    add_common(ev);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks for all gradients");
    gc->add_option("--op", o.op, "check a single op by name");
    gc->add_option("--seed", o.seed, "random seed");
    gc->add_option("--corrupt", o.corrupt, "bias added to analytic gradients (harness self-test)")
        ->group("");  // hidden
    auto* pr = app.add_subcommand("predict", "classify one 48x48 binary PGM image");
    pr->add_option("--checkpoint", o.checkpoint, "EMNX checkpoint path")->required();
    pr->add_option("--image", o.image, "48x48 8-bit binary (P5) PGM path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // exit 0 with help text
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return kExitDataError;
    }

    try {
        if (tr->parsed()) return cmd_train(o);
        if (ev->parsed()) return cmd_eval(o);
        if (gc->parsed()) return cmd_gradcheck(o);
        if (pr->parsed()) return cmd_predict(o);
    } catch (const emonext::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDataError;
    }
    return kExitDataError;
}
