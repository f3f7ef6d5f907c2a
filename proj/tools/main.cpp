#include "amt/run_config.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <string>
#include <vector>

namespace {

struct CliArgs {
    std::string config_path;
    std::vector<std::string> sets;
    // Dedicated flags, kept as strings so "not passed" is distinguishable and
    // every value funnels through the same strict parser.
    std::string seed, precision, out, in, labels, chunk, epochs, lr, variant, memory_capacity,
        checkpoint_in, checkpoint_out;
};

void add_common(CLI::App* cmd, CliArgs& a) {
    cmd->add_option("--config", a.config_path, "key=value config file");
    cmd->add_option("--set", a.sets, "extra key=value override (repeatable)");
    cmd->add_option("--seed", a.seed, "rng seed");
    cmd->add_option("--precision", a.precision, "32 or 64");
    cmd->add_option("--out", a.out, "output path");
    cmd->add_option("--in", a.in, "input feature matrix path");
    cmd->add_option("--labels", a.labels, "labels path");
    cmd->add_option("--chunk", a.chunk, "stream push size in frames (0 = all at once)");
    cmd->add_option("--epochs", a.epochs, "training epochs");
    cmd->add_option("--lr", a.lr, "learning rate");
    cmd->add_option("--variant", a.variant,
                    "aug_mem | txl | time_restricted | full_context");
    cmd->add_option("--memory-capacity", a.memory_capacity,
                    "memory slots kept per layer (or 'unbounded')");
    cmd->add_option("--checkpoint-in", a.checkpoint_in, "parameters to load");
    cmd->add_option("--checkpoint-out", a.checkpoint_out, "where to save parameters");
}

std::vector<std::string> collect_overrides(const CliArgs& a) {
    std::vector<std::string> ov = a.sets;
    auto put = [&](const char* key, const std::string& v) {
        if (!v.empty()) ov.push_back(std::string(key) + "=" + v);
    };
    put("seed", a.seed);
    put("precision", a.precision);
    put("out", a.out);
    put("in", a.in);
    put("labels", a.labels);
    put("chunk", a.chunk);
    put("epochs", a.epochs);
    put("lr", a.lr);
    put("variant", a.variant);
    put("memory_capacity", a.memory_capacity);
    put("checkpoint_in", a.checkpoint_in);
    put("checkpoint_out", a.checkpoint_out);
    return ov;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming-attention laboratory"};
    app.require_subcommand(1);
    CliArgs args;
    const char* commands[] = {"train", "encode", "stream", "latency", "gradcheck", "gen-data"};
    const char* blurbs[] = {"fit a small model on a synthetic task",
                            "offline forward pass over a feature file",
                            "incremental forward pass over a feature file",
                            "report look-ahead and buffering for a config",
                            "finite-difference check of every parameter gradient",
                            "write a synthetic task's features and labels"};
    for (size_t i = 0; i < 6; ++i) add_common(app.add_subcommand(commands[i], blurbs[i]), args);

    CLI11_PARSE(app, argc, argv);

    try {
        std::string contents;
        if (!args.config_path.empty()) contents = amt::read_text_file(args.config_path);
        amt::RunConfig rc = amt::parse_config(contents, collect_overrides(args));
        rc.command = app.get_subcommands().front()->get_name();
        return amt::run(rc);
    } catch (const amt::Error& e) {
        std::cerr << "error category=" << amt::to_string(e.category()) << " message=\"" << e.what()
                  << "\"\n";
        return amt::exit_code_for(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error category=internal message=\"" << e.what() << "\"\n";
        return 1;
    }
}
