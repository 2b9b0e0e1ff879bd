#include <iostream>

#include <CLI11.hpp>

#include "semsr/pipeline.hpp"

using namespace semsr;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    pipeline::CommandOptions cmd;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "run configuration (JSON, comments allowed)")->required();
    sub->add_option("--seed", f.seed, "override the global seed");
    sub->add_option("--out", f.out, "override the run directory");
    sub->add_option("--steps", f.cmd.steps, "training steps / DAPE iterations / sampling steps");
    sub->add_flag("--no-lre", f.cmd.no_lre, "start sampling from pure noise");
    sub->add_option("--threshold", f.cmd.threshold, "tag decoding threshold");
    sub->add_option("--prompt-override", f.cmd.prompt_override, "comma-separated tags used as the hard prompt");
    sub->add_option("--input", f.cmd.input, "infer: PNG file or directory; evaluate: inference output directory");
}

void print_summary(const nlohmann::json& m) {
    std::cout << m.at("command").get<std::string>() << ": done in " << m.at("wall_time_s").get<double>() << " s\n";
    for (const auto& [k, v] : m.at("results").items())
        if (!v.is_object()) std::cout << "  " << k << " = " << v.dump() << "\n";
    if (m.at("results").contains("arms"))
        for (const auto& [arm, r] : m.at("results").at("arms").items())
            std::cout << "  " << arm << ": psnr_y " << r.at("psnr_y").dump() << ", flat_dev " << r.at("flat_dev_bicubic").dump()
                      << ", op " << r.at("op").dump() << "\n";
    std::cout << "  outputs: " << m.at("outputs").size() << " files, manifest under manifests/\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semsr: semantics-prompted diffusion super-resolution at toy scale"};
    app.require_subcommand(1);
    Flags flags;
    for (const auto& name : pipeline::command_names()) add_common(app.add_subcommand(name, "run the " + name + " stage"), flags);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig cfg;
    try {
        cfg = parse_config(flags.config);
        if (flags.seed) cfg.seed = *flags.seed;
        if (flags.out) cfg.out_dir = *flags.out;
        cfg.validate();
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }
    try {
        print_summary(pipeline::run_command(command, cfg, flags.cmd));
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << command << " failed: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
