#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

std::vector<double> parse_fractions(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stod(tok));
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse mask-refinement head: synthetic scenes, demo inference, "
                 "oracle verification, and FLOP benchmarks"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    int instances = 3;
    int image_size = 256;
    int trials = 100;
    bool inject_fault = false;
    bool dump_masks = false;
    std::string scene_path, config_path, weights_path, out_dir = "out", fractions_csv;

    CLI::App* generate = app.add_subcommand("generate", "Write a reproducible synthetic scene");
    generate->add_option("--seed", seed, "Scene seed");
    generate->add_option("--instances", instances, "Number of instances")->check(CLI::PositiveNumber);
    generate->add_option("--image-size", image_size, "Square image side in pixels");
    generate->add_option("--out", out_dir, "Output directory")->required();

    CLI::App* demo = app.add_subcommand("demo", "Run the refinement head on a scene");
    demo->add_option("--scene", scene_path, "Scene file")->required();
    demo->add_option("--config", config_path, "Pipeline config file");
    demo->add_option("--weights", weights_path, "Weight file (seeded init when omitted)");
    demo->add_option("--out", out_dir, "Output directory")->required();
    demo->add_flag("--dump-masks", dump_masks, "Also write per-stage mask pyramids as PGM");

    CLI::App* verify = app.add_subcommand("verify", "Run randomized oracle-equivalence checks");
    verify->add_option("--seed", seed, "Base seed");
    verify->add_option("--trials", trials, "Trials per property")->check(CLI::PositiveNumber);
    verify->add_flag("--inject-fault", inject_fault,
                     "Corrupt an index map on purpose to exercise the validator")
        ->group(""); // test hook, hidden from help

    CLI::App* bench = app.add_subcommand("bench", "Sparse-vs-dense FLOP accounting sweep");
    bench->add_option("--scene", scene_path, "Scene file")->required();
    bench->add_option("--config", config_path, "Pipeline config file");
    bench->add_option("--weights", weights_path, "Weight file (seeded init when omitted)");
    bench->add_option("--fractions", fractions_csv, "Comma-separated active fractions in (0,1]")
        ->required();
    bench->add_option("--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (generate->parsed())
            return effseg::cli::cmd_generate(seed, instances, image_size, out_dir, std::cout);
        if (demo->parsed())
            return effseg::cli::cmd_demo(scene_path, config_path, weights_path, out_dir,
                                         dump_masks, std::cout);
        if (verify->parsed())
            return effseg::cli::cmd_verify(seed, trials, inject_fault, std::cout);
        if (bench->parsed())
            return effseg::cli::cmd_bench(scene_path, config_path, weights_path,
                                          parse_fractions(fractions_csv), out_dir, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
