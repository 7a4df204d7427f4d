#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "easydistill/dispatch.hpp"

using namespace easydistill;

int main(int argc, char** argv) {
    CLI::App app{"config-driven knowledge distillation pipeline"};
    std::string config_path;
    bool dry_run = false;
    app.add_option("--config", config_path, "path to the job JSON file")->required();
    app.add_flag("--dry-run", dry_run, "validate the config and print the stage plan");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    JobConfig cfg;
    try {
        cfg = parse_config(config_path);
        for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    if (dry_run) {
        std::cout << "job_type: " << cfg.job_type << "\n";
        std::cout << "plan:\n";
        for (const auto& stage : plan_stages(cfg)) std::cout << "  " << stage << "\n";
        return 0;
    }

    try {
        auto report = dispatch(cfg);
        for (const auto& s : report.stages)
            std::cout << "stage " << s.stage << ": "
                      << (s.skipped ? "skipped (cached)" : s.detail) << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << redact(e.what(), cfg.inference.api_key) << "\n";
        return 2;
    }
}
