#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kbcheck/cli.hpp"

int main(int argc, char** argv)
{
    CLI::App app{"kbcheck: claim verification with swappable knowledge bases"};
    app.require_subcommand(1);

    std::string kb_path;
    std::string out_path;
    auto* index = app.add_subcommand("index", "Build a BM25 index snapshot for a knowledge base");
    index->add_option("--kb", kb_path, "Knowledge base file (JSON-lines)")->required();
    index->add_option("--out", out_path, "Snapshot output path")->required();

    std::string config_path;
    bool resume = false;
    auto* run = app.add_subcommand("run", "Run an experiment matrix");
    run->add_option("--config", config_path, "Experiment config (JSON)")->required();
    run->add_flag("--resume", resume, "Skip cells completed by an earlier run");

    std::string dir;
    auto* report = app.add_subcommand("report", "Re-render reports of a finished run");
    report->add_option("--dir", dir, "Run output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (index->parsed()) {
        return kbcheck::cli::cmd_index(kb_path, out_path, std::cout, std::cerr);
    }
    if (run->parsed()) {
        return kbcheck::cli::cmd_run(config_path, resume, std::cout, std::cerr);
    }
    return kbcheck::cli::cmd_report(dir, std::cout, std::cerr);
}
