#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "worldlm/config.hpp"
#include "worldlm/engine.hpp"

namespace worldlm {

/// Header: experiment,method,node,round,stage,split,loss,perplexity
std::string metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(const std::string& text);

std::string attention_csv(const std::vector<AttentionLogRow>& rows);
/// path column: "node@similarity" hops joined by ';'.
std::string residual_csv(const std::vector<ResidualLogRow>& rows);
std::string dp_csv(const std::vector<DpLogRow>& rows);
std::string timing_csv(const std::vector<StageTiming>& rows);

/// One line of the compare summary. Perplexities are final leaf test values
/// pooled over seeds; ratio = mean / mean of the reference method.
struct CompareRow {
  std::string method;
  std::size_t seeds = 0;
  double mean = 0.0;
  double std = 0.0;
  double ratio = 1.0;
};

/// Tab-separated, header: method, seeds, leaf_ppl_mean, leaf_ppl_std, ratio
std::string compare_tsv(const std::vector<CompareRow>& rows);
std::vector<CompareRow> parse_compare_tsv(const std::string& text);

/// Lowercase hex SHA-1 of "blob <size>\0<bytes>", as git computes it.
std::string content_hash(const std::string& bytes);

struct RunManifest {
  std::string method;
  ExperimentConfig config;
  std::vector<std::string> overrides;
  std::size_t workers = 1;
  std::map<std::string, std::string> extra;  // e.g. the toggled ablation axis
};

/// JSON text: resolved config, seed, node names by id, stage count, and the
/// content hash of the resolved config plus every shard's token bytes.
std::string manifest_json(const RunManifest& manifest, const ExperimentSetup& setup);

/// Writes metrics.csv, attention.csv, residuals.csv, dp.csv, timing.csv and
/// manifest.json into `dir` (created if needed).
void write_run(const std::filesystem::path& dir, const RunResult& result, const RunManifest& manifest,
               const ExperimentSetup& setup);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace worldlm
