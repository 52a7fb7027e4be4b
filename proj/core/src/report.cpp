#include "worldlm/report.hpp"

#include <openssl/sha.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace worldlm {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "experiment,method,node,round,stage,split,loss,perplexity\n";
  for (const auto& r : rows) {
    out += r.experiment + "," + r.method + "," + std::to_string(r.node) + "," + std::to_string(r.round) + "," +
           std::to_string(r.stage) + "," + r.split + "," + num(r.loss) + "," + num(r.perplexity) + "\n";
  }
  return out;
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "experiment,method,node,round,stage,split,loss,perplexity") {
    throw std::invalid_argument("metrics: unexpected header");
  }
  std::vector<MetricRow> rows;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto cells = split_line(line, ',');
    if (cells.size() != 8) throw std::invalid_argument("metrics line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      rows.push_back({cells[0], cells[1], std::stoi(cells[2]), std::stoi(cells[3]), std::stoi(cells[4]), cells[5],
                      std::stod(cells[6]), std::stod(cells[7])});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("metrics line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string attention_csv(const std::vector<AttentionLogRow>& rows) {
  std::string out = "node,round,site,layer,origin,weight\n";
  for (const auto& r : rows) {
    out += std::to_string(r.node) + "," + std::to_string(r.round) + "," + r.site + "," + r.layer + "," +
           std::to_string(r.origin) + "," + num(r.weight) + "\n";
  }
  return out;
}

std::string residual_csv(const std::vector<ResidualLogRow>& rows) {
  std::string out = "round,origin,layer,created_round,path,landed_at,outcome\n";
  for (const auto& r : rows) {
    std::string path;
    for (const auto& h : r.path) path += (path.empty() ? "" : ";") + std::to_string(h.node) + "@" + num(h.similarity);
    out += std::to_string(r.round) + "," + std::to_string(r.origin) + "," + r.layer + "," +
           std::to_string(r.created_round) + "," + path + "," + std::to_string(r.landed_at) + "," + r.outcome + "\n";
  }
  return out;
}

std::string dp_csv(const std::vector<DpLogRow>& rows) {
  std::string out = "round,node,pre_clip_norm,bound,noise_std\n";
  for (const auto& r : rows) {
    out += std::to_string(r.round) + "," + std::to_string(r.node) + "," + num(r.pre_clip_norm) + "," + num(r.bound) +
           "," + num(r.noise_std) + "\n";
  }
  return out;
}

std::string timing_csv(const std::vector<StageTiming>& rows) {
  std::string out = "round,stage,wall_seconds\n";
  for (const auto& r : rows) out += std::to_string(r.round) + "," + std::to_string(r.stage) + "," + num(r.seconds) + "\n";
  return out;
}

std::string compare_tsv(const std::vector<CompareRow>& rows) {
  std::string out = "method\tseeds\tleaf_ppl_mean\tleaf_ppl_std\tratio\n";
  for (const auto& r : rows) {
    out += r.method + "\t" + std::to_string(r.seeds) + "\t" + num(r.mean) + "\t" + num(r.std) + "\t" + num(r.ratio) +
           "\n";
  }
  return out;
}

std::vector<CompareRow> parse_compare_tsv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method\tseeds\tleaf_ppl_mean\tleaf_ppl_std\tratio") {
    throw std::invalid_argument("compare summary: unexpected header");
  }
  std::vector<CompareRow> rows;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto cells = split_line(line, '\t');
    if (cells.size() != 5) {
      throw std::invalid_argument("compare summary line " + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      rows.push_back({cells[0], std::stoul(cells[1]), std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("compare summary line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string content_hash(const std::string& bytes) {
  const std::string blob = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : digest) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 15]);
  }
  return out;
}

std::string manifest_json(const RunManifest& manifest, const ExperimentSetup& setup) {
  using nlohmann::json;
  const std::string config_text = config_to_json(manifest.config);
  std::string inputs = config_text;
  for (const auto& [id, shard] : setup.shards) {
    for (const TokenSplit* split : {&shard.train, &shard.val, &shard.test}) {
      for (const auto& seg : split->segments) {
        for (Token t : seg) {
          inputs.push_back(static_cast<char>(t & 0xff));
          inputs.push_back(static_cast<char>(t >> 8));
        }
      }
    }
  }
  json nodes = json::array();
  for (const auto& spec : setup.tree.specs()) {
    nodes.push_back({{"id", spec.id}, {"name", spec.name}, {"dataset", spec.dataset_ref},
                     {"total_steps", spec.trainer.schedule.total_steps}});
  }
  json j;
  j["format"] = "worldlm-run/1";
  j["method"] = manifest.method;
  j["seed"] = manifest.config.seed;
  j["rounds"] = manifest.config.rounds;
  j["stages"] = stage_count(setup);
  j["workers"] = manifest.workers;
  j["overrides"] = manifest.overrides;
  j["nodes"] = std::move(nodes);
  j["config"] = json::parse(config_text);
  j["inputs_hash"] = content_hash(inputs);
  for (const auto& [k, v] : manifest.extra) j["extra"][k] = v;
  return j.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_run(const std::filesystem::path& dir, const RunResult& result, const RunManifest& manifest,
               const ExperimentSetup& setup) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(result.metrics));
  write_text(dir / "attention.csv", attention_csv(result.attention));
  write_text(dir / "residuals.csv", residual_csv(result.residuals));
  write_text(dir / "dp.csv", dp_csv(result.dp));
  write_text(dir / "timing.csv", timing_csv(result.timing));
  write_text(dir / "manifest.json", manifest_json(manifest, setup));
}

}  // namespace worldlm
