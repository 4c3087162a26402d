#include "r2p/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "r2p/concept_db.hpp"
#include "r2p/enrollment.hpp"
#include "r2p/evalkit.hpp"
#include "r2p/image.hpp"

namespace r2p::cli {

using nlohmann::json;

namespace {

constexpr const char* kDefaultFixedClock = "2024-01-01T00:00:00Z";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config_path;
  std::string backend;
  std::string db;
  std::string vlm_base_url;
  std::string embed_base_url;
  std::string vlm_script;
  std::string encoder_fixtures;
  std::optional<std::size_t> embedding_dim;
  std::string log_level;
  std::string fixed_clock;
  std::size_t jobs = 1;

  std::optional<std::size_t> k;
  std::string retrieval_mode;
  bool no_cot = false;
  bool no_fingerprints = false;
  bool no_pairwise = false;
  std::string verification;
  std::optional<double> tau;
  std::string recognition_mode;
};

struct EnrollArgs {
  std::string image;
  std::string name;
  std::string category;
  std::vector<std::string> attributes;
  std::string description;
};

struct QueryArgs {
  std::string image;
  std::string task;
  std::string target;
  std::string question;
  std::vector<std::string> choices;
  std::string trace_out;
};

struct EvalArgs {
  std::string dataset;
  std::string task = "recognition";
  std::vector<std::uint64_t> seeds = {1};
  std::string report_out;
  std::string trace_out;
};

struct SplitArgs {
  std::string images_manifest;
  std::optional<std::size_t> n_query;
  std::string out;
};

std::filesystem::path resolve_against(const std::filesystem::path& base, const std::string& value) {
  const std::filesystem::path p(value);
  return p.is_absolute() ? p : base / p;
}

template <typename T>
void read_value(const toml::table& table, std::string_view key, T& dest) {
  if (const auto v = table[key].value<T>()) dest = *v;
}

void read_millis(const toml::table& table, std::string_view key, std::chrono::milliseconds& dest) {
  if (const auto v = table[key].value<std::int64_t>()) dest = std::chrono::milliseconds(*v);
}

void set_backend(CliConfig& config, std::string_view backend) {
  if (backend == "mock") {
    config.encoder.kind = EncoderBackendConfig::Kind::kMock;
    config.vlm.kind = VlmBackendConfig::Kind::kMock;
  } else if (backend == "remote") {
    config.encoder.kind = EncoderBackendConfig::Kind::kRemote;
    config.vlm.kind = VlmBackendConfig::Kind::kRemote;
  } else {
    throw UsageError("--backend must be mock or remote, got '" + std::string(backend) + "'");
  }
}

void apply_overrides(CliConfig& config, const Overrides& o) {
  if (!o.backend.empty()) set_backend(config, o.backend);
  if (!o.db.empty()) config.db_path = o.db;
  if (!o.vlm_base_url.empty()) config.vlm.base_url = o.vlm_base_url;
  if (!o.embed_base_url.empty()) config.encoder.base_url = o.embed_base_url;
  if (!o.vlm_script.empty()) config.vlm.script_path = o.vlm_script;
  if (!o.encoder_fixtures.empty()) config.encoder.fixture_path = o.encoder_fixtures;
  if (o.embedding_dim) config.encoder.embedding_dim = *o.embedding_dim;
  if (!o.log_level.empty()) config.log_level = o.log_level;

  auto& p = config.pipeline;
  if (o.k) p.k = *o.k;
  if (!o.retrieval_mode.empty()) p.retrieval_mode = parse_retrieval_mode(o.retrieval_mode);
  if (o.no_cot) p.enable_cot = false;
  if (o.no_fingerprints) p.enable_fingerprints = false;
  if (o.no_pairwise) p.enable_pairwise = false;
  if (!o.verification.empty()) p.verification = parse_verification_strategy(o.verification);
  if (o.tau) p.pairwise_threshold = *o.tau;
  if (!o.recognition_mode.empty()) p.recognition_mode = parse_recognition_mode(o.recognition_mode);
  p.logit_ratio_literal = config.vlm.logit_ratio_literal;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

void install_logger(std::ostream& err, const std::string& level) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto logger = std::make_shared<spdlog::logger>("r2p", sink);
  logger->set_pattern("[%l] %v");
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown log level '" + level + "'");
  logger->set_level(lvl);
  spdlog::set_default_logger(std::move(logger));
}

std::filesystem::path require_db(const CliConfig& config) {
  if (config.db_path.empty()) throw UsageError("--db is required (or db_path in r2p.toml)");
  return config.db_path;
}

ConceptDatabase open_db(const std::filesystem::path& dir, bool create) {
  if (std::filesystem::exists(dir / "manifest.json")) return ConceptDatabase::load(dir);
  if (!create) throw Error(ErrorCode::kIoFailure, "no database at " + dir.string());
  return ConceptDatabase();
}

json record_summary(const ConceptRecord& r) {
  return {{"concept_id", r.concept_id},
          {"name", r.name},
          {"category", r.category},
          {"description", r.description},
          {"attributes", r.attributes},
          {"reference_image", {{"path", r.reference_image.path}, {"sha256", r.reference_image.sha256}}},
          {"enrolled_at", r.enrolled_at}};
}

struct Backends {
  std::unique_ptr<EncoderBackend> encoder;
  std::unique_ptr<VlmBackend> vlm;
  Gateways gateways;
};

Backends make_backends(const CliConfig& config, const std::filesystem::path& db_dir, bool need_vlm) {
  Backends b;
  b.encoder = make_encoder(config.encoder);
  if (need_vlm) b.vlm = make_vlm(config.vlm);
  b.gateways.encoder = b.encoder.get();
  b.gateways.vlm = b.vlm.get();
  b.gateways.reference_loader = [db_dir](const ConceptRecord& r) {
    return load_reference_image(db_dir, r.reference_image);
  };
  for (const auto& w : config_warnings(config.pipeline, *b.encoder)) spdlog::warn("{}", w);
  return b;
}

int cmd_enroll(const CliConfig& config, const EnrollArgs& args, const std::string& fixed_clock, std::ostream& out) {
  const auto db_dir = require_db(config);
  auto db = open_db(db_dir, true);
  const auto image = load_image(args.image);

  EnrollmentOptions options;
  options.reference = reference_image_handle(image);
  if (!fixed_clock.empty()) {
    options.clock = [fixed_clock] { return fixed_clock; };
    db.set_id_generator([](const ConceptRecord& r) { return sha256_hex("concept:" + fold_case(r.name)).substr(0, 32); });
  }

  auto backends = make_backends(config, db_dir, args.attributes.empty());
  ConceptRecord stored;
  if (!args.attributes.empty()) {
    const auto description = args.description.empty() ? args.name : args.description;
    stored = enroll_with_privileged_attributes(image, args.name, args.category, args.attributes, description, db,
                                               *backends.encoder, options);
  } else {
    stored = enroll_concept(image, args.name, args.category, db, *backends.vlm, *backends.encoder, options);
  }

  store_reference_image(db_dir, image);
  db.save(db_dir);
  json j = stored;
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_query(const CliConfig& config, const QueryArgs& args, std::ostream& out) {
  QueryTask task;
  if (args.task == "recognize" || args.task == "recognition") {
    if (args.target.empty()) throw UsageError("--target is required for --task recognize");
    task = QueryTask::recognition(args.target);
  } else if (args.task == "caption") {
    task = QueryTask::caption();
  } else if (args.task == "vqa") {
    if (args.question.empty() || args.choices.empty()) throw UsageError("--task vqa needs --question and --choices");
    task = QueryTask::vqa(args.question, args.choices);
  } else {
    throw UsageError("--task must be recognize, caption or vqa");
  }

  const auto db_dir = require_db(config);
  const auto db = open_db(db_dir, false);
  const auto image = load_image(args.image);
  auto backends = make_backends(config, db_dir, true);
  const auto answer = answer_query(image, task, db.snapshot(), backends.gateways, config.pipeline);

  if (!args.trace_out.empty()) write_text(args.trace_out, to_json(answer.trace).dump() + "\n");
  out << to_json(answer).dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const CliConfig& config, const EvalArgs& args, std::size_t jobs, std::ostream& out) {
  const auto task = parse_eval_task(args.task);
  const auto dataset = load_dataset(args.dataset);
  const auto db_dir = require_db(config);
  const auto db = open_db(db_dir, false);
  auto backends = make_backends(config, db_dir, true);

  EvalOptions options;
  options.seeds = args.seeds;
  options.jobs = jobs;
  if (!args.trace_out.empty()) options.trace_path = args.trace_out;

  const auto report = run_eval(dataset, task, db.snapshot(), backends.gateways, config.pipeline, options);
  const auto text = report.dump(2) + "\n";
  if (!args.report_out.empty()) write_text(args.report_out, text);
  out << text;
  return kExitOk;
}

int cmd_split(const CliConfig& config, const SplitArgs& args, std::ostream& out) {
  std::ifstream in(args.images_manifest);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + args.images_manifest);
  const auto base = std::filesystem::path(args.images_manifest).parent_path();

  std::map<std::string, std::vector<ImageEmbedding>> images;
  std::unique_ptr<EncoderBackend> encoder;
  try {
    const auto j = json::parse(in);
    for (const auto& [concept_name, entries] : j.at("concepts").items()) {
      auto& list = images[concept_name];
      for (const auto& e : entries) {
        ImageEmbedding img;
        img.image_id = e.at("id").get<std::string>();
        if (e.contains("embedding")) {
          img.embedding = Embedding::normalized(e.at("embedding").get<std::vector<double>>());
        } else {
          if (!encoder) encoder = make_encoder(config.encoder);
          img.embedding = encoder->encode_image(load_image(resolve_against(base, e.at("path").get<std::string>())));
        }
        list.push_back(std::move(img));
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "malformed images manifest: " + std::string(e.what()));
  }

  const auto text = to_json(build_split(images, args.n_query)).dump(2) + "\n";
  if (!args.out.empty()) write_text(args.out, text);
  out << text;
  return kExitOk;
}

int cmd_inspect(const CliConfig& config, std::ostream& out) {
  const auto db = open_db(require_db(config), false);
  const auto snap = db.snapshot();
  const auto& m = snap.manifest();
  json concepts = json::array();
  for (const auto& r : snap) concepts.push_back(record_summary(r));
  const json j = {{"manifest",
                   {{"schema_version", m.schema_version},
                    {"embedding_dim", m.embedding_dim},
                    {"encoder_id", m.encoder_id},
                    {"record_count", m.record_count}}},
                  {"concepts", concepts}};
  out << j.dump(2) << '\n';
  return kExitOk;
}

void print_error(std::ostream& out, std::string_view code, std::string_view message) {
  out << json{{"error", {{"code", code}, {"message", message}}}}.dump(2) << '\n';
}

}  // namespace

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str()); v && *v) return std::string(v);
  return std::nullopt;
}

void apply_config_file(CliConfig& config, const std::filesystem::path& path) {
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "cannot parse " << path.string() << ": " << e.description() << " at " << e.source().begin;
    throw Error(std::filesystem::exists(path) ? ErrorCode::kInvalidArgument : ErrorCode::kIoFailure, msg.str());
  }
  const auto base = path.parent_path();

  if (const auto v = root["db_path"].value<std::string>()) config.db_path = resolve_against(base, *v);
  read_value(root, "log_level", config.log_level);
  if (const auto v = root["backend"].value<std::string>()) set_backend(config, *v);

  if (const auto* t = root["encoder"].as_table()) {
    auto& e = config.encoder;
    read_value(*t, "base_url", e.base_url);
    read_value(*t, "api_key_env", e.api_key_env);
    read_value(*t, "model_id", e.model_id);
    if (const auto v = (*t)["embedding_dim"].value<std::int64_t>()) e.embedding_dim = static_cast<std::size_t>(*v);
    read_millis(*t, "timeout_ms", e.timeout);
    read_value(*t, "max_retries", e.max_retries);
    read_millis(*t, "initial_backoff_ms", e.initial_backoff);
    if (const auto v = (*t)["max_in_flight"].value<std::int64_t>()) e.max_in_flight = static_cast<std::size_t>(*v);
    if (const auto v = (*t)["cache_capacity"].value<std::int64_t>()) e.cache_capacity = static_cast<std::size_t>(*v);
    read_value(*t, "cross_modal", e.cross_modal);
    if (const auto v = (*t)["seed"].value<std::int64_t>()) e.seed = static_cast<std::uint64_t>(*v);
    if (const auto v = (*t)["fixture_path"].value<std::string>()) e.fixture_path = resolve_against(base, *v).string();
  }
  if (const auto* t = root["vlm"].as_table()) {
    auto& v = config.vlm;
    read_value(*t, "base_url", v.base_url);
    read_value(*t, "api_key_env", v.api_key_env);
    read_value(*t, "model_id", v.model_id);
    read_millis(*t, "timeout_ms", v.timeout);
    read_value(*t, "max_retries", v.max_retries);
    read_millis(*t, "initial_backoff_ms", v.initial_backoff);
    if (const auto n = (*t)["max_in_flight"].value<std::int64_t>()) v.max_in_flight = static_cast<std::size_t>(*n);
    read_value(*t, "top_logprobs", v.top_logprobs);
    read_value(*t, "logit_ratio_literal", v.logit_ratio_literal);
    if (const auto s = (*t)["script_path"].value<std::string>()) v.script_path = resolve_against(base, *s).string();
  }
  if (const auto* t = root["pipeline"].as_table()) {
    auto& p = config.pipeline;
    if (const auto v = (*t)["k"].value<std::int64_t>()) p.k = static_cast<std::size_t>(*v);
    if (const auto v = (*t)["retrieval_mode"].value<std::string>()) p.retrieval_mode = parse_retrieval_mode(*v);
    read_value(*t, "enable_cot", p.enable_cot);
    read_value(*t, "enable_fingerprints", p.enable_fingerprints);
    read_value(*t, "enable_pairwise", p.enable_pairwise);
    if (const auto v = (*t)["verification"].value<std::string>()) p.verification = parse_verification_strategy(*v);
    read_value(*t, "pairwise_threshold", p.pairwise_threshold);
    if (const auto v = (*t)["recognition_mode"].value<std::string>()) p.recognition_mode = parse_recognition_mode(*v);
    read_value(*t, "logits_margin", p.logits_margin);
    read_value(*t, "attribute_template", p.attribute_template);
  }
}

void apply_environment(CliConfig& config, const EnvLookup& env) {
  if (const auto v = env("R2P_VLM_BASE_URL")) config.vlm.base_url = *v;
  if (const auto v = env("R2P_VLM_API_KEY_ENV")) config.vlm.api_key_env = *v;
  if (const auto v = env("R2P_EMBED_BASE_URL")) config.encoder.base_url = *v;
  if (config.encoder.api_key_env.empty()) config.encoder.api_key_env = config.vlm.api_key_env;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownTargetConcept:
    case ErrorCode::kEmptyDatabase:
    case ErrorCode::kTooFewImages:
    case ErrorCode::kNoPositives:
    case ErrorCode::kNoNegatives:
      return kExitDomain;
    default:
      return kExitRuntime;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const EnvLookup& env) {
  CLI::App app{"Personalized concept recognition: enroll concepts, query images, evaluate."};
  app.name("r2p");
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config_path, "Config file (default: ./r2p.toml when present)");
  app.add_option("--backend", o.backend, "Gateway backends: mock or remote");
  app.add_option("--db", o.db, "Database directory");
  app.add_option("--vlm-base-url", o.vlm_base_url, "Chat completions base URL");
  app.add_option("--embed-base-url", o.embed_base_url, "Embedding service base URL");
  app.add_option("--vlm-script", o.vlm_script, "Mock VLM script (JSON)");
  app.add_option("--encoder-fixtures", o.encoder_fixtures, "Mock encoder fixture vectors (JSON)");
  app.add_option("--embedding-dim", o.embedding_dim, "Mock encoder dimension");
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error, off");
  app.add_flag("--fixed-clock{" + std::string(kDefaultFixedClock) + "}", o.fixed_clock,
               "Fixed enrollment timestamp; concept ids derive from names");
  app.add_option("--jobs", o.jobs, "Concurrent queries during eval")->check(CLI::PositiveNumber);
  app.add_option("--k", o.k, "Retrieved candidates")->check(CLI::PositiveNumber);
  app.add_option("--retrieval-mode", o.retrieval_mode, "fused, image_only, text_only, two_step[:pool]");
  app.add_flag("--no-cot", o.no_cot, "Skip attribute-focused CoT selection");
  app.add_flag("--no-fingerprints", o.no_fingerprints, "Omit fingerprint attributes from prompts");
  app.add_flag("--no-pairwise", o.no_pairwise, "Disable pairwise reasoning");
  app.add_option("--verification", o.verification, "attribute, abstention, logits_based, pairwise_always, none");
  app.add_option("--tau", o.tau, "Pairwise yes threshold for direct_pairwise recognition");
  app.add_option("--recognition-mode", o.recognition_mode, "pipeline_match or direct_pairwise");

  EnrollArgs enroll_args;
  auto* enroll = app.add_subcommand("enroll", "Enroll a concept from a reference image");
  enroll->add_option("--image", enroll_args.image, "Reference image")->required();
  enroll->add_option("--name", enroll_args.name, "Concept name")->required();
  enroll->add_option("--category", enroll_args.category, "Concept category")->required();
  enroll->add_option("--attributes", enroll_args.attributes, "Comma-separated attributes (skips the VLM)")
      ->delimiter(',');
  enroll->add_option("--description", enroll_args.description, "Description used with --attributes");

  QueryArgs query_args;
  auto* query = app.add_subcommand("query", "Answer a query about an image");
  query->add_option("--image", query_args.image, "Query image")->required();
  query->add_option("--task", query_args.task, "recognize, caption or vqa")->required();
  query->add_option("--target", query_args.target, "Concept name for recognize");
  query->add_option("--question", query_args.question, "Question for vqa");
  query->add_option("--choices", query_args.choices, "'|'-separated choices for vqa")->delimiter('|');
  query->add_option("--trace-out", query_args.trace_out, "Write the inference trace (JSONL)");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a dataset");
  eval->add_option("--dataset", eval_args.dataset, "dataset.json")->required();
  eval->add_option("--task", eval_args.task, "recognition, caption or vqa");
  eval->add_option("--seeds", eval_args.seeds, "Comma-separated seeds")->delimiter(',');
  eval->add_option("--report-out", eval_args.report_out, "Write report.json here");
  eval->add_option("--trace-out", eval_args.trace_out, "Write per-query traces (JSONL)");

  SplitArgs split_args;
  auto* split = app.add_subcommand("split", "Build a reference/query split");
  split->add_option("--images-manifest", split_args.images_manifest, "Images per concept (JSON)")->required();
  split->add_option("--n-query", split_args.n_query, "Queries kept per concept (default: all)")
      ->check(CLI::PositiveNumber);
  split->add_option("--out", split_args.out, "Write the split here");

  auto* inspect = app.add_subcommand("inspect", "Show the database contents");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  // Route logs to `err` for the duration of the command, then restore the previous logger.
  struct LoggerGuard {
    std::shared_ptr<spdlog::logger> previous = spdlog::default_logger();
    ~LoggerGuard() { spdlog::set_default_logger(previous); }
  } guard;
  install_logger(err, "warn");

  try {
    CliConfig config;
    std::filesystem::path config_file = o.config_path;
    if (config_file.empty() && std::filesystem::exists("r2p.toml")) config_file = "r2p.toml";
    if (!config_file.empty()) apply_config_file(config, config_file);
    apply_environment(config, env);
    try {
      apply_overrides(config, o);
      config.pipeline.validate();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kInvalidArgument) throw;
      throw UsageError(e.what());
    }
    install_logger(err, config.log_level);

    if (enroll->parsed()) return cmd_enroll(config, enroll_args, o.fixed_clock, out);
    if (query->parsed()) return cmd_query(config, query_args, out);
    if (eval->parsed()) return cmd_eval(config, eval_args, o.jobs, out);
    if (split->parsed()) return cmd_split(config, split_args, out);
    if (inspect->parsed()) return cmd_inspect(config, out);
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    print_error(out, "USAGE", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    spdlog::error("{}: {}", error_code_name(e.code()), e.what());
    print_error(out, error_code_name(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    print_error(out, "INTERNAL", e.what());
    return kExitRuntime;
  }
}

}  // namespace r2p::cli
