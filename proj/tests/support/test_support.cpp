#include "test_support.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "r2p/image.hpp"

namespace r2p::testing {

using nlohmann::json;

TempDir::TempDir() {
  static std::mt19937_64 rng(std::random_device{}());
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto candidate = std::filesystem::temp_directory_path() / ("r2p-test-" + std::to_string(rng()));
    if (std::filesystem::create_directory(candidate)) {
      path_ = std::move(candidate);
      return;
    }
  }
  throw std::runtime_error("cannot create a temporary directory");
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

ImagePayload labeled_image(const std::string& label) { return {make_labeled_png(label), "image/png"}; }

std::vector<double> direction(std::size_t dim, double c, std::size_t axis) {
  std::vector<double> v(dim, 0.0);
  v[0] = c;
  v[axis] = std::sqrt(std::max(0.0, 1.0 - c * c));
  return v;
}

Embedding random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = n(rng);
  return Embedding::normalized(std::move(v));
}

ConceptRecord make_record(std::string id, std::string name, Embedding visual, Embedding textual,
                          std::vector<std::string> attributes) {
  ConceptRecord r;
  r.concept_id = std::move(id);
  r.name = std::move(name);
  r.category = "Object";
  r.description = "A distinctive " + r.name + ".";
  r.attributes = std::move(attributes);
  r.visual_embedding = std::move(visual);
  r.textual_embedding = std::move(textual);
  r.reference_image = {"images/" + r.concept_id + ".png", ""};
  r.enrolled_at = "2024-01-01T00:00:00Z";
  return r;
}

std::string cot_reply(const std::vector<std::pair<std::string, std::vector<std::string>>>& per_letter,
                      const std::string& answer, const std::string& reasoning) {
  json j = json::object();
  for (const auto& [letter, attrs] : per_letter) {
    std::string joined;
    for (const auto& a : attrs) joined += (joined.empty() ? "" : ", ") + a;
    j[letter] = attrs.empty() ? "None" : joined;
  }
  j["Reasoning"] = reasoning;
  j["Answer"] = answer;
  return j.dump(2);
}

std::string pairwise_reply(bool yes) {
  return json{{"Reasoning", yes ? "Same object in both images." : "Different objects."},
              {"Answer", yes ? "yes" : "no"}}
      .dump(2);
}

ScriptedTurn turn(std::optional<std::vector<std::string>> images, std::vector<std::string> contains,
                  std::string response, std::vector<std::string> excludes) {
  ScriptedTurn t;
  t.matcher.images = std::move(images);
  t.matcher.prompt_contains = std::move(contains);
  t.matcher.prompt_excludes = std::move(excludes);
  t.response_text = std::move(response);
  return t;
}

std::string pairwise_marker(const std::string& name) { return "Can you see " + name + " in this Image 1?"; }
std::string reference_label(const std::string& name) { return "ref:" + name; }

Gateways Scenario::gateways() {
  Gateways g;
  g.vlm = vlm.get();
  g.encoder = encoder.get();
  g.reference_loader = [this](const ConceptRecord& r) { return references.at(r.concept_id); };
  return g;
}

std::string Scenario::id_of(const std::string& name) const {
  const auto snap = db.snapshot();
  const auto* r = snap.find_by_name(name);
  if (!r) throw std::runtime_error("no concept " + name);
  return r->concept_id;
}

std::unique_ptr<Scenario> build_scenario(const ScenarioSpec& spec) {
  auto s = std::make_unique<Scenario>();
  const auto n = spec.names.size();
  if (n == 0 || 2 * n + 2 > kScenarioDim) throw std::invalid_argument("scenario needs 1..7 concepts");

  std::map<std::string, std::vector<double>> fixtures;
  fixtures[kQueryLabel] = direction(kScenarioDim, 1.0, 1);
  for (const auto& [text, c] : spec.attribute_cosines) fixtures[text] = direction(kScenarioDim, c, kScenarioDim - 1);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& name = spec.names[i];
    const double c = 0.9 - 0.1 * static_cast<double>(i);
    auto attrs = i < spec.fingerprints.size() ? spec.fingerprints[i] : std::vector<std::string>{name + " mark"};
    // Ids run against rank order so ranking never leans on the id tie-break.
    const std::string id = "id" + std::to_string(n - i) + "-" + name;
    s->db.upsert(make_record(id, name, Embedding::normalized(direction(kScenarioDim, c, 1 + i)),
                             Embedding::normalized(direction(kScenarioDim, c, 1 + n + i)), std::move(attrs)));
    s->references.emplace(id, labeled_image(reference_label(name)));
  }
  s->query = labeled_image(kQueryLabel);

  EncoderBackendConfig ec;
  ec.embedding_dim = kScenarioDim;
  s->encoder = std::make_unique<MockEncoder>(ec, fixtures);
  s->db.bind_encoder(s->encoder->id());

  std::vector<ScriptedTurn> script;
  std::vector<std::string> query_only = {kQueryLabel};
  auto cot = turn(query_only, {kCotMarker}, spec.cot_raw ? *spec.cot_raw : cot_reply(spec.cot_shared, spec.cot_answer));
  cot.answer_logprobs = spec.cot_answer_logprobs;
  script.push_back(std::move(cot));

  for (const auto& [name, p] : spec.pairwise_p) {
    auto t = turn(std::vector<std::string>{kQueryLabel, reference_label(name)}, {pairwise_marker(name)},
                  pairwise_reply(p >= 0.5));
    t.yes_logit = std::log(p);
    t.no_logit = std::log1p(-p);
    script.push_back(std::move(t));
  }
  for (const auto& [name, raw] : spec.pairwise_raw) {
    script.push_back(turn(std::vector<std::string>{kQueryLabel, reference_label(name)}, {pairwise_marker(name)}, raw));
  }
  if (spec.caption) script.push_back(turn(query_only, {kCaptionMarker}, *spec.caption));
  for (const auto& t : spec.extra_turns) script.push_back(t);
  s->vlm = std::make_unique<MockVlm>(std::move(script));
  return s;
}

std::size_t calls_containing(const MockVlm& vlm, const std::string& marker) {
  std::size_t n = 0;
  for (const auto& c : vlm.calls()) n += c.prompt_text.find(marker) != std::string::npos ? 1 : 0;
  return n;
}

}  // namespace r2p::testing
