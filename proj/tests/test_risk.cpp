#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "blelab/risk.hpp"

using namespace blelab;
using namespace blelab::risk;

namespace {

constexpr Level kLevels[] = {Level::kLow, Level::kMedium, Level::kHigh};

ScenarioFacts default_facts() {
  ScenarioFacts f;
  f.pairing_mode = pairing::PairingMode::kLegacyLE;
  f.association = {pairing::Method::kJustWorks, false};
  f.always_discoverable = true;
  f.user_auth = false;
  f.end_to_end_security = false;
  return f;
}

std::vector<int> ids(const std::vector<VulnerabilityFinding>& v) {
  std::vector<int> out;
  for (const auto& f : v) out.push_back(f.id);
  return out;
}

// Set BLELAB_UPDATE_GOLDEN=1 to rewrite instead of compare.
void check_golden(const std::string& name, const std::string& actual) {
  const std::string path = std::string(BLELAB_GOLDEN_DIR) + "/" + name;
  if (std::getenv("BLELAB_UPDATE_GOLDEN")) {
    std::ofstream(path, std::ios::binary) << actual;
    return;
  }
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing golden file " << path);
  std::ostringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == actual);
}

}  // namespace

TEST_CASE("rate") {
  CHECK(rate(Level::kHigh, Level::kHigh) == Risk::kCritical);
  CHECK(rate(Level::kMedium, Level::kHigh) == Risk::kHigh);
  CHECK(rate(Level::kMedium, Level::kMedium) == Risk::kMedium);
  CHECK(rate(Level::kLow, Level::kLow) == Risk::kNote);
  CHECK(rate(Level::kHigh, Level::kLow) == Risk::kMedium);
  CHECK(rate(Level::kLow, Level::kHigh) == Risk::kMedium);
  CHECK(rate(Level::kLow, Level::kMedium) == Risk::kLow);
  CHECK(rate(Level::kMedium, Level::kLow) == Risk::kLow);
  CHECK(rate(Level::kHigh, Level::kMedium) == Risk::kHigh);
}

TEST_CASE("rate is monotone and symmetric in its arguments") {
  for (auto l : kLevels) {
    for (auto i : kLevels) {
      CHECK(rate(l, i) == rate(i, l));
      if (l != Level::kHigh) CHECK(rate(static_cast<Level>(static_cast<int>(l) + 1), i) >= rate(l, i));
      if (i != Level::kHigh) CHECK(rate(l, static_cast<Level>(static_cast<int>(i) + 1)) >= rate(l, i));
      // Risk index is the sum of the two level indices.
      CHECK(static_cast<int>(rate(l, i)) == static_cast<int>(l) + static_cast<int>(i));
    }
  }
}

TEST_CASE("catalog") {
  const auto& c = builtin_catalog();
  REQUIRE(c.size() == 5);
  CHECK(c[0].title == "Low energy legacy pairing provides no passive eavesdropping protection.");
  CHECK(c[1].title == "The Just Works pairing method provides no MITM protection.");
  CHECK(c[2].title == "No user authentication exists.");
  CHECK(c[3].title == "End-to-end security is not performed.");
  CHECK(c[4].title == "Discoverable and/or connectable devices are prone to attack.");

  const struct {
    Level l, i;
    Risk r;
  } triples[] = {
      {Level::kHigh, Level::kHigh, Risk::kCritical},   {Level::kHigh, Level::kHigh, Risk::kCritical},
      {Level::kMedium, Level::kHigh, Risk::kHigh},     {Level::kMedium, Level::kMedium, Risk::kMedium},
      {Level::kMedium, Level::kHigh, Risk::kHigh},
  };
  for (int k = 0; k < 5; ++k) {
    CHECK(c[k].id == k + 1);
    CHECK(c[k].likelihood == triples[k].l);
    CHECK(c[k].impact == triples[k].i);
    CHECK(c[k].risk == triples[k].r);
    CHECK(c[k].risk == rate(c[k].likelihood, c[k].impact));
    CHECK(c[k].description.find("  ") == std::string::npos);
    CHECK(c[k].mitigation.find("  ") == std::string::npos);
  }
  CHECK(c[4].threat_events == "Passive Eavesdropping, MitM attack");
}

TEST_CASE("applicable_findings") {
  CHECK(ids(applicable_findings(default_facts())) == std::vector<int>{1, 2, 3, 4, 5});

  auto sc = default_facts();
  sc.pairing_mode = pairing::PairingMode::kSecureConnections;
  sc.association = {pairing::Method::kPasskey, true};
  CHECK(ids(applicable_findings(sc)) == std::vector<int>{3, 4, 5});

  ScenarioFacts safe{pairing::PairingMode::kSecureConnections, {pairing::Method::kOob, true}, false, true, true};
  CHECK(applicable_findings(safe).empty());

  // Each fact toggles exactly its own finding.
  for (int bit = 0; bit < 32; ++bit) {
    ScenarioFacts f;
    f.pairing_mode = bit & 1 ? pairing::PairingMode::kLegacyLE : pairing::PairingMode::kSecureConnections;
    f.association.method = bit & 2 ? pairing::Method::kJustWorks : pairing::Method::kPasskey;
    f.user_auth = !(bit & 4);
    f.end_to_end_security = !(bit & 8);
    f.always_discoverable = bit & 16;
    std::vector<int> expect;
    for (int k = 0; k < 5; ++k) {
      if (bit & (1 << k)) expect.push_back(k + 1);
    }
    CHECK(ids(applicable_findings(f)) == expect);
  }
}

TEST_CASE("report rendering") {
  const auto facts = default_facts();
  const auto findings = applicable_findings(facts);
  const auto text = render_text(findings, facts);
  const auto json = render_json(findings, facts);
  CHECK(text == render_text(findings, facts));
  CHECK(json == render_json(findings, facts));

  std::size_t tables = 0;
  for (std::size_t p = 0; (p = text.find("| Vulnerability n.", p)) != std::string::npos; ++p) ++tables;
  CHECK(tables == 5);
  for (const char* row : {"| Likelihood", "| Technical Impact", "| Risk", "| Threat Event", "| Description",
                          "| Mitigation"}) {
    CHECK(text.find(row) != std::string::npos);
  }

  const auto j = nlohmann::json::parse(json);
  REQUIRE(j["findings"].size() == 5);
  const auto& f0 = j["findings"][0];
  std::vector<std::string> keys;
  for (const auto& [k, _] : f0.items()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  CHECK(keys == std::vector<std::string>{"description", "id", "impact", "likelihood", "mitigation", "risk",
                                         "threat_events", "title"});
  CHECK(f0["risk"] == "Critical");

  check_golden("report_default.txt", text);
  check_golden("report_default.json", json);

  ScenarioFacts safe{pairing::PairingMode::kSecureConnections, {pairing::Method::kOob, true}, false, true, true};
  const auto empty = render_text({}, safe);
  CHECK(empty.find("no applicable findings") != std::string::npos);
  CHECK(nlohmann::json::parse(render_json({}, safe))["findings"].empty());
}
