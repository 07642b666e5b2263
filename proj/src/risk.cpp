#include "blelab/risk.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

namespace blelab::risk {

std::string_view to_string(Level level) {
  switch (level) {
    case Level::kLow: return "Low";
    case Level::kMedium: return "Medium";
    case Level::kHigh: return "High";
  }
  return "?";
}

std::string_view to_string(Risk risk) {
  switch (risk) {
    case Risk::kNote: return "Note";
    case Risk::kLow: return "Low";
    case Risk::kMedium: return "Medium";
    case Risk::kHigh: return "High";
    case Risk::kCritical: return "Critical";
  }
  return "?";
}

Risk rate(Likelihood likelihood, Impact impact) {
  // Rows: impact; columns: likelihood.
  static constexpr Risk kMatrix[3][3] = {
      {Risk::kNote, Risk::kLow, Risk::kMedium},
      {Risk::kLow, Risk::kMedium, Risk::kHigh},
      {Risk::kMedium, Risk::kHigh, Risk::kCritical},
  };
  return kMatrix[static_cast<int>(impact)][static_cast<int>(likelihood)];
}

const std::vector<VulnerabilityFinding>& builtin_catalog() {
  static const std::vector<VulnerabilityFinding> kCatalog = {
      {1, "Low energy legacy pairing provides no passive eavesdropping protection.", Level::kHigh, Level::kHigh,
       Risk::kCritical, "Passive Eavesdropping",
       "Eavesdroppers can capture secret keys (i.e., LTK) distributed during low energy pairing.",
       "BLE devices should be paired by using an algorithm that provides a mechanism to exchange keys over an "
       "unsecured channel. For instance the ECDH."},
      {2, "The Just Works pairing method provides no MITM protection.", Level::kHigh, Level::kHigh, Risk::kCritical,
       "MitM attack", "MITM attackers can capture and manipulate data transmitted between trusted devices.",
       "Low energy devices should be paired in a secure environment to minimize the risk of eavesdropping and MITM "
       "attacks. Just Works pairing should not be used for low energy."},
      {3, "No user authentication exists.", Level::kMedium, Level::kHigh, Risk::kHigh, "Pairing Eavesdropping",
       "Only device authentication is provided by the specification.",
       "Application-level security, including user authentication, can be added via overlay by the application "
       "developer."},
      {4, "End-to-end security is not performed.", Level::kMedium, Level::kMedium, Risk::kMedium, "MitM attack",
       "Only individual links are encrypted and authenticated. Data is decrypted at intermediate points.",
       "End-to-end security on top of the Bluetooth stack can be provided by use of additional security controls."},
      {5, "Discoverable and/or connectable devices are prone to attack.", Level::kMedium, Level::kHigh, Risk::kHigh,
       "Passive Eavesdropping, MitM attack",
       "A hacker can try to take over any discoverable and/or connectable BLE device, and then he can get access to "
       "all the information.",
       "Any device that must go into discoverable or connectable mode to pair or connect should only do so for a "
       "minimal amount of time. A device should not be in discoverable or connectable mode all the time."},
  };
  return kCatalog;
}

std::vector<VulnerabilityFinding> applicable_findings(const ScenarioFacts& f) {
  const bool applies[] = {
      f.pairing_mode == pairing::PairingMode::kLegacyLE,
      f.association.method == pairing::Method::kJustWorks,
      !f.user_auth,
      !f.end_to_end_security,
      f.always_discoverable,
  };
  std::vector<VulnerabilityFinding> out;
  for (const auto& v : builtin_catalog()) {
    if (applies[v.id - 1]) out.push_back(v);
  }
  return out;
}

namespace {

nlohmann::ordered_json facts_json(const ScenarioFacts& f) {
  nlohmann::ordered_json j;
  j["pairing_mode"] = to_string(f.pairing_mode);
  j["association_method"] = to_string(f.association.method);
  j["authenticated"] = f.association.authenticated;
  j["always_discoverable"] = f.always_discoverable;
  j["user_auth"] = f.user_auth;
  j["end_to_end_security"] = f.end_to_end_security;
  return j;
}

}  // namespace

std::string render_json(const std::vector<VulnerabilityFinding>& findings, const ScenarioFacts& facts) {
  nlohmann::ordered_json j;
  j["scenario"] = facts_json(facts);
  j["findings"] = nlohmann::ordered_json::array();
  for (const auto& v : findings) {
    nlohmann::ordered_json e;
    e["id"] = v.id;
    e["title"] = v.title;
    e["likelihood"] = to_string(v.likelihood);
    e["impact"] = to_string(v.impact);
    e["risk"] = to_string(v.risk);
    e["threat_events"] = v.threat_events;
    e["description"] = v.description;
    e["mitigation"] = v.mitigation;
    j["findings"].push_back(e);
  }
  return j.dump(2) + "\n";
}

std::string render_text(const std::vector<VulnerabilityFinding>& findings, const ScenarioFacts& f) {
  std::ostringstream out;
  out << "BLE vulnerability assessment\n";
  out << "pairing mode: " << to_string(f.pairing_mode) << ", association: " << to_string(f.association.method)
      << ", always discoverable: " << (f.always_discoverable ? "yes" : "no")
      << ", user auth: " << (f.user_auth ? "yes" : "no")
      << ", end-to-end security: " << (f.end_to_end_security ? "yes" : "no") << "\n\n";
  if (findings.empty()) {
    out << "no applicable findings\n";
    return out.str();
  }
  const std::string rule(78, '-');
  for (const auto& v : findings) {
    auto row = [&](std::string_view label, std::string_view value) {
      out << "| " << label << std::string(18 - label.size(), ' ') << "| " << value << "\n";
    };
    out << rule << "\n| Vulnerability n." << v.id << "\n" << rule << "\n";
    row("Vulnerability", v.title);
    row("Likelihood", to_string(v.likelihood));
    row("Technical Impact", to_string(v.impact));
    row("Risk", to_string(v.risk));
    row("Threat Event", v.threat_events);
    row("Description", v.description);
    row("Mitigation", v.mitigation);
    out << rule << "\n\n";
  }
  return out.str();
}

}  // namespace blelab::risk
