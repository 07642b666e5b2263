#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "blelab/pairing.hpp"

namespace blelab::risk {

enum class Level { kLow, kMedium, kHigh };
using Likelihood = Level;
using Impact = Level;

enum class Risk { kNote, kLow, kMedium, kHigh, kCritical };

std::string_view to_string(Level level);
std::string_view to_string(Risk risk);

// OWASP overall-risk matrix.
Risk rate(Likelihood likelihood, Impact impact);

struct VulnerabilityFinding {
  int id = 0;
  std::string title;
  Likelihood likelihood = Level::kLow;
  Impact impact = Level::kLow;
  Risk risk = Risk::kNote;
  std::string threat_events;
  std::string description;
  std::string mitigation;
};

// The five findings of the BLE 4.1 heart-rate assessment, text as published.
const std::vector<VulnerabilityFinding>& builtin_catalog();

struct ScenarioFacts {
  pairing::PairingMode pairing_mode = pairing::PairingMode::kLegacyLE;
  pairing::AssociationMethod association;
  bool always_discoverable = true;
  bool user_auth = false;
  bool end_to_end_security = false;
};

// 1: legacy pairing, 2: Just Works, 3: no user auth, 4: no end-to-end
// security, 5: always discoverable.
std::vector<VulnerabilityFinding> applicable_findings(const ScenarioFacts& facts);

std::string render_json(const std::vector<VulnerabilityFinding>& findings, const ScenarioFacts& facts);
std::string render_text(const std::vector<VulnerabilityFinding>& findings, const ScenarioFacts& facts);

}  // namespace blelab::risk
