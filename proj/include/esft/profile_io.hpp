// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Profile files. One adapter per line, '#' starts a comment:
//
//   [name] c1 c2 ... cL          per-layer fine-tuned expert counts
//   summary <name> <max> <avg>   only the per-adapter summary
//
// Unnamed count rows are called "adapter<k>" by position.

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "esft/analytics.hpp"
#include "esft/error.hpp"

namespace esft {

inline std::vector<AdapterProfile> parse_profiles(const std::string& text) {
  std::vector<AdapterProfile> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> words;
    for (std::string w; ls >> w;) words.push_back(w);
    if (words.empty()) continue;
    const std::string where = "profile line " + std::to_string(lineno);
    try {
      if (words[0] == "summary") {
        require(words.size() == 4, ErrorKind::kInput, where + ": expected 'summary <name> <max> <avg>'");
        std::size_t p1 = 0, p2 = 0;
        const int max = std::stoi(words[2], &p1);
        const double avg = std::stod(words[3], &p2);
        require(p1 == words[2].size() && p2 == words[3].size(), ErrorKind::kInput, where + ": bad number");
        require(max >= 0 && avg >= 0 && avg <= max, ErrorKind::kInput, where + ": need 0 <= avg <= max");
        out.push_back(AdapterProfile::from_summary(words[1], max, avg));
        continue;
      }
      std::size_t first = 0;
      std::string name = "adapter" + std::to_string(out.size());
      std::size_t pos = 0;
      try {
        (void)std::stoi(words[0], &pos);
      } catch (const std::invalid_argument&) {
        pos = 0;
      }
      if (pos != words[0].size()) {
        name = words[0];
        first = 1;
      }
      std::vector<int> counts;
      for (std::size_t w = first; w < words.size(); ++w) {
        const int c = std::stoi(words[w], &pos);
        require(pos == words[w].size() && c >= 0, ErrorKind::kInput, where + ": bad count '" + words[w] + "'");
        counts.push_back(c);
      }
      require(!counts.empty(), ErrorKind::kInput, where + ": no counts");
      out.push_back(AdapterProfile::from_counts(std::move(name), std::move(counts)));
    } catch (const std::logic_error& e) {  // stoi / stod
      raise(ErrorKind::kInput, where + ": " + e.what());
    }
  }
  return out;
}

inline std::string format_profiles(const std::vector<AdapterProfile>& profiles) {
  std::ostringstream out;
  for (const auto& p : profiles) {
    if (!p.has_layer_counts()) {
      out << "summary " << p.name << ' ' << p.summary_max << ' ' << p.summary_avg << '\n';
      continue;
    }
    out << p.name;
    for (int c : p.layer_counts) out << ' ' << c;
    out << '\n';
  }
  return out.str();
}

}  // namespace esft
