#pragma once

#include <map>
#include <string>
#include <vector>

namespace dhicm {

// Flat `key = value` config text: one pair per line, '#' starts a comment,
// blank lines ignored. The same format serves config files, checkpoint
// headers and run manifests so configs stay diffable.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> load_config_file(const std::string& path);
std::string config_to_text(const std::map<std::string, std::string>& kv);

// Applies `key=value` override strings on top of kv.
void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides);

// Rejects keys outside the known model/train key set (typo guard).
void check_known_keys(const std::map<std::string, std::string>& kv);

}  // namespace dhicm
