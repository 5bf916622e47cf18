#pragma once

#include <string>
#include <vector>

#include "se3m/corpus.hpp"
#include "se3m/rng.hpp"
#include "se3m/text.hpp"

namespace se3m::synth {

/// Requirement-like sentences built from a small template grammar. Every
/// object has its own pool of verbs, so masked tokens are predictable from
/// context.
inline std::vector<std::string> requirement_sentences(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> roles = {"admin", "user", "manager", "developer", "tester"};
  static const std::vector<std::vector<std::string>> topics = {
      {"login page", "reset password", "enable captcha", "validate session"},
      {"report export", "download csv", "schedule report", "filter rows"},
      {"payment gateway", "refund order", "charge card", "verify invoice"},
      {"search index", "rebuild index", "rank results", "cache query"},
      {"build pipeline", "deploy release", "rollback build", "notify team"},
  };
  RngStream rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& topic = topics[rng.below(topics.size())];
    const std::string& role = roles[rng.below(roles.size())];
    const std::string& action = topic[1 + rng.below(topic.size() - 1)];
    out.push_back(role + " wants " + action + " on " + topic[0]);
  }
  return out;
}

/// A second grammar whose words do not overlap the requirement one.
inline std::vector<std::string> clinic_sentences(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> actors = {"nurse", "doctor", "clerk", "pharmacist"};
  static const std::vector<std::vector<std::string>> topics = {
      {"patient chart", "update allergies", "sign discharge", "review vitals"},
      {"lab sample", "label tube", "track courier", "record result"},
      {"ward bed", "assign bed", "clean ward", "transfer patient"},
  };
  RngStream rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& topic = topics[rng.below(topics.size())];
    const std::string& actor = actors[rng.below(actors.size())];
    const std::string& action = topic[1 + rng.below(topic.size() - 1)];
    out.push_back(actor + " must " + action + " in " + topic[0]);
  }
  return out;
}

/// Groups sentences into documents of `per_doc` sentences joined by '.'.
inline std::vector<std::string> as_documents(const std::vector<std::string>& sentences, std::size_t per_doc) {
  std::vector<std::string> docs;
  for (std::size_t i = 0; i < sentences.size(); i += per_doc) {
    std::string d;
    for (std::size_t k = i; k < sentences.size() && k < i + per_doc; ++k) d += sentences[k] + ". ";
    docs.push_back(d);
  }
  return docs;
}

/// Labeled requirements whose effort follows the topic, spread round-robin
/// over `projects` projects. Every `degenerate_every`-th record (if non-zero)
/// holds only stopwords.
inline LabeledCorpus labeled_corpus(std::size_t n, std::uint64_t seed, std::size_t projects = 3,
                                    std::size_t degenerate_every = 0) {
  static const double topic_effort[] = {1, 3, 5, 8, 13};
  static const std::vector<std::string> topics = {"login", "report", "payment", "search", "build"};
  const auto sentences = requirement_sentences(n, seed);
  RngStream rng = RngStream(seed).derive("effort");
  LabeledCorpus corpus;
  for (std::size_t i = 0; i < n; ++i) {
    RequirementRecord rec;
    rec.id = "r" + std::to_string(i);
    rec.project_id = "p" + std::to_string(i % projects);
    rec.text = sentences[i];
    std::size_t t = 0;
    while (rec.text.find(topics[t]) == std::string::npos && t + 1 < topics.size()) ++t;
    rec.effort = topic_effort[t] + static_cast<double>(rng.below(2));
    if (degenerate_every && i % degenerate_every == degenerate_every - 1) rec.text = "the and of";
    rec.degenerate = clean_text(rec.text).empty();
    corpus.add(rec);
  }
  return corpus;
}

}  // namespace se3m::synth
