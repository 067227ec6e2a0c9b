#pragma once

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "coq/qdmr.hpp"
#include "coq/text.hpp"

namespace coq {

struct UnreadableFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyDataset : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optional auxiliary supervision: per-sentence supporting-fact labels and
// per-token begin/end-of-answer labels, aligned with split_sentences() and
// tokenize() over the example's context.
struct AuxTargets {
  std::vector<int> sf_labels;
  std::vector<int> span_begin;
  std::vector<int> span_end;

  bool empty() const { return sf_labels.empty() && span_begin.empty() && span_end.empty(); }
  bool operator==(const AuxTargets&) const = default;
};

enum class QdmrSource { None, Gold, Silver };

inline std::string qdmr_source_name(QdmrSource s) {
  switch (s) {
    case QdmrSource::Gold: return "gold";
    case QdmrSource::Silver: return "silver";
    case QdmrSource::None: return "none";
  }
  return "none";
}

inline QdmrSource qdmr_source_from(std::string_view s) {
  if (s == "gold") return QdmrSource::Gold;
  if (s == "silver") return QdmrSource::Silver;
  return QdmrSource::None;
}

// One (question, context, answer) triple with an optional serialized
// decomposition and its provenance.
struct ExampleRecord {
  std::string id;
  std::string question;
  std::string context;
  std::string answer;
  std::optional<std::string> qdmr;  // canonical "return ...; return ..." text
  QdmrSource qdmr_source = QdmrSource::None;
  std::optional<AuxTargets> aux;

  bool operator==(const ExampleRecord&) const = default;
};

// Maps canonical record fields to the source file's key names.
struct FieldMap {
  std::string id = "id";
  std::string question = "question";
  std::string context = "context";
  std::string answer = "answer";
  std::string qdmr = "qdmr";
  std::string qdmr_source = "qdmr_source";
  std::string sf_labels = "sf_labels";
  std::string span_labels = "span_labels";
};

struct IngestResult {
  std::vector<ExampleRecord> records;
  std::vector<std::string> warnings;  // one line per skipped record
};

inline nlohmann::json record_to_json(const ExampleRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["question"] = r.question;
  j["context"] = r.context;
  j["answer"] = r.answer;
  if (r.qdmr) j["qdmr"] = *r.qdmr;
  j["qdmr_source"] = qdmr_source_name(r.qdmr_source);
  if (r.aux && !r.aux->empty()) {
    if (!r.aux->sf_labels.empty()) j["sf_labels"] = r.aux->sf_labels;
    if (!r.aux->span_begin.empty() || !r.aux->span_end.empty()) {
      j["span_labels"] = nlohmann::json{{"begin", r.aux->span_begin}, {"end", r.aux->span_end}};
    }
  }
  return j;
}

// Line-delimited ingestion. Records that fail validation are reported in
// warnings and skipped; an unreadable file or zero valid records is fatal.
inline IngestResult ingest_jsonl(const std::string& path, const FieldMap& fields = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableFile("cannot read " + path);
  IngestResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      result.warnings.push_back(where + ": malformed json, skipped");
      continue;
    }
    ExampleRecord r;
    try {
      r.id = j.at(fields.id).get<std::string>();
      r.question = j.at(fields.question).get<std::string>();
      r.context = j.at(fields.context).get<std::string>();
      r.answer = j.at(fields.answer).get<std::string>();
    } catch (const nlohmann::json::exception&) {
      result.warnings.push_back(where + ": missing required field, skipped");
      continue;
    }
    if (trim(r.answer).empty()) {
      result.warnings.push_back(where + ": empty answer, skipped");
      continue;
    }
    if (j.contains(fields.qdmr) && j[fields.qdmr].is_string()) {
      const std::string text = j[fields.qdmr].get<std::string>();
      try {
        parse_qdmr_text(text);  // validates
        r.qdmr = text;
        r.qdmr_source = QdmrSource::Gold;
      } catch (const QdmrError& e) {
        result.warnings.push_back(where + ": invalid qdmr (" + e.what() + "), field dropped");
      }
    }
    if (j.contains(fields.qdmr_source) && j[fields.qdmr_source].is_string()) {
      const QdmrSource declared = qdmr_source_from(j[fields.qdmr_source].get<std::string>());
      if (r.qdmr) r.qdmr_source = declared == QdmrSource::None ? QdmrSource::Gold : declared;
    }
    AuxTargets aux;
    if (j.contains(fields.sf_labels) && j[fields.sf_labels].is_array())
      aux.sf_labels = j[fields.sf_labels].get<std::vector<int>>();
    if (j.contains(fields.span_labels) && j[fields.span_labels].is_object()) {
      const auto& sp = j[fields.span_labels];
      if (sp.contains("begin")) aux.span_begin = sp["begin"].get<std::vector<int>>();
      if (sp.contains("end")) aux.span_end = sp["end"].get<std::vector<int>>();
    }
    if (!aux.empty()) r.aux = std::move(aux);
    result.records.push_back(std::move(r));
  }
  // Duplicate ids violate the per-split uniqueness invariant.
  std::vector<ExampleRecord> unique;
  std::unordered_set<std::string> ids;
  for (auto& r : result.records) {
    if (!ids.insert(r.id).second) {
      result.warnings.push_back(path + ": duplicate id '" + r.id + "', skipped");
      continue;
    }
    unique.push_back(std::move(r));
  }
  result.records = std::move(unique);
  if (result.records.empty()) throw EmptyDataset("no valid records in " + path);
  return result;
}

inline void export_jsonl(const std::vector<ExampleRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UnreadableFile("cannot write " + path);
  for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

}  // namespace coq
