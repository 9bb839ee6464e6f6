#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ust {

// The eight multi-task prompt templates. ASR tasks use the source-side
// fields and language only.
enum class PromptTask {
  AsrUnitToText,  // Translate [lang] unit " u " to [lang] text: " t "
  AsrTextToUnit,  // Translate [lang] text " t " to [lang] unit: " u "
  Mt,             // Translate [src] text " t " to [tgt] text: " t "
  S2st1,          // unit -> unit
  S2st2,          // unit -> source text
  S2st3,          // unit -> target text
  S2st4,          // source text -> unit
  S2st5,          // target text -> target unit
};

const char* task_name(PromptTask t);
std::optional<PromptTask> task_from_name(const std::string& name);

struct ParallelRecord {
  std::optional<std::vector<int>> src_unit;  // global unit IDs
  std::optional<std::vector<int>> tgt_unit;
  std::optional<std::string> src_text;
  std::optional<std::string> tgt_text;
  std::string src_lang;
  std::string tgt_lang;
};

// Unit sequences render as space-separated markup: "<u:3> <u:17>".
std::string unit_markup(const std::vector<int>& units);

// Full rendered training string. Throws std::invalid_argument naming the
// task and the missing field.
std::string render_prompt(PromptTask t, const ParallelRecord& r);

// The prompt up to and including the final `: " `; the completion (the
// final field plus its closing ` "`) starts right after. Training
// tokenizes the two parts separately so the loss mask lands on a token
// boundary; generation feeds only the prefix.
std::string render_prompt_prefix(PromptTask t, const ParallelRecord& r);

}  // namespace ust
