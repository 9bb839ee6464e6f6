#include "ust/prompts.hpp"

#include <stdexcept>

namespace ust {

const char* task_name(PromptTask t) {
  switch (t) {
    case PromptTask::AsrUnitToText: return "asr-u2t";
    case PromptTask::AsrTextToUnit: return "asr-t2u";
    case PromptTask::Mt: return "mt";
    case PromptTask::S2st1: return "s2st-1";
    case PromptTask::S2st2: return "s2st-2";
    case PromptTask::S2st3: return "s2st-3";
    case PromptTask::S2st4: return "s2st-4";
    case PromptTask::S2st5: return "s2st-5";
  }
  return "?";
}

std::optional<PromptTask> task_from_name(const std::string& name) {
  for (PromptTask t : {PromptTask::AsrUnitToText, PromptTask::AsrTextToUnit, PromptTask::Mt,
                       PromptTask::S2st1, PromptTask::S2st2, PromptTask::S2st3, PromptTask::S2st4,
                       PromptTask::S2st5}) {
    if (name == task_name(t)) return t;
  }
  return std::nullopt;
}

std::string unit_markup(const std::vector<int>& units) {
  std::string s;
  for (size_t i = 0; i < units.size(); ++i) {
    if (i) s += ' ';
    s += "<u:" + std::to_string(units[i]) + ">";
  }
  return s;
}

namespace {

// Which record field fills each side of `Translate <from> to <to>`.
enum class Side { SrcUnit, TgtUnit, SrcText, TgtText };

struct Shape {
  Side from, to;
};

Shape shape_for(PromptTask t) {
  switch (t) {
    case PromptTask::AsrUnitToText: return {Side::SrcUnit, Side::SrcText};
    case PromptTask::AsrTextToUnit: return {Side::SrcText, Side::SrcUnit};
    case PromptTask::Mt: return {Side::SrcText, Side::TgtText};
    case PromptTask::S2st1: return {Side::SrcUnit, Side::TgtUnit};
    case PromptTask::S2st2: return {Side::SrcUnit, Side::SrcText};
    case PromptTask::S2st3: return {Side::SrcUnit, Side::TgtText};
    case PromptTask::S2st4: return {Side::SrcText, Side::TgtUnit};
    case PromptTask::S2st5: return {Side::TgtText, Side::TgtUnit};
  }
  throw std::invalid_argument("render_prompt: unknown task");
}

bool is_unit(Side s) { return s == Side::SrcUnit || s == Side::TgtUnit; }

const char* field_name(Side s) {
  switch (s) {
    case Side::SrcUnit: return "src_unit";
    case Side::TgtUnit: return "tgt_unit";
    case Side::SrcText: return "src_text";
    case Side::TgtText: return "tgt_text";
  }
  return "?";
}

const std::string& lang_of(Side s, const ParallelRecord& r) {
  return (s == Side::TgtUnit || s == Side::TgtText) ? r.tgt_lang : r.src_lang;
}

std::string value_of(PromptTask t, Side s, const ParallelRecord& r) {
  if (is_unit(s)) {
    const auto& u = s == Side::SrcUnit ? r.src_unit : r.tgt_unit;
    if (!u || u->empty()) {
      throw std::invalid_argument(std::string("render_prompt: ") + task_name(t) + " needs " +
                                  field_name(s));
    }
    return unit_markup(*u);
  }
  const auto& txt = s == Side::SrcText ? r.src_text : r.tgt_text;
  if (!txt || txt->empty()) {
    throw std::invalid_argument(std::string("render_prompt: ") + task_name(t) + " needs " +
                                field_name(s));
  }
  return *txt;
}

}  // namespace

std::string render_prompt_prefix(PromptTask t, const ParallelRecord& r) {
  const Shape sh = shape_for(t);
  return "Translate " + lang_of(sh.from, r) + (is_unit(sh.from) ? " unit \" " : " text \" ") +
         value_of(t, sh.from, r) + " \" to " + lang_of(sh.to, r) +
         (is_unit(sh.to) ? " unit: \" " : " text: \" ");
}

std::string render_prompt(PromptTask t, const ParallelRecord& r) {
  const Shape sh = shape_for(t);
  return render_prompt_prefix(t, r) + value_of(t, sh.to, r) + " \"";
}

}  // namespace ust
