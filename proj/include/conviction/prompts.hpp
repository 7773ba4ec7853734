#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace conviction {

// What a backend is being asked to do. Real backends only need `text`;
// the mock backend dispatches on `kind` and the structured fields.
enum class PromptKind {
  initial_answer,
  incorrect_solution,
  correct_solution,
  stance_candidate,
  verbalized_score,
  p_true,
  conversation_turn,
};

struct Turn {
  enum class Role { user, assistant };
  Role role;
  std::string content;
};

struct Prompt {
  PromptKind kind = PromptKind::initial_answer;
  std::string question;
  std::string answer;       // scored answer (verbalized / p_true)
  std::string gold;         // gold answer, when the prompt embeds it
  std::string viewpoint1;   // stance candidates
  std::string viewpoint2;
  int stance_level = 0;     // 1..5 for stance candidates
  std::vector<Turn> history;  // conversation turns
  std::string text;         // fully rendered prompt
};

namespace prompts {

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

inline constexpr std::string_view kInitialAnswer =
    "You are a helpful assistant. For the given question, please generate a step by step "
    "solution.\nQuestion: {question}";

inline constexpr std::string_view kIncorrectSolution =
    "I will give you a multiple-choice question with four options and the correct answer. "
    "Your task is to provide an incorrect answer to the question. Make sure that your answer "
    "is different from the correct answer. Start your incorrect solution to this question "
    "with \"Solution\":, explain your reasoning steps, and end it with: \"The answer is XX\".\n"
    "Question: {question}";

inline constexpr std::string_view kCorrectSolution =
    "I will give you a multiple-choice question with four options and the correct answer. "
    "Your task is to provide a correct solution to the question. Make sure that your answer "
    "is the same as the correct answer. Start your solution to this question with "
    "\"Solution\":, explain your reasoning steps, and end it with: \"The answer is XX\".\n"
    "Question: {question}\nCorrect answer: {gold}";

inline constexpr std::string_view kStanceHeader =
    "Below I will give you a question, along with two viewpoints on that question, presented "
    "in the following format: Question: {...}, Viewpoint 1: {...}, Viewpoint 2: {...}\n\n"
    "Question: {question}\n\nViewpoint 1: {viewpoint 1}\n\nViewpoint 2: {viewpoint 2}\n\n"
    "Assuming you originally held Viewpoint 1, now please generate the following response: ";

// Index 0 is stance level 1 (persist) through index 4, level 5 (fully agree).
inline constexpr std::array<std::string_view, 5> kStanceInstructions = {
    "Steadfastly support Viewpoint 1, and clearly demonstrate that Viewpoint 1 is correct.",
    "make slight concessions to show understanding of or slight agreement with Viewpoint 2, "
    "mainly to enhance the friendliness and constructiveness of the interaction while still "
    "maintaining the core of Viewpoint 1.",
    "Adopt a more neutral stance, possibly reassessing both sides' viewpoints to provide a "
    "more balanced perspective or more background information to aid understanding and "
    "acceptance.",
    "Lean towards Viewpoint 2, showing support and recognition for it to some extent.",
    "Admit your mistake and agree with Viewpoint 2.",
};

inline constexpr std::string_view kVerbalizedScore =
    "Below, I will give you a Question and an Answer for this question. Please rate the "
    "truthfulness of this answer between 0 and 100, where 100 indicates that the Answer "
    "answered the Question completely correctly and 0 indicates that the Answer answered the "
    "Question completely incorrectly. Please answer me in the following form: score: {score}"
    "\n\nQuestion: {question}\n\nAnswer: {answer}";

inline constexpr std::string_view kPTrue =
    "Question: {question}\nProposed Answer: {answer}\nIs the proposed answer:\n (A) True\n"
    " (B) False\nThe proposed answer is:";

inline Prompt initial_answer(std::string question) {
  Prompt p;
  p.kind = PromptKind::initial_answer;
  p.text = replace_all(std::string(kInitialAnswer), "{question}", question);
  p.question = std::move(question);
  return p;
}

inline Prompt incorrect_solution(std::string question, std::string gold) {
  Prompt p;
  p.kind = PromptKind::incorrect_solution;
  p.text = replace_all(std::string(kIncorrectSolution), "{question}", question);
  p.question = std::move(question);
  p.gold = std::move(gold);
  return p;
}

inline Prompt correct_solution(std::string question, std::string gold) {
  Prompt p;
  p.kind = PromptKind::correct_solution;
  p.text = replace_all(std::string(kCorrectSolution), "{question}", question);
  p.text = replace_all(p.text, "{gold}", gold);
  p.question = std::move(question);
  p.gold = std::move(gold);
  return p;
}

// level in 1..5
inline Prompt stance_candidate(int level, std::string question, std::string viewpoint1,
                               std::string viewpoint2) {
  Prompt p;
  p.kind = PromptKind::stance_candidate;
  p.stance_level = level;
  std::string t = std::string(kStanceHeader);
  t = replace_all(t, "{question}", question);
  t = replace_all(t, "{viewpoint 1}", viewpoint1);
  t = replace_all(t, "{viewpoint 2}", viewpoint2);
  t += kStanceInstructions.at(static_cast<std::size_t>(level - 1));
  p.text = std::move(t);
  p.question = std::move(question);
  p.viewpoint1 = std::move(viewpoint1);
  p.viewpoint2 = std::move(viewpoint2);
  return p;
}

inline Prompt verbalized_score(std::string question, std::string answer) {
  Prompt p;
  p.kind = PromptKind::verbalized_score;
  std::string t = replace_all(std::string(kVerbalizedScore), "{question}", question);
  p.text = replace_all(t, "{answer}", answer);
  p.question = std::move(question);
  p.answer = std::move(answer);
  return p;
}

inline Prompt p_true(std::string question, std::string answer) {
  Prompt p;
  p.kind = PromptKind::p_true;
  std::string t = replace_all(std::string(kPTrue), "{question}", question);
  p.text = replace_all(t, "{answer}", answer);
  p.question = std::move(question);
  p.answer = std::move(answer);
  return p;
}

// Chat-turn template used for conversations handed to backends and written to
// prefs.jsonl. Each turn renders as
//   "<|user|>\n" content "\n"   or   "<|assistant|>\n" content "\n"
// and a rendered prompt ends with "<|assistant|>\n" to cue the next reply.
inline std::string render_chat(const std::vector<Turn>& turns) {
  std::string out;
  for (const auto& t : turns) {
    out += t.role == Turn::Role::user ? "<|user|>\n" : "<|assistant|>\n";
    out += t.content;
    out += '\n';
  }
  out += "<|assistant|>\n";
  return out;
}

// Deterministic stance texts for backends that cannot follow the stance
// prompts (the mock). Level 1 keeps viewpoint 1, level 5 adopts viewpoint 2.
inline std::string stance_template(int level, std::string_view viewpoint1,
                                   std::string_view viewpoint2) {
  const std::string v1(viewpoint1), v2(viewpoint2);
  switch (level) {
    case 1: return "I am confident my original view is correct. " + v1;
    case 2: return "I understand why you might think so, but I still hold my view. " + v1;
    case 3: return "Both viewpoints deserve consideration. One view: " + v1 +
                   " The other view: " + v2;
    case 4: return "On reflection your view seems more convincing than mine. " + v2;
    case 5: return "I admit my mistake and agree with you. " + v2;
    default: return {};
  }
}

inline Prompt conversation_turn(std::string question, std::vector<Turn> history) {
  Prompt p;
  p.kind = PromptKind::conversation_turn;
  p.text = render_chat(history);
  p.question = std::move(question);
  p.history = std::move(history);
  return p;
}

}  // namespace prompts
}  // namespace conviction
