// Fixed token vocabulary for the arithmetic-chain task. Numbers are rendered
// one digit per token so the model has to carry arithmetic state itself.
#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace aftlab {

using TokenSeq = std::vector<int>;

class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(symbols_.size()); }

  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }
  int q_marker() const { return 3; }
  int a_marker() const { return 4; }
  int answer_marker() const { return 5; }
  int equals() const { return 6; }
  int step_sep() const { return 7; }
  int plus() const { return 8; }
  int minus() const { return 9; }
  int times() const { return 10; }

  int digit(int d) const {
    if (d < 0 || d > 9) throw std::out_of_range("digit out of range: " + std::to_string(d));
    return 11 + d;
  }
  bool is_digit(int id) const { return id >= 11 && id <= 20; }
  int digit_value(int id) const { return id - 11; }

  int op_token(char op) const;
  char op_char(int id) const;

  const std::string& symbol(int id) const;
  int id(const std::string& symbol) const;

  // Space-separated text form used in JSONL files.
  std::string render(const TokenSeq& tokens) const;
  TokenSeq parse(const std::string& text) const;

  // Digits of n, most significant first, no leading zeros ("0" for 0).
  TokenSeq digits_of(int n) const;

 private:
  Vocabulary();
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace aftlab
