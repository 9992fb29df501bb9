#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lightclip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitDivergence = 3;

/// Runs `lightclip <subcommand> ...`. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses a rectangular CSV of finite reals ('.' decimal, ',' separator).
/// Throws InputError naming the offending line on ragged or non-numeric input.
std::vector<std::vector<double>> read_csv_matrix(const std::string& path);

}  // namespace lightclip::cli
