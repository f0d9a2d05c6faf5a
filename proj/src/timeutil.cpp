// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/timeutil.hpp"

#include <cstdio>

#include "nilmformer/error.hpp"

namespace nilm {

using namespace std::chrono;

Instant parse_utc(std::string_view text) {
  std::string s(text);
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  if (s.size() >= 1 && s.back() == 'Z') s.pop_back();
  else if (s.size() >= 6 && s.compare(s.size() - 6, 6, "+00:00") == 0) s.resize(s.size() - 6);
  int Y = 0, M = 0, D = 0, h = 0, m = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%n", &Y, &M, &D, &sep, &h, &m, &sec, &consumed) != 7 ||
      consumed != static_cast<int>(s.size()) || (sep != 'T' && sep != ' '))
    throw ConfigError("invalid UTC timestamp '" + std::string(text) + "'");
  const year_month_day ymd{year{Y}, month{static_cast<unsigned>(M)}, day{static_cast<unsigned>(D)}};
  if (!ymd.ok() || h > 23 || m > 59 || sec > 59 || h < 0 || m < 0 || sec < 0)
    throw ConfigError("invalid UTC timestamp '" + std::string(text) + "'");
  return sys_days{ymd} + hours{h} + minutes{m} + seconds{sec};
}

std::string format_utc(Instant t) {
  const auto dp = floor<days>(t);
  const year_month_day ymd{dp};
  const hh_mm_ss hms{t - dp};
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02ld:%02ld:%02ldZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<long>(hms.hours().count()), static_cast<long>(hms.minutes().count()),
                static_cast<long>(hms.seconds().count()));
  return buf;
}

CalendarFields calendar_fields(Instant t) {
  const auto dp = floor<days>(t);
  const year_month_day ymd{dp};
  const hh_mm_ss hms{t - dp};
  return {static_cast<int>(hms.minutes().count()), static_cast<int>(hms.hours().count()),
          static_cast<int>(weekday{dp}.iso_encoding()) - 1, static_cast<int>(static_cast<unsigned>(ymd.month())) - 1};
}

Instant floor_day(Instant t) { return floor<days>(t); }

Instant floor_week(Instant t) {
  const auto dp = floor<days>(t);
  return dp - days{weekday{dp}.iso_encoding() - 1};
}

Instant floor_month(Instant t) {
  const year_month_day ymd{floor<days>(t)};
  return sys_days{ymd.year() / ymd.month() / 1};
}

Instant next_month(Instant month_start) {
  const year_month_day ymd{floor<days>(month_start)};
  return sys_days{(ymd.year() / ymd.month() / 1) + months{1}};
}

}  // namespace nilm
