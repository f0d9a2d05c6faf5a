// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <string>
#include <string_view>

namespace nilm {

using Instant = std::chrono::sys_seconds;
using Seconds = std::chrono::seconds;

// Accepts "YYYY-MM-DDTHH:MM:SS" with an optional trailing "Z" or "+00:00";
// a space may replace the 'T'. Throws ConfigError otherwise.
Instant parse_utc(std::string_view text);
std::string format_utc(Instant t);

// Calendar fields in UTC: minute 0-59, hour 0-23, day of week 0-6 with
// Monday = 0, month 0-11.
struct CalendarFields {
  int minute;
  int hour;
  int weekday;
  int month;
};
CalendarFields calendar_fields(Instant t);

// First instant of the UTC day, ISO week (Monday) or month containing t.
Instant floor_day(Instant t);
Instant floor_week(Instant t);
Instant floor_month(Instant t);
Instant next_month(Instant month_start);

}  // namespace nilm
